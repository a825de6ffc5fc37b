//! Domain types shared by every pipeline stage: probability fields, label
//! masks, patch grids, potential weights and the pipeline configuration.
//!
//! All types are immutable after construction and safe to share across
//! threads. Constructors validate their invariants, so holding a value means
//! the invariants hold.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Class index of the normal (background) class.
pub const CLASS_NORMAL: u8 = 0;
/// Class index of the abnormal (foreground) class.
pub const CLASS_ABNORMAL: u8 = 1;

/// Per-site probability vectors must sum to 1 within this tolerance.
pub const PROB_SUM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("data length {actual} does not match {height}x{width}x{num_classes}")]
    DimensionMismatch {
        height: usize,
        width: usize,
        num_classes: usize,
        actual: usize,
    },
    #[error("zero-area map ({height}x{width})")]
    EmptyMap { height: usize, width: usize },
    #[error("num_classes must be in 2..=255, got {0}")]
    BadClassCount(usize),
    #[error("site ({row},{col}) probabilities sum to {sum:.7} (expected 1 within {tolerance})")]
    NotNormalized {
        row: usize,
        col: usize,
        sum: f64,
        tolerance: f64,
    },
    #[error("value {value} at site ({row},{col}) class {class} lies outside [0,1]")]
    OutOfRange {
        row: usize,
        col: usize,
        class: usize,
        value: f32,
    },
    #[error("label {label} at site ({row},{col}) exceeds class count {num_classes}")]
    LabelOutOfRange {
        row: usize,
        col: usize,
        label: u8,
        num_classes: usize,
    },
    #[error("weight {name} must be nonnegative, got {value}")]
    NegativeWeight { name: &'static str, value: f64 },
    #[error("{field} must lie strictly inside (0,1), got {value}")]
    ThresholdOutOfRange { field: &'static str, value: f64 },
    #[error("epsilon must be positive and finite, got {0}")]
    BadEpsilon(f64),
    #[error("patch size must be at least 1")]
    ZeroPatchSize,
    #[error("pixel window must be odd and at least 3, got {0}")]
    BadWindow(usize),
    #[error("{window}x{window} window exceeds the {height}x{width} image in both dimensions")]
    WindowTooLarge {
        window: usize,
        height: usize,
        width: usize,
    },
    #[error(
        "{what} {index} is {actual_height}x{actual_width}x{actual_classes}, \
         expected {expected_height}x{expected_width}x{expected_classes}"
    )]
    ShapeMismatch {
        what: &'static str,
        index: usize,
        expected_height: usize,
        expected_width: usize,
        expected_classes: usize,
        actual_height: usize,
        actual_width: usize,
        actual_classes: usize,
    },
    #[error("patch field is {rows}x{cols}, expected {expected_rows}x{expected_cols} for this image and patch layout")]
    PatchFieldMismatch {
        rows: usize,
        cols: usize,
        expected_rows: usize,
        expected_cols: usize,
    },
    #[error("{0} must not be empty")]
    EmptyInput(&'static str),
    #[error("expected a 2-class input, got {0} classes")]
    NotTwoClass(usize),
    #[error("patch size {patch_size} exceeds the {height}x{width} image")]
    PatchSizeExceedsImage {
        patch_size: usize,
        height: usize,
        width: usize,
    },
    #[error("patch {patch} has {actual} class probabilities, expected {expected}")]
    ClassCountMismatch {
        patch: usize,
        expected: usize,
        actual: usize,
    },
    #[error("patch {patch} class {class} probability {value} lies outside [0,1]")]
    BadProbability {
        patch: usize,
        class: usize,
        value: f64,
    },
    #[error("patch {patch} probabilities sum to {sum:.7} (expected 1 within {tolerance})")]
    PatchNotNormalized {
        patch: usize,
        sum: f64,
        tolerance: f64,
    },
    #[error("no ground-truth label for image '{0}'")]
    UnmatchedImage(String),
    #[error("decision for image '{image_id}' declares predicted_class {predicted}, but its scores arg-max to {argmax}")]
    InconsistentDecision {
        image_id: String,
        predicted: usize,
        argmax: usize,
    },
    #[error("noise level must lie in [0,1], got {0}")]
    BadNoise(f64),
    #[error("could not hit the foreground band [{lo}, {hi}] within {tries} tries")]
    BandUnreachable { lo: f64, hi: f64, tries: usize },
    #[error("exhaustive enumeration supports at most {limit} sites, got {sites}")]
    TooManySites { sites: usize, limit: usize },
    #[error("enumerating {num_classes} classes over {sites} sites is too large")]
    EnumerationTooLarge { num_classes: usize, sites: usize },
}

/// A per-site, per-class probability field at pixel or patch resolution.
///
/// Values are stored row-major with the class index varying fastest. Every
/// site carries a probability distribution over the classes: all values in
/// [0,1] and each site summing to 1 within [`PROB_SUM_TOLERANCE`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    num_classes: usize,
    data: Vec<f32>,
}

impl ProbMap {
    /// Build a map from raw row-major, class-fastest data, validating every
    /// invariant.
    pub fn new(
        height: usize,
        width: usize,
        num_classes: usize,
        data: Vec<f32>,
    ) -> Result<Self, CoreError> {
        let map = ProbMap {
            height,
            width,
            num_classes,
            data,
        };
        map.check()?;
        Ok(map)
    }

    /// Build a map by evaluating `f(row, col, class)` at every slot.
    pub fn from_fn(
        height: usize,
        width: usize,
        num_classes: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self, CoreError> {
        let mut data = Vec::with_capacity(height * width * num_classes);
        for row in 0..height {
            for col in 0..width {
                for class in 0..num_classes {
                    data.push(f(row, col, class));
                }
            }
        }
        Self::new(height, width, num_classes, data)
    }

    /// A map with the same distribution at every site.
    pub fn constant(
        height: usize,
        width: usize,
        site_probs: &[f32],
    ) -> Result<Self, CoreError> {
        Self::from_fn(height, width, site_probs.len(), |_, _, c| site_probs[c])
    }

    fn check(&self) -> Result<(), CoreError> {
        if self.height == 0 || self.width == 0 {
            return Err(CoreError::EmptyMap {
                height: self.height,
                width: self.width,
            });
        }
        // Labels are stored byte-wide, so the class count is capped at 255.
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(CoreError::BadClassCount(self.num_classes));
        }
        let expected = self.height * self.width * self.num_classes;
        if self.data.len() != expected {
            return Err(CoreError::DimensionMismatch {
                height: self.height,
                width: self.width,
                num_classes: self.num_classes,
                actual: self.data.len(),
            });
        }
        let mut worst: Option<(usize, usize, f64)> = None;
        for row in 0..self.height {
            for col in 0..self.width {
                let site = self.site(row, col);
                let mut sum = 0.0f64;
                for (class, &value) in site.iter().enumerate() {
                    if !(0.0..=1.0).contains(&value) {
                        return Err(CoreError::OutOfRange {
                            row,
                            col,
                            class,
                            value,
                        });
                    }
                    sum += f64::from(value);
                }
                let err = (sum - 1.0).abs();
                if worst.is_none_or(|(_, _, w)| err > (w - 1.0).abs()) {
                    worst = Some((row, col, sum));
                }
            }
        }
        if let Some((row, col, sum)) = worst {
            if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
                return Err(CoreError::NotNormalized {
                    row,
                    col,
                    sum,
                    tolerance: PROB_SUM_TOLERANCE,
                });
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// The probability vector of one site.
    pub fn site(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.num_classes;
        &self.data[start..start + self.num_classes]
    }

    pub fn prob(&self, row: usize, col: usize, class: usize) -> f32 {
        self.data[(row * self.width + col) * self.num_classes + class]
    }
}

/// Re-check every [`ProbMap`] invariant, passing the map through unchanged.
///
/// Maps built through the constructors are always valid; this is the entry
/// point for data arriving from outside (files, FFI).
pub fn validate_probmap(map: ProbMap) -> Result<ProbMap, CoreError> {
    map.check()?;
    Ok(map)
}

/// A per-pixel class assignment: the MAP segmentation / attention mask.
///
/// Labels are byte-wide class indices, row-major. Class 0 is normal, class 1
/// abnormal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self, CoreError> {
        if height == 0 || width == 0 {
            return Err(CoreError::EmptyMap { height, width });
        }
        if labels.len() != height * width {
            return Err(CoreError::DimensionMismatch {
                height,
                width,
                num_classes: 1,
                actual: labels.len(),
            });
        }
        Ok(LabelMask {
            height,
            width,
            labels,
        })
    }

    /// A mask with every pixel set to `label`.
    pub fn filled(height: usize, width: usize, label: u8) -> Result<Self, CoreError> {
        Self::new(height, width, vec![label; height * width])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> u8,
    ) -> Result<Self, CoreError> {
        let mut labels = Vec::with_capacity(height * width);
        for row in 0..height {
            for col in 0..width {
                labels.push(f(row, col));
            }
        }
        Self::new(height, width, labels)
    }

    /// Check that every label lies below `num_classes`.
    pub fn validate_classes(&self, num_classes: usize) -> Result<(), CoreError> {
        for row in 0..self.height {
            for col in 0..self.width {
                let label = self.label(row, col);
                if usize::from(label) >= num_classes {
                    return Err(CoreError::LabelOutOfRange {
                        row,
                        col,
                        label,
                        num_classes,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    pub fn count_label(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Share of pixels labeled abnormal (class 1).
    pub fn foreground_fraction(&self) -> f64 {
        self.count_label(CLASS_ABNORMAL) as f64 / self.labels.len() as f64
    }
}

/// All exponent weights of the hierarchical CRF.
///
/// The JSON field names (`w_V`, `w_E`, `w_VP`, `w_EP`, `w_m`, `w_mn`) are the
/// stable on-disk schema; the Rust names describe the potential each weight
/// scales. `w_m` / `w_mn` carry one weight per patch-level backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HcrfWeights {
    #[serde(rename = "w_V")]
    pub pixel_unary: f64,
    #[serde(rename = "w_E")]
    pub pixel_binary: f64,
    #[serde(rename = "w_VP")]
    pub patch_unary: f64,
    #[serde(rename = "w_EP")]
    pub patch_binary: f64,
    #[serde(rename = "w_m")]
    pub backbone_unary: [f64; 3],
    #[serde(rename = "w_mn")]
    pub backbone_binary: [f64; 3],
}

impl Default for HcrfWeights {
    fn default() -> Self {
        HcrfWeights {
            pixel_unary: 1.0,
            pixel_binary: 1.0,
            patch_unary: 1.0,
            patch_binary: 1.0,
            backbone_unary: [1.0; 3],
            backbone_binary: [1.0; 3],
        }
    }
}

impl HcrfWeights {
    pub fn validate(&self) -> Result<(), CoreError> {
        let named = [
            ("w_V", self.pixel_unary),
            ("w_E", self.pixel_binary),
            ("w_VP", self.patch_unary),
            ("w_EP", self.patch_binary),
            ("w_m[0]", self.backbone_unary[0]),
            ("w_m[1]", self.backbone_unary[1]),
            ("w_m[2]", self.backbone_unary[2]),
            ("w_mn[0]", self.backbone_binary[0]),
            ("w_mn[1]", self.backbone_binary[1]),
            ("w_mn[2]", self.backbone_binary[2]),
        ];
        for (name, value) in named {
            if value < 0.0 || !value.is_finite() {
                return Err(CoreError::NegativeWeight { name, value });
            }
        }
        Ok(())
    }

    /// The four potential-combination weights multiplied by `factor`.
    ///
    /// The backbone triples are inner exponents of the patch terms, not part
    /// of the linear combination, and stay unchanged — that is exactly what
    /// makes MAP labels invariant under positive rescaling: every log-score
    /// scales by the same `factor`, so per-site arg-max orderings survive.
    pub fn scaled(&self, factor: f64) -> Self {
        HcrfWeights {
            pixel_unary: self.pixel_unary * factor,
            pixel_binary: self.pixel_binary * factor,
            patch_unary: self.patch_unary * factor,
            patch_binary: self.patch_binary * factor,
            backbone_unary: self.backbone_unary,
            backbone_binary: self.backbone_binary,
        }
    }
}

/// One tile of a [`PatchGrid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub row: usize,
    pub col: usize,
    pub abnormal_fraction: f64,
    pub is_attention: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_probs: Option<Vec<f32>>,
}

/// The tiling of an image into non-overlapping `patch_size` squares with
/// per-patch attention flags.
///
/// Trailing pixels that do not fill a whole tile belong to no patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub rows: usize,
    pub cols: usize,
    pub patches: Vec<PatchRecord>,
}

impl PatchGrid {
    /// The record at tile (row, col). Panics if out of the grid.
    pub fn get(&self, row: usize, col: usize) -> &PatchRecord {
        &self.patches[row * self.cols + col]
    }

    pub fn attention_patches(&self) -> impl Iterator<Item = &PatchRecord> {
        self.patches.iter().filter(|p| p.is_attention)
    }
}

/// Number of whole tiles that fit in an image: `(floor(h/ps), floor(w/ps))`.
///
/// `patch_size` must be nonzero.
pub fn patch_grid_dims(height: usize, width: usize, patch_size: usize) -> (usize, usize) {
    (height / patch_size, width / patch_size)
}

/// How a patch-resolution field is spread back over pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchMode {
    /// Each pixel inherits the value of its containing tile.
    Grid,
    /// Each pixel inherits the value of the patch centered on it. Requires a
    /// dense patch field computed at pixel stride (rows = height,
    /// cols = width).
    Centered,
}

/// Deterministic rule for resolving exact score ties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    LowestIndex,
    HighestIndex,
}

/// Dataset-level class of a whole image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLabel {
    Normal,
    Abnormal,
}

impl ClassLabel {
    pub fn class_index(self) -> usize {
        match self {
            ClassLabel::Normal => usize::from(CLASS_NORMAL),
            ClassLabel::Abnormal => usize::from(CLASS_ABNORMAL),
        }
    }
}

/// Tunables of the whole pipeline. Every field has a default, so `{}` is a
/// valid JSON config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Side length of a square tile, in pixels.
    pub patch_size: usize,
    /// A tile is an attention patch when its abnormal fraction strictly
    /// exceeds this proportion.
    pub attention_threshold: f64,
    /// A pixel is abnormal when its posterior abnormal probability strictly
    /// exceeds this threshold.
    pub binarization_threshold: f64,
    pub patch_mode: PatchMode,
    /// Probabilities are clamped to at least this value before any log.
    pub epsilon: f64,
    pub tie_break: TieBreak,
    /// Side length of the pixel-binary averaging window (odd, >= 3). The
    /// default 7x7 box averages the 48 surrounding pixels.
    pub pixel_window: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            patch_size: 256,
            attention_threshold: 0.5,
            binarization_threshold: 0.5,
            patch_mode: PatchMode::Grid,
            epsilon: 1e-12,
            tie_break: TieBreak::LowestIndex,
            pixel_window: 7,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.patch_size == 0 {
            return Err(CoreError::ZeroPatchSize);
        }
        for (field, value) in [
            ("attention_threshold", self.attention_threshold),
            ("binarization_threshold", self.binarization_threshold),
        ] {
            if value.is_nan() || value <= 0.0 || value >= 1.0 {
                return Err(CoreError::ThresholdOutOfRange { field, value });
            }
        }
        if self.epsilon <= 0.0 || !self.epsilon.is_finite() {
            return Err(CoreError::BadEpsilon(self.epsilon));
        }
        if self.pixel_window < 3 || self.pixel_window.is_multiple_of(2) {
            return Err(CoreError::BadWindow(self.pixel_window));
        }
        Ok(())
    }
}
