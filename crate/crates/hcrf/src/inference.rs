//! Fusing the four potential fields into a per-pixel posterior and reading
//! off the MAP labeling.
//!
//! Because the binary potentials are neighborhood averages of fixed unary
//! probabilities (not functions of the neighboring labels), the model
//! factorizes over sites: the global MAP labeling is the per-site arg max and
//! the per-site normalizer plays the role of the partition function. All
//! score accumulation happens on 64-bit logs; probabilities only materialize
//! after the per-site log-sum-exp.

use crate::potentials::{
    broadcast_patch_field, patch_binary, patch_unary, pixel_binary, pixel_unary, PotentialField,
};
use crate::types::{CoreError, HcrfWeights, LabelMask, PipelineConfig, ProbMap, TieBreak};

/// Per-pixel class posterior, normalized per site.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    height: usize,
    width: usize,
    num_classes: usize,
    probs: Vec<f64>,
}

impl Posterior {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, row: usize, col: usize, class: usize) -> f64 {
        self.probs[(row * self.width + col) * self.num_classes + class]
    }

    /// The probability vector of one site.
    pub fn site(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.num_classes;
        &self.probs[start..start + self.num_classes]
    }

    /// Downcast to the 32-bit interchange representation.
    pub fn to_probmap(&self) -> Result<ProbMap, CoreError> {
        let data = self.probs.iter().map(|&p| p as f32).collect();
        ProbMap::new(self.height, self.width, self.num_classes, data)
    }
}

/// Sum the four log-potential fields per site and class, then normalize each
/// site with a max-shifted log-sum-exp.
pub fn fuse(
    unary_px: &PotentialField,
    binary_px: &PotentialField,
    unary_patch: &PotentialField,
    binary_patch: &PotentialField,
) -> Result<Posterior, CoreError> {
    let fields = [unary_px, binary_px, unary_patch, binary_patch];
    for (index, field) in fields.iter().enumerate().skip(1) {
        if !field.same_shape(unary_px) {
            return Err(CoreError::ShapeMismatch {
                what: "potential field",
                index,
                expected_height: unary_px.height(),
                expected_width: unary_px.width(),
                expected_classes: unary_px.num_classes(),
                actual_height: field.height(),
                actual_width: field.width(),
                actual_classes: field.num_classes(),
            });
        }
    }
    let (h, w, nc) = (unary_px.height(), unary_px.width(), unary_px.num_classes());
    if h == 0 || w == 0 {
        return Err(CoreError::EmptyMap {
            height: h,
            width: w,
        });
    }
    if nc < 2 {
        return Err(CoreError::BadClassCount(nc));
    }

    let mut probs = vec![0.0f64; h * w * nc];
    for (slot, value) in probs.iter_mut().enumerate() {
        *value = fields.iter().map(|f| f.log_values()[slot]).sum();
    }
    for site in probs.chunks_exact_mut(nc) {
        let max = site.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0f64;
        for value in site.iter_mut() {
            *value = (*value - max).exp();
            total += *value;
        }
        for value in site.iter_mut() {
            *value /= total;
        }
    }
    Ok(Posterior {
        height: h,
        width: w,
        num_classes: nc,
        probs,
    })
}

/// Per-pixel arg max of the posterior; exact ties go to the class the
/// tie-break rule picks.
pub fn map_label(posterior: &Posterior, tie_break: TieBreak) -> LabelMask {
    LabelMask::from_fn(posterior.height, posterior.width, |row, col| {
        let site = posterior.site(row, col);
        let mut best = 0usize;
        for (class, &p) in site.iter().enumerate().skip(1) {
            let better = match tie_break {
                TieBreak::LowestIndex => p > site[best],
                TieBreak::HighestIndex => p >= site[best],
            };
            if better {
                best = class;
            }
        }
        best as u8
    })
    .expect("posterior dimensions are nonzero")
}

/// The full segmentation result: the MAP mask plus the posterior it came
/// from.
#[derive(Debug, Clone)]
pub struct Segmentation {
    pub mask: LabelMask,
    pub posterior: Posterior,
}

/// Run the whole per-image pipeline: build all four potentials from the
/// pixel map and the three backbone patch maps, broadcast the patch fields
/// to pixel resolution, fuse, and take the MAP labeling.
pub fn segment(
    pixel_map: &ProbMap,
    patch_maps: &[ProbMap; 3],
    weights: &HcrfWeights,
    config: &PipelineConfig,
) -> Result<Segmentation, CoreError> {
    weights.validate()?;
    config.validate()?;
    if patch_maps[0].num_classes() != pixel_map.num_classes() {
        return Err(CoreError::ShapeMismatch {
            what: "patch map",
            index: 0,
            expected_height: patch_maps[0].height(),
            expected_width: patch_maps[0].width(),
            expected_classes: pixel_map.num_classes(),
            actual_height: patch_maps[0].height(),
            actual_width: patch_maps[0].width(),
            actual_classes: patch_maps[0].num_classes(),
        });
    }
    let eps = config.epsilon;
    let unary_px = pixel_unary(pixel_map, weights.pixel_unary, eps);
    let binary_px = pixel_binary(pixel_map, weights.pixel_binary, config.pixel_window, eps)?;
    let unary_patch = patch_unary(patch_maps, weights.backbone_unary, weights.patch_unary, eps)?;
    let binary_patch = patch_binary(patch_maps, weights.backbone_binary, weights.patch_binary, eps)?;
    let unary_patch_px = broadcast_patch_field(
        &unary_patch,
        config.patch_size,
        config.patch_mode,
        pixel_map.height(),
        pixel_map.width(),
    )?;
    let binary_patch_px = broadcast_patch_field(
        &binary_patch,
        config.patch_size,
        config.patch_mode,
        pixel_map.height(),
        pixel_map.width(),
    )?;
    let posterior = fuse(&unary_px, &binary_px, &unary_patch_px, &binary_patch_px)?;
    let mask = map_label(&posterior, config.tie_break);
    Ok(Segmentation { mask, posterior })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{PatchMode, TieBreak};

    const EPS: f64 = 1e-12;

    fn unary_of(probs: &[f32]) -> PotentialField {
        let map = ProbMap::constant(2, 2, probs).unwrap();
        pixel_unary(&map, 1.0, EPS)
    }

    #[test]
    fn fuse_four_equal_fields() {
        let field = unary_of(&[0.8, 0.2]);
        let posterior = fuse(&field, &field, &field, &field).unwrap();
        // (0.8^4, 0.2^4) normalized = (0.99611, 0.00389).
        assert!((posterior.prob(0, 0, 0) - 0.99611).abs() < 1e-5);
        assert!((posterior.prob(0, 0, 1) - 0.00389).abs() < 1e-5);
        let sum: f64 = posterior.site(1, 1).iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fuse_neutral_fields_pass_the_unary_through() {
        let field = unary_of(&[0.6, 0.4]);
        let neutral = PotentialField::neutral(2, 2, 2);
        let posterior = fuse(&field, &neutral, &neutral, &neutral).unwrap();
        assert!((posterior.prob(0, 1, 0) - 0.6).abs() < 1e-6);
        assert!((posterior.prob(0, 1, 1) - 0.4).abs() < 1e-6);
    }

    #[test]
    fn fuse_symmetric_fields_stay_uniform() {
        let field = unary_of(&[0.5, 0.5]);
        let posterior = fuse(&field, &field, &field, &field).unwrap();
        assert_eq!(posterior.prob(1, 0, 0), 0.5);
        assert_eq!(posterior.prob(1, 0, 1), 0.5);
    }

    #[test]
    fn fuse_rejects_shape_mismatch() {
        let a = unary_of(&[0.5, 0.5]);
        let b = PotentialField::neutral(3, 2, 2);
        assert!(matches!(
            fuse(&a, &b, &a, &a),
            Err(CoreError::ShapeMismatch { index: 1, .. })
        ));
    }

    #[test]
    fn map_label_argmax_and_ties() {
        let field = unary_of(&[0.8, 0.2]);
        let posterior = fuse(&field, &field, &field, &field).unwrap();
        let mask = map_label(&posterior, TieBreak::LowestIndex);
        assert!(mask.labels().iter().all(|&l| l == 0));

        let uniform = unary_of(&[0.5, 0.5]);
        let posterior = fuse(&uniform, &uniform, &uniform, &uniform).unwrap();
        let mask = map_label(&posterior, TieBreak::LowestIndex);
        assert!(mask.labels().iter().all(|&l| l == 0));
        let mask = map_label(&posterior, TieBreak::HighestIndex);
        assert!(mask.labels().iter().all(|&l| l == 1));
    }

    fn small_inputs() -> (ProbMap, [ProbMap; 3]) {
        let pixel = ProbMap::from_fn(8, 8, 2, |r, c, class| {
            let p = 0.05 + 0.9 * (((r * 13 + c * 7) % 11) as f32 / 11.0);
            if class == 0 {
                p
            } else {
                1.0 - p
            }
        })
        .unwrap();
        let patch = ProbMap::from_fn(2, 2, 2, |r, c, class| {
            let p = 0.2 + 0.15 * (r * 2 + c) as f32;
            if class == 0 {
                p
            } else {
                1.0 - p
            }
        })
        .unwrap();
        (pixel, [patch.clone(), patch.clone(), patch])
    }

    fn small_config() -> PipelineConfig {
        PipelineConfig {
            patch_size: 4,
            pixel_window: 7,
            patch_mode: PatchMode::Grid,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn segment_with_zero_weights_is_uniform() {
        let (pixel, patches) = small_inputs();
        let weights = HcrfWeights {
            pixel_unary: 0.0,
            pixel_binary: 0.0,
            patch_unary: 0.0,
            patch_binary: 0.0,
            backbone_unary: [0.0; 3],
            backbone_binary: [0.0; 3],
        };
        let result = segment(&pixel, &patches, &weights, &small_config()).unwrap();
        assert!(result.mask.labels().iter().all(|&l| l == 0));
        assert_eq!(result.posterior.prob(3, 5, 0), 0.5);

        let config = PipelineConfig {
            tie_break: TieBreak::HighestIndex,
            ..small_config()
        };
        let result = segment(&pixel, &patches, &weights, &config).unwrap();
        assert!(result.mask.labels().iter().all(|&l| l == 1));
    }

    #[test]
    fn segment_with_only_pixel_unary_is_argmax_of_the_map() {
        let (pixel, patches) = small_inputs();
        let weights = HcrfWeights {
            pixel_unary: 1.0,
            pixel_binary: 0.0,
            patch_unary: 0.0,
            patch_binary: 0.0,
            backbone_unary: [0.0; 3],
            backbone_binary: [0.0; 3],
        };
        let result = segment(&pixel, &patches, &weights, &small_config()).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let expected = u8::from(pixel.prob(r, c, 1) > pixel.prob(r, c, 0));
                assert_eq!(result.mask.label(r, c), expected, "pixel ({r},{c})");
            }
        }
    }

    #[test]
    fn segment_posterior_converts_to_probmap() {
        let (pixel, patches) = small_inputs();
        let result = segment(&pixel, &patches, &HcrfWeights::default(), &small_config()).unwrap();
        let map = result.posterior.to_probmap().unwrap();
        assert_eq!(map.height(), 8);
        assert_eq!(map.num_classes(), 2);
    }

    #[test]
    fn segment_rejects_class_count_mismatch() {
        let (pixel, _) = small_inputs();
        let patch3 = ProbMap::constant(2, 2, &[0.3, 0.3, 0.4]).unwrap();
        let err = segment(
            &pixel,
            &[patch3.clone(), patch3.clone(), patch3],
            &HcrfWeights::default(),
            &small_config(),
        )
        .unwrap_err();
        assert!(matches!(err, CoreError::ShapeMismatch { what: "patch map", .. }));
    }
}
