//! Attention patch selection: binarize the posterior, tile it, keep the
//! tiles whose abnormal share strictly exceeds the proportion threshold, and
//! search the 10%–90% proportion grid against ground truth.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::inference::Posterior;
use crate::metrics::ConfusionCounts;
use crate::types::{
    patch_grid_dims, CoreError, LabelMask, PatchGrid, PatchRecord, CLASS_ABNORMAL,
};

/// Threshold a 2-class posterior into a binary mask: label 1 where the
/// abnormal probability strictly exceeds `threshold`.
///
/// The inequality is strict, so a site at exactly the threshold — including
/// the uniform 0.5/0.5 posterior under the default 0.5 — stays normal.
pub fn binarize(posterior: &Posterior, threshold: f64) -> Result<LabelMask, CoreError> {
    if posterior.num_classes() != 2 {
        return Err(CoreError::NotTwoClass(posterior.num_classes()));
    }
    let abnormal = usize::from(CLASS_ABNORMAL);
    LabelMask::from_fn(posterior.height(), posterior.width(), |row, col| {
        u8::from(posterior.prob(row, col, abnormal) > threshold)
    })
}

/// Tile a binary mask into `patch_size` squares and flag each tile whose
/// abnormal pixel fraction strictly exceeds `attention_threshold`.
///
/// Trailing pixels beyond the last whole tile are ignored. The image must be
/// large enough for at least one tile in each dimension.
pub fn select_attention_patches(
    mask: &LabelMask,
    patch_size: usize,
    attention_threshold: f64,
) -> Result<PatchGrid, CoreError> {
    if patch_size == 0 {
        return Err(CoreError::ZeroPatchSize);
    }
    mask.validate_classes(2)?;
    let (rows, cols) = patch_grid_dims(mask.height(), mask.width(), patch_size);
    if rows == 0 || cols == 0 {
        return Err(CoreError::PatchSizeExceedsImage {
            patch_size,
            height: mask.height(),
            width: mask.width(),
        });
    }
    let area = (patch_size * patch_size) as f64;
    let mut patches = Vec::with_capacity(rows * cols);
    for tile_r in 0..rows {
        for tile_c in 0..cols {
            let mut abnormal = 0usize;
            for r in tile_r * patch_size..(tile_r + 1) * patch_size {
                for c in tile_c * patch_size..(tile_c + 1) * patch_size {
                    abnormal += usize::from(mask.label(r, c) == CLASS_ABNORMAL);
                }
            }
            let abnormal_fraction = abnormal as f64 / area;
            patches.push(PatchRecord {
                row: tile_r,
                col: tile_c,
                abnormal_fraction,
                is_attention: abnormal_fraction > attention_threshold,
                class_probs: None,
            });
        }
    }
    Ok(PatchGrid {
        patch_size,
        rows,
        cols,
        patches,
    })
}

/// The score the grid search maximizes, computed on patch-level confusion
/// counts (selected vs ground-truth-abnormal tiles).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    F1,
    Dice,
    Iou,
    Accuracy,
    Precision,
    Recall,
}

impl Objective {
    pub fn score(self, counts: &ConfusionCounts) -> Option<f64> {
        match self {
            Objective::F1 => counts.f1(),
            Objective::Dice => counts.dice(),
            Objective::Iou => counts.iou(),
            Objective::Accuracy => counts.accuracy(),
            Objective::Precision => counts.precision(),
            Objective::Recall => counts.sensitivity(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Objective::F1 => "f1",
            Objective::Dice => "dice",
            Objective::Iou => "iou",
            Objective::Accuracy => "accuracy",
            Objective::Precision => "precision",
            Objective::Recall => "recall",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "f1" => Ok(Objective::F1),
            "dice" => Ok(Objective::Dice),
            "iou" => Ok(Objective::Iou),
            "accuracy" => Ok(Objective::Accuracy),
            "precision" => Ok(Objective::Precision),
            "recall" => Ok(Objective::Recall),
            other => Err(format!(
                "unknown objective '{other}' (expected f1, dice, iou, accuracy, precision or recall)"
            )),
        }
    }
}

/// One row of the grid-search table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProportionScore {
    pub proportion: f64,
    /// `None` when the objective is undefined at this proportion (e.g. F1
    /// with no selected and no ground-truth tile).
    pub score: Option<f64>,
}

/// Grid-search outcome: the winning proportion plus the full 9-row table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub objective: Objective,
    pub best_proportion: f64,
    pub table: Vec<ProportionScore>,
}

/// Evaluate the proportions 0.1, 0.2, …, 0.9 over (predicted mask, ground
/// truth) pairs and pick the arg max of the objective.
///
/// At each proportion a tile is "selected" when its predicted abnormal
/// fraction strictly exceeds the proportion, and "ground-truth abnormal"
/// when its GT fraction does; the objective scores the resulting patch-level
/// confusion counts over all pairs. Undefined scores lose to any defined
/// score; exact ties (including the all-undefined table) go to the smallest
/// proportion.
pub fn grid_search_threshold(
    pairs: &[(LabelMask, LabelMask)],
    patch_size: usize,
    objective: Objective,
) -> Result<GridSearchResult, CoreError> {
    if pairs.is_empty() {
        return Err(CoreError::EmptyInput("candidate mask set"));
    }
    // Tile fractions don't depend on the proportion, so compute them once.
    let mut fractions: Vec<(f64, f64)> = Vec::new();
    for (index, (pred, gt)) in pairs.iter().enumerate() {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(CoreError::ShapeMismatch {
                what: "ground-truth mask",
                index,
                expected_height: pred.height(),
                expected_width: pred.width(),
                expected_classes: 2,
                actual_height: gt.height(),
                actual_width: gt.width(),
                actual_classes: 2,
            });
        }
        let pred_grid = select_attention_patches(pred, patch_size, 0.5)?;
        let gt_grid = select_attention_patches(gt, patch_size, 0.5)?;
        for (p, g) in pred_grid.patches.iter().zip(&gt_grid.patches) {
            fractions.push((p.abnormal_fraction, g.abnormal_fraction));
        }
    }

    let mut table = Vec::with_capacity(9);
    for step in 1..=9u32 {
        let proportion = f64::from(step) / 10.0;
        let mut counts = ConfusionCounts::default();
        for &(pred_frac, gt_frac) in &fractions {
            match (pred_frac > proportion, gt_frac > proportion) {
                (true, true) => counts.true_positive += 1,
                (true, false) => counts.false_positive += 1,
                (false, true) => counts.false_negative += 1,
                (false, false) => counts.true_negative += 1,
            }
        }
        table.push(ProportionScore {
            proportion,
            score: objective.score(&counts),
        });
    }

    let mut best = 0usize;
    for (index, row) in table.iter().enumerate().skip(1) {
        let score = row.score.unwrap_or(f64::NEG_INFINITY);
        if score > table[best].score.unwrap_or(f64::NEG_INFINITY) {
            best = index;
        }
    }
    Ok(GridSearchResult {
        objective,
        best_proportion: table[best].proportion,
        table,
    })
}
