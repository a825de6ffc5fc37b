//! Classification and segmentation evaluation: confusion counts, the derived
//! ratio criteria, and report assembly.
//!
//! Two positive-class conventions coexist deliberately. Image-level
//! classification treats the NORMAL class as positive (screening convention:
//! a positive finding is a healthy slide). Segmentation treats abnormal
//! foreground pixels as positive. Zero-denominator ratios are reported as
//! `None` — "undefined" — never silently as 0.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cpel::DecisionRecord;
use crate::types::{ClassLabel, CoreError, LabelMask, CLASS_ABNORMAL, CLASS_NORMAL};

/// A 2×2 confusion matrix. What counts as positive is the caller's
/// convention; the ratio formulas don't care.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    #[serde(rename = "tp")]
    pub true_positive: u64,
    #[serde(rename = "tn")]
    pub true_negative: u64,
    #[serde(rename = "fp")]
    pub false_positive: u64,
    #[serde(rename = "fn")]
    pub false_negative: u64,
}

fn ratio(numerator: u64, denominator: u64) -> Option<f64> {
    if denominator == 0 {
        None
    } else {
        Some(numerator as f64 / denominator as f64)
    }
}

impl ConfusionCounts {
    pub fn new(
        true_positive: u64,
        false_negative: u64,
        true_negative: u64,
        false_positive: u64,
    ) -> Self {
        ConfusionCounts {
            true_positive,
            true_negative,
            false_positive,
            false_negative,
        }
    }

    pub fn total(&self) -> u64 {
        self.true_positive + self.true_negative + self.false_positive + self.false_negative
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.true_positive += other.true_positive;
        self.true_negative += other.true_negative;
        self.false_positive += other.false_positive;
        self.false_negative += other.false_negative;
    }

    /// (TP + TN) / total.
    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.true_positive + self.true_negative, self.total())
    }

    /// TP / (TP + FN).
    pub fn sensitivity(&self) -> Option<f64> {
        ratio(self.true_positive, self.true_positive + self.false_negative)
    }

    /// TN / (TN + FP).
    pub fn specificity(&self) -> Option<f64> {
        ratio(self.true_negative, self.true_negative + self.false_positive)
    }

    /// TP / (TP + FP).
    pub fn precision(&self) -> Option<f64> {
        ratio(self.true_positive, self.true_positive + self.false_positive)
    }

    /// Harmonic mean of precision and sensitivity; undefined when either is,
    /// or when both are zero.
    pub fn f1(&self) -> Option<f64> {
        let p = self.precision()?;
        let s = self.sensitivity()?;
        if p + s == 0.0 {
            None
        } else {
            Some(2.0 * p * s / (p + s))
        }
    }

    /// 2·TP / (2·TP + FP + FN). Numerically equal to F1 whenever both are
    /// defined, but defined on more inputs.
    pub fn dice(&self) -> Option<f64> {
        ratio(
            2 * self.true_positive,
            2 * self.true_positive + self.false_positive + self.false_negative,
        )
    }

    /// TP / (TP + FP + FN).
    pub fn iou(&self) -> Option<f64> {
        ratio(
            self.true_positive,
            self.true_positive + self.false_positive + self.false_negative,
        )
    }
}

/// Evaluation results: the raw counts plus every derived criterion.
///
/// The five classification criteria are always present (possibly undefined);
/// the segmentation-only criteria (`recall`, `dice`, `iou`, `rvd`) are
/// omitted from JSON when not applicable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub counts: ConfusionCounts,
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dice: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rvd: Option<f64>,
}

impl EvalReport {
    /// Render as an aligned two-column text table. Undefined criteria print
    /// as `undefined`; criteria that don't apply to this report are skipped.
    pub fn to_table(&self) -> String {
        let rows: Vec<(&str, Option<f64>, bool)> = vec![
            ("accuracy", self.accuracy, true),
            ("sensitivity", self.sensitivity, true),
            ("specificity", self.specificity, true),
            ("precision", self.precision, true),
            ("f1", self.f1, true),
            ("recall", self.recall, self.recall.is_some()),
            ("dice", self.dice, self.dice.is_some()),
            ("iou", self.iou, self.iou.is_some()),
            ("rvd", self.rvd, self.rvd.is_some()),
        ];
        let mut table = String::new();
        let _ = writeln!(table, "{:<12} value", "criterion");
        for (name, value, include) in rows {
            if !include {
                continue;
            }
            match value {
                Some(v) => {
                    let _ = writeln!(table, "{name:<12} {v:.4}");
                }
                None => {
                    let _ = writeln!(table, "{name:<12} undefined");
                }
            }
        }
        table
    }
}

/// The five image-level classification criteria from a confusion matrix.
pub fn classification_metrics(counts: ConfusionCounts) -> Result<EvalReport, CoreError> {
    if counts.total() == 0 {
        return Err(CoreError::EmptyInput("confusion counts"));
    }
    Ok(EvalReport {
        counts,
        accuracy: counts.accuracy(),
        sensitivity: counts.sensitivity(),
        specificity: counts.specificity(),
        precision: counts.precision(),
        f1: counts.f1(),
        recall: None,
        dice: None,
        iou: None,
        rvd: None,
    })
}

/// Pixelwise confusion counts of a predicted mask against ground truth, with
/// abnormal foreground as positive. Both masks must be binary and share
/// dimensions.
pub fn segmentation_counts(
    pred: &LabelMask,
    gt: &LabelMask,
) -> Result<ConfusionCounts, CoreError> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(CoreError::ShapeMismatch {
            what: "ground-truth mask",
            index: 0,
            expected_height: pred.height(),
            expected_width: pred.width(),
            expected_classes: 2,
            actual_height: gt.height(),
            actual_width: gt.width(),
            actual_classes: 2,
        });
    }
    pred.validate_classes(2)?;
    gt.validate_classes(2)?;
    let mut counts = ConfusionCounts::default();
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        match (p == CLASS_ABNORMAL, g == CLASS_ABNORMAL) {
            (true, true) => counts.true_positive += 1,
            (true, false) => counts.false_positive += 1,
            (false, true) => counts.false_negative += 1,
            (false, false) => counts.true_negative += 1,
        }
    }
    Ok(counts)
}

/// All segmentation criteria from (possibly multi-image, summed) pixelwise
/// counts.
///
/// The foreground areas needed for RVD are recovered from the counts:
/// |P| = TP + FP, |G| = TP + FN. RVD is undefined on empty ground truth.
pub fn segmentation_report(counts: ConfusionCounts) -> Result<EvalReport, CoreError> {
    if counts.total() == 0 {
        return Err(CoreError::EmptyInput("confusion counts"));
    }
    let pred_area = counts.true_positive + counts.false_positive;
    let gt_area = counts.true_positive + counts.false_negative;
    let rvd = if gt_area == 0 {
        None
    } else {
        Some((pred_area as f64 - gt_area as f64).abs() / gt_area as f64)
    };
    Ok(EvalReport {
        counts,
        accuracy: counts.accuracy(),
        sensitivity: counts.sensitivity(),
        specificity: counts.specificity(),
        precision: counts.precision(),
        f1: counts.f1(),
        recall: counts.sensitivity(),
        dice: counts.dice(),
        iou: counts.iou(),
        rvd,
    })
}

/// Segmentation criteria for one predicted mask against its ground truth.
pub fn segmentation_metrics(pred: &LabelMask, gt: &LabelMask) -> Result<EvalReport, CoreError> {
    segmentation_report(segmentation_counts(pred, gt)?)
}

/// Assemble the image-level confusion matrix from classifier decisions and
/// ground-truth labels, with NORMAL as the positive class.
///
/// Every decision must have a matching truth entry (extra truths are fine)
/// and internally consistent scores.
pub fn confusion_from_decisions(
    decisions: &[DecisionRecord],
    truths: &BTreeMap<String, ClassLabel>,
) -> Result<ConfusionCounts, CoreError> {
    if decisions.is_empty() {
        return Err(CoreError::EmptyInput("decision list"));
    }
    let mut counts = ConfusionCounts::default();
    for decision in decisions {
        decision.validate()?;
        let truth = truths
            .get(&decision.image_id)
            .ok_or_else(|| CoreError::UnmatchedImage(decision.image_id.clone()))?;
        let predicted_normal = decision.predicted_class == usize::from(CLASS_NORMAL);
        match (truth, predicted_normal) {
            (ClassLabel::Normal, true) => counts.true_positive += 1,
            (ClassLabel::Normal, false) => counts.false_negative += 1,
            (ClassLabel::Abnormal, true) => counts.false_positive += 1,
            (ClassLabel::Abnormal, false) => counts.true_negative += 1,
        }
    }
    Ok(counts)
}
