//! Image-level classification by probability ensembling: sum the logs of the
//! per-patch class probabilities over all patches of an image and take the
//! arg max.
//!
//! Summing logs rather than multiplying probabilities keeps the score finite
//! for any patch count; the multiplicative form underflows after a few dozen
//! patches. Both orderings agree because log is monotone.

use serde::{Deserialize, Serialize};

use crate::types::{CoreError, ProbMap, PROB_SUM_TOLERANCE};

/// The image-level verdict: per-class summed log-scores, the arg-max class,
/// and the number of patches that contributed.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDecision {
    log_scores: Vec<f64>,
    predicted_class: usize,
    patch_count: usize,
}

impl ImageDecision {
    pub fn log_scores(&self) -> &[f64] {
        &self.log_scores
    }

    pub fn predicted_class(&self) -> usize {
        self.predicted_class
    }

    pub fn patch_count(&self) -> usize {
        self.patch_count
    }
}

/// Arg max with ties resolved to the lowest index.
fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0usize;
    for (class, &score) in scores.iter().enumerate().skip(1) {
        if score > scores[best] {
            best = class;
        }
    }
    best
}

/// Classify one image from the class-probability vectors of its patches.
///
/// Every vector must be a distribution over the same classes (entries in
/// [0,1], summing to 1 within the usual tolerance). Probabilities are clamped
/// to `epsilon` before the log, so degenerate zeros are legal.
pub fn cpel_classify(patch_probs: &[Vec<f64>], epsilon: f64) -> Result<ImageDecision, CoreError> {
    if epsilon <= 0.0 || !epsilon.is_finite() {
        return Err(CoreError::BadEpsilon(epsilon));
    }
    if patch_probs.is_empty() {
        return Err(CoreError::EmptyInput("patch probability sequence"));
    }
    let num_classes = patch_probs[0].len();
    if num_classes < 2 {
        return Err(CoreError::BadClassCount(num_classes));
    }
    for (patch, probs) in patch_probs.iter().enumerate() {
        if probs.len() != num_classes {
            return Err(CoreError::ClassCountMismatch {
                patch,
                expected: num_classes,
                actual: probs.len(),
            });
        }
        let mut sum = 0.0f64;
        for (class, &value) in probs.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(CoreError::BadProbability {
                    patch,
                    class,
                    value,
                });
            }
            sum += value;
        }
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(CoreError::PatchNotNormalized {
                patch,
                sum,
                tolerance: PROB_SUM_TOLERANCE,
            });
        }
    }

    let mut log_scores = vec![0.0f64; num_classes];
    for probs in patch_probs {
        for (score, &p) in log_scores.iter_mut().zip(probs) {
            *score += p.max(epsilon).ln();
        }
    }
    let predicted_class = argmax_lowest(&log_scores);
    Ok(ImageDecision {
        log_scores,
        predicted_class,
        patch_count: patch_probs.len(),
    })
}

/// Classify treating every site of a patch-resolution probability map as one
/// patch — the whole-image tiling an 8×8 grid of 256-pixel patches gives for
/// a 2048×2048 image.
pub fn cpel_classify_map(patch_map: &ProbMap, epsilon: f64) -> Result<ImageDecision, CoreError> {
    if epsilon <= 0.0 || !epsilon.is_finite() {
        return Err(CoreError::BadEpsilon(epsilon));
    }
    let num_classes = patch_map.num_classes();
    let mut log_scores = vec![0.0f64; num_classes];
    for site in patch_map.data().chunks_exact(num_classes) {
        for (score, &p) in log_scores.iter_mut().zip(site) {
            *score += f64::from(p).max(epsilon).ln();
        }
    }
    let predicted_class = argmax_lowest(&log_scores);
    Ok(ImageDecision {
        log_scores,
        predicted_class,
        patch_count: patch_map.height() * patch_map.width(),
    })
}

/// The serialized form of an [`ImageDecision`], keyed by image id.
///
/// JSON schema: `{"image_id", "scores", "predicted_class", "T"}` where `T`
/// is the patch count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub image_id: String,
    pub scores: Vec<f64>,
    pub predicted_class: usize,
    #[serde(rename = "T")]
    pub patch_count: usize,
}

impl DecisionRecord {
    pub fn new(image_id: impl Into<String>, decision: &ImageDecision) -> Self {
        DecisionRecord {
            image_id: image_id.into(),
            scores: decision.log_scores().to_vec(),
            predicted_class: decision.predicted_class(),
            patch_count: decision.patch_count(),
        }
    }

    /// Check the internal consistency of a record read from a file: scores
    /// nonempty, at least one patch, and the declared class equal to the
    /// arg max of the scores.
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.scores.is_empty() {
            return Err(CoreError::EmptyInput("decision scores"));
        }
        if self.patch_count == 0 {
            return Err(CoreError::EmptyInput("decision patch count"));
        }
        let argmax = argmax_lowest(&self.scores);
        if self.predicted_class != argmax {
            return Err(CoreError::InconsistentDecision {
                image_id: self.image_id.clone(),
                predicted: self.predicted_class,
                argmax,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{CLASS_ABNORMAL, CLASS_NORMAL};

    const EPS: f64 = 1e-12;

    #[test]
    fn two_confident_abnormal_patches() {
        let patches = vec![vec![0.1, 0.9], vec![0.2, 0.8]];
        let decision = cpel_classify(&patches, EPS).unwrap();
        assert_eq!(decision.predicted_class(), usize::from(CLASS_ABNORMAL));
        assert_eq!(decision.patch_count(), 2);
        assert!((decision.log_scores()[1] - 0.72f64.ln()).abs() < 1e-12);
        assert!((decision.log_scores()[0] - 0.02f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_uniform_patch_ties_to_normal() {
        let decision = cpel_classify(&[vec![0.5, 0.5]], EPS).unwrap();
        assert_eq!(decision.predicted_class(), usize::from(CLASS_NORMAL));
    }

    #[test]
    fn identical_patches_preserve_the_order() {
        let patches = vec![vec![0.4, 0.6]; 64];
        let decision = cpel_classify(&patches, EPS).unwrap();
        assert_eq!(decision.predicted_class(), usize::from(CLASS_ABNORMAL));
        assert!((decision.log_scores()[1] - 64.0 * 0.6f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn zero_probability_keeps_scores_finite() {
        let decision = cpel_classify(&[vec![1.0, 0.0], vec![0.3, 0.7]], EPS).unwrap();
        assert!(decision.log_scores().iter().all(|s| s.is_finite()));
        assert_eq!(decision.predicted_class(), 0);
    }

    #[test]
    fn input_validation() {
        assert!(matches!(
            cpel_classify(&[], EPS),
            Err(CoreError::EmptyInput(_))
        ));
        assert!(matches!(
            cpel_classify(&[vec![1.0]], EPS),
            Err(CoreError::BadClassCount(1))
        ));
        assert!(matches!(
            cpel_classify(&[vec![0.5, 0.5], vec![0.3, 0.3, 0.4]], EPS),
            Err(CoreError::ClassCountMismatch { patch: 1, .. })
        ));
        assert!(matches!(
            cpel_classify(&[vec![1.2, -0.2]], EPS),
            Err(CoreError::BadProbability { .. })
        ));
        assert!(matches!(
            cpel_classify(&[vec![0.7, 0.7]], EPS),
            Err(CoreError::PatchNotNormalized { patch: 0, .. })
        ));
        assert!(matches!(
            cpel_classify(&[vec![0.5, 0.5]], 0.0),
            Err(CoreError::BadEpsilon(_))
        ));
    }

    #[test]
    fn map_and_vector_forms_agree() {
        let map = ProbMap::from_fn(2, 3, 2, |r, c, class| {
            let p = 0.1 + 0.12 * (r * 3 + c) as f32;
            if class == 0 {
                p
            } else {
                1.0 - p
            }
        })
        .unwrap();
        let vectors: Vec<Vec<f64>> = (0..2)
            .flat_map(|r| {
                (0..3).map(move |c| (r, c))
            })
            .map(|(r, c)| {
                map.site(r, c).iter().map(|&p| f64::from(p)).collect()
            })
            .collect();
        let from_map = cpel_classify_map(&map, EPS).unwrap();
        let from_vecs = cpel_classify(&vectors, EPS).unwrap();
        assert_eq!(from_map.predicted_class(), from_vecs.predicted_class());
        assert_eq!(from_map.patch_count(), 6);
        for (a, b) in from_map.log_scores().iter().zip(from_vecs.log_scores()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn record_round_trip_and_validation() {
        let decision = cpel_classify(&[vec![0.1, 0.9]], EPS).unwrap();
        let record = DecisionRecord::new("img_007", &decision);
        let json = serde_json::to_string(&record).unwrap();
        assert!(json.contains("\"T\":1"));
        let back: DecisionRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, record);
        back.validate().unwrap();

        let broken = DecisionRecord {
            predicted_class: 0,
            ..record
        };
        assert!(matches!(
            broken.validate(),
            Err(CoreError::InconsistentDecision {
                predicted: 0,
                argmax: 1,
                ..
            })
        ));
    }
}
