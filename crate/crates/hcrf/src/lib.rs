//! Hierarchical CRF fusion of pixel- and patch-level class-probability maps
//! for weakly supervised histology image analysis.
//!
//! The pipeline, end to end:
//!
//! 1. [`inference::segment`] fuses four potentials — pixel unary, pixel
//!    binary (48-neighborhood average), patch unary (three backbone maps),
//!    patch binary (8-neighborhood average) — into a per-pixel posterior and
//!    its MAP mask.
//! 2. [`attention::select_attention_patches`] tiles the mask and keeps the
//!    patches whose abnormal share exceeds a proportion threshold;
//!    [`attention::grid_search_threshold`] tunes that proportion over the
//!    10%–90% grid.
//! 3. [`cpel::cpel_classify`] pools per-patch class probabilities into an
//!    image-level label by summed log-scores.
//! 4. [`metrics`] scores both stages; [`io`] moves everything through
//!    bit-exact file formats; [`synth`] provides seeded fixtures and the
//!    brute-force oracles the tests compare against.
//!
//! All numerically sensitive work runs in 64-bit log-domain; all functions
//! are pure and safe to call from multiple threads.

pub mod attention;
pub mod cpel;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod potentials;
pub mod synth;
pub mod types;

pub use attention::{
    binarize, grid_search_threshold, select_attention_patches, GridSearchResult, Objective,
    ProportionScore,
};
pub use cpel::{cpel_classify, cpel_classify_map, DecisionRecord, ImageDecision};
pub use inference::{fuse, map_label, segment, Posterior, Segmentation};
pub use metrics::{
    classification_metrics, confusion_from_decisions, segmentation_counts, segmentation_metrics,
    segmentation_report, ConfusionCounts, EvalReport,
};
pub use potentials::{
    broadcast_patch_field, patch_binary, patch_unary, pixel_binary, pixel_unary,
    window_mean_per_class, PotentialField,
};
pub use synth::{
    brute_force_map, gen_ground_truth, gen_ground_truth_in_band, gen_probmaps, gen_random_probmap,
    gen_random_weights, SyntheticMaps, BRUTE_FORCE_MAX_SITES,
};
pub use types::{
    patch_grid_dims, validate_probmap, ClassLabel, CoreError, HcrfWeights, LabelMask, PatchGrid,
    PatchMode, PatchRecord, PipelineConfig, ProbMap, TieBreak, CLASS_ABNORMAL, CLASS_NORMAL,
};
