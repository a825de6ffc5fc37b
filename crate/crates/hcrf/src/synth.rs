//! Seeded synthetic fixtures and brute-force oracles.
//!
//! Generators stand in for the trained CNNs the real pipeline sits behind:
//! a ground-truth mask of random elliptical blobs, plus pixel- and
//! patch-level probability maps derived from it under a controllable noise
//! level. The oracle re-derives MAP labelings by exhaustive enumeration with
//! none of the library's fast paths (no summed-area tables, no log-sum-exp),
//! so tests can compare two independent routes.
//!
//! All randomness is ChaCha20 (via `rand_chacha`), a stream cipher RNG with
//! a published specification, seeded through `seed_from_u64`. Uniform floats
//! are derived from the top 53 bits of each 64-bit draw, so every stream is
//! reproducible bit-for-bit on any platform from the seed alone.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::types::{
    patch_grid_dims, CoreError, HcrfWeights, LabelMask, PatchMode, PipelineConfig, ProbMap,
    TieBreak,
};

/// A uniform draw in [0, 1) from the generator's next 64 bits.
fn unit_f64(rng: &mut ChaCha20Rng) -> f64 {
    // Top 53 bits scaled by 2^-53: every double in [0,1) with a multiple-
    // of-2^-53 value, exactly reproducible everywhere.
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Random ground truth: the union of `blob_count` axis-aligned ellipses.
///
/// Blob centers and radii are drawn in a fixed order (cy, cx, ry, rx per
/// blob), so a seed pins the exact mask. `blob_scale` sizes the radii as a
/// fraction of the smaller image dimension; `blob_count = 0` gives an
/// all-normal mask.
pub fn gen_ground_truth(
    height: usize,
    width: usize,
    blob_count: usize,
    blob_scale: f64,
    seed: u64,
) -> Result<LabelMask, CoreError> {
    if height == 0 || width == 0 {
        return Err(CoreError::EmptyMap { height, width });
    }
    let mut labels = vec![0u8; height * width];
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let base = (blob_scale * height.min(width) as f64).max(2.0);
    for _ in 0..blob_count {
        let cy = unit_f64(&mut rng) * height as f64;
        let cx = unit_f64(&mut rng) * width as f64;
        let ry = (base * (0.3 + 0.7 * unit_f64(&mut rng))).max(1.5);
        let rx = (base * (0.3 + 0.7 * unit_f64(&mut rng))).max(1.5);
        let r_lo = ((cy - ry).floor().max(0.0)) as usize;
        let r_hi = (((cy + ry).ceil()) as usize).min(height - 1);
        let c_lo = ((cx - rx).floor().max(0.0)) as usize;
        let c_hi = (((cx + rx).ceil()) as usize).min(width - 1);
        for r in r_lo..=r_hi {
            let dy = (r as f64 + 0.5 - cy) / ry;
            for c in c_lo..=c_hi {
                let dx = (c as f64 + 0.5 - cx) / rx;
                if dy * dy + dx * dx <= 1.0 {
                    labels[r * width + c] = 1;
                }
            }
        }
    }
    LabelMask::new(height, width, labels)
}

/// Like [`gen_ground_truth`], retrying with consecutive seeds until the
/// foreground fraction lands in the inclusive `band`.
pub fn gen_ground_truth_in_band(
    height: usize,
    width: usize,
    blob_count: usize,
    blob_scale: f64,
    band: (f64, f64),
    seed: u64,
    max_tries: usize,
) -> Result<LabelMask, CoreError> {
    let (lo, hi) = band;
    for attempt in 0..max_tries {
        let mask = gen_ground_truth(height, width, blob_count, blob_scale, seed + attempt as u64)?;
        let fraction = mask.foreground_fraction();
        if fraction >= lo && fraction <= hi {
            return Ok(mask);
        }
    }
    Err(CoreError::BandUnreachable {
        lo,
        hi,
        tries: max_tries,
    })
}

/// The generated per-image model inputs: one pixel-resolution map and three
/// backbone patch-resolution maps.
#[derive(Debug, Clone)]
pub struct SyntheticMaps {
    pub pixel: ProbMap,
    pub patch: [ProbMap; 3],
}

/// Derive noisy probability maps from a ground-truth mask.
///
/// Per pixel, `p(abnormal) = (1-noise)*gt + noise*u` with fresh uniform `u`,
/// clamped to `[epsilon, 1-epsilon]`. Each backbone's patch map does the
/// same with the tile's ground-truth abnormal fraction in place of `gt` and
/// its own noise draws. Draw order is fixed (pixels row-major, then each
/// backbone's tiles row-major), so outputs are seed-deterministic. At
/// `noise = 0` the pixel map binarizes back to `gt` exactly; at `noise = 1`
/// the maps carry no ground-truth signal at all.
pub fn gen_probmaps(
    gt: &LabelMask,
    noise: f64,
    patch_size: usize,
    epsilon: f64,
    seed: u64,
) -> Result<SyntheticMaps, CoreError> {
    if !(0.0..=1.0).contains(&noise) {
        return Err(CoreError::BadNoise(noise));
    }
    if patch_size == 0 {
        return Err(CoreError::ZeroPatchSize);
    }
    if epsilon.is_nan() || epsilon <= 0.0 || epsilon >= 0.5 {
        return Err(CoreError::BadEpsilon(epsilon));
    }
    let (height, width) = (gt.height(), gt.width());
    let (rows, cols) = patch_grid_dims(height, width, patch_size);
    if rows == 0 || cols == 0 {
        return Err(CoreError::PatchSizeExceedsImage {
            patch_size,
            height,
            width,
        });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let blend = |target: f64, rng: &mut ChaCha20Rng| -> f32 {
        let p = (1.0 - noise) * target + noise * unit_f64(rng);
        p.clamp(epsilon, 1.0 - epsilon) as f32
    };

    let mut pixel_data = Vec::with_capacity(height * width * 2);
    for r in 0..height {
        for c in 0..width {
            let p_abn = blend(f64::from(gt.label(r, c)), &mut rng);
            pixel_data.push(1.0 - p_abn);
            pixel_data.push(p_abn);
        }
    }
    let pixel = ProbMap::new(height, width, 2, pixel_data)?;

    // Tile ground-truth fractions, shared by the three backbones.
    let area = (patch_size * patch_size) as f64;
    let mut tile_fractions = vec![0.0f64; rows * cols];
    for (tile, fraction) in tile_fractions.iter_mut().enumerate() {
        let (tile_r, tile_c) = (tile / cols, tile % cols);
        let mut abnormal = 0usize;
        for r in tile_r * patch_size..(tile_r + 1) * patch_size {
            for c in tile_c * patch_size..(tile_c + 1) * patch_size {
                abnormal += usize::from(gt.label(r, c) == 1);
            }
        }
        *fraction = abnormal as f64 / area;
    }

    let mut patch = Vec::with_capacity(3);
    for _backbone in 0..3 {
        let mut data = Vec::with_capacity(rows * cols * 2);
        for &fraction in &tile_fractions {
            let p_abn = blend(fraction, &mut rng);
            data.push(1.0 - p_abn);
            data.push(p_abn);
        }
        patch.push(ProbMap::new(rows, cols, 2, data)?);
    }
    let patch: [ProbMap; 3] = patch.try_into().expect("exactly three backbones");
    Ok(SyntheticMaps { pixel, patch })
}

/// A random valid probability map with every probability bounded away from
/// zero (at least ~0.02), so arg-max comparisons between independent
/// computation routes are never decided by sub-epsilon noise.
pub fn gen_random_probmap(
    height: usize,
    width: usize,
    num_classes: usize,
    seed: u64,
) -> Result<ProbMap, CoreError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(height * width * num_classes);
    let mut site = vec![0.0f64; num_classes];
    for _ in 0..height * width {
        let mut total = 0.0f64;
        for slot in site.iter_mut() {
            *slot = 0.05 + unit_f64(&mut rng);
            total += *slot;
        }
        for &value in site.iter() {
            data.push((value / total) as f32);
        }
    }
    ProbMap::new(height, width, num_classes, data)
}

/// Random weights, every component uniform in `[lo, hi)`, drawn in a fixed
/// order (w_V, w_E, w_VP, w_EP, then the two backbone triples).
pub fn gen_random_weights(lo: f64, hi: f64, seed: u64) -> HcrfWeights {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut draw = || lo + (hi - lo) * unit_f64(&mut rng);
    HcrfWeights {
        pixel_unary: draw(),
        pixel_binary: draw(),
        patch_unary: draw(),
        patch_binary: draw(),
        backbone_unary: [draw(), draw(), draw()],
        backbone_binary: [draw(), draw(), draw()],
    }
}

/// Maximum number of sites [`brute_force_map`] will enumerate.
pub const BRUTE_FORCE_MAX_SITES: usize = 16;
const BRUTE_FORCE_MAX_STATES: u64 = 1 << 22;

/// MAP labeling by exhaustive enumeration: score every possible label
/// assignment with directly-coded potential formulas and return the global
/// arg max.
///
/// This is the test oracle for [`crate::inference::segment`]. It shares no
/// code with the fast path: neighborhood means come from explicit loops,
/// scores from plain log-sums per assignment. Assignments are visited in
/// lexicographic order (site 0 most significant) with class order chosen by
/// the tie-break rule, and only a strictly better score replaces the
/// incumbent — which reproduces the per-site tie-break exactly.
pub fn brute_force_map(
    pixel_map: &ProbMap,
    patch_maps: &[ProbMap; 3],
    weights: &HcrfWeights,
    config: &PipelineConfig,
) -> Result<LabelMask, CoreError> {
    weights.validate()?;
    config.validate()?;
    let (height, width, num_classes) =
        (pixel_map.height(), pixel_map.width(), pixel_map.num_classes());
    let sites = height * width;
    if sites > BRUTE_FORCE_MAX_SITES {
        return Err(CoreError::TooManySites {
            sites,
            limit: BRUTE_FORCE_MAX_SITES,
        });
    }
    let states = (num_classes as u64).checked_pow(sites as u32);
    if !states.is_some_and(|s| s <= BRUTE_FORCE_MAX_STATES) {
        return Err(CoreError::EnumerationTooLarge { num_classes, sites });
    }
    let states = states.unwrap();

    // Mirror segment's structural validation.
    for (index, map) in patch_maps.iter().enumerate() {
        if map.num_classes() != num_classes
            || map.height() != patch_maps[0].height()
            || map.width() != patch_maps[0].width()
        {
            return Err(CoreError::ShapeMismatch {
                what: "patch map",
                index,
                expected_height: patch_maps[0].height(),
                expected_width: patch_maps[0].width(),
                expected_classes: num_classes,
                actual_height: map.height(),
                actual_width: map.width(),
                actual_classes: map.num_classes(),
            });
        }
    }
    let window = config.pixel_window;
    if window > height && window > width && (height, width) != (1, 1) {
        return Err(CoreError::WindowTooLarge {
            window,
            height,
            width,
        });
    }
    let (rows, cols) = patch_grid_dims(height, width, config.patch_size);
    match config.patch_mode {
        PatchMode::Grid => {
            if patch_maps[0].height() != rows || patch_maps[0].width() != cols {
                return Err(CoreError::PatchFieldMismatch {
                    rows: patch_maps[0].height(),
                    cols: patch_maps[0].width(),
                    expected_rows: rows,
                    expected_cols: cols,
                });
            }
        }
        PatchMode::Centered => {
            if patch_maps[0].height() != height || patch_maps[0].width() != width {
                return Err(CoreError::PatchFieldMismatch {
                    rows: patch_maps[0].height(),
                    cols: patch_maps[0].width(),
                    expected_rows: height,
                    expected_cols: width,
                });
            }
        }
    }

    let eps = config.epsilon;
    let half = window / 2;
    let log_p = |p: f32| f64::from(p).max(eps).ln();

    // Per-site, per-class log-score from the four potentials, each computed
    // by direct enumeration.
    let mut site_scores = vec![0.0f64; sites * num_classes];
    for r in 0..height {
        for c in 0..width {
            // Which patch-grid cell feeds this pixel (None: neutral).
            let tile = match config.patch_mode {
                PatchMode::Grid => {
                    let (tr, tc) = (r / config.patch_size, c / config.patch_size);
                    (tr < rows && tc < cols).then_some((tr, tc))
                }
                PatchMode::Centered => {
                    let src_r = r.saturating_sub(config.patch_size / 2);
                    let src_c = c.saturating_sub(config.patch_size / 2);
                    Some((src_r, src_c))
                }
            };
            for class in 0..num_classes {
                let mut score = weights.pixel_unary * log_p(pixel_map.prob(r, c, class));

                let mut neighbor_sum = 0.0f64;
                let mut neighbor_count = 0usize;
                for nr in r.saturating_sub(half)..=(r + half).min(height - 1) {
                    for nc in c.saturating_sub(half)..=(c + half).min(width - 1) {
                        if (nr, nc) != (r, c) {
                            neighbor_sum += f64::from(pixel_map.prob(nr, nc, class));
                            neighbor_count += 1;
                        }
                    }
                }
                if neighbor_count > 0 {
                    let mean = neighbor_sum / neighbor_count as f64;
                    score += weights.pixel_binary * mean.max(eps).ln();
                }

                if let Some((tr, tc)) = tile {
                    let grid_h = patch_maps[0].height();
                    let grid_w = patch_maps[0].width();
                    for (map, bw) in patch_maps.iter().zip(weights.backbone_unary) {
                        score += weights.patch_unary * bw * log_p(map.prob(tr, tc, class));
                    }
                    for (map, bw) in patch_maps.iter().zip(weights.backbone_binary) {
                        let mut sum = 0.0f64;
                        let mut count = 0usize;
                        for nr in tr.saturating_sub(1)..=(tr + 1).min(grid_h - 1) {
                            for nc in tc.saturating_sub(1)..=(tc + 1).min(grid_w - 1) {
                                if (nr, nc) != (tr, tc) {
                                    sum += f64::from(map.prob(nr, nc, class));
                                    count += 1;
                                }
                            }
                        }
                        if count > 0 {
                            score += weights.patch_binary * bw * (sum / count as f64).max(eps).ln();
                        }
                    }
                }
                site_scores[(r * width + c) * num_classes + class] = score;
            }
        }
    }

    // Class visit order implements the tie-break under "first strictly
    // better wins".
    let class_order: Vec<u8> = match config.tie_break {
        TieBreak::LowestIndex => (0..num_classes as u8).collect(),
        TieBreak::HighestIndex => (0..num_classes as u8).rev().collect(),
    };

    let mut digits = vec![0usize; sites];
    let mut best_labels = vec![0u8; sites];
    let mut best_score = f64::NEG_INFINITY;
    for _ in 0..states {
        let mut score = 0.0f64;
        for (site, &digit) in digits.iter().enumerate() {
            score += site_scores[site * num_classes + usize::from(class_order[digit])];
        }
        if score > best_score {
            best_score = score;
            for (label, &digit) in best_labels.iter_mut().zip(&digits) {
                *label = class_order[digit];
            }
        }
        // Odometer increment, least-significant digit last (site 0 is most
        // significant).
        for digit in digits.iter_mut().rev() {
            *digit += 1;
            if *digit < num_classes {
                break;
            }
            *digit = 0;
        }
    }
    LabelMask::new(height, width, best_labels)
}
