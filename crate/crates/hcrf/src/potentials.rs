//! The four clique potentials of the hierarchical CRF, evaluated in
//! log-domain.
//!
//! Every potential is a power of a probability (or of a neighborhood mean of
//! probabilities), so it is computed as `weight * ln(max(p, epsilon))` and
//! only ever combined by addition. The epsilon clamp keeps degenerate 0/1
//! probabilities legal; with finite weights every stored value is finite.

use crate::types::{patch_grid_dims, CoreError, PatchMode, ProbMap};

/// A per-site, per-class nonnegative potential, stored as logarithms.
///
/// Same layout as [`ProbMap`] (row-major, class fastest) but the values are
/// unnormalized: sites need not sum to anything. The neutral potential is 1
/// everywhere, i.e. log 0.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialField {
    height: usize,
    width: usize,
    num_classes: usize,
    log_values: Vec<f64>,
}

impl PotentialField {
    /// The field that is 1 at every site and class (log-domain zeros).
    pub fn neutral(height: usize, width: usize, num_classes: usize) -> Self {
        PotentialField {
            height,
            width,
            num_classes,
            log_values: vec![0.0; height * width * num_classes],
        }
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

    pub fn log_values(&self) -> &[f64] {
        &self.log_values
    }

    pub fn log_value(&self, row: usize, col: usize, class: usize) -> f64 {
        self.log_values[(row * self.width + col) * self.num_classes + class]
    }

    /// The potential in linear domain; may underflow to 0 for very negative
    /// logs, which is why fusion never leaves log-domain.
    pub fn value(&self, row: usize, col: usize, class: usize) -> f64 {
        self.log_value(row, col, class).exp()
    }

    pub fn same_shape(&self, other: &PotentialField) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.num_classes == other.num_classes
    }
}

/// Pixel-level unary potential: `max(p, epsilon)^weight` per site and class.
pub fn pixel_unary(map: &ProbMap, weight: f64, epsilon: f64) -> PotentialField {
    let log_values = map
        .data()
        .iter()
        .map(|&p| weight * f64::from(p).max(epsilon).ln())
        .collect();
    PotentialField {
        height: map.height(),
        width: map.width(),
        num_classes: map.num_classes(),
        log_values,
    }
}

/// Pixel-level binary potential: the mean unary probability over the
/// `window`×`window` box centered on each site — center excluded, in-bounds
/// neighbors only at borders — clamped and raised to `weight`.
///
/// The default 7×7 window averages the 48 surrounding pixels. The window must
/// be odd and at least 3, and must fit the image in at least one dimension.
pub fn pixel_binary(
    map: &ProbMap,
    weight: f64,
    window: usize,
    epsilon: f64,
) -> Result<PotentialField, CoreError> {
    if window < 3 || window.is_multiple_of(2) {
        return Err(CoreError::BadWindow(window));
    }
    // A single-pixel image has no neighbors for any window; that degenerate
    // geometry gets the neutral field (like patch_binary's empty neighbor
    // set) instead of an error.
    if window > map.height() && window > map.width() && (map.height(), map.width()) != (1, 1) {
        return Err(CoreError::WindowTooLarge {
            window,
            height: map.height(),
            width: map.width(),
        });
    }
    let log_values = window_mean_per_class(map, window)
        .iter()
        .map(|&m| weight * m.max(epsilon).ln())
        .collect();
    Ok(PotentialField {
        height: map.height(),
        width: map.width(),
        num_classes: map.num_classes(),
        log_values,
    })
}

/// Patch-level unary potential over the three backbone probability maps:
/// `(p_a^{w_a} * p_b^{w_b} * p_c^{w_c})^weight` per patch and class.
pub fn patch_unary(
    backbones: &[ProbMap; 3],
    backbone_weights: [f64; 3],
    weight: f64,
    epsilon: f64,
) -> Result<PotentialField, CoreError> {
    check_backbone_shapes(backbones)?;
    let first = &backbones[0];
    let mut log_values = vec![0.0f64; first.data().len()];
    for (map, bw) in backbones.iter().zip(backbone_weights) {
        for (slot, &p) in log_values.iter_mut().zip(map.data()) {
            *slot += bw * f64::from(p).max(epsilon).ln();
        }
    }
    for slot in &mut log_values {
        *slot *= weight;
    }
    Ok(PotentialField {
        height: first.height(),
        width: first.width(),
        num_classes: first.num_classes(),
        log_values,
    })
}

/// Patch-level binary potential: for each backbone the mean probability over
/// the 8 neighboring patches (3×3 box, center excluded, in-bounds only at
/// grid borders) raised to that backbone's weight; the product of the three
/// raised to `weight`.
///
/// A patch grid too small to have neighbors is legal — an empty neighbor set
/// contributes the neutral potential 1 — so unlike [`pixel_binary`] this
/// never rejects small inputs.
pub fn patch_binary(
    backbones: &[ProbMap; 3],
    backbone_weights: [f64; 3],
    weight: f64,
    epsilon: f64,
) -> Result<PotentialField, CoreError> {
    check_backbone_shapes(backbones)?;
    let first = &backbones[0];
    let mut log_values = vec![0.0f64; first.data().len()];
    for (map, bw) in backbones.iter().zip(backbone_weights) {
        let means = window_mean_per_class(map, 3);
        for (slot, &m) in log_values.iter_mut().zip(&means) {
            *slot += bw * m.max(epsilon).ln();
        }
    }
    for slot in &mut log_values {
        *slot *= weight;
    }
    Ok(PotentialField {
        height: first.height(),
        width: first.width(),
        num_classes: first.num_classes(),
        log_values,
    })
}

/// Spread a patch-resolution field over the pixels of a
/// `image_height`×`image_width` image.
///
/// Grid mode expects the field at tile resolution
/// (`floor(h/ps)` × `floor(w/ps)`); each pixel inherits its containing tile
/// and pixels beyond the last whole tile get the neutral potential. Centered
/// mode expects a dense field computed at pixel stride (rows = height,
/// cols = width); each pixel inherits the patch whose top-left corner is at
/// `pixel - patch_size/2`, clipped to the image.
pub fn broadcast_patch_field(
    field: &PotentialField,
    patch_size: usize,
    mode: PatchMode,
    image_height: usize,
    image_width: usize,
) -> Result<PotentialField, CoreError> {
    if patch_size == 0 {
        return Err(CoreError::ZeroPatchSize);
    }
    let nc = field.num_classes;
    match mode {
        PatchMode::Grid => {
            let (rows, cols) = patch_grid_dims(image_height, image_width, patch_size);
            if field.height != rows || field.width != cols {
                return Err(CoreError::PatchFieldMismatch {
                    rows: field.height,
                    cols: field.width,
                    expected_rows: rows,
                    expected_cols: cols,
                });
            }
            // Neutral by default: remainder pixels outside the whole tiles
            // keep log 0.
            let mut log_values = vec![0.0f64; image_height * image_width * nc];
            for r in 0..image_height {
                let tile_r = r / patch_size;
                if tile_r >= rows {
                    continue;
                }
                for c in 0..image_width {
                    let tile_c = c / patch_size;
                    if tile_c >= cols {
                        continue;
                    }
                    let src = (tile_r * cols + tile_c) * nc;
                    let dst = (r * image_width + c) * nc;
                    log_values[dst..dst + nc]
                        .copy_from_slice(&field.log_values[src..src + nc]);
                }
            }
            Ok(PotentialField {
                height: image_height,
                width: image_width,
                num_classes: nc,
                log_values,
            })
        }
        PatchMode::Centered => {
            if field.height != image_height || field.width != image_width {
                return Err(CoreError::PatchFieldMismatch {
                    rows: field.height,
                    cols: field.width,
                    expected_rows: image_height,
                    expected_cols: image_width,
                });
            }
            let half = patch_size / 2;
            let mut log_values = Vec::with_capacity(image_height * image_width * nc);
            for r in 0..image_height {
                let src_r = r.saturating_sub(half).min(image_height - 1);
                for c in 0..image_width {
                    let src_c = c.saturating_sub(half).min(image_width - 1);
                    let src = (src_r * image_width + src_c) * nc;
                    log_values.extend_from_slice(&field.log_values[src..src + nc]);
                }
            }
            Ok(PotentialField {
                height: image_height,
                width: image_width,
                num_classes: nc,
                log_values,
            })
        }
    }
}

/// Per-site, per-class mean probability over the `window`×`window` box
/// centered on each site, excluding the center, normalized by the count of
/// in-bounds neighbors. Sites with no in-bounds neighbor (a 1×1 map) get the
/// neutral value 1.
///
/// Computed with a per-class summed-area table, so cost is independent of the
/// window size. Returned in the usual row-major, class-fastest layout.
pub fn window_mean_per_class(map: &ProbMap, window: usize) -> Vec<f64> {
    let (h, w, nc) = (map.height(), map.width(), map.num_classes());
    let half = window / 2;
    let stride = w + 1;
    let mut means = vec![0.0f64; h * w * nc];
    let mut integral = vec![0.0f64; (h + 1) * stride];
    for class in 0..nc {
        for r in 0..h {
            let mut row_sum = 0.0f64;
            for c in 0..w {
                row_sum += f64::from(map.prob(r, c, class));
                integral[(r + 1) * stride + (c + 1)] = integral[r * stride + (c + 1)] + row_sum;
            }
        }
        for r in 0..h {
            let r0 = r.saturating_sub(half);
            let r1 = (r + half).min(h - 1);
            for c in 0..w {
                let c0 = c.saturating_sub(half);
                let c1 = (c + half).min(w - 1);
                let cells = (r1 - r0 + 1) * (c1 - c0 + 1);
                means[(r * w + c) * nc + class] = if cells <= 1 {
                    1.0
                } else {
                    let box_sum = integral[(r1 + 1) * stride + (c1 + 1)]
                        - integral[r0 * stride + (c1 + 1)]
                        - integral[(r1 + 1) * stride + c0]
                        + integral[r0 * stride + c0];
                    let sum = box_sum - f64::from(map.prob(r, c, class));
                    // Cancellation in the table subtraction can nudge the
                    // mean a hair outside [0,1].
                    (sum / (cells - 1) as f64).clamp(0.0, 1.0)
                };
            }
        }
    }
    means
}

fn check_backbone_shapes(backbones: &[ProbMap; 3]) -> Result<(), CoreError> {
    let first = &backbones[0];
    for (index, map) in backbones.iter().enumerate().skip(1) {
        if map.height() != first.height()
            || map.width() != first.width()
            || map.num_classes() != first.num_classes()
        {
            return Err(CoreError::ShapeMismatch {
                what: "backbone map",
                index,
                expected_height: first.height(),
                expected_width: first.width(),
                expected_classes: first.num_classes(),
                actual_height: map.height(),
                actual_width: map.width(),
                actual_classes: map.num_classes(),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const EPS: f64 = 1e-12;

    fn constant3(h: usize, w: usize, probs: &[f32]) -> [ProbMap; 3] {
        [
            ProbMap::constant(h, w, probs).unwrap(),
            ProbMap::constant(h, w, probs).unwrap(),
            ProbMap::constant(h, w, probs).unwrap(),
        ]
    }

    #[test]
    fn unary_identity_and_square() {
        let map = ProbMap::constant(2, 2, &[0.8, 0.2]).unwrap();
        let field = pixel_unary(&map, 1.0, EPS);
        assert!((field.value(0, 0, 0) - 0.8).abs() < 1e-6);
        let field = pixel_unary(&map, 2.0, EPS);
        assert!((field.value(1, 1, 0) - 0.64).abs() < 1e-6);
        assert!((field.value(1, 1, 1) - 0.04).abs() < 1e-6);
    }

    #[test]
    fn unary_zero_probability_stays_finite() {
        let map = ProbMap::constant(1, 1, &[1.0, 0.0]).unwrap();
        let field = pixel_unary(&map, 3.0, EPS);
        assert!(field.log_value(0, 0, 1).is_finite());
        assert!((field.log_value(0, 0, 1) - 3.0 * EPS.ln()).abs() < 1e-9);
        assert_eq!(field.log_value(0, 0, 0), 0.0);
    }

    #[test]
    fn binary_constant_interior_mean_is_the_constant() {
        let map = ProbMap::constant(5, 5, &[0.6, 0.4]).unwrap();
        let field = pixel_binary(&map, 1.0, 3, EPS).unwrap();
        assert!((field.value(2, 2, 0) - 0.6).abs() < 1e-6);
        assert!((field.value(2, 2, 1) - 0.4).abs() < 1e-6);
    }

    #[test]
    fn binary_center_mean_of_eight_neighbors() {
        let probs = [
            [0.1f32, 0.2, 0.3],
            [0.4, 0.55, 0.6],
            [0.7, 0.8, 0.9],
        ];
        let map =
            ProbMap::from_fn(3, 3, 2, |r, c, class| {
                if class == 0 {
                    probs[r][c]
                } else {
                    1.0 - probs[r][c]
                }
            })
            .unwrap();
        let field = pixel_binary(&map, 1.0, 3, EPS).unwrap();
        // Eight neighbors of the center sum to 4.0.
        assert!((field.value(1, 1, 0) - 0.5).abs() < 1e-6);
        // Corner (0,0) averages its three in-bounds neighbors.
        let expected = (f64::from(probs[0][1]) + f64::from(probs[1][0]) + f64::from(probs[1][1])) / 3.0;
        assert!((field.value(0, 0, 0) - expected).abs() < 1e-9);
    }

    #[test]
    fn binary_window_validation() {
        let map = ProbMap::constant(5, 5, &[0.5, 0.5]).unwrap();
        assert!(matches!(
            pixel_binary(&map, 1.0, 4, EPS),
            Err(CoreError::BadWindow(4))
        ));
        assert!(matches!(
            pixel_binary(&map, 1.0, 1, EPS),
            Err(CoreError::BadWindow(1))
        ));
        assert!(matches!(
            pixel_binary(&map, 1.0, 7, EPS),
            Err(CoreError::WindowTooLarge { window: 7, .. })
        ));
        // A tall-and-narrow map admits a window that fits one dimension.
        let tall = ProbMap::constant(9, 3, &[0.5, 0.5]).unwrap();
        assert!(pixel_binary(&tall, 1.0, 7, EPS).is_ok());
        // A single pixel has no neighbors at all: neutral, not an error.
        let single = ProbMap::constant(1, 1, &[0.9, 0.1]).unwrap();
        let field = pixel_binary(&single, 2.0, 7, EPS).unwrap();
        assert_eq!(field.log_value(0, 0, 0), 0.0);
        assert_eq!(field.log_value(0, 0, 1), 0.0);
    }

    #[test]
    fn patch_unary_products() {
        let maps = constant3(2, 2, &[0.9, 0.1]);
        let field = patch_unary(&maps, [1.0; 3], 1.0, EPS).unwrap();
        assert!((field.value(0, 0, 0) - 0.729).abs() < 1e-6);

        let maps = constant3(2, 2, &[0.5, 0.5]);
        let field = patch_unary(&maps, [1.0; 3], 2.0, EPS).unwrap();
        assert!((field.value(1, 0, 0) - 0.015625).abs() < 1e-9);
    }

    #[test]
    fn patch_unary_one_hot_weights_reduce_to_first_backbone() {
        let a = ProbMap::constant(2, 3, &[0.3, 0.7]).unwrap();
        let b = ProbMap::constant(2, 3, &[0.8, 0.2]).unwrap();
        let c = ProbMap::constant(2, 3, &[0.55, 0.45]).unwrap();
        let field = patch_unary(&[a.clone(), b, c], [1.0, 0.0, 0.0], 1.0, EPS).unwrap();
        let reference = pixel_unary(&a, 1.0, EPS);
        for (got, want) in field.log_values().iter().zip(reference.log_values()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn patch_unary_rejects_shape_mismatch() {
        let a = ProbMap::constant(2, 2, &[0.5, 0.5]).unwrap();
        let b = ProbMap::constant(2, 3, &[0.5, 0.5]).unwrap();
        assert!(matches!(
            patch_unary(&[a.clone(), b, a.clone()], [1.0; 3], 1.0, EPS),
            Err(CoreError::ShapeMismatch { index: 1, .. })
        ));
    }

    #[test]
    fn patch_binary_constant_interior() {
        let maps = constant3(3, 3, &[0.7, 0.3]);
        let field = patch_binary(&maps, [1.0; 3], 1.0, EPS).unwrap();
        assert!((field.value(1, 1, 0) - 0.343).abs() < 1e-6);
    }

    #[test]
    fn patch_binary_single_patch_is_neutral() {
        let maps = constant3(1, 1, &[0.7, 0.3]);
        let field = patch_binary(&maps, [1.0; 3], 1.0, EPS).unwrap();
        assert_eq!(field.log_value(0, 0, 0), 0.0);
        assert_eq!(field.log_value(0, 0, 1), 0.0);
    }

    #[test]
    fn patch_binary_corner_uses_in_bounds_neighbors() {
        let grid = [
            [0.1f32, 0.2, 0.3],
            [0.4, 0.5, 0.6],
            [0.7, 0.8, 0.9],
        ];
        let map = ProbMap::from_fn(3, 3, 2, |r, c, class| {
            if class == 0 {
                grid[r][c]
            } else {
                1.0 - grid[r][c]
            }
        })
        .unwrap();
        let maps = [map.clone(), map.clone(), map];
        let field = patch_binary(&maps, [1.0; 3], 1.0, EPS).unwrap();
        let mean = (f64::from(grid[0][1]) + f64::from(grid[1][0]) + f64::from(grid[1][1])) / 3.0;
        assert!((field.value(0, 0, 0) - mean.powi(3)).abs() < 1e-9);
    }

    #[test]
    fn broadcast_grid_tiles_and_remainder() {
        let patch_map = ProbMap::from_fn(2, 2, 2, |r, c, class| {
            let p = 0.1 + 0.2 * (r * 2 + c) as f32;
            if class == 0 {
                p
            } else {
                1.0 - p
            }
        })
        .unwrap();
        let field = pixel_unary(&patch_map, 1.0, EPS);
        let pixels = broadcast_patch_field(&field, 256, PatchMode::Grid, 512, 512).unwrap();
        assert_eq!(pixels.log_value(0, 300, 0), field.log_value(0, 1, 0));
        assert_eq!(pixels.log_value(300, 0, 1), field.log_value(1, 0, 1));
        assert_eq!(pixels.log_value(511, 511, 0), field.log_value(1, 1, 0));

        // 300x300 image with 256-pixel patches: one tile, remainder neutral.
        let one = pixel_unary(&ProbMap::constant(1, 1, &[0.9, 0.1]).unwrap(), 1.0, EPS);
        let pixels = broadcast_patch_field(&one, 256, PatchMode::Grid, 300, 300).unwrap();
        assert_eq!(pixels.log_value(10, 10, 0), one.log_value(0, 0, 0));
        assert_eq!(pixels.log_value(299, 299, 0), 0.0);
        assert_eq!(pixels.log_value(10, 299, 1), 0.0);
    }

    #[test]
    fn broadcast_rejects_wrong_field_shape() {
        let field = PotentialField::neutral(2, 2, 2);
        assert!(matches!(
            broadcast_patch_field(&field, 256, PatchMode::Grid, 300, 300),
            Err(CoreError::PatchFieldMismatch {
                expected_rows: 1,
                expected_cols: 1,
                ..
            })
        ));
        assert!(matches!(
            broadcast_patch_field(&field, 4, PatchMode::Centered, 8, 8),
            Err(CoreError::PatchFieldMismatch { .. })
        ));
    }

    #[test]
    fn broadcast_centered_shifts_and_clips() {
        let dense = ProbMap::from_fn(6, 6, 2, |r, c, class| {
            let p = ((r * 6 + c) as f32 + 1.0) / 40.0;
            if class == 0 {
                p
            } else {
                1.0 - p
            }
        })
        .unwrap();
        let field = pixel_unary(&dense, 1.0, EPS);
        let out = broadcast_patch_field(&field, 4, PatchMode::Centered, 6, 6).unwrap();
        // half = 2: pixel (r,c) reads field at (r-2, c-2) clipped to 0.
        assert_eq!(out.log_value(0, 0, 0), field.log_value(0, 0, 0));
        assert_eq!(out.log_value(1, 3, 0), field.log_value(0, 1, 0));
        assert_eq!(out.log_value(5, 5, 1), field.log_value(3, 3, 1));
    }

    #[test]
    fn window_means_match_direct_enumeration() {
        let map = ProbMap::from_fn(7, 5, 3, |r, c, class| {
            let base = ((r * 31 + c * 17 + class * 7) % 13) as f32 / 13.0;
            // Crude normalization across three classes.
            let others: f32 = (0..3)
                .map(|k| ((r * 31 + c * 17 + k * 7) % 13) as f32 / 13.0)
                .sum();
            if others == 0.0 {
                1.0 / 3.0
            } else {
                base / others
            }
        })
        .unwrap();
        for window in [3usize, 5] {
            let means = window_mean_per_class(&map, window);
            let half = window / 2;
            for r in 0..7usize {
                for c in 0..5usize {
                    for class in 0..3 {
                        let mut sum = 0.0f64;
                        let mut count = 0usize;
                        for nr in r.saturating_sub(half)..=(r + half).min(6) {
                            for nc in c.saturating_sub(half)..=(c + half).min(4) {
                                if (nr, nc) != (r, c) {
                                    sum += f64::from(map.prob(nr, nc, class));
                                    count += 1;
                                }
                            }
                        }
                        let expected = if count == 0 { 1.0 } else { sum / count as f64 };
                        let got = means[(r * 5 + c) * 3 + class];
                        assert!(
                            (got - expected).abs() < 1e-9,
                            "window {window} site ({r},{c}) class {class}: {got} vs {expected}"
                        );
                    }
                }
            }
        }
    }
}
