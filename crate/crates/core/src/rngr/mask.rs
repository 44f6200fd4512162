use std::collections::VecDeque;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of histogram bins used for Otsu thresholding.
pub const OTSU_BINS: usize = 256;

/// Binary mask at patch resolution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchMask {
    pub cells: Array2<bool>,
    pub seed_patch: Option<(usize, usize)>,
}

impl PatchMask {
    pub fn new(cells: Array2<bool>) -> Self {
        Self { cells, seed_patch: None }
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

/// Binary mask at pixel resolution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelMask {
    bits: Array2<bool>,
    pub dilation_radius_patches: usize,
}

impl PixelMask {
    pub fn new(bits: Array2<bool>, dilation_radius_patches: usize) -> Self {
        Self { bits, dilation_radius_patches }
    }

    pub fn empty(dims: (usize, usize)) -> Self {
        Self::new(Array2::from_elem(dims, false), 0)
    }

    pub fn bits(&self) -> &Array2<bool> {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut Array2<bool> {
        &mut self.bits
    }

    pub fn dims(&self) -> (usize, usize) {
        self.bits.dim()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    pub fn is_full(&self) -> bool {
        self.bits.iter().all(|b| *b)
    }
}

/// Candidate threshold `k` of the 256-bin histogram over `[min, max]`.
pub fn otsu_edge(min: f64, max: f64, k: usize) -> f64 {
    min + (k + 1) as f64 * (max - min) / OTSU_BINS as f64
}

fn bin_index(v: f64, min: f64, max: f64) -> usize {
    let guess = ((v - min) / (max - min) * OTSU_BINS as f64).floor();
    let mut b = (guess.max(0.0) as usize).min(OTSU_BINS - 1);
    // Snap to the shared edge definition so `bin > k` iff `v > edge(k)`.
    while b > 0 && v <= otsu_edge(min, max, b - 1) {
        b -= 1;
    }
    while b < OTSU_BINS - 1 && v > otsu_edge(min, max, b) {
        b += 1;
    }
    b
}

/// Otsu threshold: the histogram edge maximizing between-class variance.
///
/// Class means use the actual values in each bin rather than bin centers.
/// Returns `(threshold, bin index)`; cells strictly above the threshold are
/// foreground.
pub fn otsu_threshold(map: &Array2<f64>) -> Result<(f64, usize)> {
    if map.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("similarity map contains non-finite values".into()));
    }
    let (min, max) = map
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(max > min) {
        return Err(Error::DegenerateMap("map is constant; no foreground/background split exists".into()));
    }
    let mut counts = [0usize; OTSU_BINS];
    let mut sums = [0.0f64; OTSU_BINS];
    for &v in map.iter() {
        let b = bin_index(v, min, max);
        counts[b] += 1;
        sums[b] += v;
    }
    let n = map.len();
    let total: f64 = sums.iter().sum();
    let (mut w0, mut s0) = (0usize, 0.0f64);
    let mut best: Option<(f64, usize)> = None;
    for k in 0..OTSU_BINS - 1 {
        w0 += counts[k];
        s0 += sums[k];
        let w1 = n - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let m0 = s0 / w0 as f64;
        let m1 = (total - s0) / w1 as f64;
        let var = (w0 as f64 / n as f64) * (w1 as f64 / n as f64) * (m0 - m1).powi(2);
        if best.is_none_or(|(bv, _)| var > bv) {
            best = Some((var, k));
        }
    }
    let (_, k) = best.expect("two distinct values always give a valid split");
    Ok((otsu_edge(min, max, k), k))
}

pub fn otsu_binarize(map: &Array2<f64>) -> Result<PatchMask> {
    let (min, max) = map
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let (_, k) = otsu_threshold(map)?;
    Ok(PatchMask::new(map.mapv(|v| bin_index(v, min, max) > k)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneOutcome {
    pub mask: PatchMask,
    pub warnings: Vec<String>,
}

/// The 8-connected component of `mask` containing `start`.
pub fn component_of(cells: &Array2<bool>, start: (usize, usize)) -> Array2<bool> {
    let (rows, cols) = cells.dim();
    let mut out = Array2::from_elem((rows, cols), false);
    if !cells[start] {
        return out;
    }
    let mut queue = VecDeque::from([start]);
    out[start] = true;
    while let Some((r, c)) = queue.pop_front() {
        for dr in -1isize..=1 {
            for dc in -1isize..=1 {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr >= rows as isize || nc >= cols as isize {
                    continue;
                }
                let n = (nr as usize, nc as usize);
                if cells[n] && !out[n] {
                    out[n] = true;
                    queue.push_back(n);
                }
            }
        }
    }
    out
}

/// Keeps only the 8-connected component containing `seed`.
///
/// When the seed cell itself is off, the component of the nearest on cell
/// (Chebyshev distance, ties broken in row-major order) is kept instead.
pub fn prune_components(mask: &PatchMask, seed: (usize, usize)) -> Result<PruneOutcome> {
    let (rows, cols) = mask.cells.dim();
    if seed.0 >= rows || seed.1 >= cols {
        return Err(Error::Dimension(format!("seed {seed:?} outside {rows}x{cols} mask")));
    }
    if mask.is_empty() {
        return Err(Error::EmptyMask("nothing survived binarization".into()));
    }
    let mut warnings = Vec::new();
    let start = if mask.cells[seed] {
        seed
    } else {
        let mut best: Option<(usize, (usize, usize))> = None;
        for ((r, c), &on) in mask.cells.indexed_iter() {
            if !on {
                continue;
            }
            let d = r.abs_diff(seed.0).max(c.abs_diff(seed.1));
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, (r, c)));
            }
        }
        let (_, cell) = best.expect("mask is non-empty");
        let msg = format!("seed patch {seed:?} is off; kept the component at nearest cell {cell:?}");
        log::warn!("{msg}");
        warnings.push(msg);
        cell
    };
    Ok(PruneOutcome {
        mask: PatchMask { cells: component_of(&mask.cells, start), seed_patch: Some(seed) },
        warnings,
    })
}

/// Chebyshev dilation of a boolean grid by `radius` cells.
pub fn dilate(cells: &Array2<bool>, radius: usize) -> Array2<bool> {
    if radius == 0 {
        return cells.clone();
    }
    let (rows, cols) = cells.dim();
    Array2::from_shape_fn((rows, cols), |(r, c)| {
        let (r0, r1) = (r.saturating_sub(radius), (r + radius).min(rows - 1));
        let (c0, c1) = (c.saturating_sub(radius), (c + radius).min(cols - 1));
        (r0..=r1).any(|rr| (c0..=c1).any(|cc| cells[[rr, cc]]))
    })
}

/// Nearest-neighbor upsample to pixels after dilating by whole patches.
pub fn expand_to_pixel_mask(mask: &PatchMask, image_dims: (usize, usize), dilation_patches: usize) -> Result<PixelMask> {
    let (g_rows, g_cols) = mask.cells.dim();
    let (h, w) = image_dims;
    if h < g_rows || w < g_cols {
        return Err(Error::Dimension(format!("image {h}x{w} smaller than the {g_rows}x{g_cols} patch grid")));
    }
    let grown = dilate(&mask.cells, dilation_patches);
    let bits = Array2::from_shape_fn((h, w), |(y, x)| grown[[y * g_rows / h, x * g_cols / w]]);
    Ok(PixelMask::new(bits, dilation_patches))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive search over every candidate edge, scoring each partition
    /// directly from the raw values.
    fn oracle_mask(map: &Array2<f64>) -> Array2<bool> {
        let vals: Vec<f64> = map.iter().copied().collect();
        let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let n = vals.len() as f64;
        let mut best: Option<(f64, f64)> = None;
        for k in 0..OTSU_BINS - 1 {
            let t = otsu_edge(min, max, k);
            let fg: Vec<f64> = vals.iter().copied().filter(|v| *v > t).collect();
            let bg: Vec<f64> = vals.iter().copied().filter(|v| *v <= t).collect();
            if fg.is_empty() || bg.is_empty() {
                continue;
            }
            let mf = fg.iter().sum::<f64>() / fg.len() as f64;
            let mb = bg.iter().sum::<f64>() / bg.len() as f64;
            let var = (fg.len() as f64 / n) * (bg.len() as f64 / n) * (mf - mb).powi(2);
            if best.is_none_or(|(bv, _)| var > bv) {
                best = Some((var, t));
            }
        }
        let t = best.unwrap().1;
        map.mapv(|v| v > t)
    }

    #[test]
    fn two_level_map_splits_rows() {
        let m = otsu_binarize(&array![[0.1, 0.1], [0.9, 0.9]]).unwrap();
        assert_eq!(m.cells, array![[false, false], [true, true]]);
        assert_eq!(oracle_mask(&array![[0.1, 0.1], [0.9, 0.9]]), m.cells);
    }

    #[test]
    fn constant_map_is_degenerate() {
        assert!(matches!(otsu_binarize(&Array2::from_elem((3, 3), 0.4)), Err(Error::DegenerateMap(_))));
    }

    #[test]
    fn otsu_matches_exhaustive_oracle_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let g = rng.random_range(2..=16);
            let map = Array2::from_shape_simple_fn((g, g), || rng.random::<f64>());
            assert_eq!(otsu_binarize(&map).unwrap().cells, oracle_mask(&map));
        }
    }

    #[test]
    fn pruning_keeps_only_the_seed_blob() {
        let cells = array![
            [true, true, false, false, false],
            [true, false, false, false, true],
            [false, false, false, true, true],
        ];
        let out = prune_components(&PatchMask::new(cells.clone()), (0, 0)).unwrap();
        assert_eq!(out.mask.cells, array![
            [true, true, false, false, false],
            [true, false, false, false, false],
            [false, false, false, false, false],
        ]);
        assert!(out.warnings.is_empty());

        let single = array![[false, true], [true, false]];
        let out = prune_components(&PatchMask::new(single.clone()), (0, 1)).unwrap();
        assert_eq!(out.mask.cells, single);

        let out = prune_components(&PatchMask::new(cells), (1, 3)).unwrap();
        assert!(out.mask.cells[[1, 4]]);
        assert!(!out.mask.cells[[0, 0]]);
        assert_eq!(out.warnings.len(), 1);

        assert!(matches!(
            prune_components(&PatchMask::new(Array2::from_elem((2, 2), false)), (0, 0)),
            Err(Error::EmptyMask(_))
        ));
    }

    #[test]
    fn nearest_cell_ties_break_row_major() {
        // Both (0, 1) and (2, 1) are at distance 1 from (1, 1); row-major picks (0, 1).
        let cells = array![[false, true, false], [false, false, false], [false, true, false]];
        let out = prune_components(&PatchMask::new(cells), (1, 1)).unwrap();
        assert!(out.mask.cells[[0, 1]]);
        assert!(!out.mask.cells[[2, 1]]);
    }

    #[test]
    fn expansion_examples() {
        let m = PatchMask::new(array![[true, false], [false, false]]);
        let px = expand_to_pixel_mask(&m, (4, 4), 0).unwrap();
        let expected = Array2::from_shape_fn((4, 4), |(y, x)| y < 2 && x < 2);
        assert_eq!(px.bits(), &expected);
        let px = expand_to_pixel_mask(&m, (4, 4), 1).unwrap();
        assert!(px.is_full());

        let m = PatchMask::new(Array2::from_shape_fn((4, 4), |(r, c)| r == 1 && c == 1));
        let px = expand_to_pixel_mask(&m, (8, 8), 1).unwrap();
        let expected = Array2::from_shape_fn((8, 8), |(y, x)| y < 6 && x < 6);
        assert_eq!(px.bits(), &expected);

        let empty = PatchMask::new(Array2::from_elem((4, 4), false));
        assert!(expand_to_pixel_mask(&empty, (8, 8), 2).unwrap().is_empty());
    }

    fn arb_mask() -> impl Strategy<Value = Array2<bool>> {
        (2usize..8).prop_flat_map(|g| {
            proptest::collection::vec(any::<bool>(), g * g)
                .prop_map(move |v| Array2::from_shape_vec((g, g), v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn pruning_is_a_connected_idempotent_subset(cells in arb_mask(), sr in 0usize..8, sc in 0usize..8) {
            let g = cells.nrows();
            prop_assume!(cells.iter().any(|b| *b));
            let seed = (sr % g, sc % g);
            let out = prune_components(&PatchMask::new(cells.clone()), seed).unwrap().mask;
            for (a, b) in out.cells.iter().zip(cells.iter()) {
                prop_assert!(!*a || *b);
            }
            let start = out.cells.indexed_iter().find(|(_, b)| **b).unwrap().0;
            prop_assert_eq!(component_of(&out.cells, start), out.cells.clone());
            let again = prune_components(&out, seed).unwrap().mask;
            prop_assert_eq!(again.cells, out.cells);
        }

        #[test]
        fn dilation_is_monotone(cells in arb_mask(), d in 0usize..3) {
            let g = cells.nrows();
            let m = PatchMask::new(cells);
            let a = expand_to_pixel_mask(&m, (g * 3, g * 2), d).unwrap();
            let b = expand_to_pixel_mask(&m, (g * 3, g * 2), d + 1).unwrap();
            for (x, y) in a.bits().iter().zip(b.bits().iter()) {
                prop_assert!(!*x || *y);
            }
        }
    }
}
