use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::annotation::Point;
use crate::backbone::PatchEncoding;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

/// Cosine similarity of every patch to a seed patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMap {
    pub values: Array2<f64>,
    pub seed_patch: (usize, usize),
    pub polarity: Polarity,
    pub warnings: Vec<String>,
}

/// Maps a pixel point to its `(row, col)` patch on a `G x G` grid.
pub fn point_to_patch(point: Point, image_dims: (usize, usize), grid: usize) -> Result<(usize, usize)> {
    let (h, w) = image_dims;
    if point.x >= w || point.y >= h {
        return Err(Error::Annotation {
            code: "point_out_of_bounds",
            message: format!("point ({}, {}) outside {w}x{h} image", point.x, point.y),
        });
    }
    Ok((point.y * grid / h, point.x * grid / w))
}

pub fn patch_similarity(enc: &PatchEncoding, seed: (usize, usize), polarity: Polarity) -> Result<SimilarityMap> {
    let g = enc.grid_size();
    if seed.0 >= g || seed.1 >= g {
        return Err(Error::Dimension(format!("seed patch {seed:?} outside {g}x{g} grid")));
    }
    let anchor = enc.patch(seed.0, seed.1);
    let anchor_norm = anchor.dot(&anchor).sqrt();
    if anchor_norm == 0.0 {
        return Err(Error::DegenerateEncoding(format!("seed patch {seed:?} has zero norm")));
    }
    let mut warnings = Vec::new();
    let mut values = Array2::zeros((g, g));
    for r in 0..g {
        for c in 0..g {
            if (r, c) == seed {
                values[[r, c]] = 1.0;
                continue;
            }
            let p = enc.patch(r, c);
            let norm = p.dot(&p).sqrt();
            values[[r, c]] = if norm == 0.0 {
                warnings.push(format!("patch ({r}, {c}) has zero norm; similarity set to 0"));
                0.0
            } else {
                (anchor.dot(&p) / (anchor_norm * norm)).clamp(-1.0, 1.0)
            };
        }
    }
    Ok(SimilarityMap { values, seed_patch: seed, polarity, warnings })
}

/// Rescales a cosine from `[-1, 1]` to `[0, 1]`.
pub fn rescale_cosine(s: f64) -> f64 {
    (s + 1.0) / 2.0
}

/// `r(fg) * (1 - r(bg))` elementwise, with `r(s) = (s + 1) / 2`.
///
/// With `fg` the positive map this is the literal positive-subject score;
/// passing the negative map as `fg` scores the distractor instead.
pub fn combine_similarity(foreground: &SimilarityMap, background: &SimilarityMap) -> Result<Array2<f64>> {
    if foreground.values.dim() != background.values.dim() {
        return Err(Error::Dimension(format!(
            "similarity grids {:?} and {:?} differ",
            foreground.values.dim(),
            background.values.dim()
        )));
    }
    if foreground.polarity == background.polarity {
        return Err(Error::Parameter("combined maps must have opposite polarities".into()));
    }
    let mut out = foreground.values.mapv(rescale_cosine);
    out.zip_mut_with(&background.values, |f, &b| *f *= 1.0 - rescale_cosine(b));
    Ok(out)
}

/// Index into `0..n` under half-sample symmetric reflection.
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Normalized Gaussian kernel truncated at `2 sigma`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (2.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_smooth(map: &Array2<f64>, sigma: f64) -> Result<Array2<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Parameter(format!("sigma must be positive, got {sigma}")));
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (rows, cols) = map.dim();
    let mut tmp = Array2::<f64>::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            tmp[[r, c]] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * map[[r, reflect(c as isize + k as isize - radius, cols)]])
                .sum::<f64>();
        }
    }
    let mut out = Array2::<f64>::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            out[[r, c]] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[[reflect(r as isize + k as isize - radius, rows), c]])
                .sum::<f64>();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1, Array3};
    use proptest::prelude::*;

    fn encoding(patches: &[[f64; 3]], g: usize) -> PatchEncoding {
        let grid = Array3::from_shape_fn((g, g, 3), |(r, c, d)| patches[r * g + c][d]);
        PatchEncoding::new(grid, Array1::ones(3), (g, g)).unwrap()
    }

    #[test]
    fn point_to_patch_examples() {
        assert_eq!(point_to_patch(Point::new(0, 0), (224, 224), 16).unwrap(), (0, 0));
        assert_eq!(point_to_patch(Point::new(223, 223), (224, 224), 16).unwrap(), (15, 15));
        assert_eq!(point_to_patch(Point::new(112, 50), (224, 224), 16).unwrap(), (3, 8));
        let err = point_to_patch(Point::new(224, 0), (224, 224), 16).unwrap_err();
        assert_eq!(err.code(), "point_out_of_bounds");
    }

    #[test]
    fn hand_computed_two_by_two_map() {
        let e = [1.0, 2.0, 2.0];
        let norm = 3.0;
        let enc = encoding(&[e, e, e.map(|v| -v), e.map(|v| v / norm * 2.0)], 2);
        let m = patch_similarity(&enc, (0, 0), Polarity::Positive).unwrap();
        let expected = array![[1.0, 1.0], [-1.0, 1.0]];
        for (a, b) in m.values.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_patches_and_degenerate_seed() {
        let enc = encoding(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 2.0, 0.0]], 2);
        let m = patch_similarity(&enc, (0, 0), Polarity::Negative).unwrap();
        assert_eq!(m.values, array![[1.0, 0.0], [0.0, 0.0]]);

        let zero = encoding(&[[0.0; 3], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0; 3]], 2);
        assert!(matches!(
            patch_similarity(&zero, (0, 0), Polarity::Positive),
            Err(Error::DegenerateEncoding(_))
        ));
        let m = patch_similarity(&zero, (0, 1), Polarity::Positive).unwrap();
        assert_eq!(m.values[[0, 0]], 0.0);
        assert_eq!(m.values[[1, 1]], 0.0);
        assert_eq!(m.warnings.len(), 2);
    }

    fn single_cell(v: f64, polarity: Polarity) -> SimilarityMap {
        SimilarityMap { values: array![[v]], seed_patch: (0, 0), polarity, warnings: vec![] }
    }

    #[test]
    fn combine_examples() {
        let c = |p: f64, n: f64| {
            combine_similarity(&single_cell(p, Polarity::Positive), &single_cell(n, Polarity::Negative)).unwrap()[[0, 0]]
        };
        assert_eq!(c(1.0, -1.0), 1.0);
        assert_eq!(c(1.0, 1.0), 0.0);
        assert_eq!(c(0.0, 0.0), 0.25);
        assert!(matches!(
            combine_similarity(&single_cell(0.0, Polarity::Positive), &single_cell(0.0, Polarity::Positive)),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn smoothing_examples() {
        let constant = Array2::from_elem((5, 5), 0.3);
        let s = gaussian_smooth(&constant, 1.0).unwrap();
        assert!(s.iter().all(|v| (v - 0.3).abs() < 1e-15));

        let mut spike = Array2::zeros((11, 11));
        spike[[5, 5]] = 1.0;
        let s = gaussian_smooth(&spike, 1.0).unwrap();
        assert!((s.sum() - 1.0).abs() < 1e-9);
        assert!(s[[5, 5]] < 1.0 && s[[5, 6]] > 0.0);

        let m = array![[0.1, 0.7], [0.3, 0.9]];
        let s = gaussian_smooth(&m, 0.01).unwrap();
        for (a, b) in s.iter().zip(m.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(gaussian_smooth(&m, 0.0).is_err());
        assert!(gaussian_smooth(&m, -1.0).is_err());
    }

    proptest! {
        #[test]
        fn combined_scores_stay_in_unit_interval(p in -1.0f64..=1.0, n in -1.0f64..=1.0) {
            let v = combine_similarity(&single_cell(p, Polarity::Positive), &single_cell(n, Polarity::Negative)).unwrap()[[0, 0]];
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn smoothing_stays_within_input_range(vals in proptest::collection::vec(0.0f64..1.0, 36), sigma in 0.1f64..3.0) {
            let m = Array2::from_shape_vec((6, 6), vals).unwrap();
            let (lo, hi) = m.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            let s = gaussian_smooth(&m, sigma).unwrap();
            prop_assert!(s.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }

        #[test]
        fn similarity_values_are_bounded_with_unit_seed(vals in proptest::collection::vec(-1.0f64..1.0, 27), r in 0usize..3, c in 0usize..3) {
            let grid = Array3::from_shape_vec((3, 3, 3), vals).unwrap();
            prop_assume!(grid.slice(ndarray::s![r, c, ..]).iter().any(|v| v.abs() > 1e-6));
            let enc = PatchEncoding::new(grid, Array1::ones(3), (3, 3)).unwrap();
            let m = patch_similarity(&enc, (r, c), Polarity::Positive).unwrap();
            prop_assert!((m.values[[r, c]] - 1.0).abs() < 1e-6);
            prop_assert!(m.values.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
