//! Synthetic two-subject scenes used by tests, examples and the toy
//! end-to-end runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::Image;
use crate::rngr::{Point, PointAnnotation};

/// Half-open pixel rectangle `[y0, y1) x [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl Rect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }

    pub fn center(&self) -> Point {
        Point::new((self.x0 + self.x1) / 2, (self.y0 + self.y1) / 2)
    }

    /// Patch cells lying entirely inside the rectangle.
    pub fn interior_cells(&self, dims: (usize, usize), grid: usize) -> Vec<(usize, usize)> {
        let (h, w) = dims;
        let mut out = Vec::new();
        for r in 0..grid {
            for c in 0..grid {
                let (py0, py1) = (r * h / grid, (r + 1) * h / grid);
                let (px0, px1) = (c * w / grid, (c + 1) * w / grid);
                if py0 >= self.y0 && py1 <= self.y1 && px0 >= self.x0 && px1 <= self.x1 {
                    out.push((r, c));
                }
            }
        }
        out
    }
}

/// A square image with a selected subject (blob A) and a distractor
/// (blob B) on a plain background.
#[derive(Debug, Clone)]
pub struct TwoBlobScene {
    pub image: Image,
    pub blob_a: Rect,
    pub blob_b: Rect,
    pub color_a: [f64; 3],
    pub color_b: [f64; 3],
    pub background: [f64; 3],
    /// Positive point at blob A's center, negative at blob B's.
    pub annotation: PointAnnotation,
}

impl TwoBlobScene {
    /// Background with blob A only.
    pub fn only_a(&self) -> Image {
        self.only(self.blob_a, self.color_a)
    }

    /// Background with blob B only.
    pub fn only_b(&self) -> Image {
        self.only(self.blob_b, self.color_b)
    }

    fn only(&self, r: Rect, color: [f64; 3]) -> Image {
        let (h, w) = self.image.dims();
        let mut img = Image::filled(h, w, self.background);
        img.fill_rect(r.y0, r.x0, r.y1, r.x1, color);
        img
    }
}

fn jitter(rng: &mut ChaCha8Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    base.map(|v| (v + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

/// Fixed layout: blob A on the left, blob B on the right, vertically
/// centered, each a third of the side.
pub fn two_blob_scene(size: usize) -> TwoBlobScene {
    let side = size / 3;
    let y0 = (size - side) / 2;
    let a = Rect { y0, x0: size / 12, y1: y0 + side, x1: size / 12 + side };
    let b = Rect { y0, x0: size - size / 12 - side, y1: y0 + side, x1: size - size / 12 };
    scene(size, a, b, [0.85, 0.15, 0.1], [0.1, 0.2, 0.85], [0.5, 0.5, 0.5])
}

/// Randomized scene on a `grid x grid` patch lattice: patch-aligned blobs
/// of 2-4 patches per side, separated by at least two patches, with
/// jittered colors.
pub fn random_two_blob_scene(size: usize, grid: usize, seed: u64) -> TwoBlobScene {
    assert!(grid >= 10 && size.is_multiple_of(grid), "needs a grid of at least 10 dividing the image");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = size / grid;
    loop {
        let blob = |rng: &mut ChaCha8Rng| {
            let hh = rng.random_range(2..=4usize);
            let ww = rng.random_range(2..=4usize);
            let r = rng.random_range(0..=grid - hh);
            let c = rng.random_range(0..=grid - ww);
            (r, c, r + hh, c + ww)
        };
        let a = blob(&mut rng);
        let b = blob(&mut rng);
        let gap_r = (b.0 as isize - a.2 as isize).max(a.0 as isize - b.2 as isize);
        let gap_c = (b.1 as isize - a.3 as isize).max(a.1 as isize - b.3 as isize);
        if gap_r.max(gap_c) < 2 {
            continue;
        }
        let to_rect = |(r0, c0, r1, c1): (usize, usize, usize, usize)| Rect { y0: r0 * p, x0: c0 * p, y1: r1 * p, x1: c1 * p };
        let color_a = jitter(&mut rng, [0.85, 0.15, 0.1], 0.08);
        let color_b = jitter(&mut rng, [0.1, 0.2, 0.85], 0.08);
        let background = jitter(&mut rng, [0.5, 0.5, 0.5], 0.05);
        return scene(size, to_rect(a), to_rect(b), color_a, color_b, background);
    }
}

fn scene(size: usize, a: Rect, b: Rect, color_a: [f64; 3], color_b: [f64; 3], background: [f64; 3]) -> TwoBlobScene {
    let mut image = Image::filled(size, size, background);
    image.fill_rect(a.y0, a.x0, a.y1, a.x1, color_a);
    image.fill_rect(b.y0, b.x0, b.y1, b.x1, color_b);
    let annotation = PointAnnotation::new("two_blob.png", (size, size), a.center(), Some(b.center()));
    TwoBlobScene { image, blob_a: a, blob_b: b, color_a, color_b, background, annotation }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_scenes_keep_blobs_apart() {
        for seed in 0..50 {
            let s = random_two_blob_scene(64, 16, seed);
            assert!(!s.blob_a.interior_cells((64, 64), 16).is_empty());
            assert!(s.blob_a.contains(s.annotation.positive.y, s.annotation.positive.x));
            let n = s.annotation.negative.unwrap();
            assert!(s.blob_b.contains(n.y, n.x));
            s.annotation.validate().unwrap();
        }
    }

    #[test]
    fn fixed_scene_fits_toy_size() {
        let s = two_blob_scene(16);
        assert_eq!(s.blob_a, Rect { y0: 5, x0: 1, y1: 10, x1: 6 });
        assert_eq!(s.blob_b, Rect { y0: 5, x0: 10, y1: 10, x1: 15 });
        assert_eq!(s.image.pixel(7, 3), s.color_a);
    }
}
