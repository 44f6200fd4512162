//! Deterministic, weight-free stand-ins for the pretrained components.

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::randn;
use super::unet::UNetConfig;
use super::{
    FeatureEncoder, InpaintOutcome, Inpainter, JointEncoder, LatentCodec, LatentImage, PatchEncoder,
    PatchEncoding, TextEncoder, TextEncoding,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rngr::PixelMask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyBackboneConfig {
    /// Square image side the denoiser operates on.
    pub image_size: usize,
    pub patch_grid: usize,
    pub hist_bins: usize,
    pub latent_scale: usize,
    pub text_dim: usize,
    pub max_tokens: usize,
    pub identifier: String,
    pub hidden: usize,
    pub heads: usize,
    pub blocks: usize,
    pub res_per_block: usize,
    pub position_scale: f64,
    pub attention_sharpness: f64,
    pub seed: u64,
    /// Denoising steps on random rectangle scenes before the denoiser is
    /// frozen; 0 keeps the random initialization.
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
}

impl Default for ToyBackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            patch_grid: 8,
            hist_bins: 4,
            latent_scale: 2,
            text_dim: 32,
            max_tokens: 77,
            identifier: "[V]".into(),
            hidden: 32,
            heads: 2,
            blocks: 2,
            res_per_block: 2,
            position_scale: 1.0,
            attention_sharpness: 1.0,
            seed: 0x5eed,
            pretrain_steps: 0,
            pretrain_lr: 1e-3,
        }
    }
}

impl ToyBackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_scale == 0 || !self.image_size.is_multiple_of(self.latent_scale) {
            return Err(Error::config("latent_scale", "must divide image_size"));
        }
        if self.patch_grid < 2 || self.patch_grid > self.image_size {
            return Err(Error::config("patch_grid", "must lie in 2..=image_size"));
        }
        if self.hist_bins < 2 {
            return Err(Error::config("hist_bins", "need at least 2 bins per channel"));
        }
        if self.identifier.trim().is_empty() || self.identifier.contains(char::is_whitespace) {
            return Err(Error::config("identifier", "must be a single non-empty token"));
        }
        if !(self.pretrain_lr.is_finite() && self.pretrain_lr > 0.0) {
            return Err(Error::config("pretrain_lr", "must be finite and positive"));
        }
        self.unet_config().validate()
    }

    pub fn unet_config(&self) -> UNetConfig {
        let side = self.image_size / self.latent_scale.max(1);
        UNetConfig {
            latent_channels: 3 * self.latent_scale * self.latent_scale,
            latent_size: (side, side),
            hidden: self.hidden,
            heads: self.heads,
            text_dim: self.text_dim,
            time_dim: 32,
            blocks: self.blocks,
            res_per_block: self.res_per_block,
            position_scale: self.position_scale,
            attention_sharpness: self.attention_sharpness,
            seed: self.seed,
        }
    }
}

fn hash_f64s<'a>(hasher: &mut Sha256, values: impl IntoIterator<Item = &'a f64>) {
    for v in values {
        hasher.update(v.to_bits().to_le_bytes());
    }
}

/// Seeded random orthogonal matrix (modified Gram-Schmidt).
fn orthogonal(n: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = randn(&mut rng, n, n, 1.0);
    for j in 0..n {
        for k in 0..j {
            let dot: f64 = (0..n).map(|i| m[[i, j]] * m[[i, k]]).sum();
            for i in 0..n {
                m[[i, j]] -= dot * m[[i, k]];
            }
        }
        let norm: f64 = (0..n).map(|i| m[[i, j]].powi(2)).sum::<f64>().sqrt();
        for i in 0..n {
            m[[i, j]] /= norm;
        }
    }
    m
}

/// Per-patch normalized joint color histogram, rotated by a fixed orthogonal
/// matrix. Rotation preserves cosines, so similarity maps are exactly those
/// of the raw histograms.
#[derive(Debug, Clone)]
pub struct ToyPatchEncoder {
    grid: usize,
    bins: usize,
    projection: Array2<f64>,
}

impl ToyPatchEncoder {
    pub fn new(grid: usize, bins: usize, seed: u64) -> Self {
        let dim = bins * bins * bins;
        Self { grid, bins, projection: orthogonal(dim, seed ^ 0xc11f) }
    }

    fn bin_of(&self, rgb: [f64; 3]) -> usize {
        let b = self.bins;
        let q = |v: f64| ((v.clamp(0.0, 1.0) * b as f64) as usize).min(b - 1);
        (q(rgb[0]) * b + q(rgb[1])) * b + q(rgb[2])
    }

    fn project(&self, hist: &Array1<f64>) -> Array1<f64> {
        self.projection.t().dot(hist)
    }

    /// Embedding of the whole image (the global token).
    pub fn embed(&self, image: &Image) -> Array1<f64> {
        let mut hist = Array1::zeros(self.projection.nrows());
        for y in 0..image.height() {
            for x in 0..image.width() {
                hist[self.bin_of(image.pixel(y, x))] += 1.0;
            }
        }
        hist /= (image.height() * image.width()) as f64;
        self.project(&hist)
    }
}

impl PatchEncoder for ToyPatchEncoder {
    fn grid_size(&self) -> usize {
        self.grid
    }

    fn embed_dim(&self) -> usize {
        self.projection.ncols()
    }

    fn encode_image_patches(&self, image: &Image) -> Result<PatchEncoding> {
        let (h, w) = image.dims();
        let g = self.grid;
        if h < g || w < g {
            return Err(Error::Dimension(format!("image {h}x{w} smaller than the {g}x{g} patch grid")));
        }
        let nb = self.projection.nrows();
        let mut hist = Array3::<f64>::zeros((g, g, nb));
        let mut counts = Array2::<f64>::zeros((g, g));
        for y in 0..h {
            let r = y * g / h;
            for x in 0..w {
                let c = x * g / w;
                hist[[r, c, self.bin_of(image.pixel(y, x))]] += 1.0;
                counts[[r, c]] += 1.0;
            }
        }
        let mut grid = Array3::zeros((g, g, self.embed_dim()));
        for r in 0..g {
            for c in 0..g {
                let hv = hist.slice(ndarray::s![r, c, ..]).to_owned() / counts[[r, c]];
                grid.slice_mut(ndarray::s![r, c, ..]).assign(&self.project(&hv));
            }
        }
        PatchEncoding::new(grid, self.embed(image), (h, w))
    }

    fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"toy-patch-encoder");
        hasher.update((self.grid as u64).to_le_bytes());
        hasher.update((self.bins as u64).to_le_bytes());
        hash_f64s(&mut hasher, self.projection.iter());
        hex::encode(hasher.finalize())
    }
}

impl FeatureEncoder for ToyPatchEncoder {
    fn embed_image(&self, image: &Image) -> Result<Array1<f64>> {
        Ok(self.embed(image))
    }
}

/// Hash-seeded token embeddings with a small position term.
#[derive(Debug, Clone)]
pub struct ToyTextEncoder {
    dim: usize,
    max_tokens: usize,
    identifier: String,
    seed: u64,
}

impl ToyTextEncoder {
    pub fn new(dim: usize, max_tokens: usize, identifier: &str, seed: u64) -> Self {
        Self { dim, max_tokens: max_tokens.max(1), identifier: identifier.to_string(), seed }
    }

    pub fn tokenize(&self, prompt: &str) -> Vec<String> {
        let spaced = prompt.replace(&self.identifier, &format!(" {} ", self.identifier));
        spaced
            .split_whitespace()
            .map(|t| if t == self.identifier { t.to_string() } else { t.to_lowercase() })
            .collect()
    }

    fn token_vector(&self, token: &str) -> Array1<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(token.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        randn(&mut rng, 1, self.dim, 1.0).row(0).to_owned()
    }
}

impl TextEncoder for ToyTextEncoder {
    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn identifier(&self) -> &str {
        &self.identifier
    }

    fn encode_text(&self, prompt: &str) -> TextEncoding {
        let mut words = vec!["<bos>".to_string()];
        words.extend(self.tokenize(prompt));
        let mut warnings = Vec::new();
        if words.len() > self.max_tokens {
            warnings.push(format!(
                "prompt truncated from {} to {} tokens",
                words.len(),
                self.max_tokens
            ));
            log::warn!("{}", warnings[0]);
            words.truncate(self.max_tokens);
        }
        let mut tokens = Array2::zeros((words.len(), self.dim));
        for (i, w) in words.iter().enumerate() {
            let mut v = self.token_vector(w);
            for (k, x) in v.iter_mut().enumerate() {
                *x += 0.1 * ((i as f64 + 1.0) * (k as f64 + 1.0) / self.dim as f64).sin();
            }
            tokens.row_mut(i).assign(&v);
        }
        let identifier_span = words.iter().position(|w| *w == self.identifier).map(|i| i..i + 1);
        TextEncoding { tokens, prompt_text: prompt.to_string(), identifier_span, warnings }
    }

    fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"toy-text-encoder");
        hasher.update((self.dim as u64).to_le_bytes());
        hasher.update((self.max_tokens as u64).to_le_bytes());
        hasher.update(self.identifier.as_bytes());
        hasher.update(self.seed.to_le_bytes());
        hex::encode(hasher.finalize())
    }
}

/// Toy joint encoder: color-histogram image embeddings, hashed text embeddings
/// in the same space.
pub struct ToyJointEncoder {
    pub image: ToyPatchEncoder,
    pub text: ToyTextEncoder,
}

impl FeatureEncoder for ToyJointEncoder {
    fn embed_image(&self, image: &Image) -> Result<Array1<f64>> {
        Ok(self.image.embed(image))
    }
}

impl JointEncoder for ToyJointEncoder {
    fn embed_text(&self, prompt: &str) -> Result<Array1<f64>> {
        let dim = self.image.embed_dim();
        let mut acc = Array1::zeros(dim);
        for tok in self.text.tokenize(prompt) {
            let v = ToyTextEncoder::new(dim, 1, "", self.text.seed).token_vector(&tok);
            acc += &v;
        }
        Ok(acc)
    }
}

/// Lossless pixel-unshuffle codec: `3 x H x W` to `3s^2 x H/s x W/s`.
#[derive(Debug, Clone, Copy)]
pub struct SpaceToDepthCodec {
    scale: usize,
}

impl SpaceToDepthCodec {
    pub fn new(scale: usize) -> Self {
        Self { scale: scale.max(1) }
    }
}

impl LatentCodec for SpaceToDepthCodec {
    fn scale_factor(&self) -> usize {
        self.scale
    }

    fn latent_channels(&self) -> usize {
        3 * self.scale * self.scale
    }

    fn encode(&self, image: &Image) -> Result<LatentImage> {
        let s = self.scale;
        let (h, w) = image.dims();
        if h % s != 0 || w % s != 0 {
            return Err(Error::Dimension(format!("{h}x{w} not divisible by latent scale {s}")));
        }
        let src = image.data();
        let data = Array3::from_shape_fn((3 * s * s, h / s, w / s), |(ch, y, x)| {
            let c = ch / (s * s);
            let dy = (ch / s) % s;
            let dx = ch % s;
            src[[y * s + dy, x * s + dx, c]]
        });
        Ok(LatentImage { data, scale: s })
    }

    fn decode(&self, latent: &LatentImage) -> Result<Image> {
        let s = self.scale;
        let (c, h, w) = latent.data.dim();
        if c != 3 * s * s {
            return Err(Error::Dimension(format!("latent has {c} channels, codec expects {}", 3 * s * s)));
        }
        let data = Array3::from_shape_fn((h * s, w * s, 3), |(y, x, ch)| {
            latent.data[[ch * s * s + (y % s) * s + (x % s), y / s, x / s]]
        });
        Image::new(data)
    }

    fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"space-to-depth");
        hasher.update((self.scale as u64).to_le_bytes());
        hex::encode(hasher.finalize())
    }
}

/// Fills the masked region with the mean color of the unmasked pixels that
/// touch it (8-neighborhood ring).
#[derive(Debug, Clone, Copy, Default)]
pub struct BorderMeanInpainter;

impl BorderMeanInpainter {
    pub fn border_mean(image: &Image, mask: &PixelMask) -> Option<[f64; 3]> {
        let (h, w) = image.dims();
        let bits = mask.bits();
        let mut sum = [0.0; 3];
        let mut n = 0usize;
        for y in 0..h {
            for x in 0..w {
                if bits[[y, x]] {
                    continue;
                }
                let touches = (-1isize..=1).any(|dy| {
                    (-1isize..=1).any(|dx| {
                        let (ny, nx) = (y as isize + dy, x as isize + dx);
                        ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w && bits[[ny as usize, nx as usize]]
                    })
                });
                if touches {
                    let p = image.pixel(y, x);
                    for c in 0..3 {
                        sum[c] += p[c];
                    }
                    n += 1;
                }
            }
        }
        (n > 0).then(|| sum.map(|s| s / n as f64))
    }
}

impl Inpainter for BorderMeanInpainter {
    fn inpaint(&self, image: &Image, mask: &PixelMask, _prompt: &str, _seed: u64) -> Result<InpaintOutcome> {
        if mask.dims() != image.dims() {
            return Err(Error::Dimension(format!("mask {:?} vs image {:?}", mask.dims(), image.dims())));
        }
        if mask.is_empty() {
            let msg = "empty inpainting mask; image returned unchanged".to_string();
            log::warn!("{msg}");
            return Ok(InpaintOutcome { image: image.clone(), warnings: vec![msg] });
        }
        if mask.is_full() {
            return Err(Error::Input("inpainting mask covers the entire image".into()));
        }
        let fill = Self::border_mean(image, mask).expect("a partial mask always has a border");
        let mut out = image.clone();
        for ((y, x), &on) in mask.bits().indexed_iter() {
            if on {
                out.set_pixel(y, x, fill);
            }
        }
        Ok(InpaintOutcome { image: out, warnings: Vec::new() })
    }

    fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(b"border-mean-inpainter"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::latent_roundtrip;

    fn cosine(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
        a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt())
    }

    #[test]
    fn uniform_image_gives_identical_patches() {
        let enc = ToyPatchEncoder::new(4, 4, 1);
        let img = Image::filled(16, 16, [0.5, 0.5, 0.5]);
        let e = enc.encode_image_patches(&img).unwrap();
        let first = e.patch(0, 0).to_owned();
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(e.patch(r, c), first.view());
            }
        }
    }

    #[test]
    fn red_blue_halves_separate_cleanly() {
        // Hand check: a pure-red patch is the one-hot histogram at bin (3,0,0),
        // pure blue at (0,0,3). Same-color cosine is 1, cross-color 0, and the
        // orthogonal rotation preserves both.
        let enc = ToyPatchEncoder::new(4, 4, 7);
        let mut img = Image::filled(16, 16, [1.0, 0.0, 0.0]);
        img.fill_rect(0, 8, 16, 16, [0.0, 0.0, 1.0]);
        let e = enc.encode_image_patches(&img).unwrap();
        let left: Vec<_> = (0..4).flat_map(|r| (0..2).map(move |c| (r, c))).collect();
        for &(r, c) in &left {
            for &(r2, c2) in &left {
                assert!(cosine(e.patch(r, c), e.patch(r2, c2)) >= 0.99);
            }
            for r2 in 0..4 {
                for c2 in 2..4 {
                    assert!(cosine(e.patch(r, c), e.patch(r2, c2)) <= 0.1);
                }
            }
        }
    }

    #[test]
    fn encoding_is_bitwise_deterministic() {
        let enc = ToyPatchEncoder::new(4, 4, 7);
        let mut img = Image::filled(12, 12, [0.2, 0.7, 0.1]);
        img.fill_rect(3, 3, 9, 7, [0.9, 0.1, 0.4]);
        assert_eq!(enc.encode_image_patches(&img).unwrap(), enc.encode_image_patches(&img).unwrap());
    }

    #[test]
    fn too_small_image_is_a_dimension_error() {
        let enc = ToyPatchEncoder::new(16, 4, 7);
        let img = Image::filled(8, 8, [0.0; 3]);
        assert!(matches!(enc.encode_image_patches(&img), Err(Error::Dimension(_))));
    }

    #[test]
    fn identifier_span_follows_token_presence() {
        let enc = ToyTextEncoder::new(16, 77, "[V]", 3);
        let t = enc.encode_text("a photo of [V] dog");
        assert_eq!(t.identifier_span, Some(4..5));
        let u = enc.encode_text("");
        assert!(u.identifier_span.is_none());
        assert_eq!(u.tokens.nrows(), 1);
        assert_eq!(enc.encode_text("a photo of [V] dog"), t);
    }

    #[test]
    fn long_prompts_are_truncated_with_a_warning() {
        let enc = ToyTextEncoder::new(8, 5, "[V]", 3);
        let t = enc.encode_text("one two three four five six seven");
        assert_eq!(t.tokens.nrows(), 5);
        assert_eq!(t.warnings.len(), 1);
    }

    #[test]
    fn codec_shapes_and_lossless_roundtrip() {
        let codec = SpaceToDepthCodec::new(8);
        let mut img = Image::filled(224, 224, [0.1, 0.2, 0.3]);
        img.fill_rect(10, 20, 100, 150, [0.77, 0.01, 0.5]);
        let latent = codec.encode(&img).unwrap();
        assert_eq!(latent.spatial(), (28, 28));
        assert_eq!(latent_roundtrip(&codec, &img).unwrap(), img);
        let bad = Image::filled(225, 225, [0.0; 3]);
        assert!(matches!(codec.encode(&bad), Err(Error::Dimension(_))));
    }
}
