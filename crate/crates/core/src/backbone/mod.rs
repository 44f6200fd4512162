//! Pretrained-component interfaces and the deterministic toy backbone.
//!
//! A backbone bundles a patch image encoder, a text encoder, a latent codec,
//! an inpainting engine and the frozen denoiser. Only the toy implementation
//! ships here; every algorithm in the crate is written against the traits so
//! a real adapter can be slotted in without touching them.

mod manifest;
mod noise;
mod params;
mod pretrain;
mod toy;
mod unet;

use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

pub use manifest::{AssetEntry, AssetManifest};
pub use noise::NoiseSchedule;
pub use params::{randn, ParamId, ParamStore};
pub use pretrain::{pretrain_denoiser, random_scene};
pub use toy::{
    BorderMeanInpainter, SpaceToDepthCodec, ToyBackboneConfig, ToyJointEncoder, ToyPatchEncoder,
    ToyTextEncoder,
};
pub use unet::{
    attention, forward, injected_attention, position_code, timestep_embedding, AttentionWeights,
    Block, Conv3, DenoiserTaps, ForwardOutput, Injection, Linear, ResBlock, UNet, UNetConfig,
    UNetLayout,
};
pub(crate) use unet::linear;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rngr::PixelMask;

/// Patch-level output of an image encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchEncoding {
    /// `G x G x D` patch embeddings.
    pub grid: Array3<f64>,
    /// Pooled token, excluded from the grid.
    pub global_token: Array1<f64>,
    /// Source image `(H, W)` in pixels.
    pub source_dims: (usize, usize),
}

impl PatchEncoding {
    pub fn new(grid: Array3<f64>, global_token: Array1<f64>, source_dims: (usize, usize)) -> Result<Self> {
        let (g0, g1, d) = grid.dim();
        if g0 != g1 || g0 < 2 {
            return Err(Error::Dimension(format!("patch grid must be GxG with G >= 2, got {g0}x{g1}")));
        }
        if global_token.len() != d {
            return Err(Error::Dimension(format!("global token dim {} vs {d}", global_token.len())));
        }
        if grid.iter().chain(global_token.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("patch encoding".into()));
        }
        Ok(Self { grid, global_token, source_dims })
    }

    pub fn grid_size(&self) -> usize {
        self.grid.dim().0
    }

    pub fn embed_dim(&self) -> usize {
        self.grid.dim().2
    }

    pub fn patch(&self, row: usize, col: usize) -> ndarray::ArrayView1<'_, f64> {
        self.grid.slice(ndarray::s![row, col, ..])
    }

    /// The encoder's last hidden state: global token followed by the patches
    /// in row-major order, `(1 + G*G) x D`.
    pub fn hidden_state(&self) -> Array2<f64> {
        let g = self.grid_size();
        let d = self.embed_dim();
        let mut out = Array2::zeros((1 + g * g, d));
        out.row_mut(0).assign(&self.global_token);
        for r in 0..g {
            for c in 0..g {
                out.row_mut(1 + r * g + c).assign(&self.patch(r, c));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoding {
    /// One embedding per token, `L x D`.
    pub tokens: Array2<f64>,
    pub prompt_text: String,
    /// Token indices of the subject identifier, when present.
    pub identifier_span: Option<Range<usize>>,
    pub warnings: Vec<String>,
}

impl TextEncoding {
    pub fn is_unconditional(&self) -> bool {
        self.prompt_text.trim().is_empty()
    }
}

/// A `C x h x w` latent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentImage {
    pub data: Array3<f64>,
    /// Pixel-to-latent downscale factor.
    pub scale: usize,
}

impl LatentImage {
    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }

    /// Token matrix `(h*w) x C` in row-major spatial order.
    pub fn to_tokens(&self) -> Array2<f64> {
        let (c, h, w) = self.data.dim();
        Array2::from_shape_fn((h * w, c), |(tok, ch)| self.data[[ch, tok / w, tok % w]])
    }

    pub fn from_tokens(tokens: &Array2<f64>, size: (usize, usize), scale: usize) -> Result<Self> {
        let (h, w) = size;
        if tokens.nrows() != h * w {
            return Err(Error::Dimension(format!("{} tokens for a {h}x{w} latent", tokens.nrows())));
        }
        let c = tokens.ncols();
        let data = Array3::from_shape_fn((c, h, w), |(ch, y, x)| tokens[[y * w + x, ch]]);
        Ok(Self { data, scale })
    }
}

pub trait PatchEncoder: Send + Sync {
    fn grid_size(&self) -> usize;
    fn embed_dim(&self) -> usize;
    fn encode_image_patches(&self, image: &Image) -> Result<PatchEncoding>;
    fn content_hash(&self) -> String;
}

pub trait TextEncoder: Send + Sync {
    fn embed_dim(&self) -> usize;
    /// The configured subject identifier token, e.g. `[V]`.
    fn identifier(&self) -> &str;
    fn encode_text(&self, prompt: &str) -> TextEncoding;
    fn content_hash(&self) -> String;
}

pub trait LatentCodec: Send + Sync {
    fn scale_factor(&self) -> usize;
    fn latent_channels(&self) -> usize;
    fn encode(&self, image: &Image) -> Result<LatentImage>;
    fn decode(&self, latent: &LatentImage) -> Result<Image>;
    fn content_hash(&self) -> String;
}

/// Result of an inpainting call; warnings are recorded, not raised.
#[derive(Debug, Clone)]
pub struct InpaintOutcome {
    pub image: Image,
    pub warnings: Vec<String>,
}

pub trait Inpainter: Send + Sync {
    fn inpaint(&self, image: &Image, mask: &PixelMask, prompt: &str, seed: u64) -> Result<InpaintOutcome>;
    fn content_hash(&self) -> String;
}

/// Embeds a whole image into a single vector (metric encoders).
pub trait FeatureEncoder: Send + Sync {
    fn embed_image(&self, image: &Image) -> Result<Array1<f64>>;
}

/// Shared image/text embedding space (for prompt alignment).
pub trait JointEncoder: FeatureEncoder {
    fn embed_text(&self, prompt: &str) -> Result<Array1<f64>>;
}

/// Runs `decode(encode(image))`.
pub fn latent_roundtrip(codec: &dyn LatentCodec, image: &Image) -> Result<Image> {
    let latent = codec.encode(image)?;
    codec.decode(&latent)
}

/// Content hashes of every frozen component.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenHashes {
    pub patch_encoder: String,
    pub text_encoder: String,
    pub codec: String,
    pub inpainter: String,
    pub denoiser: String,
}

/// All pretrained components needed by the pipeline.
#[derive(Clone)]
pub struct Backbone {
    pub patch_encoder: Arc<dyn PatchEncoder>,
    pub text_encoder: Arc<dyn TextEncoder>,
    pub codec: Arc<dyn LatentCodec>,
    pub inpainter: Arc<dyn Inpainter>,
    pub denoiser: Arc<UNet>,
    pub noise: NoiseSchedule,
    /// Pixel dimensions the denoiser's latent grid corresponds to.
    pub image_size: (usize, usize),
}

impl Backbone {
    /// The weight-free CPU backbone.
    pub fn toy(config: &ToyBackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut unet = UNet::new(config.unet_config())?;
        let codec = SpaceToDepthCodec::new(config.latent_scale);
        let text_encoder = ToyTextEncoder::new(config.text_dim, config.max_tokens, &config.identifier, config.seed);
        let noise = NoiseSchedule::default();
        if config.pretrain_steps > 0 {
            pretrain_denoiser(
                &mut unet,
                &codec,
                &text_encoder,
                &noise,
                config.image_size,
                config.pretrain_steps,
                config.pretrain_lr,
                config.seed,
            )?;
        }
        Ok(Self {
            patch_encoder: Arc::new(ToyPatchEncoder::new(config.patch_grid, config.hist_bins, config.seed)),
            text_encoder: Arc::new(text_encoder),
            codec: Arc::new(codec),
            inpainter: Arc::new(BorderMeanInpainter),
            denoiser: Arc::new(unet),
            noise,
            image_size: (config.image_size, config.image_size),
        })
    }

    pub fn frozen_hashes(&self) -> FrozenHashes {
        FrozenHashes {
            patch_encoder: self.patch_encoder.content_hash(),
            text_encoder: self.text_encoder.content_hash(),
            codec: self.codec.content_hash(),
            inpainter: self.inpainter.content_hash(),
            denoiser: self.denoiser.content_hash(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    #[default]
    Toy,
    /// Pretrained weights described by an asset manifest.
    External,
}

/// Backbone selection as it appears in config files.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub toy: ToyBackboneConfig,
    /// Asset manifest for `external`, relative to the asset root.
    pub manifest: Option<PathBuf>,
}

impl BackboneSpec {
    /// Builds the backbone. `force_toy` overrides `kind`.
    pub fn build(&self, asset_root: &Path, force_toy: bool) -> Result<Backbone> {
        if force_toy || self.kind == BackboneKind::Toy {
            return Backbone::toy(&self.toy);
        }
        let manifest_path = self
            .manifest
            .as_ref()
            .ok_or_else(|| Error::config("backbone.manifest", "required for external backbones"))?;
        let manifest = AssetManifest::load(asset_root.join(manifest_path))?;
        manifest.verify(asset_root)?;
        Err(Error::config(
            "backbone.kind",
            "assets verified, but no adapter for external weights is built into this binary; use the toy backbone",
        ))
    }
}
