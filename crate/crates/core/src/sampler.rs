//! Deterministic DDIM sampling with classifier-free guidance and
//! schedule-weighted injection.

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{randn, Backbone, FrozenHashes, LatentImage};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::injection::{denoise_joint_weighted, schedule_weight, Checkpoint, WeightSchedule};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// `x_{t_prev}` from `x_t` and the predicted noise, with `eta = 0`.
pub fn ddim_step(x_t: &Array2<f64>, eps: &Array2<f64>, alpha_bar_t: f64, alpha_bar_prev: f64) -> Result<Array2<f64>> {
    if x_t.dim() != eps.dim() {
        return Err(Error::Dimension(format!("x_t {:?} vs eps {:?}", x_t.dim(), eps.dim())));
    }
    if !(alpha_bar_t > 0.0 && alpha_bar_t <= 1.0 && alpha_bar_prev > 0.0 && alpha_bar_prev <= 1.0) {
        return Err(Error::Parameter(format!("alpha_bar values {alpha_bar_t}, {alpha_bar_prev} outside (0, 1]")));
    }
    let x0 = (x_t - &(eps * (1.0 - alpha_bar_t).sqrt())) / alpha_bar_t.sqrt();
    Ok(x0 * alpha_bar_prev.sqrt() + eps * (1.0 - alpha_bar_prev).sqrt())
}

/// `uncond + scale * (cond - uncond)`.
pub fn cfg_combine(uncond: &Array2<f64>, cond: &Array2<f64>, scale: f64) -> Result<Array2<f64>> {
    if uncond.dim() != cond.dim() {
        return Err(Error::Dimension(format!("uncond {:?} vs cond {:?}", uncond.dim(), cond.dim())));
    }
    Ok(uncond + &((cond - uncond) * scale))
}

/// `(t, t_prev)` pairs for `steps` evenly spaced DDIM steps over `T`,
/// ending at `t_prev = 0`.
pub fn ddim_timesteps(train_steps: usize, steps: usize) -> Result<Vec<(usize, usize)>> {
    if steps == 0 || steps > train_steps {
        return Err(Error::Parameter(format!("steps must be in 1..={train_steps}, got {steps}")));
    }
    let stride = train_steps / steps;
    let ts: Vec<usize> = (0..steps).map(|i| train_steps - i * stride).collect();
    Ok(ts.iter().enumerate().map(|(i, &t)| (t, ts.get(i + 1).copied().unwrap_or(0))).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleRequest {
    pub prompt: String,
    pub seed: u64,
    pub steps: usize,
    pub guidance: f64,
    /// Only `0.0` (deterministic DDIM) is supported.
    pub eta: f64,
    /// Also inject into the unconditional pass.
    pub inject_unconditional: bool,
    /// Replaces the checkpoint's schedule.
    pub schedule: Option<WeightSchedule>,
    /// Which cached reference supplies `I''`; defaults to `seed mod n`.
    pub reference_index: Option<usize>,
}

impl Default for SampleRequest {
    fn default() -> Self {
        Self {
            prompt: String::new(),
            seed: 0,
            steps: 50,
            guidance: 7.5,
            eta: 0.0,
            inject_unconditional: false,
            schedule: None,
            reference_index: None,
        }
    }
}

impl SampleRequest {
    pub fn validate(&self) -> Result<()> {
        if self.eta != 0.0 {
            return Err(Error::config("eta", "only deterministic sampling (eta = 0) is supported"));
        }
        if !self.guidance.is_finite() || self.guidance < 0.0 {
            return Err(Error::config("guidance", format!("must be finite and >= 0, got {}", self.guidance)));
        }
        if self.steps == 0 {
            return Err(Error::config("steps", "must be >= 1"));
        }
        Ok(())
    }
}

/// Everything needed to reproduce a generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationManifest {
    pub schema_version: u32,
    pub prompt: String,
    pub seed: u64,
    pub steps: usize,
    pub guidance: f64,
    pub timesteps: Vec<usize>,
    /// Injection weight per step; all zero for baseline runs.
    pub weights: Vec<f64>,
    pub checkpoint_hash: Option<String>,
    pub reference_index: Option<usize>,
    pub inject_unconditional: bool,
    pub frozen: FrozenHashes,
    /// SHA-256 of the final latent's f64 bits.
    pub latent_hash: String,
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub image: Image,
    pub latent: LatentImage,
    pub manifest: GenerationManifest,
}

impl Generation {
    /// Writes `<stem>.png` and `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.image.save_png(dir.join(format!("{stem}.png")))?;
        let path = dir.join(format!("{stem}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&self.manifest)?).map_err(|e| Error::io(&path, e))
    }
}

pub fn latent_hash(tokens: &Array2<f64>) -> String {
    let mut h = Sha256::new();
    for v in tokens.iter() {
        h.update(v.to_bits().to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Initial latent noise for a seed.
pub fn initial_noise(backbone: &Backbone, seed: u64) -> Array2<f64> {
    let cfg = &backbone.denoiser.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    randn(&mut rng, cfg.tokens(), cfg.latent_channels, 1.0)
}

/// Samples one image. Without a checkpoint the frozen denoiser runs alone.
pub fn generate(backbone: &Backbone, checkpoint: Option<&Checkpoint>, request: &SampleRequest) -> Result<Generation> {
    request.validate()?;
    let noise = &backbone.noise;
    let train_steps = noise.train_steps();
    let schedule = ddim_timesteps(train_steps, request.steps)?;
    let denoiser = &backbone.denoiser;
    let cond = backbone.text_encoder.encode_text(&request.prompt).tokens;
    let uncond = backbone.text_encoder.encode_text("").tokens;

    let mut injection = None;
    if let Some(ckpt) = checkpoint {
        ckpt.ensure_base(backbone)?;
        if ckpt.subjects.is_empty() {
            return Err(Error::State("checkpoint has no cached references".into()));
        }
        let index = request.reference_index.unwrap_or((request.seed % ckpt.subjects.len() as u64) as usize);
        let record = ckpt
            .subjects
            .get(index)
            .ok_or_else(|| Error::config("reference_index", format!("{index} >= {}", ckpt.subjects.len())))?;
        let mut model = ckpt.model.clone();
        if let Some(s) = &request.schedule {
            s.validate()?;
            model.schedule = s.clone();
        }
        let subject = record.fused(&model)?.data.to_tokens();
        injection = Some((model, subject, index));
    }

    let mut x = initial_noise(backbone, request.seed);
    let mut weights = Vec::with_capacity(schedule.len());
    for &(t, t_prev) in &schedule {
        let tf = t as f64;
        let (eps_c, eps_u, w) = match &injection {
            Some((model, subject, _)) => {
                let w = schedule_weight(tf, train_steps, &model.schedule)?;
                let c = denoise_joint_weighted(denoiser, model, &x, tf, &cond, subject, w)?.noise_pred;
                let u = if request.inject_unconditional {
                    denoise_joint_weighted(denoiser, model, &x, tf, &uncond, subject, w)?.noise_pred
                } else {
                    denoiser.predict(&x, tf, &uncond)?.0
                };
                (c, u, w)
            }
            None => (denoiser.predict(&x, tf, &cond)?.0, denoiser.predict(&x, tf, &uncond)?.0, 0.0),
        };
        let eps = cfg_combine(&eps_u, &eps_c, request.guidance)?;
        x = ddim_step(&x, &eps, noise.alpha_bar(t)?, noise.alpha_bar(t_prev)?)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("latent after step t = {t}")));
        }
        weights.push(w);
    }
    let cfg = &denoiser.config;
    let latent = LatentImage::from_tokens(&x, cfg.latent_size, backbone.codec.scale_factor())?;
    let image = backbone.codec.decode(&latent)?.clamped();
    let manifest = GenerationManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        prompt: request.prompt.clone(),
        seed: request.seed,
        steps: request.steps,
        guidance: request.guidance,
        timesteps: schedule.iter().map(|(t, _)| *t).collect(),
        weights,
        checkpoint_hash: checkpoint.map(Checkpoint::content_hash).transpose()?,
        reference_index: injection.as_ref().map(|(_, _, i)| *i),
        inject_unconditional: request.inject_unconditional,
        frozen: backbone.frozen_hashes(),
        latent_hash: latent_hash(&x),
    };
    Ok(Generation { image, latent, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn ddim_examples() {
        let x = array![[0.3, -1.2]];
        let eps = array![[0.5, 0.1]];
        assert_eq!(ddim_step(&x, &eps, 0.5, 0.5).unwrap(), x);
        let x0 = array![[0.4, -0.2]];
        let ab: f64 = 0.36;
        let xt = &x0 * ab.sqrt() + &eps * (1.0 - ab).sqrt();
        let out = ddim_step(&xt, &eps, ab, 1.0).unwrap();
        for (a, b) in out.iter().zip(x0.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(ddim_step(&x, &eps, 0.0, 0.5).is_err());
    }

    #[test]
    fn cfg_examples() {
        let u = array![[1.0, 2.0]];
        let c = array![[3.0, 0.0]];
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), u);
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&u, &c, 2.0).unwrap(), array![[5.0, -2.0]]);
    }

    #[test]
    fn timesteps_descend_to_zero() {
        let ts = ddim_timesteps(1000, 50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], (1000, 980));
        assert_eq!(ts[49], (20, 0));
        assert!(ddim_timesteps(1000, 0).is_err());
    }
}
