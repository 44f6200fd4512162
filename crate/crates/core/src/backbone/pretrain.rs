//! Generic denoising pretraining for the toy denoiser, so the frozen base
//! behaves like a (very small) pretrained model rather than a random one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::randn;
use super::unet::{forward, UNet};
use super::{LatentCodec, NoiseSchedule, TextEncoder};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::optim::Adam;

const PROMPTS: [&str; 6] = ["", "a photo", "a photo of an object", "a red shape", "a blue shape", "a square"];

/// Flat background with one to three solid rectangles of random colors.
pub fn random_scene(rng: &mut impl Rng, size: usize) -> Image {
    let mut color = || [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
    let background = color();
    let rects: Vec<_> = (0..3).map(|_| color()).collect();
    let mut img = Image::filled(size, size, background);
    let n = rng.random_range(1..=3);
    for c in rects.into_iter().take(n) {
        let h = rng.random_range(2..=(size / 2).max(2));
        let w = rng.random_range(2..=(size / 2).max(2));
        let y = rng.random_range(0..=size - h);
        let x = rng.random_range(0..=size - w);
        img.fill_rect(y, x, y + h, x + w, c);
    }
    img
}

/// Trains every denoiser parameter on the standard noise-prediction
/// objective over [`random_scene`] images. Returns the last-100-step mean loss.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_denoiser(
    unet: &mut UNet,
    codec: &dyn LatentCodec,
    text_encoder: &dyn TextEncoder,
    noise: &NoiseSchedule,
    image_size: usize,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<f64> {
    if image_size < 4 {
        return Err(Error::config("image_size", "pretraining needs images of at least 4x4"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70e7_7a17);
    let texts: Vec<_> = PROMPTS.iter().map(|p| text_encoder.encode_text(p).tokens).collect();
    let mut opt = Adam::new(lr, unet.params.iter().map(|(_, v)| v));
    let train_steps = noise.train_steps();
    let mut recent = Vec::with_capacity(steps.min(100));
    for step in 0..steps {
        let x0 = codec.encode(&random_scene(&mut rng, image_size))?.to_tokens();
        let t = rng.random_range(1..=train_steps);
        let eps = randn(&mut rng, x0.nrows(), x0.ncols(), 1.0);
        let text = &texts[rng.random_range(0..texts.len())];
        let ab = noise.alpha_bar(t)?;
        let x_t = &x0 * ab.sqrt() + &eps * (1.0 - ab).sqrt();

        let mut tape = Tape::new();
        let vars = unet.params.bind(&mut tape, true);
        let x = tape.constant(x_t);
        let c = tape.constant(text.clone());
        let out = forward(&mut tape, &unet.layout, &vars, &unet.config, unet.position(), x, t as f64, c, None)?;
        let pred = out.noise_pred.ok_or_else(|| Error::State("denoiser has no output head".into()))?;
        let target = tape.constant(eps);
        let loss = tape.mse(pred, target);
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("pretraining loss at step {step}")));
        }
        if steps - step <= 100 {
            recent.push(value);
        }
        let grads = unet.params.collect_grads(&vars, &tape.backward(loss));
        opt.update(unet.params.values_mut(), &grads)?;
    }
    let mean = if recent.is_empty() { 0.0 } else { recent.iter().sum::<f64>() / recent.len() as f64 };
    log::info!("toy denoiser pretrained for {steps} steps, final loss {mean:.4}");
    Ok(mean)
}
