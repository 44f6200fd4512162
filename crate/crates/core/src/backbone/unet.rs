//! The toy latent denoiser: a small convolutional network with residual
//! blocks, self-attention and text cross-attention at every block.
//!
//! All tensors are token matrices (`tokens x channels`) on a fixed latent
//! grid. The network is deliberately tiny so that training, sampling and
//! gradient checks run on a CPU in `f64`.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{randn, ParamId, ParamStore};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub latent_channels: usize,
    /// Latent grid `(height, width)`.
    pub latent_size: (usize, usize),
    pub hidden: usize,
    pub heads: usize,
    pub text_dim: usize,
    pub time_dim: usize,
    pub blocks: usize,
    pub res_per_block: usize,
    /// Amplitude of the fixed 2-D sinusoidal position code added before self-attention.
    pub position_scale: f64,
    /// Diagonal gain of the self-attention query/key projections at init.
    pub attention_sharpness: f64,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 12,
            latent_size: (8, 8),
            hidden: 32,
            heads: 2,
            text_dim: 32,
            time_dim: 32,
            blocks: 2,
            res_per_block: 2,
            position_scale: 1.0,
            attention_sharpness: 1.0,
            seed: 0x5eed,
        }
    }
}

impl UNetConfig {
    pub fn tokens(&self) -> usize {
        self.latent_size.0 * self.latent_size.1
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks < 2 {
            return Err(Error::config("unet.blocks", "need at least 2 attention blocks"));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::config("unet.heads", "hidden size must divide into heads"));
        }
        if !self.time_dim.is_multiple_of(2) || self.time_dim == 0 {
            return Err(Error::config("unet.time_dim", "must be even and positive"));
        }
        if !self.hidden.is_multiple_of(4) {
            return Err(Error::config("unet.hidden", "must be a multiple of 4"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

/// 3x3 convolution stored as a `(9 * c_in) x c_out` matrix over shifted copies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Conv3 {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResBlock {
    pub conv1: Conv3,
    pub time: Linear,
    pub conv2: Conv3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights {
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
    pub out: Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub res: Vec<ResBlock>,
    pub self_attn: AttentionWeights,
    pub cross_attn: AttentionWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetLayout {
    pub time1: Linear,
    pub time2: Linear,
    pub conv_in: Conv3,
    pub blocks: Vec<Block>,
    /// Absent on the simplified copy, which only supplies features.
    pub conv_out: Option<Conv3>,
}

impl UNetLayout {
    /// Registers a network with `res_per_block` residual blocks per block,
    /// initialized from `seed`.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &UNetConfig,
        res_per_block: usize,
        with_head: bool,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = cfg.hidden;
        let mut lin = |store: &mut ParamStore, name: &str, i: usize, o: usize, std: f64| Linear {
            w: store.add(format!("{prefix}{name}.w"), randn(&mut rng, i, o, std)),
            b: store.add(format!("{prefix}{name}.b"), Array2::zeros((1, o))),
        };
        let time1 = lin(store, "time.fc1", cfg.time_dim, ch, (1.0 / cfg.time_dim as f64).sqrt());
        let time2 = lin(store, "time.fc2", ch, ch, (1.0 / ch as f64).sqrt());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut conv = |store: &mut ParamStore, name: &str, i: usize, o: usize, gain: f64| Conv3 {
            w: store.add(
                format!("{prefix}{name}.w"),
                randn(&mut rng, 9 * i, o, gain / (9.0 * i as f64).sqrt()),
            ),
            b: store.add(format!("{prefix}{name}.b"), Array2::zeros((1, o))),
        };
        let conv_in = conv(store, "conv_in", cfg.latent_channels, ch, 1.0);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        let mut block_rngs: Vec<ChaCha8Rng> = (0..cfg.blocks)
            .map(|b| ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000 + b as u64)))
            .collect();
        for (b, brng) in block_rngs.iter_mut().enumerate() {
            let mut res = Vec::with_capacity(res_per_block);
            for r in 0..res_per_block {
                // Per-residual seeds so a one-residual copy registers the same
                // initial values as the first residual of the full network.
                let mut rrng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(5000 + 100 * b as u64 + r as u64));
                let base = format!("{prefix}blocks.{b}.res.{r}");
                let c1 = Conv3 {
                    w: store.add(format!("{base}.conv1.w"), randn(&mut rrng, 9 * ch, ch, 1.0 / (9.0 * ch as f64).sqrt())),
                    b: store.add(format!("{base}.conv1.b"), Array2::zeros((1, ch))),
                };
                let tp = Linear {
                    w: store.add(format!("{base}.time.w"), randn(&mut rrng, ch, ch, 1.0 / (ch as f64).sqrt())),
                    b: store.add(format!("{base}.time.b"), Array2::zeros((1, ch))),
                };
                let c2 = Conv3 {
                    w: store.add(format!("{base}.conv2.w"), randn(&mut rrng, 9 * ch, ch, 0.5 / (9.0 * ch as f64).sqrt())),
                    b: store.add(format!("{base}.conv2.b"), Array2::zeros((1, ch))),
                };
                res.push(ResBlock { conv1: c1, time: tp, conv2: c2 });
            }
            let base = format!("{prefix}blocks.{b}");
            let std = 1.0 / (ch as f64).sqrt();
            let a = cfg.attention_sharpness;
            let qk = |rng: &mut ChaCha8Rng| {
                let mut m = randn(rng, ch, ch, 0.3 * std);
                for i in 0..ch {
                    m[[i, i]] += a;
                }
                m
            };
            let self_attn = AttentionWeights {
                q: store.add(format!("{base}.attn1.q"), qk(brng)),
                k: store.add(format!("{base}.attn1.k"), qk(brng)),
                v: store.add(format!("{base}.attn1.v"), randn(brng, ch, ch, std)),
                out: Linear {
                    // A full-scale output here lets the near-diagonal attention swamp
                    // the residual stream and the network stops fitting anything.
                    w: store.add(format!("{base}.attn1.out.w"), randn(brng, ch, ch, 0.3 * std)),
                    b: store.add(format!("{base}.attn1.out.b"), Array2::zeros((1, ch))),
                },
            };
            let tstd = 1.0 / (cfg.text_dim as f64).sqrt();
            let cross_attn = AttentionWeights {
                q: store.add(format!("{base}.attn2.q"), randn(brng, ch, ch, std)),
                k: store.add(format!("{base}.attn2.k"), randn(brng, cfg.text_dim, ch, tstd)),
                v: store.add(format!("{base}.attn2.v"), randn(brng, cfg.text_dim, ch, tstd)),
                out: Linear {
                    w: store.add(format!("{base}.attn2.out.w"), randn(brng, ch, ch, std)),
                    b: store.add(format!("{base}.attn2.out.b"), Array2::zeros((1, ch))),
                },
            };
            blocks.push(Block { res, self_attn, cross_attn });
        }
        let conv_out = with_head.then(|| {
            let mut orng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(77));
            Conv3 {
                w: store.add(
                    format!("{prefix}conv_out.w"),
                    randn(&mut orng, 9 * ch, cfg.latent_channels, 1.0 / (9.0 * ch as f64).sqrt()),
                ),
                b: store.add(format!("{prefix}conv_out.b"), Array2::zeros((1, cfg.latent_channels))),
            }
        });
        Self { time1, time2, conv_in, blocks, conv_out }
    }
}

/// Fixed 2-D sinusoidal position code, `tokens x channels`.
pub fn position_code(cfg: &UNetConfig) -> Array2<f64> {
    let (h, w) = cfg.latent_size;
    let ch = cfg.hidden;
    let quarter = ch / 4;
    Array2::from_shape_fn((h * w, ch), |(tok, c)| {
        let (y, x) = ((tok / w) as f64, (tok % w) as f64);
        let pos = if c < 2 * quarter { y } else { x };
        let k = c % (2 * quarter);
        let freq = (k / 2) as f64;
        let omega = std::f64::consts::PI * (freq + 1.0) / (h.max(w) as f64 + 1.0);
        let v = if k.is_multiple_of(2) { (omega * pos).sin() } else { (omega * pos).cos() };
        v * cfg.position_scale
    })
}

/// Sinusoidal embedding of a (possibly fractional) timestep.
pub fn timestep_embedding(t: f64, dim: usize) -> Array2<f64> {
    let half = dim / 2;
    let mut out = Array2::zeros((1, dim));
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
        out[[0, i]] = (t * freq).sin();
        out[[0, half + i]] = (t * freq).cos();
    }
    out
}

pub(crate) fn linear(tape: &mut Tape, vars: &[Var], l: &Linear, x: Var) -> Var {
    let y = tape.matmul(x, vars[l.w.0]);
    tape.add_row(y, vars[l.b.0])
}

pub(crate) fn conv3(tape: &mut Tape, vars: &[Var], c: &Conv3, x: Var, size: (usize, usize)) -> Var {
    let (h, w) = size;
    let mut cols = Vec::with_capacity(9);
    for dy in -1..=1 {
        for dx in -1..=1 {
            cols.push(if dy == 0 && dx == 0 { x } else { tape.shift(x, h, w, dy, dx) });
        }
    }
    let patches = tape.hcat(&cols);
    let y = tape.matmul(patches, vars[c.w.0]);
    tape.add_row(y, vars[c.b.0])
}

fn res_block(
    tape: &mut Tape,
    vars: &[Var],
    r: &ResBlock,
    x: Var,
    temb: Var,
    size: (usize, usize),
) -> Var {
    let a = tape.silu(x);
    let h = conv3(tape, vars, &r.conv1, a, size);
    let tproj = linear(tape, vars, &r.time, temb);
    let h = tape.add_row(h, tproj);
    let h = tape.silu(h);
    let h = conv3(tape, vars, &r.conv2, h, size);
    tape.add(x, h)
}

/// Multi-head scaled dot-product attention.
///
/// Queries come from `query_src`; keys and values from `key_src` and
/// `value_src` (which must have equal row counts). Returns the concatenated
/// head outputs and the head-averaged attention map.
#[allow(clippy::too_many_arguments)]
pub fn attention(
    tape: &mut Tape,
    query_src: Var,
    key_src: Var,
    value_src: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    heads: usize,
) -> (Var, Var) {
    let q = tape.matmul(query_src, wq);
    let k = tape.matmul(key_src, wk);
    let v = tape.matmul(value_src, wv);
    let d = tape.shape(q).1;
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut map_sum: Option<Var> = None;
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * hd, (h + 1) * hd),
                tape.slice_cols(k, h * hd, (h + 1) * hd),
                tape.slice_cols(v, h * hd, (h + 1) * hd),
            )
        };
        let kt = tape.transpose(kh);
        let logits = tape.matmul(qh, kt);
        let logits = tape.scale(logits, scale);
        let p = tape.softmax_rows(logits);
        outs.push(tape.matmul(p, vh));
        map_sum = Some(match map_sum {
            Some(acc) => tape.add(acc, p),
            None => p,
        });
    }
    let out = if heads == 1 { outs[0] } else { tape.hcat(&outs) };
    let map = map_sum.expect("at least one head");
    let map = if heads == 1 { map } else { tape.scale(map, 1.0 / heads as f64) };
    (out, map)
}

/// Features appended to the self-attention keys/values of each block.
pub struct Injection<'a> {
    /// One `tokens x hidden` feature per block, already weighted; `None`
    /// leaves that block's self-attention untouched.
    pub features: &'a [Option<Var>],
    pub lambda: f64,
}

pub struct ForwardOutput {
    /// Present only for networks with an output head.
    pub noise_pred: Option<Var>,
    /// Per-block self-attention input `z_i` (hidden state plus position code).
    pub self_hiddens: Vec<Var>,
    /// Per-block head-averaged cross-attention maps (`tokens x text tokens`).
    pub cross_maps: Vec<Var>,
}

/// Runs a network layout on the tape.
#[allow(clippy::too_many_arguments)]
pub fn forward(
    tape: &mut Tape,
    layout: &UNetLayout,
    vars: &[Var],
    cfg: &UNetConfig,
    position: &Array2<f64>,
    x: Var,
    t: f64,
    text: Var,
    injection: Option<&Injection<'_>>,
) -> Result<ForwardOutput> {
    let size = cfg.latent_size;
    let (rows, cols) = tape.shape(x);
    if rows != cfg.tokens() || cols != cfg.latent_channels {
        return Err(Error::Dimension(format!(
            "latent tokens {rows}x{cols}, expected {}x{}",
            cfg.tokens(),
            cfg.latent_channels
        )));
    }
    if tape.shape(text).1 != cfg.text_dim {
        return Err(Error::Dimension(format!(
            "text width {}, expected {}",
            tape.shape(text).1,
            cfg.text_dim
        )));
    }
    if let Some(inj) = injection {
        if inj.features.len() != layout.blocks.len() {
            return Err(Error::Dimension(format!(
                "{} injection features for {} self-attention layers",
                inj.features.len(),
                layout.blocks.len()
            )));
        }
    }

    let temb = tape.constant(timestep_embedding(t, cfg.time_dim));
    let temb = linear(tape, vars, &layout.time1, temb);
    let temb = tape.silu(temb);
    let temb = linear(tape, vars, &layout.time2, temb);

    let pos = tape.constant(position.clone());
    let mut h = conv3(tape, vars, &layout.conv_in, x, size);
    let mut self_hiddens = Vec::with_capacity(layout.blocks.len());
    let mut cross_maps = Vec::with_capacity(layout.blocks.len());
    for (i, block) in layout.blocks.iter().enumerate() {
        for r in &block.res {
            h = res_block(tape, vars, r, h, temb, size);
        }
        let z = tape.add(h, pos);
        self_hiddens.push(z);
        let sa = &block.self_attn;
        let (wq, wk, wv) = (vars[sa.q.0], vars[sa.k.0], vars[sa.v.0]);
        let attn = match injection.and_then(|inj| inj.features[i].map(|f| (inj.lambda, f))) {
            Some((lambda, f)) => {
                if tape.shape(f) != tape.shape(z) {
                    return Err(Error::Dimension(format!(
                        "feature {i} shape {:?} vs hidden {:?}",
                        tape.shape(f),
                        tape.shape(z)
                    )));
                }
                injected_attention(tape, z, f, lambda, wq, wk, wv, cfg.heads).0
            }
            None => attention(tape, z, z, z, wq, wk, wv, cfg.heads).0,
        };
        let attn = linear(tape, vars, &sa.out, attn);
        h = tape.add(h, attn);

        let ca = &block.cross_attn;
        let (out, map) = attention(
            tape,
            h,
            text,
            text,
            vars[ca.q.0],
            vars[ca.k.0],
            vars[ca.v.0],
            cfg.heads,
        );
        cross_maps.push(map);
        let out = linear(tape, vars, &ca.out, out);
        h = tape.add(h, out);
    }
    let noise_pred = match &layout.conv_out {
        Some(c) => {
            let a = tape.silu(h);
            Some(conv3(tape, vars, c, a, size))
        }
        None => None,
    };
    Ok(ForwardOutput { noise_pred, self_hiddens, cross_maps })
}

/// Self-attention with appended condition tokens:
/// `K' = [z, f] W_K`, `V' = [z + lambda f, f] W_V`, queries from `z` only.
#[allow(clippy::too_many_arguments)]
pub fn injected_attention(
    tape: &mut Tape,
    z: Var,
    f: Var,
    lambda: f64,
    wq: Var,
    wk: Var,
    wv: Var,
    heads: usize,
) -> (Var, Var) {
    let keys = tape.vcat(z, f);
    let shifted = tape.scale(f, lambda);
    let shifted = tape.add(z, shifted);
    let values = tape.vcat(shifted, f);
    attention(tape, z, keys, values, wq, wk, wv, heads)
}

/// The frozen toy denoiser.
#[derive(Debug, Clone)]
pub struct UNet {
    pub config: UNetConfig,
    pub layout: UNetLayout,
    pub params: ParamStore,
    position: Array2<f64>,
}

/// Values tapped from one denoiser pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserTaps {
    pub self_attention_hiddens: Vec<Array2<f64>>,
    pub last_cross_attention_map: Array2<f64>,
}

impl UNet {
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = UNetLayout::register(&mut params, "", &config, config.res_per_block, true, config.seed);
        let position = position_code(&config);
        Ok(Self { config, layout, params, position })
    }

    pub fn position(&self) -> &Array2<f64> {
        &self.position
    }

    pub fn content_hash(&self) -> String {
        self.params.content_hash()
    }

    /// Plain (non-injected) noise prediction with taps.
    pub fn predict(&self, latent_tokens: &Array2<f64>, t: f64, text: &Array2<f64>) -> Result<(Array2<f64>, DenoiserTaps)> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let x = tape.constant(latent_tokens.clone());
        let c = tape.constant(text.clone());
        let out = forward(&mut tape, &self.layout, &vars, &self.config, &self.position, x, t, c, None)?;
        let pred = tape.value(out.noise_pred.expect("denoiser has a head")).clone();
        let taps = DenoiserTaps {
            self_attention_hiddens: out.self_hiddens.iter().map(|v| tape.value(*v).clone()).collect(),
            last_cross_attention_map: tape.value(*out.cross_maps.last().expect("blocks >= 2")).clone(),
        };
        Ok((pred, taps))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample_inputs(cfg: &UNetConfig, seed: u64) -> (Array2<f64>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            randn(&mut rng, cfg.tokens(), cfg.latent_channels, 1.0),
            randn(&mut rng, 5, cfg.text_dim, 1.0),
        )
    }

    #[test]
    fn prediction_is_deterministic_and_taps_are_row_stochastic() {
        let net = UNet::new(UNetConfig::default()).unwrap();
        let (x, c) = sample_inputs(&net.config, 1);
        let (p1, t1) = net.predict(&x, 500.0, &c).unwrap();
        let (p2, t2) = net.predict(&x, 500.0, &c).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(t1, t2);
        assert_eq!(t1.self_attention_hiddens.len(), net.config.blocks);
        for row in t1.last_cross_attention_map.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!(p1.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_wrong_latent_shape() {
        let net = UNet::new(UNetConfig::default()).unwrap();
        let x = Array2::zeros((10, 12));
        let c = Array2::zeros((2, 32));
        assert!(matches!(net.predict(&x, 1.0, &c), Err(Error::Dimension(_))));
    }

    #[test]
    fn one_residual_layout_reuses_first_residual_initialization() {
        let cfg = UNetConfig::default();
        let mut full = ParamStore::new();
        UNetLayout::register(&mut full, "", &cfg, 2, true, 9);
        let mut small = ParamStore::new();
        UNetLayout::register(&mut small, "", &cfg, 1, false, 9);
        for (name, value) in small.iter() {
            let id = full.find(name).unwrap_or_else(|| panic!("{name} missing"));
            assert_eq!(full.get(id), value, "{name}");
        }
    }
}
