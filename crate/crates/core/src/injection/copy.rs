use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::schedule::{schedule_weight, LearnedVars, WeightSchedule};
use crate::autodiff::{Tape, Var};
use crate::backbone::{
    attention, forward, injected_attention, linear, position_code, Injection, Linear, ParamStore, UNet, UNetConfig,
    UNetLayout,
};
use crate::error::{Error, Result};
use crate::rngr::{fuse_on_tape, FusionLayout};

pub const COPY_PREFIX: &str = "copy.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InjectionConfig {
    pub lambda: f64,
    pub enable: bool,
    /// Original self-attention layers to inject into; `None` means every
    /// mapped layer.
    pub injected_layers: Option<Vec<usize>>,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self { lambda: 0.2, enable: true, injected_layers: None }
    }
}

impl InjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config("lambda", format!("must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Parameter handles of the trainable copy: one residual block per block,
/// plus one zero projection per self-attention layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplifiedCopy {
    pub config: UNetConfig,
    pub layout: UNetLayout,
    pub zero: Vec<Linear>,
    /// `layer_map[i]` is the original self-attention layer fed by copy layer `i`.
    pub layer_map: Vec<usize>,
}

/// Registers a simplified copy of `original` in `store`, cloning weights by
/// name from the original's first residual block of each block.
pub fn init_trainable_copy(original: &UNet, store: &mut ParamStore) -> Result<SimplifiedCopy> {
    let missing: Vec<usize> = original
        .layout
        .blocks
        .iter()
        .enumerate()
        .filter(|(_, b)| b.res.is_empty())
        .map(|(i, _)| i)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Incompatible(format!("original blocks without a residual block: {missing:?}")));
    }
    let config = UNetConfig { res_per_block: 1, ..original.config.clone() };
    let first = store.len();
    let layout = UNetLayout::register(store, COPY_PREFIX, &config, 1, false, config.seed);
    let mut unmapped = Vec::new();
    for idx in first..store.len() {
        let id = crate::backbone::ParamId(idx);
        let name = store.name(id).trim_start_matches(COPY_PREFIX).to_string();
        match original.params.find(&name) {
            Some(src) if original.params.get(src).dim() == store.get(id).dim() => {
                *store.get_mut(id) = original.params.get(src).clone();
            }
            _ => unmapped.push(name),
        }
    }
    if !unmapped.is_empty() {
        return Err(Error::Incompatible(format!("copy parameters without an original: {unmapped:?}")));
    }
    let ch = config.hidden;
    let zero = (0..config.blocks)
        .map(|i| Linear {
            w: store.add(format!("zero.{i}.w"), Array2::zeros((ch, ch))),
            b: store.add(format!("zero.{i}.b"), Array2::zeros((1, ch))),
        })
        .collect();
    Ok(SimplifiedCopy { layer_map: (0..config.blocks).collect(), config, layout, zero })
}

/// Everything trained alongside the frozen denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionModel {
    pub params: ParamStore,
    pub copy: SimplifiedCopy,
    pub fusion: FusionLayout,
    pub config: InjectionConfig,
    pub schedule: WeightSchedule,
}

impl InjectionModel {
    /// Fresh copy plus fusion block sized for the given encoder width.
    pub fn new(original: &UNet, encoder_dim: usize, config: InjectionConfig, schedule: WeightSchedule, seed: u64) -> Result<Self> {
        config.validate()?;
        schedule.validate()?;
        let mut params = ParamStore::new();
        let copy = init_trainable_copy(original, &mut params)?;
        let c = original.config.latent_channels;
        let fusion = FusionLayout::register(&mut params, c, encoder_dim, original.config.hidden, seed);
        Ok(Self { params, copy, fusion, config, schedule })
    }

    pub fn zero_projection_ids(&self) -> impl Iterator<Item = crate::backbone::ParamId> + '_ {
        self.copy.zero.iter().flat_map(|l| [l.w, l.b])
    }

    /// Whether every zero projection is exactly zero.
    pub fn projections_are_zero(&self) -> bool {
        self.zero_projection_ids().all(|id| self.params.get(id).iter().all(|v| *v == 0.0))
    }

    /// The weight used at timestep `t` of `T`.
    pub fn weight_at(&self, t: f64, total: usize) -> Result<f64> {
        schedule_weight(t, total, &self.schedule)
    }
}

/// Zero-projected copy features `f_i` for every copy layer.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionFeatures {
    pub features: Vec<Array2<f64>>,
    pub t: f64,
    pub weight: f64,
}

impl InjectionFeatures {
    pub fn scaled(&self, weight: f64) -> Self {
        Self { features: self.features.iter().map(|f| f * weight).collect(), t: self.t, weight: self.weight * weight }
    }
}

/// Runs the copy on the tape. Returns the zero-projected (unweighted)
/// features and the copy's cross-attention maps.
pub fn copy_forward(
    tape: &mut Tape,
    vars: &[Var],
    copy: &SimplifiedCopy,
    input: Var,
    t: f64,
    text: Var,
) -> Result<(Vec<Var>, Vec<Var>)> {
    let position = position_code(&copy.config);
    let out = forward(tape, &copy.layout, vars, &copy.config, &position, input, t, text, None)?;
    let features = out
        .self_hiddens
        .iter()
        .zip(&copy.zero)
        .map(|(z, proj)| linear(tape, vars, proj, *z))
        .collect();
    Ok((features, out.cross_maps))
}

/// Runs the copy once on `x_t + I''` and taps its projected features.
pub fn extract_injection_features(
    model: &InjectionModel,
    subject_input: &Array2<f64>,
    text: &Array2<f64>,
    t: f64,
) -> Result<InjectionFeatures> {
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape, false);
    let x = tape.constant(subject_input.clone());
    let c = tape.constant(text.clone());
    let (features, _) = copy_forward(&mut tape, &vars, &model.copy, x, t, c)?;
    Ok(InjectionFeatures { features: features.iter().map(|f| tape.value(*f).clone()).collect(), t, weight: 1.0 })
}

/// Projection matrices of one self-attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProjections {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub heads: usize,
}

/// Self-attention of `z` over `[z; f]` keys and `[z + lambda f; f]` values.
/// Output has as many rows as `z`.
pub fn injected_self_attention(
    z: &Array2<f64>,
    f: &Array2<f64>,
    lambda: f64,
    proj: &AttentionProjections,
) -> Result<Array2<f64>> {
    if z.ncols() != f.ncols() {
        return Err(Error::Dimension(format!("z has {} channels, f has {}", z.ncols(), f.ncols())));
    }
    if z.nrows() != f.nrows() {
        return Err(Error::Dimension(format!("z has {} tokens, f has {}", z.nrows(), f.nrows())));
    }
    let c = z.ncols();
    if proj.wq.nrows() != c || proj.wk.nrows() != c || proj.wv.nrows() != c {
        return Err(Error::Dimension(format!("projections do not accept {c} channels")));
    }
    if proj.heads == 0 || !proj.wq.ncols().is_multiple_of(proj.heads) || proj.wq.ncols() != proj.wk.ncols() {
        return Err(Error::Dimension("query/key widths must match and divide into heads".into()));
    }
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let fv = tape.constant(f.clone());
    let wq = tape.constant(proj.wq.clone());
    let wk = tape.constant(proj.wk.clone());
    let wv = tape.constant(proj.wv.clone());
    let (out, _) = injected_attention(&mut tape, zv, fv, lambda, wq, wk, wv, proj.heads);
    Ok(tape.value(out).clone())
}

/// Plain multi-head self-attention (no injection), for comparisons.
pub fn plain_self_attention(z: &Array2<f64>, proj: &AttentionProjections) -> Array2<f64> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let wq = tape.constant(proj.wq.clone());
    let wk = tape.constant(proj.wk.clone());
    let wv = tape.constant(proj.wv.clone());
    let (out, _) = attention(&mut tape, zv, zv, zv, wq, wk, wv, proj.heads);
    tape.value(out).clone()
}

/// How the copy features are weighted inside a joint pass.
#[derive(Debug, Clone, Copy)]
pub enum FeatureWeight {
    Value(f64),
    Learned(Var),
}

/// Where the copy's subject input comes from.
#[derive(Debug, Clone, Copy)]
pub enum SubjectSource {
    /// Precomputed fused latent tokens `I''`.
    Fused(Var),
    /// Inpainted latent `I'` and encoder hidden state, fused on the tape.
    Raw { latent: Var, hidden: Var },
}

pub struct JointTape {
    pub noise_pred: Var,
    pub copy_maps: Vec<Var>,
    pub original_maps: Vec<Var>,
    /// Weighted features, absent on bypass.
    pub features: Option<Vec<Var>>,
}

/// The joint copy + original pass on a tape.
///
/// `injection: None` runs the original alone (bypass). Otherwise the copy
/// receives `x_t + I''`, its projected features are weighted and appended
/// to the original's self-attention keys and values.
#[allow(clippy::too_many_arguments)]
pub fn joint_forward_on_tape(
    tape: &mut Tape,
    original: &UNet,
    frozen: &[Var],
    model: &InjectionModel,
    trainable: &[Var],
    x_t: Var,
    t: f64,
    text: Var,
    injection: Option<(SubjectSource, FeatureWeight)>,
) -> Result<JointTape> {
    let Some((source, weight)) = injection else {
        let out = forward(tape, &original.layout, frozen, &original.config, original.position(), x_t, t, text, None)?;
        return Ok(JointTape {
            noise_pred: out.noise_pred.expect("denoiser has a head"),
            copy_maps: Vec::new(),
            original_maps: out.cross_maps,
            features: None,
        });
    };
    let subject = match source {
        SubjectSource::Fused(v) => v,
        SubjectSource::Raw { latent, hidden } => fuse_on_tape(tape, trainable, &model.fusion, latent, hidden),
    };
    if tape.shape(subject) != tape.shape(x_t) {
        return Err(Error::Dimension(format!(
            "subject latent {:?} vs noisy latent {:?}",
            tape.shape(subject),
            tape.shape(x_t)
        )));
    }
    let input = tape.add(x_t, subject);
    let (raw, copy_maps) = copy_forward(tape, trainable, &model.copy, input, t, text)?;
    let weighted: Vec<Var> = raw
        .into_iter()
        .map(|f| match weight {
            FeatureWeight::Value(1.0) => f,
            FeatureWeight::Value(w) => tape.scale(f, w),
            FeatureWeight::Learned(w) => tape.scale_by(f, w),
        })
        .collect();
    let mut per_layer = vec![None; original.layout.blocks.len()];
    for (i, &layer) in model.copy.layer_map.iter().enumerate() {
        if layer >= per_layer.len() {
            return Err(Error::Dimension(format!("copy layer {i} maps to missing original layer {layer}")));
        }
        let selected = model.config.injected_layers.as_ref().is_none_or(|s| s.contains(&layer));
        if selected {
            per_layer[layer] = Some(weighted[i]);
        }
    }
    let inj = Injection { features: &per_layer, lambda: model.config.lambda };
    let out = forward(tape, &original.layout, frozen, &original.config, original.position(), x_t, t, text, Some(&inj))?;
    Ok(JointTape {
        noise_pred: out.noise_pred.expect("denoiser has a head"),
        copy_maps,
        original_maps: out.cross_maps,
        features: Some(weighted),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointOutput {
    pub noise_pred: Array2<f64>,
    /// Last cross-attention map of the copy; absent on bypass.
    pub copy_map: Option<Array2<f64>>,
    /// Last cross-attention map of the original.
    pub original_map: Array2<f64>,
    pub weight: f64,
    pub bypassed: bool,
}

/// Joint denoising step with the schedule weight at `t`.
pub fn denoise_joint(
    original: &UNet,
    model: &InjectionModel,
    x_t: &Array2<f64>,
    t: f64,
    total_steps: usize,
    text: &Array2<f64>,
    subject: &Array2<f64>,
) -> Result<JointOutput> {
    let weight = model.weight_at(t, total_steps)?;
    denoise_joint_weighted(original, model, x_t, t, text, subject, weight)
}

/// Joint denoising step with an explicit feature weight. A zero weight or a
/// disabled config runs the original network unchanged.
pub fn denoise_joint_weighted(
    original: &UNet,
    model: &InjectionModel,
    x_t: &Array2<f64>,
    t: f64,
    text: &Array2<f64>,
    subject: &Array2<f64>,
    weight: f64,
) -> Result<JointOutput> {
    if !weight.is_finite() {
        return Err(Error::NonFinite(format!("injection weight {weight}")));
    }
    if !model.config.enable || weight == 0.0 {
        let (noise_pred, taps) = original.predict(x_t, t, text)?;
        return Ok(JointOutput {
            noise_pred,
            copy_map: None,
            original_map: taps.last_cross_attention_map,
            weight,
            bypassed: true,
        });
    }
    let mut tape = Tape::new();
    let frozen = original.params.bind(&mut tape, false);
    let trainable = model.params.bind(&mut tape, false);
    let x = tape.constant(x_t.clone());
    let c = tape.constant(text.clone());
    let s = tape.constant(subject.clone());
    let out = joint_forward_on_tape(
        &mut tape,
        original,
        &frozen,
        model,
        &trainable,
        x,
        t,
        c,
        Some((SubjectSource::Fused(s), FeatureWeight::Value(weight))),
    )?;
    Ok(JointOutput {
        noise_pred: tape.value(out.noise_pred).clone(),
        copy_map: out.copy_maps.last().map(|v| tape.value(*v).clone()),
        original_map: tape.value(*out.original_maps.last().expect("blocks >= 2")).clone(),
        weight,
        bypassed: false,
    })
}

/// Binds a learned schedule when the model uses one.
pub fn bind_learned(tape: &mut Tape, schedule: &WeightSchedule, trainable: bool) -> Option<LearnedVars> {
    schedule.learned.as_ref().map(|w| LearnedVars::bind(tape, w, trainable))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::randn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (UNet, InjectionModel) {
        let net = UNet::new(UNetConfig::default()).unwrap();
        let model = InjectionModel::new(&net, 64, InjectionConfig::default(), WeightSchedule::default(), 1).unwrap();
        (net, model)
    }

    #[test]
    fn copy_clones_first_residual_and_attention() {
        let (net, model) = setup();
        for (name, value) in model.params.iter() {
            if let Some(stripped) = name.strip_prefix(COPY_PREFIX) {
                let src = net.params.find(stripped).unwrap();
                assert_eq!(net.params.get(src), value, "{name}");
                assert!(!stripped.contains("res.1"));
            }
        }
        assert!(model.projections_are_zero());
        assert!(model.copy.layout.blocks.iter().all(|b| b.res.len() == 1));
    }

    #[test]
    fn fresh_features_are_zero_and_deterministic() {
        let (net, model) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn(&mut rng, net.config.tokens(), net.config.latent_channels, 1.0);
        let c = randn(&mut rng, 6, net.config.text_dim, 1.0);
        let a = extract_injection_features(&model, &x, &c, 300.0).unwrap();
        let b = extract_injection_features(&model, &x, &c, 300.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.features.len(), net.config.blocks);
        assert!(a.features.iter().all(|f| f.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn hand_computed_single_token_case() {
        let proj = AttentionProjections {
            wq: Array2::eye(1),
            wk: Array2::eye(1),
            wv: Array2::eye(1),
            heads: 1,
        };
        let out = injected_self_attention(&ndarray::array![[1.0]], &ndarray::array![[0.0]], 0.0, &proj).unwrap();
        let sigma = 1.0f64.exp() / (1.0f64.exp() + 1.0);
        assert!((out[[0, 0]] - sigma).abs() < 1e-15);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let proj = AttentionProjections { wq: Array2::eye(2), wk: Array2::eye(2), wv: Array2::eye(2), heads: 1 };
        let r = injected_self_attention(&Array2::zeros((3, 2)), &Array2::zeros((3, 3)), 0.2, &proj);
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn disabled_and_zero_weight_match_baseline_exactly() {
        let (net, mut model) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randn(&mut rng, net.config.tokens(), net.config.latent_channels, 1.0);
        let s = randn(&mut rng, net.config.tokens(), net.config.latent_channels, 1.0);
        let c = randn(&mut rng, 6, net.config.text_dim, 1.0);
        let (base, taps) = net.predict(&x, 100.0, &c).unwrap();
        let zero = denoise_joint_weighted(&net, &model, &x, 100.0, &c, &s, 0.0).unwrap();
        assert_eq!(zero.noise_pred, base);
        assert_eq!(zero.original_map, taps.last_cross_attention_map);
        model.config.enable = false;
        let off = denoise_joint_weighted(&net, &model, &x, 100.0, &c, &s, 1.0).unwrap();
        assert_eq!(off.noise_pred, base);
    }

    #[test]
    fn missing_residual_blocks_are_incompatible() {
        let mut net = UNet::new(UNetConfig::default()).unwrap();
        net.layout.blocks[1].res.clear();
        let err = init_trainable_copy(&net, &mut ParamStore::new()).unwrap_err();
        assert!(matches!(err, Error::Incompatible(ref m) if m.contains("[1]")));
    }
}
