//! Fine-tuning loop: training-set assembly, joint condition dropout, the
//! optimizer step, epoch checkpoints and line-delimited metrics.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{randn, Backbone, BackboneSpec, LatentImage, TextEncoding};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::injection::{
    bind_learned, joint_forward_on_tape, Checkpoint, FeatureWeight, InjectionConfig, InjectionModel, LearnedWeights,
    ScheduleVariant, SubjectRecord, SubjectSource, TrainProgress, WeightSchedule, CHECKPOINT_FORMAT,
};
use crate::losses::{attention_consistency_layers_on_tape, total_loss, AcPlacement, LossReport};
use crate::optim::Adam;
use crate::rngr::{build_subject_input, PointAnnotation, RngrConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// One reference image and its annotation, as paths in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSpec {
    pub image: PathBuf,
    pub annotation: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub condition_dropout: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub seed: u64,
    pub identifier: String,
    pub class_noun: String,
    /// `{identifier}` and `{class}` are substituted.
    pub prompt_template: String,
    pub backbone: BackboneSpec,
    pub references: Vec<ReferenceSpec>,
    pub output_dir: PathBuf,
    pub ac_layers: AcPlacement,
    pub rngr: RngrConfig,
    /// Inference schedule stored in the checkpoint. With the learned
    /// variant the weight net is trained jointly.
    pub schedule: WeightSchedule,
    pub checkpoint_every: usize,
    pub resume: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            epochs: 60,
            condition_dropout: 0.10,
            gamma: 0.1,
            lambda: 0.2,
            seed: 0,
            identifier: "[V]".into(),
            class_noun: "object".into(),
            prompt_template: "a photo of {identifier} {class}".into(),
            backbone: BackboneSpec::default(),
            references: Vec::new(),
            output_dir: PathBuf::from("runs/train"),
            ac_layers: AcPlacement::LastLayer,
            rngr: RngrConfig::default(),
            schedule: WeightSchedule::default(),
            checkpoint_every: 1,
            resume: false,
        }
    }
}

impl TrainConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = crate::config::load_config(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("learning_rate", format!("must be > 0, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.condition_dropout) {
            return Err(Error::config("condition_dropout", format!("must be in [0, 1), got {}", self.condition_dropout)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::config("gamma", format!("must be >= 0, got {}", self.gamma)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::config("lambda", format!("must be >= 0, got {}", self.lambda)));
        }
        if self.identifier.trim().is_empty() || self.identifier.contains(char::is_whitespace) {
            return Err(Error::config("identifier", "must be a single non-empty token"));
        }
        if self.prompt_template.matches("{identifier}").count() != 1 {
            return Err(Error::config("prompt_template", "must contain {identifier} exactly once"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every", "must be >= 1"));
        }
        self.schedule.validate()
    }

    pub fn prompt(&self) -> String {
        render_prompt(&self.prompt_template, &self.identifier, &self.class_noun)
    }
}

pub fn render_prompt(template: &str, identifier: &str, class_noun: &str) -> String {
    template.replace("{identifier}", identifier).replace("{class}", class_noun)
}

/// A prepared reference with its cached mask/inpaint results.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image_id: String,
    pub image: Image,
    pub annotation: PointAnnotation,
    pub prompt: String,
    pub text: TextEncoding,
    pub inpainted: Image,
    pub subject: SubjectRecord,
    pub warnings: Vec<String>,
}

impl TrainSample {
    /// Denoising target: the latent of the inpainted reference.
    pub fn target(&self) -> &LatentImage {
        &self.subject.latent
    }
}

/// Runs the mask/inpaint pipeline once per reference.
pub fn prepare_training_set(
    references: &[(String, Image, PointAnnotation)],
    identifier: &str,
    class_noun: &str,
    template: &str,
    backbone: &Backbone,
    model: &InjectionModel,
    rngr: &RngrConfig,
) -> Result<Vec<TrainSample>> {
    if references.is_empty() {
        return Err(Error::config("references", "at least one reference image is required"));
    }
    let prompt = render_prompt(template, identifier, class_noun);
    let text = backbone.text_encoder.encode_text(&prompt);
    if text.identifier_span.is_none() {
        return Err(Error::config("identifier", format!("identifier {identifier} not found in prompt {prompt:?}")));
    }
    references
        .iter()
        .map(|(id, image, annotation)| {
            if image.dims() != annotation.image_dims() {
                return Err(Error::config(
                    "references",
                    format!("{id}: image is {:?} but annotation says {:?}", image.dims(), annotation.image_dims()),
                ));
            }
            let input = build_subject_input(annotation, image, backbone, &model.params, &model.fusion, rngr, None)
                .map_err(|e| Error::Stage { stage: format!("reference {id}"), source: Box::new(e) })?;
            Ok(TrainSample {
                image_id: id.clone(),
                image: image.clone(),
                annotation: annotation.clone(),
                prompt: prompt.clone(),
                text: text.clone(),
                inpainted: input.inpainted,
                subject: SubjectRecord {
                    latent: input.latent,
                    encoding: input.encoding,
                    provenance: input.subject.provenance,
                },
                warnings: input.mask.warnings,
            })
        })
        .collect()
}

/// Per-step RNG, a function of the run seed and global step only.
pub fn step_rng(seed: u64, global_step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(global_step);
    rng
}

/// Random choices of one training step, drawn in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDraws {
    pub dropped: bool,
    pub t: usize,
    pub noise: Array2<f64>,
}

impl StepDraws {
    pub fn sample(rng: &mut impl Rng, dropout: f64, train_steps: usize, noise_shape: (usize, usize)) -> Self {
        let dropped = rng.random::<f64>() < dropout;
        let t = rng.random_range(1..=train_steps);
        let noise = randn(rng, noise_shape.0, noise_shape.1, 1.0);
        Self { dropped, t, noise }
    }
}

/// The dropout decision of a given step (same draw the trainer makes).
pub fn dropout_decision(seed: u64, global_step: u64, dropout: f64) -> bool {
    step_rng(seed, global_step).random::<f64>() < dropout
}

/// One line of the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub sample: String,
    pub t: usize,
    pub dropped: bool,
    pub l_ldm: f64,
    pub l_ac: f64,
    pub total: f64,
    pub w_t: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropoutCounters {
    pub steps: u64,
    pub dropped: u64,
}

impl DropoutCounters {
    pub fn rate(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.dropped as f64 / self.steps as f64
        }
    }
}

struct LossGraph {
    report: LossReport,
    total: Var,
    /// Trainable variables in optimizer order.
    vars: Vec<Var>,
    w_t: f64,
}

/// Mutable training state: the model, its optimizer and progress.
pub struct Trainer {
    pub backbone: Backbone,
    pub model: InjectionModel,
    pub optimizer: Adam,
    pub samples: Vec<TrainSample>,
    pub config: TrainConfig,
    pub progress: TrainProgress,
    pub counters: DropoutCounters,
    uncond: Array2<f64>,
    dropout: f64,
}

impl Trainer {
    /// Fresh model for `backbone`, trained with `config`.
    pub fn new(config: TrainConfig, backbone: Backbone, references: &[(String, Image, PointAnnotation)]) -> Result<Self> {
        config.validate()?;
        let mut schedule = config.schedule.clone();
        if schedule.variant == ScheduleVariant::Learned && schedule.learned.is_none() {
            schedule.learned = Some(LearnedWeights::init(schedule.beta, config.seed ^ 0x5c4e));
        }
        let injection = InjectionConfig { lambda: config.lambda, ..InjectionConfig::default() };
        let model = InjectionModel::new(
            &backbone.denoiser,
            backbone.patch_encoder.embed_dim(),
            injection,
            schedule,
            config.seed,
        )?;
        let samples = prepare_training_set(
            references,
            &config.identifier,
            &config.class_noun,
            &config.prompt_template,
            &backbone,
            &model,
            &config.rngr,
        )?;
        Ok(Self::from_parts(config, backbone, model, samples, None, TrainProgress::default()))
    }

    fn from_parts(
        config: TrainConfig,
        backbone: Backbone,
        model: InjectionModel,
        samples: Vec<TrainSample>,
        optimizer: Option<Adam>,
        progress: TrainProgress,
    ) -> Self {
        let optimizer = optimizer.unwrap_or_else(|| {
            let learned = model.schedule.learned.iter().flat_map(|w| [&w.w1, &w.b1, &w.w2, &w.b2]);
            Adam::new(config.learning_rate, model.params.iter().map(|(_, v)| v).chain(learned))
        });
        let uncond = backbone.text_encoder.encode_text("").tokens;
        let dropout = config.condition_dropout;
        Self { backbone, model, optimizer, samples, config, progress, counters: DropoutCounters::default(), uncond, dropout }
    }

    /// Restores a trainer from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(config: TrainConfig, backbone: Backbone, samples: Vec<TrainSample>, ckpt: Checkpoint) -> Result<Self> {
        ckpt.ensure_base(&backbone)?;
        Ok(Self::from_parts(config, backbone, ckpt.model, samples, ckpt.optimizer, ckpt.progress))
    }

    /// Overrides the dropout probability; `1.0` is allowed here.
    pub fn set_condition_dropout(&mut self, p: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout probability {p} outside [0, 1]")));
        }
        self.dropout = p;
        Ok(())
    }

    /// Total loss of one sample under fixed draws, without updating.
    pub fn evaluate(&self, sample: &TrainSample, draws: &StepDraws) -> Result<LossReport> {
        let mut tape = Tape::new();
        Ok(self.build_loss(&mut tape, sample, draws, false)?.report)
    }

    fn build_loss(&self, tape: &mut Tape, sample: &TrainSample, draws: &StepDraws, trainable: bool) -> Result<LossGraph> {
        let noise_schedule = &self.backbone.noise;
        let ab = noise_schedule.alpha_bar(draws.t)?;
        let x0 = sample.target().to_tokens();
        if x0.dim() != draws.noise.dim() {
            return Err(Error::Dimension(format!("noise {:?} vs latent {:?}", draws.noise.dim(), x0.dim())));
        }
        let x_t = &x0 * ab.sqrt() + &draws.noise * (1.0 - ab).sqrt();
        let denoiser = &self.backbone.denoiser;
        let frozen = denoiser.params.bind(tape, false);
        let mut vars = self.model.params.bind(tape, trainable);
        let learned = bind_learned(tape, &self.model.schedule, trainable);
        let x = tape.constant(x_t);
        let text = tape.constant(if draws.dropped { self.uncond.clone() } else { sample.text.tokens.clone() });
        let (weight, w_t) = match (&learned, self.model.schedule.variant) {
            (Some(l), ScheduleVariant::Learned) => {
                let s = draws.t as f64 / noise_schedule.train_steps() as f64;
                let w = l.weight(tape, s, self.model.schedule.beta);
                (FeatureWeight::Learned(w), tape.scalar(w))
            }
            _ => (FeatureWeight::Value(1.0), 1.0),
        };
        let injection = (!draws.dropped).then(|| {
            let latent = tape.constant(sample.subject.latent.to_tokens());
            let hidden = tape.constant(sample.subject.hidden());
            (SubjectSource::Raw { latent, hidden }, weight)
        });
        let joint = joint_forward_on_tape(tape, denoiser, &frozen, &self.model, &vars, x, draws.t as f64, text, injection)?;
        let eps = tape.constant(draws.noise.clone());
        let l_ldm = tape.mse(joint.noise_pred, eps);
        let (total, l_ac) = if joint.copy_maps.is_empty() {
            (l_ldm, 0.0)
        } else {
            let l_ac =
                attention_consistency_layers_on_tape(tape, &joint.copy_maps, &joint.original_maps, &self.config.ac_layers)?;
            let scaled = tape.scale(l_ac, self.config.gamma);
            (tape.add(l_ldm, scaled), tape.scalar(l_ac))
        };
        let l_ldm = tape.scalar(l_ldm);
        if ![l_ldm, l_ac, tape.scalar(total)].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "loss at step {} (t = {}): l_ldm = {l_ldm}, l_ac = {l_ac}, total = {}",
                self.progress.global_step,
                draws.t,
                tape.scalar(total)
            )));
        }
        let report = total_loss(l_ldm, l_ac, self.config.gamma)?;
        if let Some(l) = learned {
            vars.extend(l.vars());
        }
        Ok(LossGraph { report, total, vars, w_t })
    }

    /// Draws for the current global step.
    pub fn draws_for(&self, sample: &TrainSample) -> StepDraws {
        let mut rng = step_rng(self.config.seed, self.progress.global_step);
        let shape = (sample.target().to_tokens().nrows(), sample.target().channels());
        StepDraws::sample(&mut rng, self.dropout, self.backbone.noise.train_steps(), shape)
    }

    /// One optimizer step on sample `index`.
    pub fn step(&mut self, index: usize) -> Result<StepRecord> {
        let sample = self
            .samples
            .get(index)
            .ok_or_else(|| Error::Parameter(format!("no sample {index}")))?
            .clone();
        let draws = self.draws_for(&sample);
        let before = self.backbone.denoiser.content_hash();
        let mut tape = Tape::new();
        let LossGraph { report, total, vars, w_t } = self.build_loss(&mut tape, &sample, &draws, true)?;
        let grads = tape.backward(total);
        let shapes: Vec<(usize, usize)> = vars.iter().map(|v| tape.shape(*v)).collect();
        let grads: Vec<Array2<f64>> = vars.iter().zip(&shapes).map(|(v, s)| grads.get_or_zeros(*v, *s)).collect();
        let learned = self.model.schedule.learned.as_mut();
        let params = self
            .model
            .params
            .values_mut()
            .chain(learned.into_iter().flat_map(|w| [&mut w.w1, &mut w.b1, &mut w.w2, &mut w.b2]));
        self.optimizer.update(params, &grads)?;
        debug_assert_eq!(before, self.backbone.denoiser.content_hash());
        self.counters.steps += 1;
        self.counters.dropped += draws.dropped as u64;
        let record = StepRecord {
            step: self.progress.global_step,
            epoch: self.progress.epochs_completed,
            sample: sample.image_id.clone(),
            t: draws.t,
            dropped: draws.dropped,
            l_ldm: report.l_ldm,
            l_ac: report.l_ac,
            total: report.total,
            w_t,
            learning_rate: self.optimizer.lr,
        };
        self.progress.global_step += 1;
        Ok(record)
    }

    /// One pass over every sample in order (batch size 1).
    pub fn run_epoch(&mut self) -> Result<Vec<StepRecord>> {
        let records = (0..self.samples.len()).map(|i| self.step(i)).collect::<Result<Vec<_>>>()?;
        self.progress.epochs_completed += 1;
        Ok(records)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT,
            base_hash: self.backbone.denoiser.content_hash(),
            model: self.model.clone(),
            subjects: self.samples.iter().map(|s| s.subject.clone()).collect(),
            identifier: self.config.identifier.clone(),
            class_noun: self.config.class_noun.clone(),
            progress: self.progress.clone(),
            optimizer: Some(self.optimizer.clone()),
            train_config: serde_json::to_value(&self.config).unwrap_or_default(),
        }
    }
}

/// Result of [`fine_tune`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub final_report: Option<LossReport>,
    pub steps_run: u64,
    pub resumed_from_epoch: Option<usize>,
}

/// Loads reference images and annotations listed in the config, resolving
/// relative paths against `base_dir`.
pub fn load_references(config: &TrainConfig, base_dir: &Path) -> Result<Vec<(String, Image, PointAnnotation)>> {
    config
        .references
        .iter()
        .map(|r| {
            let image_path = base_dir.join(&r.image);
            let image = Image::load(&image_path)?;
            let annotation = PointAnnotation::load(base_dir.join(&r.annotation))?;
            let id = r.image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((id, image, annotation))
        })
        .collect()
}

/// Trains for `config.epochs` epochs, writing an epoch checkpoint and one
/// metrics line per step into `config.output_dir`. With `config.resume`
/// an existing checkpoint there is continued.
pub fn fine_tune(
    config: &TrainConfig,
    backbone: Backbone,
    references: &[(String, Image, PointAnnotation)],
) -> Result<TrainOutcome> {
    fine_tune_with_progress(config, backbone, references, &mut |_, _| {})
}

/// [`fine_tune`] with a callback after every epoch: `(epochs done, epochs)`.
pub fn fine_tune_with_progress(
    config: &TrainConfig,
    backbone: Backbone,
    references: &[(String, Image, PointAnnotation)],
    on_epoch: &mut dyn FnMut(usize, usize),
) -> Result<TrainOutcome> {
    config.validate()?;
    let dir = &config.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let checkpoint_path = dir.join(CHECKPOINT_FILE);
    let metrics_path = dir.join(METRICS_FILE);

    let mut trainer = Trainer::new(config.clone(), backbone.clone(), references)?;
    let mut resumed_from_epoch = None;
    if config.resume && checkpoint_path.exists() {
        let ckpt = Checkpoint::load(&checkpoint_path)?;
        let epoch = ckpt.progress.epochs_completed;
        let samples = std::mem::take(&mut trainer.samples);
        trainer = Trainer::resume(config.clone(), backbone, samples, ckpt)?;
        resumed_from_epoch = Some(epoch);
        log::info!("resuming from epoch {epoch}");
    } else if metrics_path.exists() {
        std::fs::remove_file(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    }
    let mut metrics = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let start_step = trainer.progress.global_step;
    let mut last = None;
    while trainer.progress.epochs_completed < config.epochs {
        for record in trainer.run_epoch()? {
            writeln!(metrics, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(&metrics_path, e))?;
            last = Some(LossReport { l_ldm: record.l_ldm, l_ac: record.l_ac, total: record.total, gamma: config.gamma });
        }
        let epoch = trainer.progress.epochs_completed;
        if epoch % config.checkpoint_every == 0 || epoch == config.epochs {
            trainer.checkpoint().save(&checkpoint_path)?;
        }
        if let Some(r) = last {
            log::info!("epoch {epoch}: l_ldm {:.5} l_ac {:.5} total {:.5}", r.l_ldm, r.l_ac, r.total);
        }
        on_epoch(epoch, config.epochs);
    }
    if !checkpoint_path.exists() {
        trainer.checkpoint().save(&checkpoint_path)?;
    }
    Ok(TrainOutcome {
        checkpoint_path,
        metrics_path,
        final_report: last,
        steps_run: trainer.progress.global_step - start_step,
        resumed_from_epoch,
    })
}
