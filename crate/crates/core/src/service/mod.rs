//! Command entry points shared by the CLI and the HTTP service.

pub mod http;
mod jobs;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, BackboneSpec};
use crate::config::{config_dir, load_config, resolve};
use crate::error::{Error, Result};
use crate::evaluator::{load_prompts, run_benchmark, ClassSpec, EvalProtocol, MetricEncoders};
use crate::image::{encode_mask_png, overlay_mask, Image};
use crate::injection::{Checkpoint, WeightSchedule};
use crate::rngr::{extract_negative_mask, MaskSidecar, NegativeMask, Point, PointAnnotation, RngrConfig};
use crate::sampler::{generate, SampleRequest};
use crate::trainer::{fine_tune_with_progress, load_references, TrainConfig};

pub use jobs::{Job, JobKind, JobStatus, JobStore};

pub const SCHEMA_VERSION: u32 = 1;
pub const ENV_ASSET_ROOT: &str = "P3S_ASSET_ROOT";
pub const ENV_PORT: &str = "P3S_PORT";

/// Where assets live and whether the toy backbone is forced.
#[derive(Debug, Clone)]
pub struct CommandContext {
    pub asset_root: PathBuf,
    pub force_toy: bool,
}

impl CommandContext {
    pub fn from_env(force_toy: bool) -> Self {
        let asset_root = std::env::var_os(ENV_ASSET_ROOT).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
        Self { asset_root, force_toy }
    }

    pub fn backbone(&self, spec: &BackboneSpec) -> Result<Backbone> {
        spec.build(&self.asset_root, self.force_toy)
    }
}

/// A file produced by a command, identified by its content hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Hex SHA-256 of the file contents.
    pub id: String,
    pub name: String,
    pub path: PathBuf,
    pub bytes: u64,
}

impl ArtifactRecord {
    pub fn from_path(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let data = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            id: hex::encode(Sha256::digest(&data)),
            name: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            bytes: data.len() as u64,
            path,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommandReport {
    pub schema_version: u32,
    pub command: String,
    pub artifacts: Vec<ArtifactRecord>,
    pub notes: Vec<String>,
    pub summary: serde_json::Value,
}

impl CommandReport {
    fn new(command: &str, paths: &[PathBuf], notes: Vec<String>, summary: serde_json::Value) -> Result<Self> {
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            command: command.into(),
            artifacts: paths.iter().map(ArtifactRecord::from_path).collect::<Result<_>>()?,
            notes,
            summary,
        })
    }
}

/// Machine-readable failure description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub schema_version: u32,
    pub error: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
}

impl From<&Error> for ErrorReport {
    fn from(e: &Error) -> Self {
        let (field, stage) = match e {
            Error::Config { field, .. } => (Some(field.clone()), None),
            Error::Stage { stage, source } => match source.as_ref() {
                Error::Config { field, .. } => (Some(field.clone()), Some(stage.clone())),
                _ => (None, Some(stage.clone())),
            },
            _ => (None, None),
        };
        Self { schema_version: SCHEMA_VERSION, error: e.code().into(), message: e.to_string(), field, stage }
    }
}

/// Process exit status for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Stage { source, .. } => exit_code(source),
        Error::Config { .. } | Error::Json(_) => 2,
        Error::Input(_) | Error::Annotation { .. } | Error::Dimension(_) | Error::Image(_) => 3,
        Error::DegenerateMap(_) | Error::DegenerateEncoding(_) | Error::EmptyMask(_) => 4,
        Error::Protocol(_) => 5,
        Error::Incompatible(_) => 6,
        Error::Io { .. } => 7,
        _ => 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    MaskPreview,
    Train,
    Generate,
    Evaluate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::MaskPreview => "mask-preview",
            Command::Train => "train",
            Command::Generate => "generate",
            Command::Evaluate => "evaluate",
        }
    }
}

/// Loads the config at `path` and runs `command`. Relative paths in the
/// config resolve against the config file's directory.
pub fn run_command(command: Command, path: &Path, ctx: &CommandContext) -> Result<CommandReport> {
    let base = config_dir(path);
    match command {
        Command::MaskPreview => cmd_mask_preview(&load_config(path)?, &base, ctx),
        Command::Train => cmd_train(&load_config(path)?, &base, ctx, &mut |_| {}),
        Command::Generate => cmd_generate(&load_config(path)?, &base, ctx, &mut |_| {}),
        Command::Evaluate => cmd_evaluate(&load_config(path)?, &base, ctx),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskPreviewConfig {
    pub image: PathBuf,
    /// Annotation file; when absent the inline points are used.
    pub annotation: Option<PathBuf>,
    pub positive: Option<Point>,
    pub negative: Option<Point>,
    pub output_dir: PathBuf,
    pub stem: String,
    pub rngr: RngrConfig,
    pub backbone: BackboneSpec,
}

impl Default for MaskPreviewConfig {
    fn default() -> Self {
        Self {
            image: PathBuf::new(),
            annotation: None,
            positive: None,
            negative: None,
            output_dir: PathBuf::from("runs/mask"),
            stem: "mask".into(),
            rngr: RngrConfig::default(),
            backbone: BackboneSpec::default(),
        }
    }
}

/// In-memory mask preview: the mask, its sidecar and both PNG encodings.
#[derive(Debug, Clone)]
pub struct MaskPreview {
    pub mask: NegativeMask,
    pub sidecar: MaskSidecar,
    pub mask_png: Vec<u8>,
    pub overlay_png: Vec<u8>,
}

/// Pure mask computation shared by the CLI and HTTP paths.
pub fn preview_mask(image: &Image, annotation: &PointAnnotation, backbone: &Backbone, cfg: &RngrConfig) -> Result<MaskPreview> {
    annotation.validate()?;
    if image.dims() != annotation.image_dims() {
        return Err(Error::Dimension(format!(
            "image is {:?} but the annotation says {:?}",
            image.dims(),
            annotation.image_dims()
        )));
    }
    let enc = backbone.patch_encoder.encode_image_patches(image)?;
    let mask = extract_negative_mask(annotation, &enc, cfg)?;
    let mask_png = encode_mask_png(mask.pixel.bits())?;
    let overlay_png = overlay_mask(image, mask.pixel.bits(), 0.5)?.to_png_bytes()?;
    let sidecar = MaskSidecar::new(annotation, &mask, cfg);
    Ok(MaskPreview { mask, sidecar, mask_png, overlay_png })
}

pub fn cmd_mask_preview(cfg: &MaskPreviewConfig, base: &Path, ctx: &CommandContext) -> Result<CommandReport> {
    if cfg.image.as_os_str().is_empty() {
        return Err(Error::config("image", "required"));
    }
    if cfg.stem.is_empty() || cfg.stem.contains(['/', '\\']) {
        return Err(Error::config("stem", "must be a plain file stem"));
    }
    let image_path = resolve(base, &cfg.image);
    let image = Image::load(&image_path)?;
    let annotation = match (&cfg.annotation, cfg.positive) {
        (Some(path), _) => PointAnnotation::load(resolve(base, path))?,
        (None, Some(positive)) => {
            let name = cfg.image.to_string_lossy().into_owned();
            PointAnnotation::new(name, image.dims(), positive, cfg.negative)
        }
        (None, None) => return Err(Error::config("positive", "give an annotation file or a positive point")),
    };
    let backbone = ctx.backbone(&cfg.backbone)?;
    let preview = preview_mask(&image, &annotation, &backbone, &cfg.rngr)?;

    let out = resolve(base, &cfg.output_dir);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mask_path = out.join(format!("{}.png", cfg.stem));
    let overlay_path = out.join(format!("{}_overlay.png", cfg.stem));
    let sidecar_path = out.join(format!("{}.json", cfg.stem));
    std::fs::write(&mask_path, &preview.mask_png).map_err(|e| Error::io(&mask_path, e))?;
    std::fs::write(&overlay_path, &preview.overlay_png).map_err(|e| Error::io(&overlay_path, e))?;
    let sidecar = serde_json::to_string_pretty(&preview.sidecar)?;
    std::fs::write(&sidecar_path, sidecar).map_err(|e| Error::io(&sidecar_path, e))?;

    let mut notes = preview.mask.warnings.clone();
    if preview.mask.single_subject {
        notes.insert(0, "single-subject: no negative point, mask is empty".into());
    }
    let summary = json!({
        "annotation_id": preview.sidecar.annotation_id,
        "single_subject": preview.mask.single_subject,
        "mask_pixels": preview.sidecar.mask_pixels,
        "positive_patch": preview.sidecar.positive_patch,
        "negative_patch": preview.sidecar.negative_patch,
    });
    CommandReport::new("mask-preview", &[mask_path, overlay_path, sidecar_path], notes, summary)
}

/// Progress callback: fraction in `[0, 1]`.
pub type Progress<'a> = dyn FnMut(f64) + 'a;

pub fn cmd_train(cfg: &TrainConfig, base: &Path, ctx: &CommandContext, progress: &mut Progress<'_>) -> Result<CommandReport> {
    let mut cfg = cfg.clone();
    cfg.output_dir = resolve(base, &cfg.output_dir);
    cfg.validate()?;
    if cfg.references.is_empty() {
        return Err(Error::config("references", "need at least one reference image"));
    }
    let references = load_references(&cfg, base)?;
    let backbone = ctx.backbone(&cfg.backbone)?;
    let outcome = fine_tune_with_progress(&cfg, backbone, &references, &mut |done, total| {
        progress(done as f64 / total as f64)
    })?;
    let summary = json!({
        "final": outcome.final_report,
        "steps_run": outcome.steps_run,
        "resumed_from_epoch": outcome.resumed_from_epoch,
    });
    CommandReport::new("train", &[outcome.checkpoint_path, outcome.metrics_path], Vec::new(), summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    /// Fine-tuned checkpoint; without one the frozen base runs alone.
    pub checkpoint: Option<PathBuf>,
    pub backbone: BackboneSpec,
    pub output_dir: PathBuf,
    pub prompt: String,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub guidance: f64,
    pub eta: f64,
    pub inject_unconditional: bool,
    pub schedule: Option<WeightSchedule>,
    pub reference_index: Option<usize>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        let r = SampleRequest::default();
        Self {
            checkpoint: None,
            backbone: BackboneSpec::default(),
            output_dir: PathBuf::from("runs/generate"),
            prompt: String::new(),
            seeds: vec![0],
            steps: r.steps,
            guidance: r.guidance,
            eta: r.eta,
            inject_unconditional: r.inject_unconditional,
            schedule: None,
            reference_index: None,
        }
    }
}

impl GenerateConfig {
    pub fn request(&self, seed: u64) -> SampleRequest {
        SampleRequest {
            prompt: self.prompt.clone(),
            seed,
            steps: self.steps,
            guidance: self.guidance,
            eta: self.eta,
            inject_unconditional: self.inject_unconditional,
            schedule: self.schedule.clone(),
            reference_index: self.reference_index,
        }
    }
}

pub fn cmd_generate(cfg: &GenerateConfig, base: &Path, ctx: &CommandContext, progress: &mut Progress<'_>) -> Result<CommandReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::config("seeds", "need at least one seed"));
    }
    cfg.request(0).validate()?;
    let checkpoint = cfg.checkpoint.as_ref().map(|p| Checkpoint::load(resolve(base, p))).transpose()?;
    if checkpoint.is_none() {
        if let Some(s) = &cfg.schedule {
            log::warn!("schedule {:?} ignored without a checkpoint", s.variant);
        }
    }
    let backbone = ctx.backbone(&cfg.backbone)?;
    let out = resolve(base, &cfg.output_dir);
    let mut paths = Vec::with_capacity(2 * cfg.seeds.len());
    let mut hashes = Vec::with_capacity(cfg.seeds.len());
    for (i, &seed) in cfg.seeds.iter().enumerate() {
        let g = generate(&backbone, checkpoint.as_ref(), &cfg.request(seed))?;
        let stem = format!("seed_{seed}");
        g.save(&out, &stem)?;
        paths.push(out.join(format!("{stem}.png")));
        paths.push(out.join(format!("{stem}.json")));
        hashes.push(json!({ "seed": seed, "latent_hash": g.manifest.latent_hash }));
        progress((i + 1) as f64 / cfg.seeds.len() as f64);
    }
    CommandReport::new("generate", &paths, Vec::new(), json!({ "generations": hashes }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub backbone: BackboneSpec,
    pub output_dir: PathBuf,
    /// Inline prompt templates; overrides the defaults.
    pub prompts: Option<Vec<String>>,
    /// Prompt file, one template per line; overrides `prompts`.
    pub prompts_file: Option<PathBuf>,
    pub images_per_prompt: usize,
    pub classes: Vec<ClassSpec>,
    pub seed: u64,
    pub steps: usize,
    pub guidance: f64,
    pub encoder_seed: u64,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        let p = EvalProtocol::default();
        Self {
            backbone: BackboneSpec::default(),
            output_dir: PathBuf::from("runs/evaluate"),
            prompts: None,
            prompts_file: None,
            images_per_prompt: p.images_per_prompt,
            classes: Vec::new(),
            seed: p.seed,
            steps: p.steps,
            guidance: p.guidance,
            encoder_seed: 0,
        }
    }
}

impl EvaluateConfig {
    pub fn protocol(&self, base: &Path) -> Result<EvalProtocol> {
        let prompts = match (&self.prompts_file, &self.prompts) {
            (Some(f), _) => load_prompts(resolve(base, f))?,
            (None, Some(p)) => p.clone(),
            (None, None) => EvalProtocol::default().prompts,
        };
        let classes = self
            .classes
            .iter()
            .map(|c| ClassSpec {
                name: c.name.clone(),
                checkpoint: resolve(base, &c.checkpoint),
                references: resolve(base, &c.references),
            })
            .collect();
        let protocol = EvalProtocol {
            prompts,
            images_per_prompt: self.images_per_prompt,
            classes,
            seed: self.seed,
            steps: self.steps,
            guidance: self.guidance,
        };
        protocol.validate()?;
        Ok(protocol)
    }
}

pub fn cmd_evaluate(cfg: &EvaluateConfig, base: &Path, ctx: &CommandContext) -> Result<CommandReport> {
    let protocol = cfg.protocol(base)?;
    let backbone = ctx.backbone(&cfg.backbone)?;
    let out = resolve(base, &cfg.output_dir);
    let table = run_benchmark(&backbone, &protocol, &MetricEncoders::toy(cfg.encoder_seed), Some(&out))?;
    let notes = table.missing.iter().map(|(c, e)| format!("class {c} not evaluated: {e}")).collect();
    let summary = serde_json::to_value(&table)?;
    CommandReport::new("evaluate", &[out.join("scores.csv"), out.join("scores.json")], notes, summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_wrapped_error() {
        let e = Error::config("epochs", "must be >= 1").at_stage("train");
        assert_eq!(exit_code(&e), 2);
        let r = ErrorReport::from(&e);
        assert_eq!(r.error, "config_error");
        assert_eq!(r.field.as_deref(), Some("epochs"));
        assert_eq!(r.stage.as_deref(), Some("train"));
        let a = Error::Annotation { code: "point_out_of_bounds", message: String::new() };
        assert_eq!(exit_code(&a), 3);
        assert_eq!(ErrorReport::from(&a).error, "point_out_of_bounds");
    }
}
