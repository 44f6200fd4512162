//! Subject fidelity and prompt alignment metrics, and the benchmark that
//! generates per-class image sets and scores them.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, FeatureEncoder, JointEncoder, ToyJointEncoder, ToyPatchEncoder, ToyTextEncoder};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::injection::Checkpoint;
use crate::sampler::{generate, SampleRequest};

pub const SCORE_SCHEMA_VERSION: u32 = 1;

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("embedding lengths {} vs {}", a.len(), b.len())));
    }
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean and population variance.
pub fn mean_and_variance(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Protocol("cannot summarize an empty score list".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var))
}

/// Per generated embedding: mean cosine to every reference embedding.
pub fn per_image_scores(generated: &[Array1<f64>], references: &[Array1<f64>]) -> Result<Vec<f64>> {
    if generated.is_empty() || references.is_empty() {
        return Err(Error::Protocol("image similarity needs non-empty generated and reference sets".into()));
    }
    generated
        .iter()
        .map(|g| {
            let mut acc = 0.0;
            for r in references {
                acc += cosine(g, r)?;
            }
            Ok(acc / references.len() as f64)
        })
        .collect()
}

fn embed_all(images: &[Image], encoder: &dyn FeatureEncoder) -> Result<Vec<Array1<f64>>> {
    images.iter().map(|i| encoder.embed_image(i)).collect()
}

/// `(mean, population variance)` of per-image reference similarity.
pub fn image_similarity(generated: &[Image], references: &[Image], encoder: &dyn FeatureEncoder) -> Result<(f64, f64)> {
    if generated.is_empty() || references.is_empty() {
        return Err(Error::Protocol("image similarity needs non-empty generated and reference sets".into()));
    }
    let g = embed_all(generated, encoder)?;
    let r = embed_all(references, encoder)?;
    mean_and_variance(&per_image_scores(&g, &r)?)
}

/// Mean cosine between each image and the prompt in a shared embedding space.
pub fn text_alignment(generated: &[Image], prompt: &str, encoder: &dyn JointEncoder) -> Result<f64> {
    if generated.is_empty() {
        return Err(Error::Protocol("text alignment needs at least one image".into()));
    }
    let p = encoder.embed_text(prompt)?;
    let mut acc = 0.0;
    for img in generated {
        acc += cosine(&encoder.embed_image(img)?, &p)?;
    }
    Ok(acc / generated.len() as f64)
}

/// One evaluated subject: its checkpoint and a directory of reference PNGs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub checkpoint: PathBuf,
    pub references: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalProtocol {
    /// Prompt templates; `{}` is replaced by `"<identifier> <class>"`.
    pub prompts: Vec<String>,
    pub images_per_prompt: usize,
    pub classes: Vec<ClassSpec>,
    /// Same base seed for every class; image `k` of a class uses `seed + k`.
    pub seed: u64,
    pub steps: usize,
    pub guidance: f64,
}

/// Generic placeholder prompts; real benchmarks pass their own list.
pub const DEFAULT_PROMPTS: [&str; 25] = [
    "a photo of {}",
    "a close-up photo of {}",
    "a photo of {} outdoors",
    "a photo of {} indoors",
    "a photo of {} at night",
    "a photo of {} in the morning light",
    "a photo of {} on a table",
    "a photo of {} on the floor",
    "a photo of {} on a shelf",
    "a photo of {} in a garden",
    "a photo of {} in a park",
    "a photo of {} in a kitchen",
    "a photo of {} in a living room",
    "a photo of {} near a window",
    "a photo of {} next to a chair",
    "a photo of {} in front of a wall",
    "a photo of {} under a lamp",
    "a photo of {} in the rain",
    "a photo of {} in the sun",
    "a painting of {}",
    "a sketch of {}",
    "a black and white photo of {}",
    "a blurry photo of {}",
    "a small {}",
    "a large {}",
];

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            prompts: DEFAULT_PROMPTS.iter().map(|s| s.to_string()).collect(),
            images_per_prompt: 4,
            classes: Vec::new(),
            seed: 0,
            steps: 50,
            guidance: 7.5,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.prompts.is_empty() {
            return Err(Error::config("prompts", "need at least one prompt"));
        }
        if let Some(p) = self.prompts.iter().find(|p| !p.contains("{}")) {
            return Err(Error::config("prompts", format!("prompt {p:?} has no {{}} placeholder")));
        }
        if self.images_per_prompt == 0 {
            return Err(Error::config("images_per_prompt", "must be >= 1"));
        }
        if self.classes.is_empty() {
            return Err(Error::config("classes", "no classes to evaluate"));
        }
        Ok(())
    }

    pub fn images_per_class(&self) -> usize {
        self.prompts.len() * self.images_per_prompt
    }
}

/// One prompt per line; blank lines and `#` comments are skipped.
pub fn load_prompts(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let prompts: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect();
    if prompts.is_empty() {
        return Err(Error::Protocol(format!("{} contains no prompts", path.display())));
    }
    Ok(prompts)
}

pub fn render_eval_prompt(template: &str, identifier: &str, class_noun: &str) -> String {
    template.replace("{}", &format!("{identifier} {class_noun}"))
}

/// Every PNG in a directory, sorted by file name.
pub fn load_reference_dir(dir: &Path) -> Result<Vec<Image>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Protocol(format!("no reference images in {}", dir.display())));
    }
    paths.iter().map(Image::load).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub clip_i: f64,
    pub clip_t: f64,
    pub dino: f64,
    pub clip_iv: f64,
    pub dino_v: f64,
}

impl Scores {
    pub fn is_finite(&self) -> bool {
        [self.clip_i, self.clip_t, self.dino, self.clip_iv, self.dino_v].iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub class: String,
    pub generations: usize,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub schema_version: u32,
    pub classes: Vec<ClassScores>,
    /// Unweighted mean over the classes that were evaluated.
    pub aggregate: Scores,
    /// Classes that could not be evaluated, with the reason.
    pub missing: Vec<(String, String)>,
}

impl ScoreTable {
    pub fn from_classes(classes: Vec<ClassScores>, missing: Vec<(String, String)>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Protocol("no class could be evaluated".into()));
        }
        let n = classes.len() as f64;
        let avg = |f: fn(&Scores) -> f64| classes.iter().map(|c| f(&c.scores)).sum::<f64>() / n;
        let aggregate = Scores {
            clip_i: avg(|s| s.clip_i),
            clip_t: avg(|s| s.clip_t),
            dino: avg(|s| s.dino),
            clip_iv: avg(|s| s.clip_iv),
            dino_v: avg(|s| s.dino_v),
        };
        Ok(Self { schema_version: SCORE_SCHEMA_VERSION, classes, aggregate, missing })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,generations,clip_i,clip_t,dino,clip_iv,dino_v\n");
        let row = |name: &str, n: usize, s: &Scores| {
            format!("{name},{n},{},{},{},{},{}\n", s.clip_i, s.clip_t, s.dino, s.clip_iv, s.dino_v)
        };
        for c in &self.classes {
            out += &row(&c.class, c.generations, &c.scores);
        }
        let total = self.classes.iter().map(|c| c.generations).sum();
        out += &row("aggregate", total, &self.aggregate);
        out
    }

    /// Writes `scores.csv` and `scores.json`.
    pub fn save(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("scores.csv");
        let json = dir.join("scores.json");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        std::fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        Ok((csv, json))
    }
}

/// The two metric encoders: a joint image/text space and a self-supervised
/// image feature space.
#[derive(Clone)]
pub struct MetricEncoders {
    pub clip: Arc<dyn JointEncoder>,
    pub dino: Arc<dyn FeatureEncoder>,
}

impl MetricEncoders {
    pub fn toy(seed: u64) -> Self {
        Self {
            clip: Arc::new(ToyJointEncoder {
                image: ToyPatchEncoder::new(4, 4, seed),
                text: ToyTextEncoder::new(32, 77, "", seed),
            }),
            dino: Arc::new(ToyPatchEncoder::new(8, 6, seed ^ 0xd1)),
        }
    }
}

/// Scores one class from already generated images, grouped by prompt.
pub fn score_class(
    name: &str,
    prompts: &[String],
    images: &[Vec<Image>],
    references: &[Image],
    encoders: &MetricEncoders,
) -> Result<ClassScores> {
    if prompts.len() != images.len() {
        return Err(Error::Dimension(format!("{} prompts for {} image groups", prompts.len(), images.len())));
    }
    let all: Vec<Image> = images.iter().flatten().cloned().collect();
    let (clip_i, clip_iv) = image_similarity(&all, references, encoders.clip.as_ref())?;
    let (dino, dino_v) = image_similarity(&all, references, encoders.dino.as_ref())?;
    let mut clip_t = 0.0;
    for (p, group) in prompts.iter().zip(images) {
        clip_t += text_alignment(group, p, encoders.clip.as_ref())?;
    }
    clip_t /= prompts.len() as f64;
    Ok(ClassScores {
        class: name.to_string(),
        generations: all.len(),
        scores: Scores { clip_i, clip_t, dino, clip_iv, dino_v },
    })
}

fn run_class(
    backbone: &Backbone,
    protocol: &EvalProtocol,
    class: &ClassSpec,
    encoders: &MetricEncoders,
    out_dir: Option<&Path>,
) -> Result<ClassScores> {
    let ckpt = Checkpoint::load(&class.checkpoint)?;
    let references = load_reference_dir(&class.references)?;
    let mut prompts = Vec::with_capacity(protocol.prompts.len());
    let mut groups = Vec::with_capacity(protocol.prompts.len());
    for (i, template) in protocol.prompts.iter().enumerate() {
        let prompt = render_eval_prompt(template, &ckpt.identifier, &ckpt.class_noun);
        let mut group = Vec::with_capacity(protocol.images_per_prompt);
        for j in 0..protocol.images_per_prompt {
            let k = (i * protocol.images_per_prompt + j) as u64;
            let request = SampleRequest {
                prompt: prompt.clone(),
                seed: protocol.seed.wrapping_add(k),
                steps: protocol.steps,
                guidance: protocol.guidance,
                ..SampleRequest::default()
            };
            let g = generate(backbone, Some(&ckpt), &request)?;
            if let Some(dir) = out_dir {
                g.save(&dir.join(&class.name), &format!("p{i:02}_{j:02}"))?;
            }
            group.push(g.image);
        }
        prompts.push(prompt);
        groups.push(group);
    }
    score_class(&class.name, &prompts, &groups, &references, encoders)
}

/// Generates and scores every class in parallel. Classes that fail are
/// listed in `missing`; the aggregate covers the rest.
pub fn run_benchmark(
    backbone: &Backbone,
    protocol: &EvalProtocol,
    encoders: &MetricEncoders,
    out_dir: Option<&Path>,
) -> Result<ScoreTable> {
    protocol.validate()?;
    let results: Vec<Result<ClassScores>> = std::thread::scope(|scope| {
        let handles: Vec<_> = protocol
            .classes
            .iter()
            .map(|c| scope.spawn(move || run_class(backbone, protocol, c, encoders, out_dir)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::State("evaluation thread panicked".into()))))
            .collect()
    });
    let mut classes = Vec::new();
    let mut missing = Vec::new();
    for (spec, r) in protocol.classes.iter().zip(results) {
        match r {
            Ok(s) => classes.push(s),
            Err(e) => {
                log::warn!("class {} skipped: {e}", spec.name);
                missing.push((spec.name.clone(), e.to_string()));
            }
        }
    }
    if classes.is_empty() {
        let reasons: Vec<String> = missing.iter().map(|(c, e)| format!("{c}: {e}")).collect();
        return Err(Error::Protocol(format!("no class could be evaluated ({})", reasons.join("; "))));
    }
    let table = ScoreTable::from_classes(classes, missing)?;
    if let Some(dir) = out_dir {
        table.save(dir)?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn hand_computed_two_image_case() {
        let generated = vec![array![1.0, 0.0], array![0.0, 1.0]];
        let references = vec![array![2.0, 0.0]];
        let scores = per_image_scores(&generated, &references).unwrap();
        assert_eq!(scores, vec![1.0, 0.0]);
        assert_eq!(mean_and_variance(&scores).unwrap(), (0.5, 0.25));
    }

    #[test]
    fn empty_sets_are_protocol_errors() {
        assert!(matches!(per_image_scores(&[], &[array![1.0]]), Err(Error::Protocol(_))));
        assert!(matches!(mean_and_variance(&[]), Err(Error::Protocol(_))));
    }

    #[test]
    fn csv_has_a_row_per_class_plus_aggregate() {
        let s = Scores { clip_i: 1.0, clip_t: 0.5, dino: 0.25, clip_iv: 0.0, dino_v: 0.0 };
        let t = ScoreTable::from_classes(
            vec![
                ClassScores { class: "a".into(), generations: 4, scores: s },
                ClassScores { class: "b".into(), generations: 4, scores: Scores { clip_i: 0.0, ..s } },
            ],
            vec![],
        )
        .unwrap();
        assert_eq!(t.aggregate.clip_i, 0.5);
        let csv = t.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().last().unwrap().starts_with("aggregate,8,0.5,"));
    }

    #[test]
    fn prompt_placeholder_is_required() {
        let p = EvalProtocol {
            prompts: vec!["no placeholder".into()],
            classes: vec![ClassSpec { name: "x".into(), checkpoint: "c".into(), references: "r".into() }],
            ..EvalProtocol::default()
        };
        assert!(matches!(p.validate(), Err(Error::Config { .. })));
        assert_eq!(EvalProtocol::default().images_per_class(), 100);
    }

    proptest! {
        #[test]
        fn constant_scores_have_zero_variance(v in -1.0f64..1.0, n in 1usize..50) {
            let (m, var) = mean_and_variance(&vec![v; n]).unwrap();
            prop_assert!((m - v).abs() < 1e-12);
            prop_assert!(var.abs() < 1e-24);
        }

        #[test]
        fn scores_are_permutation_invariant(
            vals in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 3), 2..8),
            rot in 0usize..8,
        ) {
            let gen: Vec<Array1<f64>> = vals.iter().map(|v| Array1::from(v.clone())).collect();
            let refs = vec![array![0.3, -0.2, 0.9], array![1.0, 0.0, 0.0]];
            let mut shuffled = gen.clone();
            let len = shuffled.len();
            shuffled.rotate_left(rot % len);
            let a = mean_and_variance(&per_image_scores(&gen, &refs).unwrap()).unwrap();
            let b = mean_and_variance(&per_image_scores(&shuffled, &refs).unwrap()).unwrap();
            prop_assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
            prop_assert!(a.1 >= 0.0);
        }
    }
}
