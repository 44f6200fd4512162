//! Scores two toy subjects with the benchmark protocol and prints the table.
//!
//! cargo run -p p3s --release --example evaluate -- [out_dir]

use std::path::PathBuf;

use p3s::backbone::{Backbone, ToyBackboneConfig};
use p3s::evaluator::{run_benchmark, ClassSpec, EvalProtocol, MetricEncoders};
use p3s::fixtures::random_two_blob_scene;
use p3s::trainer::{fine_tune, TrainConfig};

fn main() -> p3s::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| "target/examples/evaluate".into());
    let backbone = Backbone::toy(&ToyBackboneConfig::default())?;
    let mut classes = Vec::new();
    for (i, name) in ["blob", "block"].into_iter().enumerate() {
        let scene = random_two_blob_scene(16, 16, i as u64 + 3);
        let refs = out.join(name).join("refs");
        std::fs::create_dir_all(&refs).map_err(|e| p3s::Error::io(&refs, e))?;
        scene.image.save_png(refs.join("0.png"))?;
        let config = TrainConfig {
            learning_rate: 1e-3,
            epochs: 20,
            class_noun: name.into(),
            output_dir: out.join(name).join("run"),
            ..TrainConfig::default()
        };
        let trained = fine_tune(&config, backbone.clone(), &[(name.into(), scene.image, scene.annotation)])?;
        classes.push(ClassSpec { name: name.into(), checkpoint: trained.checkpoint_path, references: refs });
    }
    let protocol = EvalProtocol {
        prompts: vec!["a photo of {}".into(), "a painting of {}".into(), "a photo of {} at night".into()],
        images_per_prompt: 2,
        classes,
        steps: 25,
        ..EvalProtocol::default()
    };
    let table = run_benchmark(&backbone, &protocol, &MetricEncoders::toy(0), Some(&out.join("generations")))?;
    print!("{}", table.to_csv());
    table.save(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}
