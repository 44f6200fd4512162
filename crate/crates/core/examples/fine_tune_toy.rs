//! Fine-tunes the toy model on one annotated reference and writes a
//! checkpoint plus per-step metrics.
//!
//! cargo run -p p3s --example fine_tune_toy -- [out_dir] [epochs]

use std::path::PathBuf;

use p3s::backbone::{Backbone, ToyBackboneConfig};
use p3s::fixtures::two_blob_scene;
use p3s::trainer::{fine_tune_with_progress, TrainConfig};

fn main() -> p3s::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| "target/examples/fine_tune".into());
    let epochs = args.next().and_then(|s| s.parse().ok()).unwrap_or(50);

    let toy = ToyBackboneConfig { pretrain_steps: 1000, ..ToyBackboneConfig::default() };
    let backbone = Backbone::toy(&toy)?;
    let scene = two_blob_scene(toy.image_size);
    let config = TrainConfig {
        learning_rate: 3e-3,
        epochs,
        class_noun: "blob".into(),
        output_dir: out.clone(),
        checkpoint_every: 10,
        ..TrainConfig::default()
    };
    let refs = [("two_blob".to_string(), scene.image, scene.annotation)];
    let outcome = fine_tune_with_progress(&config, backbone, &refs, &mut |done, total| {
        if done % 10 == 0 || done == total {
            println!("epoch {done}/{total}");
        }
    })?;
    if let Some(r) = outcome.final_report {
        println!("last step: l_ldm {:.4}  l_ac {:.4}  total {:.4}", r.l_ldm, r.l_ac, r.total);
    }
    println!("checkpoint: {}", outcome.checkpoint_path.display());
    println!("metrics:    {}", outcome.metrics_path.display());
    Ok(())
}
