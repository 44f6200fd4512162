//! Baseline versus fine-tuned sampling on the toy backbone.
//!
//! cargo run -p p3s --release --example generate -- [out_dir]

use std::path::PathBuf;

use p3s::backbone::{Backbone, FeatureEncoder, ToyBackboneConfig, ToyPatchEncoder};
use p3s::evaluator::cosine;
use p3s::fixtures::two_blob_scene;
use p3s::sampler::{generate, SampleRequest};
use p3s::trainer::{TrainConfig, Trainer};

fn main() -> p3s::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| "target/examples/generate".into());
    let toy = ToyBackboneConfig { pretrain_steps: 3000, ..ToyBackboneConfig::default() };
    let backbone = Backbone::toy(&toy)?;
    let scene = two_blob_scene(toy.image_size);

    let config = TrainConfig { learning_rate: 3e-3, epochs: 200, class_noun: "blob".into(), ..TrainConfig::default() };
    let mut trainer = Trainer::new(config, backbone.clone(), &[("two_blob".into(), scene.image.clone(), scene.annotation.clone())])?;
    for _ in 0..trainer.config.epochs {
        trainer.run_epoch()?;
    }
    let checkpoint = trainer.checkpoint();

    let encoder = ToyPatchEncoder::new(toy.patch_grid, toy.hist_bins, toy.seed);
    let a = encoder.embed_image(&scene.only_a())?;
    let b = encoder.embed_image(&scene.only_b())?;
    for seed in 0..4 {
        let request = SampleRequest { prompt: "a photo of [V] blob".into(), seed, ..SampleRequest::default() };
        for (label, ckpt) in [("baseline", None), ("tuned", Some(&checkpoint))] {
            let g = generate(&backbone, ckpt, &request)?;
            let f = encoder.embed_image(&g.image)?;
            println!("seed {seed} {label:<8} cos(A) {:.3}  cos(B) {:.3}", cosine(&f, &a)?, cosine(&f, &b)?);
            g.save(&out, &format!("{label}_{seed}"))?;
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}
