//! Finite-difference check of the training loss gradient with respect to
//! the trainable copy.

use p3s::autodiff::Tape;
use p3s::backbone::{randn, Backbone, ToyBackboneConfig};
use p3s::fixtures::two_blob_scene;
use p3s::injection::{joint_forward_on_tape, FeatureWeight, InjectionModel, SubjectSource, COPY_PREFIX};
use p3s::losses::{attention_consistency_layers_on_tape, AcPlacement};
use p3s::trainer::{StepDraws, TrainConfig, TrainSample, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn total_loss(bb: &Backbone, model: &InjectionModel, sample: &TrainSample, draws: &StepDraws) -> (f64, Vec<ndarray::Array2<f64>>) {
    let mut tape = Tape::new();
    let ab = bb.noise.alpha_bar(draws.t).unwrap();
    let x_t = sample.target().to_tokens() * ab.sqrt() + &draws.noise * (1.0 - ab).sqrt();
    let frozen = bb.denoiser.params.bind(&mut tape, false);
    let vars = model.params.bind(&mut tape, true);
    let x = tape.constant(x_t);
    let text = tape.constant(sample.text.tokens.clone());
    let latent = tape.constant(sample.subject.latent.to_tokens());
    let hidden = tape.constant(sample.subject.hidden());
    let inj = Some((SubjectSource::Raw { latent, hidden }, FeatureWeight::Value(1.0)));
    let joint = joint_forward_on_tape(&mut tape, &bb.denoiser, &frozen, model, &vars, x, draws.t as f64, text, inj).unwrap();
    let eps = tape.constant(draws.noise.clone());
    let l_ldm = tape.mse(joint.noise_pred, eps);
    let l_ac = attention_consistency_layers_on_tape(&mut tape, &joint.copy_maps, &joint.original_maps, &AcPlacement::LastLayer)
        .unwrap();
    let l_ac = tape.scale(l_ac, 0.1);
    let total = tape.add(l_ldm, l_ac);
    let grads = model.params.collect_grads(&vars, &tape.backward(total));
    (tape.scalar(total), grads)
}

fn main() -> p3s::Result<()> {
    let bb = Backbone::toy(&ToyBackboneConfig::default())?;
    let scene = two_blob_scene(16);
    let cfg = TrainConfig { class_noun: "blob".into(), ..TrainConfig::default() };
    let trainer = Trainer::new(cfg, bb.clone(), &[("ref".into(), scene.image, scene.annotation)])?;
    let mut model = trainer.model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ids: Vec<_> = model.zero_projection_ids().collect();
    for id in ids {
        let (r, c) = model.params.get(id).dim();
        *model.params.get_mut(id) = randn(&mut rng, r, c, 0.2);
    }
    let sample = trainer.samples[0].clone();
    let draws = StepDraws { dropped: false, t: 400, ..trainer.draws_for(&sample) };
    let (loss, grads) = total_loss(&bb, &model, &sample, &draws);
    println!("L_total = {loss:.6}");

    let copy: Vec<_> = model.params.ids().filter(|&id| model.params.name(id).starts_with(COPY_PREFIX)).collect();
    let h = 1e-5;
    for _ in 0..10 {
        let id = copy[rng.random_range(0..copy.len())];
        let (rows, cols) = model.params.get(id).dim();
        let (r, c) = (rng.random_range(0..rows), rng.random_range(0..cols));
        let shifted = |d: f64| {
            let mut m = model.clone();
            m.params.get_mut(id)[[r, c]] += d;
            total_loss(&bb, &m, &sample, &draws).0
        };
        let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
        let an = grads[id.0][[r, c]];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-12);
        println!("{:<28} [{r},{c}]  analytic {an:+.4e}  numeric {fd:+.4e}  rel {rel:.1e}", model.params.name(id));
    }
    Ok(())
}
