//! How appended condition tokens change one self-attention layer.

use ndarray::Array2;
use p3s::backbone::randn;
use p3s::injection::{injected_self_attention, plain_self_attention, AttentionProjections};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn max_abs(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn main() -> p3s::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (tokens, ch) = (16, 8);
    let z = randn(&mut rng, tokens, ch, 1.0);
    let f = randn(&mut rng, tokens, ch, 1.0);
    let proj = AttentionProjections {
        wq: randn(&mut rng, ch, ch, 0.5),
        wk: randn(&mut rng, ch, ch, 0.5),
        wv: randn(&mut rng, ch, ch, 0.5),
        heads: 2,
    };
    let plain = plain_self_attention(&z, &proj);

    // Zero features still add keys, so the output moves even at weight 0.
    let zero = injected_self_attention(&z, &Array2::zeros((tokens, ch)), 0.2, &proj)?;
    println!("zero features:      max |out - plain| = {:.4}", max_abs(&(&zero - &plain)));
    for w in [0.25, 0.5, 1.0, 1.2] {
        for lambda in [0.0, 0.2] {
            let out = injected_self_attention(&z, &(&f * w), lambda, &proj)?;
            println!("w = {w:<4} lambda = {lambda}: max |out - plain| = {:.4}", max_abs(&(&out - &plain)));
        }
    }
    Ok(())
}
