//! Latent subject fusion: the inpainted latent attends to the image
//! encoder's last hidden state and adds the result to itself.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{linear, randn, LatentImage, Linear, ParamId, ParamStore, PatchEncoding};
use crate::error::{Error, Result};

/// Parameter handles of the fusion block inside a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionLayout {
    /// Zero-initialized 1x1 projection applied to the latent before the query.
    pub zero: Linear,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub latent_channels: usize,
    pub hidden_dim: usize,
    pub key_dim: usize,
}

impl FusionLayout {
    pub fn register(
        store: &mut ParamStore,
        latent_channels: usize,
        hidden_dim: usize,
        key_dim: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = latent_channels;
        let zero = Linear {
            w: store.add("fusion.zero.w", Array2::zeros((c, c))),
            b: store.add("fusion.zero.b", Array2::zeros((1, c))),
        };
        let wq = store.add("fusion.q", randn(&mut rng, c, key_dim, 1.0 / (c as f64).sqrt()));
        let wk = store.add("fusion.k", randn(&mut rng, hidden_dim, key_dim, 1.0 / (hidden_dim as f64).sqrt()));
        let wv = store.add("fusion.v", randn(&mut rng, hidden_dim, c, 0.1 / (hidden_dim as f64).sqrt()));
        Self { zero, wq, wk, wv, latent_channels, hidden_dim, key_dim }
    }
}

/// `latent + softmax(Q K^T / sqrt(d)) V` with `Q = Z(latent) W_Q`,
/// `K = hidden W_K`, `V = hidden W_V`. `latent` is `(h*w) x C`, `hidden` is
/// `tokens x D`.
pub fn fuse_on_tape(tape: &mut Tape, vars: &[Var], layout: &FusionLayout, latent: Var, hidden: Var) -> Var {
    let z = linear(tape, vars, &layout.zero, latent);
    let q = tape.matmul(z, vars[layout.wq.0]);
    let k = tape.matmul(hidden, vars[layout.wk.0]);
    let v = tape.matmul(hidden, vars[layout.wv.0]);
    let kt = tape.transpose(k);
    let logits = tape.matmul(q, kt);
    let logits = tape.scale(logits, 1.0 / (layout.key_dim as f64).sqrt());
    let p = tape.softmax_rows(logits);
    let addend = tape.matmul(p, v);
    tape.add(latent, addend)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub annotation_id: String,
    pub inpaint_seed: u64,
}

/// The fused latent input of the trainable copy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectLatent {
    pub data: LatentImage,
    pub provenance: Provenance,
}

/// A standalone fusion block (its own parameter store).
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    pub store: ParamStore,
    pub layout: FusionLayout,
}

impl FusionWeights {
    pub fn new(latent_channels: usize, hidden_dim: usize, key_dim: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let layout = FusionLayout::register(&mut store, latent_channels, hidden_dim, key_dim, seed);
        Self { store, layout }
    }

    /// Zeroes the value projection so the attention addend vanishes.
    pub fn zero_value_path(&mut self) {
        self.store.get_mut(self.layout.wv).fill(0.0);
    }
}

pub fn check_fusion_inputs(layout: &FusionLayout, latent: &LatentImage, enc: &PatchEncoding) -> Result<()> {
    if latent.channels() != layout.latent_channels {
        return Err(Error::Dimension(format!(
            "latent has {} channels, fusion expects {}",
            latent.channels(),
            layout.latent_channels
        )));
    }
    if enc.embed_dim() != layout.hidden_dim {
        return Err(Error::Dimension(format!(
            "encoder width {}, fusion expects {}",
            enc.embed_dim(),
            layout.hidden_dim
        )));
    }
    Ok(())
}

/// Fuses an inpainted latent with the encoder's hidden state.
pub fn fuse_subject_latent(
    inpainted_latent: &LatentImage,
    clip_hidden: &PatchEncoding,
    store: &ParamStore,
    layout: &FusionLayout,
    provenance: Provenance,
) -> Result<SubjectLatent> {
    check_fusion_inputs(layout, inpainted_latent, clip_hidden)?;
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape, false);
    let latent = tape.constant(inpainted_latent.to_tokens());
    let hidden = tape.constant(clip_hidden.hidden_state());
    let out = fuse_on_tape(&mut tape, &vars, layout, latent, hidden);
    let data = LatentImage::from_tokens(tape.value(out), inpainted_latent.spatial(), inpainted_latent.scale)?;
    if data.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fused subject latent".into()));
    }
    Ok(SubjectLatent { data, provenance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array3};

    fn inputs() -> (LatentImage, PatchEncoding) {
        let latent = LatentImage {
            data: Array3::from_shape_fn((3, 2, 2), |(c, y, x)| 0.1 * c as f64 + 0.3 * y as f64 - 0.2 * x as f64),
            scale: 2,
        };
        let grid = Array3::from_shape_fn((2, 2, 4), |(r, c, d)| ((r * 7 + c * 3 + d) % 5) as f64 / 5.0);
        let enc = PatchEncoding::new(grid, Array1::from_vec(vec![0.5, 0.1, 0.0, 0.2]), (4, 4)).unwrap();
        (latent, enc)
    }

    fn prov() -> Provenance {
        Provenance { annotation_id: "a".into(), inpaint_seed: 0 }
    }

    #[test]
    fn zero_init_adds_the_mean_value_row() {
        let (latent, enc) = inputs();
        let w = FusionWeights::new(3, 4, 6, 1);
        let out = fuse_subject_latent(&latent, &enc, &w.store, &w.layout, prov()).unwrap();
        // Zero query means uniform attention: the addend is the mean of V rows.
        let v = enc.hidden_state().dot(w.store.get(w.layout.wv));
        let mean = v.mean_axis(ndarray::Axis(0)).unwrap();
        let expected = &latent.to_tokens() + &mean;
        let got = out.data.to_tokens();
        for (a, b) in got.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_value_path_returns_the_latent_bit_for_bit() {
        let (latent, enc) = inputs();
        let mut w = FusionWeights::new(3, 4, 6, 1);
        w.zero_value_path();
        let out = fuse_subject_latent(&latent, &enc, &w.store, &w.layout, prov()).unwrap();
        assert_eq!(out.data, latent);
        let again = fuse_subject_latent(&latent, &enc, &w.store, &w.layout, prov()).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let (latent, enc) = inputs();
        let w = FusionWeights::new(5, 4, 6, 1);
        assert!(matches!(
            fuse_subject_latent(&latent, &enc, &w.store, &w.layout, prov()),
            Err(Error::Dimension(_))
        ));
    }
}
