//! Denoising loss, attention consistency loss and the combined objective.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Cross-attention maps of the copy and the original at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMapPair {
    pub m_c: Array2<f64>,
    pub m_o: Array2<f64>,
    pub layer_id: usize,
}

/// Which cross-attention layers contribute to the consistency loss.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcPlacement {
    #[default]
    LastLayer,
    WholeNetwork,
    Layers(Vec<usize>),
}

impl AcPlacement {
    /// Layer indices for a network with `n` cross-attention layers.
    pub fn layers(&self, n: usize) -> Result<Vec<usize>> {
        let ids = match self {
            AcPlacement::LastLayer => vec![n.checked_sub(1).ok_or_else(|| Error::Dimension("no layers".into()))?],
            AcPlacement::WholeNetwork => (0..n).collect(),
            AcPlacement::Layers(ids) => ids.clone(),
        };
        if ids.is_empty() || ids.iter().any(|&i| i >= n) {
            return Err(Error::config("ac_layers", format!("{ids:?} invalid for {n} layers")));
        }
        Ok(ids)
    }
}

fn check_same(a: &Array2<f64>, b: &Array2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// `MSE(M_c, M_o) / avg` with `avg = (sum M_c + sum M_o) / 2`; zero when
/// `avg` is zero.
pub fn attention_consistency_loss(m_c: &Array2<f64>, m_o: &Array2<f64>) -> Result<f64> {
    check_same(m_c, m_o, "attention maps")?;
    let avg = (m_c.sum() + m_o.sum()) / 2.0;
    if avg == 0.0 {
        return Ok(0.0);
    }
    let mse = (m_c - m_o).mapv(|d| d * d).mean().unwrap_or(0.0);
    Ok(mse / avg)
}

/// Mean of the per-layer consistency losses.
pub fn attention_consistency_loss_layers(pairs: &[AttentionMapPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Dimension("no attention map pairs".into()));
    }
    let mut total = 0.0;
    for p in pairs {
        total += attention_consistency_loss(&p.m_c, &p.m_o)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Differentiable consistency loss for one layer.
pub fn attention_consistency_on_tape(tape: &mut Tape, m_c: Var, m_o: Var) -> Result<Var> {
    if tape.shape(m_c) != tape.shape(m_o) {
        return Err(Error::Dimension(format!(
            "attention maps: {:?} vs {:?}",
            tape.shape(m_c),
            tape.shape(m_o)
        )));
    }
    let sc = tape.sum(m_c);
    let so = tape.sum(m_o);
    let both = tape.add(sc, so);
    let avg = tape.scale(both, 0.5);
    if tape.scalar(avg) == 0.0 {
        return Ok(tape.constant(Array2::zeros((1, 1))));
    }
    let mse = tape.mse(m_c, m_o);
    Ok(tape.div(mse, avg))
}

/// Mean differentiable consistency loss over the selected layers.
pub fn attention_consistency_layers_on_tape(
    tape: &mut Tape,
    copy_maps: &[Var],
    original_maps: &[Var],
    placement: &AcPlacement,
) -> Result<Var> {
    if copy_maps.len() != original_maps.len() {
        return Err(Error::Dimension(format!(
            "{} copy maps vs {} original maps",
            copy_maps.len(),
            original_maps.len()
        )));
    }
    let ids = placement.layers(copy_maps.len())?;
    let mut acc: Option<Var> = None;
    for &i in &ids {
        let l = attention_consistency_on_tape(tape, copy_maps[i], original_maps[i])?;
        acc = Some(match acc {
            Some(a) => tape.add(a, l),
            None => l,
        });
    }
    let sum = acc.expect("placement yields at least one layer");
    Ok(if ids.len() == 1 { sum } else { tape.scale(sum, 1.0 / ids.len() as f64) })
}

/// Mean squared error between predicted and true noise.
pub fn denoising_loss(noise_pred: &Array2<f64>, noise_true: &Array2<f64>) -> Result<f64> {
    check_same(noise_pred, noise_true, "noise")?;
    Ok((noise_pred - noise_true).mapv(|d| d * d).mean().unwrap_or(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_ldm: f64,
    pub l_ac: f64,
    pub total: f64,
    pub gamma: f64,
}

pub fn total_loss(l_ldm: f64, l_ac: f64, gamma: f64) -> Result<LossReport> {
    for (name, v) in [("l_ldm", l_ldm), ("l_ac", l_ac), ("gamma", gamma)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {v}")));
        }
        if v < 0.0 {
            return Err(Error::Parameter(format!("{name} must be >= 0, got {v}")));
        }
    }
    Ok(LossReport { l_ldm, l_ac, total: l_ldm + gamma * l_ac, gamma })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn consistency_examples() {
        let m = array![[0.3, 0.7], [0.5, 0.5]];
        assert_eq!(attention_consistency_loss(&m, &m).unwrap(), 0.0);
        let l = attention_consistency_loss(&array![[1.0, 0.0]], &array![[0.0, 1.0]]).unwrap();
        assert!((l - 1.0).abs() < 1e-15);
        assert_eq!(attention_consistency_loss(&Array2::zeros((2, 2)), &Array2::zeros((2, 2))).unwrap(), 0.0);
        assert!(matches!(
            attention_consistency_loss(&Array2::zeros((2, 2)), &Array2::zeros((2, 3))),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn denoising_examples() {
        let t = array![[0.5, -1.0], [2.0, 0.0]];
        assert_eq!(denoising_loss(&t, &t).unwrap(), 0.0);
        assert!((denoising_loss(&(&t + 1.0), &t).unwrap() - 1.0).abs() < 1e-15);
        let m = t.mapv(|v| v * v).mean().unwrap();
        assert!((denoising_loss(&Array2::zeros((2, 2)), &t).unwrap() - m).abs() < 1e-15);
    }

    #[test]
    fn total_examples() {
        let r = total_loss(1.0, 1.0, 0.1).unwrap();
        assert!((r.total - 1.1).abs() < 1e-12);
        assert_eq!(total_loss(0.4, 3.0, 0.0).unwrap().total, 0.4);
        assert_eq!(total_loss(0.0, 0.0, 0.1).unwrap().total, 0.0);
        assert!(matches!(total_loss(-0.1, 0.0, 0.1), Err(Error::Parameter(_))));
        assert!(matches!(total_loss(0.1, 0.0, -0.1), Err(Error::Parameter(_))));
    }

    #[test]
    fn placement_layers() {
        assert_eq!(AcPlacement::LastLayer.layers(3).unwrap(), vec![2]);
        assert_eq!(AcPlacement::WholeNetwork.layers(3).unwrap(), vec![0, 1, 2]);
        assert!(AcPlacement::Layers(vec![5]).layers(3).is_err());
    }

    fn stochastic(vals: &[f64], rows: usize) -> Array2<f64> {
        let cols = vals.len() / rows;
        let mut m = Array2::from_shape_vec((rows, cols), vals.to_vec()).unwrap();
        for mut r in m.rows_mut() {
            let s = r.sum();
            r.mapv_inplace(|v| v / s);
        }
        m
    }

    proptest! {
        #[test]
        fn consistency_is_nonnegative_and_symmetric(
            a in proptest::collection::vec(0.01f64..1.0, 12),
            b in proptest::collection::vec(0.01f64..1.0, 12),
        ) {
            let (a, b) = (stochastic(&a, 3), stochastic(&b, 3));
            let ab = attention_consistency_loss(&a, &b).unwrap();
            let ba = attention_consistency_loss(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-15);
        }

        #[test]
        fn tape_matches_plain(
            a in proptest::collection::vec(0.01f64..1.0, 8),
            b in proptest::collection::vec(0.01f64..1.0, 8),
        ) {
            let (a, b) = (stochastic(&a, 2), stochastic(&b, 2));
            let mut tape = Tape::new();
            let va = tape.constant(a.clone());
            let vb = tape.constant(b.clone());
            let l = attention_consistency_on_tape(&mut tape, va, vb).unwrap();
            prop_assert!((tape.scalar(l) - attention_consistency_loss(&a, &b).unwrap()).abs() < 1e-15);
        }

        #[test]
        fn row_stochastic_normalizer_scales_quadratically(
            a in proptest::collection::vec(0.01f64..1.0, 12),
            b in proptest::collection::vec(0.01f64..1.0, 12),
            c in 0.0f64..1.0,
        ) {
            let (a, b) = (stochastic(&a, 3), stochastic(&b, 3));
            let mixed = &a + &((&b - &a) * c);
            let base = attention_consistency_loss(&a, &b).unwrap();
            let scaled = attention_consistency_loss(&a, &mixed).unwrap();
            prop_assert!((scaled - c * c * base).abs() < 1e-12);
        }
    }
}
