//! Timestep-dependent injection weight `w_t`.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape, Var};
use crate::backbone::randn;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleVariant {
    Fixed,
    /// `1 - alpha (t/T)^k + beta`: strong control late in denoising.
    #[default]
    Polynomial,
    /// `1 - alpha ((T-t)/T)^k + beta`.
    Increasing,
    /// Same curve as `Polynomial`.
    Decreasing,
    Learned,
}

/// Weights of the learned variant: `(1 + beta) * sigmoid(w2 . silu(w1 s + b1) + b2)`
/// with `s = t / T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedWeights {
    /// `1 x H`
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    /// `H x 1`
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

pub const LEARNED_HIDDEN: usize = 16;

impl LearnedWeights {
    /// Initialized so the weight starts close to 1 everywhere.
    pub fn init(beta: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = 1.0 / (1.0 + beta);
        let logit = (target / (1.0 - target)).ln();
        Self {
            w1: randn(&mut rng, 1, LEARNED_HIDDEN, 1.0),
            b1: randn(&mut rng, 1, LEARNED_HIDDEN, 0.5),
            w2: randn(&mut rng, LEARNED_HIDDEN, 1, 0.01),
            b2: Array2::from_elem((1, 1), logit),
        }
    }

    fn eval(&self, s: f64, beta: f64) -> f64 {
        let mut acc = self.b2[[0, 0]];
        for j in 0..self.w1.ncols() {
            let a = self.w1[[0, j]] * s + self.b1[[0, j]];
            acc += a * sigmoid(a) * self.w2[[j, 0]];
        }
        (1.0 + beta) * sigmoid(acc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightSchedule {
    pub variant: ScheduleVariant,
    pub alpha: f64,
    pub beta: f64,
    pub k: f64,
    pub fixed_value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learned: Option<LearnedWeights>,
}

impl Default for WeightSchedule {
    fn default() -> Self {
        Self { variant: ScheduleVariant::Polynomial, alpha: 0.5, beta: 0.2, k: 2.0, fixed_value: 1.0, learned: None }
    }
}

impl WeightSchedule {
    pub fn fixed(value: f64) -> Self {
        Self { variant: ScheduleVariant::Fixed, fixed_value: value, ..Self::default() }
    }

    pub fn with_variant(variant: ScheduleVariant) -> Self {
        Self { variant, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("k", self.k), ("fixed_value", self.fixed_value)] {
            if !v.is_finite() {
                return Err(Error::Parameter(format!("schedule {name} must be finite, got {v}")));
            }
        }
        if self.k < 0.0 {
            return Err(Error::Parameter(format!("schedule exponent k must be >= 0, got {}", self.k)));
        }
        if self.variant == ScheduleVariant::Learned && self.beta <= -1.0 {
            return Err(Error::Parameter("learned schedule needs beta > -1".into()));
        }
        Ok(())
    }
}

fn poly(alpha: f64, beta: f64, k: f64, s: f64) -> f64 {
    1.0 - alpha * s.powf(k) + beta
}

/// Injection weight at timestep `t` of `T`.
pub fn schedule_weight(t: f64, total: usize, schedule: &WeightSchedule) -> Result<f64> {
    if total == 0 {
        return Err(Error::Parameter("total timesteps T must be positive".into()));
    }
    let tt = total as f64;
    if !(0.0..=tt).contains(&t) {
        return Err(Error::Parameter(format!("timestep {t} outside [0, {total}]")));
    }
    let s = t / tt;
    let WeightSchedule { alpha, beta, k, .. } = *schedule;
    Ok(match schedule.variant {
        ScheduleVariant::Fixed => schedule.fixed_value,
        ScheduleVariant::Polynomial | ScheduleVariant::Decreasing => poly(alpha, beta, k, s),
        ScheduleVariant::Increasing => poly(alpha, beta, k, (tt - t) / tt),
        ScheduleVariant::Learned => schedule
            .learned
            .as_ref()
            .ok_or_else(|| Error::State("learned schedule has no trained weights".into()))?
            .eval(s, beta),
    })
}

/// Handles of a learned schedule bound on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LearnedVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl LearnedVars {
    pub fn bind(tape: &mut Tape, w: &LearnedWeights, trainable: bool) -> Self {
        let mut put = |m: &Array2<f64>| if trainable { tape.param(m.clone()) } else { tape.constant(m.clone()) };
        Self { w1: put(&w.w1), b1: put(&w.b1), w2: put(&w.w2), b2: put(&w.b2) }
    }

    pub fn vars(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    /// Differentiable weight as a `1 x 1` variable.
    pub fn weight(&self, tape: &mut Tape, s: f64, beta: f64) -> Var {
        let x = tape.constant(Array2::from_elem((1, 1), s));
        let h = tape.matmul(x, self.w1);
        let h = tape.add(h, self.b1);
        let h = tape.silu(h);
        let o = tape.matmul(h, self.w2);
        let o = tape.add(o, self.b2);
        let o = tape.sigmoid(o);
        tape.scale(o, 1.0 + beta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn learned_without_weights_is_a_state_error() {
        let s = WeightSchedule::with_variant(ScheduleVariant::Learned);
        assert!(matches!(schedule_weight(1.0, 10, &s), Err(Error::State(_))));
    }

    #[test]
    fn learned_tape_matches_plain_evaluation() {
        let w = LearnedWeights::init(0.2, 3);
        let s = WeightSchedule { learned: Some(w.clone()), ..WeightSchedule::with_variant(ScheduleVariant::Learned) };
        let mut tape = Tape::new();
        let vars = LearnedVars::bind(&mut tape, &w, true);
        for t in [0.0, 250.0, 999.0] {
            let v = vars.weight(&mut tape, t / 1000.0, 0.2);
            assert!((tape.scalar(v) - schedule_weight(t, 1000, &s).unwrap()).abs() < 1e-12);
            let plain = schedule_weight(t, 1000, &s).unwrap();
            assert!((0.0..=1.2).contains(&plain));
            assert!((plain - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn rejects_bad_timesteps() {
        let s = WeightSchedule::default();
        assert!(matches!(schedule_weight(0.0, 0, &s), Err(Error::Parameter(_))));
        assert!(schedule_weight(-1.0, 10, &s).is_err());
        assert!(schedule_weight(10.5, 10, &s).is_err());
    }

    proptest! {
        #[test]
        fn increasing_mirrors_polynomial(t in 0usize..=1000) {
            let inc = WeightSchedule::with_variant(ScheduleVariant::Increasing);
            let dec = WeightSchedule::default();
            let a = schedule_weight(t as f64, 1000, &inc).unwrap();
            let b = schedule_weight((1000 - t) as f64, 1000, &dec).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
