use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cumulative noise schedule `alpha_bar(t)` for `t = 0..=T`, with
/// `alpha_bar(0) = 1` (clean data) and the scaled-linear beta ramp used by
/// latent diffusion models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    pub fn scaled_linear(train_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if train_steps < 2 {
            return Err(Error::Parameter("need at least 2 training timesteps".into()));
        }
        let (s0, s1) = (beta_start.sqrt(), beta_end.sqrt());
        let mut alphas_cumprod = Vec::with_capacity(train_steps + 1);
        alphas_cumprod.push(1.0);
        let mut acc = 1.0;
        for i in 0..train_steps {
            let r = i as f64 / (train_steps - 1) as f64;
            let beta = (s0 + (s1 - s0) * r).powi(2);
            acc *= 1.0 - beta;
            alphas_cumprod.push(acc);
        }
        Ok(Self { alphas_cumprod })
    }

    /// Builds a schedule from explicit values; index 0 must be the clean end.
    pub fn from_alphas_cumprod(alphas_cumprod: Vec<f64>) -> Result<Self> {
        if alphas_cumprod.len() < 2 {
            return Err(Error::Parameter("schedule needs at least two entries".into()));
        }
        if alphas_cumprod.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::Parameter("alpha_bar values must lie in (0, 1]".into()));
        }
        Ok(Self { alphas_cumprod })
    }

    /// Number of training timesteps `T`.
    pub fn train_steps(&self) -> usize {
        self.alphas_cumprod.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alphas_cumprod
            .get(t)
            .copied()
            .ok_or_else(|| Error::Parameter(format!("timestep {t} outside 0..={}", self.train_steps())))
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::scaled_linear(1000, 0.00085, 0.012).expect("valid default schedule")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_is_decreasing_from_one() {
        let s = NoiseSchedule::default();
        assert_eq!(s.train_steps(), 1000);
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        let a = s.alphas_cumprod();
        assert!(a.windows(2).all(|w| w[1] < w[0]));
        // Stable Diffusion's final alpha_bar is about 0.0047.
        assert!((a[1000] - 0.0047).abs() < 5e-4);
        assert!(s.alpha_bar(1001).is_err());
    }
}
