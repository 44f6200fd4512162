//! Adaptive moment estimation over plain parameter matrices.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new<'a>(lr: f64, params: impl IntoIterator<Item = &'a Array2<f64>>) -> Self {
        let m: Vec<Array2<f64>> = params.into_iter().map(|p| Array2::zeros(p.dim())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, v: m.clone(), m }
    }

    /// One update. `params` and `grads` must follow the construction order.
    pub fn update<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Array2<f64>>, grads: &[Array2<f64>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Dimension(format!("{} gradients for {} parameters", grads.len(), self.m.len())));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut count = 0;
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.dim() != g.dim() {
                return Err(Error::Dimension(format!("parameter {:?} vs gradient {:?}", p.dim(), g.dim())));
            }
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= self.lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
            });
            count += 1;
        }
        if count != self.m.len() {
            return Err(Error::Dimension(format!("{count} parameters for {} moments", self.m.len())));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_each_entry_by_lr_against_the_gradient_sign() {
        let mut p = ndarray::array![[1.0, -2.0]];
        let mut opt = Adam::new(0.1, [&p]);
        opt.update([&mut p], &[ndarray::array![[3.0, -0.5]]]).unwrap();
        assert!((p[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p[[0, 1]] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ndarray::array![[5.0]];
        let mut opt = Adam::new(0.1, [&p]);
        for _ in 0..500 {
            let g = p.mapv(|x| 2.0 * (x - 1.0));
            opt.update([&mut p], &[g]).unwrap();
        }
        assert!((p[[0, 0]] - 1.0).abs() < 1e-2);
    }
}
