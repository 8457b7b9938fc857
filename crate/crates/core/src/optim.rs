//! First-order optimizers over a fixed list of parameter tensors.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Adam(AdamConfig),
    Sgd,
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam(AdamConfig::default())
    }
}

/// Optimizer state for one parameter set.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: T,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Optimizer {
            kind,
            lr: T::of(learning_rate),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update. `grads[i]` must match `params[i]` in shape.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!(
                "optimizer: {} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            p.same_shape(g, "optimizer")?;
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w = *w - self.lr * d;
                    }
                }
            }
            OptimizerKind::Adam(cfg) => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
                    self.v = self.m.clone();
                }
                let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
                let eps = T::of(cfg.eps);
                let t = self.step as i32;
                let c1 = T::one() - b1.powi(t);
                let c2 = T::one() - b2.powi(t);
                for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for (i, (w, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[i] = b1 * m[i] + (T::one() - b1) * d;
                        v[i] = b2 * v[i] + (T::one() - b2) * d * d;
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        *w = *w - self.lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_step_on_quadratic_matches_hand_computation() {
        // f(x) = (x - 3)^2 at x = 1: gradient -4.
        // m = 0.1 * -4 = -0.4, v = 0.001 * 16 = 0.016
        // m_hat = -4, v_hat = 16, update = lr * -4 / (4 + 1e-8)
        let mut x = Tensor::new(vec![1], vec![1.0f64]).unwrap();
        let g = Tensor::new(vec![1], vec![2.0 * (1.0 - 3.0)]).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::default(), 0.1);
        opt.step(&mut [&mut x], &[g]).unwrap();
        let expected = 1.0 - 0.1 * (-4.0) / (4.0 + 1e-8);
        assert!((x.data()[0] - expected).abs() < 1e-10);

        // second step at the new point
        let x1 = x.data()[0];
        let g1 = 2.0 * (x1 - 3.0);
        let m = 0.9 * -0.4 + 0.1 * g1;
        let v = 0.999 * 0.016 + 0.001 * g1 * g1;
        let m_hat = m / (1.0 - 0.9f64.powi(2));
        let v_hat = v / (1.0 - 0.999f64.powi(2));
        let expected = x1 - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        opt.step(&mut [&mut x], &[Tensor::new(vec![1], vec![g1]).unwrap()])
            .unwrap();
        assert!((x.data()[0] - expected).abs() < 1e-10);
    }

    #[test]
    fn zero_learning_rate_leaves_params_bitwise() {
        let mut x = Tensor::new(vec![3], vec![0.5f32, -1.25, 0.0]).unwrap();
        let before = x.clone();
        let mut opt = Optimizer::new(OptimizerKind::default(), 0.0);
        for _ in 0..5 {
            let g = Tensor::new(vec![3], vec![0.3f32, -7.0, 1e-3]).unwrap();
            opt.step(&mut [&mut x], &[g]).unwrap();
        }
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x), bits(&before));
    }

    #[test]
    fn sgd_step() {
        let mut x = Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.5);
        opt.step(
            &mut [&mut x],
            &[Tensor::new(vec![2], vec![2.0, -2.0]).unwrap()],
        )
        .unwrap();
        assert_eq!(x.data(), &[0.0, 3.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut x = Tensor::<f64>::zeros(vec![2]);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.5);
        assert!(opt.step(&mut [&mut x], &[Tensor::zeros(vec![3])]).is_err());
    }
}
