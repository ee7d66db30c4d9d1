use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled: applied to the parameter directly, never fed into the moments.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam moments for an ordered list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One bias-corrected update of every parameter.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::LengthMismatch(self.first.len(), params.len().min(grads.len())));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.numel() != g.len() || p.numel() != m.len() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.first[i], &mut self.second[i], &grads[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *w);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = vec![Tensor::from_vec(vec![1.0, -2.0]).unwrap()];
        let mut adam = AdamState::new(AdamConfig::default(), &params);
        adam.step(&mut params, &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn descends_on_square() {
        let mut params = vec![Tensor::from_vec(vec![1.0]).unwrap()];
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut adam = AdamState::new(cfg, &params);
        let x = params[0].data()[0];
        adam.step(&mut params, &[vec![2.0 * x]]).unwrap();
        let x1 = params[0].data()[0];
        assert!(x1 * x1 < x * x);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // f(x, y) = (x - 1)^2 + 4 (y + 0.5)^2, minimum at (1, -0.5)
        let grad = |p: &[f64]| vec![2.0 * (p[0] - 1.0), 8.0 * (p[1] + 0.5)];
        let mut params = vec![Tensor::from_vec(vec![3.0, 2.0]).unwrap()];
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut adam = AdamState::new(cfg, &params);
        for step in 0..200 {
            if step == 150 {
                adam.set_lr(0.01);
            }
            let g = grad(params[0].data());
            adam.step(&mut params, &[g]).unwrap();
        }
        let g = grad(params[0].data());
        let norm = (g[0] * g[0] + g[1] * g[1]).sqrt();
        assert!(norm < 1e-3, "gradient norm {norm}");
    }

    #[test]
    fn shape_mismatch() {
        let mut params = vec![Tensor::from_vec(vec![1.0, 2.0]).unwrap()];
        let mut adam = AdamState::new(AdamConfig::default(), &params);
        assert!(adam.step(&mut params, &[vec![0.0]]).is_err());
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn decoupled_weight_decay_shrinks() {
        let mut params = vec![Tensor::from_vec(vec![2.0]).unwrap()];
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamConfig::default()
        };
        let mut adam = AdamState::new(cfg, &params);
        adam.step(&mut params, &[vec![0.0]]).unwrap();
        assert!((params[0].data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }
}
