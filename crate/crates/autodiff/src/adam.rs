use crate::error::{Result, TensorError};
use crate::params::ParamStore;

/// Adam with bias correction. Moment buffers are created lazily on the
/// first step so the optimizer can be built before the parameters exist.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Number of completed steps.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update from the gradients held in `params`. Gradients
    /// are validated first; on a non-finite gradient nothing is modified.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if self.m.is_empty() {
            for (_, _, t) in params.iter() {
                self.m.push(vec![0.0; t.numel()]);
                self.v.push(vec![0.0; t.numel()]);
            }
        }
        if self.m.len() != params.len()
            || params.iter().zip(&self.m).any(|((_, _, t), m)| t.numel() != m.len())
        {
            return Err(TensorError::Config(
                "optimizer state does not match the parameter set".into(),
            ));
        }
        for (_, name, t) in params.iter() {
            if t.grad().is_some_and(|g| g.iter().any(|x| !x.is_finite())) {
                return Err(TensorError::NonFiniteGradient {
                    step: self.t + 1,
                    param: name.to_string(),
                });
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((_, tensor), m), v) in params.tensors_mut().zip(&mut self.m).zip(&mut self.v) {
            let (data, grad) = tensor.data_and_grad();
            let Some(grad) = grad else { continue };
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
