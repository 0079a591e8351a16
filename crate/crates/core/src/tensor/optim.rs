use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers for one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let m: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            config,
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

/// One Adam update of a flat parameter buffer. `step` is the 1-based step
/// index used for bias correction.
pub fn adam_step(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grad.len() != param.len() || m.len() != param.len() || v.len() != param.len() {
        return Err(Error::Dimension {
            op: "adam_step",
            lhs: vec![param.len()],
            rhs: vec![grad.len(), m.len(), v.len()],
        });
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        param[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over a whole store. Frozen parameters and parameters without a
/// gradient buffer are skipped.
#[derive(Debug, Clone)]
pub struct Adam {
    state: AdamState,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        Self {
            state: AdamState::new(store, config),
        }
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.state.m.len() {
            return Err(Error::Dimension {
                op: "Adam::step",
                lhs: vec![store.len()],
                rhs: vec![self.state.m.len()],
            });
        }
        self.state.step += 1;
        let step = self.state.step;
        let cfg = self.state.config;
        for (slot, (_, t)) in store.iter_mut().enumerate() {
            if !t.requires_grad {
                continue;
            }
            let Some(g) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            adam_step(
                t.data_mut(),
                &g,
                &mut self.state.m[slot],
                &mut self.state.v[slot],
                step,
                &cfg,
            )?;
        }
        Ok(())
    }
}

/// Scales all trainable gradients so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(stores: &mut [&mut ParamStore], max_norm: f64) -> f64 {
    let norm = stores.iter().map(|s| s.grad_sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for s in stores.iter_mut() {
            s.scale_grads(k);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![0.5, -1.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adam_step(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![0.5, -1.0]);
    }

    #[test]
    fn one_step_moves_by_lr() {
        // m̂ = 1, v̂ = 1 after bias correction, so Δθ = lr / (1 + ε)
        let mut p = vec![0.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        let cfg = AdamConfig::with_lr(0.1);
        adam_step(&mut p, &[1.0], &mut m, &mut v, 1, &cfg).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15, "{}", p[0]);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![0.0; 2];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        assert!(adam_step(&mut p, &[1.0], &mut m, &mut v, 1, &AdamConfig::default()).is_err());
    }

    #[test]
    fn store_step_skips_frozen() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::full(&[2], 1.0));
        s.insert("b", Tensor::full(&[2], 1.0));
        s.tensor_mut(1).requires_grad = false;
        let mut adam = Adam::new(&s, AdamConfig::with_lr(0.1));
        s.tensor_mut(0).accumulate_grad(&[1.0, 1.0]).unwrap();
        adam.step(&mut s).unwrap();
        assert!(s.tensor(0).data()[0] < 1.0);
        assert_eq!(s.tensor(1).data(), &[1.0, 1.0]);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[2]));
        s.tensor_mut(0).accumulate_grad(&[3.0, 4.0]).unwrap();
        let n = clip_grad_norm(&mut [&mut s], 1.0);
        assert_eq!(n, 5.0);
        assert!((s.grad_sq_norm().sqrt() - 1.0).abs() < 1e-12);
    }
}
