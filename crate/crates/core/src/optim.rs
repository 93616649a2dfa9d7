//! Adam, AdamW and momentum SGD.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdamMode {
    Adam,
    /// Decoupled weight decay.
    AdamW,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub mode: AdamMode,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            betas: (0.9, 0.999),
            weight_decay: 0.0,
            mode: AdamMode::Adam,
        }
    }
}

/// First/second moment buffers for one parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::ZERO; len],
            v: vec![T::ZERO; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam/AdamW update.
///
/// In `Adam` mode a nonzero `weight_decay` is added to the gradient (L2); in
/// `AdamW` mode the parameters are shrunk by `lr * weight_decay` directly.
pub fn adam_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    lr: f64,
    hyper: &AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || state.m.len() != state.v.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "params {}, grads {}, state {}/{}",
                params.len(),
                grads.len(),
                state.m.len(),
                state.v.len()
            ),
        ));
    }
    if !(lr > 0.0) {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    state.t += 1;
    let (b1, b2) = hyper.betas;
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    let (b1t, b2t) = (T::from_f64(b1), T::from_f64(b2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
    let step = T::from_f64(lr / bc1);
    let inv_bc2 = T::from_f64(1.0 / bc2);
    let eps = T::from_f64(ADAM_EPS);
    let wd = T::from_f64(hyper.weight_decay);
    let decay = T::from_f64(1.0 - lr * hyper.weight_decay);
    for i in 0..params.len() {
        let mut g = grads[i];
        if hyper.mode == AdamMode::Adam && hyper.weight_decay != 0.0 {
            g += wd * params[i];
        }
        state.m[i] = b1t * state.m[i] + one_b1 * g;
        state.v[i] = b2t * state.v[i] + one_b2 * g * g;
        if hyper.mode == AdamMode::AdamW {
            params[i] *= decay;
        }
        params[i] -= step * state.m[i] / ((state.v[i] * inv_bc2).sqrt() + eps);
    }
    Ok(())
}

/// Update rule used by [`ParamOptimizer`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    Adam,
    AdamW,
    /// Heavy-ball SGD with L2 weight decay.
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    /// SGD momentum.
    pub momentum: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimKind::AdamW,
            betas: (0.9, 0.999),
            weight_decay: 0.01,
            momentum: 0.9,
        }
    }
}

/// One SGD step: `v = momentum * v + g + wd * p; p -= lr * v`.
pub fn sgd_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    velocity: &mut [T],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::shape(
            "sgd_step",
            format!("params {}, grads {}, velocity {}", params.len(), grads.len(), velocity.len()),
        ));
    }
    let (mu, wd, lr) = (T::from_f64(momentum), T::from_f64(weight_decay), T::from_f64(lr));
    for i in 0..params.len() {
        velocity[i] = mu * velocity[i] + grads[i] + wd * params[i];
        params[i] -= lr * velocity[i];
    }
    Ok(())
}

/// Optimizer state for a named set of parameter tensors.
#[derive(Clone, Debug)]
pub struct ParamOptimizer {
    pub config: OptimConfig,
    states: BTreeMap<String, AdamState<f32>>,
}

impl ParamOptimizer {
    pub fn new(config: OptimConfig) -> Self {
        Self {
            config,
            states: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, name: &str, param: &mut Tensor<f32>, grad: &Tensor<f32>, lr: f64) -> Result<()> {
        let state = self
            .states
            .entry(name.to_string())
            .or_insert_with(|| AdamState::new(param.numel()));
        let c = &self.config;
        match c.kind {
            OptimKind::Sgd => sgd_step(param.data_mut(), grad.data(), &mut state.m, lr, c.momentum, c.weight_decay),
            OptimKind::Adam | OptimKind::AdamW => {
                let hyper = AdamHyper {
                    betas: c.betas,
                    weight_decay: c.weight_decay,
                    mode: if c.kind == OptimKind::Adam {
                        AdamMode::Adam
                    } else {
                        AdamMode::AdamW
                    },
                };
                adam_step(param.data_mut(), grad.data(), state, lr, &hyper)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0f64, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, 0.1, &AdamHyper::default()).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_matches_scalar_oracle() {
        // t=1: m = (1-b1) g, v = (1-b2) g^2, m_hat = g, v_hat = g^2
        let (lr, b1, b2, g, p0) = (0.1f64, 0.5, 0.9, 1.0, 0.3);
        let m = (1.0 - b1) * g;
        let v = (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1);
        let v_hat = v / (1.0 - b2);
        let expected = p0 - lr * m_hat / (v_hat.sqrt() + ADAM_EPS);

        let mut p = vec![p0];
        let mut s = AdamState::new(1);
        let hyper = AdamHyper {
            betas: (b1, b2),
            ..Default::default()
        };
        adam_step(&mut p, &[g], &mut s, lr, &hyper).unwrap();
        assert!((p[0] - expected).abs() < 1e-15);
        assert!((p[0] - (p0 - 0.1)).abs() < 1e-7);
    }

    #[test]
    fn adamw_is_adam_plus_decoupled_decay() {
        let p0 = vec![0.7f64, -1.3, 2.0];
        let g = vec![0.2, -0.5, 1.0];
        let lr = 0.01;
        let mut adam = p0.clone();
        let mut s1 = AdamState::new(3);
        adam_step(&mut adam, &g, &mut s1, lr, &AdamHyper::default()).unwrap();
        let mut adamw = p0.clone();
        let mut s2 = AdamState::new(3);
        let hyper = AdamHyper {
            weight_decay: 0.01,
            mode: AdamMode::AdamW,
            ..Default::default()
        };
        adam_step(&mut adamw, &g, &mut s2, lr, &hyper).unwrap();
        for i in 0..3 {
            let want = adam[i] - lr * 0.01 * p0[i];
            assert!((adamw[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn sgd_matches_hand_evaluation() {
        let mut p = vec![1.0f64];
        let mut v = vec![0.0];
        sgd_step(&mut p, &[0.5], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((p[0] - 0.95).abs() < 1e-15);
        sgd_step(&mut p, &[0.5], &mut v, 0.1, 0.9, 0.0).unwrap();
        // v = 0.9 * 0.5 + 0.5
        assert!((p[0] - (0.95 - 0.095)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![0.0f32; 3];
        let mut s = AdamState::new(3);
        assert!(adam_step(&mut p, &[0.0; 2], &mut s, 0.1, &AdamHyper::default()).is_err());
        let mut s2 = AdamState::new(2);
        assert!(adam_step(&mut p, &[0.0; 3], &mut s2, 0.1, &AdamHyper::default()).is_err());
    }
}
