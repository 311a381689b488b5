//! SGD and Adam with decoupled weight decay (AdamW).
//!
//! ```text
//! θ ← θ - lr·λ·θ                      (decoupled decay, when λ > 0)
//! m ← β1·m + (1-β1)·g
//! v ← β2·v + (1-β2)·g²
//! θ ← θ - lr · (m / (1-β1^t)) / (sqrt(v / (1-β2^t)) + ε)
//! ```
//!
//! Step counts are kept per tensor so that a frozen head starts its bias
//! correction from scratch once it is released.

use super::{Dense, ModelParams, ParamGrads};
use crate::error::{config, invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd { weight_decay: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64, weight_decay: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            OptimizerKind::Sgd { weight_decay } if weight_decay < 0.0 || !weight_decay.is_finite() => {
                Err(config("weight_decay must be finite and >= 0"))
            }
            OptimizerKind::Adam { beta1, beta2, eps, weight_decay } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                    return Err(config("Adam betas must lie in [0, 1)"));
                }
                if eps.is_nan() || eps <= 0.0 {
                    return Err(config("Adam eps must be > 0"));
                }
                if weight_decay < 0.0 || !weight_decay.is_finite() {
                    return Err(config("weight_decay must be finite and >= 0"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Moments {
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state for one model.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    /// Per tensor, in encoder-then-head, weights-then-bias order.
    moments: Vec<Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self { kind, moments: Vec::new() }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Updates every tensor.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ParamGrads, lr: f64) -> Result<()> {
        self.apply(params, grads, lr, true)
    }

    /// Updates encoder tensors only; the head keeps its values and moments.
    pub fn step_encoder_only(&mut self, params: &mut ModelParams, grads: &ParamGrads, lr: f64) -> Result<()> {
        self.apply(params, grads, lr, false)
    }

    fn apply(&mut self, params: &mut ModelParams, grads: &ParamGrads, lr: f64, update_head: bool) -> Result<()> {
        check_shapes(params, grads)?;
        let n_encoder = params.encoder.len();
        let n_tensors = 2 * (n_encoder + params.head.len());
        if self.moments.is_empty() {
            self.moments = vec![Moments::default(); n_tensors];
        } else if self.moments.len() != n_tensors {
            return Err(invalid("optimizer state belongs to a different model"));
        }
        let kind = self.kind;
        let pairs = params.layers_mut().zip(grads.layers()).enumerate();
        for (layer_idx, (layer, grad)) in pairs {
            if !update_head && layer_idx >= n_encoder {
                continue;
            }
            let tensors = [(&mut layer.weights, &grad.weights), (&mut layer.bias, &grad.bias)];
            for (t, (values, g)) in tensors.into_iter().enumerate() {
                let state = &mut self.moments[2 * layer_idx + t];
                update_tensor(kind, state, values, g, lr);
            }
        }
        Ok(())
    }
}

fn update_tensor(kind: OptimizerKind, state: &mut Moments, values: &mut [f64], g: &[f64], lr: f64) {
    match kind {
        OptimizerKind::Sgd { weight_decay } => {
            for (p, gi) in values.iter_mut().zip(g) {
                *p -= lr * weight_decay * *p;
                *p -= lr * gi;
            }
        }
        OptimizerKind::Adam { beta1, beta2, eps, weight_decay } => {
            if state.m.is_empty() {
                state.m = vec![0.0; values.len()];
                state.v = vec![0.0; values.len()];
            }
            state.step += 1;
            let bc1 = 1.0 - beta1.powi(state.step as i32);
            let bc2 = 1.0 - beta2.powi(state.step as i32);
            for (((p, gi), m), v) in values.iter_mut().zip(g).zip(&mut state.m).zip(&mut state.v) {
                *p -= lr * weight_decay * *p;
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

fn check_shapes(params: &ModelParams, grads: &ParamGrads) -> Result<()> {
    let same = |a: &[Dense], b: &[Dense]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.same_shape(y));
    if !same(&params.encoder, &grads.encoder) || !same(&params.head, &grads.head) {
        return Err(invalid("gradient shapes do not match the parameters"));
    }
    Ok(())
}
