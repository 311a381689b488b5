//! Finite-difference checks of the full backward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{backward, forward_input, Mode, ModelInput, ModelParams};
use crate::error::{config, Result};
use crate::losses::{loss_gradient, loss_value, max_relative_error, LossConfig, LossKind};
use crate::types::{softmax, ProbVector};

fn loss_at(
    params: &ModelParams,
    input: ModelInput<'_>,
    y: &ProbVector,
    kind: LossKind,
    cfg: &LossConfig,
    dropout_seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let (z, _) = forward_input(params, input, Mode::Training(&mut rng))?;
    loss_value(kind, &softmax(&z), y, cfg)
}

/// Analytic and central-difference gradients of every parameter, flattened
/// in encoder-then-head, weights-then-bias order. Dropout masks are replayed
/// from `dropout_seed` so that every evaluation sees the same network.
pub fn parameter_gradients(
    params: &ModelParams,
    input: ModelInput<'_>,
    y: &ProbVector,
    kind: LossKind,
    cfg: &LossConfig,
    h: f64,
    dropout_seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(config(format!("finite-difference step {h} outside [1e-7, 1e-3]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let (z, cache) = forward_input(params, input, Mode::Training(&mut rng))?;
    let r = loss_gradient(kind, &z, y, cfg)?;
    let grads = backward(params, &cache, &r.grad_logits)?;
    let analytic: Vec<f64> = grads
        .layers()
        .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
        .collect();

    let mut probe = params.clone();
    let mut numeric = Vec::with_capacity(analytic.len());
    let n_layers = params.encoder().len() + params.head().len();
    for layer in 0..n_layers {
        let sizes = {
            let l = probe.layers_mut().nth(layer).expect("layer index");
            [l.weights.len(), l.bias.len()]
        };
        for (tensor, &size) in sizes.iter().enumerate() {
            for i in 0..size {
                let mut shift = |delta: f64| -> Result<f64> {
                    let l = probe.layers_mut().nth(layer).expect("layer index");
                    let slot = if tensor == 0 { &mut l.weights[i] } else { &mut l.bias[i] };
                    let orig = *slot;
                    *slot = orig + delta;
                    let v = loss_at(&probe, input, y, kind, cfg, dropout_seed);
                    let l = probe.layers_mut().nth(layer).expect("layer index");
                    let slot = if tensor == 0 { &mut l.weights[i] } else { &mut l.bias[i] };
                    *slot = orig;
                    v
                };
                let plus = shift(h)?;
                let minus = shift(-h)?;
                numeric.push((plus - minus) / (2.0 * h));
            }
        }
    }
    Ok((analytic, numeric))
}

/// Largest relative deviation over all parameters.
pub fn network_gradient_check(
    params: &ModelParams,
    input: ModelInput<'_>,
    y: &ProbVector,
    kind: LossKind,
    cfg: &LossConfig,
    h: f64,
    dropout_seed: u64,
) -> Result<f64> {
    let (analytic, numeric) = parameter_gradients(params, input, y, kind, cfg, h, dropout_seed)?;
    Ok(max_relative_error(&analytic, &numeric))
}
