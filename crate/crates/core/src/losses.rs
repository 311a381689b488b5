//! Classification losses over a predicted distribution `p̂` and a target `y`,
//! with closed-form gradients with respect to the logits that produced `p̂`.
//!
//! * cross-entropy: `-Σ y_i log p̂_i`
//! * focal: `-α Σ y_i (1 - p̂_i)^γ log p̂_i`
//! * squared EMD: `sqrt( (1/C) Σ_i (CDF_y(i) - CDF_p̂(i))² )`
//! * combined: `focal_weight · focal + emd_weight · emd`
//!
//! Every logarithm is taken of `max(p̂_i, ε)`. Gradients are pushed through
//! the softmax Jacobian in the form `dL/dz_j = h_j - p̂_j Σ_i h_i` where
//! `h_i = p̂_i · dL/dp̂_i`, which never divides by a probability.

use std::fmt;
use std::str::FromStr;

use crate::error::{config, invalid, Error, Result};
use crate::types::{cdf, softmax, LogitVector, ProbVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    CrossEntropy,
    Focal,
    Emd,
    Combined,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::CrossEntropy,
        LossKind::Focal,
        LossKind::Emd,
        LossKind::Combined,
    ];

    /// Whether the loss needs an ordinal class axis.
    pub fn uses_emd(self) -> bool {
        matches!(self, LossKind::Emd | LossKind::Combined)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::CrossEntropy => "ce",
            LossKind::Focal => "focal",
            LossKind::Emd => "emd",
            LossKind::Combined => "combined",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ce" | "cross_entropy" | "cross-entropy" => Ok(LossKind::CrossEntropy),
            "focal" => Ok(LossKind::Focal),
            "emd" => Ok(LossKind::Emd),
            "combined" => Ok(LossKind::Combined),
            other => Err(config(format!(
                "unknown loss `{other}` (expected ce, focal, emd or combined)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub focal_weight: f64,
    pub emd_weight: f64,
    /// Lower clamp applied before every logarithm.
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            gamma: 2.0,
            focal_weight: 1.0,
            emd_weight: 1.0,
            epsilon: 1e-12,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(config(format!("gamma must be finite and >= 0, got {}", self.gamma)));
        }
        for (name, w) in [("focal_weight", self.focal_weight), ("emd_weight", self.emd_weight)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(config(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-3) {
            return Err(config(format!("epsilon must lie in (0, 1e-3], got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Loss value at `softmax(z)` and its gradient with respect to `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grad_logits: Vec<f64>,
    /// Named unweighted terms, for diagnostics.
    pub components: Vec<(&'static str, f64)>,
}

fn same_len(p_hat: &ProbVector, y: &ProbVector) -> Result<()> {
    if p_hat.len() != y.len() {
        return Err(invalid(format!(
            "prediction has {} classes but target has {}",
            p_hat.len(),
            y.len()
        )));
    }
    Ok(())
}

pub fn cross_entropy(p_hat: &ProbVector, y: &ProbVector, eps: f64) -> Result<f64> {
    same_len(p_hat, y)?;
    let value = p_hat
        .as_slice()
        .iter()
        .zip(y.as_slice())
        .filter(|(_, &yi)| yi != 0.0)
        .map(|(&p, &yi)| -yi * p.max(eps).ln())
        .sum::<f64>();
    Ok(value.max(0.0))
}

pub fn focal_loss(p_hat: &ProbVector, y: &ProbVector, cfg: &LossConfig) -> Result<f64> {
    same_len(p_hat, y)?;
    if cfg.alpha < 0.0 || cfg.gamma < 0.0 {
        return Err(config("focal loss needs alpha >= 0 and gamma >= 0"));
    }
    let value = p_hat
        .as_slice()
        .iter()
        .zip(y.as_slice())
        .filter(|(_, &yi)| yi != 0.0)
        .map(|(&p, &yi)| -cfg.alpha * yi * (1.0 - p).powf(cfg.gamma) * p.max(cfg.epsilon).ln())
        .sum::<f64>();
    Ok(value.max(0.0))
}

pub fn emd_loss(p_hat: &ProbVector, y: &ProbVector) -> Result<f64> {
    same_len(p_hat, y)?;
    let c = p_hat.len() as f64;
    let sq: f64 = cdf(y)
        .iter()
        .zip(cdf(p_hat))
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((sq / c).sqrt())
}

pub fn combined_loss(p_hat: &ProbVector, y: &ProbVector, cfg: &LossConfig) -> Result<f64> {
    let mut value = 0.0;
    if cfg.focal_weight != 0.0 {
        value += cfg.focal_weight * focal_loss(p_hat, y, cfg)?;
    }
    if cfg.emd_weight != 0.0 {
        value += cfg.emd_weight * emd_loss(p_hat, y)?;
    }
    Ok(value)
}

pub fn loss_value(kind: LossKind, p_hat: &ProbVector, y: &ProbVector, cfg: &LossConfig) -> Result<f64> {
    match kind {
        LossKind::CrossEntropy => cross_entropy(p_hat, y, cfg.epsilon),
        LossKind::Focal => focal_loss(p_hat, y, cfg),
        LossKind::Emd => emd_loss(p_hat, y),
        LossKind::Combined => combined_loss(p_hat, y, cfg),
    }
}

/// `p̂_i · dℓ/dp̂_i` for the focal loss (cross-entropy when γ = 0, α = 1).
fn focal_weighted_grad(p: &[f64], y: &[f64], alpha: f64, gamma: f64, eps: f64) -> Vec<f64> {
    p.iter()
        .zip(y)
        .map(|(&pi, &yi)| {
            if yi == 0.0 {
                return 0.0;
            }
            let log_term = if pi >= eps { (1.0 - pi).powf(gamma) } else { 0.0 };
            // d/dp of (1-p)^γ, times p log p; vanishes as p -> 1 for γ > 0.
            let focus_term = if gamma == 0.0 || pi >= 1.0 {
                0.0
            } else {
                -gamma * (1.0 - pi).powf(gamma - 1.0) * pi * pi.max(eps).ln()
            };
            -alpha * yi * (focus_term + log_term)
        })
        .collect()
}

/// `p̂_k · dℓ/dp̂_k` for the EMD loss, given its value. Zero at the minimum.
fn emd_weighted_grad(p_hat: &ProbVector, y: &ProbVector, value: f64) -> Vec<f64> {
    let c = p_hat.len();
    if value == 0.0 {
        return vec![0.0; c];
    }
    let cy = cdf(y);
    let cp = cdf(p_hat);
    // dℓ/dCDF_p̂(i), then suffix sums give dℓ/dp̂_k.
    let d_cdf: Vec<f64> = cy
        .iter()
        .zip(&cp)
        .map(|(a, b)| -(a - b) / (c as f64 * value))
        .collect();
    let mut out = vec![0.0; c];
    let mut acc = 0.0;
    for k in (0..c).rev() {
        acc += d_cdf[k];
        out[k] = p_hat[k] * acc;
    }
    out
}

fn through_softmax(p: &[f64], weighted: &[f64]) -> Vec<f64> {
    let total: f64 = weighted.iter().sum();
    weighted
        .iter()
        .zip(p)
        .map(|(h, pj)| h - pj * total)
        .collect()
}

/// Loss at `softmax(z)` and its exact gradient with respect to `z`.
pub fn loss_gradient(
    kind: LossKind,
    z: &LogitVector,
    y: &ProbVector,
    cfg: &LossConfig,
) -> Result<LossResult> {
    cfg.validate()?;
    if z.len() != y.len() {
        return Err(invalid(format!(
            "logits have {} classes but target has {}",
            z.len(),
            y.len()
        )));
    }
    let p_hat = softmax(z);
    let p = p_hat.as_slice();
    let ys = y.as_slice();
    let c = p.len();

    let mut weighted = vec![0.0; c];
    let mut value = 0.0;
    let mut components = Vec::with_capacity(2);

    let mut add = |scale: f64, h: Vec<f64>| {
        for (w, hi) in weighted.iter_mut().zip(h) {
            *w += scale * hi;
        }
    };

    match kind {
        LossKind::CrossEntropy => {
            let ce = cross_entropy(&p_hat, y, cfg.epsilon)?;
            value = ce;
            components.push(("ce", ce));
            add(1.0, focal_weighted_grad(p, ys, 1.0, 0.0, cfg.epsilon));
        }
        LossKind::Focal => {
            let f = focal_loss(&p_hat, y, cfg)?;
            value = f;
            components.push(("focal", f));
            add(1.0, focal_weighted_grad(p, ys, cfg.alpha, cfg.gamma, cfg.epsilon));
        }
        LossKind::Emd => {
            let e = emd_loss(&p_hat, y)?;
            value = e;
            components.push(("emd", e));
            add(1.0, emd_weighted_grad(&p_hat, y, e));
        }
        LossKind::Combined => {
            let f = focal_loss(&p_hat, y, cfg)?;
            let e = emd_loss(&p_hat, y)?;
            components.push(("focal", f));
            components.push(("emd", e));
            if cfg.focal_weight != 0.0 {
                value += cfg.focal_weight * f;
                add(
                    cfg.focal_weight,
                    focal_weighted_grad(p, ys, cfg.alpha, cfg.gamma, cfg.epsilon),
                );
            }
            if cfg.emd_weight != 0.0 {
                value += cfg.emd_weight * e;
                add(cfg.emd_weight, emd_weighted_grad(&p_hat, y, e));
            }
        }
    }

    Ok(LossResult {
        value,
        grad_logits: through_softmax(p, &weighted),
        components,
    })
}

/// Central-difference gradient of the loss with respect to the logits.
pub fn numeric_logit_gradient(
    kind: LossKind,
    z: &LogitVector,
    y: &ProbVector,
    cfg: &LossConfig,
    h: f64,
) -> Result<Vec<f64>> {
    let base = z.as_slice();
    let eval = |i: usize, delta: f64| -> Result<f64> {
        let mut shifted = base.to_vec();
        shifted[i] += delta;
        loss_value(kind, &softmax(&LogitVector::new(shifted)?), y, cfg)
    };
    (0..base.len())
        .map(|i| Ok((eval(i, h)? - eval(i, -h)?) / (2.0 * h)))
        .collect()
}

/// `max_i |a_i - n_i| / max(|a_i|, 1e-8)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(1e-8))
        .fold(0.0, f64::max)
}

/// Largest relative deviation between the analytic logit gradient and a
/// central finite difference with step `h`.
pub fn finite_difference_check(
    kind: LossKind,
    z: &LogitVector,
    y: &ProbVector,
    cfg: &LossConfig,
    h: f64,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(config(format!("finite-difference step {h} outside [1e-7, 1e-3]")));
    }
    let analytic = loss_gradient(kind, z, y, cfg)?.grad_logits;
    let numeric = numeric_logit_gradient(kind, z, y, cfg, h)?;
    Ok(max_relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    fn lv(v: &[f64]) -> LogitVector {
        LogitVector::new(v.to_vec()).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn cross_entropy_examples() {
        let eps = 1e-12;
        close(cross_entropy(&pv(&[0.0, 1.0, 0.0]), &pv(&[0.0, 1.0, 0.0]), eps).unwrap(), 0.0, 0.0);
        close(
            cross_entropy(&pv(&[0.2, 0.7, 0.1]), &pv(&[0.0, 1.0, 0.0]), eps).unwrap(),
            0.356675,
            1e-6,
        );
        close(
            cross_entropy(&pv(&[1.0 / 3.0; 3]), &pv(&[1.0, 0.0, 0.0]), eps).unwrap(),
            1.098612,
            1e-6,
        );
        assert!(cross_entropy(&pv(&[0.5, 0.5]), &pv(&[1.0, 0.0, 0.0]), eps).is_err());
    }

    #[test]
    fn focal_examples() {
        let y = pv(&[0.0, 1.0, 0.0]);
        let p = pv(&[0.2, 0.7, 0.1]);
        let ce_cfg = LossConfig { gamma: 0.0, ..LossConfig::default() };
        close(focal_loss(&p, &y, &ce_cfg).unwrap(), 0.356675, 1e-6);
        close(focal_loss(&p, &y, &LossConfig::default()).unwrap(), 0.032101, 1e-6);
        close(focal_loss(&y, &y, &LossConfig::default()).unwrap(), 0.0, 0.0);
        let bad = LossConfig { alpha: -1.0, ..LossConfig::default() };
        assert!(focal_loss(&p, &y, &bad).is_err());
    }

    #[test]
    fn emd_examples() {
        let y = pv(&[1.0, 0.0, 0.0]);
        close(emd_loss(&pv(&[0.2, 0.5, 0.3]), &pv(&[0.2, 0.5, 0.3])).unwrap(), 0.0, 0.0);
        close(emd_loss(&pv(&[0.5, 0.3, 0.2]), &y).unwrap(), 0.310913, 1e-6);
        close(emd_loss(&pv(&[0.7, 0.3, 0.0]), &y).unwrap(), 0.173205, 1e-6);
        close(emd_loss(&pv(&[0.7, 0.0, 0.3]), &y).unwrap(), 0.244949, 1e-6);
        assert!(emd_loss(&pv(&[0.5, 0.5]), &y).is_err());
    }

    #[test]
    fn combined_examples() {
        let y = pv(&[1.0, 0.0, 0.0]);
        close(combined_loss(&y, &y, &LossConfig::default()).unwrap(), 0.0, 0.0);
        close(
            combined_loss(&pv(&[0.5, 0.3, 0.2]), &y, &LossConfig::default()).unwrap(),
            0.484200,
            1e-6,
        );
        let ce_like = LossConfig { gamma: 0.0, emd_weight: 0.0, ..LossConfig::default() };
        let p = pv(&[0.2, 0.7, 0.1]);
        let y2 = pv(&[0.0, 1.0, 0.0]);
        assert_eq!(
            combined_loss(&p, &y2, &ce_like).unwrap(),
            cross_entropy(&p, &y2, ce_like.epsilon).unwrap()
        );
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { epsilon: 0.0, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig { epsilon: 0.01, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig { gamma: -0.5, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig { emd_weight: f64::NAN, ..LossConfig::default() }.validate().is_err());
        assert!("bogus".parse::<LossKind>().is_err());
        assert_eq!("combined".parse::<LossKind>().unwrap(), LossKind::Combined);
    }

    #[test]
    fn ce_gradient_is_p_minus_y() {
        let z = lv(&[0.3, -0.2, 0.1]);
        let y = pv(&[0.0, 1.0, 0.0]);
        let r = loss_gradient(LossKind::CrossEntropy, &z, &y, &LossConfig::default()).unwrap();
        let p = softmax(&z);
        for k in 0..3 {
            close(r.grad_logits[k], p[k] - y[k], 1e-15);
        }
    }

    #[test]
    fn gradient_vanishes_at_saturated_true_class() {
        let y = pv(&[0.0, 0.0, 1.0]);
        let z = lv(&[-20.0, -20.0, 20.0]);
        for kind in LossKind::ALL {
            let r = loss_gradient(kind, &z, &y, &LossConfig::default()).unwrap();
            let norm = r.grad_logits.iter().map(|g| g * g).sum::<f64>().sqrt();
            assert!(norm < 1e-6, "{kind}: {norm}");
        }
    }

    #[test]
    fn emd_gradient_zero_at_minimum() {
        // Soft target reachable exactly by softmax.
        let z = lv(&[0.0, 0.0, 0.0]);
        let y = pv(&[1.0 / 3.0; 3]);
        let r = loss_gradient(LossKind::Emd, &z, &y, &LossConfig::default()).unwrap();
        assert!(r.grad_logits.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn finite_difference_examples() {
        let cfg = LossConfig::default();
        let y = pv(&[0.0, 1.0, 0.0]);
        let err = finite_difference_check(LossKind::CrossEntropy, &lv(&[0.3, -0.2, 0.1]), &y, &cfg, 1e-5)
            .unwrap();
        assert!(err < 1e-5, "{err}");
        let err = finite_difference_check(LossKind::Combined, &lv(&[0.3, -0.2, 0.1]), &y, &cfg, 1e-5)
            .unwrap();
        assert!(err < 1e-5, "{err}");
        assert!(finite_difference_check(LossKind::Emd, &lv(&[0.0; 3]), &y, &cfg, 1e-2).is_err());
    }

    #[test]
    fn emd_random_one_hot_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = LossConfig::default();
        for _ in 0..100 {
            let z: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            let y = ProbVector::one_hot(3, rng.random_range(0..3)).unwrap();
            let err = finite_difference_check(LossKind::Emd, &lv(&z), &y, &cfg, 1e-5).unwrap();
            assert!(err < 1e-5, "z={z:?} err={err}");
        }
    }

    #[test]
    fn focal_gradient_with_fractional_gamma() {
        let cfg = LossConfig { gamma: 0.5, ..LossConfig::default() };
        let y = pv(&[0.0, 1.0, 0.0]);
        let err = finite_difference_check(LossKind::Focal, &lv(&[0.4, 1.2, -0.7]), &y, &cfg, 1e-5)
            .unwrap();
        assert!(err < 1e-5, "{err}");
        // p -> 1 must not produce NaN.
        let r = loss_gradient(LossKind::Focal, &lv(&[-800.0, 800.0, -800.0]), &y, &cfg).unwrap();
        assert!(r.grad_logits.iter().all(|g| g.is_finite()));
    }

    fn simplex3() -> impl Strategy<Value = ProbVector> {
        (0.001f64..1.0, 0.001f64..1.0, 0.001f64..1.0).prop_map(|(a, b, c)| {
            let s = a + b + c;
            ProbVector::new(vec![a / s, b / s, 1.0 - a / s - b / s]).unwrap_or_else(|_| {
                ProbVector::new(vec![a / s, b / s, c / s]).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn focal_gamma_zero_equals_ce(p in simplex3(), y in simplex3()) {
            let cfg = LossConfig { gamma: 0.0, alpha: 1.0, ..LossConfig::default() };
            let f = focal_loss(&p, &y, &cfg).unwrap();
            let ce = cross_entropy(&p, &y, cfg.epsilon).unwrap();
            prop_assert!((f - ce).abs() <= 1e-12);
        }

        #[test]
        fn focal_bounded_by_alpha_ce(p in simplex3(), y in simplex3(), gamma in 0.0f64..6.0, alpha in 0.0f64..3.0) {
            let cfg = LossConfig { gamma, alpha, ..LossConfig::default() };
            let f = focal_loss(&p, &y, &cfg).unwrap();
            let ce = cross_entropy(&p, &y, cfg.epsilon).unwrap();
            prop_assert!(f <= alpha * ce + 1e-12);
        }

        #[test]
        fn emd_symmetric_and_nonnegative(a in simplex3(), b in simplex3()) {
            let ab = emd_loss(&a, &b).unwrap();
            let ba = emd_loss(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-12);
            prop_assert!(ab >= 0.0);
            prop_assert!(emd_loss(&a, &a).unwrap() == 0.0);
            let differ = a.as_slice().iter().zip(b.as_slice()).any(|(x, y)| (x - y).abs() > 1e-9);
            if differ {
                prop_assert!(ab > 0.0);
            }
        }

        #[test]
        fn gradients_sum_to_zero(z in prop::collection::vec(-5.0f64..5.0, 3), k in 0usize..3) {
            let y = ProbVector::one_hot(3, k).unwrap();
            for kind in LossKind::ALL {
                let r = loss_gradient(kind, &LogitVector::new(z.clone()).unwrap(), &y, &LossConfig::default()).unwrap();
                prop_assert!(r.grad_logits.iter().sum::<f64>().abs() <= 1e-9);
            }
        }
    }
}
