//! Randomised finite-difference checks of every loss, alone and through both
//! network topologies.

use ordchange_core::losses::{loss_gradient, max_relative_error, numeric_logit_gradient, LossConfig, LossKind};
use ordchange_core::model::{init_model, parameter_gradients, Architecture, ModelInput, Topology};
use ordchange_core::{LogitVector, ProbVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CliError, CliResult};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;
pub const FOCAL_GAMMAS: [f64; 4] = [0.0, 1.0, 2.0, 5.0];

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub losses: Vec<LossKind>,
    pub trials: usize,
    pub seed: u64,
    /// Negates the analytic gradient of this loss; used to prove the check bites.
    pub inject_sign_error: Option<LossKind>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Logits,
    Plain,
    Siamese,
}

impl Target {
    pub fn name(self) -> &'static str {
        match self {
            Target::Logits => "logits",
            Target::Plain => "plain",
            Target::Siamese => "siamese",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckRow {
    pub loss: LossKind,
    pub gamma: f64,
    pub target: Target,
    pub cases: usize,
    pub max_error: f64,
    pub worst_case: usize,
}

impl GradcheckRow {
    pub fn passed(&self) -> bool {
        self.max_error < TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub rows: Vec<GradcheckRow>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(GradcheckRow::passed)
    }

    pub fn total_cases(&self) -> usize {
        self.rows.iter().map(|r| r.cases).sum()
    }

    pub fn worst(&self) -> Option<&GradcheckRow> {
        self.rows.iter().max_by(|a, b| a.max_error.total_cmp(&b.max_error))
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<9} {:>5} {:<8} {:>5} {:>12}  status\n", "loss", "gamma", "target", "cases", "max_rel_err");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<9} {:>5} {:<8} {:>5} {:>12.3e}  {}\n",
                r.loss.to_string(),
                if r.loss == LossKind::Focal || r.loss == LossKind::Combined { format!("{}", r.gamma) } else { "-".into() },
                r.target.name(),
                r.cases,
                r.max_error,
                if r.passed() { "pass" } else { "FAIL" }
            ));
        }
        out
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn variants(losses: &[LossKind]) -> Vec<(LossKind, f64)> {
    let default_gamma = LossConfig::default().gamma;
    losses
        .iter()
        .flat_map(|&k| match k {
            LossKind::Focal => FOCAL_GAMMAS.iter().map(|&g| (k, g)).collect::<Vec<_>>(),
            _ => vec![(k, default_gamma)],
        })
        .collect()
}

fn one_case(
    kind: LossKind,
    cfg: &LossConfig,
    target: Target,
    case: usize,
    rng: &mut ChaCha8Rng,
) -> CliResult<(Vec<f64>, Vec<f64>)> {
    let net_seed: u64 = rng.random();
    let dropout = if case % 2 == 1 { 0.2 } else { 0.0 };
    match target {
        Target::Logits => {
            let c = rng.random_range(3..=4);
            let z = LogitVector::new(uniform(rng, c, 3.0))?;
            let y = ProbVector::one_hot(c, rng.random_range(0..c))?;
            let analytic = loss_gradient(kind, &z, &y, cfg)?.grad_logits;
            let numeric = numeric_logit_gradient(kind, &z, &y, cfg, STEP)?;
            Ok((analytic, numeric))
        }
        Target::Plain | Target::Siamese => {
            let siamese = target == Target::Siamese;
            let arch = Architecture {
                topology: if siamese { Topology::Siamese } else { Topology::Plain },
                input_dim: 4,
                encoder_hidden: if siamese { vec![6] } else { vec![8] },
                head_hidden: if siamese { vec![5] } else { vec![] },
                num_classes: 3,
                dropout,
            };
            let params = init_model(&arch, net_seed)?;
            let a = uniform(rng, 4, 2.0);
            let b = uniform(rng, 4, 2.0);
            let y = ProbVector::one_hot(3, rng.random_range(0..3))?;
            let input = if siamese { ModelInput::Pair(&a, &b) } else { ModelInput::Single(&a) };
            Ok(parameter_gradients(&params, input, &y, kind, cfg, STEP, net_seed)?)
        }
    }
}

pub fn run_gradcheck(opts: &GradcheckOptions) -> CliResult<GradcheckReport> {
    if opts.trials == 0 {
        return Err(CliError::config("trials must be at least 1"));
    }
    if opts.losses.is_empty() {
        return Err(CliError::config("no losses selected"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut rows = Vec::new();
    for (kind, gamma) in variants(&opts.losses) {
        let cfg = LossConfig { gamma, ..LossConfig::default() };
        for target in [Target::Logits, Target::Plain, Target::Siamese] {
            let mut row = GradcheckRow { loss: kind, gamma, target, cases: 0, max_error: 0.0, worst_case: 0 };
            for case in 0..opts.trials {
                let (mut analytic, numeric) = one_case(kind, &cfg, target, case, &mut rng)?;
                if opts.inject_sign_error == Some(kind) {
                    analytic.iter_mut().for_each(|g| *g = -*g);
                }
                let err = max_relative_error(&analytic, &numeric);
                if err > row.max_error || err.is_nan() {
                    row.max_error = if err.is_nan() { f64::INFINITY } else { err };
                    row.worst_case = case;
                }
                row.cases += 1;
            }
            rows.push(row);
        }
    }
    Ok(GradcheckReport { rows })
}
