use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    backward, forward_input, init_model, make_batches, lr_schedule, Architecture, BatchConfig,
    Mode, ModelInput, ModelParams, Optimizer, OptimizerKind, ScheduleConfig,
};
use crate::confusion::confusion_from_predictions;
use crate::error::{config, Error, NonFiniteLoss, Result};
use crate::losses::{loss_gradient, LossConfig, LossKind};
use crate::metrics::MetricReport;
use crate::types::{softmax, ProbVector, RecordKey, Task};

/// A labelled sample the trainer can consume.
pub trait Example {
    fn patient_id(&self) -> &str;
    fn target(&self) -> usize;
    fn input(&self) -> ModelInput<'_>;
    fn key(&self) -> RecordKey;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr: f64,
    /// Per-epoch multiplicative decay after warm-up.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_kind: LossKind,
    pub loss: LossConfig,
    pub balanced_batches: bool,
    pub undersample_majority: Option<f64>,
    pub optimizer: OptimizerKind,
    /// Epochs without a new best validation average before stopping; 0 disables.
    pub early_stop_patience: usize,
    /// Epochs during which the head receives no updates.
    pub freeze_head_epochs: usize,
    /// Selects the challenge-average rule used for model selection.
    pub task: Task,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            warmup_epochs: 5,
            lr: 1e-3,
            lr_decay: 0.97,
            batch_size: 32,
            seed: 0,
            loss_kind: LossKind::CrossEntropy,
            loss: LossConfig::default(),
            balanced_batches: false,
            undersample_majority: None,
            optimizer: OptimizerKind::adam(),
            early_stop_patience: 0,
            freeze_head_epochs: 0,
            task: Task::T2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(config("epochs must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return Err(config(format!("lr_decay must be > 0, got {}", self.lr_decay)));
        }
        if self.warmup_epochs > self.epochs {
            return Err(config("warmup_epochs cannot exceed epochs"));
        }
        if self.batch_size == 0 {
            return Err(config("batch_size must be positive"));
        }
        if self.balanced_batches && self.batch_size < num_classes {
            return Err(config(format!(
                "balanced batches need batch_size >= {num_classes}, got {}",
                self.batch_size
            )));
        }
        if let Some(r) = self.undersample_majority {
            if !(r > 0.0 && r.is_finite()) {
                return Err(config(format!("undersample_majority must be > 0, got {r}")));
            }
        }
        if self.loss_kind.uses_emd() && num_classes == 4 {
            return Err(config(
                "EMD-based losses need ordinal classes; the 4-class task includes Other, which has no rank",
            ));
        }
        self.loss.validate()?;
        self.optimizer.validate()
    }

    fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig { lr: self.lr, warmup_epochs: self.warmup_epochs, decay: self.lr_decay }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub lr: f64,
    pub val: MetricReport,
}

impl EpochRecord {
    pub fn val_average(&self) -> f64 {
        self.val.average.unwrap_or(f64::NEG_INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }
}

fn check_patient_disjoint<E: Example>(train: &[E], val: &[E]) -> Result<()> {
    let train_ids: BTreeSet<&str> = train.iter().map(Example::patient_id).collect();
    let shared: Vec<&str> = val
        .iter()
        .map(Example::patient_id)
        .filter(|p| train_ids.contains(p))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if !shared.is_empty() {
        return Err(Error::Precondition(format!(
            "patients appear in both train and validation splits: {}",
            shared.iter().take(10).copied().collect::<Vec<_>>().join(", ")
        )));
    }
    Ok(())
}

/// Metric report of `params` over labelled `records`.
pub fn evaluate<E: Example>(params: &ModelParams, records: &[E], task: Task) -> Result<MetricReport> {
    let preds = predict(params, records)?;
    let truth: Vec<usize> = records.iter().map(Example::target).collect();
    let pred: Vec<usize> = preds.iter().map(|(_, p)| p.argmax()).collect();
    let cm = confusion_from_predictions(&truth, &pred, params.num_classes())?;
    MetricReport::evaluate(&cm, task)
}

/// Mini-batch training with model selection on the validation challenge
/// average. Returns the parameters of the best epoch.
pub fn train<E: Example>(
    arch: &Architecture,
    train_set: &[E],
    val_set: &[E],
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    let num_classes = arch.num_classes;
    cfg.validate(num_classes)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Precondition("train and validation splits must be non-empty".into()));
    }
    check_patient_disjoint(train_set, val_set)?;
    let labels: Vec<usize> = train_set.iter().map(Example::target).collect();
    if let Some(bad) = labels.iter().chain(val_set.iter().map(|e| e.target()).collect::<Vec<_>>().iter()).find(|&&k| k >= num_classes) {
        return Err(Error::Data(format!("label {bad} out of range for {num_classes} classes")));
    }
    let targets: Vec<ProbVector> = (0..num_classes)
        .map(|k| ProbVector::one_hot(num_classes, k))
        .collect::<Result<_>>()?;

    let mut params = init_model(arch, cfg.seed)?;
    let mut optimizer = Optimizer::new(cfg.optimizer);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    batch_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(2);
    let batch_cfg = BatchConfig {
        batch_size: cfg.batch_size,
        balanced: cfg.balanced_batches,
        undersample_majority: cfg.undersample_majority,
    };
    let schedule = cfg.schedule();

    let mut history = TrainHistory { epochs: Vec::new(), best_epoch: 0 };
    let mut best_params = params.clone();
    let mut best_avg = f64::NEG_INFINITY;
    let mut since_best = 0;

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, &schedule);
        let batches = make_batches(&labels, num_classes, &batch_cfg, &mut batch_rng)?;
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (b, batch) in batches.iter().enumerate() {
            let mut grads = params.zero_grads();
            let mut batch_loss = 0.0;
            let mut last_components = Vec::new();
            for &i in batch {
                let example = &train_set[i];
                let (z, cache) = forward_input(&params, example.input(), Mode::Training(&mut dropout_rng))
                    .map_err(|e| match e {
                        Error::InvalidInput(m) if m.contains("not finite") => non_finite(epoch, b, f64::NAN, &[]),
                        e => e,
                    })?;
                let r = loss_gradient(cfg.loss_kind, &z, &targets[example.target()], &cfg.loss)?;
                if !r.value.is_finite() {
                    return Err(non_finite(epoch, b, r.value, &r.components));
                }
                grads.accumulate(&backward(&params, &cache, &r.grad_logits)?);
                batch_loss += r.value;
                last_components = r.components;
            }
            grads.scale(1.0 / batch.len() as f64);
            if epoch < cfg.freeze_head_epochs {
                optimizer.step_encoder_only(&mut params, &grads, lr)?;
            } else {
                optimizer.step(&mut params, &grads, lr)?;
            }
            if !params.is_finite() {
                return Err(non_finite(epoch, b, batch_loss / batch.len() as f64, &last_components));
            }
            loss_sum += batch_loss;
            seen += batch.len();
        }

        let val = evaluate(&params, val_set, cfg.task)?;
        let record = EpochRecord { epoch, train_loss: loss_sum / seen.max(1) as f64, lr, val };
        let avg = record.val_average();
        history.epochs.push(record);
        if avg > best_avg {
            best_avg = avg;
            best_params = params.clone();
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.early_stop_patience > 0 && since_best >= cfg.early_stop_patience {
                break;
            }
        }
    }
    Ok((best_params, history))
}

fn non_finite(epoch: usize, batch: usize, loss: f64, components: &[(&'static str, f64)]) -> Error {
    Error::NonFinite(Box::new(NonFiniteLoss {
        epoch,
        batch,
        loss,
        components: components.iter().map(|(n, v)| (n.to_string(), *v)).collect(),
    }))
}

/// Softmax probabilities per record, dropout disabled, input order kept.
pub fn predict<E: Example>(params: &ModelParams, records: &[E]) -> Result<Vec<(RecordKey, ProbVector)>> {
    records
        .iter()
        .map(|r| {
            let (z, _) = forward_input(params, r.input(), Mode::Inference)?;
            Ok((r.key(), softmax(&z)))
        })
        .collect()
}

/// [`predict`] split across up to `threads` workers by contiguous record
/// ranges; output order matches the input.
pub fn predict_sharded<E: Example + Sync>(
    params: &ModelParams,
    records: &[E],
    threads: usize,
) -> Result<Vec<(RecordKey, ProbVector)>> {
    let threads = threads.max(1);
    if threads == 1 || records.len() < 2 * threads {
        return predict(params, records);
    }
    let chunk = records.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = records
            .chunks(chunk)
            .map(|part| s.spawn(move || predict(params, part)))
            .collect();
        let mut out = Vec::with_capacity(records.len());
        for h in handles {
            out.extend(h.join().expect("prediction worker panicked")?);
        }
        Ok(out)
    })
}
