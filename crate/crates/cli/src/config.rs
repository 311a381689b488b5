//! Flat `key = value` configuration files.
//!
//! `#` starts a comment, blank lines are ignored, every key may appear once.
//! Keys not consumed by the command are rejected with their line number.

use std::collections::BTreeMap;
use std::str::FromStr;

use ordchange_core::datagen::GenConfig;
use ordchange_core::losses::{LossConfig, LossKind};
use ordchange_core::model::{OptimizerKind, TrainConfig};
use ordchange_core::Task;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: usize,
}

#[derive(Debug, Clone)]
pub struct KvConfig {
    origin: String,
    text: String,
    entries: BTreeMap<String, Entry>,
    lines: BTreeMap<String, usize>,
}

impl KvConfig {
    pub fn parse(text: &str, origin: &str) -> CliResult<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("{origin}:{line}: expected `key = value`, got `{content}`")))?;
            let key = key.trim().to_string();
            if key.is_empty() || !key.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_') {
                return Err(CliError::config(format!("{origin}:{line}: invalid key `{key}`")));
            }
            if let Some(prev) = entries.get(&key) {
                let prev: &Entry = prev;
                return Err(CliError::config(format!(
                    "{origin}:{line}: field `{key}` already set on line {}",
                    prev.line
                )));
            }
            entries.insert(key, Entry { value: value.trim().to_string(), line });
        }
        let lines = entries.iter().map(|(k, e)| (k.clone(), e.line)).collect();
        Ok(Self { origin: origin.to_string(), text: text.to_string(), entries, lines })
    }

    pub fn empty() -> Self {
        Self::parse("", "<defaults>").expect("empty config parses")
    }

    pub fn load(path: &std::path::Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    fn field_error(&self, key: &str, msg: impl std::fmt::Display) -> CliError {
        match self.lines.get(key) {
            Some(line) => CliError::config(format!("{}:{line}: field `{key}`: {msg}", self.origin)),
            None => CliError::config(format!("{}: field `{key}`: {msg}", self.origin)),
        }
    }

    /// Re-attributes a validation message that names a field to that field's line.
    pub fn attribute(&self, err: CliError) -> CliError {
        match err {
            CliError::Config(msg) => {
                let named = self.lines.keys().filter(|k| msg.contains(k.as_str())).max_by_key(|k| k.len());
                match named {
                    Some(key) => self.field_error(key, msg),
                    None => CliError::Config(format!("{}: {msg}", self.origin)),
                }
            }
            other => other,
        }
    }

    fn take_raw(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|e| e.value)
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> CliResult<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.take_raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| self.field_error(key, format!("cannot parse `{v}`: {e}"))),
        }
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    /// Comma-separated list; an empty value is an empty list.
    pub fn take_list<T: FromStr>(&mut self, key: &str) -> CliResult<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        let Some(v) = self.take_raw(key) else { return Ok(None) };
        if v.is_empty() {
            return Ok(Some(Vec::new()));
        }
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse::<T>()
                    .map_err(|e| self.field_error(key, format!("cannot parse `{}`: {e}", s.trim())))
            })
            .collect::<CliResult<Vec<T>>>()
            .map(Some)
    }

    /// `lo..hi` (inclusive) or a single value.
    pub fn take_range(&mut self, key: &str) -> CliResult<Option<(usize, usize)>> {
        let Some(v) = self.take_raw(key) else { return Ok(None) };
        let parse = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| self.field_error(key, format!("cannot parse `{v}` as a range: {e}")))
        };
        match v.split_once("..") {
            Some((lo, hi)) => Ok(Some((parse(lo)?, parse(hi)?))),
            None => {
                let n = parse(&v)?;
                Ok(Some((n, n)))
            }
        }
    }

    pub fn take_bool(&mut self, key: &str, default: bool) -> CliResult<bool> {
        match self.take_raw(key).as_deref() {
            None => Ok(default),
            Some("true" | "yes" | "1") => Ok(true),
            Some("false" | "no" | "0") => Ok(false),
            Some(v) => Err(self.field_error(key, format!("expected true or false, got `{v}`"))),
        }
    }

    /// Fails on any key that no consumer took.
    pub fn finish(self) -> CliResult<()> {
        match self.entries.iter().min_by_key(|(_, e)| e.line) {
            None => Ok(()),
            Some((key, e)) => Err(CliError::config(format!("{}:{}: unknown field `{key}`", self.origin, e.line))),
        }
    }
}

fn parse_task(cfg: &mut KvConfig, default: Task) -> CliResult<Task> {
    match cfg.take_raw("task") {
        None => Ok(default),
        Some(v) => v.parse().map_err(|e| cfg.field_error("task", e)),
    }
}

/// Generator settings. `task` and `seed` may be overridden on the command line.
pub fn gen_config(mut cfg: KvConfig, task: Option<Task>, seed: Option<u64>) -> CliResult<GenConfig> {
    let file_task = parse_task(&mut cfg, Task::T2)?;
    let task = task.unwrap_or(file_task);
    let mut g = GenConfig::new(task);
    g.seed = cfg.take_or("seed", g.seed)?;
    g.n_patients = cfg.take_or("n_patients", g.n_patients)?;
    g.visits_per_patient = cfg.take_range("visits_per_patient")?.unwrap_or(g.visits_per_patient);
    g.bscans_per_volume = cfg.take_range("bscans_per_volume")?.unwrap_or(g.bscans_per_volume);
    g.feature_dim = cfg.take_or("feature_dim", g.feature_dim)?;
    g.class_ratios = cfg.take_list("class_ratios")?.unwrap_or(g.class_ratios);
    g.ordinal_direction = cfg.take_list("ordinal_direction")?.or(g.ordinal_direction);
    g.step_size = cfg.take_or("step_size", g.step_size)?;
    g.noise_sigma = cfg.take_or("noise_sigma", g.noise_sigma)?;
    g.patient_sigma = cfg.take_or("patient_sigma", g.patient_sigma)?;
    g.other_rate = cfg.take_or("other_rate", g.other_rate)?;
    if let Some(s) = seed {
        g.seed = s;
    }
    let checked = g.validate().map_err(|e| cfg.attribute(e.into()));
    cfg.finish()?;
    checked?;
    Ok(g)
}

/// Everything `train` needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub train: TrainConfig,
    pub encoder_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub dropout: f64,
    pub folds: usize,
    /// Fraction of patients held out for validation when `folds < 2`.
    pub val_ratio: f64,
}

pub fn train_settings(
    mut cfg: KvConfig,
    loss: Option<LossKind>,
    seed: Option<u64>,
    folds: Option<usize>,
) -> CliResult<TrainSettings> {
    let mut t = TrainConfig::default();
    t.seed = cfg.take_or("seed", t.seed)?;
    t.epochs = cfg.take_or("epochs", t.epochs)?;
    t.warmup_epochs = cfg.take_or("warmup_epochs", t.warmup_epochs)?;
    t.lr = cfg.take_or("lr", t.lr)?;
    t.lr_decay = cfg.take_or("lr_decay", t.lr_decay)?;
    t.batch_size = cfg.take_or("batch_size", t.batch_size)?;
    t.loss_kind = match cfg.take_raw("loss") {
        None => t.loss_kind,
        Some(v) => v.parse().map_err(|e| cfg.field_error("loss", e))?,
    };
    let d = LossConfig::default();
    t.loss = LossConfig {
        alpha: cfg.take_or("alpha", d.alpha)?,
        gamma: cfg.take_or("gamma", d.gamma)?,
        focal_weight: cfg.take_or("focal_weight", d.focal_weight)?,
        emd_weight: cfg.take_or("emd_weight", d.emd_weight)?,
        epsilon: cfg.take_or("epsilon", d.epsilon)?,
    };
    t.balanced_batches = cfg.take_bool("balanced_batches", t.balanced_batches)?;
    t.undersample_majority = match cfg.take_raw("undersample_majority").as_deref() {
        None | Some("none") => None,
        Some(v) => Some(v.parse().map_err(|e| cfg.field_error("undersample_majority", format!("`{v}`: {e}")))?),
    };
    let weight_decay = cfg.take_or("weight_decay", 0.0)?;
    t.optimizer = match cfg.take_raw("optimizer").as_deref() {
        None | Some("adam") => OptimizerKind::Adam {
            beta1: cfg.take_or("beta1", 0.9)?,
            beta2: cfg.take_or("beta2", 0.999)?,
            eps: cfg.take_or("adam_eps", 1e-8)?,
            weight_decay,
        },
        Some("sgd") => OptimizerKind::Sgd { weight_decay },
        Some(v) => return Err(cfg.field_error("optimizer", format!("expected adam or sgd, got `{v}`"))),
    };
    t.early_stop_patience = cfg.take_or("early_stop_patience", t.early_stop_patience)?;
    t.freeze_head_epochs = cfg.take_or("freeze_head_epochs", t.freeze_head_epochs)?;
    let encoder_hidden = cfg.take_list("encoder_hidden")?.unwrap_or_else(|| vec![32]);
    let head_hidden = cfg.take_list("head_hidden")?.unwrap_or_default();
    let dropout = cfg.take_or("dropout", 0.0)?;
    let mut folds_value = cfg.take_or("folds", 1usize)?;
    let val_ratio: f64 = cfg.take_or("val_ratio", 0.2)?;
    if let Some(l) = loss {
        t.loss_kind = l;
    }
    if let Some(s) = seed {
        t.seed = s;
    }
    if let Some(f) = folds {
        folds_value = f;
    }
    if folds_value == 0 {
        return Err(cfg.field_error("folds", "must be at least 1"));
    }
    if !(val_ratio > 0.0 && val_ratio < 1.0) {
        return Err(cfg.field_error("val_ratio", format!("must lie in (0, 1), got {val_ratio}")));
    }
    cfg.finish()?;
    Ok(TrainSettings { train: t, encoder_hidden, head_hidden, dropout, folds: folds_value, val_ratio })
}
