use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ordchange_core::confusion_from_predictions;
use ordchange_core::datagen::{gen_t1_pairs, gen_t2_volumes};
use ordchange_core::ensemble::{mean_ensemble, unanimity_ensemble, volume_consistency, PostprocessConfig, PredictionSet};
use ordchange_core::metrics::MetricReport;
use ordchange_core::model::{
    load_checkpoint, predict_sharded, save_checkpoint, train, Architecture, Example, ModelParams, Topology,
    TrainHistory,
};
use ordchange_core::losses::LossKind;
use ordchange_core::{ProbVector, RecordKey, Task};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{gen_config, train_settings, KvConfig, TrainSettings};
use crate::error::{CliError, CliResult};
use crate::gradcheck::{run_gradcheck, GradcheckOptions, GradcheckReport};
use crate::io::{
    read_dataset, read_predictions, read_truth, report_values, write_dataset, write_history, write_predictions,
    write_report, write_truth, Dataset, PredictionRow, REPORT_METRICS,
};
use crate::manifest::{beside, ManifestBuilder};

pub const THREADS_ENV: &str = "ORDCHANGE_THREADS";

/// Worker threads allowed by `ORDCHANGE_THREADS` (default 1).
pub fn worker_threads() -> CliResult<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::config(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
    }
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))
}

fn load_config(path: Option<&Path>) -> CliResult<KvConfig> {
    path.map_or_else(|| Ok(KvConfig::empty()), KvConfig::load)
}

pub struct GenOutput {
    pub dataset: PathBuf,
    pub truth: PathBuf,
    pub records: usize,
}

pub fn cmd_gen(config: Option<&Path>, task: Option<Task>, seed: Option<u64>, out_dir: &Path) -> CliResult<GenOutput> {
    let mut manifest = ManifestBuilder::start("gen");
    let cfg = load_config(config)?;
    manifest.config(cfg.text());
    let g = gen_config(cfg, task, seed)?;
    manifest.seed(g.seed);
    let data = match g.task {
        Task::T2 => Dataset::T2(gen_t2_volumes(&g)?),
        Task::T1 => Dataset::T1(gen_t1_pairs(&g)?),
    };
    ensure_dir(out_dir)?;
    let dataset = out_dir.join("dataset.csv");
    let truth = out_dir.join("truth.csv");
    write_dataset(&dataset, &data)?;
    write_truth(&truth, &data)?;
    if let Some(p) = config {
        manifest.input(p);
    }
    manifest.output(&dataset).output(&truth).write(out_dir, "dataset")?;
    Ok(GenOutput { dataset, truth, records: data.len() })
}

/// Patient ids in a seeded random order; fold `k` takes every `folds`-th one.
fn patient_order(data: &Dataset, seed: u64) -> Vec<String> {
    let ids: BTreeSet<String> = data.keys().into_iter().map(|k| k.patient_id).collect();
    let mut ids: Vec<String> = ids.into_iter().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ids
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub fold: Option<usize>,
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub best_epoch: usize,
    pub best_average: f64,
}

fn split<E: Example + Clone>(records: &[E], val_patients: &BTreeSet<&str>) -> (Vec<E>, Vec<E>) {
    records.iter().cloned().partition(|r| !val_patients.contains(r.patient_id()))
}

fn train_one(data: &Dataset, arch: &Architecture, s: &TrainSettings, val: &BTreeSet<&str>, seed: u64) -> CliResult<(ModelParams, TrainHistory)> {
    let mut cfg = s.train.clone();
    cfg.seed = seed;
    cfg.task = data.task();
    let out = match data {
        Dataset::T2(r) => {
            let (tr, va) = split(r, val);
            train(arch, &tr, &va, &cfg)
        }
        Dataset::T1(r) => {
            let (tr, va) = split(r, val);
            train(arch, &tr, &va, &cfg)
        }
    };
    Ok(out?)
}

pub fn architecture(data: &Dataset, s: &TrainSettings) -> Architecture {
    Architecture {
        topology: match data.task() {
            Task::T1 => Topology::Siamese,
            Task::T2 => Topology::Plain,
        },
        input_dim: data.feature_dim(),
        encoder_hidden: s.encoder_hidden.clone(),
        head_hidden: s.head_hidden.clone(),
        num_classes: data.task().num_classes(),
        dropout: s.dropout,
    }
}

pub fn cmd_train(
    data_path: &Path,
    config: Option<&Path>,
    loss: Option<LossKind>,
    seed: Option<u64>,
    folds: Option<usize>,
    out_dir: &Path,
) -> CliResult<Vec<FoldResult>> {
    let mut manifest = ManifestBuilder::start("train");
    let cfg = load_config(config)?;
    manifest.config(cfg.text());
    let settings = train_settings(cfg, loss, seed, folds)?;
    manifest.seed(settings.train.seed).input(data_path);
    if let Some(p) = config {
        manifest.input(p);
    }
    let data = read_dataset(data_path)?;
    let arch = architecture(&data, &settings);
    let patients = patient_order(&data, settings.train.seed);
    let base_seed = settings.train.seed;

    // (fold label, validation patients, model seed)
    let jobs: Vec<(Option<usize>, BTreeSet<&str>, u64)> = if settings.folds >= 2 {
        if patients.len() < settings.folds {
            return Err(CliError::config(format!(
                "{} folds requested but the dataset has only {} patients",
                settings.folds,
                patients.len()
            )));
        }
        (0..settings.folds)
            .map(|k| {
                let val = patients.iter().skip(k).step_by(settings.folds).map(String::as_str).collect();
                (Some(k), val, base_seed.wrapping_add(k as u64))
            })
            .collect()
    } else {
        let n_val = ((patients.len() as f64 * settings.val_ratio).round() as usize).clamp(1, patients.len().saturating_sub(1).max(1));
        if patients.len() < 2 {
            return Err(CliError::config("a validation split needs at least two patients"));
        }
        vec![(None, patients.iter().take(n_val).map(String::as_str).collect(), base_seed)]
    };

    let threads = worker_threads()?.min(jobs.len()).max(1);
    let mut results: Vec<Option<CliResult<(ModelParams, TrainHistory)>>> = (0..jobs.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunks: Vec<Vec<usize>> = (0..threads).map(|t| (t..jobs.len()).step_by(threads).collect()).collect();
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|idx| {
                let (data, arch, settings, jobs) = (&data, &arch, &settings, &jobs);
                scope.spawn(move || {
                    idx.into_iter()
                        .map(|i| (i, train_one(data, arch, settings, &jobs[i].1, jobs[i].2)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("training worker panicked") {
                results[i] = Some(r);
            }
        }
    });

    ensure_dir(out_dir)?;
    let mut out = Vec::new();
    for ((fold, _, _), result) in jobs.iter().zip(results) {
        let (params, history) = result.expect("every job ran")?;
        let suffix = fold.map_or(String::new(), |k| format!("_fold{k}"));
        let checkpoint = out_dir.join(format!("model{suffix}.ckpt"));
        let history_path = out_dir.join(format!("history{suffix}.csv"));
        save_checkpoint(&params, &checkpoint)?;
        write_history(&history_path, &history.epochs, history.best_epoch)?;
        manifest.output(&checkpoint).output(&history_path);
        out.push(FoldResult {
            fold: *fold,
            checkpoint,
            history: history_path,
            best_epoch: history.best_epoch,
            best_average: history.best().val_average(),
        });
    }
    manifest.write(out_dir, "train")?;
    Ok(out)
}

fn check_model_fits(params: &ModelParams, data: &Dataset) -> CliResult<()> {
    let topology = match data.task() {
        Task::T1 => Topology::Siamese,
        Task::T2 => Topology::Plain,
    };
    if params.topology() != topology || params.num_classes() != data.task().num_classes() || params.input_dim() != data.feature_dim() {
        return Err(CliError::config(format!(
            "checkpoint ({:?}, {} inputs, {} classes) does not fit a {} dataset with {} features",
            params.topology(),
            params.input_dim(),
            params.num_classes(),
            data.task(),
            data.feature_dim()
        )));
    }
    Ok(())
}

pub fn cmd_predict(checkpoint: &Path, data_path: &Path, out: &Path) -> CliResult<usize> {
    let mut manifest = ManifestBuilder::start("predict");
    let params = load_checkpoint(checkpoint)?;
    let data = read_dataset(data_path)?;
    check_model_fits(&params, &data)?;
    let threads = worker_threads()?;
    let preds = match &data {
        Dataset::T2(r) => predict_sharded(&params, r, threads)?,
        Dataset::T1(r) => predict_sharded(&params, r, threads)?,
    };
    let rows: Vec<PredictionRow> = preds
        .into_iter()
        .zip(data.labels())
        .map(|((key, probs), truth)| PredictionRow {
            key,
            true_label: Some(truth),
            pred_label: probs.argmax(),
            probs,
            final_label: None,
            postprocessed: None,
        })
        .collect();
    write_predictions(out, &rows)?;
    let (dir, stem) = beside(out);
    manifest.input(checkpoint).input(data_path).output(out).write(&dir, &stem)?;
    Ok(rows.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleMode {
    Mean,
    Unanimity,
}

pub fn cmd_ensemble(inputs: &[PathBuf], mode: EnsembleMode, postprocess: bool, out: &Path) -> CliResult<Vec<PredictionRow>> {
    let mut manifest = ManifestBuilder::start("ensemble");
    if inputs.is_empty() {
        return Err(CliError::config("no prediction files given"));
    }
    let files: Vec<Vec<PredictionRow>> = inputs.iter().map(|p| read_predictions(p)).collect::<CliResult<_>>()?;
    let widths: BTreeSet<usize> = files.iter().filter_map(|f| f.first().map(|r| r.probs.len())).collect();
    if widths.len() > 1 {
        return Err(CliError::config("prediction files mix t1 (4-class) and t2 (3-class) schemas"));
    }
    let sets: Vec<PredictionSet> = files
        .iter()
        .zip(inputs)
        .map(|(rows, p)| PredictionSet {
            model_id: p.display().to_string(),
            entries: rows.iter().map(|r| (r.key.clone(), r.probs.clone())).collect(),
        })
        .collect();
    let cfg = PostprocessConfig::default();
    let combined = match mode {
        EnsembleMode::Mean => mean_ensemble(&sets)?,
        EnsembleMode::Unanimity => unanimity_ensemble(&sets, &cfg)?,
    };
    let finals: Vec<usize> = if postprocess {
        let input: Vec<(RecordKey, usize, ProbVector)> =
            combined.iter().map(|e| (e.key.clone(), e.label, e.mean.clone())).collect();
        volume_consistency(&input, &cfg)?.labels
    } else {
        combined.iter().map(|e| e.label).collect()
    };
    let truth: BTreeMap<&str, Option<usize>> =
        files[0].iter().map(|r| (r.key.case_id.as_str(), r.true_label)).collect();
    let rows: Vec<PredictionRow> = combined
        .iter()
        .zip(finals)
        .map(|(e, fin)| PredictionRow {
            key: e.key.clone(),
            true_label: truth[e.key.case_id.as_str()],
            probs: e.mean.clone(),
            pred_label: e.mean.argmax(),
            final_label: Some(fin),
            postprocessed: Some(postprocess),
        })
        .collect();
    write_predictions(out, &rows)?;
    inputs.iter().for_each(|p| {
        manifest.input(p);
    });
    let (dir, stem) = beside(out);
    let mode_name = match mode {
        EnsembleMode::Mean => "mean",
        EnsembleMode::Unanimity => "unanimity",
    };
    manifest.config(&format!("mode={mode_name}\npostprocess={postprocess}\n")).output(out).write(&dir, &stem)?;
    Ok(rows)
}

pub fn cmd_eval(pred_path: &Path, truth_path: &Path, task: Task, out: Option<&Path>) -> CliResult<MetricReport> {
    let mut manifest = ManifestBuilder::start("eval");
    let preds = read_predictions(pred_path)?;
    let truth = read_truth(truth_path)?;
    let by_case: BTreeMap<&str, usize> = preds.iter().map(|r| (r.key.case_id.as_str(), r.label())).collect();
    if by_case.len() != preds.len() {
        return Err(CliError::Alignment(format!("{} has duplicate case ids", pred_path.display())));
    }
    let truth_cases: BTreeSet<&str> = truth.iter().map(|(k, _)| k.case_id.as_str()).collect();
    let mut missing: Vec<&str> = truth_cases.iter().filter(|c| !by_case.contains_key(*c)).copied().collect();
    missing.extend(by_case.keys().filter(|c| !truth_cases.contains(*c)));
    if !missing.is_empty() {
        return Err(CliError::Alignment(format!(
            "{} case ids appear in only one of the files: {}",
            missing.len(),
            missing.iter().take(10).copied().collect::<Vec<_>>().join(", ")
        )));
    }
    let c = task.num_classes();
    let y: Vec<usize> = truth.iter().map(|(_, l)| *l).collect();
    let p: Vec<usize> = truth.iter().map(|(k, _)| by_case[k.case_id.as_str()]).collect();
    if let Some(bad) = y.iter().chain(&p).find(|&&l| l >= c) {
        return Err(CliError::config(format!("label index {bad} is not valid for task {task}")));
    }
    let report = MetricReport::evaluate(&confusion_from_predictions(&y, &p, c)?, task)?;
    if let Some(out) = out {
        write_report(out, &report)?;
        let (dir, stem) = beside(out);
        manifest.input(pred_path).input(truth_path).output(out).config(&format!("task={task}\n")).write(&dir, &stem)?;
    }
    Ok(report)
}

pub fn format_report(r: &MetricReport) -> String {
    let mut s = format!("{:<18} {:>9}\n", "metric", r.task.map_or(String::new(), |t| t.to_string()));
    for (name, v) in REPORT_METRICS.iter().zip(report_values(r)) {
        let flag = if r.is_flagged(name) { "  (degenerate/skipped)" } else { "" };
        s.push_str(&format!("{name:<18} {:>9}{flag}\n", v.map_or("-".into(), |x| format!("{x:.6}"))));
    }
    if !r.flags.is_empty() {
        s.push_str(&format!("flags: {}\n", r.flags.join(", ")));
    }
    s
}

pub fn cmd_gradcheck(opts: &GradcheckOptions) -> CliResult<GradcheckReport> {
    let report = run_gradcheck(opts)?;
    if !report.passed() {
        let w = report.worst().expect("a failing report has rows");
        return Err(CliError::GradcheckFailed(format!(
            "{}\nworst: loss={} gamma={} target={} case={} max_rel_err={:.3e}",
            report.table(),
            w.loss,
            w.gamma,
            w.target.name(),
            w.worst_case,
            w.max_error
        )));
    }
    Ok(report)
}
