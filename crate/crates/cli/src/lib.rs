//! Command-line pipelines over `ordchange-core`: data generation, training,
//! prediction, ensembling, evaluation and gradient checking.

pub mod commands;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use ordchange_core::losses::LossKind;
use ordchange_core::Task;

use crate::commands::EnsembleMode;
use crate::error::CliResult;
use crate::gradcheck::GradcheckOptions;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TaskArg {
    T1,
    T2,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::T1 => Task::T1,
            TaskArg::T2 => Task::T2,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LossArg {
    Ce,
    Focal,
    Emd,
    Combined,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Ce => LossKind::CrossEntropy,
            LossArg::Focal => LossKind::Focal,
            LossArg::Emd => LossKind::Emd,
            LossArg::Combined => LossKind::Combined,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Mean,
    Unanimity,
}

#[derive(Debug, Parser)]
#[command(name = "ordchange", version, about = "Ordinal change classification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its ground truth.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model, or one per fold with --folds.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        loss: Option<LossArg>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        folds: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write class probabilities for every record of a dataset.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Combine prediction files and optionally enforce volume consistency.
    Ensemble {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "mean")]
        mode: ModeArg,
        #[arg(long)]
        postprocess: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, value_enum)]
        task: TaskArg,
        /// Report CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        /// Losses to check; all when omitted.
        #[arg(long = "loss", value_enum, value_delimiter = ',')]
        losses: Vec<LossArg>,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, hide = true)]
        inject_sign_error: Option<LossArg>,
    },
}

fn dispatch(cli: Cli) -> CliResult<String> {
    match cli.command {
        Command::Gen { config, seed, task, out } => {
            let g = commands::cmd_gen(config.as_deref(), task.map(Into::into), seed, &out)?;
            Ok(format!("wrote {} records to {}\n", g.records, g.dataset.display()))
        }
        Command::Train { data, config, loss, seed, folds, out } => {
            let results = commands::cmd_train(&data, config.as_deref(), loss.map(Into::into), seed, folds, &out)?;
            Ok(results
                .iter()
                .map(|r| {
                    let fold = r.fold.map_or(String::new(), |k| format!("fold {k}: "));
                    format!(
                        "{fold}best validation average {:.6} at epoch {} -> {}\n",
                        r.best_average,
                        r.best_epoch,
                        r.checkpoint.display()
                    )
                })
                .collect())
        }
        Command::Predict { checkpoint, data, out } => {
            let n = commands::cmd_predict(&checkpoint, &data, &out)?;
            Ok(format!("wrote {n} predictions to {}\n", out.display()))
        }
        Command::Ensemble { inputs, mode, postprocess, out } => {
            let mode = match mode {
                ModeArg::Mean => EnsembleMode::Mean,
                ModeArg::Unanimity => EnsembleMode::Unanimity,
            };
            let rows = commands::cmd_ensemble(&inputs, mode, postprocess, &out)?;
            Ok(format!("wrote {} rows to {}\n", rows.len(), out.display()))
        }
        Command::Eval { pred, truth, task, out } => {
            let report = commands::cmd_eval(&pred, &truth, task.into(), out.as_deref())?;
            Ok(commands::format_report(&report))
        }
        Command::Gradcheck { losses, trials, seed, inject_sign_error } => {
            let losses: Vec<LossKind> =
                if losses.is_empty() { LossKind::ALL.to_vec() } else { losses.into_iter().map(Into::into).collect() };
            let opts = GradcheckOptions { losses, trials, seed, inject_sign_error: inject_sign_error.map(Into::into) };
            let report = commands::cmd_gradcheck(&opts)?;
            Ok(format!("{}all {} cases within tolerance\n", report.table(), report.total_cases()))
        }
    }
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

