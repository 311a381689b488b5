//! CSV schemas and atomic file output.
//!
//! All files are UTF-8, comma separated, with a header row and LF endings.

use std::path::Path;

use ordchange_core::metrics::MetricReport;
use ordchange_core::model::EpochRecord;
use ordchange_core::{BscanRecord, ChangeClass, ClassLabel, PairLabel, PairRecord, ProbVector, RecordKey, Task};

use crate::error::{CliError, CliResult};

/// Writes through a sibling temporary file so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

fn csv_bytes(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> CliResult<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}

fn reader(path: &Path) -> CliResult<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .from_path(path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))
}

pub fn label_name(class: usize) -> CliResult<&'static str> {
    Ok(match ChangeClass::from_index(class)? {
        ChangeClass::Reduced => "reduced",
        ChangeClass::Stable => "stable",
        ChangeClass::Worsened => "worsened",
        ChangeClass::Other => "other",
    })
}

pub fn parse_label(s: &str) -> CliResult<ChangeClass> {
    match s.trim().to_ascii_lowercase().as_str() {
        "reduced" => Ok(ChangeClass::Reduced),
        "stable" => Ok(ChangeClass::Stable),
        "worsened" => Ok(ChangeClass::Worsened),
        "other" => Ok(ChangeClass::Other),
        v => Err(CliError::config(format!("unknown label `{v}`"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    T2(Vec<BscanRecord>),
    T1(Vec<PairRecord>),
}

impl Dataset {
    pub fn task(&self) -> Task {
        match self {
            Dataset::T1(_) => Task::T1,
            Dataset::T2(_) => Task::T2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::T1(r) => r.len(),
            Dataset::T2(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Dataset::T1(r) => r.first().map_or(0, |p| p.features_a.len()),
            Dataset::T2(r) => r.first().map_or(0, |b| b.features.len()),
        }
    }

    pub fn keys(&self) -> Vec<RecordKey> {
        match self {
            Dataset::T1(r) => r.iter().map(PairRecord::key).collect(),
            Dataset::T2(r) => r.iter().map(BscanRecord::key).collect(),
        }
    }

    pub fn labels(&self) -> Vec<usize> {
        match self {
            Dataset::T1(r) => r.iter().map(|p| p.label.index()).collect(),
            Dataset::T2(r) => r.iter().map(|b| b.label.index()).collect(),
        }
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn write_dataset(path: &Path, data: &Dataset) -> CliResult<()> {
    let d = data.feature_dim();
    let bytes = match data {
        Dataset::T2(recs) => {
            let mut header: Vec<String> =
                ["case_id", "patient_id", "visit_id", "volume_id", "bscan_index", "label"].map(String::from).to_vec();
            header.extend((0..d).map(|i| format!("f{i}")));
            let rows = recs
                .iter()
                .map(|r| {
                    let mut row = vec![
                        r.case_id(),
                        r.patient_id.clone(),
                        r.visit_id.clone(),
                        r.volume_id.clone(),
                        r.bscan_index.to_string(),
                        label_name(r.label.index())?.to_string(),
                    ];
                    row.extend(r.features.iter().map(|&v| fmt_f64(v)));
                    Ok(row)
                })
                .collect::<CliResult<Vec<_>>>()?;
            csv_bytes(&header, rows)?
        }
        Dataset::T1(recs) => {
            let mut header: Vec<String> =
                ["case_id", "patient_id", "volume_id", "bscan_index", "label"].map(String::from).to_vec();
            header.extend((0..d).map(|i| format!("a{i}")));
            header.extend((0..d).map(|i| format!("b{i}")));
            let rows = recs
                .iter()
                .map(|r| {
                    let label = match r.label {
                        PairLabel::Change(l) => label_name(l.index())?.to_string(),
                        PairLabel::Binary(changed) => return Err(CliError::config(format!(
                            "pair {} has a binary label ({changed}); only change labels can be written",
                            r.case_id
                        ))),
                    };
                    let mut row =
                        vec![r.case_id.clone(), r.patient_id.clone(), r.volume_id.clone(), r.bscan_index.to_string(), label];
                    row.extend(r.features_a.iter().chain(&r.features_b).map(|&v| fmt_f64(v)));
                    Ok(row)
                })
                .collect::<CliResult<Vec<_>>>()?;
            csv_bytes(&header, rows)?
        }
    };
    write_atomic(path, &bytes)
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str, line: u64) -> CliResult<T>
where
    T::Err: std::fmt::Display,
{
    s.trim().parse().map_err(|e| CliError::config(format!("row {line}: {what} `{s}`: {e}")))
}

pub fn read_dataset(path: &Path) -> CliResult<Dataset> {
    let mut rdr = reader(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    let col = |name: &str| header.iter().position(|h| h == name);
    let need = |name: &str| col(name).ok_or_else(|| CliError::config(format!("{}: missing column `{name}`", path.display())));
    let (case, patient, volume, bscan, label) =
        (need("case_id")?, need("patient_id")?, need("volume_id")?, need("bscan_index")?, need("label")?);
    let prefixed = |p: char| -> Vec<usize> {
        let mut cols: Vec<(usize, usize)> = header
            .iter()
            .enumerate()
            .filter_map(|(i, h)| h.strip_prefix(p).and_then(|n| n.parse().ok()).map(|n: usize| (n, i)))
            .collect();
        cols.sort_unstable();
        cols.into_iter().map(|(_, i)| i).collect()
    };
    let (f, a, b) = (prefixed('f'), prefixed('a'), prefixed('b'));
    let task = match (col("visit_id"), f.is_empty(), a.is_empty()) {
        (Some(_), false, true) => Task::T2,
        (None, true, false) if a.len() == b.len() => Task::T1,
        _ => return Err(CliError::config(format!("{}: header matches neither dataset schema", path.display()))),
    };
    let mut t1 = Vec::new();
    let mut t2 = Vec::new();
    for (n, row) in rdr.records().enumerate() {
        let row = row?;
        let line = n as u64 + 2;
        let get = |i: usize| row.get(i).unwrap_or("");
        let class = parse_label(get(label)).map_err(|e| CliError::config(format!("row {line}: {e}")))?;
        let label = ClassLabel::new(task, class).map_err(|e| CliError::config(format!("row {line}: {e}")))?;
        let floats = |cols: &[usize]| cols.iter().map(|&i| parse_num::<f64>(get(i), "feature", line)).collect::<CliResult<Vec<_>>>();
        let bscan_index = parse_num(get(bscan), "bscan_index", line)?;
        match task {
            Task::T2 => {
                let rec = BscanRecord {
                    patient_id: get(patient).to_string(),
                    visit_id: get(col("visit_id").expect("checked")).to_string(),
                    volume_id: get(volume).to_string(),
                    bscan_index,
                    features: floats(&f)?,
                    label,
                };
                if rec.case_id() != get(case) {
                    return Err(CliError::config(format!(
                        "row {line}: case_id `{}` does not match volume_id/bscan_index ({})",
                        get(case),
                        rec.case_id()
                    )));
                }
                t2.push(rec);
            }
            Task::T1 => t1.push(PairRecord::new(
                get(case).to_string(),
                get(patient).to_string(),
                get(volume).to_string(),
                bscan_index,
                floats(&a)?,
                floats(&b)?,
                PairLabel::Change(label),
            )?),
        }
    }
    let data = match task {
        Task::T1 => Dataset::T1(t1),
        Task::T2 => Dataset::T2(t2),
    };
    if data.is_empty() {
        return Err(CliError::config(format!("{}: dataset has no records", path.display())));
    }
    Ok(data)
}

const KEY_COLUMNS: [&str; 4] = ["case_id", "patient_id", "volume_id", "bscan_index"];

fn key_cells(k: &RecordKey) -> Vec<String> {
    vec![k.case_id.clone(), k.patient_id.clone(), k.volume_id.clone(), k.bscan_index.to_string()]
}

pub fn write_truth(path: &Path, data: &Dataset) -> CliResult<()> {
    let mut header: Vec<String> = KEY_COLUMNS.map(String::from).to_vec();
    header.push("true_label".into());
    let rows = data
        .keys()
        .into_iter()
        .zip(data.labels())
        .map(|(k, l)| {
            let mut row = key_cells(&k);
            row.push(label_name(l)?.to_string());
            Ok(row)
        })
        .collect::<CliResult<Vec<_>>>()?;
    write_atomic(path, &csv_bytes(&header, rows)?)
}

/// Ground truth keyed by case id, in file order.
pub fn read_truth(path: &Path) -> CliResult<Vec<(RecordKey, usize)>> {
    let mut rdr = reader(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    let need = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| CliError::config(format!("{}: missing column `{name}`", path.display())))
    };
    let cols = [need("case_id")?, need("patient_id")?, need("volume_id")?, need("bscan_index")?, need("true_label")?];
    let mut out = Vec::new();
    for (n, row) in rdr.records().enumerate() {
        let row = row?;
        let line = n as u64 + 2;
        let get = |i: usize| row.get(cols[i]).unwrap_or("").to_string();
        let key = RecordKey {
            case_id: get(0),
            patient_id: get(1),
            volume_id: get(2),
            bscan_index: parse_num(&get(3), "bscan_index", line)?,
        };
        let label = parse_label(&get(4)).map_err(|e| CliError::config(format!("row {line}: {e}")))?;
        out.push((key, label.index()));
    }
    Ok(out)
}

/// One row of a prediction file.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub key: RecordKey,
    pub true_label: Option<usize>,
    pub probs: ProbVector,
    pub pred_label: usize,
    pub final_label: Option<usize>,
    pub postprocessed: Option<bool>,
}

impl PredictionRow {
    /// The label downstream consumers should score.
    pub fn label(&self) -> usize {
        self.final_label.unwrap_or(self.pred_label)
    }
}

const PROB_COLUMNS: [&str; 4] = ["p_reduced", "p_stable", "p_worsened", "p_other"];

pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> CliResult<()> {
    let c = rows.first().map_or(3, |r| r.probs.len());
    if rows.iter().any(|r| r.probs.len() != c) {
        return Err(CliError::config("prediction rows mix 3- and 4-class probabilities"));
    }
    let with_final = rows.iter().any(|r| r.final_label.is_some());
    let mut header: Vec<String> = KEY_COLUMNS.map(String::from).to_vec();
    header.push("true_label".into());
    header.extend(PROB_COLUMNS[..c].iter().map(|s| s.to_string()));
    header.push("pred_label".into());
    if with_final {
        header.push("final_label".into());
        header.push("postprocessed".into());
    }
    let body = rows
        .iter()
        .map(|r| {
            let mut row = key_cells(&r.key);
            row.push(match r.true_label {
                Some(l) => label_name(l)?.to_string(),
                None => String::new(),
            });
            row.extend(r.probs.as_slice().iter().map(|p| format!("{p:.9}")));
            row.push(label_name(r.pred_label)?.to_string());
            if with_final {
                row.push(label_name(r.label())?.to_string());
                row.push(r.postprocessed.unwrap_or(false).to_string());
            }
            Ok(row)
        })
        .collect::<CliResult<Vec<_>>>()?;
    write_atomic(path, &csv_bytes(&header, body)?)
}

pub fn read_predictions(path: &Path) -> CliResult<Vec<PredictionRow>> {
    let mut rdr = reader(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    let col = |name: &str| header.iter().position(|h| h == name);
    let need = |name: &str| col(name).ok_or_else(|| CliError::config(format!("{}: missing column `{name}`", path.display())));
    let keys = [need("case_id")?, need("patient_id")?, need("volume_id")?, need("bscan_index")?];
    let truth = need("true_label")?;
    let pred = need("pred_label")?;
    let c = if col("p_other").is_some() { 4 } else { 3 };
    let probs: Vec<usize> = PROB_COLUMNS[..c].iter().map(|n| need(n)).collect::<CliResult<_>>()?;
    let fin = col("final_label");
    let post = col("postprocessed");
    let mut out = Vec::new();
    for (n, row) in rdr.records().enumerate() {
        let row = row?;
        let line = n as u64 + 2;
        let get = |i: usize| row.get(i).unwrap_or("");
        let label = |s: &str| parse_label(s).map(ChangeClass::index).map_err(|e| CliError::config(format!("row {line}: {e}")));
        let p: Vec<f64> = probs.iter().map(|&i| parse_num(get(i), "probability", line)).collect::<CliResult<_>>()?;
        let probs = ProbVector::renormalized(p, 1e-6)
            .map_err(|e| CliError::config(format!("{}: row {line}: {e}", path.display())))?;
        out.push(PredictionRow {
            key: RecordKey {
                case_id: get(keys[0]).to_string(),
                patient_id: get(keys[1]).to_string(),
                volume_id: get(keys[2]).to_string(),
                bscan_index: parse_num(get(keys[3]), "bscan_index", line)?,
            },
            true_label: match get(truth) {
                "" => None,
                s => Some(label(s)?),
            },
            probs,
            pred_label: label(get(pred))?,
            final_label: fin.map(|i| label(get(i))).transpose()?,
            postprocessed: post.map(|i| get(i) == "true"),
        });
    }
    Ok(out)
}

pub fn write_history(path: &Path, epochs: &[EpochRecord], best_epoch: usize) -> CliResult<()> {
    let header: Vec<String> = [
        "epoch", "lr", "train_loss", "val_micro_f1", "val_specificity", "val_rk_correlation", "val_cohens_kappa",
        "val_qw_kappa", "val_balanced_accuracy", "val_average", "best",
    ]
    .map(String::from)
    .to_vec();
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.9}"));
    let rows = epochs.iter().map(|e| {
        vec![
            e.epoch.to_string(),
            format!("{:.9e}", e.lr),
            format!("{:.9}", e.train_loss),
            opt(e.val.micro_f1),
            opt(e.val.specificity),
            opt(e.val.rk_correlation),
            opt(e.val.cohens_kappa),
            opt(e.val.qw_kappa),
            opt(e.val.balanced_accuracy),
            opt(e.val.average),
            (e.epoch == best_epoch).to_string(),
        ]
    });
    write_atomic(path, &csv_bytes(&header, rows)?)
}

pub const REPORT_METRICS: [&str; 7] =
    ["micro_f1", "specificity", "rk_correlation", "cohens_kappa", "qw_kappa", "balanced_accuracy", "average"];

pub fn report_values(r: &MetricReport) -> [Option<f64>; 7] {
    [r.micro_f1, r.specificity, r.rk_correlation, r.cohens_kappa, r.qw_kappa, r.balanced_accuracy, r.average]
}

pub fn write_report(path: &Path, r: &MetricReport) -> CliResult<()> {
    let mut header = vec!["task".to_string()];
    header.extend(REPORT_METRICS.iter().map(|s| s.to_string()));
    header.push("flags".into());
    let mut row = vec![r.task.map_or(String::new(), |t| t.to_string())];
    row.extend(report_values(r).iter().map(|v| v.map_or(String::new(), |x| format!("{x:.6}"))));
    row.push(r.flags.join(";"));
    write_atomic(path, &csv_bytes(&header, [row])?)
}
