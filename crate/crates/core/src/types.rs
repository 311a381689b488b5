//! Domain types shared by every module: class labels, probability and logit
//! vectors, and the per-sample records produced by the generator.
//!
//! Class indices are fixed: Reduced=0, Stable=1, Worsened=2 and, for the
//! pairwise task only, Other=3. The first three are ordinal ranks.

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};

/// Tolerance used when validating that probabilities sum to one.
pub const PROB_TOLERANCE: f64 = 1e-9;

/// Which challenge task a label or dataset belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    /// Pairwise change detection between two visits (4 classes).
    T1,
    /// Forecast of change from a single visit (3 ordinal classes).
    T2,
}

impl Task {
    pub fn num_classes(self) -> usize {
        match self {
            Task::T1 => 4,
            Task::T2 => 3,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::T1 => "t1",
            Task::T2 => "t2",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "t1" => Ok(Task::T1),
            "t2" => Ok(Task::T2),
            other => Err(invalid(format!("unknown task `{other}` (expected t1 or t2)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ChangeClass {
    Reduced = 0,
    Stable = 1,
    Worsened = 2,
    Other = 3,
}

impl ChangeClass {
    pub const ALL: [ChangeClass; 4] = [
        ChangeClass::Reduced,
        ChangeClass::Stable,
        ChangeClass::Worsened,
        ChangeClass::Other,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Result<Self> {
        Self::ALL
            .get(index)
            .copied()
            .ok_or_else(|| invalid(format!("class index {index} out of range")))
    }

    /// Ordinal rank, `None` for Other.
    pub fn rank(self) -> Option<usize> {
        match self {
            ChangeClass::Other => None,
            c => Some(c.index()),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ChangeClass::Reduced => "Reduced",
            ChangeClass::Stable => "Stable",
            ChangeClass::Worsened => "Worsened",
            ChangeClass::Other => "Other",
        }
    }
}

/// A class value tagged with its task. T2 labels can never be Other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ClassLabel {
    class: ChangeClass,
    task: Task,
}

impl ClassLabel {
    pub fn new(task: Task, class: ChangeClass) -> Result<Self> {
        if task == Task::T2 && class == ChangeClass::Other {
            return Err(invalid("T2 labels cannot be Other"));
        }
        Ok(Self { class, task })
    }

    pub fn from_index(task: Task, index: usize) -> Result<Self> {
        Self::new(task, ChangeClass::from_index(index)?)
    }

    pub fn class(self) -> ChangeClass {
        self.class
    }

    pub fn task(self) -> Task {
        self.task
    }

    pub fn index(self) -> usize {
        self.class.index()
    }
}

/// A discrete distribution over C classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates that every entry lies in [0, 1] and that the entries sum to
    /// one within [`PROB_TOLERANCE`].
    pub fn new(p: Vec<f64>) -> Result<Self> {
        Self::with_tolerance(p, PROB_TOLERANCE)
    }

    fn with_tolerance(p: Vec<f64>, tol: f64) -> Result<Self> {
        if p.is_empty() {
            return Err(invalid("probability vector is empty"));
        }
        if let Some((i, v)) = p
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(invalid(format!("probability entry {i} = {v} outside [0, 1]")));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > tol {
            return Err(invalid(format!("probabilities sum to {sum}, expected 1")));
        }
        Ok(Self(p))
    }

    /// Accepts entries whose sum is within `tol` of one and rescales them to
    /// sum to one. Used when reading probabilities back from fixed-point text.
    pub fn renormalized(p: Vec<f64>, tol: f64) -> Result<Self> {
        let checked = Self::with_tolerance(p, tol)?;
        let sum: f64 = checked.0.iter().sum();
        Ok(Self(checked.0.into_iter().map(|v| v / sum).collect()))
    }

    pub fn one_hot(num_classes: usize, index: usize) -> Result<Self> {
        if index >= num_classes {
            return Err(invalid(format!(
                "one-hot index {index} out of range for {num_classes} classes"
            )));
        }
        let mut p = vec![0.0; num_classes];
        p[index] = 1.0;
        Ok(Self(p))
    }

    pub fn uniform(num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(invalid("uniform distribution over zero classes"));
        }
        Ok(Self(vec![1.0 / num_classes as f64; num_classes]))
    }

    pub(crate) fn from_raw(p: Vec<f64>) -> Self {
        debug_assert!(Self::new(p.clone()).is_ok(), "invalid raw probabilities {p:?}");
        Self(p)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest probability; ties go to the lower class index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate().skip(1) {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Pre-softmax scores. All entries are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(z: Vec<f64>) -> Result<Self> {
        if z.is_empty() {
            return Err(invalid("logit vector is empty"));
        }
        if let Some((i, v)) = z.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(invalid(format!("logit entry {i} is not finite ({v})")));
        }
        Ok(Self(z))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Max-subtracted softmax.
pub fn softmax(z: &LogitVector) -> ProbVector {
    let z = z.as_slice();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    ProbVector(exps.into_iter().map(|e| e / sum).collect())
}

/// Cumulative sums of `p`; the last entry is pinned to exactly 1.
pub fn cdf(p: &ProbVector) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out: Vec<f64> = p
        .as_slice()
        .iter()
        .map(|v| {
            acc += v;
            acc
        })
        .collect();
    if let Some(last) = out.last_mut() {
        *last = 1.0;
    }
    out
}

/// Identity of one scored sample, carried through prediction files.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RecordKey {
    pub case_id: String,
    pub patient_id: String,
    pub volume_id: String,
    pub bscan_index: u32,
}

/// One B-scan of a single visit (T2 sample).
#[derive(Debug, Clone, PartialEq)]
pub struct BscanRecord {
    pub patient_id: String,
    pub visit_id: String,
    pub volume_id: String,
    pub bscan_index: u32,
    pub features: Vec<f64>,
    pub label: ClassLabel,
}

impl BscanRecord {
    pub fn case_id(&self) -> String {
        format!("{}_B{:03}", self.volume_id, self.bscan_index)
    }

    pub fn key(&self) -> RecordKey {
        RecordKey {
            case_id: self.case_id(),
            patient_id: self.patient_id.clone(),
            volume_id: self.volume_id.clone(),
            bscan_index: self.bscan_index,
        }
    }
}

/// Target of a pair: a T1 change label or the binary pretext flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairLabel {
    Change(ClassLabel),
    /// `true` means the two members differ (change).
    Binary(bool),
}

impl PairLabel {
    pub fn index(self) -> usize {
        match self {
            PairLabel::Change(label) => label.index(),
            PairLabel::Binary(changed) => usize::from(changed),
        }
    }
}

/// Two B-scans of the same patient from consecutive visits (T1 or pretext).
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub case_id: String,
    pub patient_id: String,
    pub volume_id: String,
    pub bscan_index: u32,
    pub features_a: Vec<f64>,
    pub features_b: Vec<f64>,
    pub label: PairLabel,
}

impl PairRecord {
    pub fn new(
        case_id: String,
        patient_id: String,
        volume_id: String,
        bscan_index: u32,
        features_a: Vec<f64>,
        features_b: Vec<f64>,
        label: PairLabel,
    ) -> Result<Self> {
        if features_a.len() != features_b.len() {
            return Err(invalid(format!(
                "pair {case_id}: feature dimensions differ ({} vs {})",
                features_a.len(),
                features_b.len()
            )));
        }
        Ok(Self {
            case_id,
            patient_id,
            volume_id,
            bscan_index,
            features_a,
            features_b,
            label,
        })
    }

    pub fn key(&self) -> RecordKey {
        RecordKey {
            case_id: self.case_id.clone(),
            patient_id: self.patient_id.clone(),
            volume_id: self.volume_id.clone(),
            bscan_index: self.bscan_index,
        }
    }
}
