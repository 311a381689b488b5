//! Post-processing of model outputs.
//!
//! * [`mean_ensemble`]: average the class probabilities of several models and
//!   take the argmax (ties go to the lower class index).
//! * [`stable_unanimity_vote`]: Stable only when every model says Stable,
//!   otherwise the majority among the non-Stable votes.
//! * [`volume_consistency`]: one label per volume. Stable when at least
//!   `stable_ratio_threshold` of its B-scans are Stable (inclusive),
//!   otherwise the majority among the non-Stable B-scan labels; the volume
//!   label is then broadcast to all of its B-scans.
//!
//! "Majority" is read over the non-Stable predictions by default: taken over
//! all predictions it would re-elect Stable whenever most models say Stable,
//! and the unanimity/threshold clause would never fire. The literal reading
//! is available as [`MajorityReading::AllPredictions`].

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{config, invalid, Error, Result};
use crate::types::{ChangeClass, ProbVector, RecordKey};

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub model_id: String,
    pub entries: Vec<(RecordKey, ProbVector)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TieBreak {
    /// Highest mean probability among the tied classes, then lower index.
    MeanProbability,
    /// Worsened, then Reduced, then Other, then Stable.
    MostSevere,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MajorityReading {
    NonStable,
    AllPredictions,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PostprocessConfig {
    pub stable_class: usize,
    /// Fraction of Stable B-scans needed for a Stable volume, in (0, 1].
    pub stable_ratio_threshold: f64,
    pub tie_break: TieBreak,
    pub majority: MajorityReading,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            stable_class: ChangeClass::Stable.index(),
            // the Stable class ratio
            stable_ratio_threshold: 0.8,
            tie_break: TieBreak::MeanProbability,
            majority: MajorityReading::NonStable,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.stable_ratio_threshold > 0.0 && self.stable_ratio_threshold <= 1.0) {
            return Err(config(format!(
                "stable_ratio_threshold must lie in (0, 1], got {}",
                self.stable_ratio_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleEntry {
    pub key: RecordKey,
    pub label: usize,
    pub mean: ProbVector,
}

fn mean_of(probs: &[&ProbVector]) -> Result<ProbVector> {
    let c = probs.first().map_or(0, |p| p.len());
    if c == 0 {
        return Err(invalid("no probabilities to average"));
    }
    if probs.iter().any(|p| p.len() != c) {
        return Err(config("probability vectors have different class counts (mixed tasks?)"));
    }
    let n = probs.len() as f64;
    let mut mean: Vec<f64> = (0..c).map(|k| probs.iter().map(|p| p[k]).sum::<f64>() / n).collect();
    let s: f64 = mean.iter().sum();
    mean.iter_mut().for_each(|v| *v = (*v / s).clamp(0.0, 1.0));
    Ok(ProbVector::from_raw(mean))
}

/// Checks that every set covers the same record keys and returns, for each
/// record of the first set, the matching entry index in every set.
fn align(sets: &[PredictionSet]) -> Result<Vec<Vec<usize>>> {
    let first = sets.first().ok_or_else(|| invalid("no prediction sets to combine"))?;
    let reference: BTreeMap<&str, usize> = first
        .entries
        .iter()
        .enumerate()
        .map(|(i, (k, _))| (k.case_id.as_str(), i))
        .collect();
    if reference.len() != first.entries.len() {
        return Err(Error::Misaligned(format!("{} has duplicate record keys", first.model_id)));
    }
    let mut offenders = BTreeSet::new();
    let mut index = vec![vec![0; sets.len()]; first.entries.len()];
    for (s, set) in sets.iter().enumerate() {
        let mut seen = BTreeSet::new();
        for (i, (key, _)) in set.entries.iter().enumerate() {
            match reference.get(key.case_id.as_str()) {
                Some(&r) if seen.insert(r) => index[r][s] = i,
                _ => {
                    offenders.insert(key.case_id.clone());
                }
            }
        }
        for (case, &r) in &reference {
            if !seen.contains(&r) {
                offenders.insert((*case).to_string());
            }
        }
    }
    if !offenders.is_empty() {
        let first10: Vec<String> = offenders.iter().take(10).cloned().collect();
        return Err(Error::Misaligned(format!(
            "prediction sets cover different records ({} mismatched): {}",
            offenders.len(),
            first10.join(", ")
        )));
    }
    Ok(index)
}

/// Mean-probability ensemble, in the record order of the first set.
pub fn mean_ensemble(sets: &[PredictionSet]) -> Result<Vec<EnsembleEntry>> {
    let index = align(sets)?;
    index
        .iter()
        .enumerate()
        .map(|(r, per_set)| {
            let probs: Vec<&ProbVector> = per_set.iter().zip(sets).map(|(&i, s)| &s.entries[i].1).collect();
            let mean = mean_of(&probs)?;
            Ok(EnsembleEntry { key: sets[0].entries[r].0.clone(), label: mean.argmax(), mean })
        })
        .collect()
}

fn severity(class: usize) -> usize {
    match ChangeClass::from_index(class) {
        Ok(ChangeClass::Worsened) => 3,
        Ok(ChangeClass::Reduced) => 2,
        Ok(ChangeClass::Other) => 1,
        _ => 0,
    }
}

/// Majority among `candidates` with the configured tie-break.
fn majority(candidates: &[usize], mean: &ProbVector, tie_break: TieBreak) -> usize {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &c in candidates {
        *counts.entry(c).or_default() += 1;
    }
    let top = counts.values().copied().max().unwrap_or(0);
    let tied = counts.iter().filter(|(_, &n)| n == top).map(|(&c, _)| c);
    match tie_break {
        // BTreeMap order makes the lower index win exact ties.
        TieBreak::MeanProbability => tied
            .fold(None, |best: Option<usize>, c| match best {
                Some(b) if mean.as_slice().get(b) >= mean.as_slice().get(c) => Some(b),
                _ => Some(c),
            })
            .unwrap_or(0),
        TieBreak::MostSevere => tied.max_by_key(|&c| severity(c)).unwrap_or(0),
    }
}

fn decide(labels: &[usize], mean: &ProbVector, stable_wins: bool, cfg: &PostprocessConfig) -> usize {
    if stable_wins {
        return cfg.stable_class;
    }
    let candidates: Vec<usize> = match cfg.majority {
        MajorityReading::NonStable => labels.iter().copied().filter(|&l| l != cfg.stable_class).collect(),
        MajorityReading::AllPredictions => labels.to_vec(),
    };
    majority(&candidates, mean, cfg.tie_break)
}

/// One record, one `(label, probabilities)` per model.
pub fn stable_unanimity_vote(preds: &[(usize, ProbVector)], cfg: &PostprocessConfig) -> Result<usize> {
    if preds.is_empty() {
        return Err(invalid("unanimity vote over zero models"));
    }
    if preds.len() < 2 {
        return Err(invalid("unanimity vote needs at least two models"));
    }
    let probs: Vec<&ProbVector> = preds.iter().map(|(_, p)| p).collect();
    let mean = mean_of(&probs)?;
    let labels: Vec<usize> = preds.iter().map(|(l, _)| *l).collect();
    let all_stable = labels.iter().all(|&l| l == cfg.stable_class);
    Ok(decide(&labels, &mean, all_stable, cfg))
}

/// Applies [`stable_unanimity_vote`] per record, each model voting its argmax.
pub fn unanimity_ensemble(sets: &[PredictionSet], cfg: &PostprocessConfig) -> Result<Vec<EnsembleEntry>> {
    let index = align(sets)?;
    index
        .iter()
        .enumerate()
        .map(|(r, per_set)| {
            let preds: Vec<(usize, ProbVector)> = per_set
                .iter()
                .zip(sets)
                .map(|(&i, s)| {
                    let p = &s.entries[i].1;
                    (p.argmax(), p.clone())
                })
                .collect();
            let label = stable_unanimity_vote(&preds, cfg)?;
            let mean = mean_of(&preds.iter().map(|(_, p)| p).collect::<Vec<_>>())?;
            Ok(EnsembleEntry { key: sets[0].entries[r].0.clone(), label, mean })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeConsistency {
    pub volume_labels: BTreeMap<String, usize>,
    /// Broadcast label per input B-scan, input order.
    pub labels: Vec<usize>,
}

/// One label per volume, broadcast back to every B-scan.
pub fn volume_consistency(
    bscan_preds: &[(RecordKey, usize, ProbVector)],
    cfg: &PostprocessConfig,
) -> Result<VolumeConsistency> {
    cfg.validate()?;
    if let Some((first, _, p)) = bscan_preds.first() {
        if let Some((k, _, q)) = bscan_preds.iter().find(|(_, _, q)| q.len() != p.len()) {
            return Err(config(format!(
                "records {} and {} have {} and {} classes (mixed tasks)",
                first.case_id,
                k.case_id,
                p.len(),
                q.len()
            )));
        }
    }
    let mut volumes: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, (key, _, _)) in bscan_preds.iter().enumerate() {
        if key.volume_id.is_empty() {
            return Err(invalid(format!("record {} has no volume id", key.case_id)));
        }
        volumes.entry(&key.volume_id).or_default().push(i);
    }
    let mut volume_labels = BTreeMap::new();
    for (volume, members) in &volumes {
        let labels: Vec<usize> = members.iter().map(|&i| bscan_preds[i].1).collect();
        let probs: Vec<&ProbVector> = members.iter().map(|&i| &bscan_preds[i].2).collect();
        let mean = mean_of(&probs)?;
        let stable = labels.iter().filter(|&&l| l == cfg.stable_class).count();
        let fraction = stable as f64 / labels.len() as f64;
        let label = decide(&labels, &mean, fraction >= cfg.stable_ratio_threshold, cfg);
        volume_labels.insert((*volume).to_string(), label);
    }
    let labels = bscan_preds.iter().map(|(k, _, _)| volume_labels[&k.volume_id]).collect();
    Ok(VolumeConsistency { volume_labels, labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    const R: usize = 0;
    const S: usize = 1;
    const W: usize = 2;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    fn key(case: &str, volume: &str) -> RecordKey {
        RecordKey { case_id: case.into(), patient_id: "P".into(), volume_id: volume.into(), bscan_index: 0 }
    }

    fn one_hot(k: usize) -> ProbVector {
        ProbVector::one_hot(3, k).unwrap()
    }

    #[test]
    fn mean_ensemble_examples() {
        let a = PredictionSet { model_id: "a".into(), entries: vec![(key("c1", "v"), pv(&[0.6, 0.4, 0.0, 0.0]))] };
        let b = PredictionSet { model_id: "b".into(), entries: vec![(key("c1", "v"), pv(&[0.2, 0.8, 0.0, 0.0]))] };
        let single = mean_ensemble(std::slice::from_ref(&a)).unwrap();
        assert_eq!(single[0].label, 0);
        let both = mean_ensemble(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(both[0].label, ChangeClass::Stable.index());
        for (x, y) in both[0].mean.as_slice().iter().zip([0.4, 0.6, 0.0, 0.0]) {
            assert!((x - y).abs() < 1e-12);
        }
        let same = mean_ensemble(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert_eq!(same[0].label, single[0].label);
        for (x, y) in same[0].mean.as_slice().iter().zip(single[0].mean.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn misaligned_keys_are_listed() {
        let a = PredictionSet { model_id: "a".into(), entries: vec![(key("c1", "v"), one_hot(0))] };
        let b = PredictionSet { model_id: "b".into(), entries: vec![(key("c2", "v"), one_hot(0))] };
        let err = mean_ensemble(&[a, b]).unwrap_err().to_string();
        assert!(err.contains("c1") && err.contains("c2"), "{err}");
    }

    #[test]
    fn unanimity_examples() {
        let cfg = PostprocessConfig::default();
        let vote = |ls: &[(usize, ProbVector)]| stable_unanimity_vote(ls, &cfg).unwrap();
        assert_eq!(vote(&[(S, one_hot(S)), (S, one_hot(S)), (S, one_hot(S))]), S);
        assert_eq!(vote(&[(S, one_hot(S)), (S, one_hot(S)), (W, one_hot(W))]), W);
        let tie = [
            (R, pv(&[0.5, 0.3, 0.2])),
            (W, pv(&[0.1, 0.2, 0.7])),
            (S, pv(&[0.1, 0.6, 0.3])),
        ];
        assert_eq!(vote(&tie), W);
        assert!(stable_unanimity_vote(&[], &cfg).is_err());
        assert!(stable_unanimity_vote(&[(S, one_hot(S))], &cfg).is_err());
    }

    #[test]
    fn literal_majority_reading() {
        let cfg = PostprocessConfig { majority: MajorityReading::AllPredictions, ..PostprocessConfig::default() };
        let preds = [(S, one_hot(S)), (S, one_hot(S)), (W, one_hot(W))];
        assert_eq!(stable_unanimity_vote(&preds, &cfg).unwrap(), S);
    }

    #[test]
    fn most_severe_tie_break() {
        let cfg = PostprocessConfig { tie_break: TieBreak::MostSevere, ..PostprocessConfig::default() };
        let preds = [(R, pv(&[0.9, 0.05, 0.05])), (W, pv(&[0.3, 0.3, 0.4]))];
        assert_eq!(stable_unanimity_vote(&preds, &cfg).unwrap(), W);
    }

    fn volume(labels: &[usize], vol: &str) -> Vec<(RecordKey, usize, ProbVector)> {
        labels
            .iter()
            .enumerate()
            .map(|(i, &l)| (key(&format!("{vol}_{i}"), vol), l, one_hot(l)))
            .collect()
    }

    #[test]
    fn volume_rule_examples() {
        let cfg = PostprocessConfig::default();
        let v = volume(&[S, S, S, S, S, S, S, S, W, W], "v1");
        assert_eq!(volume_consistency(&v, &cfg).unwrap().volume_labels["v1"], S);
        let v = volume(&[S, S, S, S, S, S, S, W, W, R], "v2");
        let out = volume_consistency(&v, &cfg).unwrap();
        assert_eq!(out.volume_labels["v2"], W);
        assert!(out.labels.iter().all(|&l| l == W));
        let v = volume(&[R, R, R], "v3");
        assert_eq!(volume_consistency(&v, &cfg).unwrap().labels, vec![R, R, R]);
    }

    #[test]
    fn volume_threshold_extremes() {
        let strict = PostprocessConfig { stable_ratio_threshold: 1.0, ..PostprocessConfig::default() };
        let v = volume(&[S, S, S, S, R], "v");
        assert_eq!(volume_consistency(&v, &strict).unwrap().volume_labels["v"], R);
        let lax = PostprocessConfig { stable_ratio_threshold: 1e-9, ..PostprocessConfig::default() };
        let v = volume(&[S, S], "v");
        assert_eq!(volume_consistency(&v, &lax).unwrap().volume_labels["v"], S);
        let bad = PostprocessConfig { stable_ratio_threshold: 0.0, ..PostprocessConfig::default() };
        assert!(volume_consistency(&v, &bad).is_err());
    }

    #[test]
    fn mixed_class_counts_rejected() {
        let mut v = volume(&[S, S], "v");
        v.push((key("x", "v"), S, pv(&[0.0, 1.0, 0.0, 0.0])));
        assert!(matches!(volume_consistency(&v, &PostprocessConfig::default()), Err(crate::Error::Config(_))));
    }
}
