//! Seeded synthetic longitudinal data.
//!
//! Every volume has a latent point
//!
//! ```text
//! latent = base + level·step_size·direction + patient_offset
//! ```
//!
//! and each of its B-scans is `latent + N(0, noise_sigma²)` per feature.
//! For T2 the level is `rank(c) - 1` of a class drawn per volume; for T1 the
//! level follows a per-patient walk whose steps (-1, 0, +1) are drawn with the
//! class ratios, and a pair is labelled by the sign of its step.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config, Error, Result};
use crate::types::{BscanRecord, ChangeClass, ClassLabel, PairLabel, PairRecord, Task};

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub task: Task,
    pub n_patients: usize,
    /// Inclusive range.
    pub visits_per_patient: (usize, usize),
    /// Inclusive range.
    pub bscans_per_volume: (usize, usize),
    pub feature_dim: usize,
    /// Over Reduced, Stable, Worsened. For T1 these are the step probabilities.
    pub class_ratios: Vec<f64>,
    /// Unit vector; `None` means `(1, .., 1) / sqrt(D)`.
    pub ordinal_direction: Option<Vec<f64>>,
    pub step_size: f64,
    pub noise_sigma: f64,
    /// Per-patient offset, shared by all of the patient's volumes.
    pub patient_sigma: f64,
    /// T1 only.
    pub other_rate: f64,
    pub seed: u64,
}

impl GenConfig {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            n_patients: 60,
            visits_per_patient: (2, 4),
            bscans_per_volume: (8, 12),
            feature_dim: 16,
            class_ratios: vec![0.1, 0.8, 0.1],
            ordinal_direction: None,
            step_size: 2.0,
            noise_sigma: 1.0,
            patient_sigma: 0.5,
            other_rate: match task {
                Task::T1 => 0.1,
                Task::T2 => 0.0,
            },
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_ratios.len() != 3 {
            return Err(config(format!(
                "class_ratios needs 3 entries (reduced, stable, worsened), got {}",
                self.class_ratios.len()
            )));
        }
        if self.class_ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(config("class_ratios must be finite and >= 0"));
        }
        let sum: f64 = self.class_ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(config(format!("class_ratios must sum to 1, got {sum}")));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(config("step_size must be > 0"));
        }
        for (name, v) in [("noise_sigma", self.noise_sigma), ("patient_sigma", self.patient_sigma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.other_rate) {
            return Err(config("other_rate must lie in [0, 1]"));
        }
        if self.task == Task::T2 && self.other_rate != 0.0 {
            return Err(config("other_rate applies to t1 only"));
        }
        if self.n_patients == 0 || self.feature_dim == 0 {
            return Err(config("n_patients and feature_dim must be positive"));
        }
        for (name, (lo, hi)) in [("visits_per_patient", self.visits_per_patient), ("bscans_per_volume", self.bscans_per_volume)] {
            if lo == 0 || lo > hi {
                return Err(config(format!("{name} must be a range 1 <= lo <= hi, got {lo}..{hi}")));
            }
        }
        if self.task == Task::T1 && self.visits_per_patient.1 < 2 {
            return Err(config("t1 pairs need at least two visits per patient"));
        }
        if let Some(d) = &self.ordinal_direction {
            if d.len() != self.feature_dim {
                return Err(config(format!("ordinal_direction has {} dims, expected {}", d.len(), self.feature_dim)));
            }
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(config(format!("ordinal_direction must be a unit vector, norm is {norm}")));
            }
        }
        Ok(())
    }

    fn direction(&self) -> Vec<f64> {
        self.ordinal_direction
            .clone()
            .unwrap_or_else(|| vec![1.0 / (self.feature_dim as f64).sqrt(); self.feature_dim])
    }
}

struct Sampler {
    rng: ChaCha8Rng,
    base: Vec<f64>,
    direction: Vec<f64>,
}

impl Sampler {
    fn new(cfg: &GenConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let base = gaussian(&mut rng, cfg.feature_dim, 1.0);
        Self { rng, base, direction: cfg.direction() }
    }

    fn class(&mut self, ratios: &[f64]) -> usize {
        let u: f64 = self.rng.random();
        let mut acc = 0.0;
        for (k, r) in ratios.iter().enumerate() {
            acc += r;
            if u < acc {
                return k;
            }
        }
        // u landed in the rounding gap; take the last class with mass
        ratios.iter().rposition(|&r| r > 0.0).unwrap_or(0)
    }

    fn range(&mut self, (lo, hi): (usize, usize)) -> usize {
        self.rng.random_range(lo..=hi)
    }

    fn latent(&self, level: f64, step: f64, offset: &[f64]) -> Vec<f64> {
        (0..self.base.len())
            .map(|i| self.base[i] + level * step * self.direction[i] + offset[i])
            .collect()
    }

    fn bscan(&mut self, latent: &[f64], sigma: f64) -> Vec<f64> {
        let noise = gaussian(&mut self.rng, latent.len(), sigma);
        latent.iter().zip(noise).map(|(l, n)| l + n).collect()
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![0.0; n];
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    (0..n).map(|_| normal.sample(rng)).collect()
}

fn patient_id(p: usize) -> String {
    format!("P{p:04}")
}

fn volume_id(p: usize, visit: usize) -> String {
    format!("P{p:04}_V{visit:02}")
}

/// T2 B-scan records, one volume per visit.
pub fn gen_t2_volumes(cfg: &GenConfig) -> Result<Vec<BscanRecord>> {
    cfg.validate()?;
    if cfg.task != Task::T2 {
        return Err(config("gen_t2_volumes needs task t2"));
    }
    let mut s = Sampler::new(cfg);
    let mut out = Vec::new();
    for p in 0..cfg.n_patients {
        let offset = gaussian(&mut s.rng, cfg.feature_dim, cfg.patient_sigma);
        let visits = s.range(cfg.visits_per_patient);
        for v in 0..visits {
            let k = s.class(&cfg.class_ratios);
            let class = ChangeClass::from_index(k)?;
            let rank = class.rank().expect("t2 classes are ordinal") as f64;
            let latent = s.latent(rank - 1.0, cfg.step_size, &offset);
            let n = s.range(cfg.bscans_per_volume);
            for b in 0..n {
                out.push(BscanRecord {
                    patient_id: patient_id(p),
                    visit_id: format!("V{v:02}"),
                    volume_id: volume_id(p, v),
                    bscan_index: b as u32,
                    features: s.bscan(&latent, cfg.noise_sigma),
                    label: ClassLabel::new(Task::T2, class)?,
                });
            }
        }
    }
    Ok(out)
}

/// T1 pairs of matching B-scans from consecutive visits.
pub fn gen_t1_pairs(cfg: &GenConfig) -> Result<Vec<PairRecord>> {
    cfg.validate()?;
    if cfg.task != Task::T1 {
        return Err(config("gen_t1_pairs needs task t1"));
    }
    let mut s = Sampler::new(cfg);
    let corruption_sigma = 3.0 * (cfg.step_size + cfg.noise_sigma);
    let mut out = Vec::new();
    for p in 0..cfg.n_patients {
        let offset = gaussian(&mut s.rng, cfg.feature_dim, cfg.patient_sigma);
        let visits = s.range((cfg.visits_per_patient.0.max(2), cfg.visits_per_patient.1));
        let n_bscans = s.range(cfg.bscans_per_volume);
        let mut level = 0.0;
        let mut prev: Vec<Vec<f64>> = {
            let latent = s.latent(level, cfg.step_size, &offset);
            (0..n_bscans).map(|_| s.bscan(&latent, cfg.noise_sigma)).collect()
        };
        for v in 1..visits {
            let k = s.class(&cfg.class_ratios);
            level += k as f64 - 1.0;
            let class = ChangeClass::from_index(k)?;
            let latent = s.latent(level, cfg.step_size, &offset);
            let cur: Vec<Vec<f64>> = (0..n_bscans).map(|_| s.bscan(&latent, cfg.noise_sigma)).collect();
            for b in 0..n_bscans {
                let mut a = prev[b].clone();
                let mut bb = cur[b].clone();
                let mut label = class;
                if s.rng.random::<f64>() < cfg.other_rate {
                    label = ChangeClass::Other;
                    let target = if s.rng.random::<bool>() { &mut a } else { &mut bb };
                    if s.rng.random::<bool>() {
                        target.iter_mut().for_each(|x| *x = -*x);
                    } else {
                        let burst = gaussian(&mut s.rng, target.len(), corruption_sigma);
                        target.iter_mut().zip(burst).for_each(|(x, n)| *x += n);
                    }
                }
                let vol = volume_id(p, v);
                out.push(PairRecord::new(
                    format!("{vol}_B{b:03}"),
                    patient_id(p),
                    vol,
                    b as u32,
                    a,
                    bb,
                    PairLabel::Change(ClassLabel::new(Task::T1, label)?),
                )?);
            }
            prev = cur;
        }
    }
    Ok(out)
}

/// A B-scan with a 4-class disease label, used by the pretext task.
#[derive(Debug, Clone, PartialEq)]
pub struct DiseaseRecord {
    pub id: String,
    pub features: Vec<f64>,
    pub disease: usize,
}

/// Four balanced disease classes around random centres.
pub fn gen_disease_records(n_per_class: usize, feature_dim: usize, noise_sigma: f64, seed: u64) -> Result<Vec<DiseaseRecord>> {
    if feature_dim == 0 || !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(config("feature_dim must be positive and noise_sigma >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<Vec<f64>> = (0..4).map(|_| gaussian(&mut rng, feature_dim, 2.0)).collect();
    let mut out = Vec::with_capacity(4 * n_per_class);
    for (d, centre) in centres.iter().enumerate() {
        for i in 0..n_per_class {
            let noise = gaussian(&mut rng, feature_dim, noise_sigma);
            out.push(DiseaseRecord {
                id: format!("D{d}_{i:05}"),
                features: centre.iter().zip(noise).map(|(c, n)| c + n).collect(),
                disease: d,
            });
        }
    }
    Ok(out)
}

/// Uniformly sampled pairs of two distinct records; change iff the diseases differ.
pub fn gen_pretext_pairs(records: &[DiseaseRecord], n_pairs: usize, seed: u64) -> Result<Vec<PairRecord>> {
    if records.len() < 2 {
        return Err(Error::Data(format!("pretext pairs need at least 2 records, got {}", records.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = (0..records.len()).collect();
    (0..n_pairs)
        .map(|n| {
            let pick: Vec<&usize> = idx.choose_multiple(&mut rng, 2).collect();
            let (a, b) = (&records[*pick[0]], &records[*pick[1]]);
            PairRecord::new(
                format!("pretext_{n:06}"),
                "pretext".into(),
                format!("{}+{}", a.id, b.id),
                0,
                a.features.clone(),
                b.features.clone(),
                PairLabel::Binary(a.disease != b.disease),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn zero_noise_gives_identical_bscans() {
        let cfg = GenConfig { noise_sigma: 0.0, n_patients: 5, ..GenConfig::new(Task::T2) };
        let recs = gen_t2_volumes(&cfg).unwrap();
        let mut by_volume: BTreeMap<&str, Vec<&BscanRecord>> = BTreeMap::new();
        recs.iter().for_each(|r| by_volume.entry(&r.volume_id).or_default().push(r));
        for members in by_volume.values() {
            assert!(members.iter().all(|r| r.features == members[0].features && r.label == members[0].label));
        }
    }

    #[test]
    fn degenerate_ratios() {
        let cfg = GenConfig { class_ratios: vec![0.0, 1.0, 0.0], n_patients: 10, ..GenConfig::new(Task::T2) };
        assert!(gen_t2_volumes(&cfg).unwrap().iter().all(|r| r.label.class() == ChangeClass::Stable));
        let t1 = GenConfig { class_ratios: vec![0.0, 1.0, 0.0], other_rate: 0.0, ..GenConfig::new(Task::T1) };
        assert!(gen_t1_pairs(&t1).unwrap().iter().all(|r| r.label.index() == ChangeClass::Stable.index()));
    }

    #[test]
    fn class_fractions_follow_ratios() {
        let cfg = GenConfig {
            n_patients: 2500,
            visits_per_patient: (4, 4),
            bscans_per_volume: (1, 1),
            feature_dim: 2,
            seed: 11,
            ..GenConfig::new(Task::T2)
        };
        let recs = gen_t2_volumes(&cfg).unwrap();
        assert_eq!(recs.len(), 10_000);
        let mut counts = [0usize; 3];
        recs.iter().for_each(|r| counts[r.label.index()] += 1);
        for (c, target) in counts.iter().zip([0.1, 0.8, 0.1]) {
            let f = *c as f64 / recs.len() as f64;
            assert!((f - target).abs() <= 0.02, "{counts:?}");
        }
    }

    #[test]
    fn deterministic() {
        let t2 = GenConfig { seed: 4, ..GenConfig::new(Task::T2) };
        assert_eq!(gen_t2_volumes(&t2).unwrap(), gen_t2_volumes(&t2).unwrap());
        let other = GenConfig { seed: 5, ..t2.clone() };
        assert_ne!(gen_t2_volumes(&t2).unwrap(), gen_t2_volumes(&other).unwrap());
        let t1 = GenConfig { seed: 4, ..GenConfig::new(Task::T1) };
        assert_eq!(gen_t1_pairs(&t1).unwrap(), gen_t1_pairs(&t1).unwrap());
    }

    #[test]
    fn t1_labels_and_other_rate() {
        let none = GenConfig { other_rate: 0.0, ..GenConfig::new(Task::T1) };
        assert!(gen_t1_pairs(&none).unwrap().iter().all(|r| r.label.index() != ChangeClass::Other.index()));
        let cfg = GenConfig { n_patients: 400, ..GenConfig::new(Task::T1) };
        let pairs = gen_t1_pairs(&cfg).unwrap();
        let other = pairs.iter().filter(|r| r.label.index() == ChangeClass::Other.index()).count();
        let f = other as f64 / pairs.len() as f64;
        assert!((f - 0.1).abs() < 0.02, "{f}");
    }

    #[test]
    fn t1_zero_noise_stable_pairs_match() {
        let cfg = GenConfig { noise_sigma: 0.0, other_rate: 0.0, ..GenConfig::new(Task::T1) };
        for r in gen_t1_pairs(&cfg).unwrap() {
            let same = r.features_a == r.features_b;
            assert_eq!(same, r.label.index() == ChangeClass::Stable.index(), "{}", r.case_id);
        }
    }

    #[test]
    fn invalid_configs() {
        let base = GenConfig::new(Task::T2);
        let bad = [
            GenConfig { class_ratios: vec![0.2, 0.2, 0.2], ..base.clone() },
            GenConfig { class_ratios: vec![0.5, 0.5], ..base.clone() },
            GenConfig { step_size: 0.0, ..base.clone() },
            GenConfig { noise_sigma: -1.0, ..base.clone() },
            GenConfig { bscans_per_volume: (3, 2), ..base.clone() },
            GenConfig { ordinal_direction: Some(vec![1.0; 16]), ..base.clone() },
            GenConfig { other_rate: 0.1, ..base.clone() },
        ];
        for cfg in bad {
            assert!(matches!(gen_t2_volumes(&cfg), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn pretext_rule() {
        let recs = gen_disease_records(500, 4, 1.0, 2).unwrap();
        let pairs = gen_pretext_pairs(&recs, 10_000, 3).unwrap();
        let by_id: BTreeMap<&str, usize> = recs.iter().map(|r| (r.id.as_str(), r.disease)).collect();
        let mut changed = 0;
        for p in &pairs {
            let (a, b) = p.volume_id.split_once('+').unwrap();
            let differ = by_id[a] != by_id[b];
            assert_eq!(p.label, PairLabel::Binary(differ));
            changed += usize::from(differ);
        }
        let f = changed as f64 / pairs.len() as f64;
        assert!((f - 0.75).abs() <= 0.02, "{f}");
        assert_eq!(pairs, gen_pretext_pairs(&recs, 10_000, 3).unwrap());
        assert!(matches!(gen_pretext_pairs(&recs[..1], 5, 0), Err(Error::Data(_))));
    }
}
