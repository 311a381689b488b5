use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchConfig {
    pub batch_size: usize,
    /// Every batch holds `batch_size / C` samples of each class.
    pub balanced: bool,
    /// Cap the majority class at `ratio × (largest other class)` each epoch.
    pub undersample_majority: Option<f64>,
}

fn class_members(labels: &[usize], pool: &[usize], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut members = vec![Vec::new(); num_classes];
    for &i in pool {
        let k = labels[i];
        if k >= num_classes {
            return Err(Error::Data(format!("record {i} has label {k}, expected < {num_classes}")));
        }
        members[k].push(i);
    }
    Ok(members)
}

fn undersample(labels: &[usize], num_classes: usize, ratio: f64, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(config(format!("undersample ratio must be > 0, got {ratio}")));
    }
    let all: Vec<usize> = (0..labels.len()).collect();
    let mut members = class_members(labels, &all, num_classes)?;
    let majority = (0..num_classes)
        .max_by(|&a, &b| members[a].len().cmp(&members[b].len()).then(b.cmp(&a)))
        .unwrap_or(0);
    let runner_up = (0..num_classes)
        .filter(|&k| k != majority)
        .map(|k| members[k].len())
        .max()
        .unwrap_or(0);
    let target = ((ratio * runner_up as f64).round() as usize).min(members[majority].len());
    members[majority].shuffle(rng);
    members[majority].truncate(target);
    members[majority].sort_unstable();
    let mut pool: Vec<usize> = members.into_iter().flatten().collect();
    pool.sort_unstable();
    Ok(pool)
}

/// Splits record indices into the batches of one epoch.
///
/// With undersampling the majority class is first subsampled without
/// replacement. In balanced mode each batch then takes `batch_size / C`
/// samples per class; a class with fewer members than the epoch needs is
/// sampled with replacement. Otherwise the pool is shuffled and chunked.
pub fn make_batches(
    labels: &[usize],
    num_classes: usize,
    cfg: &BatchConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    if cfg.batch_size == 0 {
        return Err(config("batch_size must be positive"));
    }
    let mut pool = match cfg.undersample_majority {
        Some(ratio) => undersample(labels, num_classes, ratio, rng)?,
        None => (0..labels.len()).collect(),
    };
    if pool.is_empty() {
        return Ok(Vec::new());
    }

    if !cfg.balanced {
        class_members(labels, &pool, num_classes)?;
        pool.shuffle(rng);
        return Ok(pool.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect());
    }

    if cfg.batch_size < num_classes {
        return Err(config(format!(
            "balanced batches need batch_size >= {num_classes} classes, got {}",
            cfg.batch_size
        )));
    }
    let per_class = cfg.batch_size / num_classes;
    let n_batches = pool.len().div_ceil(cfg.batch_size);
    let needed = n_batches * per_class;
    let members = class_members(labels, &pool, num_classes)?;
    if let Some(k) = members.iter().position(Vec::is_empty) {
        return Err(Error::Data(format!(
            "balanced batching needs every class, but class {k} has no records"
        )));
    }
    let draws: Vec<Vec<usize>> = members
        .into_iter()
        .map(|mut m| {
            if m.len() >= needed {
                m.shuffle(rng);
                m.truncate(needed);
                m
            } else {
                (0..needed).map(|_| m[rng.random_range(0..m.len())]).collect()
            }
        })
        .collect();
    Ok((0..n_batches)
        .map(|b| {
            let mut batch: Vec<usize> = draws
                .iter()
                .flat_map(|d| d[b * per_class..(b + 1) * per_class].iter().copied())
                .collect();
            batch.shuffle(rng);
            batch
        })
        .collect())
}
