use crate::error::{invalid, Result};

/// C×C count matrix. Rows are true classes, columns are predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<u64>,
    num_classes: usize,
}

impl ConfusionMatrix {
    pub fn zeros(num_classes: usize) -> Self {
        Self {
            counts: vec![0; num_classes * num_classes],
            num_classes,
        }
    }

    /// Builds a matrix from nested rows. Every row must have `rows.len()`
    /// entries.
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if let Some(r) = rows.iter().position(|row| row.len() != c) {
            return Err(invalid(format!(
                "confusion row {r} has {} entries, expected {c}",
                rows[r].len()
            )));
        }
        Ok(Self {
            counts: rows.iter().flatten().copied().collect(),
            num_classes: c,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes).map(|k| self.get(k, k)).sum()
    }

    /// Row sums: number of samples whose true class is k.
    pub fn true_counts(&self) -> Vec<u64> {
        (0..self.num_classes)
            .map(|t| (0..self.num_classes).map(|p| self.get(t, p)).sum())
            .collect()
    }

    /// Column sums: number of samples predicted as k.
    pub fn predicted_counts(&self) -> Vec<u64> {
        (0..self.num_classes)
            .map(|p| (0..self.num_classes).map(|t| self.get(t, p)).sum())
            .collect()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts
            .chunks(self.num_classes.max(1))
            .map(|c| c.to_vec())
            .take(self.num_classes)
            .collect()
    }

    fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.num_classes + pred] += 1;
    }
}

/// Tallies `(truth, pred)` pairs into a `num_classes`×`num_classes` matrix.
pub fn confusion_from_predictions(
    truth: &[usize],
    pred: &[usize],
    num_classes: usize,
) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(invalid(format!(
            "truth has {} labels but predictions have {}",
            truth.len(),
            pred.len()
        )));
    }
    let mut cm = ConfusionMatrix::zeros(num_classes);
    for (i, (&t, &p)) in truth.iter().zip(pred).enumerate() {
        if t >= num_classes || p >= num_classes {
            return Err(invalid(format!(
                "sample {i}: label pair ({t}, {p}) out of range for {num_classes} classes"
            )));
        }
        cm.add(t, p);
    }
    Ok(cm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_prediction_is_diagonal() {
        let cm = confusion_from_predictions(&[0, 1], &[0, 1], 2).unwrap();
        assert_eq!(cm.rows(), vec![vec![1, 0], vec![0, 1]]);
    }

    #[test]
    fn hand_tally() {
        let cm =
            confusion_from_predictions(&[0, 0, 1, 1, 1, 0], &[0, 1, 1, 1, 0, 0], 2).unwrap();
        assert_eq!(cm.rows(), vec![vec![2, 1], vec![1, 2]]);
    }

    #[test]
    fn empty_lists_give_zero_matrix() {
        let cm = confusion_from_predictions(&[], &[], 3).unwrap();
        assert_eq!(cm.total(), 0);
        assert_eq!(cm.num_classes(), 3);
    }

    #[test]
    fn errors() {
        assert!(confusion_from_predictions(&[0], &[0, 1], 2).is_err());
        assert!(confusion_from_predictions(&[0, 2], &[0, 1], 2).is_err());
        assert!(ConfusionMatrix::from_rows(&[vec![1, 2], vec![3]]).is_err());
    }

    proptest! {
        #[test]
        fn total_equals_length(pairs in prop::collection::vec((0usize..4, 0usize..4), 0..200)) {
            let (t, p): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
            let cm = confusion_from_predictions(&t, &p, 4).unwrap();
            prop_assert_eq!(cm.total(), pairs.len() as u64);
        }
    }
}
