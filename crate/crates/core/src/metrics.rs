//! Stream-level scores: accuracy, per-group and worst-group accuracy,
//! macro-F1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub per_group: Vec<f64>,
    pub worst_group: f64,
    pub macro_f1: f64,
}

/// Counts from which every metric is derived; additive across batches.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub group_correct: Vec<usize>,
    pub group_total: Vec<usize>,
}

impl Tally {
    pub fn new(num_classes: usize, num_groups: usize) -> Self {
        Tally {
            confusion: vec![vec![0; num_classes]; num_classes],
            group_correct: vec![0; num_groups],
            group_total: vec![0; num_groups],
        }
    }

    pub fn from_predictions(
        predictions: &[usize],
        labels: &[usize],
        groups: &[usize],
        num_classes: usize,
        num_groups: usize,
    ) -> Result<Self> {
        let mut t = Tally::new(num_classes, num_groups);
        t.record(predictions, labels, groups)?;
        Ok(t)
    }

    pub fn record(&mut self, predictions: &[usize], labels: &[usize], groups: &[usize]) -> Result<()> {
        if predictions.len() != labels.len() || labels.len() != groups.len() {
            return Err(Error::shape(
                "metrics",
                format!(
                    "{} predictions, {} labels, {} groups",
                    predictions.len(),
                    labels.len(),
                    groups.len()
                ),
            ));
        }
        let k = self.confusion.len();
        for ((&p, &y), &g) in predictions.iter().zip(labels).zip(groups) {
            if p >= k || y >= k {
                return Err(Error::Config(format!("class index out of range for {k} classes")));
            }
            if g >= self.group_total.len() {
                return Err(Error::Config(format!(
                    "group id {g} out of range for {} groups",
                    self.group_total.len()
                )));
            }
            self.confusion[y][p] += 1;
            self.group_total[g] += 1;
            if p == y {
                self.group_correct[g] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Tally) -> Result<()> {
        if self.confusion.len() != other.confusion.len() || self.group_total.len() != other.group_total.len() {
            return Err(Error::shape("tally merge", "class or group counts differ".to_string()));
        }
        for (a, b) in self.confusion.iter_mut().zip(&other.confusion) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.group_correct.iter_mut().zip(&other.group_correct) {
            *a += b;
        }
        for (a, b) in self.group_total.iter_mut().zip(&other.group_total) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.group_total.iter().sum()
    }

    pub fn correct(&self) -> usize {
        (0..self.confusion.len()).map(|c| self.confusion[c][c]).sum()
    }

    /// Errors when any group is empty.
    pub fn metrics(&self) -> Result<Metrics> {
        if let Some(g) = self.group_total.iter().position(|&n| n == 0) {
            return Err(Error::Config(format!("group {g} has no examples")));
        }
        let per_group: Vec<f64> = self
            .group_correct
            .iter()
            .zip(&self.group_total)
            .map(|(&c, &n)| c as f64 / n as f64)
            .collect();
        let worst_group = per_group.iter().copied().fold(f64::INFINITY, f64::min);

        let k = self.confusion.len();
        let mut f1_sum = 0.0;
        for c in 0..k {
            let tp = self.confusion[c][c] as f64;
            let predicted: usize = (0..k).map(|y| self.confusion[y][c]).sum();
            let actual: usize = self.confusion[c].iter().sum();
            let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
            let recall = if actual == 0 { 0.0 } else { tp / actual as f64 };
            if precision + recall > 0.0 {
                f1_sum += 2.0 * precision * recall / (precision + recall);
            }
        }

        Ok(Metrics {
            accuracy: self.correct() as f64 / self.total() as f64,
            per_group,
            worst_group,
            macro_f1: f1_sum / k as f64,
        })
    }
}

pub fn metrics(
    predictions: &[usize],
    labels: &[usize],
    groups: &[usize],
    num_classes: usize,
    num_groups: usize,
) -> Result<Metrics> {
    Tally::from_predictions(predictions, labels, groups, num_classes, num_groups)?.metrics()
}
