//! Accuracy bookkeeping for incremental runs.
//!
//! `A[t][j]` is top-1 accuracy on task `j`'s test set using the model after
//! task `t` (1-based, `j <= t`). `Seen[t]` is accuracy over the union of test
//! sets `1..=t`, computed as the test-count-weighted combination of row `t`.
//! `Last_t` is `Seen[t]` and `Avg_t` is the mean of `Last_1..=Last_t`.

use serde::{Deserialize, Serialize};

use crate::engine::GateVector;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    /// Test samples per incremental task.
    pub test_counts: Vec<usize>,
    /// Correct predictions, lower-triangular: `correct[t-1].len() == t`.
    pub correct: Vec<Vec<usize>>,
    pub rows: Vec<Vec<f64>>,
    pub seen: Vec<f64>,
}

impl AccuracyMatrix {
    pub fn new(test_counts: Vec<usize>) -> Self {
        Self {
            test_counts,
            correct: Vec::new(),
            rows: Vec::new(),
            seen: Vec::new(),
        }
    }

    /// Number of tasks in the stream.
    pub fn num_tasks(&self) -> usize {
        self.test_counts.len()
    }

    /// Number of completed rows.
    pub fn steps(&self) -> usize {
        self.rows.len()
    }

    /// Appends row `t = steps() + 1` from per-task correct counts for tasks `1..=t`.
    pub fn push_row(&mut self, correct: Vec<usize>) -> Result<()> {
        let t = self.rows.len() + 1;
        if t > self.num_tasks() || correct.len() != t {
            return Err(Error::Index {
                index: correct.len(),
                len: t.min(self.num_tasks()),
            });
        }
        let row: Vec<f64> = correct
            .iter()
            .zip(&self.test_counts)
            .map(|(&c, &n)| if n == 0 { 0.0 } else { c as f64 / n as f64 })
            .collect();
        self.seen.push(weighted_row(&row, &self.test_counts));
        self.rows.push(row);
        self.correct.push(correct);
        Ok(())
    }

    /// `A[t][j]`, 1-based.
    pub fn get(&self, t: usize, j: usize) -> Option<f64> {
        if j == 0 || j > t {
            return None;
        }
        self.rows.get(t.checked_sub(1)?).and_then(|r| r.get(j - 1)).copied()
    }

    /// Accuracy on task `t` alone after task `t` (the newest task).
    pub fn new_task_accuracy(&self, t: usize) -> Option<f64> {
        self.get(t, t)
    }

    /// Test-count-weighted accuracy on tasks `1..t` after task `t`; `None` at `t = 1`.
    pub fn old_task_accuracy(&self, t: usize) -> Option<f64> {
        if t < 2 {
            return None;
        }
        let row = self.rows.get(t - 1)?;
        Some(weighted_row(&row[..t - 1], &self.test_counts[..t - 1]))
    }

    /// Union accuracy from raw counts; agrees with `seen` up to rounding.
    pub fn union_accuracy(&self, t: usize) -> Option<f64> {
        let c = self.correct.get(t.checked_sub(1)?)?;
        let hits: usize = c.iter().sum();
        let total: usize = self.test_counts[..t].iter().sum();
        Some(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
    }
}

/// `sum_j n_j * A_j / sum_j n_j`, accumulated in index order.
pub fn weighted_row(row: &[f64], counts: &[usize]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, &n) in row.iter().zip(counts) {
        num += n as f64 * a;
        den += n as f64;
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// `Last_t`, 1-based.
pub fn last_accuracy(matrix: &AccuracyMatrix, t: usize) -> Result<f64> {
    if t == 0 || t > matrix.steps() {
        return Err(Error::Index {
            index: t,
            len: matrix.steps(),
        });
    }
    Ok(matrix.seen[t - 1])
}

/// `Avg_t = (Last_1 + ... + Last_t) / t`.
pub fn avg_accuracy(last: &[f64], t: usize) -> Result<f64> {
    if t == 0 || t > last.len() {
        return Err(Error::Index {
            index: t,
            len: last.len(),
        });
    }
    Ok(last[..t].iter().sum::<f64>() / t as f64)
}

/// `[Avg_1, ..., Avg_T]` for a full `Last` series.
pub fn avg_series(last: &[f64]) -> Vec<f64> {
    (1..=last.len())
        .map(|t| avg_accuracy(last, t).expect("in range"))
        .collect()
}

/// Fraction of samples whose fired set is exactly `{true task}`.
pub fn routing_accuracy(gates: &[GateVector], true_tasks: &[usize]) -> Result<f64> {
    if gates.len() != true_tasks.len() {
        return Err(Error::Dimension {
            op: "routing_accuracy",
            left: (gates.len(), 1),
            right: (true_tasks.len(), 1),
        });
    }
    if gates.is_empty() {
        return Ok(0.0);
    }
    let exact = gates
        .iter()
        .zip(true_tasks)
        .filter(|(g, &t)| g.fired_tasks() == [t])
        .count();
    Ok(exact as f64 / gates.len() as f64)
}

/// Fraction of samples on which two or more gates fire.
pub fn multi_fire_rate(gates: &[GateVector]) -> f64 {
    if gates.is_empty() {
        return 0.0;
    }
    gates.iter().filter(|g| g.count() >= 2).count() as f64 / gates.len() as f64
}

/// Per-gate firing rate over the samples; index `i` is gate `i + 1`.
pub fn firing_rates(gates: &[GateVector]) -> Vec<f64> {
    let width = gates.iter().map(GateVector::len).max().unwrap_or(0);
    let mut counts = vec![0usize; width];
    for g in gates {
        for (c, &b) in counts.iter_mut().zip(g.bits()) {
            *c += b as usize;
        }
    }
    counts
        .into_iter()
        .map(|c| c as f64 / gates.len().max(1) as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn last_single_task_all_correct() {
        let mut m = AccuracyMatrix::new(vec![40]);
        m.push_row(vec![40]).unwrap();
        assert_eq!(last_accuracy(&m, 1).unwrap(), 1.0);
    }

    #[test]
    fn last_is_weighted_mean() {
        let mut m = AccuracyMatrix::new(vec![20, 20]);
        m.push_row(vec![20]).unwrap();
        m.push_row(vec![20, 10]).unwrap();
        assert_eq!(last_accuracy(&m, 2).unwrap(), 0.75);
        assert_eq!(m.old_task_accuracy(2), Some(1.0));
        assert_eq!(m.new_task_accuracy(2), Some(0.5));
        assert!(last_accuracy(&m, 3).is_err());
        assert!(last_accuracy(&m, 0).is_err());
    }

    #[test]
    fn avg_values() {
        assert!((avg_accuracy(&[0.8, 0.7, 0.6], 3).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(avg_accuracy(&[0.3; 4], 4).unwrap(), 0.3);
        assert!(avg_accuracy(&[], 1).is_err());
    }

    #[test]
    fn rows_must_grow_by_one() {
        let mut m = AccuracyMatrix::new(vec![10, 10]);
        assert!(m.push_row(vec![1, 2]).is_err());
        m.push_row(vec![1]).unwrap();
        m.push_row(vec![1, 2]).unwrap();
        assert!(m.push_row(vec![1, 2, 3]).is_err());
        assert_eq!(m.get(1, 2), None);
    }

    #[test]
    fn routing_oracle_and_functional() {
        let oracle = vec![
            GateVector::new(vec![true, false]),
            GateVector::new(vec![false, true]),
        ];
        assert_eq!(routing_accuracy(&oracle, &[1, 2]).unwrap(), 1.0);
        let functional = vec![GateVector::new(vec![true, true]); 2];
        assert_eq!(routing_accuracy(&functional, &[1, 2]).unwrap(), 0.0);
        assert_eq!(multi_fire_rate(&functional), 1.0);
        assert_eq!(firing_rates(&oracle), vec![0.5, 0.5]);
    }
}
