//! Continual-learning metrics over an accuracy matrix.
//!
//! `a[i][j]` is the test accuracy on task `j` (by task id) after training
//! phase `i`; `order[i]` is the task trained in phase `i`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub order: Vec<usize>,
    pub rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(order: Vec<usize>) -> Self {
        Self { order, rows: Vec::new() }
    }

    pub fn from_rows(order: Vec<usize>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new(order);
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    pub fn n_tasks(&self) -> usize {
        self.order.len()
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.n_tasks() {
            return Err(Error::Contract(format!(
                "row of length {} for {} tasks",
                row.len(),
                self.n_tasks()
            )));
        }
        if self.rows.len() == self.n_tasks() {
            return Err(Error::Contract("accuracy matrix already complete".into()));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("accuracy {v} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.n_tasks()
    }

    fn require_complete(&self) -> Result<()> {
        if !self.is_complete() {
            return Err(Error::Contract(format!(
                "accuracy matrix has {} of {} rows",
                self.rows.len(),
                self.n_tasks()
            )));
        }
        Ok(())
    }

    fn require_transfer(&self) -> Result<usize> {
        self.require_complete()?;
        let n = self.n_tasks();
        if n < 2 {
            return Err(Error::Contract("transfer metrics need at least 2 tasks".into()));
        }
        Ok(n)
    }
}

/// Mean of the final row.
pub fn avg_accuracy(m: &AccuracyMatrix) -> Result<f64> {
    m.require_complete()?;
    let last = m.rows.last().ok_or_else(|| Error::Contract("empty accuracy matrix".into()))?;
    Ok(last.iter().sum::<f64>() / last.len() as f64)
}

/// Mean over all but the last phase of (final accuracy - accuracy right after
/// that phase's task was learned).
pub fn backward_transfer(m: &AccuracyMatrix) -> Result<f64> {
    let n = m.require_transfer()?;
    let last = &m.rows[n - 1];
    let sum: f64 = (0..n - 1)
        .map(|j| {
            let t = m.order[j];
            last[t] - m.rows[j][t]
        })
        .sum();
    Ok(sum / (n - 1) as f64)
}

/// Mean over phases `j >= 1` of (accuracy on the phase-`j` task just before it
/// is trained - chance for that task).
pub fn forward_transfer(m: &AccuracyMatrix, chance: &[f64]) -> Result<f64> {
    let n = m.require_transfer()?;
    if chance.len() != n {
        return Err(Error::Contract(format!(
            "chance vector of length {} for {n} tasks",
            chance.len()
        )));
    }
    let sum: f64 = (1..n)
        .map(|j| {
            let t = m.order[j];
            m.rows[j - 1][t] - chance[t]
        })
        .sum();
    Ok(sum / (n - 1) as f64)
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn worked() -> AccuracyMatrix {
        AccuracyMatrix::from_rows(vec![0, 1], vec![vec![0.9, 0.4], vec![0.7, 0.8]]).unwrap()
    }

    #[test]
    fn worked_example() {
        let m = worked();
        assert!((avg_accuracy(&m).unwrap() - 0.75).abs() < 1e-15);
        assert!((backward_transfer(&m).unwrap() + 0.2).abs() < 1e-15);
        assert!((forward_transfer(&m, &[0.5, 0.5]).unwrap() + 0.1).abs() < 1e-15);
    }

    #[test]
    fn constant_and_perfect() {
        let m = AccuracyMatrix::from_rows(vec![0, 1, 2], vec![vec![0.3; 3]; 3]).unwrap();
        assert_eq!(avg_accuracy(&m).unwrap(), 0.3);
        let ones = AccuracyMatrix::from_rows(vec![0, 1, 2], vec![vec![1.0; 3]; 3]).unwrap();
        assert_eq!(avg_accuracy(&ones).unwrap(), 1.0);
    }

    #[test]
    fn no_forgetting_gives_zero_bwt() {
        let m = AccuracyMatrix::from_rows(
            vec![1, 0, 2],
            vec![vec![0.2, 0.8, 0.1], vec![0.6, 0.8, 0.3], vec![0.6, 0.8, 0.9]],
        )
        .unwrap();
        assert_eq!(backward_transfer(&m).unwrap(), 0.0);
    }

    #[test]
    fn positive_bwt_when_later_training_helps() {
        let m = AccuracyMatrix::from_rows(vec![0, 1], vec![vec![0.5, 0.5], vec![0.7, 0.9]]).unwrap();
        assert!(backward_transfer(&m).unwrap() > 0.0);
    }

    #[test]
    fn fwt_at_chance_is_zero_and_single_term() {
        let m = AccuracyMatrix::from_rows(vec![0, 1], vec![vec![0.9, 0.25], vec![0.9, 0.8]]).unwrap();
        assert_eq!(forward_transfer(&m, &[0.25, 0.25]).unwrap(), 0.0);
        let m = AccuracyMatrix::from_rows(vec![0, 1], vec![vec![0.9, 0.7], vec![0.9, 0.8]]).unwrap();
        assert!((forward_transfer(&m, &[0.5, 0.5]).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn contract_errors() {
        let single = AccuracyMatrix::from_rows(vec![0], vec![vec![0.5]]).unwrap();
        assert!(backward_transfer(&single).is_err());
        assert!(forward_transfer(&single, &[0.5]).is_err());
        let mut partial = AccuracyMatrix::new(vec![0, 1]);
        partial.push_row(vec![0.5, 0.5]).unwrap();
        assert!(avg_accuracy(&partial).is_err());
        assert!(partial.push_row(vec![1.5, 0.0]).is_err());
    }

    #[test]
    fn pop_std() {
        let (m, s) = mean_std(&[0.62, 0.64]);
        assert!((m - 0.63).abs() < 1e-15);
        assert!((s - 0.01).abs() < 1e-15);
        assert_eq!(mean_std(&[0.6, 0.6, 0.6]), (0.6, 0.0));
    }
}
