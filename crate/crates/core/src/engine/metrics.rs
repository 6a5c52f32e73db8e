//! Accuracy matrix, ACC, BWT and confusion counts.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `rows[t][i]` is the accuracy on task `i`'s test split after learning
/// task `t`, for `i <= t`. Rows that were never evaluated are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Option<Vec<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            rows: vec![None; tasks],
        }
    }

    /// Builds a matrix from complete lower-triangular rows.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new(rows.len());
        for (t, row) in rows.into_iter().enumerate() {
            m.set_row(t, row)?;
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, t: usize) -> Option<&[f64]> {
        self.rows.get(t).and_then(|r| r.as_deref())
    }

    pub fn get(&self, t: usize, i: usize) -> Option<f64> {
        self.row(t).and_then(|r| r.get(i).copied())
    }

    /// Records the row for task `t`. Rows are write-once.
    pub fn set_row(&mut self, t: usize, row: Vec<f64>) -> Result<()> {
        let n = self.rows.len();
        let slot = self
            .rows
            .get_mut(t)
            .ok_or_else(|| Error::Metrics(format!("row {t} outside a {n}-task matrix")))?;
        if slot.is_some() {
            return Err(Error::Metrics(format!("row {t} was already recorded")));
        }
        if row.len() != t + 1 {
            return Err(Error::Metrics(format!("row {t} needs {} entries, got {}", t + 1, row.len())));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Metrics(format!("accuracy {v} outside [0, 1] in row {t}")));
        }
        *slot = Some(row);
        Ok(())
    }

    pub fn final_row(&self) -> Option<&[f64]> {
        self.rows.last().and_then(|r| r.as_deref())
    }

    /// Mean accuracy over seen tasks after each task, where evaluated.
    pub fn average_curve(&self) -> Vec<Option<f64>> {
        self.rows
            .iter()
            .map(|r| r.as_ref().map(|r| r.iter().sum::<f64>() / r.len() as f64))
            .collect()
    }

    /// Header `after_task,task_0,..`; one line per task with empty cells
    /// where no value exists. Values use shortest round-trip formatting.
    pub fn to_csv(&self) -> String {
        let t = self.tasks();
        let mut s = String::from("after_task");
        (0..t).for_each(|i| write!(s, ",task_{i}").unwrap());
        s.push('\n');
        for (r, row) in self.rows.iter().enumerate() {
            write!(s, "{r}").unwrap();
            for i in 0..t {
                s.push(',');
                if let Some(v) = row.as_ref().and_then(|row| row.get(i)) {
                    write!(s, "{v}").unwrap();
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Metrics(format!("accuracy matrix csv: {msg}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let t = header.split(',').count().saturating_sub(1);
        let mut m = Self::new(t);
        for (r, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != t + 1 {
                return Err(bad(format!("line {} has {} cells, expected {}", r + 2, cells.len(), t + 1)));
            }
            let vals = cells[1..]
                .iter()
                .filter(|c| !c.trim().is_empty())
                .map(|c| c.trim().parse::<f64>().map_err(|e| bad(format!("line {}: {e}", r + 2))))
                .collect::<Result<Vec<_>>>()?;
            if !vals.is_empty() {
                m.set_row(r, vals)?;
            }
        }
        Ok(m)
    }
}

/// Mean of the final row.
pub fn compute_acc(r: &AccuracyMatrix) -> Result<f64> {
    let last = r
        .final_row()
        .ok_or_else(|| Error::Metrics("final row of the accuracy matrix is missing".into()))?;
    Ok(last.iter().sum::<f64>() / last.len() as f64)
}

/// `(1/(T-1)) Σ_{i<T-1} (R[T-1][i] - R[i][i])`, zero-based.
pub fn compute_bwt(r: &AccuracyMatrix) -> Result<f64> {
    let t = r.tasks();
    if t < 2 {
        return Err(Error::Metrics(format!("backward transfer needs at least 2 tasks, got {t}")));
    }
    let last = r
        .final_row()
        .ok_or_else(|| Error::Metrics("final row of the accuracy matrix is missing".into()))?;
    let mut sum = 0.0;
    for (i, &end) in last.iter().enumerate().take(t - 1) {
        let learned = r
            .get(i, i)
            .ok_or_else(|| Error::Metrics(format!("diagonal entry {i} is missing")))?;
        sum += end - learned;
    }
    Ok(sum / (t - 1) as f64)
}

/// Counts indexed `[true class][predicted class]` over head rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    /// Share of the two classes' clips predicted as the other one.
    pub fn pair_confusion(&self, a: usize, b: usize) -> f64 {
        let n: u64 = self.counts[a].iter().sum::<u64>() + self.counts[b].iter().sum::<u64>();
        if n == 0 {
            return 0.0;
        }
        (self.counts[a][b] + self.counts[b][a]) as f64 / n as f64
    }

    pub fn to_csv(&self, names: &[String]) -> String {
        let mut s = String::from("true\\predicted");
        names.iter().for_each(|n| write!(s, ",{n}").unwrap());
        s.push('\n');
        for (name, row) in names.iter().zip(&self.counts) {
            s.push_str(name);
            row.iter().for_each(|c| write!(s, ",{c}").unwrap());
            s.push('\n');
        }
        s
    }
}
