//! Accuracy bookkeeping and the continual-learning metrics derived from it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::HarnessError;

/// Lower-triangular accuracy record: entry (i, j) with j <= i is the test
/// accuracy of task j right after task i was learnt.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        AccuracyMatrix { rows: Vec::new() }
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<(), HarnessError> {
        if row.len() != self.rows.len() + 1 {
            return Err(HarnessError::BadData(format!(
                "row {} must have {} entries, got {}",
                self.rows.len(),
                self.rows.len() + 1,
                row.len()
            )));
        }
        if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(HarnessError::BadData("accuracy outside [0, 1]".into()));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i).and_then(|r| r.get(j)).copied()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// CSV with one line per row; floats are written exactly (shortest
    /// round-trip form) so persisted matrices reproduce metrics bit for bit.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, HarnessError> {
        let mut m = AccuracyMatrix::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let row: Result<Vec<f64>, _> = line.split(',').map(|c| c.trim().parse::<f64>()).collect();
            let row = row.map_err(|_| HarnessError::BadData(format!("bad accuracy row '{line}'")))?;
            m.push_row(row)?;
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Final accuracy averaged over all tasks.
    pub acc: f64,
    /// Average change of old-task accuracy after the last task; absent for
    /// a single task.
    pub bwt: Option<f64>,
}

/// ACC and BWT from a fully populated matrix.
pub fn compute_metrics(a: &AccuracyMatrix) -> Result<Metrics, HarnessError> {
    let t = a.num_tasks();
    if t == 0 {
        return Err(HarnessError::BadData("empty accuracy matrix".into()));
    }
    let last = &a.rows()[t - 1];
    let acc = last.iter().sum::<f64>() / t as f64;
    let bwt = if t >= 2 {
        let sum: f64 = (0..t - 1).map(|i| last[i] - a.get(i, i).unwrap()).sum();
        Some(sum / (t - 1) as f64)
    } else {
        None
    };
    Ok(Metrics { acc, bwt })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BwtS {
    /// (new task t, selected old task j, A[t][j] - A[t-1][j])
    pub pairs: Vec<(usize, usize, f64)>,
    pub average: Option<f64>,
}

/// Backward transfer restricted to each new task's selected old task.
pub fn compute_bwt_s(a: &AccuracyMatrix, selected: &BTreeMap<usize, usize>) -> Result<BwtS, HarnessError> {
    let mut pairs = Vec::new();
    for (&t, &j) in selected {
        if t == 0 || j >= t || a.get(t, j).is_none() {
            return Err(HarnessError::BadData(format!("selection ({t}, {j}) references unlearnt tasks")));
        }
        let v = a.get(t, j).unwrap() - a.get(t - 1, j).unwrap();
        pairs.push((t, j, v));
    }
    let average = if pairs.is_empty() {
        None
    } else {
        Some(pairs.iter().map(|p| p.2).sum::<f64>() / pairs.len() as f64)
    };
    Ok(BwtS { pairs, average })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Fwt {
    /// A[i][i] - scratch_i per task.
    pub per_task: Vec<f64>,
    /// Mean over every task after the first.
    pub mean: Option<f64>,
}

/// Forward transfer against per-task from-scratch accuracies.
pub fn compute_fwt(a: &AccuracyMatrix, scratch: &[f64]) -> Result<Fwt, HarnessError> {
    let t = a.num_tasks();
    if scratch.len() != t {
        return Err(HarnessError::BadData(format!("{t} tasks but {} scratch runs", scratch.len())));
    }
    let per_task: Vec<f64> = (0..t).map(|i| a.get(i, i).unwrap() - scratch[i]).collect();
    let mean = if t >= 2 {
        Some(per_task[1..].iter().sum::<f64>() / (t - 1) as f64)
    } else {
        None
    };
    Ok(Fwt { per_task, mean })
}
