use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    /// Global optimizer step, 1-based.
    pub step: usize,
    pub lr: f64,
    /// Same order as [`LossCurve::names`]; the first entry is the total.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub names: Vec<String>,
    pub steps: Vec<StepRecord>,
}

impl LossCurve {
    pub fn new(names: &[&str]) -> Self {
        Self {
            names: names.iter().map(|s| s.to_string()).collect(),
            steps: Vec::new(),
        }
    }

    pub fn push(&mut self, epoch: usize, step: usize, lr: f64, values: &[f64]) {
        self.steps.push(StepRecord {
            epoch,
            step,
            lr,
            values: values.to_vec(),
        });
    }

    pub fn totals(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.values[0]).collect()
    }

    pub fn first_total(&self) -> Option<f64> {
        self.steps.first().map(|s| s.values[0])
    }

    pub fn last_total(&self) -> Option<f64> {
        self.steps.last().map(|s| s.values[0])
    }

    /// Mean of each column over the steps of one epoch.
    pub fn epoch_means(&self, epoch: usize) -> Option<Vec<f64>> {
        let rows: Vec<&StepRecord> = self.steps.iter().filter(|s| s.epoch == epoch).collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some(
            (0..self.names.len())
                .map(|i| rows.iter().map(|r| r.values[i]).sum::<f64>() / n)
                .collect(),
        )
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}
