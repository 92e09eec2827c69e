//! Metric reports written as JSON and CSV.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub name: String,
    /// `None` when undefined for this run (for example an empty partition).
    pub value: Option<f64>,
    pub threshold: Option<f64>,
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub seed: u64,
    pub config_hash: String,
    pub pairs_evaluated: usize,
    pub pairs_skipped: usize,
    pub metrics: Vec<Metric>,
    /// Full configuration of the run.
    pub config: serde_json::Value,
}

/// SHA-256 of the compact JSON form of `config`, hex encoded.
pub fn config_hash(config: &serde_json::Value) -> String {
    let text = serde_json::to_string(config).expect("JSON values serialize");
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl MetricsReport {
    pub fn new(task: &str, seed: u64, config: serde_json::Value) -> Self {
        Self {
            task: task.into(),
            seed,
            config_hash: config_hash(&config),
            pairs_evaluated: 0,
            pairs_skipped: 0,
            metrics: Vec::new(),
            config,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Option<f64>, threshold: Option<f64>, unit: &str) {
        self.metrics.push(Metric {
            name: name.into(),
            value: value.filter(|v| v.is_finite()),
            threshold,
            unit: unit.into(),
        });
    }

    pub fn get(&self, name: &str) -> Option<&Metric> {
        self.metrics.iter().find(|m| m.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["task", "seed", "config_hash", "metric", "threshold", "unit", "value"])?;
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let seed = self.seed.to_string();
        for m in &self.metrics {
            w.write_record([
                self.task.as_str(),
                seed.as_str(),
                self.config_hash.as_str(),
                m.name.as_str(),
                &fmt(m.threshold),
                m.unit.as_str(),
                &fmt(m.value),
            ])?;
        }
        for (name, v) in [("pairs_evaluated", self.pairs_evaluated), ("pairs_skipped", self.pairs_skipped)] {
            w.write_record([self.task.as_str(), seed.as_str(), self.config_hash.as_str(), name, "", "count", &v.to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidParam(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("report.csv");
        fs::write(&csv, self.to_csv()?).map_err(|e| Error::io(&csv, e))
    }
}
