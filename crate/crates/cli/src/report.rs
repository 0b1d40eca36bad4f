//! Structured run summary, written on every exit path.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tpa_transport::recon_free::ErrorMetrics;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Everything except `timings` is a function of the config and seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub success: bool,
    pub exit_code: i32,
    pub error: Option<String>,
    /// The parsed config, as run.
    pub config: Option<Value>,
    /// Convergence histories by name.
    pub histories: BTreeMap<String, Vec<f64>>,
    /// Error metrics against ground truth, by name.
    pub errors: BTreeMap<String, ErrorMetrics>,
    /// Admissibility reports, certificates and other summaries, by name.
    pub summaries: BTreeMap<String, Value>,
    pub checks: Vec<Check>,
    /// Files written, relative to the output directory.
    pub artifacts: Vec<String>,
    /// Wall-clock seconds by phase.
    pub timings: BTreeMap<String, f64>,
}

impl RunReport {
    pub fn new(command: &str) -> Self {
        RunReport {
            command: command.to_string(),
            ..Default::default()
        }
    }

    pub fn history(&mut self, name: impl Into<String>, h: &[f64]) {
        self.histories.insert(name.into(), h.to_vec());
    }

    pub fn summary(&mut self, name: impl Into<String>, v: impl Serialize) {
        let v = serde_json::to_value(v)
            .unwrap_or_else(|e| Value::String(format!("unserializable: {e}")));
        self.summaries.insert(name.into(), v);
    }

    pub fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    pub fn failed_checks(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect()
    }

    /// Copy without timings, for determinism comparisons.
    pub fn without_timings(&self) -> Self {
        RunReport {
            timings: BTreeMap::new(),
            ..self.clone()
        }
    }
}
