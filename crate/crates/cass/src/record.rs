//! Persisted run results: one record per seeded run, JSON on disk.
//!
//! A record carries the full resolved config snapshot, so a run can be
//! re-executed bit-identically from its record alone. Aborted runs keep
//! their partial record with a failure status instead of vanishing.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::MetricReport;

/// Operation counters that back the efficiency comparisons.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostCounters {
    pub augmentation_applications: u64,
    pub forward_passes: u64,
    pub parameter_copy_ops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Aborted { reason: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    /// Training method tag: "cass", "dino", or an externally supplied tag.
    pub method: String,
    pub seed: u64,
    /// Fully resolved configuration, sufficient to re-execute the run.
    pub config_snapshot: serde_json::Value,
    /// Mean loss per epoch.
    pub loss_curve: Vec<f64>,
    pub counters: CostCounters,
    /// Seconds per phase, e.g. "pretrain", "finetune", "evaluate".
    pub wall_clock_seconds: BTreeMap<String, f64>,
    pub metrics: Vec<MetricReport>,
    pub checkpoints: Vec<String>,
    pub status: RunStatus,
}

impl RunRecord {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunRecord> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Stable run id derived from the method, seed, and config content, so a
/// rerun with identical inputs lands on the same id.
pub fn deterministic_run_id(method: &str, seed: u64, config: &serde_json::Value) -> String {
    let text = format!("{method}|{seed}|{config}");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{method}-seed{seed}-{h:016x}")
}
