use std::io::Write;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::run::StepRecord;

/// `step,loss,alpha_1..alpha_K,margin_1..margin_K,wallclock_ms`
pub fn metrics_header(k: usize) -> String {
    let mut cols = vec!["step".to_string(), "loss".to_string()];
    cols.extend((1..=k).map(|i| format!("alpha_{i}")));
    cols.extend((1..=k).map(|i| format!("margin_{i}")));
    cols.push("wallclock_ms".to_string());
    cols.join(",")
}

/// Floats use Rust's shortest round-trip formatting.
pub fn metrics_row(r: &StepRecord) -> String {
    let mut cols = vec![r.step.to_string(), r.loss.to_string()];
    cols.extend(r.alphas.iter().map(f64::to_string));
    cols.extend(r.margins.iter().map(f64::to_string));
    cols.push(r.wallclock_ms.to_string());
    cols.join(",")
}

/// CSV writer that flushes after every row.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W, k: usize) -> std::io::Result<Self> {
        writeln!(out, "{}", metrics_header(k))?;
        out.flush()?;
        Ok(Self { out })
    }

    pub fn write(&mut self, r: &StepRecord) -> std::io::Result<()> {
        writeln!(self.out, "{}", metrics_row(r))?;
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Everything needed to reconstruct a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_sha256: String,
    pub seed: u64,
    pub weight_seed: u64,
    pub model_seed: u64,
    pub template_version: String,
    pub git_revision: String,
    pub dataset_sha256: String,
    pub dataset_size: usize,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub final_margins: Vec<f64>,
    pub dimensions: Vec<String>,
    pub config: TrainConfig,
}
