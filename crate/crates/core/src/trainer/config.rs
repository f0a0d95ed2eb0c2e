use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::policy::ModelConfig;
use crate::prefdata::DimensionCatalog;

use super::TrainerError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Amopo,
    Simpo,
    Dpo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightPolicyKind {
    Gaussian,
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Training run settings. Loaded from TOML; every key is optional.
///
/// ```toml
/// epochs = 12
/// batch_size = 8
/// learning_rate = 0.05
/// objective = "amopo"
/// weight_policy = "gaussian"
/// dimensions = ["helpfulness", "correctness", "instruction_following"]
///
/// [model]
/// embed_dim = 32
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub beta: f64,
    pub gamma: f64,
    pub length_normalize: bool,
    pub objective: Objective,
    pub weight_policy: WeightPolicyKind,
    /// One positive ratio per dimension; empty means equal weights.
    pub fixed_ratios: Vec<f64>,
    pub weight_seed: u64,
    /// Seeds the per-epoch batch permutation.
    pub seed: u64,
    pub dimensions: Vec<String>,
    /// SimPO on a multi-dimension dataset: score the raw prompt once.
    pub collapse_dimensions: bool,
    pub grad_accum_steps: usize,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// When false the wallclock column is written as 0 so metrics are byte-stable.
    pub record_wallclock: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 8,
            learning_rate: 0.05,
            optimizer: OptimizerKind::Sgd,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            beta: 0.8,
            gamma: 2.0,
            length_normalize: true,
            objective: Objective::Amopo,
            weight_policy: WeightPolicyKind::Gaussian,
            fixed_ratios: Vec::new(),
            weight_seed: 1,
            seed: 0,
            dimensions: DimensionCatalog::builtin().names(),
            collapse_dimensions: false,
            grad_accum_steps: 1,
            checkpoint_every: 0,
            record_wallclock: true,
            model: ModelConfig::default(),
        }
    }
}

fn bad(key: &str, message: impl Into<String>) -> TrainerError {
    TrainerError::Config {
        key: key.to_string(),
        message: message.into(),
    }
}

/// Maps a serde error message like "unknown field `foo`" to the key name.
fn key_of(message: &str) -> String {
    message
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "<config>".to_string())
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainerError> {
        toml::from_str(text).map_err(|e| {
            let m = e.message().to_string();
            bad(&key_of(&m), m)
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key=value` overrides. Dotted keys reach nested tables
    /// (`model.embed_dim=16`). Values are parsed as TOML, falling back to a
    /// bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, TrainerError> {
        let mut table = toml::Table::try_from(self).expect("config serializes");
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| bad(o, "override must look like key=value"))?;
            let key = key.trim();
            let raw = raw.trim();
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let parts: Vec<&str> = key.split('.').collect();
            let mut cur = &mut table;
            for p in &parts[..parts.len() - 1] {
                cur = cur
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| bad(key, format!("`{p}` is not a table")))?;
            }
            cur.insert(parts[parts.len() - 1].to_string(), value);
            let check: Result<Self, _> = toml::Value::Table(table.clone()).try_into();
            if let Err(e) = check {
                return Err(bad(key, e.message().to_string()));
            }
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| bad("<config>", e.message().to_string()))
    }

    pub fn k(&self) -> usize {
        if self.collapse_dimensions {
            1
        } else {
            self.dimensions.len()
        }
    }

    /// Checks every invariant; the error names the offending key.
    pub fn validate(&self) -> Result<(), TrainerError> {
        if self.epochs < 1 {
            return Err(bad("epochs", "must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(bad("batch_size", "must be at least 1"));
        }
        if self.grad_accum_steps < 1 {
            return Err(bad("grad_accum_steps", "must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(bad("learning_rate", "must be finite and non-negative"));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(bad("beta", "must be positive"));
        }
        if !self.gamma.is_finite() {
            return Err(bad("gamma", "must be finite"));
        }
        if self.optimizer == OptimizerKind::Adam {
            for (key, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
                if !(0.0..1.0).contains(&v) {
                    return Err(bad(key, "must lie in [0, 1)"));
                }
            }
            if !(self.adam_eps > 0.0) {
                return Err(bad("adam_eps", "must be positive"));
            }
        }
        if self.dimensions.is_empty() {
            return Err(bad("dimensions", "at least one dimension is required"));
        }
        let cat = DimensionCatalog::builtin();
        for (i, d) in self.dimensions.iter().enumerate() {
            if cat.get(d).is_none() {
                return Err(bad("dimensions", format!("unknown dimension `{d}`")));
            }
            if self.dimensions[..i].contains(d) {
                return Err(bad("dimensions", format!("`{d}` listed twice")));
            }
        }
        if self.collapse_dimensions && self.objective != Objective::Simpo {
            return Err(bad("collapse_dimensions", "only applies to objective = \"simpo\""));
        }
        if self.objective == Objective::Simpo && self.dimensions.len() != 1 && !self.collapse_dimensions {
            return Err(bad(
                "objective",
                format!(
                    "simpo is single-objective but {} dimensions are configured; set collapse_dimensions = true or use one dimension",
                    self.dimensions.len()
                ),
            ));
        }
        if self.weight_policy == WeightPolicyKind::Fixed && !self.fixed_ratios.is_empty() {
            if self.fixed_ratios.len() != self.k() {
                return Err(bad(
                    "fixed_ratios",
                    format!("expected {} ratios, found {}", self.k(), self.fixed_ratios.len()),
                ));
            }
            if self.fixed_ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
                return Err(bad("fixed_ratios", "ratios must be positive"));
            }
        }
        let m = &self.model;
        for (key, v) in [
            ("model.context_window", m.context_window),
            ("model.embed_dim", m.embed_dim),
            ("model.hidden_dim", m.hidden_dim),
        ] {
            if v == 0 {
                return Err(bad(key, "must be positive"));
            }
        }
        if !(m.init_scale.is_finite() && m.init_scale >= 0.0) {
            return Err(bad("model.init_scale", "must be finite and non-negative"));
        }
        Ok(())
    }

    /// Ratios for the fixed policy, defaulting to equal weights.
    pub fn ratios(&self) -> Vec<f64> {
        if self.fixed_ratios.is_empty() {
            vec![1.0; self.k()]
        } else {
            self.fixed_ratios.clone()
        }
    }

    /// SHA-256 of the canonical TOML serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}
