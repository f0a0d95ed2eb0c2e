//! Self-checks run by the CLI and the acceptance suite: an end-to-end
//! finite-difference gradient check of the AMoPO loss, and seeded identity
//! checks of the loss algebra.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::Serialize;

use crate::autodiff::{finite_difference_grad, Graph, OpKind};
use crate::objectives::{amopo_loss, mobt_probability, mobt_probability_product, simpo_loss, DimLogliks, ObjectiveConfig, PairLogliks};
use crate::policy::{ModelConfig, PolicyModel, Tokenizer};
use crate::prefdata::{map_prompt, DimensionCatalog, DimensionSpec, PreferenceExample};
use crate::trainer::TrainerError;
use crate::weights::{normalize_weights, pool_dimension_probs, GaussianPolicy, WeightPolicy};

/// Size presets for the gradient check.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelSize {
    /// 370 parameters.
    Tiny,
    /// 558 parameters.
    Small,
}

impl std::str::FromStr for ModelSize {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "tiny" => Ok(Self::Tiny),
            "small" => Ok(Self::Small),
            _ => Err(format!("unknown model size `{s}` (expected tiny or small)")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    pub weight_seed: u64,
    pub examples: Vec<PreferenceExample>,
    pub dimensions: Vec<DimensionSpec>,
    pub beta: f64,
    pub gamma: f64,
    pub length_normalize: bool,
    /// Central-difference step.
    pub h: f64,
    /// Backward fault injection, for negative controls.
    pub corrupt: Option<(OpKind, f64)>,
}

fn pair(prompt: &str, chosen: &str, rejected: &str, scores: [i64; 3]) -> PreferenceExample {
    let names = ["helpfulness", "correctness", "instruction_following"];
    PreferenceExample {
        prompt: prompt.into(),
        chosen: chosen.into(),
        rejected: rejected.into(),
        scores: names.iter().zip(scores).map(|(n, s)| (n.to_string(), s)).collect::<BTreeMap<_, _>>(),
        rejected_scores: None,
    }
}

impl GradCheckConfig {
    /// Two-example batch, three dimensions, lowercase alphabet model.
    pub fn toy(seed: u64, size: ModelSize) -> Self {
        let (embed_dim, hidden_dim) = match size {
            ModelSize::Tiny => (2, 4),
            ModelSize::Small => (3, 6),
        };
        Self {
            model: ModelConfig {
                context_window: 64,
                embed_dim,
                hidden_dim,
                layers: 2,
                init_scale: 0.5,
                seed,
                tokenizer: Tokenizer::with_alphabet("abcdefghijklmnopqrstuvwxyz"),
            },
            weight_seed: seed,
            examples: vec![
                pair("name the lamp", "soft lamp", "lamp", [4, 3, 4]),
                pair("name the river", "green river", "a rock", [3, 4, 2]),
            ],
            dimensions: DimensionCatalog::builtin().dimensions,
            beta: 0.8,
            gamma: 2.0,
            length_normalize: true,
            h: 1e-5,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub num_params: usize,
    pub loss: f64,
    pub alphas: Vec<f64>,
    /// Largest `|a − n| / max(|a|, |n|, 1e-3)` over all parameters.
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Floor on the denominator of the relative error, so parameters with
/// near-zero gradients are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERROR_FLOOR)
}

struct Tokenized {
    prompts: Vec<Vec<usize>>,
    chosen: Vec<usize>,
    rejected: Vec<usize>,
}

/// Compares the backward pass of the full pipeline (model forward, per
/// dimension log-likelihoods, AMoPO loss) against central differences. The
/// weights are sampled once at the starting point and held fixed, matching
/// how they enter the loss as constants.
pub fn gradient_check(cfg: &GradCheckConfig) -> Result<GradCheckReport, TrainerError> {
    let model = PolicyModel::<f64>::new(cfg.model.clone());
    let tk = model.tokenizer();
    let data: Vec<Tokenized> = cfg
        .examples
        .iter()
        .map(|ex| {
            let prompts = cfg
                .dimensions
                .iter()
                .map(|d| Ok(tk.encode(&map_prompt(&ex.prompt, d, ex.scores[&d.name])?)))
                .collect::<Result<Vec<_>, crate::prefdata::DataError>>()?;
            Ok(Tokenized {
                prompts,
                chosen: tk.encode(&ex.chosen),
                rejected: tk.encode(&ex.rejected),
            })
        })
        .collect::<Result<_, TrainerError>>()?;
    let obj = ObjectiveConfig::new(cfg.beta, cfg.gamma, cfg.length_normalize);
    let k = cfg.dimensions.len();

    let build = |m: &PolicyModel<f64>, g: &mut Graph<f64>| -> Result<_, TrainerError> {
        let bound = m.bind(g)?;
        let mut pairs = Vec::new();
        let mut tw = vec![Vec::new(); k];
        let mut tl = vec![Vec::new(); k];
        for ex in &data {
            let mut dims = Vec::new();
            for (d, p) in ex.prompts.iter().enumerate() {
                let w = bound.score_response(g, p, &ex.chosen)?;
                let l = bound.score_response(g, p, &ex.rejected)?;
                dims.push(DimLogliks::from_evals(&w, &l));
                tw[d].push(w.trace);
                tl[d].push(l.trace);
            }
            pairs.push(PairLogliks::new(dims));
        }
        Ok((bound.handles().to_vec(), pairs, tw, tl))
    };

    let mut g = Graph::new();
    let (handles, pairs, tw, tl) = build(&model, &mut g)?;
    let pooled = (0..k)
        .map(|d| pool_dimension_probs(&tw[d], &tl[d]))
        .collect::<Result<Vec<_>, _>>()?;
    let weights = GaussianPolicy::new(cfg.weight_seed).assign(&pooled)?;
    let alphas = weights.alphas().to_vec();
    let loss = amopo_loss(&mut g, &pairs, &alphas, &obj)?;
    if let Some((op, factor)) = cfg.corrupt {
        g.corrupt_backward(op, factor);
    }
    let grads = g.backward(loss)?;
    let analytic: Vec<f64> = handles.iter().flat_map(|&h| grads.get_or_zeros(h)).collect();

    let theta = model.flat_params();
    let mut probe = model.clone();
    let numeric = finite_difference_grad(
        |t: &[f64]| -> Result<f64, TrainerError> {
            probe.set_flat_params(t);
            let mut g = Graph::new();
            let (_, pairs, _, _) = build(&probe, &mut g)?;
            let l = amopo_loss(&mut g, &pairs, &alphas, &obj)?;
            Ok(g.item(l))
        },
        &theta,
        cfg.h,
    )
    .map_err(|e| match e {
        crate::autodiff::FiniteDiffError::Eval { source, .. } => source,
        other => TrainerError::Config {
            key: "h".into(),
            message: other.to_string(),
        },
    })?;

    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 || e.is_nan() { (i, e) } else { best });
    let (name, offset) = model.param_name_at(worst_index).expect("index in range");
    Ok(GradCheckReport {
        num_params: theta.len(),
        loss: g.item(loss),
        alphas,
        max_rel_error,
        worst_param: format!("{name}[{offset}]"),
        worst_index,
        worst_analytic: analytic[worst_index],
        worst_numeric: numeric[worst_index],
    })
}

#[derive(Clone, Copy, Debug)]
pub struct IdentityConfig {
    pub seed: u64,
    /// Instances for the sum/product and softmax checks.
    pub instances: usize,
    /// Instances for the single-dimension SimPO reduction.
    pub simpo_instances: usize,
}

impl Default for IdentityConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 1000,
            simpo_instances: 50,
        }
    }
}

pub const SUM_PRODUCT_TOL: f64 = 1e-12;
pub const SIMPO_TOL: f64 = 1e-12;
pub const SOFTMAX_TOL: f64 = 1e-9;

#[derive(Clone, Debug, Serialize)]
pub struct IdentityFailure {
    pub check: &'static str,
    pub error: f64,
    pub instance: serde_json::Value,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct CheckTally {
    pub passed: usize,
    pub total: usize,
    pub max_error: f64,
}

impl CheckTally {
    fn record(&mut self, err: f64, tol: f64) -> bool {
        self.total += 1;
        self.max_error = self.max_error.max(err);
        let ok = err <= tol;
        if ok {
            self.passed += 1;
        }
        ok
    }

    pub fn all_passed(&self) -> bool {
        self.passed == self.total
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct IdentityReport {
    pub sum_product: CheckTally,
    pub simpo_reduction: CheckTally,
    pub softmax: CheckTally,
    pub failures: Vec<IdentityFailure>,
}

impl IdentityReport {
    pub fn all_passed(&self) -> bool {
        self.sum_product.all_passed() && self.simpo_reduction.all_passed() && self.softmax.all_passed()
    }
}

/// Uniform draw from the probability simplex of dimension `k`.
fn simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(Exp1) + f64::MIN_POSITIVE).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Runs the three identity checks over seeded random instances:
/// `Σ α_k log σ(Δ_k) = log Π σ(Δ_k)^α_k`, AMoPO with one dimension and
/// α = [1] against SimPO, and softmax weights summing to one.
pub fn identity_suite(cfg: &IdentityConfig) -> Result<IdentityReport, TrainerError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = IdentityReport::default();

    for _ in 0..cfg.instances {
        let k = rng.random_range(1..=6);
        let alphas = simplex(&mut rng, k);
        let deltas: Vec<f64> = (0..k).map(|_| rng.random_range(-10.0..=10.0)).collect();
        let s = mobt_probability(&deltas, &alphas)?;
        let p = mobt_probability_product(&deltas, &alphas)?;
        let err = (s - p).abs();
        if !report.sum_product.record(err, SUM_PRODUCT_TOL) {
            report.failures.push(IdentityFailure {
                check: "sum_product",
                error: err,
                instance: serde_json::json!({ "alphas": alphas, "deltas": deltas, "sum": s, "product": p }),
            });
        }
    }

    for _ in 0..cfg.simpo_instances {
        let n = rng.random_range(1..=4);
        let beta = rng.random_range(0.1..3.0);
        let gamma = rng.random_range(0.0..3.0);
        let length_normalize = rng.random_bool(0.5);
        let rows: Vec<(f64, f64, usize, usize)> = (0..n)
            .map(|_| {
                (
                    rng.random_range(-6.0..0.0),
                    rng.random_range(-6.0..0.0),
                    rng.random_range(1..=20),
                    rng.random_range(1..=20),
                )
            })
            .collect();
        let obj = ObjectiveConfig::new(beta, gamma, length_normalize);
        let mut g = Graph::new();
        let batch: Vec<PairLogliks> = rows
            .iter()
            .map(|&(aw, al, lw, ll)| PairLogliks::new(vec![DimLogliks::leaves(&mut g, aw, al, lw, ll)]))
            .collect();
        let a = amopo_loss(&mut g, &batch, &[1.0], &obj)?;
        let b = simpo_loss(&mut g, &batch, &obj)?;
        let (a, b) = (g.item(a), g.item(b));
        let err = (a - b).abs();
        if !report.simpo_reduction.record(err, SIMPO_TOL) {
            report.failures.push(IdentityFailure {
                check: "simpo_reduction",
                error: err,
                instance: serde_json::json!({
                    "beta": beta, "gamma": gamma, "length_normalize": length_normalize,
                    "pairs": rows, "amopo": a, "simpo": b,
                }),
            });
        }
    }

    for _ in 0..cfg.instances {
        let k = rng.random_range(1..=8);
        let scale = rng.random_range(0.0..50.0);
        let pre: Vec<f64> = (0..k).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        let w = normalize_weights(&pre)?;
        let sum: f64 = w.alphas().iter().sum();
        let positive = w.alphas().iter().all(|&a| a > 0.0);
        let err = if positive { (sum - 1.0).abs() } else { f64::INFINITY };
        if !report.softmax.record(err, SOFTMAX_TOL) {
            report.failures.push(IdentityFailure {
                check: "softmax",
                error: err,
                instance: serde_json::json!({ "preweights": pre, "alphas": w.alphas() }),
            });
        }
    }
    Ok(report)
}
