//! Preference losses over graph tensors: Bradley-Terry, SimPO, DPO, the
//! multi-objective BT model and the AMoPO loss.
//!
//! Every log σ goes through the stable branch form of
//! [`Graph::log_sigmoid`]. Dimension weights enter the graph as constants, so
//! no gradient ever reaches them.

use thiserror::Error;

use crate::autodiff::{log_sigmoid_scalar, sigmoid_scalar, AutodiffError, Graph, Tensor};
use crate::policy::ResponseEval;
use crate::scalar::Scalar;

/// Tolerance on Σα = 1.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ObjectiveError {
    #[error("non-finite input {0}")]
    NonFinite(f64),
    #[error("expected {expected} weights, found {found}")]
    WeightLength { expected: usize, found: usize },
    #[error("weights sum to {0}, not 1")]
    WeightSum(f64),
    #[error("weight {index} is {value}; weights must be positive")]
    NonPositiveWeight { index: usize, value: f64 },
    #[error("batch entry {index} has {found} dimensions, expected {expected}")]
    DimensionCount {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("response lengths must be at least 1")]
    EmptyResponse,
    #[error("DPO needs reference-model log-likelihoods")]
    MissingReference,
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig<T> {
    /// Reward scale β, strictly positive.
    pub beta: T,
    /// Target reward margin γ subtracted inside σ.
    pub gamma: T,
    /// When false the 1/|y| factors are dropped (summed log-likelihoods).
    pub length_normalize: bool,
}

impl<T: Scalar> ObjectiveConfig<T> {
    pub fn new(beta: T, gamma: T, length_normalize: bool) -> Self {
        assert!(beta > T::zero(), "beta must be positive");
        Self {
            beta,
            gamma,
            length_normalize,
        }
    }
}

/// Summed log-likelihoods of both responses under the frozen reference model.
#[derive(Clone, Copy, Debug)]
pub struct ReferenceLogliks {
    pub sum_w: Tensor,
    pub sum_l: Tensor,
}

/// Log-likelihood nodes of one (chosen, rejected) pair under one dimension prompt.
#[derive(Clone, Copy, Debug)]
pub struct DimLogliks {
    pub avg_w: Tensor,
    pub avg_l: Tensor,
    pub sum_w: Tensor,
    pub sum_l: Tensor,
    pub len_w: usize,
    pub len_l: usize,
    pub reference: Option<ReferenceLogliks>,
}

impl DimLogliks {
    pub fn from_evals<T: Scalar>(chosen: &ResponseEval<T>, rejected: &ResponseEval<T>) -> Self {
        Self {
            avg_w: chosen.avg_loglik,
            avg_l: rejected.avg_loglik,
            sum_w: chosen.sum_loglik,
            sum_l: rejected.sum_loglik,
            len_w: chosen.trace.len(),
            len_l: rejected.trace.len(),
            reference: None,
        }
    }

    /// Trainable scalar leaves holding the given average log-likelihoods;
    /// sums are `avg * len`.
    pub fn leaves<T: Scalar>(g: &mut Graph<T>, avg_w: T, avg_l: T, len_w: usize, len_l: usize) -> Self {
        let aw = g.param(&[], vec![avg_w]).expect("scalar leaf");
        let al = g.param(&[], vec![avg_l]).expect("scalar leaf");
        let sw = g.scale(aw, T::of_usize(len_w));
        let sl = g.scale(al, T::of_usize(len_l));
        Self {
            avg_w: aw,
            avg_l: al,
            sum_w: sw,
            sum_l: sl,
            len_w,
            len_l,
            reference: None,
        }
    }

    pub fn with_reference(mut self, reference: ReferenceLogliks) -> Self {
        self.reference = Some(reference);
        self
    }
}

/// Per-dimension log-likelihoods of one preference example, one entry per dimension.
#[derive(Clone, Debug)]
pub struct PairLogliks {
    pub dims: Vec<DimLogliks>,
}

impl PairLogliks {
    pub fn new(dims: Vec<DimLogliks>) -> Self {
        Self { dims }
    }

    pub fn k(&self) -> usize {
        self.dims.len()
    }
}

fn finite<T: Scalar>(x: T) -> Result<T, ObjectiveError> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(ObjectiveError::NonFinite(x.f64()))
    }
}

/// `exp(r_w) / (exp(r_w) + exp(r_l))`, evaluated as σ(r_w - r_l).
pub fn bt_probability<T: Scalar>(r_w: T, r_l: T) -> Result<T, ObjectiveError> {
    Ok(sigmoid_scalar(finite(r_w)? - finite(r_l)?))
}

/// Validates a weight vector against `k` dimensions.
pub fn check_weights<T: Scalar>(weights: &[T], k: usize) -> Result<(), ObjectiveError> {
    if weights.len() != k {
        return Err(ObjectiveError::WeightLength {
            expected: k,
            found: weights.len(),
        });
    }
    if let Some((index, w)) = weights.iter().enumerate().find(|(_, w)| !(**w > T::zero())) {
        return Err(ObjectiveError::NonPositiveWeight { index, value: w.f64() });
    }
    let total: T = weights.iter().copied().sum();
    if (total.f64() - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(ObjectiveError::WeightSum(total.f64()));
    }
    Ok(())
}

/// Multi-objective BT log-preference `Σ_k α_k log σ(Δ_k)`.
pub fn mobt_probability<T: Scalar>(deltas: &[T], weights: &[T]) -> Result<T, ObjectiveError> {
    check_weights(weights, deltas.len())?;
    deltas
        .iter()
        .zip(weights)
        .map(|(&d, &a)| Ok(a * log_sigmoid_scalar(finite(d)?)))
        .sum()
}

/// The same quantity in product form, `log Π_k σ(Δ_k)^α_k`.
pub fn mobt_probability_product<T: Scalar>(deltas: &[T], weights: &[T]) -> Result<T, ObjectiveError> {
    check_weights(weights, deltas.len())?;
    let mut prod = T::one();
    for (&d, &a) in deltas.iter().zip(weights) {
        prod = prod * sigmoid_scalar(finite(d)?).powf(a);
    }
    Ok(prod.ln())
}

fn check_batch(batch: &[PairLogliks], k: usize) -> Result<(), ObjectiveError> {
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    for (index, p) in batch.iter().enumerate() {
        if p.k() != k {
            return Err(ObjectiveError::DimensionCount {
                index,
                expected: k,
                found: p.k(),
            });
        }
        if p.dims.iter().any(|d| d.len_w == 0 || d.len_l == 0) {
            return Err(ObjectiveError::EmptyResponse);
        }
    }
    Ok(())
}

/// `β·(r_w - r_l)` with r the average (or, unnormalized, summed) log-likelihood.
pub fn reward_difference<T: Scalar>(
    g: &mut Graph<T>,
    d: &DimLogliks,
    cfg: &ObjectiveConfig<T>,
) -> Result<Tensor, ObjectiveError> {
    let (w, l) = if cfg.length_normalize {
        (d.avg_w, d.avg_l)
    } else {
        (d.sum_w, d.sum_l)
    };
    let diff = g.sub(w, l)?;
    Ok(g.scale(diff, cfg.beta))
}

/// `log σ(β·(r_w - r_l) - γ)` for one dimension.
fn margin_log_sigmoid<T: Scalar>(
    g: &mut Graph<T>,
    d: &DimLogliks,
    cfg: &ObjectiveConfig<T>,
) -> Result<Tensor, ObjectiveError> {
    let z = reward_difference(g, d, cfg)?;
    let z = if cfg.gamma != T::zero() {
        let shift = g.scalar(-cfg.gamma);
        g.add(z, shift)?
    } else {
        z
    };
    Ok(g.log_sigmoid(z))
}

fn accumulate<T: Scalar>(g: &mut Graph<T>, acc: Option<Tensor>, t: Tensor) -> Result<Tensor, ObjectiveError> {
    Ok(match acc {
        Some(a) => g.add(a, t)?,
        None => t,
    })
}

/// Negated batch mean of `per_example` terms.
fn neg_mean<T: Scalar>(g: &mut Graph<T>, terms: Vec<Tensor>) -> Result<Tensor, ObjectiveError> {
    let n = terms.len();
    let mut acc = None;
    for t in terms {
        acc = Some(accumulate(g, acc, t)?);
    }
    let total = acc.ok_or(ObjectiveError::EmptyBatch)?;
    Ok(g.scale(total, -T::one() / T::of_usize(n)))
}

/// SimPO: `-mean log σ(β/|y_w| log π(y_w|x) - β/|y_l| log π(y_l|x) - γ)`; single dimension only.
pub fn simpo_loss<T: Scalar>(
    g: &mut Graph<T>,
    batch: &[PairLogliks],
    cfg: &ObjectiveConfig<T>,
) -> Result<Tensor, ObjectiveError> {
    check_batch(batch, 1)?;
    let mut terms = Vec::with_capacity(batch.len());
    for p in batch {
        terms.push(margin_log_sigmoid(g, &p.dims[0], cfg)?);
    }
    neg_mean(g, terms)
}

/// Weighted DPO over summed log-likelihood ratios against the reference model.
/// With one dimension and weight 1 this is the standard DPO loss; γ and
/// length normalization do not apply.
pub fn dpo_loss<T: Scalar>(
    g: &mut Graph<T>,
    batch: &[PairLogliks],
    weights: &[T],
    cfg: &ObjectiveConfig<T>,
) -> Result<Tensor, ObjectiveError> {
    let k = weights.len();
    check_weights(weights, k)?;
    check_batch(batch, k)?;
    let mut terms = Vec::with_capacity(batch.len());
    for p in batch {
        let mut acc = None;
        for (d, &alpha) in p.dims.iter().zip(weights) {
            let r = d.reference.ok_or(ObjectiveError::MissingReference)?;
            let ratio_w = g.sub(d.sum_w, r.sum_w)?;
            let ratio_l = g.sub(d.sum_l, r.sum_l)?;
            let diff = g.sub(ratio_w, ratio_l)?;
            let z = g.scale(diff, cfg.beta);
            let ls = g.log_sigmoid(z);
            let a = g.scalar(alpha);
            let term = g.mul(ls, a)?;
            acc = Some(accumulate(g, acc, term)?);
        }
        terms.push(acc.expect("k >= 1"));
    }
    neg_mean(g, terms)
}

/// AMoPO: `-mean_batch Σ_k α_k log σ(β/|y_w| log π(y_w|x*_k) - β/|y_l| log π(y_l|x*_k) - γ)`.
pub fn amopo_loss<T: Scalar>(
    g: &mut Graph<T>,
    batch: &[PairLogliks],
    weights: &[T],
    cfg: &ObjectiveConfig<T>,
) -> Result<Tensor, ObjectiveError> {
    let k = weights.len();
    check_weights(weights, k)?;
    check_batch(batch, k)?;
    let alphas: Vec<Tensor> = weights.iter().map(|&a| g.scalar(a)).collect();
    let mut terms = Vec::with_capacity(batch.len());
    for p in batch {
        let mut acc = None;
        for (d, &a) in p.dims.iter().zip(&alphas) {
            let ls = margin_log_sigmoid(g, d, cfg)?;
            let term = g.mul(ls, a)?;
            acc = Some(accumulate(g, acc, term)?);
        }
        terms.push(acc.expect("k >= 1"));
    }
    neg_mean(g, terms)
}
