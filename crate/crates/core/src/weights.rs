//! Dimension weight assignment.
//!
//! The adaptive policy pools the token probabilities of the chosen and
//! rejected responses for each dimension, fits a Gaussian N(μ_k, σ_k²) with
//! population statistics, draws one pre-weight per dimension and applies a
//! softmax across dimensions. The fixed policy returns proportional weights.
//!
//! Gaussian draws use `rand_distr::StandardNormal` (the ZIGNOR ziggurat
//! variant) on a seeded ChaCha8 stream: `μ + σ·z`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::TokenProbTrace;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WeightError {
    #[error("no token probabilities to pool")]
    EmptyPool,
    #[error("{chosen} chosen traces but {rejected} rejected traces")]
    BatchMismatch { chosen: usize, rejected: usize },
    #[error("probability {value} at index {index} is outside (0, 1]")]
    ProbabilityDomain { index: usize, value: f64 },
    #[error("pre-weight {index} is not finite ({value})")]
    NonFinite { index: usize, value: f64 },
    #[error("ratio {index} is {value}; fixed ratios must be positive")]
    NonPositiveRatio { index: usize, value: f64 },
    #[error("expected {expected} values, found {found}")]
    Length { expected: usize, found: usize },
    #[error("at least one dimension is required")]
    NoDimensions,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightSource {
    Gaussian,
    Fixed,
}

/// Weights on the simplex: every entry positive, entries sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector<T> {
    alphas: Vec<T>,
    source: WeightSource,
    /// ChaCha word position of the sampler before the draws, when sampled.
    seed_state: Option<u128>,
    /// Gaussian draws before the softmax, when sampled.
    preweights: Option<Vec<T>>,
}

impl<T: Scalar> WeightVector<T> {
    pub fn alphas(&self) -> &[T] {
        &self.alphas
    }

    pub fn source(&self) -> WeightSource {
        self.source
    }

    pub fn seed_state(&self) -> Option<u128> {
        self.seed_state
    }

    pub fn preweights(&self) -> Option<&[T]> {
        self.preweights.as_deref()
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }
}

impl<T> AsRef<[T]> for WeightVector<T> {
    fn as_ref(&self) -> &[T] {
        &self.alphas
    }
}

/// Population mean and variance of one dimension's pooled probabilities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DimensionStats<T> {
    pub mu: T,
    pub var: T,
    pub token_count: usize,
}

/// Concatenates every chosen and rejected token probability of a batch for one dimension.
pub fn pool_dimension_probs<T: Scalar>(
    traces_w: &[TokenProbTrace<T>],
    traces_l: &[TokenProbTrace<T>],
) -> Result<Vec<T>, WeightError> {
    if traces_w.len() != traces_l.len() {
        return Err(WeightError::BatchMismatch {
            chosen: traces_w.len(),
            rejected: traces_l.len(),
        });
    }
    let pooled: Vec<T> = traces_w
        .iter()
        .zip(traces_l)
        .flat_map(|(w, l)| w.probs.iter().chain(&l.probs).copied())
        .collect();
    if pooled.is_empty() {
        return Err(WeightError::EmptyPool);
    }
    Ok(pooled)
}

/// μ = (1/T) Σ p_t and σ² = (1/T) Σ (p_t - μ)².
pub fn dimension_stats<T: Scalar>(pooled: &[T]) -> Result<DimensionStats<T>, WeightError> {
    if pooled.is_empty() {
        return Err(WeightError::EmptyPool);
    }
    if let Some((index, v)) = pooled
        .iter()
        .enumerate()
        .find(|(_, &p)| !(p > T::zero() && p <= T::one()))
    {
        return Err(WeightError::ProbabilityDomain { index, value: v.f64() });
    }
    let first = pooled[0];
    if pooled.iter().all(|&p| p == first) {
        return Ok(DimensionStats {
            mu: first,
            var: T::zero(),
            token_count: pooled.len(),
        });
    }
    let n = T::of_usize(pooled.len());
    let mu = pooled.iter().copied().sum::<T>() / n;
    let var = pooled.iter().map(|&p| (p - mu) * (p - mu)).sum::<T>() / n;
    Ok(DimensionStats {
        mu,
        var,
        token_count: pooled.len(),
    })
}

/// One draw per dimension from N(μ_k, σ_k²). A zero variance returns μ_k exactly.
pub fn sample_preweights<T: Scalar, R: Rng + ?Sized>(stats: &[DimensionStats<T>], rng: &mut R) -> Vec<T> {
    stats
        .iter()
        .map(|s| {
            let z: f64 = rng.sample(StandardNormal);
            s.mu + s.var.sqrt() * T::of(z)
        })
        .collect()
}

/// Softmax across dimensions.
pub fn normalize_weights<T: Scalar>(preweights: &[T]) -> Result<WeightVector<T>, WeightError> {
    Ok(WeightVector {
        alphas: softmax(preweights)?,
        source: WeightSource::Gaussian,
        seed_state: None,
        preweights: None,
    })
}

fn softmax<T: Scalar>(xs: &[T]) -> Result<Vec<T>, WeightError> {
    if xs.is_empty() {
        return Err(WeightError::NoDimensions);
    }
    if let Some((index, v)) = xs.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(WeightError::NonFinite { index, value: v.f64() });
    }
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = xs.iter().map(|&x| (x - max).exp()).collect();
    let z: T = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// `ratios / Σ ratios`.
pub fn fixed_weights<T: Scalar>(k: usize, ratios: &[T]) -> Result<WeightVector<T>, WeightError> {
    if k == 0 {
        return Err(WeightError::NoDimensions);
    }
    if ratios.len() != k {
        return Err(WeightError::Length {
            expected: k,
            found: ratios.len(),
        });
    }
    if let Some((index, v)) = ratios.iter().enumerate().find(|(_, &r)| !(r > T::zero() && r.is_finite())) {
        return Err(WeightError::NonPositiveRatio { index, value: v.f64() });
    }
    let total: T = ratios.iter().copied().sum();
    Ok(WeightVector {
        alphas: ratios.iter().map(|&r| r / total).collect(),
        source: WeightSource::Fixed,
        seed_state: None,
        preweights: None,
    })
}

/// Produces one weight vector per training step from the per-dimension pooled
/// token probabilities of the current batch.
pub trait WeightPolicy<T: Scalar> {
    fn assign(&mut self, pooled: &[Vec<T>]) -> Result<WeightVector<T>, WeightError>;

    fn source(&self) -> WeightSource;
}

/// Adaptive Gaussian policy.
#[derive(Clone, Debug)]
pub struct GaussianPolicy {
    rng: ChaCha8Rng,
}

impl GaussianPolicy {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl<T: Scalar> WeightPolicy<T> for GaussianPolicy {
    fn assign(&mut self, pooled: &[Vec<T>]) -> Result<WeightVector<T>, WeightError> {
        let stats = pooled
            .iter()
            .map(|p| dimension_stats(p))
            .collect::<Result<Vec<_>, _>>()?;
        let state = self.rng.get_word_pos();
        let pre = sample_preweights(&stats, &mut self.rng);
        let mut w = normalize_weights(&pre)?;
        w.seed_state = Some(state);
        w.preweights = Some(pre);
        Ok(w)
    }

    fn source(&self) -> WeightSource {
        WeightSource::Gaussian
    }
}

/// Constant proportional weights.
#[derive(Clone, Debug)]
pub struct FixedPolicy<T> {
    weights: WeightVector<T>,
}

impl<T: Scalar> FixedPolicy<T> {
    pub fn new(ratios: &[T]) -> Result<Self, WeightError> {
        Ok(Self {
            weights: fixed_weights(ratios.len(), ratios)?,
        })
    }
}

impl<T: Scalar> WeightPolicy<T> for FixedPolicy<T> {
    fn assign(&mut self, pooled: &[Vec<T>]) -> Result<WeightVector<T>, WeightError> {
        if pooled.len() != self.weights.len() {
            return Err(WeightError::Length {
                expected: self.weights.len(),
                found: pooled.len(),
            });
        }
        Ok(self.weights.clone())
    }

    fn source(&self) -> WeightSource {
        WeightSource::Fixed
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn trace(probs: &[f64]) -> TokenProbTrace<f64> {
        TokenProbTrace {
            token_ids: vec![0; probs.len()],
            probs: probs.to_vec(),
            logprobs: probs.iter().map(|p| p.ln()).collect(),
        }
    }

    #[test]
    fn pooling_concatenates() {
        let p = pool_dimension_probs(&[trace(&[0.5, 0.5])], &[trace(&[0.5])]).unwrap();
        assert_eq!(p, vec![0.5, 0.5, 0.5]);
        let p = pool_dimension_probs(&[trace(&[0.3])], &[trace(&[0.7])]).unwrap();
        assert_eq!(p, vec![0.3, 0.7]);
        let w = [trace(&[0.1, 0.2]), trace(&[0.3, 0.4, 0.5])];
        let l = [trace(&[0.6]), trace(&[0.7, 0.8])];
        assert_eq!(pool_dimension_probs(&w, &l).unwrap().len(), 2 + 3 + 1 + 2);
        assert!(matches!(pool_dimension_probs::<f64>(&[], &[]), Err(WeightError::EmptyPool)));
        assert!(matches!(
            pool_dimension_probs(&w, &l[..1]),
            Err(WeightError::BatchMismatch { .. })
        ));
    }

    #[test]
    fn stats_examples() {
        let s = dimension_stats::<f64>(&[0.7, 0.7, 0.7]).unwrap();
        assert!((s.mu - 0.7).abs() < 1e-15);
        assert_eq!((s.mu, s.var), (0.7, 0.0));
        let s = dimension_stats::<f64>(&[0.2, 0.4, 0.6]).unwrap();
        assert!((s.mu - 0.4).abs() < 1e-15);
        assert!((s.var - 0.08 / 3.0).abs() < 1e-15);
        assert_eq!(s.token_count, 3);
        let s = dimension_stats::<f64>(&[0.35]).unwrap();
        assert_eq!((s.mu, s.var), (0.35, 0.0));
        assert!(matches!(
            dimension_stats::<f64>(&[0.5, 0.0]),
            Err(WeightError::ProbabilityDomain { index: 1, .. })
        ));
        assert!(dimension_stats::<f64>(&[1.2]).is_err());
    }

    #[test]
    fn zero_variance_draws_equal_means() {
        let stats = [
            DimensionStats { mu: 0.1, var: 0.0, token_count: 3 },
            DimensionStats { mu: 0.55, var: 0.0, token_count: 1 },
        ];
        for seed in [0, 1, 99] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            assert_eq!(sample_preweights(&stats, &mut rng), vec![0.1, 0.55]);
        }
    }

    #[test]
    fn draws_are_reproducible() {
        let stats = [DimensionStats { mu: 0.5, var: 0.01, token_count: 4 }; 3];
        let a = sample_preweights(&stats, &mut ChaCha8Rng::seed_from_u64(5));
        let b = sample_preweights(&stats, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        let c = sample_preweights(&stats, &mut ChaCha8Rng::seed_from_u64(6));
        assert_ne!(a, c);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_weights::<f64>(&[0.5, 0.5]).unwrap().alphas(), &[0.5, 0.5]);
        let w = normalize_weights::<f64>(&[0.0, 0.0, 0.0]).unwrap();
        assert!(w.alphas().iter().all(|a| (a - 1.0 / 3.0).abs() < 1e-15));
        // scalar softmax oracle
        let e = [1.0f64.exp(), 2.0f64.exp(), 3.0f64.exp()];
        let z: f64 = e.iter().sum();
        let w = normalize_weights::<f64>(&[1.0, 2.0, 3.0]).unwrap();
        for (a, x) in w.alphas().iter().zip(e) {
            assert!((a - x / z).abs() < 1e-15);
        }
        let expected = [0.090031, 0.244728, 0.665241];
        for (a, x) in w.alphas().iter().zip(expected) {
            assert!((a - x).abs() < 1e-6);
        }
        assert!(matches!(
            normalize_weights::<f64>(&[0.0, f64::NAN]),
            Err(WeightError::NonFinite { index: 1, .. })
        ));
    }

    #[test]
    fn fixed_examples() {
        let w = fixed_weights::<f64>(4, &[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(w.alphas(), &[0.25; 4]);
        assert_eq!(w.source(), WeightSource::Fixed);
        let w = fixed_weights::<f64>(3, &[1.0, 1.0, 1.0]).unwrap();
        assert!(w.alphas().iter().all(|a| (a - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(fixed_weights::<f64>(2, &[3.0, 1.0]).unwrap().alphas(), &[0.75, 0.25]);
        assert!(matches!(
            fixed_weights::<f64>(2, &[1.0, 0.0]),
            Err(WeightError::NonPositiveRatio { index: 1, .. })
        ));
        assert!(matches!(fixed_weights::<f64>(3, &[1.0, 1.0]), Err(WeightError::Length { .. })));
    }

    #[test]
    fn gaussian_policy_records_sampler_state() {
        let mut p = GaussianPolicy::new(3);
        let pooled = vec![vec![0.2, 0.4], vec![0.6], vec![0.1, 0.9]];
        let a: WeightVector<f64> = p.assign(&pooled).unwrap();
        let b: WeightVector<f64> = p.assign(&pooled).unwrap();
        assert_eq!(a.seed_state(), Some(0));
        assert!(b.seed_state().unwrap() > 0);
        assert_eq!(a.source(), WeightSource::Gaussian);
        let mut q = GaussianPolicy::new(3);
        assert_eq!(q.assign(&pooled).unwrap(), a);
    }

    #[test]
    fn gaussian_policy_with_degenerate_variance_is_seed_independent() {
        let pooled = vec![vec![0.3, 0.3], vec![0.8]];
        let reference: WeightVector<f64> = GaussianPolicy::new(0).assign(&pooled).unwrap();
        let expected = normalize_weights::<f64>(&[0.3, 0.8]).unwrap();
        assert_eq!(reference.alphas(), expected.alphas());
        for seed in 1..20 {
            let w: WeightVector<f64> = GaussianPolicy::new(seed).assign(&pooled).unwrap();
            assert_eq!(w.alphas(), reference.alphas());
        }
    }

    #[test]
    fn sampler_matches_target_moments() {
        let stats = dimension_stats::<f64>(&[0.2, 0.4, 0.6]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).flat_map(|_| sample_preweights(&[stats], &mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - 0.4).abs() < 0.003, "{mean}");
        assert!(((var - stats.var) / stats.var).abs() < 0.05, "{var}");
    }

    proptest! {
        #[test]
        fn softmax_weights_live_on_the_simplex(
            pre in prop::collection::vec(-50.0f64..50.0, 1..8),
            shift in -100.0f64..100.0,
        ) {
            let w = normalize_weights::<f64>(&pre).unwrap();
            prop_assert!(w.alphas().iter().all(|&a| a > 0.0));
            prop_assert!((w.alphas().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let shifted: Vec<f64> = pre.iter().map(|p| p + shift).collect();
            let w2 = normalize_weights::<f64>(&shifted).unwrap();
            for (a, b) in w.alphas().iter().zip(w2.alphas()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
