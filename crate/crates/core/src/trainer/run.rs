use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor};
use crate::objectives::{amopo_loss, dpo_loss, simpo_loss, DimLogliks, ObjectiveConfig, PairLogliks, ReferenceLogliks};
use crate::policy::{PolicyModel, TokenProbTrace};
use crate::prefdata::{map_prompt, DimensionCatalog, PreferenceExample};
use crate::scalar::Scalar;
use crate::weights::{
    dimension_stats, pool_dimension_probs, DimensionStats, FixedPolicy, GaussianPolicy, WeightPolicy, WeightVector,
};

use super::config::{Objective, TrainConfig, WeightPolicyKind};
use super::optim::Optimizer;
use super::TrainerError;

/// Everything logged for one optimizer update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based.
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub alphas: Vec<f64>,
    /// Batch mean of `β/|y_w|·log π(y_w|x*_k) − β/|y_l|·log π(y_l|x*_k)` per dimension.
    pub margins: Vec<f64>,
    /// Pooled token-probability statistics per dimension.
    pub stats: Vec<DimensionStats<f64>>,
    /// Gaussian draws before normalization, when the Gaussian policy ran.
    pub preweights: Option<Vec<f64>>,
    pub wallclock_ms: f64,
}

/// An example tokenized once: one prompt per dimension, shared responses.
#[derive(Clone, Debug)]
pub(crate) struct Prepared {
    pub prompts: Vec<Vec<usize>>,
    pub chosen: Vec<usize>,
    pub rejected: Vec<usize>,
}

pub(crate) fn prepare<T: Scalar>(
    config: &TrainConfig,
    data: &[PreferenceExample],
    model: &PolicyModel<T>,
) -> Result<Vec<Prepared>, TrainerError> {
    let dims = DimensionCatalog::builtin().select(&config.dimensions)?;
    let tk = model.tokenizer();
    let window = model.config().context_window;
    data.iter()
        .enumerate()
        .map(|(index, ex)| {
            ex.validate(&dims).map_err(|source| TrainerError::Example { index, source })?;
            let prompts: Vec<Vec<usize>> = if config.collapse_dimensions {
                vec![tk.encode(&ex.prompt)]
            } else {
                dims.iter()
                    .map(|d| {
                        map_prompt(&ex.prompt, d, ex.scores[&d.name])
                            .map(|p| tk.encode(&p))
                            .map_err(|source| TrainerError::Example { index, source })
                    })
                    .collect::<Result<_, _>>()?
            };
            let chosen = tk.encode(&ex.chosen);
            let rejected = tk.encode(&ex.rejected);
            let longest = prompts.iter().map(Vec::len).max().unwrap_or(0) + chosen.len().max(rejected.len());
            if longest > window {
                return Err(TrainerError::InputTooLong {
                    index,
                    len: longest,
                    window,
                });
            }
            Ok(Prepared {
                prompts,
                chosen,
                rejected,
            })
        })
        .collect()
}

/// Number of optimizer updates per epoch.
pub fn steps_per_epoch(n: usize, config: &TrainConfig) -> usize {
    n.div_ceil(config.batch_size).div_ceil(config.grad_accum_steps)
}

/// The next epoch's batches: a fresh permutation of `0..n` cut into chunks.
pub(crate) fn epoch_batches(rng: &mut ChaCha8Rng, n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// One graph holding a micro-batch forward pass.
struct MicroBatch<T> {
    graph: Graph<T>,
    handles: Vec<Tensor>,
    pairs: Vec<PairLogliks>,
}

struct Forward<T> {
    micro: Vec<MicroBatch<T>>,
    /// `[dim][example]` traces of the chosen and rejected responses.
    traces_w: Vec<Vec<TokenProbTrace<T>>>,
    traces_l: Vec<Vec<TokenProbTrace<T>>>,
    margin_sums: Vec<T>,
    count: usize,
}

fn forward_batches<T: Scalar>(
    model: &PolicyModel<T>,
    reference: Option<&PolicyModel<T>>,
    prepared: &[Prepared],
    batches: &[Vec<usize>],
    k: usize,
    beta: T,
) -> Result<Forward<T>, TrainerError> {
    let mut out = Forward {
        micro: Vec::with_capacity(batches.len()),
        traces_w: vec![Vec::new(); k],
        traces_l: vec![Vec::new(); k],
        margin_sums: vec![T::zero(); k],
        count: 0,
    };
    for batch in batches {
        let mut g = Graph::new();
        let bound = model.bind(&mut g)?;
        let ref_bound = match reference {
            Some(r) => Some(r.bind(&mut g)?),
            None => None,
        };
        let mut pairs = Vec::with_capacity(batch.len());
        for &i in batch {
            let ex = &prepared[i];
            let mut dims = Vec::with_capacity(k);
            for (d, prompt) in ex.prompts.iter().enumerate() {
                let w = bound.score_response(&mut g, prompt, &ex.chosen)?;
                let l = bound.score_response(&mut g, prompt, &ex.rejected)?;
                let mut dl = DimLogliks::from_evals(&w, &l);
                if let Some(rb) = &ref_bound {
                    let rw = rb.score_response(&mut g, prompt, &ex.chosen)?;
                    let rl = rb.score_response(&mut g, prompt, &ex.rejected)?;
                    dl = dl.with_reference(ReferenceLogliks {
                        sum_w: rw.sum_loglik,
                        sum_l: rl.sum_loglik,
                    });
                }
                out.margin_sums[d] = out.margin_sums[d] + beta * (w.trace.mean_logprob() - l.trace.mean_logprob());
                out.traces_w[d].push(w.trace);
                out.traces_l[d].push(l.trace);
                dims.push(dl);
            }
            pairs.push(PairLogliks::new(dims));
            out.count += 1;
        }
        let handles = bound.handles().to_vec();
        out.micro.push(MicroBatch {
            graph: g,
            handles,
            pairs,
        });
    }
    Ok(out)
}

fn build_policy<T: Scalar>(config: &TrainConfig) -> Result<Option<Box<dyn WeightPolicy<T>>>, TrainerError> {
    if config.objective == Objective::Simpo {
        return Ok(None);
    }
    Ok(Some(match config.weight_policy {
        WeightPolicyKind::Gaussian => Box::new(GaussianPolicy::new(config.weight_seed)),
        WeightPolicyKind::Fixed => {
            let ratios: Vec<T> = config.ratios().into_iter().map(T::of).collect();
            Box::new(FixedPolicy::new(&ratios)?)
        }
    }))
}

fn check_reference<T: Scalar>(config: &TrainConfig, reference: Option<&PolicyModel<T>>) -> Result<(), TrainerError> {
    match (config.objective, reference) {
        (Objective::Dpo, None) => Err(TrainerError::Config {
            key: "objective".into(),
            message: "dpo needs a frozen reference model".into(),
        }),
        (Objective::Amopo | Objective::Simpo, Some(_)) => Err(TrainerError::Config {
            key: "objective".into(),
            message: "amopo and simpo are reference-free; no reference model may be given".into(),
        }),
        _ => Ok(()),
    }
}

/// Runs the full training loop. See [`train_with`].
pub fn train<T: Scalar>(
    config: &TrainConfig,
    data: &[PreferenceExample],
    model: PolicyModel<T>,
    reference: Option<&PolicyModel<T>>,
) -> Result<(PolicyModel<T>, Vec<StepRecord>), TrainerError> {
    train_with(config, data, model, reference, |_, _| Ok(()))
}

/// Per step: take the next batch of the epoch permutation, score chosen and
/// rejected responses under every mapped prompt, pool token probabilities
/// per dimension, draw the weights, build the loss, backpropagate and update.
/// `on_step` sees each record and the updated model.
pub fn train_with<T, F>(
    config: &TrainConfig,
    data: &[PreferenceExample],
    mut model: PolicyModel<T>,
    reference: Option<&PolicyModel<T>>,
    mut on_step: F,
) -> Result<(PolicyModel<T>, Vec<StepRecord>), TrainerError>
where
    T: Scalar,
    F: FnMut(&StepRecord, &PolicyModel<T>) -> Result<(), TrainerError>,
{
    config.validate()?;
    check_reference(config, reference)?;
    if model.config() != &config.model {
        return Err(TrainerError::Config {
            key: "model".into(),
            message: "the model was built from a different model config".into(),
        });
    }
    if model.is_frozen() {
        return Err(TrainerError::Config {
            key: "model".into(),
            message: "cannot train a frozen model".into(),
        });
    }
    if data.is_empty() {
        return Err(TrainerError::EmptyDataset);
    }
    let prepared = prepare(config, data, &model)?;
    let k = config.k();
    let obj = ObjectiveConfig::new(T::of(config.beta), T::of(config.gamma), config.length_normalize);
    let mut policy = build_policy::<T>(config)?;
    let mut optimizer = Optimizer::from_kind(
        config.optimizer,
        config.learning_rate,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_eps,
        model.num_params(),
    );
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut records = Vec::with_capacity(config.epochs * steps_per_epoch(data.len(), config));
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let batches = epoch_batches(&mut order_rng, data.len(), config.batch_size);
        for group in batches.chunks(config.grad_accum_steps) {
            step += 1;
            let started = Instant::now();
            let fwd = forward_batches(&model, reference, &prepared, group, k, obj.beta)?;

            let pooled = (0..k)
                .map(|d| pool_dimension_probs(&fwd.traces_w[d], &fwd.traces_l[d]))
                .collect::<Result<Vec<_>, _>>()?;
            let stats = pooled.iter().map(|p| dimension_stats(p)).collect::<Result<Vec<_>, _>>()?;
            let weights: WeightVector<T> = match policy.as_mut() {
                Some(p) => p.assign(&pooled)?,
                None => FixedPolicy::new(&[T::one()])?.assign(&pooled)?,
            };
            let alphas = weights.alphas();

            let n_total = T::of_usize(fwd.count);
            let mut grads = vec![T::zero(); model.num_params()];
            let mut loss = T::zero();
            for mb in fwd.micro {
                let MicroBatch {
                    mut graph,
                    handles,
                    pairs,
                } = mb;
                let l = match config.objective {
                    Objective::Amopo => amopo_loss(&mut graph, &pairs, alphas, &obj)?,
                    Objective::Simpo => simpo_loss(&mut graph, &pairs, &obj)?,
                    Objective::Dpo => dpo_loss(&mut graph, &pairs, alphas, &obj)?,
                };
                let share = T::of_usize(pairs.len()) / n_total;
                loss = loss + share * graph.item(l);
                let gr = graph.backward(l)?;
                let mut offset = 0;
                for h in handles {
                    let gh = gr.get(h).ok_or(TrainerError::MissingGradient {
                        expected: model.num_params(),
                        found: offset,
                    })?;
                    for (acc, &v) in grads[offset..offset + gh.len()].iter_mut().zip(gh) {
                        *acc = *acc + share * v;
                    }
                    offset += gh.len();
                }
            }
            let mut flat = model.flat_params();
            optimizer.step(&mut flat, &grads)?;
            model.set_flat_params(&flat);

            let record = StepRecord {
                step,
                epoch,
                loss: loss.f64(),
                alphas: alphas.iter().map(|a| a.f64()).collect(),
                margins: fwd.margin_sums.iter().map(|&m| (m / n_total).f64()).collect(),
                stats: stats
                    .iter()
                    .map(|s| DimensionStats {
                        mu: s.mu.f64(),
                        var: s.var.f64(),
                        token_count: s.token_count,
                    })
                    .collect(),
                preweights: weights.preweights().map(|p| p.iter().map(|v| v.f64()).collect()),
                wallclock_ms: if config.record_wallclock {
                    started.elapsed().as_secs_f64() * 1e3
                } else {
                    0.0
                },
            };
            on_step(&record, &model)?;
            records.push(record);
        }
    }
    Ok((model, records))
}

/// Dataset-wide mean of the per-dimension reward difference
/// `β·(avg log π(y_w|x*_k) − avg log π(y_l|x*_k))`. Does not touch the model.
pub fn evaluate_margins<T: Scalar>(
    model: &PolicyModel<T>,
    data: &[PreferenceExample],
    config: &TrainConfig,
) -> Result<Vec<f64>, TrainerError> {
    if data.is_empty() {
        return Err(TrainerError::EmptyDataset);
    }
    let prepared = prepare(config, data, model)?;
    let k = config.k();
    let beta = T::of(config.beta);
    let mut sums = vec![T::zero(); k];
    for ex in &prepared {
        let mut g = Graph::new();
        let bound = model.bind(&mut g)?;
        for (d, prompt) in ex.prompts.iter().enumerate() {
            let w = bound.score_response(&mut g, prompt, &ex.chosen)?;
            let l = bound.score_response(&mut g, prompt, &ex.rejected)?;
            sums[d] = sums[d] + beta * (w.trace.mean_logprob() - l.trace.mean_logprob());
        }
    }
    let n = T::of_usize(prepared.len());
    Ok(sums.into_iter().map(|s| (s / n).f64()).collect())
}

/// Pearson correlation between the margin trajectories of every pair of
/// dimensions. `None` marks a pair where either trajectory is constant.
pub fn pairwise_dimension_correlation(records: &[StepRecord]) -> Result<Vec<Vec<Option<f64>>>, TrainerError> {
    if records.len() < 3 {
        return Err(TrainerError::TooFewRecords(records.len()));
    }
    let k = records[0].margins.len();
    let series: Vec<Vec<f64>> = (0..k).map(|d| records.iter().map(|r| r.margins[d]).collect()).collect();
    let n = records.len() as f64;
    let centered: Vec<Option<(Vec<f64>, f64)>> = series
        .iter()
        .map(|s| {
            let mean = s.iter().sum::<f64>() / n;
            let c: Vec<f64> = s.iter().map(|v| v - mean).collect();
            let ss = c.iter().map(|v| v * v).sum::<f64>();
            (ss > 0.0).then_some((c, ss.sqrt()))
        })
        .collect();
    Ok((0..k)
        .map(|a| {
            (0..k)
                .map(|b| match (&centered[a], &centered[b]) {
                    (Some((ca, na)), Some((cb, nb))) => {
                        let dot: f64 = ca.iter().zip(cb).map(|(x, y)| x * y).sum();
                        Some((dot / (na * nb)).clamp(-1.0, 1.0))
                    }
                    _ => None,
                })
                .collect()
        })
        .collect())
}
