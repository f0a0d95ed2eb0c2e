use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::scalar::Scalar;

use super::{PolicyError, Tokenizer};

/// Architecture hyperparameters. Recorded in every checkpoint header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub context_window: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub init_scale: f64,
    pub seed: u64,
    pub tokenizer: Tokenizer,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            context_window: 256,
            embed_dim: 32,
            hidden_dim: 64,
            layers: 2,
            init_scale: 0.08,
            seed: 42,
            tokenizer: Tokenizer::bytes(),
        }
    }
}

impl ModelConfig {
    pub fn vocab_size(&self) -> usize {
        self.tokenizer.vocab_size()
    }

    /// Parameter names and shapes in storage order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (v, e, h) = (self.vocab_size(), self.embed_dim, self.hidden_dim);
        let mut layout = vec![
            ("tok_emb".to_string(), vec![v, e]),
            ("pos_emb".to_string(), vec![self.context_window, e]),
        ];
        let mut width = e;
        for l in 0..self.layers {
            layout.push((format!("block{l}.w"), vec![width, h]));
            layout.push((format!("block{l}.b"), vec![1, h]));
            width = h;
        }
        layout.push(("out.w".to_string(), vec![width, v]));
        layout.push(("out.b".to_string(), vec![1, v]));
        layout
    }

    pub fn param_count(&self) -> usize {
        self.param_layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
}

/// Toy causal language model: token + learned positional embeddings, causal
/// prefix-mean pooling, `layers` dense tanh blocks and an output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyModel<T> {
    config: ModelConfig,
    params: Vec<Param<T>>,
    frozen: bool,
}

/// Per-token probabilities of a response, detached from any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenProbTrace<T> {
    pub token_ids: Vec<usize>,
    pub probs: Vec<T>,
    pub logprobs: Vec<T>,
}

impl<T: Scalar> TokenProbTrace<T> {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn mean_logprob(&self) -> T {
        self.logprobs.iter().copied().sum::<T>() / T::of_usize(self.logprobs.len())
    }
}

/// Graph nodes of a response's log-likelihood.
#[derive(Clone, Debug)]
pub struct ResponseEval<T> {
    /// `[m]` log-probabilities of the realized response tokens.
    pub logprobs: Tensor,
    /// Sum of `logprobs`.
    pub sum_loglik: Tensor,
    /// Mean of `logprobs`.
    pub avg_loglik: Tensor,
    pub trace: TokenProbTrace<T>,
}

impl<T: Scalar> PolicyModel<T> {
    /// Parameters drawn from uniform(-init_scale, init_scale) using `config.seed`.
    pub fn new(config: ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let scale = config.init_scale;
        let params = config
            .param_layout()
            .into_iter()
            .map(|(name, shape)| {
                let n = shape.iter().product();
                let values = (0..n)
                    .map(|_| {
                        if scale > 0.0 {
                            T::of(rng.random_range(-scale..scale))
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                Param { name, shape, values }
            })
            .collect();
        Self {
            config,
            params,
            frozen: false,
        }
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Vec<Param<T>>) -> Result<Self, PolicyError> {
        let layout = config.param_layout();
        if layout.len() != params.len() {
            return Err(PolicyError::Layout(format!(
                "expected {} parameters, found {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            if name != &p.name || shape != &p.shape || p.values.len() != shape.iter().product::<usize>() {
                return Err(PolicyError::Layout(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    p.name, p.shape, name, shape
                )));
            }
        }
        Ok(Self {
            config,
            params,
            frozen: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.config.tokenizer
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size()
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    /// All parameter values concatenated in storage order.
    pub fn flat_params(&self) -> Vec<T> {
        self.params.iter().flat_map(|p| p.values.iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.values.len();
            p.values.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }

    /// Name of the parameter holding flat coordinate `index`.
    pub fn param_name_at(&self, mut index: usize) -> Option<(&str, usize)> {
        for p in &self.params {
            if index < p.values.len() {
                return Some((&p.name, index));
            }
            index -= p.values.len();
        }
        None
    }

    /// Zeroes the output projection so every next-token distribution is uniform.
    pub fn zero_output(&mut self) {
        for p in &mut self.params {
            if p.name.starts_with("out.") {
                p.values.iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    /// Deep copy whose parameters never receive gradients.
    pub fn clone_frozen(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            frozen: true,
        }
    }

    /// Registers the parameters as leaves of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Result<BoundModel<'_, T>, PolicyError> {
        let mut handles = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let t = if self.frozen {
                g.constant(&p.shape, p.values.clone())?
            } else {
                g.param(&p.shape, p.values.clone())?
            };
            handles.push(t);
        }
        Ok(BoundModel { model: self, handles })
    }
}

/// A model whose parameters live in a particular graph.
pub struct BoundModel<'m, T> {
    model: &'m PolicyModel<T>,
    handles: Vec<Tensor>,
}

impl<T: Scalar> BoundModel<'_, T> {
    /// Parameter tensors in storage order.
    pub fn handles(&self) -> &[Tensor] {
        &self.handles
    }

    pub fn model(&self) -> &PolicyModel<T> {
        self.model
    }

    fn check_tokens(&self, ids: &[usize]) -> Result<(), PolicyError> {
        let cfg = &self.model.config;
        if ids.is_empty() {
            return Err(PolicyError::EmptySequence);
        }
        if ids.len() > cfg.context_window {
            return Err(PolicyError::InputTooLong {
                len: ids.len(),
                window: cfg.context_window,
            });
        }
        if let Some(&id) = ids.iter().find(|&&i| i >= cfg.vocab_size()) {
            return Err(PolicyError::TokenOutOfVocab {
                id,
                vocab: cfg.vocab_size(),
            });
        }
        Ok(())
    }

    /// Logits `[m, vocab]`; row t scores the token following position t.
    pub fn forward_logits(&self, g: &mut Graph<T>, ids: &[usize]) -> Result<Tensor, PolicyError> {
        self.forward(g, ids, None)
    }

    /// Runs the network and projects only the hidden rows listed in `out_rows`.
    fn forward(&self, g: &mut Graph<T>, ids: &[usize], out_rows: Option<&[usize]>) -> Result<Tensor, PolicyError> {
        self.check_tokens(ids)?;
        let cfg = &self.model.config;
        let m = ids.len();
        let h = &self.handles;
        let tok = g.rows(h[0], ids)?;
        let positions: Vec<usize> = (0..m).collect();
        let pos = g.rows(h[1], &positions)?;
        let x = g.add(tok, pos)?;

        // causal prefix mean: row t averages rows 0..=t
        let mut pool = vec![T::zero(); m * m];
        for t in 0..m {
            let w = T::one() / T::of_usize(t + 1);
            pool[t * m..t * m + t + 1].iter_mut().for_each(|v| *v = w);
        }
        let pool = g.constant(&[m, m], pool)?;
        let pooled = g.matmul(pool, x)?;
        let mut hidden = g.add(x, pooled)?;

        let ones = g.constant(&[m, 1], vec![T::one(); m])?;
        for l in 0..cfg.layers {
            let z = g.matmul(hidden, h[2 + 2 * l])?;
            let bias = g.matmul(ones, h[3 + 2 * l])?;
            let z = g.add(z, bias)?;
            hidden = g.tanh(z);
        }

        let rows = match out_rows {
            Some(r) => {
                hidden = g.rows(hidden, r)?;
                r.len()
            }
            None => m,
        };
        let out_w = h[2 + 2 * cfg.layers];
        let out_b = h[3 + 2 * cfg.layers];
        let logits = g.matmul(hidden, out_w)?;
        let ones = if rows == m { ones } else { g.constant(&[rows, 1], vec![T::one(); rows])? };
        let bias = g.matmul(ones, out_b)?;
        Ok(g.add(logits, bias)?)
    }

    /// Log-likelihood of `response` given `prompt`. The model sees
    /// `[BOS] prompt response[..m-1]`; only response tokens are scored.
    pub fn score_response(
        &self,
        g: &mut Graph<T>,
        prompt: &[usize],
        response: &[usize],
    ) -> Result<ResponseEval<T>, PolicyError> {
        if response.is_empty() {
            return Err(PolicyError::EmptyResponse);
        }
        let tk = self.model.tokenizer();
        let mut input = Vec::with_capacity(1 + prompt.len() + response.len());
        input.push(tk.bos());
        input.extend_from_slice(prompt);
        input.extend_from_slice(&response[..response.len() - 1]);
        let first = prompt.len();
        let out_rows: Vec<usize> = (first..first + response.len()).collect();
        let logits = self.forward(g, &input, Some(&out_rows))?;
        let logp = g.log_softmax(logits, 1)?;
        let if_oob = response.iter().find(|&&i| i >= self.model.vocab_size());
        if let Some(&id) = if_oob {
            return Err(PolicyError::TokenOutOfVocab {
                id,
                vocab: self.model.vocab_size(),
            });
        }
        let logprobs = g.gather(logp, response)?;
        let sum_loglik = g.sum(logprobs, None)?;
        let avg_loglik = g.mean(logprobs, None)?;
        let lp = g.values(logprobs).to_vec();
        let trace = TokenProbTrace {
            token_ids: response.to_vec(),
            probs: lp.iter().map(|v| v.exp()).collect(),
            logprobs: lp,
        };
        Ok(ResponseEval {
            logprobs,
            sum_loglik,
            avg_loglik,
            trace,
        })
    }
}

/// Unnormalized next-token scores `[m, vocab]` in a fresh graph.
pub fn forward_logits<T: Scalar>(model: &PolicyModel<T>, ids: &[usize]) -> Result<(Graph<T>, Tensor), PolicyError> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g)?;
    let t = bound.forward_logits(&mut g, ids)?;
    Ok((g, t))
}

/// Length-normalized log-likelihood `(1/m) Σ log π(y_t | x, y_<t)` as a graph scalar.
pub fn avg_loglik<T: Scalar>(
    bound: &BoundModel<'_, T>,
    g: &mut Graph<T>,
    prompt: &[usize],
    response: &[usize],
) -> Result<Tensor, PolicyError> {
    Ok(bound.score_response(g, prompt, response)?.avg_loglik)
}

/// Detached per-token probabilities of `response`.
pub fn token_prob_trace<T: Scalar>(
    model: &PolicyModel<T>,
    prompt: &[usize],
    response: &[usize],
) -> Result<TokenProbTrace<T>, PolicyError> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g)?;
    Ok(bound.score_response(&mut g, prompt, response)?.trace)
}
