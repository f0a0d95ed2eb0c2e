use std::collections::BTreeMap;

use crate::autodiff::{finite_difference_grad, Graph};

use super::*;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        context_window: 16,
        embed_dim: 4,
        hidden_dim: 5,
        layers: 2,
        init_scale: 0.5,
        seed: 42,
        tokenizer: Tokenizer::with_alphabet("abcd"),
    }
}

fn uniform_model() -> PolicyModel<f64> {
    let mut m = PolicyModel::new(ModelConfig {
        context_window: 64,
        embed_dim: 8,
        hidden_dim: 8,
        ..ModelConfig::default()
    });
    m.zero_output();
    m
}

fn avg(model: &PolicyModel<f64>, prompt: &[usize], response: &[usize]) -> f64 {
    let mut g = Graph::new();
    let bound = model.bind(&mut g).unwrap();
    let t = avg_loglik(&bound, &mut g, prompt, response).unwrap();
    g.item(t)
}

#[test]
fn zero_output_projection_gives_uniform_rows() {
    let m = uniform_model();
    let (mut g, logits) = forward_logits(&m, &[1, 2, 3]).unwrap();
    assert_eq!(g.shape(logits), &[3, 259]);
    assert!(g.values(logits).iter().all(|&v| v == 0.0));
    let sm = g.softmax(logits, 1).unwrap();
    assert!(g.values(sm).iter().all(|&p| (p - 1.0 / 259.0).abs() < 1e-15));
}

#[test]
fn forward_is_causal() {
    let m: PolicyModel<f64> = PolicyModel::new(ModelConfig {
        context_window: 32,
        ..ModelConfig::default()
    });
    let ids: Vec<usize> = b"causal masks".iter().map(|&b| b as usize).collect();
    let (g, base) = forward_logits(&m, &ids).unwrap();
    let v = m.vocab_size();
    for t in 0..ids.len() - 1 {
        let mut perturbed = ids.clone();
        perturbed[t + 1..].reverse();
        perturbed[t + 1..].iter_mut().for_each(|x| *x = (*x + 7) % 256);
        let (g2, other) = forward_logits(&m, &perturbed).unwrap();
        assert_eq!(
            &g.values(base)[t * v..(t + 1) * v],
            &g2.values(other)[t * v..(t + 1) * v],
            "row {t}"
        );
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let ids = [10, 20, 30, 40];
    let a: PolicyModel<f64> = PolicyModel::new(ModelConfig::default());
    let b: PolicyModel<f64> = PolicyModel::new(ModelConfig::default());
    let (ga, ta) = forward_logits(&a, &ids).unwrap();
    let (gb, tb) = forward_logits(&b, &ids).unwrap();
    let bits = |g: &Graph<f64>, t| g.values(t).iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&ga, ta), bits(&gb, tb));
}

#[test]
fn too_long_and_empty_inputs_are_rejected() {
    let m: PolicyModel<f64> = PolicyModel::new(tiny_config());
    assert!(matches!(
        forward_logits(&m, &[0; 17]),
        Err(PolicyError::InputTooLong { len: 17, window: 16 })
    ));
    let mut g = Graph::new();
    let b = m.bind(&mut g).unwrap();
    assert!(matches!(b.score_response(&mut g, &[0, 1], &[]), Err(PolicyError::EmptyResponse)));
    assert!(matches!(
        b.score_response(&mut g, &[0; 10], &[1; 7]),
        Err(PolicyError::InputTooLong { .. })
    ));
    assert!(b.score_response(&mut g, &[0; 10], &[1; 6]).is_ok());
    assert!(matches!(
        b.score_response(&mut g, &[0], &[99]),
        Err(PolicyError::TokenOutOfVocab { id: 99, .. })
    ));
}

#[test]
fn uniform_model_loglik_is_log_inverse_vocab() {
    let m = uniform_model();
    let expected = (1.0f64 / 259.0).ln();
    for len in [1, 3, 11] {
        let resp: Vec<usize> = (0..len).map(|i| 65 + i).collect();
        assert!((avg(&m, &[1, 2], &resp) - expected).abs() < 1e-12);
    }
    let trace = token_prob_trace(&m, &[1, 2], &[5, 6, 7]).unwrap();
    assert!(trace.probs.iter().all(|&p| (p - 1.0 / 259.0).abs() < 1e-15));
}

#[test]
fn duplicating_a_response_under_uniform_model_keeps_average() {
    let m = uniform_model();
    let resp = vec![97, 98, 99];
    let mut doubled = resp.clone();
    doubled.extend_from_slice(&resp);
    assert!((avg(&m, &[1], &resp) - avg(&m, &[1], &doubled)).abs() < 1e-12);
}

#[test]
fn single_token_response_is_its_logprob() {
    let m: PolicyModel<f64> = PolicyModel::new(tiny_config());
    let prompt = [0, 1, 2];
    let (mut g, logits) = forward_logits(&m, &[m.tokenizer().bos(), 0, 1, 2]).unwrap();
    let lp = g.log_softmax(logits, 1).unwrap();
    let v = m.vocab_size();
    let direct = g.values(lp)[3 * v + 3];
    assert!((avg(&m, &prompt, &[3]) - direct).abs() < 1e-14);
}

/// Plain-loop re-implementation of the forward pass, independent of the graph.
fn manual_logits(m: &PolicyModel<f64>, ids: &[usize]) -> Vec<Vec<f64>> {
    let cfg = m.config();
    let p = |name: &str| m.params().iter().find(|p| p.name == name).unwrap();
    let (e, n) = (cfg.embed_dim, ids.len());
    let tok = p("tok_emb");
    let pos = p("pos_emb");
    let x: Vec<Vec<f64>> = (0..n)
        .map(|t| (0..e).map(|j| tok.values[ids[t] * e + j] + pos.values[t * e + j]).collect())
        .collect();
    let mut h: Vec<Vec<f64>> = (0..n)
        .map(|t| {
            (0..e)
                .map(|j| x[t][j] + (0..=t).map(|s| x[s][j]).sum::<f64>() / (t + 1) as f64)
                .collect()
        })
        .collect();
    let layer = |h: &[Vec<f64>], w: &Param<f64>, b: &Param<f64>, act: bool| -> Vec<Vec<f64>> {
        let (rows, cols) = (w.shape[0], w.shape[1]);
        h.iter()
            .map(|r| {
                (0..cols)
                    .map(|c| {
                        let z = (0..rows).map(|k| r[k] * w.values[k * cols + c]).sum::<f64>() + b.values[c];
                        if act {
                            z.tanh()
                        } else {
                            z
                        }
                    })
                    .collect()
            })
            .collect()
    };
    for l in 0..cfg.layers {
        h = layer(&h, p(&format!("block{l}.w")), p(&format!("block{l}.b")), true);
    }
    layer(&h, p("out.w"), p("out.b"), false)
}

#[test]
fn loglik_matches_hand_rolled_softmax() {
    let m: PolicyModel<f64> = PolicyModel::new(ModelConfig {
        context_window: 16,
        ..ModelConfig::default()
    });
    let tk = m.tokenizer();
    let prompt = tk.encode("ab");
    let response = tk.encode("cd");
    let mut input = vec![tk.bos()];
    input.extend(&prompt);
    input.push(response[0]);
    let rows = manual_logits(&m, &input);
    let mut total = 0.0;
    for (k, &target) in response.iter().enumerate() {
        let row = &rows[prompt.len() + k];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        total += (row[target].exp() / z).ln();
    }
    let expected = total / response.len() as f64;
    assert!((avg(&m, &prompt, &response) - expected).abs() < 1e-12);
}

#[test]
fn trace_mean_equals_avg_loglik() {
    let m: PolicyModel<f64> = PolicyModel::new(tiny_config());
    let mut g = Graph::new();
    let b = m.bind(&mut g).unwrap();
    let eval = b.score_response(&mut g, &[0, 1, 2], &[3, 2, 1, 0]).unwrap();
    assert_eq!(eval.trace.len(), 4);
    assert!((eval.trace.mean_logprob() - g.item(eval.avg_loglik)).abs() < 1e-12);
    for (p, lp) in eval.trace.probs.iter().zip(&eval.trace.logprobs) {
        assert!((lp.exp() - p).abs() < 1e-12);
        assert!(*p > 0.0 && *p <= 1.0);
    }
    assert!(g.item(eval.avg_loglik) <= 0.0);
}

fn sgd_on_response(m: &mut PolicyModel<f64>, prompt: &[usize], response: &[usize], lr: f64, steps: usize) {
    for _ in 0..steps {
        let mut g = Graph::new();
        let b = m.bind(&mut g).unwrap();
        let eval = b.score_response(&mut g, prompt, response).unwrap();
        let loss = g.neg(eval.avg_loglik);
        let grads = g.backward(loss).unwrap();
        let flat: Vec<f64> = b.handles().iter().flat_map(|&h| grads.get_or_zeros(h)).collect();
        let mut theta = m.flat_params();
        theta.iter_mut().zip(&flat).for_each(|(t, d)| *t -= lr * d);
        m.set_flat_params(&theta);
    }
}

#[test]
fn ten_steps_on_abab_raise_in_distribution_probability() {
    let mut m: PolicyModel<f64> = PolicyModel::new(ModelConfig {
        context_window: 32,
        ..ModelConfig::default()
    });
    let tk = m.tokenizer().clone();
    let corpus = tk.encode("abababababababab");
    sgd_on_response(&mut m, &[], &corpus, 0.5, 10);
    let trace = token_prob_trace(&m, &tk.encode("abab"), &tk.encode("abab")).unwrap();
    let uniform = 1.0 / m.vocab_size() as f64;
    assert!(trace.probs.iter().all(|&p| p > uniform), "{:?}", trace.probs);
}

#[test]
fn frozen_clone_is_unaffected_by_training() {
    let mut m: PolicyModel<f64> = PolicyModel::new(tiny_config());
    let frozen = m.clone_frozen();
    assert!(frozen.is_frozen());
    assert_eq!(frozen.flat_params(), m.flat_params());
    let before = avg(&frozen, &[0, 1], &[2, 3]);
    sgd_on_response(&mut m, &[0, 1], &[2, 3], 0.1, 5);
    assert_ne!(frozen.flat_params(), m.flat_params());
    assert_eq!(avg(&frozen, &[0, 1], &[2, 3]).to_bits(), before.to_bits());

    let mut g = Graph::new();
    let b = frozen.bind(&mut g).unwrap();
    let eval = b.score_response(&mut g, &[0, 1], &[2, 3]).unwrap();
    assert!(!g.requires_grad(eval.avg_loglik));
    assert!(b.handles().iter().all(|&h| !g.requires_grad(h)));
}

#[test]
fn avg_loglik_gradient_matches_finite_differences() {
    let cfg = tiny_config();
    assert!(cfg.param_count() <= 500);
    let m: PolicyModel<f64> = PolicyModel::new(cfg);
    let (prompt, response) = (vec![0, 1, 2, 3], vec![2, 1, 3]);
    let mut g = Graph::new();
    let b = m.bind(&mut g).unwrap();
    let t = avg_loglik(&b, &mut g, &prompt, &response).unwrap();
    let grads = g.backward(t).unwrap();
    let analytic: Vec<f64> = b.handles().iter().flat_map(|&h| grads.get_or_zeros(h)).collect();
    let mut probe = m.clone();
    let fd = finite_difference_grad(
        |theta: &[f64]| {
            probe.set_flat_params(theta);
            Ok::<_, PolicyError>(avg(&probe, &prompt, &response))
        },
        &m.flat_params(),
        1e-5,
    )
    .unwrap();
    for (i, (a, f)) in analytic.iter().zip(&fd).enumerate() {
        let rel = (a - f).abs() / a.abs().max(f.abs()).max(1e-3);
        assert!(rel < 1e-4, "coord {i} {:?}: {a} vs {f}", m.param_name_at(i));
    }
}

#[test]
fn checkpoint_round_trip_is_lossless() {
    let m: PolicyModel<f64> = PolicyModel::new(tiny_config());
    let mut meta = BTreeMap::new();
    meta.insert("train_seed".to_string(), "7".to_string());
    let mut buf = Vec::new();
    write_checkpoint(&m, &meta, &mut buf).unwrap();
    assert_eq!(&buf[..8], MAGIC);
    let (back, header): (PolicyModel<f64>, _) = read_checkpoint(buf.as_slice()).unwrap();
    assert_eq!(header.metadata, meta);
    assert_eq!(header.model, *m.config());
    let bits = |m: &PolicyModel<f64>| m.flat_params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&m));

    let mut again = Vec::new();
    write_checkpoint(&back, &meta, &mut again).unwrap();
    assert_eq!(buf, again);

    let m32: PolicyModel<f32> = PolicyModel::new(tiny_config());
    let mut buf32 = Vec::new();
    write_checkpoint(&m32, &meta, &mut buf32).unwrap();
    let (back32, _): (PolicyModel<f32>, _) = read_checkpoint(buf32.as_slice()).unwrap();
    assert_eq!(back32, m32);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let m: PolicyModel<f64> = PolicyModel::new(tiny_config());
    let mut buf = Vec::new();
    write_checkpoint(&m, &BTreeMap::new(), &mut buf).unwrap();
    let truncated = &buf[..buf.len() - 3];
    assert!(matches!(
        read_checkpoint::<f64, _>(truncated),
        Err(PolicyError::Checkpoint(_))
    ));
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(read_checkpoint::<f64, _>(bad.as_slice()).is_err());
    let mut extra = buf.clone();
    extra.push(0);
    assert!(read_checkpoint::<f64, _>(extra.as_slice()).is_err());
}
