//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode, Stdio};
use std::time::{Duration, Instant};

use amopo_core::checks::{gradient_check, identity_suite, GradCheckConfig, IdentityConfig, ModelSize};
use amopo_core::policy::{token_prob_trace, ModelConfig, PolicyModel};
use amopo_core::prefdata::{generate_synthetic, map_prompt, DimensionCatalog, PreferenceExample, SynthConfig};
use amopo_core::trainer::{
    pairwise_dimension_correlation, train, Objective, StepRecord, TrainConfig, WeightPolicyKind,
};
use amopo_core::weights::{GaussianPolicy, WeightPolicy};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn synthetic(size: usize, seed: u64) -> Vec<PreferenceExample> {
    let dims = DimensionCatalog::builtin().dimensions;
    generate_synthetic(&SynthConfig { size, seed, dims }).expect("synthetic data")
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        embed_dim: 4,
        hidden_dim: 8,
        layers: 1,
        seed: 3,
        ..ModelConfig::default()
    }
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut params = 0;
    for seed in 0..3 {
        let cfg = GradCheckConfig::toy(seed, ModelSize::Tiny);
        ensure(cfg.examples.len() == 2 && cfg.dimensions.len() == 3 && cfg.h == 1e-5, || {
            "oracle setup is not 2 examples, K=3, h=1e-5".into()
        })?;
        let r = gradient_check(&cfg).map_err(|e| e.to_string())?;
        ensure(r.num_params <= 500, || format!("{} parameters", r.num_params))?;
        ensure(r.max_rel_error < 1e-4, || {
            format!("seed {seed}: {} relative error {:e}", r.worst_param, r.max_rel_error)
        })?;
        worst = worst.max(r.max_rel_error);
        params = r.num_params;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), || format!("took {}", secs(elapsed)))?;
    Ok(format!("max relative error {worst:.2e} on {params} params over 3 seeds, {}", secs(elapsed)))
}

fn identities(field: &'static str) -> Outcome {
    let start = Instant::now();
    let report = identity_suite(&IdentityConfig::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let tally = match field {
        "simpo" => &report.simpo_reduction,
        _ => &report.sum_product,
    };
    let want = if field == "simpo" { 50 } else { 1000 };
    ensure(tally.total == want, || format!("{} instances, want {want}", tally.total))?;
    ensure(tally.all_passed() && tally.max_error < 1e-12, || {
        format!("{}/{} passed, max error {:e}", tally.passed, tally.total, tally.max_error)
    })?;
    ensure(elapsed < Duration::from_secs(1), || format!("took {}", secs(elapsed)))?;
    Ok(format!("{}/{} within 1e-12, max error {:e}, {}", tally.passed, tally.total, tally.max_error, secs(elapsed)))
}

fn weight_normalization() -> Outcome {
    let data = synthetic(10, 11);
    let cfg = TrainConfig {
        epochs: 1000,
        batch_size: 1,
        learning_rate: 0.05,
        record_wallclock: false,
        model: tiny_model(),
        ..TrainConfig::default()
    };
    let (_, recs) = train(&cfg, &data, PolicyModel::<f64>::new(cfg.model.clone()), None).map_err(|e| e.to_string())?;
    ensure(recs.len() == 10_000, || format!("{} steps", recs.len()))?;
    for r in &recs {
        let s: f64 = r.alphas.iter().sum();
        ensure((s - 1.0).abs() <= 1e-9 && r.alphas.iter().all(|&a| a > 0.0), || {
            format!("step {}: alphas {:?}", r.step, r.alphas)
        })?;
    }

    let degenerate = TrainConfig {
        epochs: 10,
        learning_rate: 0.0,
        ..cfg.clone()
    };
    let mut m = PolicyModel::<f64>::new(degenerate.model.clone());
    m.zero_output();
    let (_, drecs) = train(&degenerate, &data, m, None).map_err(|e| e.to_string())?;
    for r in &drecs {
        let pre = r.preweights.as_ref().ok_or("missing preweights")?;
        for (p, s) in pre.iter().zip(&r.stats) {
            ensure(s.var == 0.0 && *p == s.mu, || {
                format!("step {}: preweight {p} for mean {} variance {}", r.step, s.mu, s.var)
            })?;
        }
    }
    Ok(format!(
        "{} steps on the simplex, {} degenerate steps reproduce their means",
        recs.len(),
        drecs.len()
    ))
}

fn sampler_statistics() -> Outcome {
    let pooled = vec![vec![0.2f64, 0.4, 0.6]];
    let (mu, var) = (0.4, 0.08 / 3.0);
    let mut policy = GaussianPolicy::new(2024);
    let n = 100_000;
    let mut draws = Vec::with_capacity(n);
    for _ in 0..n {
        let w = policy.assign(&pooled).map_err(|e| e.to_string())?;
        draws.push(w.preweights().ok_or("missing preweights")?[0]);
    }
    let mean = draws.iter().sum::<f64>() / n as f64;
    let svar = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    ensure((mean - mu).abs() < 0.003, || format!("mean {mean}"))?;
    ensure((svar - var).abs() / var < 0.05, || format!("variance {svar} vs {var}"))?;
    Ok(format!("mean {mean:.5} (target 0.4), variance {svar:.5} (target {var:.5})"))
}

struct Run {
    recs: Vec<StepRecord>,
    elapsed: Duration,
}

fn default_run(policy: WeightPolicyKind, data: &[PreferenceExample]) -> Result<Run, String> {
    let cfg = TrainConfig {
        weight_policy: policy,
        record_wallclock: false,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let (_, recs) = train(&cfg, data, PolicyModel::<f64>::new(cfg.model.clone()), None).map_err(|e| e.to_string())?;
    Ok(Run {
        recs,
        elapsed: start.elapsed(),
    })
}

fn rising(run: &Run) -> Result<(Vec<f64>, Vec<f64>), String> {
    ensure(run.recs.len() == 300, || format!("{} steps", run.recs.len()))?;
    let first = run.recs[0].margins.clone();
    let last = run.recs[299].margins.clone();
    ensure(first.iter().zip(&last).all(|(a, b)| b > a), || {
        format!("margins {first:?} -> {last:?}")
    })?;
    Ok((first, last))
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

fn margins_rise(run: &Run) -> Outcome {
    let (first, last) = rising(run)?;
    let corr = pairwise_dimension_correlation(&run.recs).map_err(|e| e.to_string())?;
    let mut lowest = f64::INFINITY;
    for i in 0..corr.len() {
        for j in i + 1..corr.len() {
            let c = corr[i][j].ok_or_else(|| format!("constant trajectory for pair ({i}, {j})"))?;
            ensure(c > 0.5, || format!("correlation ({i}, {j}) = {c}"))?;
            lowest = lowest.min(c);
        }
    }
    ensure(run.elapsed < Duration::from_secs(300), || format!("took {}", secs(run.elapsed)))?;
    Ok(format!(
        "margins {} -> {}, min pairwise correlation {lowest:.4}, {}",
        fmt(&first),
        fmt(&last),
        secs(run.elapsed)
    ))
}

fn fixed_vs_gaussian(gaussian: &Run, data: &[PreferenceExample]) -> Outcome {
    let fixed = default_run(WeightPolicyKind::Fixed, data)?;
    let (_, g) = rising(gaussian).map_err(|e| format!("gaussian: {e}"))?;
    let (_, f) = rising(&fixed).map_err(|e| format!("fixed: {e}"))?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(format!(
        "step-300 margins gaussian {} (mean {:.4}) vs fixed {} (mean {:.4})",
        fmt(&g),
        mean(&g),
        fmt(&f),
        mean(&f)
    ))
}

fn ablation_switches() -> Outcome {
    let data = synthetic(8, 5);
    let dpo = TrainConfig {
        objective: Objective::Dpo,
        epochs: 1,
        record_wallclock: false,
        model: tiny_model(),
        ..TrainConfig::default()
    };
    let m = PolicyModel::<f64>::new(dpo.model.clone());
    let reference = m.clone_frozen();
    let (_, recs) = train(&dpo, &data, m.clone(), Some(&reference)).map_err(|e| e.to_string())?;
    let dpo_err = (recs[0].loss - std::f64::consts::LN_2).abs();
    ensure(dpo_err <= 1e-12, || format!("DPO step-1 loss {} differs from ln 2 by {dpo_err:e}", recs[0].loss))?;

    let raw = TrainConfig {
        objective: Objective::Amopo,
        length_normalize: false,
        ..dpo.clone()
    };
    let (_, recs) = train(&raw, &data, m.clone(), None).map_err(|e| e.to_string())?;
    let dims = DimensionCatalog::builtin().select(&raw.dimensions).map_err(|e| e.to_string())?;
    let tk = m.tokenizer();
    let sum_logprob = |x: &[usize], y: &str| -> Result<f64, String> {
        let t = token_prob_trace(&m, x, &tk.encode(y)).map_err(|e| e.to_string())?;
        Ok(t.logprobs.iter().sum())
    };
    let mut total = 0.0;
    for e in &data {
        for (d, a) in dims.iter().zip(&recs[0].alphas) {
            let x = tk.encode(&map_prompt(&e.prompt, d, e.scores[&d.name]).map_err(|e| e.to_string())?);
            let delta = sum_logprob(&x, &e.chosen)? - sum_logprob(&x, &e.rejected)?;
            total -= a * log_sigmoid(raw.beta * delta - raw.gamma);
        }
    }
    let manual = total / data.len() as f64;
    let raw_err = (recs[0].loss - manual).abs();
    ensure(raw_err <= 1e-12, || format!("unnormalized loss {} vs manual {manual}", recs[0].loss))?;
    Ok(format!("DPO |loss - ln 2| = {dpo_err:.1e}, unnormalized |loss - manual| = {raw_err:.1e}"))
}

fn pipeline_determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_amopo");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |args: &[&str]| -> Result<std::process::Child, String> {
        Command::new(bin).args(args).stdout(Stdio::null()).spawn().map_err(|e| e.to_string())
    };
    let path = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let (d1, d2, o1, o2) = (path("a.jsonl"), path("b.jsonl"), path("run_a"), path("run_b"));
    let mut children = Vec::new();
    for (data, out) in [(&d1, &o1), (&d2, &o2)] {
        let synth = run(&["synth-data", "--size", "200", "--seed", "7", "--out", data])?
            .wait_with_output()
            .map_err(|e| e.to_string())?;
        ensure(synth.status.success(), || "synth-data failed".into())?;
        children.push(run(&[
            "train",
            "--data",
            data,
            "--out-dir",
            out,
            "--override",
            "record_wallclock=false",
            "--override",
            "checkpoint_every=100",
        ])?);
    }
    for c in children {
        let out = c.wait_with_output().map_err(|e| e.to_string())?;
        ensure(out.status.success(), || "train failed".into())?;
    }
    let same = |a: &str, b: &str| -> Result<(), String> {
        let (x, y) = (std::fs::read(a).map_err(|e| e.to_string())?, std::fs::read(b).map_err(|e| e.to_string())?);
        ensure(x == y, || format!("{a} and {b} differ"))
    };
    same(&d1, &d2)?;
    let files = [
        "metrics.csv",
        "checkpoint_step000100.bin",
        "checkpoint_step000200.bin",
        "checkpoint_step000300.bin",
        "checkpoint_final.bin",
    ];
    for f in files {
        same(
            &Path::new(&o1).join(f).to_string_lossy(),
            &Path::new(&o2).join(f).to_string_lossy(),
        )?;
    }
    Ok(format!("dataset and {} run artifacts byte-identical", files.len()))
}

fn check(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    match outcome {
        Ok(detail) => {
            println!("PASS {name}: {detail}");
            true
        }
        Err(detail) => {
            println!("FAIL {name}: {detail}");
            false
        }
    }
}

fn main() -> ExitCode {
    let data = synthetic(200, 7);
    let mut gaussian = None;
    let results = [
        check("gradient oracle", gradient_oracle),
        check("single-dimension reduction", || identities("simpo")),
        check("sum/product identity", || identities("sum_product")),
        check("weight normalization", weight_normalization),
        check("gaussian sampler statistics", sampler_statistics),
        check("margins rise together", || {
            let run = default_run(WeightPolicyKind::Gaussian, &data)?;
            let out = margins_rise(&run);
            gaussian = Some(run);
            out
        }),
        check("fixed vs gaussian weighting", || {
            let run = match gaussian.take() {
                Some(r) => r,
                None => default_run(WeightPolicyKind::Gaussian, &data)?,
            };
            fixed_vs_gaussian(&run, &data)
        }),
        check("ablation switches", ablation_switches),
        check("pipeline determinism", pipeline_determinism),
    ];
    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
