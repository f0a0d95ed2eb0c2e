use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::{Command as Process, ExitCode};

use amopo_core::autodiff::OpKind;
use amopo_core::checks::{gradient_check, identity_suite, GradCheckConfig, IdentityConfig, ModelSize};
use amopo_core::policy::{load_checkpoint, save_checkpoint};
use amopo_core::prefdata::{generate_synthetic, load_dataset, save_dataset, DimensionCatalog, SynthConfig};
use amopo_core::trainer::{evaluate_margins, train_with, MetricsWriter, Objective, RunManifest, TrainConfig};
use amopo_core::PolicyModel;
use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

/// Default for `train --out-dir`.
const OUT_DIR_ENV: &str = "AMOPO_OUT_DIR";

/// Gradient checks pass below this relative error.
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "amopo", version, about = "Adaptive multi-objective preference optimization on a toy language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded synthetic preference dataset as JSONL.
    SynthData {
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated dimension names; defaults to the full catalog.
        #[arg(long, value_delimiter = ',')]
        dimensions: Vec<String>,
    },
    /// Train a policy and write metrics, a manifest and checkpoints.
    Train {
        /// TOML config; every key is optional.
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key=value` config override, repeatable. Dotted keys reach nested tables.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to $AMOPO_OUT_DIR, then `runs`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Compare backpropagated gradients with central differences on a toy model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "tiny")]
        model_size: ModelSize,
        #[arg(long, hide = true)]
        corrupt_backward: Option<OpKind>,
    },
    /// Print dataset-wide per-dimension margins of a checkpoint.
    EvalMargins {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Check the loss identities over seeded random instances.
    IdentityCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        instances: usize,
        #[arg(long, default_value_t = 50)]
        simpo_instances: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SynthData {
            size,
            seed,
            out,
            dimensions,
        } => synth_data(size, seed, &out, &dimensions),
        Command::Train {
            config,
            overrides,
            data,
            out_dir,
        } => train(config.as_deref(), &overrides, &data, out_dir),
        Command::Gradcheck {
            seed,
            model_size,
            corrupt_backward,
        } => gradcheck(seed, model_size, corrupt_backward),
        Command::EvalMargins {
            checkpoint,
            data,
            config,
            overrides,
        } => eval_margins(&checkpoint, &data, config.as_deref(), &overrides),
        Command::IdentityCheck {
            seed,
            instances,
            simpo_instances,
        } => identity_check(seed, instances, simpo_instances),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn synth_data(size: usize, seed: u64, out: &Path, dimensions: &[String]) -> anyhow::Result<ExitCode> {
    let cat = DimensionCatalog::builtin();
    let dims = if dimensions.is_empty() {
        cat.dimensions.clone()
    } else {
        cat.select(dimensions)?
    };
    let data = generate_synthetic(&SynthConfig { size, seed, dims })?;
    save_dataset(out, &data).with_context(|| format!("writing {}", out.display()))?;
    println!("{}", data.len());
    Ok(ExitCode::SUCCESS)
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<TrainConfig> {
    let base = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::from_toml(&text)?
        }
        None => TrainConfig::default(),
    };
    let config = base.with_overrides(overrides)?;
    config.validate()?;
    Ok(config)
}

fn git_revision() -> String {
    Process::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}

fn train(config: Option<&Path>, overrides: &[String], data: &Path, out_dir: Option<PathBuf>) -> anyhow::Result<ExitCode> {
    let config = load_config(config, overrides)?;
    let catalog = DimensionCatalog::builtin();
    let dims = catalog.select(&config.dimensions)?;
    let bytes = fs::read(data).with_context(|| format!("reading {}", data.display()))?;
    let dataset = load_dataset(data, &dims).with_context(|| format!("loading {}", data.display()))?;
    let out_dir = out_dir
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;

    let model = PolicyModel::new(config.model.clone());
    let reference = (config.objective == Objective::Dpo).then(|| model.clone_frozen());
    let config_hash = config.hash();
    let meta = |step: usize| -> BTreeMap<String, String> {
        BTreeMap::from([
            ("step".to_string(), step.to_string()),
            ("config_sha256".to_string(), config_hash.clone()),
            ("template_version".to_string(), catalog.version.clone()),
            ("seed".to_string(), config.seed.to_string()),
            ("weight_seed".to_string(), config.weight_seed.to_string()),
        ])
    };

    let csv_path = out_dir.join("metrics.csv");
    let csv = File::create(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
    let mut metrics = MetricsWriter::new(BufWriter::new(csv), config.k())?;
    let every = config.checkpoint_every;
    let (model, records) = train_with(&config, &dataset, model, reference.as_ref(), |r, m| {
        metrics.write(r)?;
        if every > 0 && r.step % every == 0 {
            save_checkpoint(m, &meta(r.step), &out_dir.join(format!("checkpoint_step{:06}.bin", r.step)))?;
        }
        Ok(())
    })?;
    let steps = records.len();
    save_checkpoint(&model, &meta(steps), &out_dir.join("checkpoint_final.bin"))?;

    let last = records.last();
    let manifest = RunManifest {
        config_sha256: config_hash.clone(),
        seed: config.seed,
        weight_seed: config.weight_seed,
        model_seed: config.model.seed,
        template_version: catalog.version.clone(),
        git_revision: git_revision(),
        dataset_sha256: hex::encode(Sha256::digest(&bytes)),
        dataset_size: dataset.len(),
        steps,
        final_loss: last.map(|r| r.loss),
        final_margins: last.map(|r| r.margins.clone()).unwrap_or_default(),
        dimensions: config.dimensions.clone(),
        config: config.clone(),
    };
    let manifest_path = out_dir.join("manifest.json");
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")
        .with_context(|| format!("writing {}", manifest_path.display()))?;

    if let Some(r) = last {
        println!("final_loss {}", r.loss);
        let names: Vec<&str> = if config.collapse_dimensions {
            vec!["collapsed"]
        } else {
            config.dimensions.iter().map(String::as_str).collect()
        };
        for (name, m) in names.iter().zip(&r.margins) {
            println!("margin {name} {m}");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(seed: u64, size: ModelSize, corrupt: Option<OpKind>) -> anyhow::Result<ExitCode> {
    let mut cfg = GradCheckConfig::toy(seed, size);
    cfg.corrupt = corrupt.map(|op| (op, 1.5));
    let report = gradient_check(&cfg)?;
    if report.num_params > 1000 {
        bail!("gradient check model has {} parameters, limit is 1000", report.num_params);
    }
    println!("params {}", report.num_params);
    println!("max_rel_error {:e}", report.max_rel_error);
    println!("worst_param {}", report.worst_param);
    if report.max_rel_error < GRAD_TOLERANCE {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "gradient check failed: {} has relative error {:e} (analytic {:e}, numeric {:e}), tolerance {:e}",
            report.worst_param, report.max_rel_error, report.worst_analytic, report.worst_numeric, GRAD_TOLERANCE
        );
        Ok(ExitCode::FAILURE)
    }
}

fn eval_margins(checkpoint: &Path, data: &Path, config: Option<&Path>, overrides: &[String]) -> anyhow::Result<ExitCode> {
    let config = load_config(config, overrides)?;
    let dims = DimensionCatalog::builtin().select(&config.dimensions)?;
    let dataset = load_dataset(data, &dims).with_context(|| format!("loading {}", data.display()))?;
    let (model, _) =
        load_checkpoint::<f64>(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let margins = evaluate_margins(&model, &dataset, &config)?;
    println!("dimension,margin");
    let names: Vec<&str> = if config.collapse_dimensions {
        vec!["collapsed"]
    } else {
        config.dimensions.iter().map(String::as_str).collect()
    };
    for (name, m) in names.iter().zip(&margins) {
        println!("{name},{m}");
    }
    Ok(ExitCode::SUCCESS)
}

fn identity_check(seed: u64, instances: usize, simpo_instances: usize) -> anyhow::Result<ExitCode> {
    let report = identity_suite(&IdentityConfig {
        seed,
        instances,
        simpo_instances,
    })?;
    for (name, t) in [
        ("sum_product", &report.sum_product),
        ("simpo_reduction", &report.simpo_reduction),
        ("softmax", &report.softmax),
    ] {
        println!("{name} {}/{} max_error {:e}", t.passed, t.total, t.max_error);
    }
    if report.all_passed() {
        return Ok(ExitCode::SUCCESS);
    }
    for f in &report.failures {
        eprintln!("{}", serde_json::to_string(f)?);
    }
    Ok(ExitCode::FAILURE)
}
