//! `lite` — memory-efficient episodic meta-learning.
//!
//! Subcommands: train, eval, gradcheck, bias-variance, memstat. All accept a
//! flat key=value config file plus overrides; every output is a CSV or LTEN
//! file and stdout carries one JSON summary line per command.
//!
//! Exit codes: 0 success, 1 verification failure, 2 configuration or input
//! error, 3 non-finite loss.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use lite_cli::commands;
use lite_cli::config::{Command as RunCommand, RunConfig};
use lite_cli::exec::WorkerPool;

#[derive(Parser)]
#[command(name = "lite", version, about = "Memory-efficient episodic meta-learning")]
struct Cli {
    #[command(subcommand)]
    command: Commands,
}

#[derive(Args, Default)]
struct CommonArgs {
    /// Flat key=value config file (# comments allowed).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the `out` key.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; overrides the `workers` key.
    #[arg(long)]
    workers: Option<usize>,
    /// Compute in 32-bit floats.
    #[arg(long = "f32")]
    f32_mode: bool,
    /// Extra KEY=VALUE overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Commands {
    /// Meta-train a model and write a checkpoint plus a CSV training log.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Model family (model key).
        #[arg(long)]
        model: Option<String>,
        /// Training mode: lite | full | subsampled (train.mode key).
        #[arg(long)]
        mode: Option<String>,
        /// Back-prop subset size (lite.h key).
        #[arg(long = "H")]
        h: Option<usize>,
        /// Task count (train.iterations key).
        #[arg(long)]
        iterations: Option<u64>,
        /// Learning rate (train.lr key).
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Evaluate a checkpoint over test episodes with a 95% CI.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint file written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Episode count (eval.episodes key).
        #[arg(long)]
        episodes: Option<u64>,
    },
    /// Compare backward gradients against finite differences.
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the two-arm bias/RMSE experiment over |H|.
    BiasVariance {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Measure retained-activation counts over (N, H) grids.
    Memstat {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn overrides_from(common: &CommonArgs, extra: Vec<(String, String)>) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for item in &common.set {
        let Some((k, v)) = item.split_once('=') else {
            anyhow::bail!("--set expects KEY=VALUE, got '{item}'");
        };
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = common.seed {
        pairs.push(("seed".into(), seed.to_string()));
    }
    if let Some(out) = &common.out {
        pairs.push(("out".into(), out.display().to_string()));
    }
    if let Some(workers) = common.workers {
        pairs.push(("workers".into(), workers.to_string()));
    }
    if common.f32_mode {
        pairs.push(("f32".into(), "true".into()));
    }
    pairs.extend(extra);
    Ok(pairs)
}

fn prepare(cfg: &RunConfig) -> Result<WorkerPool> {
    let out = cfg.out_dir();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.txt"), cfg.echo())?;
    WorkerPool::new(cfg.workers()?)
}

fn dispatch(cfg: &RunConfig, run: impl FnOnce(&RunConfig, &WorkerPool) -> Result<i32>) -> Result<i32> {
    let pool = prepare(cfg)?;
    run(cfg, &pool)
}

fn real_main() -> Result<i32> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LITE_LOG", "warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Commands::Train { common, model, mode, h, iterations, lr } => {
            let mut extra = Vec::new();
            if let Some(m) = model {
                extra.push(("model".to_string(), m));
            }
            if let Some(m) = mode {
                extra.push(("train.mode".to_string(), m));
            }
            if let Some(h) = h {
                extra.push(("lite.h".to_string(), h.to_string()));
            }
            if let Some(it) = iterations {
                extra.push(("train.iterations".to_string(), it.to_string()));
            }
            if let Some(lr) = lr {
                extra.push(("train.lr".to_string(), lr.to_string()));
            }
            let cfg = RunConfig::resolve(
                RunCommand::Train,
                common.config.as_deref(),
                &overrides_from(&common, extra)?,
            )?;
            if cfg.use_f32()? {
                dispatch(&cfg, commands::cmd_train::<f32>)
            } else {
                dispatch(&cfg, commands::cmd_train::<f64>)
            }
        }
        Commands::Eval { common, checkpoint, episodes } => {
            let mut extra = Vec::new();
            if let Some(e) = episodes {
                extra.push(("eval.episodes".to_string(), e.to_string()));
            }
            let cfg = RunConfig::resolve(
                RunCommand::Eval,
                common.config.as_deref(),
                &overrides_from(&common, extra)?,
            )?;
            if cfg.use_f32()? {
                dispatch(&cfg, |cfg, pool| commands::cmd_eval::<f32>(cfg, pool, &checkpoint))
            } else {
                dispatch(&cfg, |cfg, pool| commands::cmd_eval::<f64>(cfg, pool, &checkpoint))
            }
        }
        Commands::Gradcheck { common } => {
            let cfg = RunConfig::resolve(
                RunCommand::GradCheck,
                common.config.as_deref(),
                &overrides_from(&common, Vec::new())?,
            )?;
            // Finite differences are only meaningful in 64-bit mode.
            if cfg.use_f32()? {
                anyhow::bail!("config key 'f32': gradcheck requires 64-bit mode");
            }
            dispatch(&cfg, commands::cmd_gradcheck::<f64>)
        }
        Commands::BiasVariance { common } => {
            let cfg = RunConfig::resolve(
                RunCommand::BiasVariance,
                common.config.as_deref(),
                &overrides_from(&common, Vec::new())?,
            )?;
            if cfg.use_f32()? {
                dispatch(&cfg, commands::cmd_bias_variance::<f32>)
            } else {
                dispatch(&cfg, commands::cmd_bias_variance::<f64>)
            }
        }
        Commands::Memstat { common } => {
            let cfg = RunConfig::resolve(
                RunCommand::MemStat,
                common.config.as_deref(),
                &overrides_from(&common, Vec::new())?,
            )?;
            if cfg.use_f32()? {
                dispatch(&cfg, commands::cmd_memstat::<f32>)
            } else {
                dispatch(&cfg, commands::cmd_memstat::<f64>)
            }
        }
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err:#}");
            let non_finite = err
                .chain()
                .any(|cause| matches!(cause.downcast_ref(), Some(lite_core::Error::NonFiniteLoss { .. })));
            if non_finite {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
