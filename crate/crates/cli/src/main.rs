use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tsdistill::config::RunConfig;
use tsdistill::data::{synth_generate, write_csv};
use tsdistill::harness;
use tsdistill::model::DistillModel;
use tsdistill::optim::Adam;
use tsdistill::tensor::GradCheckOptions;

#[derive(Parser)]
#[command(name = "tsdistill", version, about = "Train and evaluate cross-modal distilled time-series forecasters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic series as CSV.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes config, loss trace, checkpoint and metrics.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the configured test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write the report as JSON to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forecast from the last lookback rows of a CSV file.
    Forecast {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Forecast length; defaults to the trained horizon.
        #[arg(long)]
        horizon: Option<usize>,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and compare the ablation variants.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare total-loss gradients against finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Coordinates to sample.
        #[arg(long, default_value_t = 200)]
        coords: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Optimizer steps taken before checking, so adapters are nonzero.
        #[arg(long, default_value_t = 3)]
        warmup: usize,
    },
}

/// Resolves the config file, `--seed` and `--set` overrides. When no file is
/// given and `checkpoint` is, the `config.txt` saved next to it is used.
fn resolve(common: &Common, checkpoint: Option<&Path>) -> Result<RunConfig> {
    let path = common.config.clone().or_else(|| {
        checkpoint
            .and_then(Path::parent)
            .map(|d| d.join(harness::CONFIG_FILE))
            .filter(|p| p.exists())
    });
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::parse(&text).with_context(|| format!("in {}", p.display()))?
        }
        None if checkpoint.is_some() => bail!("no --config given and no config.txt next to the checkpoint"),
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    for s in &common.set {
        cfg.apply_override(s).with_context(|| format!("--set {s}"))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, out } => {
            let cfg = resolve(&common, None)?;
            let table = synth_generate(
                cfg.synth_seed.unwrap_or(cfg.seed),
                cfg.synth_len,
                cfg.synth_variates,
                &cfg.synth_spec(),
            )?;
            write_csv(&table, std::fs::File::create(&out)?)?;
            println!("wrote {} rows to {}", table.len(), out.display());
        }
        Command::Train { common, out } => {
            let cfg = resolve(&common, None)?;
            let s = harness::cmd_train(&cfg, &out)?;
            let last = s.trace.last().map_or(f64::NAN, |r| r.total);
            println!(
                "trained {} epochs, final total {last:.6}; test mse {:.6} (persistence {:.6}), smape {:.4}",
                s.trace.len(),
                s.test.mse,
                s.persistence.mse,
                s.test.smape
            );
            println!("checkpoint {}", s.checkpoint.display());
        }
        Command::Eval {
            common,
            checkpoint,
            out,
        } => {
            let cfg = resolve(&common, Some(&checkpoint))?;
            let report = harness::cmd_eval(&checkpoint, &cfg)?;
            let json = serde_json::to_string(&report)?;
            if let Some(o) = out {
                std::fs::write(o, &json)?;
            }
            println!("{json}");
        }
        Command::Forecast {
            common,
            checkpoint,
            input,
            horizon,
            out,
        } => {
            let cfg = resolve(&common, Some(&checkpoint))?;
            let h = horizon.unwrap_or(cfg.horizon);
            let rows = harness::cmd_forecast(&checkpoint, &cfg, &input, h, &out)?;
            println!("wrote {} forecast rows to {}", rows.len(), out.display());
        }
        Command::Ablate { common, out } => {
            let cfg = resolve(&common, None)?;
            let rows = harness::cmd_ablate(&cfg, &out)?;
            println!("{:<6}{:>5}{:>9}{:>5}{:>12}{:>12}", "model", "dag", "feature", "ot", "smape", "mase");
            for r in rows {
                let m = |b: bool| if b { "x" } else { "-" };
                println!(
                    "{:<6}{:>5}{:>9}{:>5}{:>12.4}{:>12.4}",
                    r.model,
                    m(r.toggles.dag),
                    m(r.toggles.feature),
                    m(r.toggles.ot),
                    r.metrics.smape,
                    r.metrics.mase
                );
            }
        }
        Command::Gradcheck {
            common,
            coords,
            eps,
            tol,
            warmup,
        } => {
            let cfg = resolve(&common, None)?;
            let table = harness::load_series(&cfg)?;
            let data = harness::prepare(&cfg, &table, None)?;
            let mut model = DistillModel::new(cfg.model_config(data.variates()), cfg.seed)?;
            let n = cfg.batch_size.min(data.train.len());
            let batch = data.train.batch(&(0..n).collect::<Vec<_>>());
            let mut opt = Adam::new(&model.store, cfg.lr.max(1e-2));
            for _ in 0..warmup {
                model.train_step(&batch, &mut opt)?;
            }
            let report = model.check_gradients(
                &batch,
                &GradCheckOptions {
                    eps,
                    tol,
                    max_coords: Some(coords),
                    seed: cfg.seed,
                    ..GradCheckOptions::default()
                },
            )?;
            println!(
                "checked {} coordinates, max relative error {:.3e}: {}",
                report.checked,
                report.max_rel_error,
                if report.passed { "ok" } else { "FAILED" }
            );
            if !report.passed {
                std::process::exit(1);
            }
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(2);
    }
}
