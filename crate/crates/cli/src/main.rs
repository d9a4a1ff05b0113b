use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fairdrl_core::harness::{
    cmd_ablate, cmd_evaluate, cmd_predict, cmd_rasterize, cmd_synth, cmd_sweep, cmd_train, medians, DataSource,
    RunConfig,
};
use fairdrl_core::FairError;

#[derive(Parser)]
#[command(name = "fairdrl", version, about = "Fairness-aware spatio-temporal demand forecasting")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the training seed (and the scenario seed for `synth`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-bias synthetic scenario.
    Synth,
    /// Rasterize raw CSV inputs into a feature stack.
    Rasterize,
    /// Train a model and fit its forecast head.
    Train,
    /// Compute model and historical-average metrics for a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Forecast demand after the training frames.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        horizon: usize,
    },
    /// Train and evaluate every (lambda, seed) pair.
    Sweep,
    /// Train and evaluate the module ablation grid.
    Ablate,
}

fn load_config(global: &Global) -> Result<RunConfig> {
    let mut cfg = match &global.config {
        Some(path) => RunConfig::read(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &global.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = global.seed {
        cfg.train.seed = seed;
        cfg.seeds = vec![seed];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.global)?;
    let out: &Path = &cfg.out_dir.clone();
    match cli.command {
        Command::Synth => {
            let DataSource::Synthetic { scenario } = &mut cfg.data else {
                return Err(FairError::invalid("run config", "synth needs a synthetic data source").into());
            };
            if let Some(seed) = cli.global.seed {
                scenario.seed = seed;
            }
            let paths = cmd_synth(scenario, out)?;
            println!("wrote {}", paths.stack.display());
        }
        Command::Rasterize => {
            let raster = cfg
                .raster
                .as_ref()
                .ok_or_else(|| FairError::invalid("run config", "rasterize needs a `raster` section"))?;
            let diag = cmd_rasterize(raster, out)?;
            println!(
                "wrote {} ({} out of bounds, {} out of period, {} warnings)",
                out.join("stack.fdt").display(),
                diag.out_of_bounds,
                diag.out_of_period,
                diag.warnings.len()
            );
        }
        Command::Train => {
            let t = cmd_train(&cfg, out)?;
            println!(
                "trained {} steps in {:.1}s; checkpoint {}",
                t.log.rows.len(),
                t.log.wall_clock_secs,
                t.checkpoint.display()
            );
        }
        Command::Evaluate { checkpoint } => {
            let (reports, warnings) = cmd_evaluate(&cfg, &checkpoint, out)?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            for r in reports {
                println!(
                    "{:<6} mae {:>10} rfg {:>10} ifg {:>10} sr {:.4}",
                    r.method,
                    fmt(r.mae),
                    fmt(r.rfg),
                    fmt(r.ifg),
                    r.sr
                );
            }
        }
        Command::Predict { checkpoint, horizon } => {
            let preds = cmd_predict(&cfg, &checkpoint, horizon, out)?;
            println!("wrote {} values to {}", preds.yhat().len(), out.join("predictions.csv").display());
        }
        Command::Sweep => summarize(&cmd_sweep(&cfg, out)?),
        Command::Ablate => summarize(&cmd_ablate(&cfg, out)?),
    }
    Ok(())
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn summarize(rows: &[fairdrl_core::harness::SweepRow]) {
    let failed = rows.iter().filter(|r| r.failed()).count();
    for m in medians(rows) {
        println!(
            "{:<18} lambda {:<5} median mae {:>10} rfg {:>10} (n={})",
            m.variant.name(),
            m.lambda,
            fmt(m.mae),
            fmt(m.rfg),
            m.n
        );
    }
    if failed > 0 {
        eprintln!("{failed} of {} cells failed", rows.len());
    }
}

/// 1 for configuration and input validation errors, 2 for runtime failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<FairError>() {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.global.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli).context("fairdrl failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
