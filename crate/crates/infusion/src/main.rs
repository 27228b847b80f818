use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use infusion::checkpoint::Checkpoint;
use infusion::commands;
use infusion::config::{resolve_out, RunConfig};
use infusion::report;
use infusion::{CliError, Result};

/// Train, sample from and evaluate infusion-trained denoising chains.
///
/// Relative output directories are placed under $INFUSION_OUT_ROOT when it
/// is set. On failure a single `error: <kind>: <message>` line goes to stderr
/// and the exit code is 1.
#[derive(Parser, Debug)]
#[command(name = "infusion", version, args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train an operator and write checkpoint, history and per-epoch grids.
    Train(RunArgs),
    /// Draw model chains from a checkpoint.
    Sample(SampleArgs),
    /// Lower-bound, importance-sampling and Parzen estimates.
    Eval(EvalArgs),
    /// Complete a partially observed example by clamped sampling.
    Inpaint(InpaintArgs),
    /// Train one model per (steps, alpha0, omega) cell.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct Overrides {
    /// TOML run configuration merged over the preset or checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `section.key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Starting configuration: toy2d or mnist-small.
    #[arg(long, default_value = "toy2d")]
    preset: String,
    #[command(flatten)]
    common: Overrides,
    #[arg(long)]
    epochs: Option<usize>,
    /// Trained chain length T.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    alpha0: Option<f64>,
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    sigma_delta: Option<f64>,
    /// denoising or lower_bound.
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    eta0: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    common: Overrides,
    /// Number of chains.
    #[arg(long)]
    n: Option<usize>,
    /// Sampling steps; defaults to the trained T.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    common: Overrides,
    /// train, valid or test.
    #[arg(long)]
    split: Option<String>,
    /// Proposal chains per point.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    repetitions: Option<usize>,
    /// Also report the Parzen-window estimate.
    #[arg(long)]
    parzen: bool,
    #[arg(long)]
    parzen_samples: Option<usize>,
    #[arg(long)]
    parzen_sigma: Option<f64>,
    /// Add uniform noise of width 1/256 to the evaluated points.
    #[arg(long)]
    dequantize: bool,
    /// Evaluate with a fitted isotropic output variance.
    #[arg(long)]
    isotropic: bool,
}

#[derive(Args, Debug)]
struct InpaintArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    common: Overrides,
    #[arg(long)]
    split: Option<String>,
    /// Row of the split to complete.
    #[arg(long)]
    index: Option<usize>,
    /// top-half, bottom-half, left-half, right-half or dims:i,j,...
    #[arg(long)]
    mask: Option<String>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Chain lengths, comma separated.
    #[arg(long, value_delimiter = ',')]
    grid_steps: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    grid_alpha0: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    grid_omega: Option<Vec<f64>>,
}

fn set<T: ToString>(sets: &mut Vec<String>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        sets.push(format!("{}={}", key, v.to_string()));
    }
}

fn list<T: ToString>(v: &[T]) -> String {
    format!("[{}]", v.iter().map(ToString::to_string).collect::<Vec<_>>().join(", "))
}

fn quoted(s: Option<String>) -> Option<String> {
    s.map(|s| format!("{:?}", s))
}

/// Preset, then `--config`, then `--set`, then dedicated flags.
fn resolve(base: &RunConfig, common: &Overrides, mut extra: Vec<String>) -> Result<RunConfig> {
    let mut sets = common.sets.clone();
    set(&mut sets, "seed", common.seed);
    if let Some(out) = &common.out {
        sets.push(format!("output.dir={:?}", out.display().to_string()));
    }
    sets.append(&mut extra);
    base.resolve(common.config.as_deref(), &sets)
}

fn run_sets(a: &RunArgs) -> Vec<String> {
    let mut s = Vec::new();
    set(&mut s, "train.epochs", a.epochs);
    set(&mut s, "train.steps", a.steps);
    set(&mut s, "train.alpha0", a.alpha0);
    set(&mut s, "train.omega", a.omega);
    set(&mut s, "train.sigma_delta", a.sigma_delta);
    set(&mut s, "train.objective", quoted(a.objective.clone()));
    set(&mut s, "train.eta0", a.eta0);
    set(&mut s, "train.batch_size", a.batch_size);
    set(&mut s, "model.hidden_sizes", a.hidden.as_deref().map(list));
    s
}

/// Explicit `--out`, or `<checkpoint dir>/<name>`.
fn derived_out(common: &Overrides, checkpoint: &Path, name: &str) -> PathBuf {
    match &common.out {
        Some(o) => resolve_out(o),
        None => checkpoint.parent().unwrap_or(Path::new(".")).join(name),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => {
            let cfg = resolve(&RunConfig::preset(&a.preset)?, &a.common, run_sets(&a))?;
            let s = commands::train(&cfg, &cfg.output_dir())?;
            match (s.best_epoch, s.best_valid_lower_bound) {
                (Some(e), Some(lb)) => println!("best epoch {} valid lower bound {}", e, lb),
                _ => println!("no epochs run; checkpoint holds the initialization"),
            }
            println!("wrote {}", s.dir.display());
        }
        Command::Sample(a) => {
            let ckpt = Checkpoint::load(&a.checkpoint)?;
            let mut extra = Vec::new();
            set(&mut extra, "sample.n", a.n);
            set(&mut extra, "sample.steps", a.steps);
            let cfg = resolve(&ckpt.run, &a.common, extra)?;
            let out = derived_out(&a.common, &a.checkpoint, "sample");
            commands::sample(&ckpt, &cfg, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Eval(a) => {
            let ckpt = Checkpoint::load(&a.checkpoint)?;
            let mut extra = Vec::new();
            set(&mut extra, "eval.split", quoted(a.split));
            set(&mut extra, "eval.k", a.k);
            set(&mut extra, "eval.repetitions", a.repetitions);
            set(&mut extra, "eval.parzen_samples", a.parzen_samples);
            set(&mut extra, "eval.parzen_sigma", a.parzen_sigma);
            set(&mut extra, "eval.parzen", a.parzen.then_some(true));
            set(&mut extra, "eval.dequantize", a.dequantize.then_some(true));
            set(&mut extra, "eval.isotropic", a.isotropic.then_some(true));
            let cfg = resolve(&ckpt.run, &a.common, extra)?;
            let out = derived_out(&a.common, &a.checkpoint, "eval");
            let r = commands::eval(&ckpt, &cfg, &out)?;
            println!("{}", report::EVAL_HEADER.join(","));
            println!("{}", report::eval_row(&cfg.eval.split, cfg.eval.isotropic, cfg.eval.dequantize, &r).join(","));
        }
        Command::Inpaint(a) => {
            let ckpt = Checkpoint::load(&a.checkpoint)?;
            let mut extra = Vec::new();
            set(&mut extra, "inpaint.split", quoted(a.split));
            set(&mut extra, "inpaint.index", a.index);
            set(&mut extra, "inpaint.mask", quoted(a.mask));
            set(&mut extra, "inpaint.restarts", a.restarts);
            set(&mut extra, "inpaint.steps", a.steps);
            let cfg = resolve(&ckpt.run, &a.common, extra)?;
            let out = derived_out(&a.common, &a.checkpoint, "inpaint");
            commands::inpaint(&ckpt, &cfg, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Sweep(a) => {
            let mut extra = run_sets(&a.run);
            set(&mut extra, "sweep.steps", a.grid_steps.as_deref().map(list));
            set(&mut extra, "sweep.alpha0", a.grid_alpha0.as_deref().map(list));
            set(&mut extra, "sweep.omega", a.grid_omega.as_deref().map(list));
            let cfg = resolve(&RunConfig::preset(&a.run.preset)?, &a.run.common, extra)?;
            let out = cfg.output_dir();
            for r in commands::sweep(&cfg, &out)? {
                println!(
                    "cell {} steps {} alpha0 {} omega {} best valid lower bound {}",
                    r.cell,
                    r.steps,
                    r.alpha0,
                    r.omega,
                    r.best_valid_lower_bound.map(|v| v.to_string()).unwrap_or_else(|| "-".to_string())
                );
            }
            println!("wrote {}", out.join("summary.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.kind(), single_line(&e));
            ExitCode::FAILURE
        }
    }
}

fn single_line(e: &CliError) -> String {
    e.to_string().replace('\n', " ")
}
