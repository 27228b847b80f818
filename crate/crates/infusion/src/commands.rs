//! The `train`, `sample`, `eval`, `inpaint` and `sweep` subcommands.
//!
//! Artifacts other than `timing.log` depend only on the configuration, so
//! two runs with the same seed write byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use infusion_core::evaluation::{evaluate_model, EvalReport};
use infusion_core::infusion::run_infusion_chain;
use infusion_core::model::{fit_prior, run_clamped_chain, run_model_chain, transition_moments};
use infusion_core::rng::{self, tag};
use infusion_core::training::{self, fit_isotropic_variance, EpochRecord, TrainObserver};
use infusion_core::{ChainTrace, FactorialGaussian, Mode, OutputMode, Tensor, Transition, TransitionOperator};

use crate::checkpoint::Checkpoint;
use crate::config::{DataKind, RunConfig};
use crate::data::{self, Dataset, Limits, Split};
use crate::error::{io_err, CliError, Result};
use crate::image::{self, Gray};
use crate::report::{self, SweepRow};

/// Floor for the per-dimension variance of the fitted prior.
pub const PRIOR_VAR_FLOOR: f64 = 1e-4;
/// Side of the square canvas used for 2-D scatter plots.
pub const SCATTER_SIZE: usize = 256;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.toml";
pub const HISTORY_FILE: &str = "history.csv";
pub const TIMING_FILE: &str = "timing.log";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Dataset described by `run.data`, split with `run.seed`.
pub fn load_dataset(run: &RunConfig) -> Result<Dataset> {
    let d = &run.data;
    let nonzero = |v: usize| (v > 0).then_some(v);
    match d.kind {
        DataKind::Toy2d => {
            let ds = data::toy_two_gaussians(&mut rng::stream(run.seed, &[tag::DATA]), d.toy_n, d.toy_centers, d.toy_std)?;
            data::split(ds, d.fractions, run.seed)
        }
        DataKind::Mnist => {
            let limits = Limits { train: nonzero(d.train_limit), valid: nonzero(d.valid_limit), test: nonzero(d.test_limit) };
            data::mnist(&d.mnist_dir, nonzero(d.mnist_side), limits, run.seed)
        }
    }
}

/// Evaluation mode for an operator: batch norm without finalized statistics
/// falls back to mini-batch statistics.
fn mode_for(op: &TransitionOperator) -> Mode {
    if op.config().batch_norm && !op.norm_stats_finalized() {
        Mode::Train
    } else {
        Mode::Eval
    }
}

/// Mean of every transition's Gaussian output, `states[s - 1] → mean(s)`.
fn transition_means(op: &TransitionOperator, trace: &ChainTrace, mode: Mode) -> Result<Vec<Tensor>> {
    (1..trace.len())
        .map(|s| Ok(transition_moments(op, &trace.states[s - 1], s.min(op.steps()), mode)?.0))
        .collect()
}

/// Interleaves per-column tensors into a `rows × columns.len()` grid matrix.
fn grid_matrix(columns: &[&Tensor]) -> Result<Tensor> {
    let n = columns[0].rows();
    let mut rows = Vec::with_capacity(n * columns.len());
    for i in 0..n {
        for c in columns {
            rows.push(c.row(i).to_vec());
        }
    }
    Ok(Tensor::from_rows(&rows)?)
}

/// Layers for a scatter plot of chain states: earlier states lighter.
fn chain_scatter(states: &[&Tensor], targets: Option<&Tensor>) -> Result<Gray> {
    let mut layers: Vec<(&Tensor, u8)> = states
        .iter()
        .enumerate()
        .map(|(s, t)| (*t, (200 - 150 * s / (states.len() - 1).max(1)) as u8))
        .collect();
    if let Some(x) = targets {
        layers.push((x, 0));
    }
    image::scatter(&layers, SCATTER_SIZE)
}

struct EpochWriter<'a> {
    dir: PathBuf,
    prior: &'a FactorialGaussian,
    run: &'a RunConfig,
    targets: Option<Tensor>,
    shape: Option<(usize, usize)>,
    started: Instant,
    timing: String,
}

impl EpochWriter<'_> {
    fn draw(&self, record: &EpochRecord, op: &TransitionOperator) -> Result<()> {
        let Some(xs) = &self.targets else { return Ok(()) };
        let mode = mode_for(op);
        let steps = op.steps();
        let trace = run_infusion_chain(&mut rng::stream(self.run.seed, &[tag::VISUALIZE]), self.prior, op, &self.run.schedule(), xs, steps, mode)?;
        let (last_mean, _) = transition_moments(op, trace.last_state(), steps, mode)?;
        let path = self.dir.join(format!("epoch_{:04}.pgm", record.epoch));
        let gray = match self.shape {
            Some(shape) => {
                let mut cols: Vec<&Tensor> = trace.states.iter().collect();
                cols.push(&last_mean);
                cols.push(xs);
                image::grid(&grid_matrix(&cols)?, xs.rows(), cols.len(), shape)?
            }
            None if op.dim() == 2 => {
                let mut states: Vec<&Tensor> = trace.states.iter().collect();
                states.push(&last_mean);
                chain_scatter(&states, Some(xs))?
            }
            None => return Ok(()),
        };
        gray.write(&path)
    }
}

impl TrainObserver for EpochWriter<'_> {
    fn on_epoch(&mut self, record: &EpochRecord, op: &TransitionOperator) -> infusion_core::Result<()> {
        let _ = writeln!(self.timing, "epoch {} {:.3}s", record.epoch, self.started.elapsed().as_secs_f64());
        self.draw(record, op).map_err(|e| infusion_core::Error::InvalidConfig(format!("epoch visualization: {}", e)))
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub dir: PathBuf,
    pub best_epoch: Option<usize>,
    pub best_valid_lower_bound: Option<f64>,
    pub history: Vec<EpochRecord>,
}

/// Run configuration as stored in checkpoints: `output` and `sweep` reset.
fn portable(run: &RunConfig) -> RunConfig {
    RunConfig { output: Default::default(), sweep: Default::default(), ..run.clone() }
}

/// Trains on the train split, selecting on the validation lower bound, and
/// writes `config.toml`, `checkpoint.bin`, `history.csv`, `timing.log` and
/// one infusion-chain picture per epoch under `epochs/`.
pub fn train(run: &RunConfig, out: &Path) -> Result<TrainSummary> {
    run.validate()?;
    create_dir(out)?;
    write_text(&out.join(CONFIG_FILE), &run.to_toml()?)?;
    let ds = load_dataset(run)?;
    let (train_rows, valid_rows) = (ds.subset(Split::Train), ds.subset(Split::Valid));
    if train_rows.rows() == 0 || valid_rows.rows() == 0 {
        return Err(CliError::Config(format!("{} has an empty train or valid split", ds.source)));
    }
    let prior = fit_prior(&train_rows, PRIOR_VAR_FLOOR)?;
    let op = TransitionOperator::new(run.operator_config(ds.dim()), &mut rng::stream(run.seed, &[tag::INIT]))?;
    let vis = run.train.visualize.min(valid_rows.rows());
    let epochs_dir = out.join("epochs");
    if vis > 0 {
        create_dir(&epochs_dir)?;
    }
    let mut writer = EpochWriter {
        dir: epochs_dir,
        prior: &prior,
        run,
        targets: (vis > 0 && !(run.model.batch_norm && vis < 2)).then(|| valid_rows.gather_rows(&(0..vis).collect::<Vec<_>>())),
        shape: ds.image_shape,
        started: Instant::now(),
        timing: String::new(),
    };
    let outcome = training::train(op, &prior, &train_rows, &valid_rows, &run.train_config(), &mut writer)?;
    write_text(&out.join(TIMING_FILE), &writer.timing)?;
    Checkpoint::new(&portable(run), &outcome.best, &prior, outcome.best_epoch).save(&out.join(CHECKPOINT_FILE))?;
    report::write_history(&out.join(HISTORY_FILE), &outcome.history)?;
    let best_valid_lower_bound = outcome.best_epoch.map(|e| outcome.history[e - 1].valid_lower_bound);
    Ok(TrainSummary { dir: out.to_path_buf(), best_epoch: outcome.best_epoch, best_valid_lower_bound, history: outcome.history })
}

fn steps_or_trained(steps: usize, op: &TransitionOperator) -> usize {
    if steps == 0 {
        op.steps()
    } else {
        steps
    }
}

/// Runs `run.sample.n` model chains and writes `chain.csv` (every state),
/// `chain.pgm` (one row per chain: `z(0)` then the mean of every transition)
/// and `samples.pgm` (final means as a square-ish grid for images, a scatter
/// plot of the final states for 2-D data).
pub fn sample(ckpt: &Checkpoint, run: &RunConfig, out: &Path) -> Result<ChainTrace> {
    run.validate()?;
    create_dir(out)?;
    let op = ckpt.operator()?;
    let mode = mode_for(&op);
    let steps = steps_or_trained(run.sample.steps, &op);
    let n = run.sample.n;
    let trace = run_model_chain(&mut rng::stream(run.seed, &[tag::SAMPLE]), &ckpt.prior, &op, n, steps, mode)?;
    report::write_chain(&out.join("chain.csv"), &trace)?;
    let means = transition_means(&op, &trace, mode)?;
    let d = op.dim();
    let side = (d as f64).sqrt().round() as usize;
    let shape = if ckpt.run.data.kind == DataKind::Mnist && side * side == d { (side, side) } else { (1, d) };
    let mut cols: Vec<&Tensor> = vec![&trace.states[0]];
    cols.extend(means.iter());
    image::write_grid(&out.join("chain.pgm"), &grid_matrix(&cols)?, n, cols.len(), shape)?;
    if shape.0 > 1 {
        let last = means.last().expect("at least one step");
        let gc = (n as f64).sqrt().ceil() as usize;
        let gr = n.div_ceil(gc);
        let mut padded = last.data().to_vec();
        padded.resize(gr * gc * d, 0.0);
        image::write_grid(&out.join("samples.pgm"), &Tensor::matrix(gr * gc, d, padded)?, gr, gc, shape)?;
    } else if d == 2 {
        chain_scatter(&[trace.last_state()], None)?.write(&out.join("samples.pgm"))?;
    }
    write_text(&out.join(CONFIG_FILE), &run.to_toml()?)?;
    Ok(trace)
}

/// Estimates the lower bound, the importance-sampling estimate and
/// optionally the Parzen log-likelihood on `run.eval.split`; writes
/// `eval.csv`.
pub fn eval(ckpt: &Checkpoint, run: &RunConfig, out: &Path) -> Result<EvalReport> {
    run.validate()?;
    create_dir(out)?;
    let mut op = ckpt.operator()?;
    let ds = load_dataset(&ckpt.run)?;
    let split = Split::parse(&run.eval.split)?;
    let rows = ds.subset(split);
    let sched = ckpt.run.schedule();
    let mode = mode_for(&op);
    if run.eval.isotropic {
        let train_rows = ds.subset(Split::Train);
        let fixed_var = fit_isotropic_variance(&op, &ckpt.prior, &sched, &train_rows, run.eval.batch_size, &mut rng::stream(run.seed, &[tag::ISOTROPIC]), mode)?;
        op.set_output_mode(OutputMode::Isotropic { fixed_var })?;
    }
    let cfg = run.eval_config();
    let report = evaluate_model(&op, &ckpt.prior, &sched, &rows, &cfg, &mut rng::stream(run.seed, &[tag::EVALUATE]), mode)?;
    report::write_eval(&out.join("eval.csv"), split.name(), run.eval.isotropic, cfg.dequantize, &report)?;
    write_text(&out.join(CONFIG_FILE), &run.to_toml()?)?;
    Ok(report)
}

/// Dimensions selected by a mask spec on a `(height, width)` image:
/// `top-half` (rows `0..h/2`), `bottom-half`, `left-half` (columns `0..w/2`),
/// `right-half`, or `dims:i,j,...` (flat indices).
pub fn parse_mask(spec: &str, shape: (usize, usize)) -> Result<Vec<bool>> {
    let (h, w) = shape;
    let by = |f: &dyn Fn(usize, usize) -> bool| (0..h * w).map(|k| f(k / w, k % w)).collect::<Vec<bool>>();
    let mask = match spec {
        "top-half" => by(&|r, _| r < h / 2),
        "bottom-half" => by(&|r, _| r >= h / 2),
        "left-half" => by(&|_, c| c < w / 2),
        "right-half" => by(&|_, c| c >= w / 2),
        _ => {
            let list = spec.strip_prefix("dims:").ok_or_else(|| CliError::Config(format!("unknown mask {:?}", spec)))?;
            let mut m = vec![false; h * w];
            for item in list.split(',') {
                let j: usize = item.trim().parse().map_err(|_| CliError::Config(format!("mask index {:?} is not a number", item)))?;
                *m.get_mut(j).ok_or_else(|| CliError::Config(format!("mask index {} outside 0..{}", j, h * w)))? = true;
            }
            m
        }
    };
    if !mask.iter().any(|&b| b) {
        return Err(CliError::Config(format!("mask {:?} selects no dimension of a {}x{} input", spec, h, w)));
    }
    Ok(mask)
}

#[derive(Clone, Debug)]
pub struct Inpainting {
    pub observed: Vec<f64>,
    pub mask: Vec<bool>,
    pub trace: ChainTrace,
}

/// Clamps the masked part of one example and completes the rest with
/// `restarts` independent chains. Writes `inpaint.pgm` (original, the
/// clamped initial noise, then one completion per restart, each shown as the
/// final transition mean with the observation pasted back) and
/// `completions.csv` (every state of every restart).
pub fn inpaint(ckpt: &Checkpoint, run: &RunConfig, out: &Path) -> Result<Inpainting> {
    run.validate()?;
    create_dir(out)?;
    let op = ckpt.operator()?;
    let mode = mode_for(&op);
    let ds = load_dataset(&ckpt.run)?;
    let rows = ds.subset(Split::parse(&run.inpaint.split)?);
    let p = &run.inpaint;
    if p.index >= rows.rows() {
        return Err(CliError::Config(format!("inpaint index {} outside the {} rows of {}", p.index, rows.rows(), p.split)));
    }
    let observed = rows.row(p.index).to_vec();
    let shape = ds.display_shape();
    let mask = parse_mask(&p.mask, shape)?;
    let steps = steps_or_trained(p.steps, &op);
    let trace = run_clamped_chain(&mut rng::stream(run.seed, &[tag::INPAINT]), &ckpt.prior, &op, &observed, &mask, p.restarts, steps, mode)?;
    report::write_chain(&out.join("completions.csv"), &trace)?;
    let (mean, _) = transition_moments(&op, &trace.states[trace.len() - 2], steps.min(op.steps()), mode)?;
    let mut pictures = vec![observed.clone(), trace.states[0].row(0).to_vec()];
    for i in 0..p.restarts {
        pictures.push(mean.row(i).iter().zip(&observed).zip(&mask).map(|((&m, &o), &k)| if k { o } else { m }).collect());
    }
    let n = pictures.len();
    image::write_grid(&out.join("inpaint.pgm"), &Tensor::from_rows(&pictures)?, 1, n, shape)?;
    write_text(&out.join(CONFIG_FILE), &run.to_toml()?)?;
    Ok(Inpainting { observed, mask, trace })
}

/// Trains one model per `(steps, alpha0, omega)` cell of `run.sweep` into
/// `cell_NNN/` and writes `summary.csv` with the best validation lower bound
/// of every cell.
pub fn sweep(run: &RunConfig, out: &Path) -> Result<Vec<SweepRow>> {
    run.validate()?;
    let cells = run.sweep.cells();
    if cells.is_empty() {
        return Err(CliError::Config("sweep grid is empty".to_string()));
    }
    create_dir(out)?;
    write_text(&out.join(CONFIG_FILE), &run.to_toml()?)?;
    let mut rows = Vec::with_capacity(cells.len());
    for (cell, (steps, alpha0, omega)) in cells.into_iter().enumerate() {
        let mut cfg = run.clone();
        cfg.train.steps = steps;
        cfg.train.alpha0 = alpha0;
        cfg.train.omega = omega;
        let name = format!("cell_{:03}", cell);
        let dir = out.join(&name);
        cfg.output.dir = run.output.dir.join(&name);
        let summary = train(&cfg, &dir)?;
        rows.push(SweepRow {
            cell,
            steps,
            alpha0,
            omega,
            best_epoch: summary.best_epoch,
            best_valid_lower_bound: summary.best_valid_lower_bound,
        });
    }
    report::write_sweep(&out.join("summary.csv"), &rows)?;
    Ok(rows)
}
