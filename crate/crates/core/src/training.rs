//! Infusion training: the denoising objective, the lower-bound objective and
//! the epoch loop with validation-based model selection.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::evaluation::{elbo_batch, lower_bound_estimate};
use crate::infusion::{check_targets, lower_bound_terms, ChainNoise, InfusionSchedule};
use crate::model::{FactorialGaussian, Mode, OutputMode, Transition, TransitionOperator};
use crate::optim::{clip_grad_norm, Optimizer, OptimizerKind};
use crate::rng::{self, tag};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Maximize `log p(t)(x | z̃(t-1))` at every step; the target is always `x`.
    Denoising,
    /// Maximize the stochastic lower bound through a reparameterized chain.
    LowerBound,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub schedule: InfusionSchedule,
    pub eta0: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub epochs: usize,
    pub objective: Objective,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Proposal chains per validation point.
    pub valid_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 15,
            schedule: InfusionSchedule::default(),
            eta0: 1e-3,
            optimizer: OptimizerKind::default(),
            batch_size: 64,
            epochs: 100,
            objective: Objective::Denoising,
            seed: 0,
            grad_clip: Some(100.0),
            valid_k: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if !(self.eta0 > 0.0) || !self.eta0.is_finite() {
            return bad("eta0 must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.valid_k == 0 {
            return bad("valid_k must be at least 1");
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        self.schedule.validate()
    }

    /// Per-step learning rate `η(t) = η0 · t / T`.
    pub fn eta_at(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.steps {
            return Err(Error::StepOutOfRange { t, steps: self.steps });
        }
        Ok(self.eta0 * t as f64 / self.steps as f64)
    }

    /// Loss weight of step `t`, `η(t) / η0`.
    pub fn step_weight(&self, t: usize) -> f64 {
        t as f64 / self.steps as f64
    }
}

/// Diagnostics of one optimizer update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Batch-mean objective (weighted log-likelihood or lower bound), nats.
    pub objective: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// Records the weighted denoising objective for a batch, sampling the
/// infusion chain along the way. Chain states enter the graph as constants.
/// Returns the `[n]` per-example objective node.
pub fn denoising_terms<'p>(
    tape: &mut Tape<'p>,
    op: &'p TransitionOperator,
    prior: &FactorialGaussian,
    cfg: &TrainConfig,
    xs: &Tensor,
    noise: &ChainNoise,
    mode: Mode,
) -> Result<Var> {
    let steps = op.steps();
    let (n, d) = (xs.rows(), xs.cols());
    let sd = cfg.schedule.sigma_delta;
    let x = tape.constant(xs.clone());
    let (pm, pv) = prior.broadcast(n);
    let mut z_prev = Some(Tensor::matrix(n, d, noise.steps[0].apply(pm.data(), pv.data(), xs.data(), sd))?);
    let mut acc: Option<Var> = None;
    for t in 1..=steps {
        let zv = tape.constant(z_prev.take().expect("state for every step"));
        let out = op.forward(tape, zv, t, mode)?;
        let lp = tape.gaussian_log_density(x, out.mean, out.var)?;
        let term = tape.scale(lp, cfg.step_weight(t))?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
        if t < steps {
            let (m, v) = (tape.value(out.mean).data(), tape.value(out.var).data());
            z_prev = Some(Tensor::matrix(n, d, noise.steps[t].apply(m, v, xs.data(), sd))?);
        }
    }
    Ok(acc.expect("at least one step"))
}

/// Owns the optimizer state across updates.
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    optimizer: Optimizer,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Self {
        let optimizer = Optimizer::new(cfg.optimizer);
        Self { cfg, optimizer }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn check(&self, op: &TransitionOperator, batch: &Tensor) -> Result<()> {
        if op.steps() != self.cfg.steps {
            return Err(Error::InvalidConfig(format!(
                "operator has T = {} but training uses {}",
                op.steps(),
                self.cfg.steps
            )));
        }
        check_targets(batch, op.dim())
    }

    /// One denoising-objective update on `batch`.
    pub fn denoising_step<R: Rng + ?Sized>(
        &mut self,
        op: &mut TransitionOperator,
        prior: &FactorialGaussian,
        batch: &Tensor,
        rng: &mut R,
    ) -> Result<StepStats> {
        self.check(op, batch)?;
        let noise = ChainNoise::draw(rng, &self.cfg.schedule, batch.rows(), batch.cols(), op.steps());
        let (objective, grads) = {
            let mut tape = op.new_tape();
            let terms = denoising_terms(&mut tape, op, prior, &self.cfg, batch, &noise, Mode::Train)?;
            finish_loss(&mut tape, terms)?
        };
        self.apply(op, grads, objective)
    }

    /// One lower-bound-objective update on `batch`.
    pub fn lower_bound_step<R: Rng + ?Sized>(
        &mut self,
        op: &mut TransitionOperator,
        prior: &FactorialGaussian,
        batch: &Tensor,
        rng: &mut R,
    ) -> Result<StepStats> {
        self.check(op, batch)?;
        let noise = ChainNoise::draw(rng, &self.cfg.schedule, batch.rows(), batch.cols(), op.steps());
        let (objective, grads) = {
            let mut tape = op.new_tape();
            let terms = lower_bound_terms(&mut tape, op, prior, &self.cfg.schedule, batch, &noise, Mode::Train)?;
            finish_loss(&mut tape, terms)?
        };
        self.apply(op, grads, objective)
    }

    pub fn step<R: Rng + ?Sized>(
        &mut self,
        op: &mut TransitionOperator,
        prior: &FactorialGaussian,
        batch: &Tensor,
        rng: &mut R,
    ) -> Result<StepStats> {
        match self.cfg.objective {
            Objective::Denoising => self.denoising_step(op, prior, batch, rng),
            Objective::LowerBound => self.lower_bound_step(op, prior, batch, rng),
        }
    }

    fn apply(&mut self, op: &mut TransitionOperator, grads: crate::autodiff::Gradients, objective: f64) -> Result<StepStats> {
        let store = op.param_store_mut();
        store.zero_grad();
        grads.accumulate_into(store);
        let grad_norm = match self.cfg.grad_clip {
            Some(c) => clip_grad_norm(store, c),
            None => store.grad_norm(),
        };
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        self.optimizer.step(store, self.cfg.eta0);
        Ok(StepStats { objective, grad_norm })
    }
}

/// Mean objective over the batch and gradients of its negation.
fn finish_loss(tape: &mut Tape<'_>, terms: Var) -> Result<(f64, crate::autodiff::Gradients)> {
    let n = tape.value(terms).len() as f64;
    let total = tape.sum(terms)?;
    let loss = tape.scale(total, -1.0 / n)?;
    let objective = -tape.value(loss).scalar_value()?;
    if !objective.is_finite() {
        return Err(Error::NonFinite("training objective"));
    }
    Ok((objective, tape.backward(loss)?))
}

/// One row of the training history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch index.
    pub epoch: usize,
    pub train_objective: f64,
    pub valid_lower_bound: f64,
}

/// Hook invoked after every epoch (visualizations, timing, logging).
pub trait TrainObserver {
    fn on_epoch(&mut self, record: &EpochRecord, op: &TransitionOperator) -> Result<()>;
}

/// Observer that does nothing.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoObserver;

impl TrainObserver for NoObserver {
    fn on_epoch(&mut self, _: &EpochRecord, _: &TransitionOperator) -> Result<()> {
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Operator with the best validation lower bound (the initial operator
    /// when no epoch ran).
    pub best: TransitionOperator,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
}

/// Mode used for lower-bound evaluation during training: mini-batch
/// statistics when batch norm is on.
fn training_eval_mode(op: &TransitionOperator) -> Mode {
    if op.config().batch_norm {
        Mode::Train
    } else {
        Mode::Eval
    }
}

/// Average lower bound over `data`, `k` chains per point, in batches.
pub fn mean_lower_bound<K: Transition + ?Sized, R: Rng + ?Sized>(
    op: &K,
    prior: &FactorialGaussian,
    sched: &InfusionSchedule,
    data: &Tensor,
    k: usize,
    batch_size: usize,
    rng: &mut R,
    mode: Mode,
) -> Result<f64> {
    if data.rows() == 0 {
        return Err(Error::Empty("mean_lower_bound"));
    }
    let mut total = 0.0;
    for idx in batches(data.rows(), batch_size) {
        let batch = data.gather_rows(&idx);
        for row in elbo_batch(op, prior, sched, &batch, k, rng, mode)? {
            total += lower_bound_estimate(&row)?;
        }
    }
    Ok(total / data.rows() as f64)
}

/// Contiguous index batches; a trailing single row is merged into the
/// previous batch so batch statistics always see at least two rows.
pub(crate) fn batches(n: usize, size: usize) -> Vec<Vec<usize>> {
    let size = size.max(2);
    let mut out: Vec<Vec<usize>> = (0..n).collect::<Vec<_>>().chunks(size).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().map(|b| b.len()) == Some(1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

/// Epoch loop over shuffled `train`, selecting on the validation lower bound.
///
/// Every epoch shuffles with its own stream, every batch samples chains from
/// its own stream, and every validation pass reuses one fixed stream: epochs are
/// compared on common random numbers. When batch norm is enabled the returned
/// operator's per-step statistics are finalized over the full training set.
pub fn train(
    mut op: TransitionOperator,
    prior: &FactorialGaussian,
    train: &Tensor,
    valid: &Tensor,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.rows() == 0 || valid.rows() == 0 {
        return Err(Error::Empty("train"));
    }
    check_targets(train, op.dim())?;
    check_targets(valid, op.dim())?;
    if op.config().batch_norm && (train.rows() < 2 || valid.rows() < 2) {
        return Err(Error::InsufficientData("batch norm needs at least two rows per split".to_string()));
    }
    let mut trainer = Trainer::new(cfg.clone());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, TransitionOperator)> = None;
    let mut order: Vec<usize> = (0..train.rows()).collect();

    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(cfg.seed, &[tag::SHUFFLE, epoch as u64]));
        let mut sum = 0.0;
        let mut seen = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if op.config().batch_norm && chunk.len() < 2 {
                continue;
            }
            let batch = train.gather_rows(chunk);
            let mut r = rng::stream(cfg.seed, &[tag::TRAIN_BATCH, epoch as u64, b as u64]);
            let stats = trainer.step(&mut op, prior, &batch, &mut r)?;
            sum += stats.objective * chunk.len() as f64;
            seen += chunk.len();
        }
        let mut vr = rng::stream(cfg.seed, &[tag::VALIDATE]);
        let valid_lb = mean_lower_bound(
            &op,
            prior,
            &cfg.schedule,
            valid,
            cfg.valid_k,
            cfg.batch_size.max(2),
            &mut vr,
            training_eval_mode(&op),
        )?;
        let record = EpochRecord { epoch, train_objective: sum / seen.max(1) as f64, valid_lower_bound: valid_lb };
        history.push(record);
        observer.on_epoch(&record, &op)?;
        if best.as_ref().map_or(true, |(lb, _, _)| valid_lb > *lb) {
            best = Some((valid_lb, epoch, op.clone()));
        }
    }

    let (best_epoch, mut best_op) = match best {
        Some((_, e, o)) => (Some(e), o),
        None => (None, op),
    };
    if best_op.config().batch_norm {
        let mut r = rng::stream(cfg.seed, &[tag::NORM_STATS]);
        collect_norm_statistics(&mut best_op, prior, &cfg.schedule, train, cfg.batch_size, &mut r)?;
    }
    Ok(TrainOutcome { best: best_op, best_epoch, history })
}

/// Recomputes each step's normalization statistics over all of `data` by
/// running infusion chains in train mode, then finalizes them.
pub fn collect_norm_statistics<R: Rng + ?Sized>(
    op: &mut TransitionOperator,
    prior: &FactorialGaussian,
    sched: &InfusionSchedule,
    data: &Tensor,
    batch_size: usize,
    rng: &mut R,
) -> Result<()> {
    if !op.config().batch_norm {
        return Ok(());
    }
    op.reset_norm_stats();
    let cfg = TrainConfig { steps: op.steps(), schedule: *sched, ..TrainConfig::default() };
    for idx in batches(data.rows(), batch_size) {
        let batch = data.gather_rows(&idx);
        let noise = ChainNoise::draw(rng, sched, batch.rows(), batch.cols(), op.steps());
        let observations = {
            let mut tape = op.new_tape();
            denoising_terms(&mut tape, op, prior, &cfg, &batch, &noise, Mode::Train)?;
            tape.observations().to_vec()
        };
        op.absorb_observations(&observations);
    }
    op.finalize_norm_stats()
}

/// Maximum-likelihood shared variance for an isotropic output head: the mean
/// squared residual between the operator means and the chain targets (the
/// next infusion state, and `x` at the final step) over infusion chains on
/// `data`.
pub fn fit_isotropic_variance<R: Rng + ?Sized>(
    op: &TransitionOperator,
    prior: &FactorialGaussian,
    sched: &InfusionSchedule,
    data: &Tensor,
    batch_size: usize,
    rng: &mut R,
    mode: Mode,
) -> Result<f64> {
    check_targets(data, op.dim())?;
    let mut diag = op.clone();
    diag.set_output_mode(OutputMode::Diagonal)?;
    let steps = op.steps();
    let (mut sum, mut count) = (0.0, 0usize);
    for idx in batches(data.rows(), batch_size) {
        let xs = data.gather_rows(&idx);
        let trace = crate::infusion::run_infusion_chain(rng, prior, &diag, sched, &xs, steps, mode)?;
        for t in 1..=steps {
            let (mean, _) = crate::model::transition_moments(&diag, &trace.states[t - 1], t, mode)?;
            let target = if t < steps { &trace.states[t] } else { &xs };
            for (m, z) in mean.data().iter().zip(target.data()) {
                sum += (z - m) * (z - m);
                count += 1;
            }
        }
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::OperatorConfig;

    #[test]
    fn eta_schedule() {
        let cfg = TrainConfig { eta0: 1e-3, steps: 15, ..TrainConfig::default() };
        assert!((cfg.eta_at(3).unwrap() - 2e-4).abs() < 1e-18);
        assert_eq!(cfg.eta_at(15).unwrap(), 1e-3);
        assert!(cfg.eta_at(0).is_err());
        assert!(cfg.eta_at(16).is_err());
    }

    #[test]
    fn batches_never_leave_a_single_row() {
        assert_eq!(batches(5, 2), alloc::vec![alloc::vec![0, 1], alloc::vec![2, 3, 4]]);
        assert_eq!(batches(1, 4), alloc::vec![alloc::vec![0]]);
        assert_eq!(batches(4, 4).len(), 1);
    }

    #[test]
    fn zero_epochs_returns_initial_operator() {
        let cfg = OperatorConfig { dim: 2, hidden_sizes: alloc::vec![4], steps: 2, ..OperatorConfig::default() };
        let op = TransitionOperator::new(cfg, &mut rng::stream(1, &[])).unwrap();
        let prior = FactorialGaussian::new(alloc::vec![0.5; 2], alloc::vec![0.1; 2]).unwrap();
        let data = Tensor::matrix(4, 2, alloc::vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]).unwrap();
        let tc = TrainConfig { steps: 2, epochs: 0, ..TrainConfig::default() };
        let out = train(op.clone(), &prior, &data, &data, &tc, &mut NoObserver).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.best_epoch, None);
        assert_eq!(out.best.param_store(), op.param_store());
        let empty = Tensor::matrix(0, 2, alloc::vec![]).unwrap();
        assert!(train(op, &prior, &empty, &data, &tc, &mut NoObserver).is_err());
    }
}
