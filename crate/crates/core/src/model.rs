//! The generative model: factorial Gaussian prior, MLP transition operator
//! and the chains built from them.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchObservation, Normalization, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::rng::{standard_normal, uniform};
use crate::tensor::Tensor;

/// Whether batch normalization uses mini-batch or stored statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Independent per-dimension Gaussian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorialGaussian {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl FactorialGaussian {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::LengthMismatch(format!("{} means, {} variances", mean.len(), var.len())));
        }
        if var.iter().any(|&v| !(v > 0.0) || !v.is_finite()) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonPositiveVariance("FactorialGaussian::new"));
        }
        Ok(Self { mean, var })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.mean)
            .zip(&self.var)
            .map(|((&x, &m), &v)| math::normal_log_pdf(x, m, v))
            .sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.var)
            .map(|(&m, &v)| m + math::sqrt(v) * standard_normal(rng))
            .collect()
    }

    /// Mean and variance broadcast to `n` rows.
    pub fn broadcast(&self, n: usize) -> (Tensor, Tensor) {
        let d = self.dim();
        let mean = self.mean.iter().copied().cycle().take(n * d).collect();
        let var = self.var.iter().copied().cycle().take(n * d).collect();
        (
            Tensor::matrix(n, d, mean).expect("broadcast shape"),
            Tensor::matrix(n, d, var).expect("broadcast shape"),
        )
    }
}

/// Maximum-likelihood factorial Gaussian of `data: [n, d]`, variances
/// floored at `var_floor`.
pub fn fit_prior(data: &Tensor, var_floor: f64) -> Result<FactorialGaussian> {
    let (n, d) = (data.rows(), data.cols());
    if data.rank() != 2 || n < 2 {
        return Err(Error::InsufficientData(format!("prior fit needs at least 2 rows, got {}", n)));
    }
    if !data.is_finite() {
        return Err(Error::NonFinite("fit_prior"));
    }
    if !(var_floor > 0.0) {
        return Err(Error::InvalidConfig("variance floor must be positive".to_string()));
    }
    let mut mean = vec![0.0; d];
    for row in data.rows_iter() {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for row in data.rows_iter() {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s = (*s / n as f64).max(var_floor));
    FactorialGaussian::new(mean, var)
}

/// `n` i.i.d. draws from the prior, row-major noise order.
pub fn sample_prior<R: Rng + ?Sized>(rng: &mut R, prior: &FactorialGaussian, n: usize) -> Tensor {
    let d = prior.dim();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        data.extend(prior.sample(rng));
    }
    Tensor::matrix(n, d, data).expect("prior sample shape")
}

/// Variance head of the transition operator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutputMode {
    /// `var = beta · sigmoid(head) + eps_var`, per dimension.
    Diagonal,
    /// One fixed variance for every dimension.
    Isotropic { fixed_var: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OperatorConfig {
    /// Data dimension.
    pub dim: usize,
    pub hidden_sizes: Vec<usize>,
    /// Number of trained transitions `T`.
    pub steps: usize,
    pub share_params: bool,
    pub beta: f64,
    pub eps_var: f64,
    pub output_mode: OutputMode,
    pub batch_norm: bool,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        Self {
            dim: 784,
            hidden_sizes: vec![1200, 1200],
            steps: 15,
            share_params: true,
            beta: 0.1,
            eps_var: 1e-4,
            output_mode: OutputMode::Diagonal,
            batch_norm: false,
        }
    }
}

impl OperatorConfig {
    pub fn new(dim: usize, steps: usize) -> Self {
        Self { dim, steps, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.dim == 0 {
            return bad("dim must be at least 1");
        }
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return bad("hidden_sizes must be nonempty with positive widths");
        }
        if !(self.beta > 0.0) || !(self.eps_var > 0.0) {
            return bad("beta and eps_var must be positive");
        }
        if let OutputMode::Isotropic { fixed_var } = self.output_mode {
            if !(fixed_var > 0.0) || !fixed_var.is_finite() {
                return bad("isotropic fixed_var must be positive");
            }
        }
        Ok(())
    }
}

/// Tape handles for a transition's Gaussian output.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mean: Var,
    pub var: Var,
}

/// A (possibly step-dependent) Gaussian transition `p(t)(z(t) | z(t-1))`.
pub trait Transition {
    fn dim(&self) -> usize;

    /// Number of trained transitions `T`.
    fn steps(&self) -> usize;

    fn params(&self) -> Option<&ParamStore>;

    /// Records the transition at step `t ∈ 1..=T` for a batch `z_prev: [n, d]`.
    fn forward<'p>(&'p self, tape: &mut Tape<'p>, z_prev: Var, t: usize, mode: Mode) -> Result<GaussianVars>;

    fn new_tape(&self) -> Tape<'_> {
        match self.params() {
            Some(p) => Tape::with_params(p),
            None => Tape::new(),
        }
    }
}

/// Mean and variance matrices of `p(t)(· | z_prev)` for every row.
pub fn transition_moments<K: Transition + ?Sized>(op: &K, z_prev: &Tensor, t: usize, mode: Mode) -> Result<(Tensor, Tensor)> {
    let mut tape = op.new_tape();
    let z = tape.constant(z_prev.clone());
    let out = op.forward(&mut tape, z, t, mode)?;
    Ok((tape.value(out.mean).clone(), tape.value(out.var).clone()))
}

/// Per-row output distribution of one transition.
pub fn transition_forward<K: Transition + ?Sized>(
    op: &K,
    z_prev: &Tensor,
    t: usize,
    mode: Mode,
) -> Result<Vec<FactorialGaussian>> {
    let (mean, var) = transition_moments(op, z_prev, t, mode)?;
    (0..mean.rows())
        .map(|i| FactorialGaussian::new(mean.row(i).to_vec(), var.row(i).to_vec()))
        .collect()
}

/// Per-step normalization statistics. While accumulating, `var` holds the
/// running sum of squared deviations; after finalization it is the variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub count: u64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub finalized: bool,
}

impl NormStats {
    fn empty(width: usize) -> Self {
        Self { count: 0, mean: vec![0.0; width], var: vec![0.0; width], finalized: false }
    }

    /// Pools a batch into the running moments (parallel-variance merge).
    fn absorb(&mut self, obs: &BatchObservation) {
        let (na, nb) = (self.count as f64, obs.count as f64);
        let n = na + nb;
        for j in 0..self.mean.len() {
            let delta = obs.mean[j] - self.mean[j];
            self.mean[j] += delta * nb / n;
            self.var[j] += obs.var[j] * nb + delta * delta * na * nb / n;
        }
        self.count += obs.count as u64;
    }
}

#[derive(Clone, Debug)]
struct Layer {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct Network {
    hidden: Vec<Layer>,
    mean_head: Layer,
    var_head: Layer,
}

#[derive(Clone, Debug)]
struct NormLayer {
    gamma: ParamId,
    beta: ParamId,
    stats: NormStats,
}

/// The learned transition: an MLP trunk (`linear → [batch norm] → relu` per
/// hidden layer) and two sigmoid heads for the mean and the variance.
#[derive(Clone, Debug)]
pub struct TransitionOperator {
    config: OperatorConfig,
    params: ParamStore,
    nets: Vec<Network>,
    /// `[step - 1][hidden layer]`, empty when batch norm is off.
    norms: Vec<Vec<NormLayer>>,
}

fn init_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize, gain: f64) -> Tensor {
    let limit = gain * math::sqrt(6.0 / (fan_in + fan_out) as f64);
    let data = (0..fan_in * fan_out).map(|_| (2.0 * uniform(rng) - 1.0) * limit).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("init shape")
}

impl TransitionOperator {
    /// Glorot-uniform trunk, heads at a tenth of that scale, zero biases,
    /// unit/zero normalization affine.
    pub fn new<R: Rng + ?Sized>(config: OperatorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let copies = if config.share_params { 1 } else { config.steps };
        let mut nets = Vec::with_capacity(copies);
        for c in 0..copies {
            let mut hidden = Vec::new();
            let mut fan_in = config.dim;
            for (l, &width) in config.hidden_sizes.iter().enumerate() {
                let weight = params.add(format!("net{}.hidden{}.weight", c, l), init_uniform(rng, fan_in, width, 1.0));
                let bias = params.add(format!("net{}.hidden{}.bias", c, l), Tensor::zeros(&[width]));
                hidden.push(Layer { weight, bias });
                fan_in = width;
            }
            let mut head = |name: &str, params: &mut ParamStore| Layer {
                weight: params.add(format!("net{}.{}.weight", c, name), init_uniform(rng, fan_in, config.dim, 0.1)),
                bias: params.add(format!("net{}.{}.bias", c, name), Tensor::zeros(&[config.dim])),
            };
            let mean_head = head("mean_head", &mut params);
            let var_head = head("var_head", &mut params);
            nets.push(Network { hidden, mean_head, var_head });
        }
        let mut norms = Vec::new();
        if config.batch_norm {
            for t in 1..=config.steps {
                let layers = config
                    .hidden_sizes
                    .iter()
                    .enumerate()
                    .map(|(l, &w)| NormLayer {
                        gamma: params.add(format!("step{}.norm{}.gamma", t, l), Tensor::filled(&[w], 1.0)),
                        beta: params.add(format!("step{}.norm{}.beta", t, l), Tensor::zeros(&[w])),
                        stats: NormStats::empty(w),
                    })
                    .collect();
                norms.push(layers);
            }
        }
        Ok(Self { config, params, nets, norms })
    }

    pub fn config(&self) -> &OperatorConfig {
        &self.config
    }

    pub fn param_store(&self) -> &ParamStore {
        &self.params
    }

    pub fn param_store_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Switches the variance head, e.g. to an isotropic output for evaluation.
    pub fn set_output_mode(&mut self, mode: OutputMode) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.output_mode = mode;
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    /// Snapshot of the per-step normalization statistics, `[step - 1][layer]`.
    pub fn norm_stats(&self) -> Vec<Vec<NormStats>> {
        self.norms.iter().map(|s| s.iter().map(|l| l.stats.clone()).collect()).collect()
    }

    pub fn set_norm_stats(&mut self, stats: Vec<Vec<NormStats>>) -> Result<()> {
        if stats.len() != self.norms.len()
            || stats.iter().zip(&self.norms).any(|(s, n)| {
                s.len() != n.len() || s.iter().zip(n).any(|(a, b)| a.mean.len() != b.stats.mean.len())
            })
        {
            return Err(Error::LengthMismatch("normalization statistics do not fit the operator".to_string()));
        }
        for (layers, s) in self.norms.iter_mut().zip(stats) {
            for (layer, st) in layers.iter_mut().zip(s) {
                layer.stats = st;
            }
        }
        Ok(())
    }

    pub fn norm_stats_finalized(&self) -> bool {
        self.norms.iter().flatten().all(|l| l.stats.finalized)
    }

    /// Clears accumulated statistics ahead of a full pass over training data.
    pub fn reset_norm_stats(&mut self) {
        for layer in self.norms.iter_mut().flatten() {
            layer.stats = NormStats::empty(layer.stats.mean.len());
        }
    }

    /// Pools train-mode batch observations collected from a tape.
    pub fn absorb_observations(&mut self, observations: &[BatchObservation]) {
        for obs in observations {
            if let Some(layer) = self.norms.get_mut(obs.step - 1).and_then(|s| s.get_mut(obs.layer)) {
                layer.stats.absorb(obs);
            }
        }
    }

    /// Turns pooled moments into the statistics used in [`Mode::Eval`].
    pub fn finalize_norm_stats(&mut self) -> Result<()> {
        for (t, layers) in self.norms.iter().enumerate() {
            if layers.iter().any(|l| l.stats.count == 0) {
                return Err(Error::InsufficientData(format!("no statistics observed for step {}", t + 1)));
            }
        }
        for layers in self.norms.iter_mut() {
            for layer in layers {
                let n = layer.stats.count as f64;
                layer.stats.var.iter_mut().for_each(|v| *v /= n);
                layer.stats.finalized = true;
            }
        }
        Ok(())
    }
}

impl Transition for TransitionOperator {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn steps(&self) -> usize {
        self.config.steps
    }

    fn params(&self) -> Option<&ParamStore> {
        Some(&self.params)
    }

    fn forward<'p>(&'p self, tape: &mut Tape<'p>, z_prev: Var, t: usize, mode: Mode) -> Result<GaussianVars> {
        let steps = self.config.steps;
        if t == 0 || t > steps {
            return Err(Error::StepOutOfRange { t, steps });
        }
        let net = &self.nets[if self.config.share_params { 0 } else { t - 1 }];
        let mut h = z_prev;
        for (l, layer) in net.hidden.iter().enumerate() {
            let (w, b) = (tape.param(layer.weight), tape.param(layer.bias));
            let mut a = tape.linear(h, w, b)?;
            if self.config.batch_norm {
                let norm = &self.norms[t - 1][l];
                let (g, bt) = (tape.param(norm.gamma), tape.param(norm.beta));
                let how = match mode {
                    Mode::Train => Normalization::Batch { record: Some((t, l)) },
                    Mode::Eval if norm.stats.finalized => {
                        Normalization::Fixed { mean: &norm.stats.mean, var: &norm.stats.var }
                    }
                    Mode::Eval => return Err(Error::StatsNotFinalized(t)),
                };
                a = tape.batch_norm(a, g, bt, how)?;
            }
            h = tape.relu(a)?;
        }
        let (w, b) = (tape.param(net.mean_head.weight), tape.param(net.mean_head.bias));
        let mean_pre = tape.linear(h, w, b)?;
        let mean = tape.sigmoid(mean_pre)?;
        let var = match self.config.output_mode {
            OutputMode::Diagonal => {
                let (w, b) = (tape.param(net.var_head.weight), tape.param(net.var_head.bias));
                let pre = tape.linear(h, w, b)?;
                let s = tape.sigmoid(pre)?;
                tape.affine(s, self.config.beta, self.config.eps_var)?
            }
            OutputMode::Isotropic { fixed_var } => {
                let shape = tape.value(mean).shape().to_vec();
                tape.constant(Tensor::filled(&shape, fixed_var))
            }
        };
        Ok(GaussianVars { mean, var })
    }
}

/// States of a batch of chains and the log-densities of each state.
///
/// `states[s]` is an `[n, d]` matrix; `model_logp[s][i]` is the log-density
/// (nats) of row `i` of `states[s]` under the prior (`s = 0`) or the model
/// transition that produced it. Proposal chains also carry `proposal_logq`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainTrace {
    pub states: Vec<Tensor>,
    pub model_logp: Vec<Vec<f64>>,
    pub proposal_logq: Option<Vec<Vec<f64>>>,
}

impl ChainTrace {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Number of chains in the batch.
    pub fn chains(&self) -> usize {
        self.states.first().map(|s| s.rows()).unwrap_or(0)
    }

    pub fn last_state(&self) -> &Tensor {
        self.states.last().expect("trace has at least one state")
    }
}

/// Draws `z = mean + sqrt(var) · ε` row-major and returns `(z, log p(z))`.
fn sample_gaussian_rows<R: Rng + ?Sized>(rng: &mut R, mean: &Tensor, var: &Tensor) -> (Tensor, Vec<f64>) {
    let (n, d) = (mean.rows(), mean.cols());
    let mut z = Vec::with_capacity(n * d);
    let mut logp = Vec::with_capacity(n);
    for i in 0..n {
        let (mr, vr) = (mean.row(i), var.row(i));
        let mut lp = 0.0;
        for j in 0..d {
            let v = mr[j] + math::sqrt(vr[j]) * standard_normal(rng);
            lp += math::normal_log_pdf(v, mr[j], vr[j]);
            z.push(v);
        }
        logp.push(lp);
    }
    (Tensor::matrix(n, d, z).expect("sample shape"), logp)
}

fn row_log_density(z: &Tensor, mean: &Tensor, var: &Tensor) -> Vec<f64> {
    (0..z.rows())
        .map(|i| {
            let (zr, mr, vr) = (z.row(i), mean.row(i), var.row(i));
            (0..zr.len()).map(|j| math::normal_log_pdf(zr[j], mr[j], vr[j])).sum()
        })
        .collect()
}

/// Runs `n` model sampling chains for `steps` transitions.
///
/// Steps past the trained `T` reuse step `T`'s transition (and its
/// normalization state).
pub fn run_model_chain<K: Transition + ?Sized, R: Rng + ?Sized>(
    rng: &mut R,
    prior: &FactorialGaussian,
    op: &K,
    n: usize,
    steps: usize,
    mode: Mode,
) -> Result<ChainTrace> {
    check_prior(prior, op)?;
    if steps == 0 {
        return Err(Error::InvalidConfig("sampling needs at least one step".to_string()));
    }
    let z0 = sample_prior(rng, prior, n);
    let lp0 = z0.rows_iter().map(|r| prior.log_density(r)).collect();
    let mut states = vec![z0];
    let mut model_logp = vec![lp0];
    for t in 1..=steps {
        let (mean, var) = transition_moments(op, states.last().unwrap(), t.min(op.steps()), mode)?;
        let (z, lp) = sample_gaussian_rows(rng, &mean, &var);
        states.push(z);
        model_logp.push(lp);
    }
    Ok(ChainTrace { states, model_logp, proposal_logq: None })
}

/// `log p(z̃, x)` for each chain: the prior term, every model transition
/// between consecutive states, and the final transition into `x`.
///
/// The trace must hold exactly `T` states `z̃(0..T-1)`.
pub fn chain_log_joint<K: Transition + ?Sized>(
    trace: &ChainTrace,
    prior: &FactorialGaussian,
    op: &K,
    x: &Tensor,
    mode: Mode,
) -> Result<Vec<f64>> {
    let steps = op.steps();
    if trace.len() != steps {
        return Err(Error::LengthMismatch(format!("trace has {} states, expected T = {}", trace.len(), steps)));
    }
    if x.rows() != trace.chains() || x.cols() != op.dim() {
        return Err(Error::LengthMismatch(format!("targets {:?} for {} chains", x.shape(), trace.chains())));
    }
    let mut total: Vec<f64> = trace.states[0].rows_iter().map(|r| prior.log_density(r)).collect();
    for t in 1..=steps {
        let (mean, var) = transition_moments(op, &trace.states[t - 1], t, mode)?;
        let target = if t < steps { &trace.states[t] } else { x };
        for (acc, lp) in total.iter_mut().zip(row_log_density(target, &mean, &var)) {
            *acc += lp;
        }
    }
    Ok(total)
}

/// Model chains whose `mask`ed dimensions are pinned to `observed` after
/// every sampling step, including the initial draw. Each of the `n` rows is
/// an independent restart.
pub fn run_clamped_chain<K: Transition + ?Sized, R: Rng + ?Sized>(
    rng: &mut R,
    prior: &FactorialGaussian,
    op: &K,
    observed: &[f64],
    mask: &[bool],
    n: usize,
    steps: usize,
    mode: Mode,
) -> Result<ChainTrace> {
    check_prior(prior, op)?;
    let d = op.dim();
    if observed.len() != d || mask.len() != d {
        return Err(Error::LengthMismatch(format!(
            "observation of {} and mask of {} for dimension {}",
            observed.len(),
            mask.len(),
            d
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::InvalidConfig("clamping mask selects no dimension".to_string()));
    }
    if steps == 0 {
        return Err(Error::InvalidConfig("sampling needs at least one step".to_string()));
    }
    let clamp = |z: &mut Tensor| {
        for i in 0..z.rows() {
            for (j, v) in z.row_mut(i).iter_mut().enumerate() {
                if mask[j] {
                    *v = observed[j];
                }
            }
        }
    };
    let mut z0 = sample_prior(rng, prior, n);
    clamp(&mut z0);
    let lp0 = z0.rows_iter().map(|r| prior.log_density(r)).collect();
    let mut states = vec![z0];
    let mut model_logp = vec![lp0];
    for t in 1..=steps {
        let (mean, var) = transition_moments(op, states.last().unwrap(), t.min(op.steps()), mode)?;
        let (mut z, _) = sample_gaussian_rows(rng, &mean, &var);
        clamp(&mut z);
        model_logp.push(row_log_density(&z, &mean, &var));
        states.push(z);
    }
    Ok(ChainTrace { states, model_logp, proposal_logq: None })
}

pub(crate) fn check_prior<K: Transition + ?Sized>(prior: &FactorialGaussian, op: &K) -> Result<()> {
    if prior.dim() != op.dim() {
        return Err(Error::LengthMismatch(format!("prior dimension {} vs operator {}", prior.dim(), op.dim())));
    }
    Ok(())
}
