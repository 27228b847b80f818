//! Log-likelihood estimators.
//!
//! Both proposal-based estimators start from `k` infusion chains per test
//! point and the per-chain log-weights `ℓ_j = log p(z̃_j, x) - log q(z̃_j | x)`:
//! the lower bound is their mean, the importance-sampling estimate is
//! `logsumexp(ℓ) - log k`. The Parzen estimator instead fits an isotropic
//! Gaussian kernel density to generated samples.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infusion::{check_targets, lower_bound_terms, ChainNoise, InfusionSchedule};
use crate::math;
use crate::model::{run_model_chain, FactorialGaussian, Mode, Transition};
use crate::rng::uniform;
use crate::tensor::Tensor;
use crate::training::batches;

/// Width of the uniform dequantization noise added to scaled test points.
pub const DEQUANTIZATION_WIDTH: f64 = 1.0 / 256.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Proposal chains per test point.
    pub k: usize,
    pub parzen: bool,
    pub parzen_sigma: f64,
    pub parzen_samples: usize,
    pub dequantize: bool,
    pub repetitions: usize,
    /// Points evaluated together (and generated samples per chain batch).
    pub batch_size: usize,
    /// Model-chain length for Parzen samples; `None` uses the trained `T`.
    pub sample_steps: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 20,
            parzen: false,
            parzen_sigma: 0.17,
            parzen_samples: 10_000,
            dequantize: false,
            repetitions: 1,
            batch_size: 100,
            sample_steps: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        use alloc::string::ToString;
        if self.k == 0 || self.repetitions == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("k, repetitions and batch_size must be at least 1".to_string()));
        }
        if !(self.parzen_sigma > 0.0) {
            return Err(Error::InvalidConfig("parzen_sigma must be positive".to_string()));
        }
        if self.parzen && self.parzen_samples == 0 {
            return Err(Error::InvalidConfig("parzen_samples must be at least 1".to_string()));
        }
        Ok(())
    }
}

/// `ℓ` for `k` independent proposal chains towards a single point `x`.
pub fn elbo_samples<K: Transition + ?Sized, R: Rng + ?Sized>(
    op: &K,
    prior: &FactorialGaussian,
    sched: &InfusionSchedule,
    x: &[f64],
    k: usize,
    rng: &mut R,
    mode: Mode,
) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::Empty("elbo_samples"));
    }
    let xs = Tensor::matrix(k, x.len(), x.iter().copied().cycle().take(k * x.len()).collect())?;
    let noise = ChainNoise::draw(rng, sched, k, x.len(), op.steps());
    let mut tape = op.new_tape();
    let l = lower_bound_terms(&mut tape, op, prior, sched, &xs, &noise, mode)?;
    Ok(tape.value(l).data().to_vec())
}

/// `ℓ` for every row of `xs`, `k` rounds of one chain per row. Result is
/// indexed `[row][round]`.
pub fn elbo_batch<K: Transition + ?Sized, R: Rng + ?Sized>(
    op: &K,
    prior: &FactorialGaussian,
    sched: &InfusionSchedule,
    xs: &Tensor,
    k: usize,
    rng: &mut R,
    mode: Mode,
) -> Result<Vec<Vec<f64>>> {
    if k == 0 {
        return Err(Error::Empty("elbo_batch"));
    }
    check_targets(xs, op.dim())?;
    let mut out = vec![Vec::with_capacity(k); xs.rows()];
    for _ in 0..k {
        let noise = ChainNoise::draw(rng, sched, xs.rows(), xs.cols(), op.steps());
        let mut tape = op.new_tape();
        let l = lower_bound_terms(&mut tape, op, prior, sched, xs, &noise, mode)?;
        for (row, &v) in out.iter_mut().zip(tape.value(l).data()) {
            row.push(v);
        }
    }
    Ok(out)
}

/// Mean of the log-weights.
pub fn lower_bound_estimate(ell: &[f64]) -> Result<f64> {
    if ell.is_empty() {
        return Err(Error::Empty("lower_bound_estimate"));
    }
    let max = max_of(ell);
    Ok(max + ell.iter().map(|&l| l - max).sum::<f64>() / ell.len() as f64)
}

fn max_of(ell: &[f64]) -> f64 {
    ell.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// `logsumexp(ℓ) - log k`.
pub fn is_estimate(ell: &[f64]) -> Result<f64> {
    if ell.is_empty() {
        return Err(Error::Empty("is_estimate"));
    }
    // Shifted by the maximum and written with expm1/log1p, so equal entries
    // return that entry exactly and nearly equal ones keep their spread.
    let max = max_of(ell);
    let mean = ell.iter().map(|&l| math::exp_m1(l - max)).sum::<f64>() / ell.len() as f64;
    Ok(max + math::ln_1p(mean))
}

/// `log[(1/N) Σ_j N(x; s_j, σ² I)]` over generated `samples: [N, d]`.
pub fn parzen_log_density(samples: &Tensor, x: &[f64], sigma: f64) -> Result<f64> {
    if samples.rows() == 0 || samples.is_empty() {
        return Err(Error::Empty("parzen_log_density"));
    }
    if samples.cols() != x.len() {
        return Err(Error::LengthMismatch(alloc::format!("samples of width {} vs point of {}", samples.cols(), x.len())));
    }
    if !(sigma > 0.0) {
        return Err(Error::NonPositiveVariance("parzen_log_density"));
    }
    let d = x.len() as f64;
    let var = sigma * sigma;
    let norm = -0.5 * d * math::ln(2.0 * core::f64::consts::PI * var);
    let mut kernels: Vec<f64> = samples
        .rows_iter()
        .map(|s| -s.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (2.0 * var))
        .collect();
    // Summation order independent of sample order.
    kernels.sort_unstable_by(f64::total_cmp);
    Ok(norm + math::logsumexp(&kernels) - math::ln(samples.rows() as f64))
}

/// Adds `U(0, 1/256)` noise to every value.
pub fn dequantize<R: Rng + ?Sized>(rng: &mut R, data: &Tensor) -> Tensor {
    let mut out = data.clone();
    out.data_mut().iter_mut().for_each(|v| *v += uniform(rng) * DEQUANTIZATION_WIDTH);
    out
}

/// Mean and spread over evaluation repetitions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    /// Sample standard deviation over repetitions; 0 for a single repetition.
    pub std: f64,
}

impl Estimate {
    pub fn from_repetitions(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            math::sqrt(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0))
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub lower_bound: Estimate,
    pub importance_sampling: Estimate,
    pub parzen: Option<Estimate>,
    pub k: usize,
    pub repetitions: usize,
    pub points: usize,
}

/// Average per-point estimates over `split`, repeated `cfg.repetitions` times
/// with fresh randomness from `rng`.
pub fn evaluate_model<K: Transition + ?Sized, R: Rng + ?Sized>(
    op: &K,
    prior: &FactorialGaussian,
    sched: &InfusionSchedule,
    split: &Tensor,
    cfg: &EvalConfig,
    rng: &mut R,
    mode: Mode,
) -> Result<EvalReport> {
    cfg.validate()?;
    check_targets(split, op.dim())?;
    let n = split.rows();
    let mut lbs = Vec::with_capacity(cfg.repetitions);
    let mut iss = Vec::with_capacity(cfg.repetitions);
    let mut parzens = Vec::with_capacity(cfg.repetitions);
    for _ in 0..cfg.repetitions {
        let data = if cfg.dequantize { dequantize(rng, split) } else { split.clone() };
        let (mut lb, mut is) = (0.0, 0.0);
        for idx in batches(n, cfg.batch_size) {
            let batch = data.gather_rows(&idx);
            for ell in elbo_batch(op, prior, sched, &batch, cfg.k, rng, mode)? {
                lb += lower_bound_estimate(&ell)?;
                is += is_estimate(&ell)?;
            }
        }
        lbs.push(lb / n as f64);
        iss.push(is / n as f64);
        if cfg.parzen {
            let samples = generate_samples(op, prior, cfg.parzen_samples, cfg.sample_steps.unwrap_or(op.steps()), cfg.batch_size, rng, mode)?;
            let total: f64 = split
                .rows_iter()
                .map(|x| parzen_log_density(&samples, x, cfg.parzen_sigma))
                .sum::<Result<f64>>()?;
            parzens.push(total / n as f64);
        }
    }
    Ok(EvalReport {
        lower_bound: Estimate::from_repetitions(&lbs),
        importance_sampling: Estimate::from_repetitions(&iss),
        parzen: cfg.parzen.then(|| Estimate::from_repetitions(&parzens)),
        k: cfg.k,
        repetitions: cfg.repetitions,
        points: n,
    })
}

/// Final states of `n` model chains, generated in batches.
pub fn generate_samples<K: Transition + ?Sized, R: Rng + ?Sized>(
    op: &K,
    prior: &FactorialGaussian,
    n: usize,
    steps: usize,
    batch_size: usize,
    rng: &mut R,
    mode: Mode,
) -> Result<Tensor> {
    let mut data = Vec::with_capacity(n * op.dim());
    for idx in batches(n, batch_size) {
        let trace = run_model_chain(rng, prior, op, idx.len(), steps, mode)?;
        data.extend_from_slice(trace.last_state().data());
    }
    Tensor::matrix(n, op.dim(), data)
}
