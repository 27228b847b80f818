//! The infusion proposal chain `q(z̃ | x)`.
//!
//! Each step is, independently per dimension, a mixture of the model
//! transition (weight `1 - α(t)`) and a narrow Gaussian `N(x_i, σδ²)` around
//! the target (weight `α(t)`). The infusion rate grows linearly,
//! `α(t) = min(1, α0 + t·ω)`.
//!
//! # Random stream contract
//!
//! For every step, all branch choices for the `[n, d]` block are drawn first
//! (one uniform per element, row-major; element takes the target branch when
//! `u < α`), then one standard normal per element. The element value is
//! `x + σδ·ε` on the target branch and `μ + σ·ε` on the model branch. Draw
//! counts therefore never depend on the branch pattern, so a chain sampled
//! step by step and a [`ChainNoise`] drawn up front consume the stream
//! identically.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{mixture_term, Tape, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::model::{check_prior, transition_moments, ChainTrace, FactorialGaussian, Mode, Transition};
use crate::rng::{standard_normal, uniform};
use crate::tensor::Tensor;

/// Linear infusion-rate schedule plus the width of the target component.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InfusionSchedule {
    pub alpha0: f64,
    pub omega: f64,
    /// Standard deviation of the target-centred component, in data units.
    pub sigma_delta: f64,
}

impl Default for InfusionSchedule {
    fn default() -> Self {
        Self { alpha0: 0.0, omega: 0.01, sigma_delta: 0.03 }
    }
}

impl InfusionSchedule {
    pub fn new(alpha0: f64, omega: f64, sigma_delta: f64) -> Result<Self> {
        let s = Self { alpha0, omega, sigma_delta };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha0) {
            return Err(Error::InvalidConfig(format!("alpha0 = {} outside [0, 1]", self.alpha0)));
        }
        if !(self.omega >= 0.0) || !self.omega.is_finite() {
            return Err(Error::InvalidConfig(format!("omega = {} must be a nonnegative number", self.omega)));
        }
        if !(self.sigma_delta > 0.0) || !self.sigma_delta.is_finite() {
            return Err(Error::InvalidConfig("sigma_delta must be positive".to_string()));
        }
        Ok(())
    }

    /// Infusion rate at chain step `t` (state `z̃(t)`), capped at 1.
    pub fn alpha_at(&self, t: usize) -> f64 {
        (self.alpha0 + t as f64 * self.omega).min(1.0)
    }
}

/// Pre-drawn randomness for one infusion step over `len` elements.
#[derive(Clone, Debug, PartialEq)]
pub struct InfusionNoise {
    /// `true` where the element is taken from the target component.
    pub mask: Vec<bool>,
    pub eps: Vec<f64>,
}

/// Draws branch choices, then normals, per the stream contract.
pub fn draw_infusion_noise<R: Rng + ?Sized>(rng: &mut R, len: usize, alpha: f64) -> InfusionNoise {
    let mask = (0..len).map(|_| uniform(rng) < alpha).collect();
    let eps = (0..len).map(|_| standard_normal(rng)).collect();
    InfusionNoise { mask, eps }
}

impl InfusionNoise {
    /// Values drawn from the target component for every element.
    pub fn target_draws(&self, target: &[f64], sigma_delta: f64) -> Vec<f64> {
        target.iter().zip(&self.eps).map(|(&x, &e)| x + sigma_delta * e).collect()
    }

    /// Realizes the mixture draw given the model moments.
    pub fn apply(&self, mean: &[f64], var: &[f64], target: &[f64], sigma_delta: f64) -> Vec<f64> {
        (0..self.eps.len())
            .map(|k| {
                if self.mask[k] {
                    target[k] + sigma_delta * self.eps[k]
                } else {
                    mean[k] + math::sqrt(var[k]) * self.eps[k]
                }
            })
            .collect()
    }
}

/// One infusion transition for a single chain.
pub fn infusion_step<R: Rng + ?Sized>(
    rng: &mut R,
    op_output: &FactorialGaussian,
    x: &[f64],
    alpha: f64,
    sigma_delta: f64,
) -> Vec<f64> {
    let noise = draw_infusion_noise(rng, x.len(), alpha);
    noise.apply(&op_output.mean, &op_output.var, x, sigma_delta)
}

/// `Σ_i ln[(1-α) N(z_i; μ_i, σ_i²) + α N(z_i; x_i, σδ²)]`.
pub fn infusion_log_density(z: &[f64], op_output: &FactorialGaussian, x: &[f64], alpha: f64, sigma_delta: f64) -> f64 {
    let sd_var = sigma_delta * sigma_delta;
    (0..z.len())
        .map(|i| mixture_term(z[i], op_output.mean[i], op_output.var[i], x[i], alpha, sd_var).0)
        .sum()
}

fn row_mixture_log_density(z: &Tensor, mean: &Tensor, var: &Tensor, x: &Tensor, alpha: f64, sigma_delta: f64) -> Vec<f64> {
    let sd_var = sigma_delta * sigma_delta;
    (0..z.rows())
        .map(|i| {
            let (zr, mr, vr, xr) = (z.row(i), mean.row(i), var.row(i), x.row(i));
            (0..zr.len()).map(|j| mixture_term(zr[j], mr[j], vr[j], xr[j], alpha, sd_var).0).sum()
        })
        .collect()
}

fn row_normal_log_density(z: &Tensor, mean: &Tensor, var: &Tensor) -> Vec<f64> {
    (0..z.rows())
        .map(|i| {
            let (zr, mr, vr) = (z.row(i), mean.row(i), var.row(i));
            (0..zr.len()).map(|j| math::normal_log_pdf(zr[j], mr[j], vr[j])).sum()
        })
        .collect()
}

/// Samples infusion chains `z̃(0..steps-1)` towards the rows of `xs`.
///
/// `z̃(0)` mixes the prior with the target component at rate `α(0)`; every
/// later state mixes the model transition from the previous state at rate
/// `α(t)`. The trace stores both `log p` and `log q` of every state.
pub fn run_infusion_chain<K: Transition + ?Sized, R: Rng + ?Sized>(
    rng: &mut R,
    prior: &FactorialGaussian,
    op: &K,
    sched: &InfusionSchedule,
    xs: &Tensor,
    steps: usize,
    mode: Mode,
) -> Result<ChainTrace> {
    check_prior(prior, op)?;
    check_targets(xs, op.dim())?;
    if steps == 0 {
        return Err(Error::InvalidConfig("infusion chain needs at least one step".to_string()));
    }
    let (n, d) = (xs.rows(), xs.cols());
    let (mut mean, mut var) = prior.broadcast(n);
    let mut states = Vec::with_capacity(steps);
    let mut model_logp = Vec::with_capacity(steps);
    let mut proposal_logq = Vec::with_capacity(steps);
    for t in 0..steps {
        if t > 0 {
            (mean, var) = transition_moments(op, states.last().unwrap(), t.min(op.steps()), mode)?;
        }
        let alpha = sched.alpha_at(t);
        let noise = draw_infusion_noise(rng, n * d, alpha);
        let z = Tensor::matrix(n, d, noise.apply(mean.data(), var.data(), xs.data(), sched.sigma_delta))?;
        model_logp.push(row_normal_log_density(&z, &mean, &var));
        proposal_logq.push(row_mixture_log_density(&z, &mean, &var, xs, alpha, sched.sigma_delta));
        states.push(z);
    }
    Ok(ChainTrace { states, model_logp, proposal_logq: Some(proposal_logq) })
}

/// All randomness of a batch of infusion chains of length `T`, drawn up front.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainNoise {
    pub steps: Vec<InfusionNoise>,
}

impl ChainNoise {
    /// Same stream consumption as [`run_infusion_chain`] with `steps = T`.
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, sched: &InfusionSchedule, rows: usize, dim: usize, steps: usize) -> Self {
        let steps = (0..steps).map(|t| draw_infusion_noise(rng, rows * dim, sched.alpha_at(t))).collect();
        Self { steps }
    }
}

pub(crate) fn check_targets(xs: &Tensor, dim: usize) -> Result<()> {
    if xs.rank() != 2 || xs.cols() != dim || xs.rows() == 0 {
        return Err(Error::LengthMismatch(format!("targets of shape {:?} for dimension {}", xs.shape(), dim)));
    }
    Ok(())
}

/// Records `ℓ = log p(z̃, x) - log q(z̃ | x)` for every row of `xs` on `tape`.
///
/// Model-branch draws are reparameterized, so the result is differentiable in
/// the operator parameters through the whole chain. Target-branch draws and
/// branch choices are constants. Returns a `[n]` node.
pub fn lower_bound_terms<'p, K: Transition + ?Sized>(
    tape: &mut Tape<'p>,
    op: &'p K,
    prior: &FactorialGaussian,
    sched: &InfusionSchedule,
    xs: &Tensor,
    noise: &ChainNoise,
    mode: Mode,
) -> Result<Var> {
    check_prior(prior, op)?;
    check_targets(xs, op.dim())?;
    let steps = op.steps();
    if noise.steps.len() != steps || noise.steps.iter().any(|s| s.eps.len() != xs.len()) {
        return Err(Error::LengthMismatch("chain noise does not match the batch".to_string()));
    }
    let (n, d) = (xs.rows(), xs.cols());
    let sd = sched.sigma_delta;

    let (pm, pv) = prior.broadcast(n);
    let z0 = Tensor::matrix(n, d, noise.steps[0].apply(pm.data(), pv.data(), xs.data(), sd))?;
    let lp0 = row_normal_log_density(&z0, &pm, &pv);
    let lq0 = row_mixture_log_density(&z0, &pm, &pv, xs, sched.alpha_at(0), sd);
    let start: Vec<f64> = lp0.iter().zip(&lq0).map(|(p, q)| p - q).collect();
    let mut acc = tape.constant(Tensor::vector(start));
    let mut z_prev = tape.constant(z0);

    for (t, step_noise) in noise.steps.iter().enumerate().skip(1) {
        let out = op.forward(tape, z_prev, t, mode)?;
        let eps = Tensor::matrix(n, d, step_noise.eps.clone())?;
        let fill = Tensor::matrix(n, d, step_noise.target_draws(xs.data(), sd))?;
        let drawn = tape.reparam(out.mean, out.var, &eps)?;
        let z = tape.select(&step_noise.mask, &fill, drawn)?;
        let lp = tape.gaussian_log_density(z, out.mean, out.var)?;
        let lq = tape.mixture_log_density(z, out.mean, out.var, xs, sched.alpha_at(t), sd)?;
        let diff = tape.sub(lp, lq)?;
        acc = tape.add(acc, diff)?;
        z_prev = z;
    }
    let out = op.forward(tape, z_prev, steps, mode)?;
    let x = tape.constant(xs.clone());
    let last = tape.gaussian_log_density(x, out.mean, out.var)?;
    tape.add(acc, last)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use crate::linear_gaussian::LinearGaussianKernel;
    use crate::model::chain_log_joint;
    use crate::rng;

    #[test]
    fn alpha_schedule_examples() {
        let s = InfusionSchedule::new(0.0, 0.01, 0.03).unwrap();
        assert!((s.alpha_at(14) - 0.14).abs() < 1e-15);
        let c = InfusionSchedule::new(0.05, 0.0, 0.03).unwrap();
        assert!((0..50).all(|t| c.alpha_at(t) == 0.05));
        let fast = InfusionSchedule::new(0.9, 0.2, 0.03).unwrap();
        assert_eq!(fast.alpha_at(1), 1.0);
        assert!(InfusionSchedule::new(1.5, 0.0, 0.03).is_err());
        assert!(InfusionSchedule::new(0.0, -0.1, 0.03).is_err());
        assert!(InfusionSchedule::new(0.0, 0.1, 0.0).is_err());
    }

    #[test]
    fn log_density_endpoints_are_exact() {
        let out = FactorialGaussian::new(vec![0.2, 0.7, 0.5], vec![0.01, 0.03, 0.05]).unwrap();
        let x = [0.25, 0.6, 0.9];
        let z = [0.3, 0.65, 0.1];
        assert_eq!(infusion_log_density(&z, &out, &x, 0.0, 0.03), out.log_density(&z));
        let delta = FactorialGaussian::new(x.to_vec(), vec![0.03 * 0.03; 3]).unwrap();
        assert_eq!(infusion_log_density(&z, &out, &x, 1.0, 0.03), delta.log_density(&z));
    }

    #[test]
    fn zero_rate_step_matches_model_draw() {
        let out = FactorialGaussian::new(vec![0.2, 0.7], vec![0.01, 0.03]).unwrap();
        let z = infusion_step(&mut rng::stream(3, &[]), &out, &[0.9, 0.9], 0.0, 0.03);
        let mut r = rng::stream(3, &[]);
        for _ in 0..2 {
            let _ = uniform(&mut r);
        }
        let expect: Vec<f64> = (0..2).map(|i| out.mean[i] + math::sqrt(out.var[i]) * standard_normal(&mut r)).collect();
        assert_eq!(z, expect);
    }

    #[test]
    fn single_step_chain_holds_only_initial_state() {
        let k = LinearGaussianKernel::new(2, 1, 0.5, 0.1, 0.2).unwrap();
        let prior = FactorialGaussian::new(vec![0.0; 2], vec![1.0; 2]).unwrap();
        let xs = Tensor::matrix(3, 2, vec![0.1; 6]).unwrap();
        let sched = InfusionSchedule::default();
        let trace = run_infusion_chain(&mut rng::stream(1, &[]), &prior, &k, &sched, &xs, 1, Mode::Eval).unwrap();
        assert_eq!(trace.len(), 1);
        assert_eq!(trace.chains(), 3);
    }

    #[test]
    fn graph_matches_chain_route() {
        let k = LinearGaussianKernel::new(3, 4, 0.7, 0.05, 0.1).unwrap();
        let prior = FactorialGaussian::new(vec![0.1, 0.2, 0.3], vec![0.5, 0.4, 0.3]).unwrap();
        let xs = Tensor::matrix(2, 3, vec![0.3, 0.1, 0.8, 0.5, 0.5, 0.2]).unwrap();
        let sched = InfusionSchedule::new(0.1, 0.2, 0.05).unwrap();

        let trace = run_infusion_chain(&mut rng::stream(5, &[]), &prior, &k, &sched, &xs, 4, Mode::Eval).unwrap();
        let joint = chain_log_joint(&trace, &prior, &k, &xs, Mode::Eval).unwrap();
        let logq = trace.proposal_logq.as_ref().unwrap();
        let via_chain: Vec<f64> = (0..2).map(|i| joint[i] - logq.iter().map(|s| s[i]).sum::<f64>()).collect();

        let noise = ChainNoise::draw(&mut rng::stream(5, &[]), &sched, 2, 3, 4);
        let mut tape = Tape::new();
        let l = lower_bound_terms(&mut tape, &k, &prior, &sched, &xs, &noise, Mode::Eval).unwrap();
        for (a, b) in tape.value(l).data().iter().zip(&via_chain) {
            assert!((a - b).abs() < 1e-10, "{} vs {}", a, b);
        }
    }
}
