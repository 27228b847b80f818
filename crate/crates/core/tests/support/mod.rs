//! Finite-difference gradient checks for the training losses.
#![allow(dead_code)]

use infusion_core::infusion::{lower_bound_terms, ChainNoise};
use infusion_core::model::transition_moments;
use infusion_core::rng::{standard_normal, uniform, ChainRng};
use infusion_core::training::denoising_terms;
use infusion_core::{
    FactorialGaussian, InfusionSchedule, Mode, Objective, OperatorConfig, OutputMode, ParamId, Tensor, TrainConfig,
    Transition, TransitionOperator,
};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, 1e-3)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// A small, randomly shaped instance of everything a training loss needs.
#[derive(Clone, Debug)]
pub struct Instance {
    pub op: TransitionOperator,
    pub prior: FactorialGaussian,
    pub cfg: TrainConfig,
    pub xs: Tensor,
    pub noise: ChainNoise,
}

pub fn random_instance(rng: &mut ChainRng) -> Instance {
    let dim = rng.random_range(1..=8);
    let steps = rng.random_range(1..=3);
    let layers = rng.random_range(1..=2);
    let hidden_sizes = (0..layers).map(|_| rng.random_range(1..=16)).collect();
    let output_mode = if rng.random_bool(0.25) {
        OutputMode::Isotropic { fixed_var: rng.random_range(0.01..0.2) }
    } else {
        OutputMode::Diagonal
    };
    let config = OperatorConfig {
        dim,
        hidden_sizes,
        steps,
        share_params: rng.random_bool(0.5),
        beta: rng.random_range(0.05..0.5),
        eps_var: 1e-4,
        output_mode,
        batch_norm: rng.random_bool(0.5),
    };
    let mut op = TransitionOperator::new(config, rng).unwrap();
    // Move away from the zero-bias initialization so every code path is hit.
    for p in op.param_store_mut().iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v += 0.3 * standard_normal(rng));
    }
    let mean = (0..dim).map(|_| uniform(rng)).collect();
    let var = (0..dim).map(|_| rng.random_range(0.01..0.2)).collect();
    let prior = FactorialGaussian::new(mean, var).unwrap();
    let schedule = InfusionSchedule::new(rng.random_range(0.0..0.5), rng.random_range(0.0..0.5), rng.random_range(0.02..0.3)).unwrap();
    let cfg = TrainConfig { steps, schedule, ..TrainConfig::default() };
    let n = rng.random_range(2..=5);
    let xs = Tensor::matrix(n, dim, (0..n * dim).map(|_| uniform(rng)).collect()).unwrap();
    let noise = ChainNoise::draw(rng, &schedule, n, dim, steps);
    Instance { op, prior, cfg, xs, noise }
}

/// Chain states `z̃(0..T-1)` exactly as the denoising objective samples them.
pub fn frozen_states(inst: &Instance, mode: Mode) -> Vec<Tensor> {
    let (n, d) = (inst.xs.rows(), inst.xs.cols());
    let sd = inst.cfg.schedule.sigma_delta;
    let (pm, pv) = inst.prior.broadcast(n);
    let mut states = vec![Tensor::matrix(n, d, inst.noise.steps[0].apply(pm.data(), pv.data(), inst.xs.data(), sd)).unwrap()];
    for t in 1..inst.op.steps() {
        let (m, v) = transition_moments(&inst.op, states.last().unwrap(), t, mode).unwrap();
        states.push(Tensor::matrix(n, d, inst.noise.steps[t].apply(m.data(), v.data(), inst.xs.data(), sd)).unwrap());
    }
    states
}

/// `Σ_rows Σ_t (t/T) log p(t)(x | z(t-1))` with the chain held fixed.
pub fn frozen_denoising_value(op: &TransitionOperator, cfg: &TrainConfig, xs: &Tensor, states: &[Tensor], mode: Mode) -> f64 {
    let mut tape = op.new_tape();
    let x = tape.constant(xs.clone());
    let mut total = 0.0;
    for t in 1..=op.steps() {
        let z = tape.constant(states[t - 1].clone());
        let out = op.forward(&mut tape, z, t, mode).unwrap();
        let lp = tape.gaussian_log_density(x, out.mean, out.var).unwrap();
        total += cfg.step_weight(t) * tape.value(lp).data().iter().sum::<f64>();
    }
    total
}

fn lower_bound_value(op: &TransitionOperator, inst: &Instance, mode: Mode) -> f64 {
    let mut tape = op.new_tape();
    let l = lower_bound_terms(&mut tape, op, &inst.prior, &inst.cfg.schedule, &inst.xs, &inst.noise, mode).unwrap();
    tape.value(l).data().iter().sum()
}

/// Analytic gradient of the summed objective, one vector per parameter.
pub fn analytic_gradient(inst: &Instance, objective: Objective, mode: Mode) -> Vec<Vec<f64>> {
    let op = &inst.op;
    let mut tape = op.new_tape();
    let terms = match objective {
        Objective::Denoising => denoising_terms(&mut tape, op, &inst.prior, &inst.cfg, &inst.xs, &inst.noise, mode),
        Objective::LowerBound => {
            lower_bound_terms(&mut tape, op, &inst.prior, &inst.cfg.schedule, &inst.xs, &inst.noise, mode)
        }
    }
    .unwrap();
    let total = tape.sum(terms).unwrap();
    let grads = tape.backward(total).unwrap();
    op.param_store()
        .iter()
        .map(|(id, p)| grads.wrt_param(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.value.len()]))
        .collect()
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    /// Coordinates whose finite difference straddles a ReLU kink.
    pub kinks: usize,
    pub failures: usize,
    pub worst: f64,
}

impl GradReport {
    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        self.kinks += other.kinks;
        self.failures += other.failures;
        self.worst = self.worst.max(other.worst);
    }
}

/// Compares every parameter coordinate against central differences.
///
/// A coordinate whose difference quotient changes by more than the tolerance
/// when the step shrinks tenfold is on a ReLU kink and is counted, not judged.
pub fn check_instance(inst: &Instance, objective: Objective, mode: Mode, tol: f64) -> GradReport {
    let analytic = analytic_gradient(inst, objective, mode);
    let states = frozen_states(inst, mode);
    let value = |op: &TransitionOperator| match objective {
        Objective::Denoising => frozen_denoising_value(op, &inst.cfg, &inst.xs, &states, mode),
        Objective::LowerBound => lower_bound_value(op, inst, mode),
    };
    let quotient = |id: ParamId, k: usize, h: f64| {
        let mut plus = inst.op.clone();
        plus.param_store_mut().value_mut(id).data_mut()[k] += h;
        let mut minus = inst.op.clone();
        minus.param_store_mut().value_mut(id).data_mut()[k] -= h;
        (value(&plus) - value(&minus)) / (2.0 * h)
    };
    let mut report = GradReport::default();
    let ids: Vec<ParamId> = inst.op.param_store().iter().map(|(id, _)| id).collect();
    for (p, id) in ids.into_iter().enumerate() {
        for (k, &g) in analytic[p].iter().enumerate() {
            let fd = quotient(id, k, FD_STEP);
            let err = rel_err(g, fd);
            if err < tol {
                report.checked += 1;
                report.worst = report.worst.max(err);
                continue;
            }
            let fine = quotient(id, k, FD_STEP / 10.0);
            if rel_err(fd, fine) > tol {
                report.kinks += 1;
            } else {
                report.checked += 1;
                report.failures += 1;
                report.worst = report.worst.max(err);
            }
        }
    }
    report
}

/// Exact `log p(x)` of a 1-D chain with prior `N(m0, v0)` and `T` affine
/// Gaussian transitions `z ↦ N(a z + b, s)`: the marginal stays Gaussian.
pub fn linear_gaussian_marginal(m0: f64, v0: f64, a: f64, b: f64, s: f64, steps: usize, x: f64) -> f64 {
    let (mut m, mut v) = (m0, v0);
    for _ in 0..steps {
        m = a * m + b;
        v = a * a * v + s;
    }
    -0.5 * (2.0 * std::f64::consts::PI * v).ln() - (x - m) * (x - m) / (2.0 * v)
}
