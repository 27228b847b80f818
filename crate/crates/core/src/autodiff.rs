//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every forward op together with the intermediates its
//! backward rule needs. Nodes are appended in evaluation order, so the tape is
//! topologically sorted by construction and [`Tape::backward`] is a single
//! reverse sweep.
//!
//! Trainable values live in a [`ParamStore`] that the tape borrows; parameter
//! leaves do not copy their values. Gradients come back as a detached
//! [`Gradients`] object that is folded into the store afterwards, which keeps
//! the store immutable while a tape is alive.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::math;
use crate::rng::standard_normal;
use crate::tensor::Tensor;

/// Added to the batch variance inside normalization.
pub const BN_VARIANCE_FLOOR: f64 = 1e-8;

/// Handle to a trainable tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Owned collection of parameters and their gradient accumulators.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name: name.into(), value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn grad_norm(&self) -> f64 {
        let s: f64 = self.params.iter().flat_map(|p| p.grad.data()).map(|g| g * g).sum();
        math::sqrt(s)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a batch-norm node normalizes its input.
#[derive(Clone, Copy, Debug)]
pub enum Normalization<'a> {
    /// Current mini-batch statistics. `record` tags the observation so the
    /// caller can collect per-step statistics from the tape afterwards.
    Batch { record: Option<(usize, usize)> },
    /// Stored statistics (evaluation).
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

/// Column statistics of one train-mode batch-norm evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchObservation {
    pub step: usize,
    pub layer: usize,
    pub count: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Var },
    Relu(Var),
    Sigmoid(Var),
    Affine { x: Var, scale: f64 },
    Add(Var, Var),
    Sub(Var, Var),
    Sum(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    GaussLogDensity { x: Var, mean: Var, var: Var },
    MixtureLogDensity { z: Var, mean: Var, var: Var, target: Vec<f64>, sd_var: f64, resp: Vec<f64> },
    Reparam { mean: Var, var: Var, eps: Vec<f64> },
    Select { x: Var, mask: Vec<bool> },
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    op: Op,
}

/// Forward record of one computation.
#[derive(Debug)]
pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
    observations: Vec<BatchObservation>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    /// A tape without parameters; only constants can be leaves.
    pub fn new() -> Self {
        Tape { params: None, nodes: Vec::new(), param_nodes: Vec::new(), observations: Vec::new() }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Tape {
            params: Some(params),
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
            observations: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Batch-norm statistics recorded by train-mode normalization nodes.
    pub fn observations(&self) -> &[BatchObservation] {
        &self.observations
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.expect("param node without store").value(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { value: Some(value), op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value: Some(value), op: Op::Constant });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node, so a
    /// weight shared across chain steps accumulates one gradient.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes.get(id.0).copied().flatten() {
            return v;
        }
        assert!(
            self.params.is_some_and(|p| id.0 < p.len()),
            "parameter {:?} is not in the tape's store",
            id
        );
        self.nodes.push(Node { value: None, op: Op::Param(id) });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    /// `x · w + b` for `x: [n, din]`, `w: [din, dout]`, `b: [dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x), self.value(w), self.value(b));
        if xs.rank() != 2 || ws.rank() != 2 || bs.len() != ws.cols() || xs.cols() != ws.rows() {
            return Err(shape_err(
                "linear",
                format!("input {:?}, weights {:?}, bias {:?}", xs.shape(), ws.shape(), bs.shape()),
            ));
        }
        let (n, din, dout) = (xs.rows(), ws.rows(), ws.cols());
        let mut out = Vec::with_capacity(n * dout);
        for i in 0..n {
            out.extend_from_slice(bs.data());
            let row = &mut out[i * dout..(i + 1) * dout];
            let xi = xs.row(i);
            for j in 0..din {
                let a = xi[j];
                if a == 0.0 {
                    continue;
                }
                for (o, &wv) in row.iter_mut().zip(ws.row(j)) {
                    *o += a * wv;
                }
            }
        }
        let value = Tensor::matrix(n, dout, out)?;
        self.push(value, Op::Linear { x, w, b }, "linear")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(value, Op::Relu(x), "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(math::sigmoid);
        self.push(value, Op::Sigmoid(x), "sigmoid")
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push(value, Op::Affine { x, scale }, "affine")
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.same_shape(bv, "add")?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(value, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.same_shape(bv, "sub")?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(value, Op::Sub(a, b), "sub")
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    /// Column-wise normalization of `x: [n, d]` followed by `gamma · x̂ + beta`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, norm: Normalization<'_>) -> Result<Var> {
        let xs = self.value(x);
        let (n, d) = (xs.rows(), xs.cols());
        if xs.rank() != 2 || self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(shape_err(
                "batch_norm",
                format!("input {:?}, gamma {:?}", xs.shape(), self.value(gamma).shape()),
            ));
        }
        let (mean, var, train) = match norm {
            Normalization::Batch { .. } => {
                if n < 2 {
                    return Err(Error::BatchTooSmall(n));
                }
                let mut mean = vec![0.0; d];
                for row in xs.rows_iter() {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; d];
                for row in xs.rows_iter() {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n as f64);
                (mean, var, true)
            }
            Normalization::Fixed { mean, var } => {
                if mean.len() != d || var.len() != d {
                    return Err(shape_err("batch_norm", format!("stored statistics for {} columns, input has {}", mean.len(), d)));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / math::sqrt(v + BN_VARIANCE_FLOOR)).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(n * d);
        let mut out = Vec::with_capacity(n * d);
        for row in xs.rows_iter() {
            for j in 0..d {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        if let Normalization::Batch { record: Some((step, layer)) } = norm {
            self.observations.push(BatchObservation { step, layer, count: n, mean, var });
        }
        let value = Tensor::matrix(n, d, out)?;
        self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, "batch_norm")
    }

    /// Per-row diagonal Gaussian log-density, `[n, d] -> [n]`.
    pub fn gaussian_log_density(&mut self, x: Var, mean: Var, var: Var) -> Result<Var> {
        let (xs, ms, vs) = (self.value(x), self.value(mean), self.value(var));
        xs.same_shape(ms, "gaussian_log_density")?;
        xs.same_shape(vs, "gaussian_log_density")?;
        if vs.data().iter().any(|&v| !(v > 0.0)) {
            return Err(Error::NonPositiveVariance("gaussian_log_density"));
        }
        let d = xs.cols();
        let out: Vec<f64> = (0..xs.rows())
            .map(|i| {
                let (xr, mr, vr) = (xs.row(i), ms.row(i), vs.row(i));
                (0..d).map(|j| math::normal_log_pdf(xr[j], mr[j], vr[j])).sum()
            })
            .collect();
        let value = Tensor::vector(out);
        self.push(value, Op::GaussLogDensity { x, mean, var }, "gaussian_log_density")
    }

    /// Per-row log-density of the per-dimension mixture
    /// `(1-α) N(μ, σ²) + α N(target, σδ²)`, `[n, d] -> [n]`.
    ///
    /// `alpha` of exactly 0 or 1 evaluates a single component, so there is no
    /// `ln 0` anywhere.
    pub fn mixture_log_density(
        &mut self,
        z: Var,
        mean: Var,
        var: Var,
        target: &Tensor,
        alpha: f64,
        sigma_delta: f64,
    ) -> Result<Var> {
        let (zs, ms, vs) = (self.value(z), self.value(mean), self.value(var));
        zs.same_shape(ms, "mixture_log_density")?;
        zs.same_shape(vs, "mixture_log_density")?;
        zs.same_shape(target, "mixture_log_density")?;
        if vs.data().iter().any(|&v| !(v > 0.0)) || !(sigma_delta > 0.0) {
            return Err(Error::NonPositiveVariance("mixture_log_density"));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidConfig(format!("mixture weight {} outside [0, 1]", alpha)));
        }
        let sd_var = sigma_delta * sigma_delta;
        let d = zs.cols();
        let mut resp = Vec::with_capacity(zs.len());
        let mut out = Vec::with_capacity(zs.rows());
        for i in 0..zs.rows() {
            let (zr, mr, vr, tr) = (zs.row(i), ms.row(i), vs.row(i), target.row(i));
            let mut total = 0.0;
            for j in 0..d {
                let (lp, r) = mixture_term(zr[j], mr[j], vr[j], tr[j], alpha, sd_var);
                total += lp;
                resp.push(r);
            }
            out.push(total);
        }
        let value = Tensor::vector(out);
        let op = Op::MixtureLogDensity { z, mean, var, target: target.data().to_vec(), sd_var, resp };
        self.push(value, op, "mixture_log_density")
    }

    /// `mean + sqrt(var) · eps` with `eps` supplied by the caller. Gradient
    /// flows into `mean` and `var`, never into `eps`.
    pub fn reparam(&mut self, mean: Var, var: Var, eps: &Tensor) -> Result<Var> {
        let (ms, vs) = (self.value(mean), self.value(var));
        ms.same_shape(vs, "reparam")?;
        ms.same_shape(eps, "reparam")?;
        if vs.data().iter().any(|&v| !(v > 0.0)) {
            return Err(Error::NonPositiveVariance("reparam"));
        }
        let data = ms
            .data()
            .iter()
            .zip(vs.data())
            .zip(eps.data())
            .map(|((m, v), e)| m + math::sqrt(*v) * e)
            .collect();
        let value = Tensor::new(ms.shape().to_vec(), data)?;
        self.push(value, Op::Reparam { mean, var, eps: eps.data().to_vec() }, "reparam")
    }

    /// Reparameterized Gaussian draw with standard-normal noise from `rng`.
    pub fn reparam_sample<R: Rng + ?Sized>(&mut self, rng: &mut R, mean: Var, var: Var) -> Result<Var> {
        let shape = self.value(mean).shape().to_vec();
        let n = self.value(mean).len();
        let eps = Tensor::new(shape, (0..n).map(|_| standard_normal(rng)).collect())?;
        self.reparam(mean, var, &eps)
    }

    /// Elementwise `if mask { fill } else { x }`; `fill` is a constant.
    pub fn select(&mut self, mask: &[bool], fill: &Tensor, x: Var) -> Result<Var> {
        let xs = self.value(x);
        xs.same_shape(fill, "select")?;
        if mask.len() != xs.len() {
            return Err(shape_err("select", format!("mask of {} for {} values", mask.len(), xs.len())));
        }
        let data = xs
            .data()
            .iter()
            .zip(fill.data())
            .zip(mask)
            .map(|((&v, &f), &m)| if m { f } else { v })
            .collect();
        let value = Tensor::new(xs.shape().to_vec(), data)?;
        self.push(value, Op::Select { x, mask: mask.to_vec() }, "select")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_len = self.value(loss).len();
        if loss_len != 1 {
            return Err(Error::NonScalarLoss(loss_len));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else { continue };
            let mut acc = Accumulator { grads: lower, tape: self };
            match &self.nodes[i].op {
                Op::Constant | Op::Param(_) => {}
                Op::Linear { x, w, b } => {
                    let (xs, ws) = (self.value(*x), self.value(*w));
                    let (n, din, dout) = (xs.rows(), ws.rows(), ws.cols());
                    let gx = acc.slot(*x);
                    for r in 0..n {
                        let gr = &g[r * dout..(r + 1) * dout];
                        for j in 0..din {
                            gx[r * din + j] += dot(gr, ws.row(j));
                        }
                    }
                    let gw = acc.slot(*w);
                    for r in 0..n {
                        let gr = &g[r * dout..(r + 1) * dout];
                        for (j, &a) in xs.row(r).iter().enumerate() {
                            if a == 0.0 {
                                continue;
                            }
                            for (o, &gv) in gw[j * dout..(j + 1) * dout].iter_mut().zip(gr) {
                                *o += a * gv;
                            }
                        }
                    }
                    let gb = acc.slot(*b);
                    for r in 0..n {
                        for (o, &gv) in gb.iter_mut().zip(&g[r * dout..(r + 1) * dout]) {
                            *o += gv;
                        }
                    }
                }
                Op::Relu(x) => {
                    let xs = self.value(*x).data();
                    let gx = acc.slot(*x);
                    for k in 0..g.len() {
                        if xs[k] > 0.0 {
                            gx[k] += g[k];
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    let ys = self.nodes[i].value.as_ref().unwrap().data();
                    let gx = acc.slot(*x);
                    for k in 0..g.len() {
                        gx[k] += g[k] * ys[k] * (1.0 - ys[k]);
                    }
                }
                Op::Affine { x, scale } => {
                    let gx = acc.slot(*x);
                    for k in 0..g.len() {
                        gx[k] += scale * g[k];
                    }
                }
                Op::Add(a, b) => {
                    acc.add_all(*a, g, 1.0);
                    acc.add_all(*b, g, 1.0);
                }
                Op::Sub(a, b) => {
                    acc.add_all(*a, g, 1.0);
                    acc.add_all(*b, g, -1.0);
                }
                Op::Sum(x) => {
                    let gx = acc.slot(*x);
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                    let d = inv_std.len();
                    let n = g.len() / d;
                    let gam = self.value(*gamma).data().to_vec();
                    let mut sum_g = vec![0.0; d];
                    let mut sum_gx = vec![0.0; d];
                    for r in 0..n {
                        for j in 0..d {
                            sum_g[j] += g[r * d + j];
                            sum_gx[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    let gx = acc.slot(*x);
                    let nf = n as f64;
                    for r in 0..n {
                        for j in 0..d {
                            let k = r * d + j;
                            gx[k] += if *train {
                                gam[j] * inv_std[j] / nf * (nf * g[k] - sum_g[j] - xhat[k] * sum_gx[j])
                            } else {
                                gam[j] * inv_std[j] * g[k]
                            };
                        }
                    }
                    acc.add_all(*gamma, &sum_gx, 1.0);
                    acc.add_all(*beta, &sum_g, 1.0);
                }
                Op::GaussLogDensity { x, mean, var } => {
                    let (xs, ms, vs) = (self.value(*x).data(), self.value(*mean).data(), self.value(*var).data());
                    let d = xs.len() / g.len().max(1);
                    let mut gx = vec![0.0; xs.len()];
                    let mut gv = vec![0.0; xs.len()];
                    for k in 0..xs.len() {
                        let gr = g[k / d];
                        let diff = xs[k] - ms[k];
                        gx[k] = -gr * diff / vs[k];
                        gv[k] = gr * (diff * diff / (2.0 * vs[k] * vs[k]) - 0.5 / vs[k]);
                    }
                    acc.add_all(*x, &gx, 1.0);
                    acc.add_all(*mean, &gx, -1.0);
                    acc.add_all(*var, &gv, 1.0);
                }
                Op::MixtureLogDensity { z, mean, var, target, sd_var, resp } => {
                    let (zs, ms, vs) = (self.value(*z).data(), self.value(*mean).data(), self.value(*var).data());
                    let d = zs.len() / g.len().max(1);
                    let mut gz = vec![0.0; zs.len()];
                    let mut gm = vec![0.0; zs.len()];
                    let mut gv = vec![0.0; zs.len()];
                    for k in 0..zs.len() {
                        let gr = g[k / d];
                        let r = resp[k];
                        let dm = zs[k] - ms[k];
                        let dt = zs[k] - target[k];
                        gz[k] = gr * (-r * dm / vs[k] - (1.0 - r) * dt / sd_var);
                        gm[k] = gr * r * dm / vs[k];
                        gv[k] = gr * r * (dm * dm / (2.0 * vs[k] * vs[k]) - 0.5 / vs[k]);
                    }
                    acc.add_all(*z, &gz, 1.0);
                    acc.add_all(*mean, &gm, 1.0);
                    acc.add_all(*var, &gv, 1.0);
                }
                Op::Reparam { mean, var, eps } => {
                    let vs = self.value(*var).data();
                    acc.add_all(*mean, g, 1.0);
                    let gv: Vec<f64> = (0..g.len()).map(|k| g[k] * eps[k] / (2.0 * math::sqrt(vs[k]))).collect();
                    acc.add_all(*var, &gv, 1.0);
                }
                Op::Select { x, mask } => {
                    let gx = acc.slot(*x);
                    for k in 0..g.len() {
                        if !mask[k] {
                            gx[k] += g[k];
                        }
                    }
                }
            }
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { nodes: grads, params })
    }
}

/// `ln[(1-α) N(z; μ, v) + α N(z; t, s)]` and the model-component
/// responsibility.
#[inline]
pub(crate) fn mixture_term(z: f64, mean: f64, var: f64, target: f64, alpha: f64, sd_var: f64) -> (f64, f64) {
    if alpha <= 0.0 {
        (math::normal_log_pdf(z, mean, var), 1.0)
    } else if alpha >= 1.0 {
        (math::normal_log_pdf(z, target, sd_var), 0.0)
    } else {
        let a = math::ln(1.0 - alpha) + math::normal_log_pdf(z, mean, var);
        let b = math::ln(alpha) + math::normal_log_pdf(z, target, sd_var);
        let total = math::log_add_exp(a, b);
        (total, math::exp(a - total))
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Accumulator<'g, 't, 'p> {
    grads: &'g mut [Option<Vec<f64>>],
    tape: &'t Tape<'p>,
}

impl Accumulator<'_, '_, '_> {
    fn slot(&mut self, v: Var) -> &mut Vec<f64> {
        let len = self.tape.value(v).len();
        self.grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn add_all(&mut self, v: Var, g: &[f64], scale: f64) {
        let slot = self.slot(v);
        for (o, &gv) in slot.iter_mut().zip(g) {
            *o += scale * gv;
        }
    }
}

/// Result of a reverse sweep, detached from the tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to any node reached by the sweep.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn wrt_param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.iter().find(|(p, _)| *p == id).and_then(|&(_, i)| self.nodes.get(i)?.as_deref())
    }

    /// Adds every parameter gradient into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, node) in &self.params {
            if let Some(Some(g)) = self.nodes.get(node) {
                for (acc, v) in store.params[id.0].grad.data_mut().iter_mut().zip(g) {
                    *acc += v;
                }
            }
        }
    }
}
