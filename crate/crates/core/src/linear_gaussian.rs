//! An affine-Gaussian transition with no parameters.
//!
//! `p(t)(z | z_prev) = N(scale · z_prev + shift, noise_var)` per dimension, for
//! every step. Chains built from it have closed-form marginals, which makes it
//! the reference kernel for checking the likelihood estimators.

use alloc::string::ToString;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{GaussianVars, Mode, Transition};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearGaussianKernel {
    pub dim: usize,
    pub steps: usize,
    pub scale: f64,
    pub shift: f64,
    pub noise_var: f64,
}

impl LinearGaussianKernel {
    pub fn new(dim: usize, steps: usize, scale: f64, shift: f64, noise_var: f64) -> Result<Self> {
        if dim == 0 || steps == 0 || !(noise_var > 0.0) {
            return Err(Error::InvalidConfig("linear-Gaussian kernel needs dim, steps ≥ 1 and positive noise".to_string()));
        }
        Ok(Self { dim, steps, scale, shift, noise_var })
    }
}

impl Transition for LinearGaussianKernel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn steps(&self) -> usize {
        self.steps
    }

    fn params(&self) -> Option<&ParamStore> {
        None
    }

    fn forward<'p>(&'p self, tape: &mut Tape<'p>, z_prev: Var, t: usize, _mode: Mode) -> Result<GaussianVars> {
        if t == 0 || t > self.steps {
            return Err(Error::StepOutOfRange { t, steps: self.steps });
        }
        let mean = tape.affine(z_prev, self.scale, self.shift)?;
        let shape = tape.value(mean).shape().to_vec();
        let var = tape.constant(Tensor::filled(&shape, self.noise_var));
        Ok(GaussianVars { mean, var })
    }
}
