//! Infusion training for denoising Markov-chain generators.
//!
//! A generator is a short Markov chain: a factorial Gaussian draw `z(0)` is
//! pushed through `T` applications of a learned stochastic transition
//! operator and `z(T)` is read out as the sample. The operator is trained on
//! pairs produced by an *infusion chain*, a proposal that follows the model
//! chain but, per dimension and with a small scheduled probability, draws the
//! value from a narrow Gaussian around the training target instead.
//!
//! This crate is `no_std` + `alloc` and holds every numerical piece:
//!
//! * [`autodiff`]: a small reverse-mode tape over dense `f64` tensors.
//! * [`model`]: the prior, the MLP transition operator and the sampling chains.
//! * [`infusion`]: the infusion-rate schedule and the proposal chain.
//! * [`training`]: denoising and lower-bound training steps and the epoch loop.
//! * [`evaluation`]: lower-bound, importance-sampling and Parzen estimators.
//!
//! File formats, datasets and the command line live in the `infusion` crate.
#![no_std]
#![warn(missing_debug_implementations)]

extern crate alloc;

pub mod autodiff;
pub mod error;
pub mod evaluation;
pub mod infusion;
pub mod linear_gaussian;
pub mod math;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod training;

pub use autodiff::{Gradients, ParamId, ParamStore, Parameter, Tape, Var};
pub use error::{Error, Result};
pub use evaluation::{EvalConfig, EvalReport};
pub use infusion::InfusionSchedule;
pub use model::{
    ChainTrace, FactorialGaussian, Mode, OperatorConfig, OutputMode, Transition,
    TransitionOperator,
};
pub use optim::{Optimizer, OptimizerKind};
pub use tensor::Tensor;
pub use training::{Objective, TrainConfig, Trainer};
