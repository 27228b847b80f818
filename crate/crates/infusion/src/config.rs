//! Run configuration: a TOML file with one section per concern.
//!
//! Every field has a default (those of [`RunConfig::default`], which is also
//! the `toy2d` preset). A configuration is resolved in this order: preset,
//! file, `--set section.key=value` overrides, dedicated command-line flags.
//! The resolved file is written into every output directory and loading it
//! reproduces the run.
//!
//! ```toml
//! seed = 0
//!
//! [data]
//! kind = "toy2d"          # or "mnist"
//! toy_n = 2000
//! toy_std = 0.05
//! fractions = [0.8, 0.1, 0.1]
//! mnist_dir = "data/mnist"
//! mnist_side = 8          # 0 keeps 28x28
//! train_limit = 2000      # 0 keeps all rows of that split
//! valid_limit = 500
//! test_limit = 500
//!
//! [model]
//! hidden_sizes = [64, 64]
//! share_params = true
//! beta = 0.1
//! eps_var = 0.0001
//! batch_norm = false
//!
//! [train]
//! steps = 10
//! alpha0 = 0.0
//! omega = 0.02
//! sigma_delta = 0.03
//! objective = "denoising"   # or "lower_bound"
//! optimizer = "adam"        # or "sgd"
//! eta0 = 0.001
//! batch_size = 64
//! epochs = 100
//! grad_clip = 100.0         # 0 disables clipping
//! valid_k = 20
//! visualize = 8             # chains drawn in each per-epoch grid
//!
//! [eval]
//! split = "test"
//! k = 20
//! repetitions = 1
//! parzen = false
//! parzen_sigma = 0.17
//! parzen_samples = 10000
//! dequantize = false
//! isotropic = false
//! batch_size = 100
//! sample_steps = 0          # 0 uses the trained T
//!
//! [sample]
//! n = 16
//! steps = 0                 # 0 uses the trained T
//!
//! [inpaint]
//! split = "test"
//! index = 0
//! mask = "left-half"        # top-half, bottom-half, right-half, dims:i,j,...
//! restarts = 8
//! steps = 0
//!
//! [sweep]
//! steps = [10]
//! alpha0 = [0.0]
//! omega = [0.01, 0.05, 0.1, 0.3]
//!
//! [output]
//! dir = "runs/toy2d"
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use infusion_core::{EvalConfig, InfusionSchedule, Objective, OperatorConfig, OptimizerKind, OutputMode, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{io_err, CliError, Result};

/// Environment variable that relocates relative output directories.
pub const OUT_ROOT_ENV: &str = "INFUSION_OUT_ROOT";

pub const PRESETS: [&str; 2] = ["toy2d", "mnist-small"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Toy2d,
    Mnist,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub kind: DataKind,
    pub toy_n: usize,
    pub toy_std: f64,
    pub toy_centers: [[f64; 2]; 2],
    /// Train, valid and test fractions for the toy set.
    pub fractions: [f64; 3],
    pub mnist_dir: PathBuf,
    pub mnist_side: usize,
    pub train_limit: usize,
    pub valid_limit: usize,
    pub test_limit: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            kind: DataKind::Toy2d,
            toy_n: 2000,
            toy_std: 0.05,
            toy_centers: [[0.25, 0.25], [0.75, 0.75]],
            fractions: [0.8, 0.1, 0.1],
            mnist_dir: PathBuf::from("data/mnist"),
            mnist_side: 8,
            train_limit: 0,
            valid_limit: 0,
            test_limit: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_sizes: Vec<usize>,
    pub share_params: bool,
    pub beta: f64,
    pub eps_var: f64,
    pub batch_norm: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { hidden_sizes: vec![64, 64], share_params: true, beta: 0.1, eps_var: 1e-4, batch_norm: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub alpha0: f64,
    pub omega: f64,
    pub sigma_delta: f64,
    pub objective: Objective,
    pub optimizer: OptimizerName,
    pub eta0: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub grad_clip: f64,
    pub valid_k: usize,
    pub visualize: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 10,
            alpha0: 0.0,
            omega: 0.02,
            sigma_delta: 0.03,
            objective: Objective::Denoising,
            optimizer: OptimizerName::Adam,
            eta0: 1e-3,
            batch_size: 64,
            epochs: 100,
            grad_clip: 100.0,
            valid_k: 20,
            visualize: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub split: String,
    pub k: usize,
    pub repetitions: usize,
    pub parzen: bool,
    pub parzen_sigma: f64,
    pub parzen_samples: usize,
    pub dequantize: bool,
    pub isotropic: bool,
    pub batch_size: usize,
    pub sample_steps: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            split: "test".to_string(),
            k: 20,
            repetitions: 1,
            parzen: false,
            parzen_sigma: 0.17,
            parzen_samples: 10_000,
            dequantize: false,
            isotropic: false,
            batch_size: 100,
            sample_steps: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub n: usize,
    pub steps: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self { n: 16, steps: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InpaintSection {
    pub split: String,
    pub index: usize,
    pub mask: String,
    pub restarts: usize,
    pub steps: usize,
}

impl Default for InpaintSection {
    fn default() -> Self {
        Self { split: "test".to_string(), index: 0, mask: "left-half".to_string(), restarts: 8, steps: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub steps: Vec<usize>,
    pub alpha0: Vec<f64>,
    pub omega: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { steps: vec![10], alpha0: vec![0.0], omega: vec![0.01, 0.05, 0.1, 0.3] }
    }
}

impl SweepSection {
    /// Cartesian product, `steps` outermost and `omega` innermost.
    pub fn cells(&self) -> Vec<(usize, f64, f64)> {
        let mut out = Vec::new();
        for &t in &self.steps {
            for &a in &self.alpha0 {
                for &w in &self.omega {
                    out.push((t, a, w));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs/toy2d") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every random stream of a run is derived from it.
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub sample: SampleSection,
    pub inpaint: InpaintSection,
    pub sweep: SweepSection,
    pub output: OutputSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            sample: SampleSection::default(),
            inpaint: InpaintSection::default(),
            sweep: SweepSection::default(),
            output: OutputSection::default(),
        }
    }
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy2d" => Ok(Self::default()),
            "mnist-small" => Ok(Self {
                data: DataSection {
                    kind: DataKind::Mnist,
                    mnist_side: 8,
                    train_limit: 2000,
                    valid_limit: 500,
                    test_limit: 500,
                    ..DataSection::default()
                },
                model: ModelSection { hidden_sizes: vec![256, 256], ..ModelSection::default() },
                train: TrainSection { steps: 15, omega: 0.01, epochs: 100, ..TrainSection::default() },
                sample: SampleSection { n: 64, steps: 30 },
                inpaint: InpaintSection { mask: "top-half".to_string(), ..InpaintSection::default() },
                sweep: SweepSection { steps: vec![1, 5, 10, 15], ..SweepSection::default() },
                output: OutputSection { dir: PathBuf::from("runs/mnist-small") },
                ..Self::default()
            }),
            _ => Err(CliError::Config(format!("unknown preset {:?} (expected one of {:?})", name, PRESETS))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).map_err(|e| io_err(path, e))?)
    }

    /// Applies a file (merged over `self`) and `section.key=value` overrides.
    pub fn resolve(&self, file: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(&self.to_toml()?).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            let over: toml::Table = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e)))?;
            merge(&mut table, over);
        }
        for s in sets {
            apply_set(&mut table, s)?;
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(CliError::Config("seed must be below 2^63".to_string()));
        }
        Split::parse(&self.eval.split)?;
        Split::parse(&self.inpaint.split)?;
        if self.sample.n == 0 || self.inpaint.restarts == 0 {
            return Err(CliError::Config("sample.n and inpaint.restarts must be at least 1".to_string()));
        }
        if !(self.train.grad_clip >= 0.0) {
            return Err(CliError::Config("train.grad_clip must be nonnegative".to_string()));
        }
        self.train_config().validate()?;
        self.eval_config().validate()?;
        OperatorConfig { dim: 1, ..self.operator_config(1) }.validate()?;
        Ok(())
    }

    pub fn schedule(&self) -> InfusionSchedule {
        InfusionSchedule { alpha0: self.train.alpha0, omega: self.train.omega, sigma_delta: self.train.sigma_delta }
    }

    pub fn operator_config(&self, dim: usize) -> OperatorConfig {
        OperatorConfig {
            dim,
            hidden_sizes: self.model.hidden_sizes.clone(),
            steps: self.train.steps,
            share_params: self.model.share_params,
            beta: self.model.beta,
            eps_var: self.model.eps_var,
            output_mode: OutputMode::Diagonal,
            batch_norm: self.model.batch_norm,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            steps: t.steps,
            schedule: self.schedule(),
            eta0: t.eta0,
            optimizer: match t.optimizer {
                OptimizerName::Adam => OptimizerKind::default(),
                OptimizerName::Sgd => OptimizerKind::Sgd,
            },
            batch_size: t.batch_size,
            epochs: t.epochs,
            objective: t.objective,
            seed: self.seed,
            grad_clip: (t.grad_clip > 0.0).then_some(t.grad_clip),
            valid_k: t.valid_k,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        let e = &self.eval;
        EvalConfig {
            k: e.k,
            parzen: e.parzen,
            parzen_sigma: e.parzen_sigma,
            parzen_samples: e.parzen_samples,
            dequantize: e.dequantize,
            repetitions: e.repetitions,
            batch_size: e.batch_size,
            sample_steps: (e.sample_steps > 0).then_some(e.sample_steps),
        }
    }

    /// Output directory, placed under `$INFUSION_OUT_ROOT` when it is relative
    /// and the variable is set.
    pub fn output_dir(&self) -> PathBuf {
        resolve_out(&self.output.dir)
    }
}

/// `dir` under `$INFUSION_OUT_ROOT` when `dir` is relative and the variable is set.
pub fn resolve_out(dir: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if dir.is_relative() && !root.is_empty() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `section.key=value` (or `key=value` at the top level); the value is read
/// as a TOML value and falls back to a plain string.
fn apply_set(table: &mut toml::Table, set: &str) -> Result<()> {
    let (path, raw) = set.split_once('=').ok_or_else(|| CliError::Config(format!("--set {:?} is not key=value", set)))?;
    let value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let keys: Vec<&str> = path.trim().split('.').collect();
    let mut node = table;
    for k in &keys[..keys.len() - 1] {
        node = match node.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new())) {
            toml::Value::Table(t) => t,
            _ => return Err(CliError::Config(format!("--set {:?}: {} is not a section", set, k))),
        };
    }
    node.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}
