//! Versioned binary checkpoints.
//!
//! Layout (little-endian): the 8 magic bytes `INFCKPT\0`, a `u32` format
//! version, a `u32` length followed by a UTF-8 TOML header (run and operator
//! configuration, best epoch), then the prior, every parameter tensor and the
//! per-step normalization statistics as raw `f64` values. Floats are stored by
//! bit pattern, so a save/load round trip is exact.

use std::fs;
use std::path::Path;

use infusion_core::model::NormStats;
use infusion_core::rng;
use infusion_core::{FactorialGaussian, OperatorConfig, Tensor, TransitionOperator};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{io_err, CliError, Result};

pub const MAGIC: &[u8; 8] = b"INFCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    best_epoch: Option<usize>,
    run: RunConfig,
    operator: OperatorConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub run: RunConfig,
    pub operator: OperatorConfig,
    pub best_epoch: Option<usize>,
    pub prior: FactorialGaussian,
    /// `(name, value)` in parameter-store order.
    pub params: Vec<(String, Tensor)>,
    pub norm_stats: Vec<Vec<NormStats>>,
}

impl Checkpoint {
    pub fn new(run: &RunConfig, op: &TransitionOperator, prior: &FactorialGaussian, best_epoch: Option<usize>) -> Self {
        Self {
            run: run.clone(),
            operator: op.config().clone(),
            best_epoch,
            prior: prior.clone(),
            params: op.param_store().iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
            norm_stats: op.norm_stats(),
        }
    }

    /// Rebuilds the operator; names and shapes must match the configuration.
    pub fn operator(&self) -> Result<TransitionOperator> {
        let mut op = TransitionOperator::new(self.operator.clone(), &mut rng::stream(0, &[]))?;
        let ids: Vec<_> = op.param_store().iter().map(|(id, p)| (id, p.name.clone(), p.value.shape().to_vec())).collect();
        if ids.len() != self.params.len() {
            return Err(CliError::Format(format!("checkpoint has {} parameters, operator needs {}", self.params.len(), ids.len())));
        }
        for ((id, name, shape), (cname, value)) in ids.into_iter().zip(&self.params) {
            if &name != cname || shape.as_slice() != value.shape() {
                return Err(CliError::Format(format!("checkpoint parameter {} {:?} does not fit {} {:?}", cname, value.shape(), name, shape)));
            }
            *op.param_store_mut().value_mut(id) = value.clone();
        }
        op.set_norm_stats(self.norm_stats.clone())?;
        Ok(op)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = Header { best_epoch: self.best_epoch, run: self.run.clone(), operator: self.operator.clone() };
        let text = toml::to_string(&header).map_err(|e| CliError::Format(format!("checkpoint header: {}", e)))?;
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u32(&mut w, VERSION);
        put_u32(&mut w, text.len() as u32);
        w.extend_from_slice(text.as_bytes());
        put_f64s(&mut w, &self.prior.mean);
        put_f64s(&mut w, &self.prior.var);
        put_u64(&mut w, self.params.len() as u64);
        for (name, value) in &self.params {
            put_u64(&mut w, name.len() as u64);
            w.extend_from_slice(name.as_bytes());
            put_u64(&mut w, value.shape().len() as u64);
            for &d in value.shape() {
                put_u64(&mut w, d as u64);
            }
            put_f64s(&mut w, value.data());
        }
        put_u64(&mut w, self.norm_stats.len() as u64);
        for step in &self.norm_stats {
            put_u64(&mut w, step.len() as u64);
            for s in step {
                put_u64(&mut w, s.count);
                w.push(s.finalized as u8);
                put_f64s(&mut w, &s.mean);
                put_f64s(&mut w, &s.var);
            }
        }
        Ok(w)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CliError::Format("not a checkpoint (bad magic)".to_string()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CliError::Format(format!("checkpoint version {} (supported: {})", version, VERSION)));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|e| CliError::Format(format!("checkpoint header: {}", e)))?;
        let header: Header = toml::from_str(text).map_err(|e| CliError::Format(format!("checkpoint header: {}", e)))?;
        let prior = FactorialGaussian::new(r.f64s()?, r.f64s()?)?;
        let mut params = Vec::new();
        for _ in 0..r.count()? {
            let n = r.count()?;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|e| CliError::Format(e.to_string()))?;
            let shape = (0..r.count()?).map(|_| r.count()).collect::<Result<Vec<_>>>()?;
            params.push((name, Tensor::new(shape, r.f64s()?)?));
        }
        let mut norm_stats = Vec::new();
        for _ in 0..r.count()? {
            let mut step = Vec::new();
            for _ in 0..r.count()? {
                let count = r.u64()?;
                let finalized = r.take(1)?[0] != 0;
                step.push(NormStats { count, mean: r.f64s()?, var: r.f64s()?, finalized });
            }
            norm_stats.push(step);
        }
        if r.pos != bytes.len() {
            return Err(CliError::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
        }
        Ok(Self { run: header.run, operator: header.operator, best_epoch: header.best_epoch, prior, params, norm_stats })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
        Self::decode(&bytes).map_err(|e| CliError::Format(format!("{}: {}", path.display(), e)))
    }
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(w: &mut Vec<u8>, v: &[f64]) {
    put_u64(w, v.len() as u64);
    for x in v {
        w.extend_from_slice(&x.to_bits().to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CliError::Format("truncated checkpoint".to_string()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// A length that must fit in the remaining bytes.
    fn count(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > (self.bytes.len() - self.pos) as u64 {
            return Err(CliError::Format("truncated checkpoint".to_string()));
        }
        Ok(n as usize)
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.count()?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| CliError::Format("truncated checkpoint".to_string()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes")))).collect())
    }
}
