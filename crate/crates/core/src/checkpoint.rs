//! Versioned binary checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! magic      8 bytes  "GRADREP\0"
//! version    u32
//! header     u64 length + UTF-8 JSON {recipe, spec, epoch, step, rule}
//! params     u64 count, then per tensor: 4 × u64 shape, f64 bit patterns
//! batchnorm  u64 count, then per layer: u64 channels, means, variances, eps, momentum
//! optimizer  u8 tag (0 = momentum, 1 = adam)
//!              momentum: u64 count, per buffer u8 present + tensor
//!              adam:     u64 step, u64 count, first-moment tensors, second-moment tensors
//! rng        4 × u64 state, u8 has-spare, f64 spare
//! ```
//!
//! Every float is stored as its exact bit pattern, so `load(save(x)) == x`
//! and resuming continues the interrupted run bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ModelSpec;
use crate::ops::BnState;
use crate::optim::{AdamState, MomentumState, OptimizerState, UpdateRule};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::Trainer;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GRADREP\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub recipe: String,
    pub spec: ModelSpec,
    pub rule: UpdateRule,
    pub epoch: usize,
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<Tensor>,
    pub batchnorm: Vec<BnState>,
    pub optimizer: OptimizerState,
    pub rng: ([u64; 4], Option<f64>),
}

impl Checkpoint {
    pub fn capture(trainer: &Trainer, recipe: &str) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                recipe: recipe.into(),
                spec: trainer.net.spec.clone(),
                rule: trainer.cfg.rule,
                epoch: trainer.epoch,
                step: trainer.step,
            },
            params: trainer.net.graph.param_values().to_vec(),
            batchnorm: trainer.net.graph.bn_states().to_vec(),
            optimizer: trainer.optimizer.state.clone(),
            rng: trainer.data_rng.parts(),
        }
    }

    /// Load this state into a trainer built for the same model.
    pub fn restore(&self, trainer: &mut Trainer) -> Result<()> {
        if self.header.spec != trainer.net.spec {
            return Err(Error::InvalidArgument("checkpoint was written for a different model spec".into()));
        }
        if self.params.len() != trainer.net.graph.param_values().len() || self.batchnorm.len() != trainer.net.graph.bn_states().len() {
            return Err(Error::InvalidArgument("checkpoint parameter layout does not match the model".into()));
        }
        for (i, p) in self.params.iter().enumerate() {
            trainer.net.graph.set_param(crate::ParamId(i), p.clone())?;
        }
        trainer.net.graph.bn_states_mut().clone_from_slice(&self.batchnorm);
        trainer.optimizer.state = self.optimizer.clone();
        trainer.data_rng = Rng::from_parts(self.rng.0, self.rng.1);
        trainer.epoch = self.header.epoch;
        trainer.step = self.header.step;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Vec::new();
        w.extend_from_slice(CHECKPOINT_MAGIC);
        w.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header)?;
        put_u64(&mut w, header.len() as u64);
        w.extend_from_slice(&header);
        put_u64(&mut w, self.params.len() as u64);
        for p in &self.params {
            put_tensor(&mut w, p);
        }
        put_u64(&mut w, self.batchnorm.len() as u64);
        for bn in &self.batchnorm {
            put_u64(&mut w, bn.channels() as u64);
            bn.running_mean.iter().chain(&bn.running_var).for_each(|&v| put_f64(&mut w, v));
            put_f64(&mut w, bn.eps);
            put_f64(&mut w, bn.momentum);
        }
        match &self.optimizer {
            OptimizerState::Momentum(m) => {
                w.push(0);
                put_u64(&mut w, m.buffers.len() as u64);
                for b in &m.buffers {
                    match b {
                        Some(t) => {
                            w.push(1);
                            put_tensor(&mut w, t);
                        }
                        None => w.push(0),
                    }
                }
            }
            OptimizerState::Adam(a) => {
                w.push(1);
                put_u64(&mut w, a.step);
                put_u64(&mut w, a.first.len() as u64);
                a.first.iter().chain(&a.second).for_each(|t| put_tensor(&mut w, t));
            }
        }
        self.rng.0.iter().for_each(|&s| put_u64(&mut w, s));
        w.push(self.rng.1.is_some() as u8);
        put_f64(&mut w, self.rng.1.unwrap_or(0.0));
        Ok(w)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Parse {
                offset: 0,
                reason: "not a checkpoint (bad magic)".into(),
            });
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let hlen = r.len()?;
        let at = r.pos;
        let header: CheckpointHeader = serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Parse {
            offset: at as u64,
            reason: format!("header: {e}"),
        })?;
        let n = r.len()?;
        let params = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        let n = r.len()?;
        let mut batchnorm = Vec::with_capacity(n);
        for _ in 0..n {
            let c = r.len()?;
            let running_mean = (0..c).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let running_var = (0..c).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            batchnorm.push(BnState {
                running_mean,
                running_var,
                eps: r.f64()?,
                momentum: r.f64()?,
            });
        }
        let tag_at = r.pos;
        let optimizer = match r.u8()? {
            0 => {
                let n = r.len()?;
                let mut buffers = Vec::with_capacity(n);
                for _ in 0..n {
                    buffers.push(if r.u8()? == 1 { Some(r.tensor()?) } else { None });
                }
                OptimizerState::Momentum(MomentumState { buffers })
            }
            1 => {
                let step = r.u64()?;
                let n = r.len()?;
                let first = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
                let second = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
                OptimizerState::Adam(AdamState { step, first, second })
            }
            t => {
                return Err(Error::Parse {
                    offset: tag_at as u64,
                    reason: format!("unknown optimizer tag {t}"),
                })
            }
        };
        let mut state = [0u64; 4];
        for s in &mut state {
            *s = r.u64()?;
        }
        let has_spare = r.u8()? == 1;
        let spare = r.f64()?;
        if r.pos != bytes.len() {
            return Err(Error::Parse {
                offset: r.pos as u64,
                reason: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Checkpoint {
            header,
            params,
            batchnorm,
            optimizer,
            rng: (state, has_spare.then_some(spare)),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(w: &mut Vec<u8>, v: f64) {
    w.extend_from_slice(&v.to_bits().to_le_bytes());
}

fn put_tensor(w: &mut Vec<u8>, t: &Tensor) {
    t.shape().iter().for_each(|&d| put_u64(w, d as u64));
    t.data().iter().for_each(|&v| put_f64(w, v));
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos as u64,
                reason: format!("truncated: need {n} more bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// A count or length, bounded by the bytes that remain.
    fn len(&mut self) -> Result<usize> {
        let at = self.pos;
        let v = self.u64()?;
        if v > (self.bytes.len() - self.pos) as u64 {
            return Err(Error::Parse {
                offset: at as u64,
                reason: format!("length {v} exceeds the remaining {} bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(v as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let at = self.pos;
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = self.u64()? as usize;
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = match n {
            Some(n) if n.saturating_mul(8) <= self.bytes.len() - self.pos => n,
            _ => {
                return Err(Error::Parse {
                    offset: at as u64,
                    reason: format!("tensor shape {shape:?} does not fit in the file"),
                })
            }
        };
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::from_vec(shape, data).map_err(|e| Error::Parse {
            offset: at as u64,
            reason: e.to_string(),
        })
    }
}
