//! The RepOptimizer: SGD (or AdamW) whose gradients are multiplied by
//! constant model-specific Grad Mults before the update.

mod gradmult;
mod schedule;
mod step;

pub use gradmult::*;
pub use schedule::*;
pub use step::*;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub schedule: ScheduleKind,
    pub label_smoothing: f64,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    /// ImageNet recipe: lr 0.1, momentum 0.9, wd 4e-5, 5 warm-up epochs of
    /// 120, cosine, label smoothing 0.1, batch 256.
    fn default() -> Self {
        OptimizerConfig {
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 4e-5,
            warmup_epochs: 5,
            total_epochs: 120,
            schedule: ScheduleKind::Cosine,
            label_smoothing: 0.1,
            batch_size: 256,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay must be non-negative, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 || self.total_epochs == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label smoothing must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    Sgd,
    AdamW,
}

#[derive(Clone, Debug, PartialEq)]
pub enum OptimizerState {
    Momentum(MomentumState),
    Adam(AdamState),
}

/// Update rule + multiplier table + per-parameter state for one model.
#[derive(Clone, Debug)]
pub struct RepOptimizer {
    pub cfg: OptimizerConfig,
    pub mults: GradMultTable,
    pub state: OptimizerState,
}

impl RepOptimizer {
    pub fn new(cfg: OptimizerConfig, rule: UpdateRule, mults: GradMultTable, graph: &Graph) -> Self {
        let state = match rule {
            UpdateRule::Sgd => OptimizerState::Momentum(MomentumState::new(graph.param_values())),
            UpdateRule::AdamW => OptimizerState::Adam(AdamState::new(graph.param_values())),
        };
        RepOptimizer { cfg, mults, state }
    }

    /// Plain optimizer: no managed parameters.
    pub fn plain(cfg: OptimizerConfig, rule: UpdateRule, graph: &Graph) -> Self {
        let table = GradMultTable::new(graph.param_values().len());
        Self::new(cfg, rule, table, graph)
    }

    pub fn step(&mut self, graph: &mut Graph, grads: &Gradients, lr: f64) -> Result<()> {
        let params = graph.param_values_mut();
        match &mut self.state {
            OptimizerState::Momentum(st) => gr_step(params, grads, &self.mults, st, &self.cfg, lr),
            OptimizerState::Adam(st) => adamw_step(params, grads, &self.mults, st, &self.cfg, lr),
        }
    }
}
