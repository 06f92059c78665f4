use crate::error::{Error, Result};
use crate::graph::{Gradients, ParamId};
use crate::tensor::Tensor;

use super::OptimizerConfig;

/// Constant multiplier applied elementwise to a parameter's gradient.
#[derive(Clone, Debug, PartialEq)]
pub enum GradMult {
    Scalar(f64),
    Tensor(Tensor),
}

impl GradMult {
    pub fn apply(&self, grad: &Tensor) -> Result<Tensor> {
        match self {
            GradMult::Scalar(k) => Ok(grad.scale(*k)),
            GradMult::Tensor(m) => grad.zip_map(m, |g, m| g * m),
        }
    }
}

/// Which parameters the optimizer re-parameterizes, and with what.
#[derive(Clone, Debug, Default)]
pub struct GradMultTable {
    managed: Vec<bool>,
    mults: Vec<Option<GradMult>>,
}

impl GradMultTable {
    pub fn new(num_params: usize) -> Self {
        GradMultTable {
            managed: vec![false; num_params],
            mults: vec![None; num_params],
        }
    }

    /// Declare `id` as GR-managed; a step fails until a multiplier is set.
    pub fn manage(&mut self, id: ParamId) {
        self.managed[id.0] = true;
    }

    pub fn set(&mut self, id: ParamId, mult: GradMult) {
        self.managed[id.0] = true;
        self.mults[id.0] = Some(mult);
    }

    pub fn get(&self, id: ParamId) -> Option<&GradMult> {
        self.mults.get(id.0).and_then(|m| m.as_ref())
    }

    pub fn is_managed(&self, id: ParamId) -> bool {
        self.managed.get(id.0).copied().unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.managed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.managed.is_empty()
    }

    fn check(&self, num_params: usize) -> Result<()> {
        if self.managed.len() != num_params {
            return Err(Error::InvalidArgument(format!(
                "multiplier table covers {} parameters, model has {num_params}",
                self.managed.len()
            )));
        }
        if let Some(i) = (0..num_params).find(|&i| self.managed[i] && self.mults[i].is_none()) {
            return Err(Error::Usage(format!("parameter #{i} is GR-managed but has no Grad Mult")));
        }
        Ok(())
    }

    /// M ⊙ g for managed parameters, g unchanged otherwise.
    fn multiplied(&self, idx: usize, grad: &Tensor) -> Result<Tensor> {
        match &self.mults[idx] {
            Some(m) => m.apply(grad),
            None => Ok(grad.clone()),
        }
    }
}

/// One momentum buffer per trainable parameter, zero-initialized.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumState {
    pub buffers: Vec<Option<Tensor>>,
}

impl MomentumState {
    pub fn new(params: &[Tensor]) -> Self {
        MomentumState {
            buffers: params.iter().map(|p| Some(Tensor::zeros(p.shape()))).collect(),
        }
    }
}

/// One SGD step with gradient re-parameterization:
///
/// ```text
/// g ← M ⊙ ∇L          (all-ones M for plain parameters)
/// g ← g + wd · θ
/// v ← momentum · v + g
/// θ ← θ − lr · v
/// ```
///
/// The multiplier is applied to the loss gradient only. Decay added after
/// the mask equals the α-weighted sum of per-branch L2 terms of the CSLA
/// block (Σ_b s_b·(wd·W_b) = wd·W'), so the momentum buffer of W' stays the
/// α-combination of the branch buffers.
pub fn gr_step(
    params: &mut [Tensor],
    grads: &Gradients,
    mults: &GradMultTable,
    state: &mut MomentumState,
    cfg: &OptimizerConfig,
    lr: f64,
) -> Result<()> {
    mults.check(params.len())?;
    if state.buffers.len() != params.len() || grads.per_param.len() != params.len() {
        return Err(Error::InvalidArgument("optimizer state does not match the parameter list".into()));
    }
    for (idx, param) in params.iter_mut().enumerate() {
        let Some(grad) = &grads.per_param[idx] else {
            continue;
        };
        let mut g = mults.multiplied(idx, grad)?;
        if cfg.weight_decay != 0.0 {
            g.axpy(cfg.weight_decay, param)?;
        }
        let buf = state.buffers[idx].get_or_insert_with(|| Tensor::zeros(param.shape()));
        buf.check_same_shape("momentum buffer", param)?;
        for ((v, &gv), p) in buf.data_mut().iter_mut().zip(g.data()).zip(param.data_mut().iter_mut()) {
            *v = cfg.momentum * *v + gv;
            *p -= lr * *v;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            step: 0,
            first: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// AdamW with the same multiplier hook (M ⊙ ∇L feeds the moments). Carries
/// no equivalence guarantee.
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &Gradients,
    mults: &GradMultTable,
    state: &mut AdamState,
    cfg: &OptimizerConfig,
    lr: f64,
) -> Result<()> {
    mults.check(params.len())?;
    state.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    for (idx, param) in params.iter_mut().enumerate() {
        let Some(grad) = &grads.per_param[idx] else {
            continue;
        };
        let g = mults.multiplied(idx, grad)?;
        let m = &mut state.first[idx];
        let v = &mut state.second[idx];
        for (((p, &gv), mv), vv) in param
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
            *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
            let update = (*mv / bc1) / ((*vv / bc2).sqrt() + ADAM_EPS);
            *p -= lr * (update + cfg.weight_decay * *p);
        }
    }
    Ok(())
}
