use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, NodeId, ParamId};
use crate::init::{fan_in_uniform_with, msra_init_with};
use crate::models::CslaBlockSpec;
use crate::optim::{gr_step, BranchOp, CslaLayout, GradMult, GradMultTable, MomentumState, OptimizerConfig, ScheduleKind};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Settings of one lockstep run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub hw: usize,
    pub num_classes: usize,
    pub stride: usize,
}

impl EquivConfig {
    /// Plain SGD, no momentum, no decay.
    pub fn plain(lr: f64) -> Self {
        EquivConfig {
            lr,
            momentum: 0.0,
            weight_decay: 0.0,
            batch: 4,
            hw: 16,
            num_classes: 10,
            stride: 1,
        }
    }

    /// Momentum 0.9 and weight decay 4e-5.
    pub fn full(lr: f64) -> Self {
        EquivConfig {
            momentum: 0.9,
            weight_decay: 4e-5,
            ..Self::plain(lr)
        }
    }

    fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            base_lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            schedule: ScheduleKind::Constant,
            label_smoothing: 0.0,
            batch_size: self.batch,
            ..OptimizerConfig::default()
        }
    }
}

/// Which rule of the GR counterpart to drop.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Start the single kernel from a fresh MSRA draw instead of the
    /// equivalent kernel.
    pub skip_init: bool,
    /// Train the single kernel without the Grad Mult.
    pub skip_mult: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub block: String,
    pub steps: usize,
    pub seed: u64,
    pub config: EquivConfig,
    pub ablation: Ablation,
    /// Max |Y_CSLA − Y_GR| over the block output and the logits, per step.
    pub output_div: Vec<f64>,
    /// Max |W'(CSLA branches) − W'_GR| per step.
    pub kernel_div: Vec<f64>,
}

impl EquivalenceReport {
    pub fn max_output_div(&self) -> f64 {
        self.output_div.iter().cloned().fold(0.0, f64::max)
    }

    pub fn max_kernel_div(&self) -> f64 {
        self.kernel_div.iter().cloned().fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,output_div,kernel_div\n");
        for (i, (o, k)) in self.output_div.iter().zip(&self.kernel_div).enumerate() {
            out.push_str(&format!("{i},{o:.6e},{k:.6e}\n"));
        }
        out
    }

    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "block": self.block,
            "steps": self.steps,
            "seed": self.seed,
            "config": self.config,
            "ablation": self.ablation,
            "max_output_div": self.max_output_div(),
            "max_kernel_div": self.max_kernel_div(),
        })
    }
}

/// A block followed by BN → ReLU → pool → FC → cross-entropy.
pub(crate) struct Probe {
    pub graph: Graph,
    pub input: NodeId,
    pub block_out: NodeId,
    pub logits: NodeId,
    pub loss: NodeId,
    pub block_params: Vec<ParamId>,
}

fn head(graph: &mut Graph, x: NodeId, c: usize, fc: &(Tensor, Tensor)) -> (NodeId, NodeId) {
    let bn = graph.batchnorm(x, c, "bn");
    let r = graph.relu(bn.output, "relu");
    let p = graph.global_avg_pool(r, "pool");
    let (w, _) = graph.param("fc.weight", fc.0.clone(), true);
    let (b, _) = graph.param("fc.bias", fc.1.clone(), true);
    let logits = graph.linear(p, w, b, "fc");
    let loss = graph.cross_entropy(logits, 0.0, "loss");
    (logits, loss)
}

/// CSLA side: Σ_b scale_b ⊙ op_b(x).
pub(crate) fn csla_probe(layout: &CslaLayout, branches: &[Tensor], stride: usize, fc: &(Tensor, Tensor)) -> Probe {
    let mut graph = Graph::new();
    let input = graph.input("x");
    let mut sum = None;
    let mut block_params = Vec::new();
    for (i, (br, w)) in layout.branches.iter().zip(branches).enumerate() {
        let (w_node, pid) = graph.param(&format!("branch{i}"), w.clone(), true);
        block_params.push(pid);
        let y = match br.op {
            BranchOp::Conv { kernel } => graph.conv2d(input, w_node, stride, kernel / 2, &format!("branch{i}.conv")),
            BranchOp::ChannelScale => graph.channel_scale(input, w_node, &format!("branch{i}.scale")),
        };
        let k = graph.constant(&format!("branch{i}.const"), Tensor::channel_vector(&br.scale));
        let y = graph.channel_scale(y, k, &format!("branch{i}.const_scale"));
        sum = Some(match sum {
            None => y,
            Some(s) => graph.add(s, y, &format!("add{i}")),
        });
    }
    let block_out = sum.expect("a CSLA block has at least one branch");
    let (logits, loss) = head(&mut graph, block_out, layout.c_out, fc);
    Probe {
        graph,
        input,
        block_out,
        logits,
        loss,
        block_params,
    }
}

/// GR side: one conv with the collapsed kernel.
pub(crate) fn single_probe(kernel: Tensor, stride: usize, fc: &(Tensor, Tensor)) -> Probe {
    let mut graph = Graph::new();
    let input = graph.input("x");
    let c = kernel.shape()[0];
    let pad = kernel.shape()[2] / 2;
    let (k_node, pid) = graph.param("kernel", kernel, true);
    let block_out = graph.conv2d(input, k_node, stride, pad, "conv");
    let (logits, loss) = head(&mut graph, block_out, c, fc);
    Probe {
        graph,
        input,
        block_out,
        logits,
        loss,
        block_params: vec![pid],
    }
}

impl Probe {
    pub fn step_forward(&mut self, x: &Tensor, labels: &[usize]) -> Result<()> {
        self.graph.set_input(self.input, x.clone())?;
        self.graph.set_labels(labels.to_vec());
        self.graph.forward()
    }

    pub fn backward(&mut self) -> Result<Gradients> {
        self.graph.backward(self.loss)
    }
}

const BRANCH_STREAM: u64 = 0xB4A2;
const BATCH_STREAM: u64 = 0xBA7C;

/// Initial branch tensors: MSRA for conv branches, ones for channel scales.
pub fn initial_branches(layout: &CslaLayout, rng: &mut Rng) -> Vec<Tensor> {
    (0..layout.branches.len())
        .map(|b| match layout.branches[b].op {
            BranchOp::Conv { .. } => msra_init_with(layout.branch_shape(b), rng),
            BranchOp::ChannelScale => Tensor::filled(layout.branch_shape(b), 1.0),
        })
        .collect()
}

fn random_batch(cfg: &EquivConfig, c_in: usize, rng: &mut Rng) -> (Tensor, Vec<usize>) {
    let x = Tensor::from_fn([cfg.batch, c_in, cfg.hw, cfg.hw], |_| rng.gaussian());
    let y = (0..cfg.batch).map(|_| rng.below(cfg.num_classes)).collect();
    (x, y)
}

/// Step a CSLA block (plain SGD) and its single-conv GR counterpart in
/// lockstep on one shared stream of random batches.
pub fn verify_layout(layout: &CslaLayout, steps: usize, cfg: &EquivConfig, seed: u64, ablation: Ablation) -> Result<EquivalenceReport> {
    if cfg.stride != 1 && layout.branches.iter().any(|b| b.op == BranchOp::ChannelScale) {
        return Err(Error::InvalidArgument("a block with a channel-scaling branch must have stride 1".into()));
    }
    let mut init_rng = Rng::stream(seed, BRANCH_STREAM);
    let branches = initial_branches(layout, &mut init_rng);
    let fc = (
        fan_in_uniform_with([cfg.num_classes, layout.c_out, 1, 1], &mut init_rng),
        Tensor::zeros([1, cfg.num_classes, 1, 1]),
    );
    let gr_kernel = if ablation.skip_init {
        msra_init_with(layout.kernel_shape(), &mut init_rng)
    } else {
        let refs: Vec<&Tensor> = branches.iter().collect();
        layout.equivalent_kernel(&refs)?
    };
    let mut csla = csla_probe(layout, &branches, cfg.stride, &fc);
    let mut gr = single_probe(gr_kernel, cfg.stride, &fc);

    let opt = cfg.optimizer();
    let csla_table = GradMultTable::new(csla.graph.param_values().len());
    let mut gr_table = GradMultTable::new(gr.graph.param_values().len());
    if !ablation.skip_mult {
        gr_table.set(gr.block_params[0], GradMult::Tensor(layout.grad_mult()));
    }
    let mut csla_state = MomentumState::new(csla.graph.param_values());
    let mut gr_state = MomentumState::new(gr.graph.param_values());

    let mut data = Rng::stream(seed, BATCH_STREAM);
    let mut output_div = Vec::with_capacity(steps);
    let mut kernel_div = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (x, y) = random_batch(cfg, layout.c_in, &mut data);
        csla.step_forward(&x, &y)?;
        gr.step_forward(&x, &y)?;
        let d_block = csla.graph.value(csla.block_out)?.max_abs_diff(gr.graph.value(gr.block_out)?)?;
        let d_logits = csla.graph.value(csla.logits)?.max_abs_diff(gr.graph.value(gr.logits)?)?;
        output_div.push(d_block.max(d_logits));
        let current: Vec<&Tensor> = csla.block_params.iter().map(|&p| csla.graph.param_value(p)).collect();
        let collapsed = layout.equivalent_kernel(&current)?;
        kernel_div.push(collapsed.max_abs_diff(gr.graph.param_value(gr.block_params[0]))?);

        let g_csla = csla.backward()?;
        let g_gr = gr.backward()?;
        gr_step(csla.graph.param_values_mut(), &g_csla, &csla_table, &mut csla_state, &opt, cfg.lr)?;
        gr_step(gr.graph.param_values_mut(), &g_gr, &gr_table, &mut gr_state, &opt, cfg.lr)?;
    }
    Ok(EquivalenceReport {
        block: describe(layout),
        steps,
        seed,
        config: cfg.clone(),
        ablation,
        output_div,
        kernel_div,
    })
}

fn describe(layout: &CslaLayout) -> String {
    let parts: Vec<String> = layout
        .branches
        .iter()
        .map(|b| match b.op {
            BranchOp::Conv { kernel } => format!("conv{kernel}x{kernel}"),
            BranchOp::ChannelScale => "channel_scale".into(),
        })
        .collect();
    format!("{}->{} k{} [{}]", layout.c_in, layout.c_out, layout.kernel, parts.join(" + "))
}

/// RepOpt-VGG block version of [`verify_layout`].
pub fn verify_csla_gr(block: &CslaBlockSpec, steps: usize, cfg: &EquivConfig, seed: u64) -> Result<EquivalenceReport> {
    let cfg = EquivConfig {
        stride: block.stride,
        ..cfg.clone()
    };
    verify_layout(&CslaLayout::repopt(block), steps, &cfg, seed, Ablation::default())
}

/// Chain-rule check of a layout's Grad Mult: the per-branch autodiff
/// gradients of the CSLA forward, collapsed onto the kernel, against
/// `M ⊙ dL/dW'` of the single conv at the equivalent kernel. Returns the
/// largest absolute difference.
pub fn grad_mult_chain_rule_gap(layout: &CslaLayout, cfg: &EquivConfig, seed: u64) -> Result<f64> {
    let mut rng = Rng::stream(seed, BRANCH_STREAM);
    let mut branches = initial_branches(layout, &mut rng);
    for (b, t) in branches.iter_mut().enumerate() {
        if layout.branches[b].op == BranchOp::ChannelScale {
            *t = Tensor::from_fn(t.shape(), |_| rng.uniform_range(0.5, 1.5));
        }
    }
    let fc = (
        fan_in_uniform_with([cfg.num_classes, layout.c_out, 1, 1], &mut rng),
        Tensor::zeros([1, cfg.num_classes, 1, 1]),
    );
    let refs: Vec<&Tensor> = branches.iter().collect();
    let kernel = layout.equivalent_kernel(&refs)?;
    let mut csla = csla_probe(layout, &branches, cfg.stride, &fc);
    let mut single = single_probe(kernel, cfg.stride, &fc);
    let (x, y) = random_batch(cfg, layout.c_in, &mut Rng::stream(seed, BATCH_STREAM));
    csla.step_forward(&x, &y)?;
    single.step_forward(&x, &y)?;
    let gc = csla.backward()?;
    let gs = single.backward()?;
    let branch_grads: Vec<&Tensor> = csla.block_params.iter().map(|&p| gc.get(p).expect("trainable")).collect();
    let combined = layout.combine_branch_grads(&branch_grads)?;
    let g = gs.get(single.block_params[0]).expect("trainable");
    let predicted = g.zip_map(&layout.grad_mult(), |g, m| g * m)?;
    combined.max_abs_diff(&predicted)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(c: usize, seed: u64) -> CslaBlockSpec {
        let mut rng = Rng::new(seed);
        let s = (0..c).map(|_| rng.uniform_range(0.2, 1.5)).collect();
        let t = (0..c).map(|_| rng.uniform_range(0.0, 1.0)).collect();
        CslaBlockSpec::new(c, c, 1, s, t).unwrap()
    }

    #[test]
    fn scalar_two_branch_stays_equivalent() {
        let layout = CslaLayout::two_branch_scalar(3, 4, 3, 0.8, 0.6);
        let r = verify_layout(&layout, 20, &EquivConfig::plain(0.1), 1, Ablation::default()).unwrap();
        assert_eq!(r.output_div.len(), 20);
        assert!(r.max_output_div() < 1e-10, "{}", r.max_output_div());
        assert!(r.max_kernel_div() < 1e-10, "{}", r.max_kernel_div());
    }

    #[test]
    fn repopt_block_with_momentum_and_decay() {
        let r = verify_csla_gr(&block(4, 2), 20, &EquivConfig::full(0.05), 3).unwrap();
        assert!(r.max_output_div() < 1e-8, "{}", r.max_output_div());
        assert!(r.max_kernel_div() < 1e-10, "{}", r.max_kernel_div());
    }

    #[test]
    fn stride_two_block_without_identity() {
        let mut rng = Rng::new(5);
        let s = (0..6).map(|_| rng.uniform_range(0.2, 1.5)).collect();
        let t = (0..6).map(|_| rng.uniform_range(0.0, 1.0)).collect();
        let b = CslaBlockSpec::new(3, 6, 2, s, t).unwrap();
        assert!(!b.has_identity);
        let r = verify_csla_gr(&b, 10, &EquivConfig::full(0.05), 4).unwrap();
        assert!(r.max_output_div() < 1e-8);
    }

    #[test]
    fn ablations_break_equivalence() {
        let layout = CslaLayout::repopt(&block(4, 6));
        let cfg = EquivConfig::full(0.1);
        for ab in [
            Ablation { skip_init: true, skip_mult: false },
            Ablation { skip_init: false, skip_mult: true },
        ] {
            let r = verify_layout(&layout, 11, &cfg, 7, ab).unwrap();
            assert!(r.output_div[10] > 1e-3, "{ab:?}: {}", r.output_div[10]);
        }
    }

    #[test]
    fn chain_rule_matches_grad_mult() {
        let cfg = EquivConfig::plain(0.1);
        for seed in 0..3 {
            let gap = grad_mult_chain_rule_gap(&CslaLayout::repopt(&block(4, seed)), &cfg, seed).unwrap();
            assert!(gap < 1e-10, "{gap}");
        }
    }

    #[test]
    fn ghost_block_is_equivalent() {
        let a = vec![0.9, 1.1, 0.7, 1.3];
        let b = vec![0.5, 0.2, 0.8, 0.4];
        let layout = CslaLayout::ghost(4, &a, &b).unwrap();
        let r = verify_layout(&layout, 30, &EquivConfig::full(0.05), 8, Ablation::default()).unwrap();
        assert!(r.max_output_div() < 1e-8, "{}", r.max_output_div());
    }
}
