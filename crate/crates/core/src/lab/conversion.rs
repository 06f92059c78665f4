use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BatchNormHandle, Graph, Mode};
use crate::models::{build_deploy, build_deploy_block, BlockHandles, ModelKind, Network};
use crate::ops::BnState;
use crate::optim::{gr_step, GradMultTable, MomentumState, OptimizerConfig, ScheduleKind};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// A conv kernel with a per-output-channel bias.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedConv {
    pub kernel: Tensor,
    pub bias: Vec<f64>,
}

/// Fold an eval-mode batch norm into the conv before it:
/// `k'[o] = γ_o/√(σ²_o+ε) · k[o]`, `b'_o = β_o + (b_o − μ_o)·γ_o/√(σ²_o+ε)`.
pub fn fuse_bn(kernel: &Tensor, bias: Option<&[f64]>, gamma: &[f64], beta: &[f64], bn: &BnState) -> Result<FusedConv> {
    let c = kernel.shape()[0];
    if gamma.len() != c || beta.len() != c || bn.channels() != c || bias.is_some_and(|b| b.len() != c) {
        return Err(Error::shape("fuse_bn", &[c], &[gamma.len(), beta.len(), bn.channels()]));
    }
    let per = kernel.len() / c;
    let mut k = kernel.clone();
    let mut b = Vec::with_capacity(c);
    for o in 0..c {
        let scale = gamma[o] / (bn.running_var[o] + bn.eps).sqrt();
        k.data_mut()[o * per..(o + 1) * per].iter_mut().for_each(|v| *v *= scale);
        let b0 = bias.map_or(0.0, |b| b[o]);
        b.push(beta[o] + (b0 - bn.running_mean[o]) * scale);
    }
    Ok(FusedConv { kernel: k, bias: b })
}

fn fuse_handle(graph: &Graph, kernel: &Tensor, bn: &BatchNormHandle) -> Result<FusedConv> {
    fuse_bn(
        kernel,
        None,
        graph.param_value(bn.gamma).data(),
        graph.param_value(bn.beta).data(),
        graph.bn_state(bn.state),
    )
}

/// Zero-pad a k×k kernel to the centered 3×3.
pub fn pad_to_3x3(kernel: &Tensor) -> Result<Tensor> {
    let [o, i, kh, kw] = kernel.shape();
    if kh != kw || kh > 3 || kh % 2 == 0 {
        return Err(Error::shape("pad to 3x3", &[1, 1], &[kh, kw]));
    }
    let off = (3 - kh) / 2;
    Ok(Tensor::from_fn([o, i, 3, 3], |[a, b, p, q]| {
        if (off..off + kh).contains(&p) && (off..off + kw).contains(&q) {
            kernel.at([a, b, p - off, q - off])
        } else {
            0.0
        }
    }))
}

/// The 3×3 kernel of the identity map on `c` channels.
pub fn dirac_3x3(c: usize) -> Tensor {
    Tensor::from_fn([c, c, 3, 3], |[o, i, p, q]| if o == i && p == 1 && q == 1 { 1.0 } else { 0.0 })
}

fn sum_fused(parts: Vec<FusedConv>) -> Result<FusedConv> {
    let mut it = parts.into_iter();
    let mut acc = it.next().ok_or_else(|| Error::InvalidArgument("nothing to merge".into()))?;
    for p in it {
        acc.kernel.axpy(1.0, &p.kernel)?;
        acc.bias.iter_mut().zip(&p.bias).for_each(|(a, b)| *a += b);
    }
    Ok(acc)
}

/// Merge a RepVGG block (3×3+BN, 1×1+BN, optional identity BN) into one
/// 3×3 conv with bias.
pub fn convert_repvgg_block(graph: &Graph, block: &BlockHandles) -> Result<FusedConv> {
    let name = format!("block{}", block.geometry.index);
    let missing = |what: &str| Error::layer(&name, format!("not a RepVGG block: no {what}"));
    let bn3 = block.bn_3x3.ok_or_else(|| missing("3x3 batch norm"))?;
    let bn1 = block.bn_1x1.ok_or_else(|| missing("1x1 batch norm"))?;
    let k1 = block.kernel_1x1.ok_or_else(|| missing("1x1 kernel"))?;
    let mut parts = vec![
        fuse_handle(graph, graph.param_value(block.kernel), &bn3)?,
        fuse_handle(graph, &pad_to_3x3(graph.param_value(k1))?, &bn1)?,
    ];
    if let Some(bn) = block.bn_identity {
        parts.push(fuse_handle(graph, &dirac_3x3(block.geometry.c_out), &bn)?);
    }
    sum_fused(parts)
}

/// conv → BN of a plain (target-family) block.
pub fn convert_plain_block(graph: &Graph, block: &BlockHandles) -> Result<FusedConv> {
    let bn = block
        .post_bn
        .ok_or_else(|| Error::layer(format!("block{}", block.geometry.index), "no batch norm to fuse"))?;
    fuse_handle(graph, graph.param_value(block.kernel), &bn)
}

/// Inference form (conv + bias → ReLU per layer) of a trained target or
/// RepVGG network.
pub fn convert_to_deploy(net: &Network) -> Result<Network> {
    let convert = |b: &BlockHandles| match net.kind {
        ModelKind::RepVgg => convert_repvgg_block(&net.graph, b),
        ModelKind::Target | ModelKind::Deploy if b.bias.is_some() => Ok(FusedConv {
            kernel: net.graph.param_value(b.kernel).clone(),
            bias: net.graph.param_value(b.bias.unwrap()).data().to_vec(),
        }),
        ModelKind::Target => convert_plain_block(&net.graph, b),
        other => Err(Error::InvalidArgument(format!("cannot convert a {other:?} network; train it as a plain model first"))),
    };
    let fc = (
        net.graph.param_value(net.fc_weight).clone(),
        net.graph.param_value(net.fc_bias).clone(),
    );
    if net.is_single_block() {
        let f = convert(&net.blocks[0])?;
        return build_deploy_block(net.blocks[0].geometry.stride, f.kernel, f.bias, fc);
    }
    let stem = convert(&net.stem)?;
    let blocks = net
        .blocks
        .iter()
        .map(|b| convert(b).map(|f| (f.kernel, f.bias)))
        .collect::<Result<Vec<_>>>()?;
    build_deploy(&net.spec, (stem.kernel, stem.bias), blocks, fc)
}

/// Give every batch norm of `graph` random affine parameters and running
/// statistics (γ, β ~ U(−1, 1)·spread around 1 / 0; μ ~ N(0, 0.5); σ² ~ U(0.5, 2)).
pub fn randomize_batchnorms(graph: &mut Graph, handles: &[BatchNormHandle], spread: f64, rng: &mut Rng) -> Result<()> {
    for h in handles {
        let c = graph.bn_state(h.state).channels();
        let gamma: Vec<f64> = (0..c).map(|_| 1.0 + spread * rng.uniform_range(-1.0, 1.0)).collect();
        let beta: Vec<f64> = (0..c).map(|_| spread * rng.uniform_range(-1.0, 1.0)).collect();
        graph.set_param(h.gamma, Tensor::channel_vector(&gamma))?;
        graph.set_param(h.beta, Tensor::channel_vector(&beta))?;
        let st = graph.bn_state_mut(h.state);
        for o in 0..c {
            st.running_mean[o] = rng.normal(0.0, 0.5);
            st.running_var[o] = rng.uniform_range(0.5, 2.0);
        }
    }
    Ok(())
}

/// All batch norms of a block.
pub fn block_batchnorms(b: &BlockHandles) -> Vec<BatchNormHandle> {
    [b.bn_3x3, b.bn_1x1, b.bn_identity, b.post_bn, b.bn_b].into_iter().flatten().collect()
}

/// Eval-mode outputs of a multi-branch block and of its conversion, then
/// the same two trained side by side with plain SGD on identical batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingDivergence {
    /// Eval-mode logit gap before any training step.
    pub initial_gap: f64,
    /// Eval-mode logit gap on a fixed probe batch after each step.
    pub per_step: Vec<f64>,
}

impl TrainingDivergence {
    /// First step (1-based) whose gap exceeds `threshold`.
    pub fn first_divergent_step(&self, threshold: f64) -> Option<usize> {
        self.per_step.iter().position(|&d| d > threshold).map(|i| i + 1)
    }
}

/// Train a single-block RepVGG network and its converted single-conv form
/// with the same plain SGD and the same batches. Inference equivalence
/// does not survive: the gap opens as soon as the two are trained.
pub fn conversion_training_divergence(repvgg: &Network, steps: usize, lr: f64, batch: usize, seed: u64) -> Result<TrainingDivergence> {
    let mut multi = repvgg.clone();
    let mut single = convert_to_deploy(repvgg)?;
    let c_in = repvgg.spec.in_channels;
    let hw = repvgg.spec.input_hw;
    let classes = repvgg.spec.num_classes;
    let mut rng = Rng::stream(seed, 0xD1F);
    let probe = Tensor::from_fn([batch, c_in, hw, hw], |_| rng.gaussian());
    let probe_labels = vec![0; batch];

    let eval_gap = |multi: &mut Network, single: &mut Network| -> Result<f64> {
        multi.set_mode(Mode::Eval);
        single.set_mode(Mode::Eval);
        let a = multi.forward(probe.clone(), probe_labels.clone())?.clone();
        let b = single.forward(probe.clone(), probe_labels.clone())?.clone();
        multi.set_mode(Mode::Train);
        single.set_mode(Mode::Train);
        a.max_abs_diff(&b)
    };
    let initial_gap = eval_gap(&mut multi, &mut single)?;

    let opt = OptimizerConfig {
        base_lr: lr,
        momentum: 0.0,
        weight_decay: 0.0,
        schedule: ScheduleKind::Constant,
        ..OptimizerConfig::default()
    };
    let tm = GradMultTable::new(multi.graph.param_values().len());
    let ts = GradMultTable::new(single.graph.param_values().len());
    let mut sm = MomentumState::new(multi.graph.param_values());
    let mut ss = MomentumState::new(single.graph.param_values());
    let mut per_step = Vec::with_capacity(steps);
    for _ in 0..steps {
        let x = Tensor::from_fn([batch, c_in, hw, hw], |_| rng.gaussian());
        let y: Vec<usize> = (0..batch).map(|_| rng.below(classes)).collect();
        multi.forward(x.clone(), y.clone())?;
        single.forward(x, y)?;
        let gm = multi.graph.backward(multi.loss)?;
        let gs = single.graph.backward(single.loss)?;
        gr_step(multi.graph.param_values_mut(), &gm, &tm, &mut sm, &opt, lr)?;
        gr_step(single.graph.param_values_mut(), &gs, &ts, &mut ss, &opt, lr)?;
        per_step.push(eval_gap(&mut multi, &mut single)?);
    }
    Ok(TrainingDivergence { initial_gap, per_step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_repvgg_block;
    use crate::ops::{batchnorm_forward, conv2d};

    fn random(shape: [usize; 4], rng: &mut Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gaussian())
    }

    #[test]
    fn identity_bn_leaves_kernel_unchanged() {
        let mut rng = Rng::new(1);
        let k = random([3, 2, 3, 3], &mut rng);
        let mut bn = BnState::new(3);
        bn.running_var = vec![1.0 - bn.eps; 3];
        let f = fuse_bn(&k, None, &[1.0; 3], &[0.0; 3], &bn).unwrap();
        assert_eq!(f.kernel, k);
        assert_eq!(f.bias, vec![0.0; 3]);
    }

    #[test]
    fn zero_gamma_gives_zero_kernel_and_beta_bias() {
        let mut rng = Rng::new(2);
        let k = random([2, 2, 3, 3], &mut rng);
        let mut bn = BnState::new(2);
        bn.running_mean = vec![0.3, -0.2];
        let f = fuse_bn(&k, None, &[0.0, 0.0], &[0.5, -1.5], &bn).unwrap();
        assert!(f.kernel.data().iter().all(|&v| v == 0.0));
        assert_eq!(f.bias, vec![0.5, -1.5]);
    }

    #[test]
    fn fused_conv_matches_conv_then_eval_bn() {
        let mut rng = Rng::new(3);
        for _ in 0..5 {
            let k = random([4, 3, 3, 3], &mut rng);
            let x = random([2, 3, 6, 6], &mut rng);
            let mut bn = BnState::new(4);
            bn.running_mean = (0..4).map(|_| rng.gaussian()).collect();
            bn.running_var = (0..4).map(|_| rng.uniform_range(0.2, 3.0)).collect();
            let gamma: Vec<f64> = (0..4).map(|_| rng.gaussian()).collect();
            let beta: Vec<f64> = (0..4).map(|_| rng.gaussian()).collect();
            let y = conv2d(&x, &k, 1, 1).unwrap();
            let (want, _) = batchnorm_forward(&y, &Tensor::channel_vector(&gamma), &Tensor::channel_vector(&beta), &mut bn.clone(), false).unwrap();
            let f = fuse_bn(&k, None, &gamma, &beta, &bn).unwrap();
            let got = crate::ops::add_channel_bias(&conv2d(&x, &f.kernel, 1, 1).unwrap(), &Tensor::channel_vector(&f.bias)).unwrap();
            assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
        }
    }

    fn randomized_block(c_in: usize, c_out: usize, stride: usize, seed: u64) -> Network {
        let mut net = build_repvgg_block(c_in, c_out, stride, 5, seed);
        let bns = block_batchnorms(&net.blocks[0]);
        randomize_batchnorms(&mut net.graph, &bns, 0.5, &mut Rng::new(seed + 100)).unwrap();
        net
    }

    #[test]
    fn converted_block_matches_in_eval_mode() {
        for (c_in, c_out, stride) in [(4, 4, 1), (3, 6, 2)] {
            let mut net = randomized_block(c_in, c_out, stride, 9);
            assert_eq!(net.blocks[0].bn_identity.is_some(), stride == 1 && c_in == c_out);
            let mut deploy = convert_to_deploy(&net).unwrap();
            net.set_mode(Mode::Eval);
            deploy.set_mode(Mode::Eval);
            let mut rng = Rng::new(4);
            for _ in 0..5 {
                let x = random([2, c_in, 8, 8], &mut rng);
                let a = net.forward(x.clone(), vec![0, 0]).unwrap().clone();
                let b = deploy.forward(x, vec![0, 0]).unwrap().clone();
                assert!(a.max_abs_diff(&b).unwrap() < 1e-10);
            }
        }
    }

    #[test]
    fn zeroed_side_branches_leave_the_fused_3x3() {
        let mut net = randomized_block(4, 4, 1, 11);
        let b = net.blocks[0].clone();
        net.graph.set_param(b.kernel_1x1.unwrap(), Tensor::zeros([4, 4, 1, 1])).unwrap();
        let id = b.bn_identity.unwrap();
        net.graph.set_param(id.gamma, Tensor::zeros([1, 4, 1, 1])).unwrap();
        net.graph.set_param(id.beta, Tensor::zeros([1, 4, 1, 1])).unwrap();
        let bn1 = b.bn_1x1.unwrap();
        net.graph.set_param(bn1.beta, Tensor::zeros([1, 4, 1, 1])).unwrap();
        net.graph.bn_state_mut(bn1.state).running_mean = vec![0.0; 4];
        let merged = convert_repvgg_block(&net.graph, &b).unwrap();
        let only = fuse_handle(&net.graph, net.graph.param_value(b.kernel), &b.bn_3x3.unwrap()).unwrap();
        assert!(merged.kernel.max_abs_diff(&only.kernel).unwrap() < 1e-15);
        assert_eq!(merged.bias, only.bias);
    }

    #[test]
    fn training_breaks_conversion_equivalence() {
        let net = randomized_block(4, 4, 1, 12);
        let d = conversion_training_divergence(&net, 10, 0.1, 4, 1).unwrap();
        assert!(d.initial_gap < 1e-10);
        assert!(d.first_divergent_step(1e-6).is_some_and(|s| s <= 10));
    }
}
