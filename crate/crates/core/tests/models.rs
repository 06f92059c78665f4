use gradrep::graph::Op;
use gradrep::hypersearch::ScalesFile;
use gradrep::models::*;
use gradrep::train::{build_recipe, Recipe};
use gradrep::{Mode, Rng, Tensor};

fn spec(stem: usize, stages: &[(usize, usize)], classes: usize, hw: usize) -> ModelSpec {
    let stages = stages.iter().map(|&(layers, channels)| StageSpec { layers, channels }).collect();
    ModelSpec::new(stem, stages, classes, hw).unwrap()
}

fn batch(spec: &ModelSpec, n: usize, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::from_fn([n, spec.in_channels, spec.input_hw, spec.input_hw], |_| rng.normal(0.0, 1.0))
}

fn logits(net: &mut Network, x: &Tensor) -> Tensor {
    let n = x.shape()[0];
    net.forward(x.clone(), vec![0; n]).unwrap().clone()
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() <= rel * target
}

/// (preset, params in millions, GFLOPs)
const TABLE: [(&str, f64, f64); 4] = [("b1", 51.8, 11.9), ("b2", 80.3, 18.4), ("l1", 76.0, 21.0), ("l2", 118.1, 32.8)];

#[test]
fn published_architecture_table() {
    for (name, params_m, gflops) in TABLE {
        let spec = ModelSpec::preset(name).unwrap();
        let net = build_target(&spec, Init::Zeros).unwrap();
        let p = net.num_params() as f64 / 1e6;
        let f = net.flops().unwrap() as f64 / 1e9;
        assert!(within(p, params_m, 0.01), "{name}: {p:.3}M params");
        assert!(within(f, gflops, 0.02), "{name}: {f:.3} GFLOPs");
    }
}

#[test]
fn training_time_repvgg_b1_params() {
    let spec = ModelSpec::preset("b1").unwrap();
    let net = build_repvgg(&spec, Init::Zeros).unwrap();
    let p = net.num_params() as f64 / 1e6;
    assert!(within(p, 57.4, 0.01), "{p:.3}M");
}

#[test]
fn tiny_spec_parameter_count_by_hand() {
    let s = spec(4, &[(1, 4), (1, 8)], 10, 16);
    let net = build_target(&s, Init::Zeros).unwrap();
    let stem = 4 * 3 * 3 * 3 + 2 * 4;
    let block0 = 4 * 4 * 3 * 3 + 2 * 4;
    let block1 = 8 * 4 * 3 * 3 + 2 * 8;
    let fc = 8 * 10 + 10;
    assert_eq!(net.num_params(), stem + block0 + block1 + fc);
}

#[test]
fn families_share_output_shapes() {
    let s = spec(4, &[(2, 4), (2, 8)], 5, 16);
    let x = batch(&s, 3, 1);
    let scales = ScalesFile::uniform(&s, 0.7, 0.3);
    let nets = [
        build_target(&s, Init::Seeded(1)).unwrap(),
        build_csla(&s, &scales, Init::Seeded(1)).unwrap(),
        build_hypersearch(&s, Init::Seeded(1)).unwrap(),
    ];
    for mut net in nets {
        assert_eq!(logits(&mut net, &x).shape(), [3, 5, 1, 1]);
    }
}

#[test]
fn identity_exactly_for_shape_preserving_blocks() {
    let s = spec(8, &[(3, 8), (2, 16)], 10, 32);
    for g in s.blocks() {
        assert_eq!(g.has_identity, g.c_in == g.c_out && g.stride == 1);
        if g.layer == 0 {
            assert_eq!(g.stride, 2);
            assert!(!g.has_identity);
        }
    }
    assert!(has_identity(4, 4, 1));
    assert!(!has_identity(4, 4, 2));
    assert!(!has_identity(4, 8, 1));
}

#[test]
fn extra_parameters_of_csla_and_hs_are_branch_kernels_and_scales() {
    let s = spec(4, &[(2, 4), (3, 8)], 10, 16);
    let target = build_target(&s, Init::Zeros).unwrap().num_params();
    let csla = build_csla(&s, &ScalesFile::uniform(&s, 1.0, 1.0), Init::Zeros).unwrap().num_params();
    let hs = build_hypersearch(&s, Init::Zeros).unwrap().num_params();
    let mut branch = 0;
    let mut gammas = 0;
    let mut scales = 0;
    for g in s.blocks() {
        branch += g.c_out * g.c_in;
        scales += 2 * g.c_out;
        if g.has_identity {
            gammas += g.c_out;
        }
    }
    assert_eq!(csla - target, branch + gammas);
    assert_eq!(hs - target, branch + gammas + scales);
}

#[test]
fn degenerate_csla_is_the_plain_block() {
    let s = spec(4, &[(1, 6), (1, 8)], 4, 16);
    assert!(s.blocks().iter().all(|g| !g.has_identity));
    let mut csla = build_csla(&s, &ScalesFile::uniform(&s, 1.0, 0.0), Init::Seeded(3)).unwrap();
    for b in csla.blocks.clone() {
        let k = b.kernel_1x1.unwrap();
        let shape = csla.graph.param_value(k).shape();
        csla.graph.set_param(k, Tensor::zeros(shape)).unwrap();
    }
    let mut target = build_target(&s, Init::Seeded(3)).unwrap();
    let x = batch(&s, 4, 2);
    let diff = logits(&mut csla, &x).max_abs_diff(&logits(&mut target, &x)).unwrap();
    assert!(diff <= 1e-12, "{diff}");
}

#[test]
fn csla_matches_target_with_equivalent_kernels() {
    let s = spec(4, &[(3, 4), (2, 8)], 6, 16);
    let mut rng = Rng::new(11);
    let mut scales = ScalesFile::uniform(&s, 1.0, 1.0);
    for r in &mut scales.blocks {
        r.s.iter_mut().for_each(|v| *v = rng.uniform_range(0.2, 1.5));
        r.t.iter_mut().for_each(|v| *v = rng.uniform_range(-0.5, 1.0));
    }
    let mut csla = build_csla(&s, &scales, Init::Seeded(5)).unwrap();
    let recipe = Recipe::RepOpt {
        scales: scales.clone(),
        reinit: true,
        gradmult: true,
    };
    let (mut target, _) = build_recipe(&recipe, &s, 5).unwrap();
    for net in [&mut csla, &mut target] {
        net.set_mode(Mode::Eval);
    }
    for seed in 0..5 {
        let x = batch(&s, 2, 100 + seed);
        let diff = logits(&mut csla, &x).max_abs_diff(&logits(&mut target, &x)).unwrap();
        assert!(diff <= 1e-12, "{diff}");
    }
}

#[test]
fn hs_model_initial_scales() {
    let s = spec(4, &[(4, 4)], 3, 16);
    let net = build_hypersearch(&s, Init::Seeded(0)).unwrap();
    let got: Vec<f64> = net.block_scales().iter().map(|(sv, tv)| {
        assert_eq!(sv, tv);
        sv[0]
    }).collect();
    let want = [1.0, 2f64.sqrt(), 1.0, (2.0f64 / 3.0).sqrt()];
    assert_eq!(got, want);
}

/// Identity BN: γ=1, β=0, μ=0, σ²=1−ε.
fn make_identity_bn(net: &mut Network, bn: gradrep::graph::BatchNormHandle) {
    let c = net.graph.param_value(bn.gamma).len();
    net.graph.set_param(bn.gamma, Tensor::channel_vector(&vec![1.0; c])).unwrap();
    net.graph.set_param(bn.beta, Tensor::channel_vector(&vec![0.0; c])).unwrap();
    let st = net.graph.bn_state_mut(bn.state);
    let eps = st.eps;
    st.running_mean.iter_mut().for_each(|m| *m = 0.0);
    st.running_var.iter_mut().for_each(|v| *v = 1.0 - eps);
}

fn zero_bn(net: &mut Network, bn: gradrep::graph::BatchNormHandle) {
    let c = net.graph.param_value(bn.gamma).len();
    net.graph.set_param(bn.gamma, Tensor::channel_vector(&vec![0.0; c])).unwrap();
    net.graph.set_param(bn.beta, Tensor::channel_vector(&vec![0.0; c])).unwrap();
}

#[test]
fn repvgg_with_identity_bns_and_silent_side_branches_is_plain() {
    let s = spec(4, &[(2, 4), (2, 8)], 5, 16);
    let mut repvgg = build_repvgg(&s, Init::Seeded(8)).unwrap();
    let mut target = build_target(&s, Init::Seeded(8)).unwrap();
    let handles: Vec<_> = std::iter::once(repvgg.stem.clone()).chain(repvgg.blocks.clone()).collect();
    for h in handles {
        make_identity_bn(&mut repvgg, h.bn_3x3.unwrap());
        zero_bn(&mut repvgg, h.bn_1x1.unwrap());
        let k = h.kernel_1x1.unwrap();
        let shape = repvgg.graph.param_value(k).shape();
        repvgg.graph.set_param(k, Tensor::zeros(shape)).unwrap();
        if let Some(bn) = h.bn_identity {
            zero_bn(&mut repvgg, bn);
        }
    }
    let handles: Vec<_> = std::iter::once(target.stem.clone()).chain(target.blocks.clone()).collect();
    for h in handles {
        make_identity_bn(&mut target, h.post_bn.unwrap());
    }
    repvgg.set_mode(Mode::Eval);
    target.set_mode(Mode::Eval);
    let x = batch(&s, 3, 4);
    let diff = logits(&mut repvgg, &x).max_abs_diff(&logits(&mut target, &x)).unwrap();
    assert!(diff <= 1e-12, "{diff}");
}

#[test]
fn ghost_variant_without_scaling_branch_is_plain_1x1() {
    let s = spec(4, &[(3, 4)], 3, 16);
    let plain = build_repghost_variant(&s, &GhostScales::uniform(&s, 1.0, 1.0), false, Init::Seeded(2)).unwrap();
    assert!(!plain.graph.nodes().iter().any(|n| matches!(n.op, Op::ChannelScale)));
    for b in &plain.blocks {
        assert_eq!(plain.graph.param_value(b.kernel).shape()[2..], [1, 1]);
        assert!(b.identity_scale.is_none());
    }
    let mut plain = plain;
    let mut silent = build_repghost_variant(&s, &GhostScales::uniform(&s, 0.0, 1.0), true, Init::Seeded(2)).unwrap();
    let x = batch(&s, 2, 6);
    let diff = logits(&mut plain, &x).max_abs_diff(&logits(&mut silent, &x)).unwrap();
    assert!(diff <= 1e-12, "{diff}");
}

#[test]
fn resnet_reference_stage_layout() {
    let s = spec(16, &[(4, 16), (6, 32), (16, 64)], 10, 32);
    let net = build_resnet_reference(&s, Init::Zeros).unwrap();
    let per_stage: Vec<usize> = (0..3).map(|st| net.blocks.iter().filter(|b| b.geometry.stage == st).count()).collect();
    assert_eq!(per_stage, [4, 6, 16]);
    assert_eq!(net.blocks.iter().filter(|b| b.identity_node.is_some()).count(), 3 + 5 + 15);
}

#[test]
fn resnet_zero_residual_branch_is_identity() {
    let s = spec(4, &[(3, 4)], 3, 16);
    let mut net = build_resnet_reference(&s, Init::Seeded(1)).unwrap();
    for b in net.blocks.clone() {
        if b.identity_node.is_some() {
            zero_bn(&mut net, b.bn_b.unwrap());
        }
    }
    let x = batch(&s, 2, 3);
    logits(&mut net, &x);
    for (i, b) in net.blocks.iter().enumerate().skip(1) {
        let input = net.graph.value(net.blocks[i - 1].output).unwrap();
        let output = net.graph.value(b.output).unwrap();
        assert_eq!(input, output);
    }
}

#[test]
fn bad_scales_name_the_layer() {
    let s = spec(4, &[(2, 4)], 3, 16);
    let mut scales = ScalesFile::uniform(&s, 1.0, 1.0);
    scales.blocks[1].t.pop();
    let err = build_csla(&s, &scales, Init::Seeded(0)).unwrap_err().to_string();
    assert!(err.contains("block1"), "{err}");
}
