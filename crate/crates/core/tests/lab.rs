use gradrep::lab::*;
use gradrep::models::*;
use gradrep::optim::CslaLayout;
use gradrep::{Mode, Rng, Tensor};

fn random_block(c_in: usize, c_out: usize, stride: usize, seed: u64) -> CslaBlockSpec {
    let mut rng = Rng::new(seed);
    let s = (0..c_out).map(|_| rng.uniform_range(0.2, 1.5)).collect();
    let t = (0..c_out).map(|_| rng.uniform_range(-0.5, 1.0)).collect();
    CslaBlockSpec::new(c_in, c_out, stride, s, t).unwrap()
}

#[test]
fn equivalence_across_block_sizes_and_optimizer_settings() {
    for (c_in, c_out, stride) in [(2, 2, 1), (4, 4, 1), (3, 6, 2), (6, 6, 2)] {
        let block = random_block(c_in, c_out, stride, c_out as u64);
        for cfg in [EquivConfig::plain(0.05), EquivConfig::full(0.05)] {
            let r = verify_csla_gr(&block, 40, &cfg, 17).unwrap();
            assert_eq!(r.output_div.len(), 40);
            assert_eq!(r.kernel_div.len(), 40);
            assert!(r.max_output_div() <= 1e-8, "{c_in}->{c_out}/{stride}: {}", r.max_output_div());
            assert!(r.max_kernel_div() <= 1e-10, "{c_in}->{c_out}/{stride}: {}", r.max_kernel_div());
        }
    }
}

#[test]
fn ghost_block_equivalence_over_100_steps() {
    let mut rng = Rng::new(4);
    let a: Vec<f64> = (0..6).map(|_| rng.uniform_range(0.5, 1.5)).collect();
    let b: Vec<f64> = (0..6).map(|_| rng.uniform_range(0.1, 1.0)).collect();
    let layout = CslaLayout::ghost(6, &a, &b).unwrap();
    let r = verify_layout(&layout, 100, &EquivConfig::full(0.05), 2, Ablation::default()).unwrap();
    assert!(r.max_output_div() <= 1e-8, "{}", r.max_output_div());
}

#[test]
fn chain_rule_holds_with_and_without_identity() {
    for (c_in, c_out, stride) in [(5, 5, 1), (3, 5, 2)] {
        let block = random_block(c_in, c_out, stride, 9);
        let cfg = EquivConfig { stride, ..EquivConfig::plain(0.1) };
        for seed in 0..4 {
            let gap = grad_mult_chain_rule_gap(&CslaLayout::repopt(&block), &cfg, seed).unwrap();
            assert!(gap <= 1e-10, "{gap}");
        }
    }
}

#[test]
fn each_dropped_rule_diverges_on_several_seeds() {
    let layout = CslaLayout::repopt(&random_block(8, 8, 1, 1));
    for seed in 0..3 {
        for ab in [
            Ablation { skip_init: true, skip_mult: false },
            Ablation { skip_init: false, skip_mult: true },
        ] {
            let r = verify_layout(&layout, 11, &EquivConfig::full(0.1), seed, ab).unwrap();
            assert!(r.output_div[10] > 1e-3, "{ab:?} seed {seed}: {}", r.output_div[10]);
        }
    }
}

#[test]
fn report_csv_has_one_row_per_step() {
    let r = verify_csla_gr(&random_block(2, 2, 1, 0), 5, &EquivConfig::plain(0.1), 0).unwrap();
    let csv = r.to_csv();
    assert_eq!(csv.lines().count(), 6);
    assert_eq!(csv.lines().next(), Some("step,output_div,kernel_div"));
    assert_eq!(r.summary()["steps"], 5);
}

fn randomized_block(c_in: usize, c_out: usize, stride: usize, seed: u64) -> Network {
    let mut net = build_repvgg_block(c_in, c_out, stride, 4, seed);
    let handles = block_batchnorms(&net.blocks[0]);
    randomize_batchnorms(&mut net.graph, &handles, 0.5, &mut Rng::new(seed + 1)).unwrap();
    net.set_mode(Mode::Eval);
    net
}

#[test]
fn converted_blocks_match_on_many_inputs() {
    for (c_in, c_out, stride) in [(4, 4, 1), (3, 5, 2)] {
        let mut multi = randomized_block(c_in, c_out, stride, 21);
        let mut single = convert_to_deploy(&multi).unwrap();
        single.set_mode(Mode::Eval);
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let x = Tensor::from_fn([2, c_in, 8, 8], |_| rng.normal(0.0, 1.0));
            multi.forward(x.clone(), vec![0, 0]).unwrap();
            single.forward(x, vec![0, 0]).unwrap();
            let a = multi.graph.value(multi.blocks[0].output).unwrap();
            let b = single.graph.value(single.blocks[0].output).unwrap();
            assert!(a.max_abs_diff(b).unwrap() <= 1e-10);
        }
    }
}

#[test]
fn whole_repvgg_network_converts() {
    let spec = ModelSpec::new(4, vec![StageSpec { layers: 2, channels: 4 }, StageSpec { layers: 2, channels: 8 }], 3, 16).unwrap();
    let mut net = build_repvgg(&spec, Init::Seeded(2)).unwrap();
    let mut rng = Rng::new(8);
    let handles: Vec<_> = std::iter::once(&net.stem).chain(&net.blocks).flat_map(block_batchnorms).collect();
    randomize_batchnorms(&mut net.graph, &handles, 0.4, &mut rng).unwrap();
    net.set_mode(Mode::Eval);
    let mut deploy = convert_to_deploy(&net).unwrap();
    deploy.set_mode(Mode::Eval);
    let x = Tensor::from_fn([3, 3, 16, 16], |_| rng.normal(0.0, 1.0));
    let a = net.forward(x.clone(), vec![0; 3]).unwrap().clone();
    let b = deploy.forward(x, vec![0; 3]).unwrap().clone();
    assert!(a.max_abs_diff(&b).unwrap() <= 1e-10);
    assert!(deploy.num_params() < net.num_params());
}

#[test]
fn conversion_is_not_training_equivalent() {
    let net = randomized_block(4, 4, 1, 3);
    let d = conversion_training_divergence(&net, 10, 0.1, 8, 1).unwrap();
    assert!(d.initial_gap <= 1e-10);
    assert!(d.first_divergent_step(1e-6).is_some_and(|s| s <= 10), "{:?}", d.per_step);
}

#[test]
fn variance_ratios_cover_identity_blocks() {
    let spec = ModelSpec::new(8, vec![StageSpec { layers: 4, channels: 8 }], 3, 16).unwrap();
    let r = identity_variance_ratio(
        |s| build_resnet_reference(&spec, Init::Seeded(s)),
        |s| {
            let mut rng = Rng::new(s);
            Tensor::from_fn([8, 3, 16, 16], |_| rng.normal(0.0, 1.0))
        },
        &[0, 1, 2],
    )
    .unwrap();
    assert_eq!(r.block_ids, vec![1, 2, 3]);
    assert_eq!(r.per_seed.len(), 3);
    assert!(r.mean.iter().all(|&v| v > 0.0 && v.is_finite()));
}

#[test]
fn variance_study_rejects_empty_seed_list() {
    let spec = ModelSpec::desk(10);
    assert!(identity_variance_ratio(|s| build_resnet_reference(&spec, Init::Seeded(s)), |_| Tensor::zeros([2, 3, 32, 32]), &[]).is_err());
}
