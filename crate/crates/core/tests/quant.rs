use std::sync::OnceLock;

use gradrep::data::{gen_cifar_substitute, Dataset};
use gradrep::lab::{block_batchnorms, convert_repvgg_block, convert_to_deploy, randomize_batchnorms};
use gradrep::models::*;
use gradrep::optim::OptimizerConfig;
use gradrep::quant::*;
use gradrep::train::{evaluate, Recipe, TrainConfig, Trainer};
use gradrep::{Mode, Rng, Tensor};

#[test]
fn position_stats_match_flat_loop_oracle() {
    let mut rng = Rng::new(12);
    for _ in 0..10 {
        let (o, i) = (1 + rng.below(6), 1 + rng.below(6));
        let k = Tensor::from_fn([o, i, 3, 3], |_| rng.normal(0.0, 1.0));
        let s = kernel_position_stats(&k).unwrap();
        let (mut all, mut central, mut surrounding) = (vec![], vec![], vec![]);
        for a in 0..o {
            for b in 0..i {
                for p in 0..3 {
                    for q in 0..3 {
                        let v = k.at([a, b, p, q]);
                        all.push(v);
                        if p == 1 && q == 1 {
                            central.push(v);
                        } else {
                            surrounding.push(v);
                        }
                    }
                }
            }
        }
        let std = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
        };
        assert!((s.std_overall - std(&all)).abs() <= 1e-12);
        assert!((s.std_central - std(&central)).abs() <= 1e-12);
        assert!((s.std_surrounding - std(&surrounding)).abs() <= 1e-12);
    }
}

#[test]
fn merged_kernel_concentrates_spread_at_the_center() {
    for seed in 0..5 {
        let mut net = build_repvgg_block(8, 8, 1, 4, seed);
        let handles = block_batchnorms(&net.blocks[0]);
        let mut rng = Rng::new(seed);
        randomize_batchnorms(&mut net.graph, &handles, 0.9, &mut rng).unwrap();
        for h in &handles {
            let c = net.graph.param_value(h.gamma).len();
            let wide: Vec<f64> = (0..c).map(|_| rng.uniform_range(1.5, 3.0)).collect();
            net.graph.set_param(h.gamma, Tensor::channel_vector(&wide)).unwrap();
        }
        let fused = convert_repvgg_block(&net.graph, &net.blocks[0]).unwrap();
        let s = kernel_position_stats(&fused.kernel).unwrap();
        assert!(s.std_central > s.std_surrounding, "{s:?}");
    }
}

#[test]
fn empty_calibration_is_rejected() {
    let net = build_repvgg_block(2, 2, 1, 3, 0);
    assert!(ptq_model(&net, &[]).is_err());
}

#[test]
fn identity_network_stays_near_identity() {
    let c = 3;
    let dirac = Tensor::from_fn([c, c, 3, 3], |[o, i, p, q]| if o == i && p == 1 && q == 1 { 1.0 } else { 0.0 });
    let fc_w = Tensor::from_fn([c, c, 1, 1], |[o, i, _, _]| if o == i { 1.0 } else { 0.0 });
    let net = build_deploy_block(1, dirac, vec![0.0; c], (fc_w, Tensor::zeros([1, c, 1, 1]))).unwrap();
    let mut rng = Rng::new(3);
    let x = Tensor::from_fn([4, c, 6, 6], |_| rng.uniform());
    let (mut q, layers) = ptq_model(&net, &[x.clone()]).unwrap();
    q.forward(x.clone(), vec![0; 4]).unwrap();
    let out = q.graph.value(q.blocks[0].output).unwrap();
    let a_scale = layers[0].activation_scale;
    assert!(out.max_abs_diff(&x).unwrap() <= a_scale / 2.0 * (1.0 + 1e-12));
}

struct Trained {
    fp: f64,
    int8: f64,
    logit_error: f64,
}

struct DeskPair {
    plain: Trained,
    repvgg: Trained,
}

const SEEDS: [u64; 3] = [0, 1, 2];

fn data() -> &'static (Dataset, Dataset) {
    static DATA: OnceLock<(Dataset, Dataset)> = OnceLock::new();
    DATA.get_or_init(|| {
        let all = gen_cifar_substitute(8000, 0).unwrap();
        (all.slice(0, 5000).unwrap(), all.slice(5000, 8000).unwrap())
    })
}

fn calibration(train: &Dataset) -> Vec<Tensor> {
    (0..4).map(|b| train.batch(&(b * 64..(b + 1) * 64).collect::<Vec<_>>(), None).0).collect()
}

fn relative_logit_error(a: &mut Network, b: &mut Network, test: &Dataset) -> f64 {
    let (x, _) = test.batch(&(0..500).collect::<Vec<_>>(), None);
    let la = a.forward(x.clone(), vec![0; 500]).unwrap().clone();
    let lb = b.forward(x, vec![0; 500]).unwrap().clone();
    let norm = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    norm(&la.sub(&lb).unwrap()) / norm(&la)
}

fn train_and_quantize(recipe: &Recipe, seed: u64) -> Trained {
    let (train, test) = data();
    let opt = OptimizerConfig {
        base_lr: 0.1,
        warmup_epochs: 1,
        total_epochs: 10,
        batch_size: 64,
        ..Default::default()
    };
    let mut t = Trainer::from_recipe(recipe, &ModelSpec::desk(10), TrainConfig::new(opt, seed)).unwrap();
    t.fit(train).unwrap();
    let mut deploy = convert_to_deploy(&t.net).unwrap();
    let fp = evaluate(&mut deploy, test, 250).unwrap().accuracy;
    let (mut q, _) = ptq_model(&deploy, &calibration(train)).unwrap();
    let int8 = evaluate(&mut q, test, 250).unwrap().accuracy;
    deploy.set_mode(Mode::Eval);
    let logit_error = relative_logit_error(&mut deploy, &mut q, test);
    Trained { fp, int8, logit_error }
}

fn desk_pairs() -> &'static Vec<DeskPair> {
    static PAIRS: OnceLock<Vec<DeskPair>> = OnceLock::new();
    PAIRS.get_or_init(|| {
        SEEDS
            .iter()
            .map(|&s| DeskPair {
                plain: train_and_quantize(&Recipe::Target, s),
                repvgg: train_and_quantize(&Recipe::RepVgg, s),
            })
            .collect()
    })
}

#[test]
fn plain_model_loses_no_more_than_converted_repvgg() {
    let pairs = desk_pairs();
    let n = pairs.len() as f64;
    let drop = |t: &Trained| t.fp - t.int8;
    let plain = pairs.iter().map(|p| drop(&p.plain)).sum::<f64>() / n;
    let repvgg = pairs.iter().map(|p| drop(&p.repvgg)).sum::<f64>() / n;
    let fp_gap = pairs.iter().map(|p| (p.plain.fp - p.repvgg.fp).abs()).fold(0.0, f64::max);
    assert!(fp_gap < 0.05, "float accuracies differ by {fp_gap}");
    assert!(plain <= repvgg, "mean drop plain {plain:.4} vs repvgg {repvgg:.4}");
    for p in pairs {
        assert!(p.plain.logit_error < p.repvgg.logit_error);
    }
}

/// Uniform noise within the INT8 round-off envelope ±scale/2 of `w`.
fn jitter(w: &Tensor, rng: &mut Rng) -> Tensor {
    let half = QuantParams::symmetric(w.max_abs()).scale / 2.0;
    Tensor::from_fn(w.shape(), |idx| w.at(idx) + half * (2.0 * rng.uniform() - 1.0))
}

#[test]
fn weight_only_quantization_within_perturbation_envelope() {
    let (train, test) = data();
    let opt = OptimizerConfig {
        base_lr: 0.1,
        warmup_epochs: 1,
        total_epochs: 4,
        batch_size: 64,
        ..Default::default()
    };
    let mut t = Trainer::from_recipe(&Recipe::Target, &ModelSpec::desk(10), TrainConfig::new(opt, 7)).unwrap();
    t.fit(train).unwrap();
    let mut deploy = convert_to_deploy(&t.net).unwrap();
    let fp = evaluate(&mut deploy, test, 250).unwrap().accuracy;
    let mut wq = quantize_weights(&deploy);
    let delta = (evaluate(&mut wq, test, 250).unwrap().accuracy - fp).abs();

    // Same per-element error envelope (±scale/2), random instead of rounded.
    let mut rng = Rng::new(99);
    let mut envelope: f64 = 1.0 / test.len() as f64;
    for _ in 0..8 {
        let mut noisy = deploy.clone();
        for b in std::iter::once(&deploy.stem).chain(&deploy.blocks) {
            let w = deploy.graph.param_value(b.kernel);
            noisy.graph.set_param(b.kernel, jitter(w, &mut rng)).unwrap();
        }
        let w = deploy.graph.param_value(deploy.fc_weight);
        noisy.graph.set_param(deploy.fc_weight, jitter(w, &mut rng)).unwrap();
        envelope = envelope.max((evaluate(&mut noisy, test, 250).unwrap().accuracy - fp).abs());
    }
    assert!(delta <= envelope, "weight-only change {delta} vs envelope {envelope}");
}
