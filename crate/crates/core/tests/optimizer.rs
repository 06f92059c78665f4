use gradrep::graph::Gradients;
use gradrep::ops::{channel_scale, conv2d};
use gradrep::optim::*;
use gradrep::{ParamId, Rng, Tensor};
use proptest::prelude::*;

fn randn(rng: &mut Rng, shape: [usize; 4]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal(0.0, 1.0))
}

#[test]
fn equivalent_kernel_reproduces_the_csla_forward() {
    for seed in 0..10 {
        let mut rng = Rng::new(seed);
        let c = 5;
        let ws = randn(&mut rng, [c, c, 3, 3]);
        let wt = randn(&mut rng, [c, c, 1, 1]);
        let s: Vec<f64> = (0..c).map(|_| rng.normal(0.0, 1.0)).collect();
        let t: Vec<f64> = (0..c).map(|_| rng.normal(0.0, 1.0)).collect();
        let gamma: Vec<f64> = (0..c).map(|_| rng.normal(1.0, 0.3)).collect();
        let x = randn(&mut rng, [2, c, 7, 7]);
        let k = equivalent_init(&ws, &wt, &s, &t, Some(&gamma)).unwrap();
        let a = channel_scale(&conv2d(&x, &ws, 1, 1).unwrap(), &Tensor::channel_vector(&s)).unwrap();
        let b = channel_scale(&conv2d(&x, &wt, 1, 0).unwrap(), &Tensor::channel_vector(&t)).unwrap();
        let id = channel_scale(&x, &Tensor::channel_vector(&gamma)).unwrap();
        let csla = a.add(&b).unwrap().add(&id).unwrap();
        let single = conv2d(&x, &k, 1, 1).unwrap();
        assert!(single.max_abs_diff(&csla).unwrap() <= 1e-12);
    }
}

#[test]
fn dirac_equivalent_kernel_is_the_identity_map() {
    let c = 3;
    let k = equivalent_init(&Tensor::zeros([c, c, 3, 3]), &Tensor::zeros([c, c, 1, 1]), &[0.0; 3], &[0.0; 3], Some(&[1.0; 3])).unwrap();
    let mut rng = Rng::new(2);
    let x = randn(&mut rng, [1, c, 5, 5]);
    assert_eq!(conv2d(&x, &k, 1, 1).unwrap(), x);
}

#[test]
fn all_ones_multiplier_without_momentum_or_decay_is_plain_sgd() {
    let mut rng = Rng::new(3);
    let theta = randn(&mut rng, [2, 2, 3, 3]);
    let g = randn(&mut rng, [2, 2, 3, 3]);
    let mut params = vec![theta.clone()];
    let mut table = GradMultTable::new(1);
    table.set(ParamId(0), GradMult::Tensor(Tensor::filled([2, 2, 3, 3], 1.0)));
    let cfg = OptimizerConfig {
        momentum: 0.0,
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut st = MomentumState::new(&params);
    let grads = Gradients { per_param: vec![Some(g.clone())] };
    gr_step(&mut params, &grads, &table, &mut st, &cfg, 0.3).unwrap();
    let want = theta.sub(&g.scale(0.3)).unwrap();
    assert_eq!(params[0], want);
}

#[test]
fn schedule_endpoints() {
    let cfg = OptimizerConfig {
        warmup_epochs: 2,
        total_epochs: 10,
        ..Default::default()
    };
    let spe = 7;
    assert_eq!(lr_schedule(&cfg, 0, spe), 0.0);
    assert!((lr_schedule(&cfg, 2 * spe, spe) - cfg.base_lr).abs() < 1e-15);
    assert!(lr_schedule(&cfg, 10 * spe, spe).abs() < 1e-15);
}

proptest! {
    #[test]
    fn multiplier_structure(
        st in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..6),
        identity in any::<bool>(),
    ) {
        let s: Vec<f64> = st.iter().map(|p| p.0).collect();
        let t: Vec<f64> = st.iter().map(|p| p.1).collect();
        let c = s.len();
        let m = build_grad_mult(&s, &t, identity).unwrap();
        prop_assert!(m.data().iter().all(|&v| v >= 0.0));
        for o in 0..c {
            for i in 0..c {
                let center = m.at([o, i, 1, 1]);
                let other = (o + 1) % c;
                let off = m.at([o, other, 1, 1]);
                if o == i && c > 1 {
                    let extra = if identity { 1.0 } else { 0.0 };
                    prop_assert_eq!(center, off + extra);
                }
                prop_assert_eq!(m.at([o, i, 0, 0]), s[o] * s[o]);
            }
        }
    }
}
