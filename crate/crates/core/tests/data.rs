use gradrep::data::*;
use gradrep::graph::Gradients;
use gradrep::optim::{gr_step, GradMultTable, MomentumState, OptimizerConfig};
use gradrep::{Graph, Mode, Rng, Tensor};

/// Softmax regression on raw pixels: one conv whose kernel covers the whole
/// image is a linear map to the class logits.
fn linear_probe_accuracy(train: &Dataset, test: &Dataset, epochs: usize) -> f64 {
    let r = train.resolution;
    let k = train.num_classes;
    let mut g = Graph::new();
    let x = g.input("x");
    let (w, _) = g.param("w", Tensor::zeros([k, 3, r, r]), true);
    let (b, _) = g.param("b", Tensor::zeros([1, k, 1, 1]), true);
    let z = g.conv2d(x, w, 1, 0, "probe");
    let logits = g.add_channel_bias(z, b, "bias");
    let loss = g.cross_entropy(logits, 0.0, "loss");
    let cfg = OptimizerConfig {
        momentum: 0.9,
        weight_decay: 0.0,
        ..Default::default()
    };
    let table = GradMultTable::new(2);
    let mut state = MomentumState::new(g.param_values());
    let mut rng = Rng::new(0);
    for _ in 0..epochs {
        let order = train.epoch_order(&mut rng);
        for idx in Dataset::batches(&order, 32) {
            let (xb, yb) = train.batch(idx, None);
            g.set_input(x, xb).unwrap();
            g.set_labels(yb);
            g.forward().unwrap();
            let grads: Gradients = g.backward(loss).unwrap();
            gr_step(g.param_values_mut(), &grads, &table, &mut state, &cfg, 0.01).unwrap();
        }
    }
    g.set_mode(Mode::Eval);
    let all: Vec<usize> = (0..test.len()).collect();
    let (xt, yt) = test.batch(&all, None);
    g.set_input(x, xt).unwrap();
    g.set_labels(yt.clone());
    g.forward().unwrap();
    let out = g.value(logits).unwrap();
    let correct = (0..test.len())
        .filter(|&i| {
            let row: Vec<f64> = (0..k).map(|c| out.at([i, c, 0, 0])).collect();
            let arg = (0..k).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            arg == yt[i]
        })
        .count();
    correct as f64 / test.len() as f64
}

#[test]
fn linear_probe_learns_ten_class_blobs() {
    let all = gen_synthetic(2500, 32, 10, 4).unwrap();
    let (train, test) = (all.slice(0, 2000).unwrap(), all.slice(2000, 2500).unwrap());
    let acc = linear_probe_accuracy(&train, &test, 5);
    assert!(acc > 0.5, "{acc}");
}

#[test]
fn same_seed_same_bytes() {
    let a = gen_cifar_substitute(50, 3).unwrap();
    let b = gen_cifar_substitute(50, 3).unwrap();
    let c = gen_cifar_substitute(50, 4).unwrap();
    let bytes = |d: &Dataset| (0..d.len()).flat_map(|i| d.image(i).to_vec()).collect::<Vec<u8>>();
    assert_eq!(bytes(&a), bytes(&b));
    assert_eq!(a.labels(), b.labels());
    assert_ne!(bytes(&a), bytes(&c));
    assert!(gen_synthetic(0, 8, 2, 0).is_err());
}

#[test]
fn substitute_uses_cifar_normalization() {
    let d = gen_cifar_substitute(10, 0).unwrap();
    assert_eq!((d.resolution, d.num_classes), (32, 10));
    assert_eq!(d.mean, CIFAR10_MEAN);
    assert_eq!(d.std, CIFAR10_STD);
}

#[test]
fn round_trip_through_cifar100_layout() {
    let d = gen_synthetic(7, 32, 100, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.bin");
    write_cifar(&path, &d, CifarVariant::Cifar100).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 7 * 3074);
    let back = load_cifar(&path, CifarVariant::Cifar100).unwrap();
    assert_eq!(back.labels(), d.labels());
    assert!((0..7).all(|i| back.image(i) == d.image(i)));
}

/// Runs against the real training split when `GRADREP_CIFAR10_DIR` points
/// at the extracted binary version.
#[test]
fn full_cifar10_training_split_when_available() {
    let Ok(dir) = std::env::var("GRADREP_CIFAR10_DIR") else {
        eprintln!("GRADREP_CIFAR10_DIR not set; skipping");
        return;
    };
    let dir = std::path::PathBuf::from(dir);
    let paths: Vec<_> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
    let refs: Vec<&std::path::Path> = paths.iter().map(|p| p.as_path()).collect();
    let d = load_cifar_files(&refs, CifarVariant::Cifar10).unwrap();
    assert_eq!(d.len(), CIFAR10_TRAIN_RECORDS);
    assert!(d.class_histogram().iter().all(|&c| c == 5000));
}
