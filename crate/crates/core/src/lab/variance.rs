use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Mode;
use crate::models::{Network, ScaleSlot};
use crate::tensor::Tensor;

fn population_variance(t: &Tensor) -> f64 {
    let n = t.len() as f64;
    let mean = t.sum() / n;
    t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// var(identity path) / var(block sum) for every block with an identity
/// path, from one train-mode forward pass of `x`. Returns
/// `(block index, ratio)` pairs.
pub fn block_variance_ratios(net: &mut Network, x: &Tensor) -> Result<Vec<(usize, f64)>> {
    net.set_mode(Mode::Train);
    let n = x.shape()[0];
    net.forward(x.clone(), vec![0; n])?;
    let mut out = Vec::new();
    for b in &net.blocks {
        let Some(id) = b.identity_node else { continue };
        let vi = population_variance(net.graph.value(id)?);
        let vs = population_variance(net.graph.value(b.sum_node)?);
        let ratio = if vs == 0.0 { 1.0 } else { vi / vs };
        out.push((b.geometry.index, ratio));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceRatios {
    pub block_ids: Vec<usize>,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

/// Identity variance ratios at initialization, one network and one random
/// batch per seed, averaged over seeds.
pub fn identity_variance_ratio(
    build: impl Fn(u64) -> Result<Network>,
    batch: impl Fn(u64) -> Tensor,
    seeds: &[u64],
) -> Result<VarianceRatios> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("need at least one seed".into()));
    }
    let mut block_ids = Vec::new();
    let mut per_seed = Vec::new();
    for &s in seeds {
        let mut net = build(s)?;
        let r = block_variance_ratios(&mut net, &batch(s))?;
        block_ids = r.iter().map(|(b, _)| *b).collect();
        per_seed.push(r.into_iter().map(|(_, v)| v).collect::<Vec<_>>());
    }
    let k = block_ids.len();
    let mean = (0..k)
        .map(|i| per_seed.iter().map(|r| r[i]).sum::<f64>() / seeds.len() as f64)
        .collect();
    Ok(VarianceRatios {
        block_ids,
        seeds: seeds.to_vec(),
        per_seed,
        mean,
    })
}

/// Overwrite the trainable s and t of a hyper-search network with
/// `value(block)` on every channel.
pub fn set_hs_scales(net: &mut Network, value: impl Fn(&crate::models::BlockGeometry) -> f64) -> Result<()> {
    for b in net.blocks.clone() {
        let v = value(&b.geometry);
        for slot in [&b.s, &b.t] {
            if let Some(ScaleSlot::Trainable(p)) = slot {
                net.graph.set_param(*p, Tensor::channel_vector(&vec![v; b.geometry.c_out]))?;
            }
        }
    }
    Ok(())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    cov / (vx * vy).sqrt()
}

/// One-sided sign-test p-value: P(X ≥ wins) for X ~ Binomial(n, 1/2).
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    let mut c = 1.0f64;
    let mut tail = 0.0;
    for k in 0..=n {
        if k >= wins {
            tail += c;
        }
        c = c * (n - k) as f64 / (k + 1) as f64;
    }
    tail / 2f64.powi(n as i32)
}
