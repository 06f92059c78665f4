//! Hyper-search: train the CSLA model with trainable scales on a small
//! dataset and keep the final scales as the RepOptimizer's constants.

mod scales;

pub use scales::*;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::Result;
use crate::models::{ModelSpec, Network, ScaleSlot};
use crate::optim::OptimizerConfig;
use crate::train::{EpochStats, Recipe, TrainConfig, Trainer};

/// Initial trainable scale of the l-th identity-bearing block of a stage
/// (l ≥ 1): √(2/l). Identity scales start at 1.
pub fn init_hs_scales(depth_l: usize) -> f64 {
    assert!(depth_l >= 1, "block depth is 1-based");
    (2.0 / depth_l as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub epoch: usize,
    pub block_id: usize,
    pub mean_s: f64,
    pub mean_t: f64,
    pub mean_gamma: Option<f64>,
}

/// Per-epoch channel means of every block's scales.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScaleTrajectory {
    pub rows: Vec<TrajectoryRow>,
}

impl ScaleTrajectory {
    pub fn epochs(&self) -> usize {
        self.rows.iter().map(|r| r.epoch).max().unwrap_or(0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,block_id,mean_s,mean_t,mean_gamma\n");
        for r in &self.rows {
            let g = r.mean_gamma.map(|g| format!("{g:.17e}")).unwrap_or_default();
            out.push_str(&format!("{},{},{:.17e},{:.17e},{}\n", r.epoch, r.block_id, r.mean_s, r.mean_t, g));
        }
        out
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn record_epoch(net: &Network, epoch: usize, traj: &mut ScaleTrajectory) {
    for (h, (s, t)) in net.blocks.iter().zip(net.block_scales()) {
        let gamma = h.identity_scale.map(|g| mean(net.graph.param_value(g).data()));
        traj.rows.push(TrajectoryRow {
            epoch,
            block_id: h.geometry.index,
            mean_s: mean(&s),
            mean_t: mean(&t),
            mean_gamma: gamma,
        });
    }
}

/// Scales currently held by a hyper-search network (γ is not exported).
pub fn harvest_scales(net: &Network, provenance: Provenance) -> ScalesFile {
    let blocks = net
        .blocks
        .iter()
        .zip(net.block_scales())
        .map(|(h, (s, t))| ScaleRecord {
            block_id: h.geometry.index,
            c_out: h.geometry.c_out,
            s,
            t,
            has_identity: h.geometry.has_identity,
        })
        .collect();
    ScalesFile::new(provenance, blocks)
}

#[derive(Clone, Debug)]
pub struct HyperSearchOutcome {
    pub scales: ScalesFile,
    pub trajectory: ScaleTrajectory,
    pub metrics: Vec<EpochStats>,
}

/// The model that searches on `data`: same stages as `spec`, with the head
/// and input size adapted to the dataset.
pub fn search_spec(spec: &ModelSpec, data: &Dataset) -> ModelSpec {
    ModelSpec {
        num_classes: data.num_classes,
        input_hw: data.resolution,
        ..spec.clone()
    }
}

/// Train the hyper-search model end to end with plain SGD for
/// `cfg.total_epochs` and export its final s and t.
pub fn run_hyper_search(spec: &ModelSpec, data: &Dataset, cfg: &OptimizerConfig, seed: u64) -> Result<HyperSearchOutcome> {
    let spec = search_spec(spec, data);
    let mut trainer = Trainer::from_recipe(&Recipe::HyperSearch, &spec, TrainConfig::new(cfg.clone(), seed))?;
    debug_assert!(trainer.net.blocks.iter().all(|b| matches!(b.s, Some(ScaleSlot::Trainable(_)))));
    let mut trajectory = ScaleTrajectory::default();
    let mut metrics = Vec::new();
    while !trainer.finished() {
        let stats = trainer.train_epoch(data)?;
        record_epoch(&trainer.net, stats.epoch, &mut trajectory);
        metrics.push(stats);
    }
    let scales = harvest_scales(
        &trainer.net,
        Provenance {
            dataset: data.source.clone(),
            seed,
            epochs: cfg.total_epochs,
        },
    );
    Ok(HyperSearchOutcome {
        scales,
        trajectory,
        metrics,
    })
}
