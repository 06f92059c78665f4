//! Training loop, evaluation and the model/optimizer recipes used by the CLI
//! and the desk experiments.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::Mode;
use crate::hypersearch::ScalesFile;
use crate::models::{build_csla, build_hypersearch, build_repvgg, build_target, CslaBlockSpec, Init, InitialWeights, ModelSpec, Network};
use crate::optim::{equivalent_init, grad_mult_for, lr_schedule, GradMult, GradMultTable, OptimizerConfig, RepOptimizer, UpdateRule};
use crate::rng::Rng;

/// Stream tag of the data-order / augmentation generator.
pub const DATA_STREAM: u64 = 0xDA7A_0BDE;

/// What model to build and how its optimizer treats the block kernels.
#[derive(Clone, Debug, PartialEq)]
pub enum Recipe {
    /// Plain model, plain optimizer.
    Target,
    /// Explicit CSLA model with the given constant scales, plain optimizer.
    Csla(ScalesFile),
    /// Hyper-search model, plain optimizer.
    HyperSearch,
    /// Training-time RepVGG, plain optimizer.
    RepVgg,
    /// Plain model trained with gradient re-parameterization.
    RepOpt {
        scales: ScalesFile,
        /// Initialize block kernels with the equivalent kernel.
        reinit: bool,
        /// Multiply block-kernel gradients by the Grad Mult.
        gradmult: bool,
    },
}

impl Recipe {
    pub fn name(&self) -> &'static str {
        match self {
            Recipe::Target => "target",
            Recipe::Csla(_) => "csla",
            Recipe::HyperSearch => "hyper_search",
            Recipe::RepVgg => "repvgg",
            Recipe::RepOpt { .. } => "repopt",
        }
    }
}

/// CSLA block specs implied by `scales` for every stage block of `spec`.
pub fn csla_blocks(spec: &ModelSpec, scales: &ScalesFile) -> Result<Vec<CslaBlockSpec>> {
    scales.check_against(spec)?;
    spec.blocks()
        .iter()
        .zip(&scales.blocks)
        .map(|(g, r)| CslaBlockSpec::new(g.c_in, g.c_out, g.stride, r.s.clone(), r.t.clone()))
        .collect()
}

/// Build the network for `recipe` from the seeded initial weights, plus the
/// multiplier table its optimizer uses.
pub fn build_recipe(recipe: &Recipe, spec: &ModelSpec, seed: u64) -> Result<(Network, GradMultTable)> {
    let net = match recipe {
        Recipe::Target => build_target(spec, Init::Seeded(seed))?,
        Recipe::Csla(scales) => build_csla(spec, scales, Init::Seeded(seed))?,
        Recipe::HyperSearch => build_hypersearch(spec, Init::Seeded(seed))?,
        Recipe::RepVgg => build_repvgg(spec, Init::Seeded(seed))?,
        Recipe::RepOpt { scales, reinit, gradmult } => {
            let blocks = csla_blocks(spec, scales)?;
            let mut net = build_target(spec, Init::Seeded(seed))?;
            let mut table = GradMultTable::new(net.graph.param_values().len());
            let weights = InitialWeights::draw(spec, seed);
            for ((h, b), (ws, wt)) in net.blocks.iter().zip(&blocks).zip(&weights.blocks) {
                if *reinit {
                    let ones = vec![1.0; b.c_out];
                    let id = b.has_identity.then_some(ones.as_slice());
                    let k = equivalent_init(ws, wt, &b.s, &b.t, id)?;
                    net.graph.set_param(h.kernel, k)?;
                }
                if *gradmult {
                    table.set(h.kernel, GradMult::Tensor(grad_mult_for(b)));
                }
            }
            return Ok((net, table));
        }
    };
    let table = GradMultTable::new(net.graph.param_values().len());
    Ok((net, table))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub opt: OptimizerConfig,
    pub rule: UpdateRule,
    pub seed: u64,
    pub augment: bool,
    pub eval_batch: usize,
}

impl TrainConfig {
    pub fn new(opt: OptimizerConfig, seed: u64) -> Self {
        TrainConfig {
            opt,
            rule: UpdateRule::Sgd,
            seed,
            augment: true,
            eval_batch: 250,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    pub last_lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub predictions: Vec<usize>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode accuracy over `data` in fixed order.
pub fn evaluate(net: &mut Network, data: &Dataset, batch: usize) -> Result<Evaluation> {
    let prev = net.graph.mode();
    net.set_mode(Mode::Eval);
    let mut predictions = Vec::with_capacity(data.len());
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let order: Vec<usize> = (0..data.len()).collect();
    for idx in order.chunks(batch.max(1)) {
        let (x, y) = data.batch(idx, None);
        let logits = net.forward(x, y.clone())?;
        let k = logits.shape()[1];
        for (n, row) in logits.data().chunks(k).enumerate() {
            let p = argmax(row);
            correct += (p == y[n]) as usize;
            predictions.push(p);
        }
        loss_sum += net.loss_value()? * idx.len() as f64;
    }
    net.set_mode(prev);
    Ok(Evaluation {
        accuracy: correct as f64 / data.len() as f64,
        mean_loss: loss_sum / data.len() as f64,
        predictions,
    })
}

/// A network, its optimizer and the data generator, stepped in lockstep.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub net: Network,
    pub optimizer: RepOptimizer,
    pub cfg: TrainConfig,
    pub data_rng: Rng,
    pub epoch: usize,
    pub step: usize,
}

impl Trainer {
    pub fn new(mut net: Network, mults: GradMultTable, cfg: TrainConfig) -> Result<Self> {
        cfg.opt.validate()?;
        net.set_label_smoothing(cfg.opt.label_smoothing);
        net.set_mode(Mode::Train);
        let optimizer = RepOptimizer::new(cfg.opt.clone(), cfg.rule, mults, &net.graph);
        Ok(Trainer {
            net,
            optimizer,
            data_rng: Rng::stream(cfg.seed, DATA_STREAM),
            cfg,
            epoch: 0,
            step: 0,
        })
    }

    pub fn from_recipe(recipe: &Recipe, spec: &ModelSpec, cfg: TrainConfig) -> Result<Self> {
        let (net, mults) = build_recipe(recipe, spec, cfg.seed)?;
        Self::new(net, mults, cfg)
    }

    pub fn steps_per_epoch(&self, data: &Dataset) -> usize {
        let bs = self.cfg.opt.batch_size;
        let full = data.len() / bs;
        full + usize::from(data.len() % bs >= 2)
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.cfg.opt.total_epochs
    }

    /// One pass over `data`. A non-finite loss aborts with the epoch and the
    /// step within it.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochStats> {
        let spe = self.steps_per_epoch(data);
        let order = data.epoch_order(&mut self.data_rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        let mut lr = 0.0;
        for (k, idx) in Dataset::batches(&order, self.cfg.opt.batch_size).into_iter().enumerate() {
            lr = lr_schedule(&self.cfg.opt, self.step, spe);
            let rng = self.cfg.augment.then_some(&mut self.data_rng);
            let (x, y) = data.batch(idx, rng);
            let logits = self.net.forward(x, y.clone())?;
            let c = logits.shape()[1];
            correct += logits.data().chunks(c).zip(&y).filter(|(row, &l)| argmax(row) == l).count();
            let loss = self.net.loss_value()?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch: self.epoch, step: k });
            }
            loss_sum += loss * idx.len() as f64;
            seen += idx.len();
            let grads = self.net.graph.backward(self.net.loss)?;
            self.optimizer.step(&mut self.net.graph, &grads, lr)?;
            self.step += 1;
        }
        self.epoch += 1;
        Ok(EpochStats {
            epoch: self.epoch,
            mean_loss: loss_sum / seen.max(1) as f64,
            train_accuracy: correct as f64 / seen.max(1) as f64,
            last_lr: lr,
        })
    }

    /// Train until `total_epochs`.
    pub fn fit(&mut self, data: &Dataset) -> Result<Vec<EpochStats>> {
        let mut out = Vec::new();
        while !self.finished() {
            out.push(self.train_epoch(data)?);
        }
        Ok(out)
    }

    pub fn evaluate(&mut self, data: &Dataset) -> Result<Evaluation> {
        evaluate(&mut self.net, data, self.cfg.eval_batch)
    }
}

/// One row of the optimizer ablation matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub optimizer: String,
    pub source: String,
    pub change_init: bool,
    pub modify_grads: bool,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
}
