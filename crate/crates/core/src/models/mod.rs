//! Model families and their parameter / FLOP accounting.
//!
//! Every family shares the same skeleton: a stride-2 3×3 stem, four (or any
//! number of) stages whose first block has stride 2, then global average
//! pooling and a fully connected head. Families differ only in what a block
//! looks like:
//!
//! | family       | block                                                     |
//! |--------------|-----------------------------------------------------------|
//! | target       | conv3×3 → BN → ReLU                                       |
//! | CSLA         | s⊙conv3×3 + t⊙conv1×1 (+ γ⊙x) → BN → ReLU, s,t constant  |
//! | hyper-search | as CSLA with s, t trainable                               |
//! | RepVGG       | BN(conv3×3) + BN(conv1×1) (+ BN(x)) → ReLU                |
//! | deploy       | conv3×3 + bias → ReLU                                     |

mod builders;

pub use builders::*;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BatchNormHandle, Graph, Mode, NodeId, Op, ParamId};
use crate::init::{fan_in_uniform_with, msra_init_with};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub layers: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stages: Vec<StageSpec>,
    pub num_classes: usize,
    pub input_hw: usize,
}

fn stages(layers: &[usize], channels: &[usize]) -> Vec<StageSpec> {
    layers
        .iter()
        .zip(channels)
        .map(|(&layers, &channels)| StageSpec { layers, channels })
        .collect()
}

impl ModelSpec {
    pub fn new(stem_channels: usize, stages: Vec<StageSpec>, num_classes: usize, input_hw: usize) -> Result<Self> {
        let spec = ModelSpec {
            in_channels: 3,
            stem_channels,
            stages,
            num_classes,
            input_hw,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// ImageNet-shaped RepOpt-VGG variants (stem width min(64, first stage)).
    pub fn preset(name: &str) -> Result<Self> {
        let (layers, channels): (&[usize], &[usize]) = match name {
            "b1" => (&[4, 6, 16, 1], &[128, 256, 512, 2048]),
            "b2" => (&[4, 6, 16, 1], &[160, 320, 640, 2560]),
            "l1" => (&[8, 14, 24, 1], &[128, 256, 512, 2048]),
            "l2" => (&[8, 14, 24, 1], &[160, 320, 640, 2560]),
            "desk" => return Ok(Self::desk(10)),
            other => return Err(Error::Config(format!("unknown model preset '{other}'"))),
        };
        Self::new(64.min(channels[0]), stages(layers, channels), 1000, 224)
    }

    /// CPU-sized model for 32×32 inputs: six stage blocks.
    pub fn desk(num_classes: usize) -> Self {
        ModelSpec {
            in_channels: 3,
            stem_channels: 8,
            stages: stages(&[2, 2, 2], &[8, 16, 32]),
            num_classes,
            input_hw: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.stem_channels == 0 || self.num_classes == 0 || self.input_hw == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.stages.is_empty() || self.stages.iter().any(|s| s.layers == 0 || s.channels == 0) {
            return Err(Error::Config("every stage needs a positive layer count and width".into()));
        }
        Ok(())
    }

    /// Geometry of every stage block in order.
    pub fn blocks(&self) -> Vec<BlockGeometry> {
        let mut out = Vec::new();
        let mut c_in = self.stem_channels;
        for (stage, st) in self.stages.iter().enumerate() {
            let mut depth = 0;
            for layer in 0..st.layers {
                let stride = if layer == 0 { 2 } else { 1 };
                let has_identity = has_identity(c_in, st.channels, stride);
                if has_identity {
                    depth += 1;
                }
                out.push(BlockGeometry {
                    index: out.len(),
                    stage,
                    layer,
                    c_in,
                    c_out: st.channels,
                    stride,
                    has_identity,
                    identity_depth: has_identity.then_some(depth),
                });
                c_in = st.channels;
            }
        }
        out
    }

    pub fn stem_geometry(&self) -> BlockGeometry {
        BlockGeometry {
            index: usize::MAX,
            stage: usize::MAX,
            layer: 0,
            c_in: self.in_channels,
            c_out: self.stem_channels,
            stride: 2,
            has_identity: false,
            identity_depth: None,
        }
    }

    pub fn final_channels(&self) -> usize {
        self.stages.last().map(|s| s.channels).unwrap_or(self.stem_channels)
    }
}

/// A block carries an identity branch exactly when input and output shapes match.
pub fn has_identity(c_in: usize, c_out: usize, stride: usize) -> bool {
    c_in == c_out && stride == 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockGeometry {
    pub index: usize,
    pub stage: usize,
    /// 0-based position within the stage.
    pub layer: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub has_identity: bool,
    /// 1-based ordinal among the identity-bearing blocks of the stage.
    pub identity_depth: Option<usize>,
}

/// The imaginary constant-scale linear addition block behind one 3×3 layer.
#[derive(Clone, Debug, PartialEq)]
pub struct CslaBlockSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub s: Vec<f64>,
    pub t: Vec<f64>,
    pub has_identity: bool,
}

impl CslaBlockSpec {
    pub fn new(c_in: usize, c_out: usize, stride: usize, s: Vec<f64>, t: Vec<f64>) -> Result<Self> {
        if s.len() != c_out || t.len() != c_out {
            return Err(Error::InvalidArgument(format!(
                "CSLA scales need {c_out} entries, got s={} t={}",
                s.len(),
                t.len()
            )));
        }
        if s.iter().chain(&t).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("CSLA scales".into()));
        }
        Ok(CslaBlockSpec {
            c_in,
            c_out,
            stride,
            s,
            t,
            has_identity: has_identity(c_in, c_out, stride),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Target,
    Csla,
    HyperSearch,
    RepVgg,
    RepGhost,
    ResNet,
    Deploy,
}

/// Where a block's per-channel scale lives.
#[derive(Clone, Debug, PartialEq)]
pub enum ScaleSlot {
    Constant(Vec<f64>),
    Trainable(ParamId),
}

/// Node and parameter handles of one block (or the stem).
#[derive(Clone, Debug)]
pub struct BlockHandles {
    pub geometry: BlockGeometry,
    /// Main kernel: the target 3×3, the CSLA/HS/RepVGG 3×3 branch, or the
    /// RepGhost / ResNet first conv.
    pub kernel: ParamId,
    pub kernel_1x1: Option<ParamId>,
    pub identity_scale: Option<ParamId>,
    pub s: Option<ScaleSlot>,
    pub t: Option<ScaleSlot>,
    pub bias: Option<ParamId>,
    /// Batch norm after the branch addition (target / CSLA / HS / RepGhost).
    pub post_bn: Option<BatchNormHandle>,
    /// RepVGG per-branch batch norms: 3×3, 1×1, identity.
    pub bn_3x3: Option<BatchNormHandle>,
    pub bn_1x1: Option<BatchNormHandle>,
    pub bn_identity: Option<BatchNormHandle>,
    /// ResNet second conv and its BN.
    pub kernel_b: Option<ParamId>,
    pub bn_b: Option<BatchNormHandle>,
    pub identity_node: Option<NodeId>,
    pub sum_node: NodeId,
    pub output: NodeId,
}

impl BlockHandles {
    fn new(geometry: BlockGeometry, kernel: ParamId, sum_node: NodeId, output: NodeId) -> Self {
        BlockHandles {
            geometry,
            kernel,
            kernel_1x1: None,
            identity_scale: None,
            s: None,
            t: None,
            bias: None,
            post_bn: None,
            bn_3x3: None,
            bn_1x1: None,
            bn_identity: None,
            kernel_b: None,
            bn_b: None,
            identity_node: None,
            sum_node,
            output,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    pub kind: ModelKind,
    pub spec: ModelSpec,
    pub graph: Graph,
    pub input: NodeId,
    pub logits: NodeId,
    pub loss: NodeId,
    pub stem: BlockHandles,
    pub blocks: Vec<BlockHandles>,
    pub fc_weight: ParamId,
    pub fc_bias: ParamId,
}

impl Network {
    pub fn num_params(&self) -> usize {
        self.graph.num_trainable_params()
    }

    /// Conv + FC multiply–accumulates for one input at `spec.input_hw`.
    pub fn macs(&self) -> Result<u64> {
        let hw = self.spec.input_hw;
        self.graph.macs(self.input, [1, self.spec.in_channels, hw, hw])
    }

    /// FLOPs in the convention of the published RepVGG/RepOpt tables: one
    /// multiply–accumulate counts as one operation.
    pub fn flops(&self) -> Result<u64> {
        self.macs()
    }

    pub fn set_label_smoothing(&mut self, eps: f64) {
        self.graph.set_smoothing(self.loss, eps);
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.graph.set_mode(mode);
    }

    /// Forward one batch; returns logits.
    pub fn forward(&mut self, x: Tensor, labels: Vec<usize>) -> Result<&Tensor> {
        self.graph.set_input(self.input, x)?;
        self.graph.set_labels(labels);
        self.graph.forward()?;
        self.graph.value(self.logits)
    }

    pub fn loss_value(&self) -> Result<f64> {
        Ok(self.graph.value(self.loss)?.data()[0])
    }

    /// Block kernels that a RepOptimizer manages.
    pub fn managed_kernels(&self) -> Vec<ParamId> {
        self.blocks.iter().map(|b| b.kernel).collect()
    }

    /// Current trainable scale values (s, t) of every block, for HS models.
    pub fn block_scales(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        let read = |slot: &Option<ScaleSlot>, c: usize| match slot {
            Some(ScaleSlot::Trainable(p)) => self.graph.param_value(*p).data().to_vec(),
            Some(ScaleSlot::Constant(v)) => v.clone(),
            None => vec![0.0; c],
        };
        self.blocks
            .iter()
            .map(|b| (read(&b.s, b.geometry.c_out), read(&b.t, b.geometry.c_out)))
            .collect()
    }
}

/// Canonical initial tensors for one seed. Every model family draws from the
/// same bank in the same order, so a CSLA model and its GR target start
/// from literally the same random kernels.
#[derive(Clone, Debug)]
pub struct InitialWeights {
    pub stem_3x3: Tensor,
    pub stem_1x1: Tensor,
    pub blocks: Vec<(Tensor, Tensor)>,
    pub fc_weight: Tensor,
    pub fc_bias: Tensor,
}

pub const INIT_STREAM: u64 = 0x1417;

impl InitialWeights {
    pub fn draw(spec: &ModelSpec, seed: u64) -> Self {
        let mut rng = Rng::stream(seed, INIT_STREAM);
        let stem = spec.stem_geometry();
        let stem_3x3 = msra_init_with([stem.c_out, stem.c_in, 3, 3], &mut rng);
        let stem_1x1 = msra_init_with([stem.c_out, stem.c_in, 1, 1], &mut rng);
        let blocks = spec
            .blocks()
            .iter()
            .map(|b| {
                let ws = msra_init_with([b.c_out, b.c_in, 3, 3], &mut rng);
                let wt = msra_init_with([b.c_out, b.c_in, 1, 1], &mut rng);
                (ws, wt)
            })
            .collect();
        let f = spec.final_channels();
        let fc_weight = fan_in_uniform_with([spec.num_classes, f, 1, 1], &mut rng);
        InitialWeights {
            stem_3x3,
            stem_1x1,
            blocks,
            fc_weight,
            fc_bias: Tensor::zeros([1, spec.num_classes, 1, 1]),
        }
    }

    /// All-zero bank with the right shapes; used for shape-only accounting of
    /// large models (zeroed pages are never touched).
    pub fn zeros(spec: &ModelSpec) -> Self {
        let stem = spec.stem_geometry();
        InitialWeights {
            stem_3x3: Tensor::zeros([stem.c_out, stem.c_in, 3, 3]),
            stem_1x1: Tensor::zeros([stem.c_out, stem.c_in, 1, 1]),
            blocks: spec
                .blocks()
                .iter()
                .map(|b| (Tensor::zeros([b.c_out, b.c_in, 3, 3]), Tensor::zeros([b.c_out, b.c_in, 1, 1])))
                .collect(),
            fc_weight: Tensor::zeros([spec.num_classes, spec.final_channels(), 1, 1]),
            fc_bias: Tensor::zeros([1, spec.num_classes, 1, 1]),
        }
    }
}

/// How parameters are initialized by a builder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Seeded(u64),
    /// Zero tensors; for shape and count queries only.
    Zeros,
}

impl Init {
    fn weights(self, spec: &ModelSpec) -> InitialWeights {
        match self {
            Init::Seeded(seed) => InitialWeights::draw(spec, seed),
            Init::Zeros => InitialWeights::zeros(spec),
        }
    }
}

impl Graph {
    pub(crate) fn set_smoothing(&mut self, node: NodeId, eps: f64) {
        if let Some(Op::CrossEntropy { smoothing }) = self.op_mut(node) {
            *smoothing = eps;
        }
    }
}
