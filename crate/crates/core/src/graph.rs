//! Static computation graphs with exact reverse-mode gradients.
//!
//! Nodes are appended in construction order, which is also a valid
//! topological order: an op can only reference nodes that already exist.
//! Parameters live in slots owned by the graph; optimizers update them in
//! place through [`Graph::param_values_mut`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ops::{self, BnCache, BnState};
use crate::quant;
use crate::tensor::{numel, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BnId(pub usize);

#[derive(Clone, Debug)]
pub enum Op {
    Input,
    Param(ParamId),
    Constant(Tensor),
    Conv2d { stride: usize, padding: usize },
    ChannelScale,
    AddChannelBias,
    Add,
    BatchNorm(BnId),
    Relu,
    GlobalAvgPool,
    Linear,
    SumAll,
    CrossEntropy { smoothing: f64 },
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub name: String,
}

#[derive(Clone, Debug)]
pub struct ParamInfo {
    pub name: String,
    pub trainable: bool,
    pub node: NodeId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-parameter gradients from one backward pass; `None` for frozen slots.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub per_param: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.per_param[id.0].as_ref()
    }
}

#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    param_info: Vec<ParamInfo>,
    param_values: Vec<Tensor>,
    bn_states: Vec<BnState>,
    mode: Mode,
    feeds: HashMap<NodeId, Tensor>,
    labels: Option<Vec<usize>>,
    output_quant: HashMap<NodeId, f64>,
    values: Vec<Option<Tensor>>,
    grads: Vec<Option<Tensor>>,
    bn_caches: HashMap<NodeId, BnCache>,
    forwarded: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_info: Vec::new(),
            param_values: Vec::new(),
            bn_states: Vec::new(),
            mode: Mode::Train,
            feeds: HashMap::new(),
            labels: None,
            output_quant: HashMap::new(),
            values: Vec::new(),
            grads: Vec::new(),
            bn_caches: HashMap::new(),
            forwarded: false,
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, name: impl Into<String>) -> NodeId {
        for i in &inputs {
            assert!(i.0 < self.nodes.len(), "input node {} does not exist", i.0);
        }
        self.nodes.push(Node {
            op,
            inputs,
            name: name.into(),
        });
        self.forwarded = false;
        NodeId(self.nodes.len() - 1)
    }

    // ---- construction ----------------------------------------------------

    pub fn input(&mut self, name: &str) -> NodeId {
        self.push(Op::Input, vec![], name)
    }

    pub fn param(&mut self, name: &str, value: Tensor, trainable: bool) -> (NodeId, ParamId) {
        let pid = ParamId(self.param_values.len());
        let node = self.push(Op::Param(pid), vec![], name);
        self.param_values.push(value);
        self.param_info.push(ParamInfo {
            name: name.to_string(),
            trainable,
            node,
        });
        (node, pid)
    }

    pub fn constant(&mut self, name: &str, value: Tensor) -> NodeId {
        self.push(Op::Constant(value), vec![], name)
    }

    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, stride: usize, padding: usize, name: &str) -> NodeId {
        self.push(Op::Conv2d { stride, padding }, vec![x, kernel], name)
    }

    pub fn channel_scale(&mut self, x: NodeId, scale: NodeId, name: &str) -> NodeId {
        self.push(Op::ChannelScale, vec![x, scale], name)
    }

    pub fn add_channel_bias(&mut self, x: NodeId, bias: NodeId, name: &str) -> NodeId {
        self.push(Op::AddChannelBias, vec![x, bias], name)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId, name: &str) -> NodeId {
        self.push(Op::Add, vec![a, b], name)
    }

    /// Batch norm with fresh affine parameters (γ=1, β=0) and running stats.
    pub fn batchnorm(&mut self, x: NodeId, channels: usize, name: &str) -> BatchNormHandle {
        let (g_node, gamma) = self.param(&format!("{name}.gamma"), Tensor::channel_vector(&vec![1.0; channels]), true);
        let (b_node, beta) = self.param(&format!("{name}.beta"), Tensor::channel_vector(&vec![0.0; channels]), true);
        let bn = BnId(self.bn_states.len());
        self.bn_states.push(BnState::new(channels));
        let output = self.push(Op::BatchNorm(bn), vec![x, g_node, b_node], name);
        BatchNormHandle {
            output,
            gamma,
            beta,
            state: bn,
        }
    }

    pub fn relu(&mut self, x: NodeId, name: &str) -> NodeId {
        self.push(Op::Relu, vec![x], name)
    }

    pub fn global_avg_pool(&mut self, x: NodeId, name: &str) -> NodeId {
        self.push(Op::GlobalAvgPool, vec![x], name)
    }

    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: NodeId, name: &str) -> NodeId {
        self.push(Op::Linear, vec![x, weight, bias], name)
    }

    pub fn sum_all(&mut self, x: NodeId, name: &str) -> NodeId {
        self.push(Op::SumAll, vec![x], name)
    }

    pub fn cross_entropy(&mut self, logits: NodeId, smoothing: f64, name: &str) -> NodeId {
        self.push(Op::CrossEntropy { smoothing }, vec![logits], name)
    }

    // ---- accessors -------------------------------------------------------

    pub(crate) fn op_mut(&mut self, node: NodeId) -> Option<&mut Op> {
        self.forwarded = false;
        self.nodes.get_mut(node.0).map(|n| &mut n.op)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn params(&self) -> &[ParamInfo] {
        &self.param_info
    }

    pub fn param_value(&self, id: ParamId) -> &Tensor {
        &self.param_values[id.0]
    }

    pub fn param_values(&self) -> &[Tensor] {
        &self.param_values
    }

    pub fn param_values_mut(&mut self) -> &mut [Tensor] {
        self.forwarded = false;
        &mut self.param_values
    }

    pub fn set_param(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let current = &self.param_values[id.0];
        if current.shape() != value.shape() {
            return Err(Error::shape("set_param", &current.shape(), &value.shape()));
        }
        self.param_values[id.0] = value;
        self.forwarded = false;
        Ok(())
    }

    pub fn param_by_name(&self, name: &str) -> Option<ParamId> {
        self.param_info.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn bn_state(&self, id: BnId) -> &BnState {
        &self.bn_states[id.0]
    }

    pub fn bn_state_mut(&mut self, id: BnId) -> &mut BnState {
        self.forwarded = false;
        &mut self.bn_states[id.0]
    }

    pub fn bn_states(&self) -> &[BnState] {
        &self.bn_states
    }

    pub fn bn_states_mut(&mut self) -> &mut [BnState] {
        &mut self.bn_states
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
        self.forwarded = false;
    }

    pub fn set_input(&mut self, node: NodeId, value: Tensor) -> Result<()> {
        if !matches!(self.nodes[node.0].op, Op::Input) {
            return Err(Error::Usage(format!("node '{}' is not an input", self.nodes[node.0].name)));
        }
        self.feeds.insert(node, value);
        self.forwarded = false;
        Ok(())
    }

    pub fn set_labels(&mut self, labels: Vec<usize>) {
        self.labels = Some(labels);
        self.forwarded = false;
    }

    /// Fake-quantize a node's forward value with the given symmetric INT8 scale.
    pub fn set_output_quant(&mut self, node: NodeId, scale: Option<f64>) {
        match scale {
            Some(s) => self.output_quant.insert(node, s),
            None => self.output_quant.remove(&node),
        };
        self.forwarded = false;
    }

    pub fn value(&self, node: NodeId) -> Result<&Tensor> {
        self.values
            .get(node.0)
            .and_then(|v| v.as_ref())
            .ok_or_else(|| Error::Usage(format!("node '{}' has no value; run forward first", self.nodes[node.0].name)))
    }

    /// Gradient of the last backward's loss with respect to a node's value.
    pub fn node_grad(&self, node: NodeId) -> Option<&Tensor> {
        self.grads.get(node.0).and_then(|g| g.as_ref())
    }

    /// Number of trainable scalars.
    pub fn num_trainable_params(&self) -> usize {
        self.param_info
            .iter()
            .zip(&self.param_values)
            .filter(|(info, _)| info.trainable)
            .map(|(_, v)| v.len())
            .sum()
    }

    // ---- execution -------------------------------------------------------

    fn get<'a>(&self, values: &'a [Option<Tensor>], id: NodeId) -> &'a Tensor {
        values[id.0].as_ref().expect("inputs are evaluated before their consumers")
    }

    pub fn forward(&mut self) -> Result<()> {
        let training = self.mode == Mode::Train;
        let mut values: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        self.bn_caches.clear();
        for idx in 0..self.nodes.len() {
            let id = NodeId(idx);
            let node = &self.nodes[idx];
            let ins = &node.inputs;
            let value = match &node.op {
                Op::Input => self
                    .feeds
                    .get(&id)
                    .cloned()
                    .ok_or_else(|| Error::Usage(format!("input '{}' was not set", node.name)))?,
                Op::Param(p) => self.param_values[p.0].clone(),
                Op::Constant(t) => t.clone(),
                Op::Conv2d { stride, padding } => {
                    ops::conv2d(self.get(&values, ins[0]), self.get(&values, ins[1]), *stride, *padding)
                        .map_err(|e| Error::layer(&node.name, e.to_string()))?
                }
                Op::ChannelScale => ops::channel_scale(self.get(&values, ins[0]), self.get(&values, ins[1]))
                    .map_err(|e| Error::layer(&node.name, e.to_string()))?,
                Op::AddChannelBias => ops::add_channel_bias(self.get(&values, ins[0]), self.get(&values, ins[1]))
                    .map_err(|e| Error::layer(&node.name, e.to_string()))?,
                Op::Add => self
                    .get(&values, ins[0])
                    .add(self.get(&values, ins[1]))
                    .map_err(|e| Error::layer(&node.name, e.to_string()))?,
                Op::BatchNorm(bn) => {
                    let (y, cache) = ops::batchnorm_forward(
                        values[ins[0].0].as_ref().unwrap(),
                        values[ins[1].0].as_ref().unwrap(),
                        values[ins[2].0].as_ref().unwrap(),
                        &mut self.bn_states[bn.0],
                        training,
                    )
                    .map_err(|e| Error::layer(&node.name, e.to_string()))?;
                    self.bn_caches.insert(id, cache);
                    y
                }
                Op::Relu => ops::relu(self.get(&values, ins[0])),
                Op::GlobalAvgPool => ops::global_avg_pool(self.get(&values, ins[0])),
                Op::Linear => ops::linear(
                    self.get(&values, ins[0]),
                    self.get(&values, ins[1]),
                    self.get(&values, ins[2]),
                )
                .map_err(|e| Error::layer(&node.name, e.to_string()))?,
                Op::SumAll => Tensor::scalar(self.get(&values, ins[0]).sum()),
                Op::CrossEntropy { smoothing } => {
                    let labels = self
                        .labels
                        .as_ref()
                        .ok_or_else(|| Error::Usage("labels were not set".into()))?;
                    let (loss, _) = ops::cross_entropy(self.get(&values, ins[0]), labels, *smoothing)
                        .map_err(|e| Error::layer(&node.name, e.to_string()))?;
                    Tensor::scalar(loss)
                }
            };
            let value = match self.output_quant.get(&id) {
                Some(&scale) => quant::fake_quantize(&value, scale),
                None => value,
            };
            values.push(Some(value));
        }
        self.values = values;
        self.grads.clear();
        self.forwarded = true;
        Ok(())
    }

    fn requires_grad(&self) -> Vec<bool> {
        let mut req = vec![false; self.nodes.len()];
        for (idx, node) in self.nodes.iter().enumerate() {
            req[idx] = match node.op {
                Op::Param(p) => self.param_info[p.0].trainable,
                Op::Input | Op::Constant(_) => false,
                _ => node.inputs.iter().any(|i| req[i.0]),
            };
        }
        req
    }

    /// Reverse-mode sweep from a scalar node. Also caches per-node gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if !self.forwarded {
            return Err(Error::Usage("backward called before forward (or after the graph changed)".into()));
        }
        let lv = self.value(loss)?;
        if lv.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, node '{}' has shape {:?}",
                self.nodes[loss.0].name,
                lv.shape()
            )));
        }
        let req = self.requires_grad();
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
            match slot {
                Some(existing) => existing.axpy(1.0, &g).expect("gradient shapes agree"),
                None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let ins = node.inputs.clone();
            let val = |i: NodeId| self.values[i.0].as_ref().unwrap();
            match &node.op {
                Op::Input | Op::Param(_) | Op::Constant(_) => {}
                Op::Conv2d { stride, padding } => {
                    let (dx, dk) = ops::conv2d_backward(val(ins[0]), val(ins[1]), &g, *stride, *padding, req[ins[0].0])?;
                    if let Some(dx) = dx {
                        accumulate(&mut grads[ins[0].0], dx);
                    }
                    if req[ins[1].0] {
                        accumulate(&mut grads[ins[1].0], dk);
                    }
                }
                Op::ChannelScale => {
                    let (dx, ds) = ops::channel_scale_backward(val(ins[0]), val(ins[1]), &g);
                    if req[ins[0].0] {
                        accumulate(&mut grads[ins[0].0], dx);
                    }
                    if req[ins[1].0] {
                        accumulate(&mut grads[ins[1].0], ds);
                    }
                }
                Op::AddChannelBias => {
                    if req[ins[1].0] {
                        accumulate(&mut grads[ins[1].0], ops::channel_sums(&g));
                    }
                    if req[ins[0].0] {
                        accumulate(&mut grads[ins[0].0], g.clone());
                    }
                }
                Op::Add => {
                    if req[ins[1].0] {
                        accumulate(&mut grads[ins[1].0], g.clone());
                    }
                    if req[ins[0].0] {
                        accumulate(&mut grads[ins[0].0], g.clone());
                    }
                }
                Op::BatchNorm(_) => {
                    let cache = &self.bn_caches[&NodeId(idx)];
                    let (dx, dg, db) = ops::batchnorm_backward(&g, val(ins[1]), cache);
                    if req[ins[0].0] {
                        accumulate(&mut grads[ins[0].0], dx);
                    }
                    if req[ins[1].0] {
                        accumulate(&mut grads[ins[1].0], dg);
                    }
                    if req[ins[2].0] {
                        accumulate(&mut grads[ins[2].0], db);
                    }
                }
                Op::Relu => {
                    if req[ins[0].0] {
                        accumulate(&mut grads[ins[0].0], ops::relu_backward(val(ins[0]), &g));
                    }
                }
                Op::GlobalAvgPool => {
                    if req[ins[0].0] {
                        let dx = ops::global_avg_pool_backward(val(ins[0]).shape(), &g);
                        accumulate(&mut grads[ins[0].0], dx);
                    }
                }
                Op::Linear => {
                    let (dx, dw, db) = ops::linear_backward(val(ins[0]), val(ins[1]), &g);
                    if req[ins[0].0] {
                        accumulate(&mut grads[ins[0].0], dx);
                    }
                    if req[ins[1].0] {
                        accumulate(&mut grads[ins[1].0], dw);
                    }
                    if req[ins[2].0] {
                        accumulate(&mut grads[ins[2].0], db);
                    }
                }
                Op::SumAll => {
                    if req[ins[0].0] {
                        let x = val(ins[0]);
                        accumulate(&mut grads[ins[0].0], Tensor::filled(x.shape(), g.data()[0]));
                    }
                }
                Op::CrossEntropy { smoothing } => {
                    if req[ins[0].0] {
                        let labels = self.labels.as_ref().expect("labels checked in forward");
                        let (_, dl) = ops::cross_entropy(val(ins[0]), labels, *smoothing)?;
                        accumulate(&mut grads[ins[0].0], dl.scale(g.data()[0]));
                    }
                }
            }
            grads[idx] = Some(g);
        }

        let per_param = self
            .param_info
            .iter()
            .zip(&self.param_values)
            .map(|(info, v)| {
                info.trainable
                    .then(|| grads[info.node.0].clone().unwrap_or_else(|| Tensor::zeros(v.shape())))
            })
            .collect();
        self.grads = grads;
        Ok(Gradients { per_param })
    }

    /// Per-node output shapes for the given input shapes, without computing values.
    pub fn infer_shapes(&self, inputs: &[(NodeId, Shape)]) -> Result<Vec<Shape>> {
        let feeds: HashMap<NodeId, Shape> = inputs.iter().cloned().collect();
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let s = |i: usize| shapes[node.inputs[i].0];
            let shape = match &node.op {
                Op::Input => *feeds
                    .get(&NodeId(idx))
                    .ok_or_else(|| Error::Usage(format!("no shape given for input '{}'", node.name)))?,
                Op::Param(p) => self.param_values[p.0].shape(),
                Op::Constant(t) => t.shape(),
                Op::Conv2d { stride, padding } => ops::conv_output_shape(s(0), s(1), *stride, *padding)?,
                Op::ChannelScale | Op::AddChannelBias | Op::BatchNorm(_) | Op::Relu => s(0),
                Op::Add => {
                    if s(0) != s(1) {
                        return Err(Error::shape("add", &s(0), &s(1)));
                    }
                    s(0)
                }
                Op::GlobalAvgPool => [s(0)[0], s(0)[1], 1, 1],
                Op::Linear => [s(0)[0], s(1)[0], 1, 1],
                Op::SumAll | Op::CrossEntropy { .. } => [1, 1, 1, 1],
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }

    /// Multiply–accumulate count of conv and fully connected layers for one
    /// sample of the given input shape (batch-norm, ReLU and adds excluded).
    pub fn macs(&self, input: NodeId, input_shape: Shape) -> Result<u64> {
        let mut shape = input_shape;
        shape[0] = 1;
        let shapes = self.infer_shapes(&[(input, shape)])?;
        let mut total = 0u64;
        for (idx, node) in self.nodes.iter().enumerate() {
            match node.op {
                Op::Conv2d { .. } => {
                    let k = shapes[node.inputs[1].0];
                    total += (numel(shapes[idx]) * k[1] * k[2] * k[3]) as u64;
                }
                Op::Linear => {
                    let w = shapes[node.inputs[1].0];
                    total += numel(w) as u64;
                }
                _ => {}
            }
        }
        Ok(total)
    }
}

/// Node and parameter slots created by [`Graph::batchnorm`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchNormHandle {
    pub output: NodeId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub state: BnId,
}
