use super::*;
use crate::hypersearch::{init_hs_scales, ScalesFile};

/// Graph under construction plus the handles every family shares.
struct Skeleton {
    graph: Graph,
    input: NodeId,
}

impl Skeleton {
    fn new() -> Self {
        let mut graph = Graph::new();
        let input = graph.input("input");
        Skeleton { graph, input }
    }

    fn param(&mut self, name: &str, value: Tensor) -> (NodeId, ParamId) {
        self.graph.param(name, value, true)
    }

    /// conv → BN → ReLU
    fn conv_bn_relu(&mut self, x: NodeId, geometry: BlockGeometry, kernel: Tensor, name: &str) -> BlockHandles {
        let (k_node, k) = self.param(&format!("{name}.conv"), kernel);
        let pad = kernel_padding(self.graph.param_value(k).shape()[2]);
        let conv = self.graph.conv2d(x, k_node, geometry.stride, pad, &format!("{name}.conv"));
        let bn = self.graph.batchnorm(conv, geometry.c_out, &format!("{name}.bn"));
        let out = self.graph.relu(bn.output, &format!("{name}.relu"));
        let mut h = BlockHandles::new(geometry, k, conv, out);
        h.post_bn = Some(bn);
        h
    }

    fn head(mut self, x: NodeId, kind: ModelKind, spec: &ModelSpec, weights: &InitialWeights, stem: BlockHandles, blocks: Vec<BlockHandles>) -> Network {
        let pooled = self.graph.global_avg_pool(x, "head.pool");
        let (w_node, fc_weight) = self.param("head.fc.weight", weights.fc_weight.clone());
        let (b_node, fc_bias) = self.param("head.fc.bias", weights.fc_bias.clone());
        let logits = self.graph.linear(pooled, w_node, b_node, "head.fc");
        let loss = self.graph.cross_entropy(logits, 0.0, "loss");
        Network {
            kind,
            spec: spec.clone(),
            graph: self.graph,
            input: self.input,
            logits,
            loss,
            stem,
            blocks,
            fc_weight,
            fc_bias,
        }
    }
}

fn kernel_padding(k: usize) -> usize {
    k / 2
}

/// The plain target model: every block is a single 3×3 conv → BN → ReLU.
pub fn build_target(spec: &ModelSpec, init: Init) -> Result<Network> {
    spec.validate()?;
    let weights = init.weights(spec);
    let mut sk = Skeleton::new();
    let stem = sk.conv_bn_relu(sk.input, spec.stem_geometry(), weights.stem_3x3.clone(), "stem");
    let mut x = stem.output;
    let mut blocks = Vec::new();
    for (g, (ws, _)) in spec.blocks().into_iter().zip(&weights.blocks) {
        let h = sk.conv_bn_relu(x, g, ws.clone(), &format!("block{}", g.index));
        x = h.output;
        blocks.push(h);
    }
    Ok(sk.head(x, ModelKind::Target, spec, &weights, stem, blocks))
}

enum CslaScales<'a> {
    Constant(&'a ScalesFile),
    Trainable,
}

fn build_csla_like(spec: &ModelSpec, scales: CslaScales, init: Init) -> Result<Network> {
    spec.validate()?;
    if let CslaScales::Constant(f) = &scales {
        f.check_against(spec)?;
    }
    let weights = init.weights(spec);
    let mut sk = Skeleton::new();
    let stem = sk.conv_bn_relu(sk.input, spec.stem_geometry(), weights.stem_3x3.clone(), "stem");
    let mut x = stem.output;
    let mut blocks = Vec::new();
    for (g, (ws, wt)) in spec.blocks().into_iter().zip(&weights.blocks) {
        let name = format!("block{}", g.index);
        let c = g.c_out;
        let (s_slot, t_slot, s_node, t_node) = match &scales {
            CslaScales::Constant(f) => {
                let r = &f.blocks[g.index];
                let s_node = sk.graph.constant(&format!("{name}.s"), Tensor::channel_vector(&r.s));
                let t_node = sk.graph.constant(&format!("{name}.t"), Tensor::channel_vector(&r.t));
                (ScaleSlot::Constant(r.s.clone()), ScaleSlot::Constant(r.t.clone()), s_node, t_node)
            }
            CslaScales::Trainable => {
                let v = init_hs_scale_for(&g);
                let (s_node, s) = sk.param(&format!("{name}.s"), Tensor::channel_vector(&vec![v; c]));
                let (t_node, t) = sk.param(&format!("{name}.t"), Tensor::channel_vector(&vec![v; c]));
                (ScaleSlot::Trainable(s), ScaleSlot::Trainable(t), s_node, t_node)
            }
        };
        let (ws_node, ws_id) = sk.param(&format!("{name}.conv"), ws.clone());
        let (wt_node, wt_id) = sk.param(&format!("{name}.conv1x1"), wt.clone());
        let a = sk.graph.conv2d(x, ws_node, g.stride, 1, &format!("{name}.conv"));
        let a = sk.graph.channel_scale(a, s_node, &format!("{name}.scale_s"));
        let b = sk.graph.conv2d(x, wt_node, g.stride, 0, &format!("{name}.conv1x1"));
        let b = sk.graph.channel_scale(b, t_node, &format!("{name}.scale_t"));
        let mut sum = sk.graph.add(a, b, &format!("{name}.add"));
        let mut identity_scale = None;
        let mut identity_node = None;
        if g.has_identity {
            let (gamma_node, gamma) = sk.param(&format!("{name}.identity_scale"), Tensor::channel_vector(&vec![1.0; c]));
            let id = sk.graph.channel_scale(x, gamma_node, &format!("{name}.identity"));
            sum = sk.graph.add(sum, id, &format!("{name}.add_identity"));
            identity_scale = Some(gamma);
            identity_node = Some(id);
        }
        let bn = sk.graph.batchnorm(sum, c, &format!("{name}.bn"));
        let out = sk.graph.relu(bn.output, &format!("{name}.relu"));
        let mut h = BlockHandles::new(g, ws_id, sum, out);
        h.kernel_1x1 = Some(wt_id);
        h.identity_scale = identity_scale;
        h.identity_node = identity_node;
        h.s = Some(s_slot);
        h.t = Some(t_slot);
        h.post_bn = Some(bn);
        x = out;
        blocks.push(h);
    }
    let kind = match scales {
        CslaScales::Constant(_) => ModelKind::Csla,
        CslaScales::Trainable => ModelKind::HyperSearch,
    };
    Ok(sk.head(x, kind, spec, &weights, stem, blocks))
}

/// Initial value of an HS block's trainable s and t: √(2/l) for the l-th
/// identity-bearing block of its stage, 1 for blocks without identity.
pub fn init_hs_scale_for(g: &BlockGeometry) -> f64 {
    g.identity_depth.map(init_hs_scales).unwrap_or(1.0)
}

/// The imaginary CSLA model with constant scales from `scales`.
pub fn build_csla(spec: &ModelSpec, scales: &ScalesFile, init: Init) -> Result<Network> {
    build_csla_like(spec, CslaScales::Constant(scales), init)
}

/// The hyper-search model: the CSLA model with trainable s and t.
pub fn build_hypersearch(spec: &ModelSpec, init: Init) -> Result<Network> {
    build_csla_like(spec, CslaScales::Trainable, init)
}

/// Three-branch RepVGG block on `x`.
fn repvgg_block(sk: &mut Skeleton, x: NodeId, g: BlockGeometry, ws: &Tensor, wt: &Tensor, name: &str) -> BlockHandles {
    let c = g.c_out;
    let (ws_node, ws_id) = sk.param(&format!("{name}.conv"), ws.clone());
    let (wt_node, wt_id) = sk.param(&format!("{name}.conv1x1"), wt.clone());
    let a = sk.graph.conv2d(x, ws_node, g.stride, 1, &format!("{name}.conv"));
    let bn_a = sk.graph.batchnorm(a, c, &format!("{name}.bn"));
    let b = sk.graph.conv2d(x, wt_node, g.stride, 0, &format!("{name}.conv1x1"));
    let bn_b = sk.graph.batchnorm(b, c, &format!("{name}.bn1x1"));
    let mut sum = sk.graph.add(bn_a.output, bn_b.output, &format!("{name}.add"));
    let mut bn_id = None;
    let mut identity_node = None;
    if g.has_identity {
        let bn = sk.graph.batchnorm(x, c, &format!("{name}.bn_identity"));
        sum = sk.graph.add(sum, bn.output, &format!("{name}.add_identity"));
        identity_node = Some(bn.output);
        bn_id = Some(bn);
    }
    let out = sk.graph.relu(sum, &format!("{name}.relu"));
    let mut h = BlockHandles::new(g, ws_id, sum, out);
    h.kernel_1x1 = Some(wt_id);
    h.bn_3x3 = Some(bn_a);
    h.bn_1x1 = Some(bn_b);
    h.bn_identity = bn_id;
    h.identity_node = identity_node;
    h
}

fn single_block_geometry(c_in: usize, c_out: usize, stride: usize) -> BlockGeometry {
    let id = has_identity(c_in, c_out, stride);
    BlockGeometry {
        index: 0,
        stage: 0,
        layer: 0,
        c_in,
        c_out,
        stride,
        has_identity: id,
        identity_depth: id.then_some(1),
    }
}

fn single_block_spec(c_in: usize, c_out: usize, num_classes: usize) -> ModelSpec {
    ModelSpec {
        in_channels: c_in,
        stem_channels: c_in,
        stages: vec![StageSpec { layers: 1, channels: c_out }],
        num_classes,
        input_hw: 8,
    }
}

/// Finish a one-block network; the block doubles as the stem handle.
fn single_block_head(sk: Skeleton, block: BlockHandles, kind: ModelKind, num_classes: usize, fc: (Tensor, Tensor)) -> Network {
    let g = block.geometry;
    let spec = single_block_spec(g.c_in, g.c_out, num_classes);
    let weights = InitialWeights {
        stem_3x3: Tensor::zeros([1, 1, 1, 1]),
        stem_1x1: Tensor::zeros([1, 1, 1, 1]),
        blocks: vec![],
        fc_weight: fc.0,
        fc_bias: fc.1,
    };
    let out = block.output;
    sk.head(out, kind, &spec, &weights, block.clone(), vec![block])
}

impl Network {
    /// True for the one-block networks of [`build_repvgg_block`] and
    /// [`build_deploy_block`].
    pub fn is_single_block(&self) -> bool {
        self.blocks.len() == 1 && self.stem.output == self.blocks[0].output
    }
}

/// A standalone RepVGG block network: input → block → (pool → FC head).
/// Useful for conversion checks on a single block.
pub fn build_repvgg_block(c_in: usize, c_out: usize, stride: usize, num_classes: usize, seed: u64) -> Network {
    let mut rng = Rng::stream(seed, INIT_STREAM);
    let g = single_block_geometry(c_in, c_out, stride);
    let ws = msra_init_with([c_out, c_in, 3, 3], &mut rng);
    let wt = msra_init_with([c_out, c_in, 1, 1], &mut rng);
    let mut sk = Skeleton::new();
    let input = sk.input;
    let block = repvgg_block(&mut sk, input, g, &ws, &wt, "block0");
    let fc = (fan_in_uniform_with([num_classes, c_out, 1, 1], &mut rng), Tensor::zeros([1, num_classes, 1, 1]));
    single_block_head(sk, block, ModelKind::RepVgg, num_classes, fc)
}

/// One conv + bias → ReLU block with a pool → FC head.
pub fn build_deploy_block(stride: usize, kernel: Tensor, bias: Vec<f64>, fc: (Tensor, Tensor)) -> Result<Network> {
    let [c_out, c_in, _, _] = kernel.shape();
    let g = single_block_geometry(c_in, c_out, stride);
    let num_classes = fc.0.shape()[0];
    let mut sk = Skeleton::new();
    let input = sk.input;
    let block = conv_bias_relu(&mut sk, input, g, kernel, bias, "block0")?;
    Ok(single_block_head(sk, block, ModelKind::Deploy, num_classes, fc))
}

fn conv_bias_relu(sk: &mut Skeleton, x: NodeId, g: BlockGeometry, kernel: Tensor, bias: Vec<f64>, name: &str) -> Result<BlockHandles> {
    let want = [g.c_out, g.c_in, 3, 3];
    if kernel.shape() != want {
        return Err(Error::layer(name, format!("kernel shape {:?}, expected {want:?}", kernel.shape())));
    }
    if bias.len() != g.c_out {
        return Err(Error::layer(name, format!("{} bias values for {} channels", bias.len(), g.c_out)));
    }
    let (k_node, k) = sk.param(&format!("{name}.conv"), kernel);
    let (b_node, b) = sk.param(&format!("{name}.bias"), Tensor::channel_vector(&bias));
    let conv = sk.graph.conv2d(x, k_node, g.stride, 1, &format!("{name}.conv"));
    let sum = sk.graph.add_channel_bias(conv, b_node, &format!("{name}.bias"));
    let out = sk.graph.relu(sum, &format!("{name}.relu"));
    let mut h = BlockHandles::new(g, k, sum, out);
    h.bias = Some(b);
    Ok(h)
}

/// Training-time RepVGG: 3×3+BN, 1×1+BN and identity-BN branches, summed, ReLU.
/// The stem is a RepVGG block without identity.
pub fn build_repvgg(spec: &ModelSpec, init: Init) -> Result<Network> {
    spec.validate()?;
    let weights = init.weights(spec);
    let mut sk = Skeleton::new();
    let input = sk.input;
    let stem = repvgg_block(&mut sk, input, spec.stem_geometry(), &weights.stem_3x3, &weights.stem_1x1, "stem");
    let mut x = stem.output;
    let mut blocks = Vec::new();
    for (g, (ws, wt)) in spec.blocks().into_iter().zip(&weights.blocks) {
        let h = repvgg_block(&mut sk, x, g, ws, wt, &format!("block{}", g.index));
        x = h.output;
        blocks.push(h);
    }
    Ok(sk.head(x, ModelKind::RepVgg, spec, &weights, stem, blocks))
}

/// Inference-form plain model: conv(+bias) → ReLU per block, with the given
/// fused kernels and biases for the stem and every block.
pub fn build_deploy(spec: &ModelSpec, stem: (Tensor, Vec<f64>), blocks: Vec<(Tensor, Vec<f64>)>, fc: (Tensor, Tensor)) -> Result<Network> {
    spec.validate()?;
    let geoms = spec.blocks();
    if geoms.len() != blocks.len() {
        return Err(Error::layer("deploy", format!("expected {} block kernels, got {}", geoms.len(), blocks.len())));
    }
    let mut sk = Skeleton::new();
    let input = sk.input;
    let stem = conv_bias_relu(&mut sk, input, spec.stem_geometry(), stem.0, stem.1, "stem")?;
    let mut x = stem.output;
    let mut handles = Vec::new();
    for (g, (k, b)) in geoms.into_iter().zip(blocks) {
        let h = conv_bias_relu(&mut sk, x, g, k, b, &format!("block{}", g.index))?;
        x = h.output;
        handles.push(h);
    }
    let weights = InitialWeights {
        stem_3x3: Tensor::zeros([1, 1, 1, 1]),
        stem_1x1: Tensor::zeros([1, 1, 1, 1]),
        blocks: vec![],
        fc_weight: fc.0,
        fc_bias: fc.1,
    };
    Ok(sk.head(x, ModelKind::Deploy, spec, &weights, stem, handles))
}

/// Per-block constants of the RepGhost-style CSLA: `a` scales the trainable
/// channel-wise scaling branch, `b` scales the 1×1 conv branch.
#[derive(Clone, Debug, PartialEq)]
pub struct GhostScales {
    pub blocks: Vec<(Vec<f64>, Vec<f64>)>,
}

impl GhostScales {
    pub fn uniform(spec: &ModelSpec, a: f64, b: f64) -> Self {
        GhostScales {
            blocks: spec.blocks().iter().map(|g| (vec![a; g.c_out], vec![b; g.c_out])).collect(),
        }
    }
}

/// RepGhost-style variant: each stage block is `b⊙conv1×1(x) + a⊙(γ⊙x)` →
/// BN → ReLU. Blocks that change shape keep only the 1×1 branch, and
/// `with_scaling_branch = false` removes the scaling branch everywhere,
/// leaving plain 1×1 convs.
pub fn build_repghost_variant(spec: &ModelSpec, scales: &GhostScales, with_scaling_branch: bool, init: Init) -> Result<Network> {
    spec.validate()?;
    let geoms = spec.blocks();
    if scales.blocks.len() != geoms.len() {
        return Err(Error::layer("scales", format!("expected {} records, got {}", geoms.len(), scales.blocks.len())));
    }
    let weights = init.weights(spec);
    let mut sk = Skeleton::new();
    let stem = sk.conv_bn_relu(sk.input, spec.stem_geometry(), weights.stem_3x3.clone(), "stem");
    let mut x = stem.output;
    let mut blocks = Vec::new();
    for ((g, (_, wt)), (a, b)) in geoms.into_iter().zip(&weights.blocks).zip(&scales.blocks) {
        let name = format!("block{}", g.index);
        if a.len() != g.c_out || b.len() != g.c_out {
            return Err(Error::layer(&name, format!("scales need {} channels", g.c_out)));
        }
        let (w_node, w) = sk.param(&format!("{name}.conv1x1"), wt.clone());
        let conv = sk.graph.conv2d(x, w_node, g.stride, 0, &format!("{name}.conv1x1"));
        let mut sum = conv;
        let mut t_slot = None;
        let mut s_slot = None;
        let mut identity_scale = None;
        let mut identity_node = None;
        if with_scaling_branch && g.has_identity {
            let b_node = sk.graph.constant(&format!("{name}.b"), Tensor::channel_vector(b));
            let scaled = sk.graph.channel_scale(conv, b_node, &format!("{name}.scale_b"));
            let (gamma_node, gamma) = sk.param(&format!("{name}.identity_scale"), Tensor::channel_vector(&vec![1.0; g.c_out]));
            let a_node = sk.graph.constant(&format!("{name}.a"), Tensor::channel_vector(a));
            let id = sk.graph.channel_scale(x, gamma_node, &format!("{name}.identity"));
            let id = sk.graph.channel_scale(id, a_node, &format!("{name}.scale_a"));
            sum = sk.graph.add(scaled, id, &format!("{name}.add"));
            s_slot = Some(ScaleSlot::Constant(a.clone()));
            t_slot = Some(ScaleSlot::Constant(b.clone()));
            identity_scale = Some(gamma);
            identity_node = Some(id);
        }
        let bn = sk.graph.batchnorm(sum, g.c_out, &format!("{name}.bn"));
        let out = sk.graph.relu(bn.output, &format!("{name}.relu"));
        let mut h = BlockHandles::new(g, w, sum, out);
        h.s = s_slot;
        h.t = t_slot;
        h.identity_scale = identity_scale;
        h.identity_node = identity_node;
        h.post_bn = Some(bn);
        x = out;
        blocks.push(h);
    }
    Ok(sk.head(x, ModelKind::RepGhost, spec, &weights, stem, blocks))
}

/// ResNet-style reference for the identity-variance study. Each stage block is
/// conv3×3-BN-ReLU-conv3×3-BN plus a shortcut, ReLU after the addition. The
/// first block of a stage uses a 1×1 conv + BN projection shortcut (no
/// identity path); the stem is conv3×3-BN-ReLU at stride 2.
pub fn build_resnet_reference(spec: &ModelSpec, init: Init) -> Result<Network> {
    spec.validate()?;
    let seed = match init {
        Init::Seeded(s) => Some(s),
        Init::Zeros => None,
    };
    let mut rng = Rng::stream(seed.unwrap_or(0), INIT_STREAM ^ 0x5e5);
    let mut draw = |shape: [usize; 4]| match seed {
        Some(_) => msra_init_with(shape, &mut rng),
        None => Tensor::zeros(shape),
    };
    let mut sk = Skeleton::new();
    let stem_kernel = draw([spec.stem_channels, spec.in_channels, 3, 3]);
    let stem = sk.conv_bn_relu(sk.input, spec.stem_geometry(), stem_kernel, "stem");
    let mut x = stem.output;
    let mut blocks = Vec::new();
    for g in spec.blocks() {
        let name = format!("block{}", g.index);
        let ka = draw([g.c_out, g.c_in, 3, 3]);
        let kb = draw([g.c_out, g.c_out, 3, 3]);
        let (a_node, a_id) = sk.param(&format!("{name}.conv_a"), ka);
        let conv_a = sk.graph.conv2d(x, a_node, g.stride, 1, &format!("{name}.conv_a"));
        let bn_a = sk.graph.batchnorm(conv_a, g.c_out, &format!("{name}.bn_a"));
        let mid = sk.graph.relu(bn_a.output, &format!("{name}.relu_a"));
        let (b_node, b_id) = sk.param(&format!("{name}.conv_b"), kb);
        let conv_b = sk.graph.conv2d(mid, b_node, 1, 1, &format!("{name}.conv_b"));
        let bn_b = sk.graph.batchnorm(conv_b, g.c_out, &format!("{name}.bn_b"));
        let (shortcut, identity_node) = if g.has_identity {
            (x, Some(x))
        } else {
            let kp = draw([g.c_out, g.c_in, 1, 1]);
            let (p_node, _) = sk.param(&format!("{name}.proj"), kp);
            let proj = sk.graph.conv2d(x, p_node, g.stride, 0, &format!("{name}.proj"));
            let bn_p = sk.graph.batchnorm(proj, g.c_out, &format!("{name}.bn_proj"));
            (bn_p.output, None)
        };
        let sum = sk.graph.add(bn_b.output, shortcut, &format!("{name}.add"));
        let out = sk.graph.relu(sum, &format!("{name}.relu"));
        let mut h = BlockHandles::new(g, a_id, sum, out);
        h.kernel_b = Some(b_id);
        h.post_bn = Some(bn_a);
        h.bn_b = Some(bn_b);
        h.identity_node = identity_node;
        x = out;
        blocks.push(h);
    }
    let f = spec.final_channels();
    let weights = InitialWeights {
        stem_3x3: Tensor::zeros([1, 1, 1, 1]),
        stem_1x1: Tensor::zeros([1, 1, 1, 1]),
        blocks: vec![],
        fc_weight: match seed {
            Some(_) => fan_in_uniform_with([spec.num_classes, f, 1, 1], &mut rng),
            None => Tensor::zeros([spec.num_classes, f, 1, 1]),
        },
        fc_bias: Tensor::zeros([1, spec.num_classes, 1, 1]),
    };
    Ok(sk.head(x, ModelKind::ResNet, spec, &weights, stem, blocks))
}
