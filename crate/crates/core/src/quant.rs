//! Symmetric per-tensor INT8 post-training quantization and kernel
//! position statistics.
//!
//! Recipe of [`ptq_model`], applied to an eval-mode network:
//!
//! 1. Every weight feeding a conv or fully connected layer is replaced by
//!    `dequantize(quantize_int8(w))` with `scale = max|w| / 127`.
//! 2. Every activation feeding a conv or fully connected layer (including
//!    the network input) is fake-quantized with `scale = max|a| / 127`,
//!    where `max|a|` is the largest magnitude seen over the calibration set
//!    with float weights.
//! 3. Biases, batch-norm parameters and everything else stay in float.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Mode, NodeId, Op};
use crate::models::Network;
use crate::tensor::{Shape, Tensor};

pub const QMAX: i32 = 127;

/// Scale used when a tensor is identically zero.
pub const SCALE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i32,
    pub bits: u32,
}

impl QuantParams {
    /// Symmetric parameters covering `[-max_abs, max_abs]`.
    pub fn symmetric(max_abs: f64) -> Self {
        QuantParams {
            scale: (max_abs / QMAX as f64).max(SCALE_FLOOR),
            zero_point: 0,
            bits: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub shape: Shape,
    pub values: Vec<i8>,
    pub params: QuantParams,
}

fn quantize_value(x: f64, scale: f64) -> i8 {
    (x / scale).round().clamp(-(QMAX as f64), QMAX as f64) as i8
}

/// Per-tensor symmetric quantization.
pub fn quantize_int8(t: &Tensor) -> QuantizedTensor {
    let params = QuantParams::symmetric(t.max_abs());
    QuantizedTensor {
        shape: t.shape(),
        values: t.data().iter().map(|&x| quantize_value(x, params.scale)).collect(),
        params,
    }
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let data = q
        .values
        .iter()
        .map(|&v| (v as i32 - q.params.zero_point) as f64 * q.params.scale)
        .collect();
    Tensor::from_vec(q.shape, data).expect("dequantized values are finite")
}

/// Round to the nearest representable value of the INT8 grid with the
/// given scale, saturating at ±127·scale.
pub fn fake_quantize(t: &Tensor, scale: f64) -> Tensor {
    t.map(|x| quantize_value(x, scale) as f64 * scale)
}

/// Per-layer statistics reported by [`ptq_model`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PtqLayer {
    pub layer: String,
    pub weight_scale: f64,
    pub activation_scale: f64,
}

/// Quantized copy of `net`. `calibration` batches are forwarded in eval mode
/// to collect activation ranges.
pub fn ptq_model(net: &Network, calibration: &[Tensor]) -> Result<(Network, Vec<PtqLayer>)> {
    if calibration.is_empty() || calibration.iter().all(|b| b.shape()[0] == 0) {
        return Err(Error::InvalidArgument("post-training quantization needs a non-empty calibration set".into()));
    }
    let layers = weighted_layers(net);
    let mut float = net.clone();
    float.set_mode(Mode::Eval);
    let mut ranges = vec![0.0f64; layers.len()];
    for batch in calibration {
        let labels = vec![0; batch.shape()[0]];
        float.forward(batch.clone(), labels)?;
        for (r, (_, (act, _))) in ranges.iter_mut().zip(&layers) {
            *r = r.max(float.graph.value(*act)?.max_abs());
        }
    }
    let mut q = quantize_weights(net);
    q.set_mode(Mode::Eval);
    let mut report = Vec::new();
    for (range, (layer, (act, w))) in ranges.iter().zip(&layers) {
        let a = QuantParams::symmetric(*range);
        q.graph.set_output_quant(*act, Some(a.scale));
        let ws = match net.graph.node(*w).op {
            Op::Param(p) => QuantParams::symmetric(net.graph.param_value(p).max_abs()).scale,
            _ => f64::NAN,
        };
        report.push(PtqLayer {
            layer: net.graph.node(*layer).name.clone(),
            weight_scale: ws,
            activation_scale: a.scale,
        });
    }
    Ok((q, report))
}

/// Weights-only variant of [`ptq_model`].
pub fn quantize_weights(net: &Network) -> Network {
    let mut q = net.clone();
    for (_, (_, w)) in weighted_layers(&q) {
        let pid = match q.graph.node(w).op {
            Op::Param(p) => p,
            _ => continue,
        };
        let deq = dequantize(&quantize_int8(q.graph.param_value(pid)));
        q.graph.set_param(pid, deq).expect("same shape");
    }
    q
}

/// (layer node, (activation input, weight input)) of every conv / FC layer.
fn weighted_layers(net: &Network) -> Vec<(NodeId, (NodeId, NodeId))> {
    net.graph
        .nodes()
        .iter()
        .enumerate()
        .filter(|(_, n)| matches!(n.op, Op::Conv2d { .. } | Op::Linear))
        .map(|(i, n)| (NodeId(i), (n.inputs[0], n.inputs[1])))
        .collect()
}

/// Spread of a 3×3 kernel's values by position.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelStats {
    pub std_overall: f64,
    pub std_central: f64,
    pub std_surrounding: f64,
}

fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Population standard deviations over all entries, over the center
/// positions and over the eight surrounding positions of a 3×3 kernel.
pub fn kernel_position_stats(kernel: &Tensor) -> Result<KernelStats> {
    let [_, _, kh, kw] = kernel.shape();
    if kh != 3 || kw != 3 {
        return Err(Error::shape("kernel position stats", &[3, 3], &[kh, kw]));
    }
    let mut central = Vec::new();
    let mut surrounding = Vec::new();
    for (i, &v) in kernel.data().iter().enumerate() {
        if i % 9 == 4 {
            central.push(v);
        } else {
            surrounding.push(v);
        }
    }
    Ok(KernelStats {
        std_overall: population_std(kernel.data()),
        std_central: population_std(&central),
        std_surrounding: population_std(&surrounding),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn zeros_use_the_floor() {
        let q = quantize_int8(&Tensor::zeros([1, 2, 2, 2]));
        assert_eq!(q.params.scale, SCALE_FLOOR);
        assert!(q.values.iter().all(|&v| v == 0));
        assert_eq!(dequantize(&q), Tensor::zeros([1, 2, 2, 2]));
    }

    #[test]
    fn plus_minus_one() {
        let t = Tensor::from_vec([1, 1, 1, 2], vec![-1.0, 1.0]).unwrap();
        let q = quantize_int8(&t);
        assert_eq!(q.params.scale, 1.0 / 127.0);
        assert_eq!(q.values, vec![-127, 127]);
        assert!(dequantize(&q).max_abs_diff(&t).unwrap() <= 1.0 / 254.0);
    }

    #[test]
    fn round_trip_error_within_half_scale() {
        let mut rng = Rng::new(4);
        for _ in 0..50 {
            let t = Tensor::from_fn([2, 3, 3, 3], |_| rng.normal(0.0, 3.0));
            let q = quantize_int8(&t);
            let back = dequantize(&q);
            for (a, b) in t.data().iter().zip(back.data()) {
                assert!((a - b).abs() <= q.params.scale / 2.0 * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn fake_quantize_saturates() {
        let t = Tensor::from_vec([1, 1, 1, 3], vec![-10.0, 0.26, 10.0]).unwrap();
        let f = fake_quantize(&t, 0.01);
        let want = [-127.0 * 0.01, 26.0 * 0.01, 127.0 * 0.01];
        assert_eq!(f.data(), &want);
    }

    #[test]
    fn constant_kernel_has_no_spread() {
        let s = kernel_position_stats(&Tensor::filled([4, 4, 3, 3], 0.25)).unwrap();
        assert_eq!((s.std_overall, s.std_central, s.std_surrounding), (0.0, 0.0, 0.0));
    }

    #[test]
    fn dirac_kernel_stats() {
        let k = Tensor::from_fn([2, 2, 3, 3], |[o, i, p, q]| if o == i && p == 1 && q == 1 { 1.0 } else { 0.0 });
        let s = kernel_position_stats(&k).unwrap();
        assert_eq!(s.std_central, 0.5);
        assert_eq!(s.std_surrounding, 0.0);
    }
}
