//! Gradient multipliers and equivalent kernels of CSLA blocks.
//!
//! A CSLA block is a sum of branches, each a single linear trainable operator
//! followed by a constant per-output-channel scale. Collapsing it into one
//! K×K kernel `W'` gives
//!
//! ```text
//! W'[c,d,p,q]  = Σ_b scale_b[c] · W_b[c,d,p,q]      (where branch b covers (c,d,p,q))
//! M [c,d,p,q]  = Σ_b scale_b[c]²                     (same coverage)
//! ```
//!
//! A k×k conv branch covers the centered k×k window of every (c, d) pair; a
//! channel-wise scaling branch (a depthwise 1×1 conv) covers only the center of
//! the diagonal c == d. Training `W'` with gradients multiplied by `M`
//! reproduces the CSLA block's training dynamics step for step.

use crate::error::{Error, Result};
use crate::models::CslaBlockSpec;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchOp {
    /// Full conv with a centered `kernel`×`kernel` window.
    Conv { kernel: usize },
    /// Trainable channel-wise scaling (depthwise 1×1 conv); needs c_in == c_out.
    ChannelScale,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CslaBranch {
    pub op: BranchOp,
    /// Constant scale per output channel.
    pub scale: Vec<f64>,
}

/// Branch structure of a CSLA block collapsed onto a `kernel`×`kernel` conv.
#[derive(Clone, Debug, PartialEq)]
pub struct CslaLayout {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub branches: Vec<CslaBranch>,
}

impl CslaLayout {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, branches: Vec<CslaBranch>) -> Result<Self> {
        for b in &branches {
            if b.scale.len() != c_out {
                return Err(Error::InvalidArgument(format!(
                    "branch scale has {} entries, block has {c_out} output channels",
                    b.scale.len()
                )));
            }
            match b.op {
                BranchOp::Conv { kernel: k } if k > kernel || (kernel - k) % 2 != 0 => {
                    return Err(Error::InvalidArgument(format!("a {k}×{k} branch cannot be centered in a {kernel}×{kernel} kernel")));
                }
                BranchOp::ChannelScale if c_in != c_out || kernel % 2 == 0 => {
                    return Err(Error::InvalidArgument("channel-wise scaling needs c_in == c_out and an odd kernel".into()));
                }
                _ => {}
            }
        }
        Ok(CslaLayout {
            c_in,
            c_out,
            kernel,
            branches,
        })
    }

    /// RepOpt-VGG block: s⊙conv3×3 + t⊙conv1×1 (+ 1⊙(γ⊙x) with identity).
    pub fn repopt(block: &CslaBlockSpec) -> Self {
        let mut branches = vec![
            CslaBranch {
                op: BranchOp::Conv { kernel: 3 },
                scale: block.s.clone(),
            },
            CslaBranch {
                op: BranchOp::Conv { kernel: 1 },
                scale: block.t.clone(),
            },
        ];
        if block.has_identity {
            branches.push(CslaBranch {
                op: BranchOp::ChannelScale,
                scale: vec![1.0; block.c_out],
            });
        }
        CslaLayout {
            c_in: block.c_in,
            c_out: block.c_out,
            kernel: 3,
            branches,
        }
    }

    /// Two same-shape conv branches with scalar constants α_A, α_B.
    pub fn two_branch_scalar(c_in: usize, c_out: usize, kernel: usize, alpha_a: f64, alpha_b: f64) -> Self {
        CslaLayout {
            c_in,
            c_out,
            kernel,
            branches: vec![
                CslaBranch {
                    op: BranchOp::Conv { kernel },
                    scale: vec![alpha_a; c_out],
                },
                CslaBranch {
                    op: BranchOp::Conv { kernel },
                    scale: vec![alpha_b; c_out],
                },
            ],
        }
    }

    /// RepGhost-style block: b⊙conv1×1 + a⊙(γ⊙x).
    pub fn ghost(channels: usize, a: &[f64], b: &[f64]) -> Result<Self> {
        Self::new(
            channels,
            channels,
            1,
            vec![
                CslaBranch {
                    op: BranchOp::Conv { kernel: 1 },
                    scale: b.to_vec(),
                },
                CslaBranch {
                    op: BranchOp::ChannelScale,
                    scale: a.to_vec(),
                },
            ],
        )
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.kernel, self.kernel]
    }

    /// Shape of branch `b`'s trainable tensor.
    pub fn branch_shape(&self, b: usize) -> [usize; 4] {
        match self.branches[b].op {
            BranchOp::Conv { kernel } => [self.c_out, self.c_in, kernel, kernel],
            BranchOp::ChannelScale => [1, self.c_out, 1, 1],
        }
    }

    /// Visit every kernel position a branch covers, with the branch tensor's
    /// flat index for that position.
    fn for_each_covered(&self, b: usize, mut f: impl FnMut(usize, usize, usize)) {
        let k_full = self.kernel;
        let center = k_full / 2;
        match self.branches[b].op {
            BranchOp::Conv { kernel } => {
                let off = (k_full - kernel) / 2;
                for c in 0..self.c_out {
                    for d in 0..self.c_in {
                        for p in 0..kernel {
                            for q in 0..kernel {
                                let dst = ((c * self.c_in + d) * k_full + p + off) * k_full + q + off;
                                let src = ((c * self.c_in + d) * kernel + p) * kernel + q;
                                f(c, dst, src);
                            }
                        }
                    }
                }
            }
            BranchOp::ChannelScale => {
                for c in 0..self.c_out {
                    let dst = ((c * self.c_in + c) * k_full + center) * k_full + center;
                    f(c, dst, c);
                }
            }
        }
    }

    /// The Grad Mult tensor M of the collapsed kernel.
    pub fn grad_mult(&self) -> Tensor {
        let mut m = Tensor::zeros(self.kernel_shape());
        for b in 0..self.branches.len() {
            let scale = &self.branches[b].scale;
            let data = m.data_mut();
            self.for_each_covered(b, |c, dst, _| data[dst] += scale[c] * scale[c]);
        }
        m
    }

    /// Collapse branch tensors into the single equivalent kernel.
    pub fn equivalent_kernel(&self, weights: &[&Tensor]) -> Result<Tensor> {
        if weights.len() != self.branches.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} branch tensors, got {}",
                self.branches.len(),
                weights.len()
            )));
        }
        let mut out = Tensor::zeros(self.kernel_shape());
        for (b, w) in weights.iter().enumerate() {
            let want = self.branch_shape(b);
            if w.shape() != want {
                return Err(Error::shape("equivalent kernel branch", &want, &w.shape()));
            }
            let scale = &self.branches[b].scale;
            let src = w.data();
            let data = out.data_mut();
            self.for_each_covered(b, |c, dst, s| data[dst] += scale[c] * src[s]);
        }
        Ok(out)
    }

    /// Map per-branch gradients onto the collapsed kernel:
    /// Σ_b scale_b[c] · dL/dW_b placed at the covered positions. This is the
    /// change of the equivalent kernel that one plain SGD step on the branches
    /// produces (per unit learning rate).
    pub fn combine_branch_grads(&self, grads: &[&Tensor]) -> Result<Tensor> {
        self.equivalent_kernel(grads)
    }
}

/// Grad Mult of a square RepOpt-VGG 3×3 layer (C×C×3×3):
/// `1 + s_c² + t_c²` on diagonal centers with identity, `s_c² + t_c²` on
/// other centers, `s_c²` elsewhere.
pub fn build_grad_mult(s: &[f64], t: &[f64], has_identity: bool) -> Result<Tensor> {
    if s.len() != t.len() {
        return Err(Error::InvalidArgument(format!("s has {} entries but t has {}", s.len(), t.len())));
    }
    if s.iter().chain(t).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("grad mult scales".into()));
    }
    let c = s.len();
    let stride = if has_identity { 1 } else { 2 };
    let block = CslaBlockSpec {
        c_in: c,
        c_out: c,
        stride,
        s: s.to_vec(),
        t: t.to_vec(),
        has_identity,
    };
    Ok(CslaLayout::repopt(&block).grad_mult())
}

/// Grad Mult of a (possibly non-square) RepOpt-VGG block.
pub fn grad_mult_for(block: &CslaBlockSpec) -> Tensor {
    CslaLayout::repopt(block).grad_mult()
}

/// Scalar multiplier of a two-branch block with scalar constants.
pub fn build_grad_mult_scalar(alpha_a: f64, alpha_b: f64) -> f64 {
    alpha_a * alpha_a + alpha_b * alpha_b
}

/// Equivalent 3×3 kernel of a RepOpt-VGG CSLA block: `s_c·W_s` everywhere,
/// plus `t_c·W_t` at the centers, plus `γ_c` at the diagonal centers when the
/// block has an identity branch (`identity = Some(γ)`).
pub fn equivalent_init(w_s: &Tensor, w_t: &Tensor, s: &[f64], t: &[f64], identity: Option<&[f64]>) -> Result<Tensor> {
    let [c_out, c_in, kh, kw] = w_s.shape();
    if kh != 3 || kw != 3 {
        return Err(Error::shape("equivalent_init W_s", &[c_out, c_in, 3, 3], &w_s.shape()));
    }
    if w_t.shape() != [c_out, c_in, 1, 1] {
        return Err(Error::shape("equivalent_init W_t", &[c_out, c_in, 1, 1], &w_t.shape()));
    }
    if s.len() != c_out || t.len() != c_out {
        return Err(Error::shape("equivalent_init scales", &[c_out], &[s.len(), t.len()]));
    }
    let mut branches = vec![
        CslaBranch {
            op: BranchOp::Conv { kernel: 3 },
            scale: s.to_vec(),
        },
        CslaBranch {
            op: BranchOp::Conv { kernel: 1 },
            scale: t.to_vec(),
        },
    ];
    let gamma;
    let mut weights = vec![w_s, w_t];
    if let Some(g) = identity {
        if g.len() != c_out || c_in != c_out {
            return Err(Error::shape("equivalent_init identity", &[c_in], &[g.len()]));
        }
        branches.push(CslaBranch {
            op: BranchOp::ChannelScale,
            scale: vec![1.0; c_out],
        });
        gamma = Tensor::channel_vector(g);
        weights.push(&gamma);
    }
    CslaLayout::new(c_in, c_out, 3, branches)?.equivalent_kernel(&weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::msra_init;

    #[test]
    fn zero_scales_with_identity_is_dirac_mult() {
        let m = build_grad_mult(&[0.0; 3], &[0.0; 3], true).unwrap();
        for c in 0..3 {
            for d in 0..3 {
                for p in 0..3 {
                    for q in 0..3 {
                        let want = if c == d && p == 1 && q == 1 { 1.0 } else { 0.0 };
                        assert_eq!(m.at([c, d, p, q]), want);
                    }
                }
            }
        }
    }

    #[test]
    fn substitution_table() {
        let m = build_grad_mult(&[2.0, 2.0], &[3.0, 3.0], true).unwrap();
        assert_eq!(m.at([0, 0, 1, 1]), 14.0);
        assert_eq!(m.at([0, 1, 1, 1]), 13.0);
        assert_eq!(m.at([1, 0, 0, 2]), 4.0);
        let m = build_grad_mult(&[2.0, 2.0], &[3.0, 3.0], false).unwrap();
        assert_eq!(m.at([0, 0, 1, 1]), 13.0);
        assert_eq!(m.at([1, 1, 1, 1]), 13.0);
        assert_eq!(m.at([1, 1, 2, 1]), 4.0);
    }

    #[test]
    fn scale_uses_output_channel() {
        let m = build_grad_mult(&[1.0, 2.0], &[0.0, 0.0], false).unwrap();
        assert_eq!(m.at([0, 1, 0, 0]), 1.0);
        assert_eq!(m.at([1, 0, 0, 0]), 4.0);
    }

    #[test]
    fn length_mismatch_is_error() {
        assert!(build_grad_mult(&[1.0, 2.0], &[1.0], true).is_err());
    }

    #[test]
    fn scalar_mult() {
        assert_eq!(build_grad_mult_scalar(1.0, 0.0), 1.0);
        assert_eq!(build_grad_mult_scalar(1.0, 1.0), 2.0);
        assert_eq!(build_grad_mult_scalar(0.5, 0.5), 0.5);
    }

    #[test]
    fn equivalent_init_degenerate_cases() {
        let ws = msra_init([3, 3, 3, 3], 1);
        let wt = msra_init([3, 3, 1, 1], 2);
        let k = equivalent_init(&ws, &wt, &[1.0; 3], &[0.0; 3], None).unwrap();
        assert_eq!(k, ws);
        let k = equivalent_init(&ws, &wt, &[0.0; 3], &[0.0; 3], Some(&[1.0; 3])).unwrap();
        let dirac = Tensor::from_fn([3, 3, 3, 3], |[c, d, p, q]| if c == d && p == 1 && q == 1 { 1.0 } else { 0.0 });
        assert_eq!(k, dirac);
    }

    #[test]
    fn ghost_mult_is_sum_of_squares_on_diagonal() {
        let l = CslaLayout::ghost(2, &[0.5, 0.5], &[0.5, 0.5]).unwrap();
        let m = l.grad_mult();
        assert_eq!(m.shape(), [2, 2, 1, 1]);
        assert_eq!(m.at([0, 0, 0, 0]), 0.5);
        assert_eq!(m.at([0, 1, 0, 0]), 0.25);
    }

    #[test]
    fn misplaced_branches_rejected() {
        let bad = CslaLayout::new(
            2,
            3,
            3,
            vec![CslaBranch {
                op: BranchOp::ChannelScale,
                scale: vec![1.0; 3],
            }],
        );
        assert!(bad.is_err());
        let bad = CslaLayout::new(
            2,
            2,
            3,
            vec![CslaBranch {
                op: BranchOp::Conv { kernel: 2 },
                scale: vec![1.0; 2],
            }],
        );
        assert!(bad.is_err());
    }
}
