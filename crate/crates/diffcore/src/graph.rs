//! Tape of recorded tensor operations and the reverse sweep over it.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{DiffError, Result};
use crate::kernels::{
    broadcast_shape, broadcast_strides, broadcast_to, col2im, for_each_offset, im2col, reduce_to,
    split_axis, ConvGeom,
};
use crate::real::Real;
use crate::tensor::{check_shape, numel, strides_of, Tensor};

/// Fill constant used to exclude attention positions before a softmax.
pub const MASK_FILL: f64 = -1e9;

/// Denominators smaller than this (in magnitude) are rejected by [`Graph::div`].
pub const MIN_DENOMINATOR: f64 = 1e-12;

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnaryKind {
    Neg,
    Exp,
    Log,
    Sigmoid,
    Relu,
    Scale(f64),
    AddScalar(f64),
    Powf(f64),
    Clamp(f64, f64),
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
    },
    Unary {
        kind: UnaryKind,
        x: usize,
    },
    MatMul {
        a: usize,
        b: usize,
        batched: bool,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    LogSoftmax {
        x: usize,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv2d {
        x: usize,
        w: usize,
        geom: ConvGeom,
    },
    Upsample {
        x: usize,
        factor: usize,
    },
    Reduce {
        x: usize,
        keep_shape: Vec<usize>,
        scale: f64,
    },
    BroadcastTo {
        x: usize,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
    },
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    Reshape {
        x: usize,
    },
    Embedding {
        table: usize,
        indices: Vec<usize>,
    },
    MaskedFill {
        x: usize,
        mask: Vec<bool>,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// A single-threaded record of tensor operations supporting reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the tape is already topologically sorted.
#[derive(Debug)]
pub struct Graph<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(DiffError::ForeignVar);
        }
        Ok(v.index)
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        Ok(&self.nodes[self.idx(v)?])
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            graph: self.id,
            index,
        }
    }

    /// Records a tensor that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a leaf that accumulates gradient on [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Value of a recorded tensor.
    ///
    /// Panics if `v` was produced by a different graph.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).expect("variable from a different graph").value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).map(|n| n.requires_grad).unwrap_or(false)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.node(v).ok().and_then(|n| n.grad.as_ref())
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn any_grad(&self, idx: &[usize]) -> bool {
        idx.iter().any(|&i| self.nodes[i].requires_grad)
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let op_name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let out_shape =
            broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| DiffError::ShapeMismatch {
                op: op_name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            })?;
        if kind == BinaryKind::Div {
            if let Some((index, v)) = tb
                .data()
                .iter()
                .enumerate()
                .find(|(_, v)| v.to_f64_lossy().abs() < MIN_DENOMINATOR || v.is_nan())
            {
                return Err(DiffError::DivisionByZero {
                    index,
                    value: v.to_f64_lossy(),
                });
            }
        }
        let xa = broadcast_to(ta.data(), ta.shape(), &out_shape);
        let xb = broadcast_to(tb.data(), tb.shape(), &out_shape);
        let data: Vec<T> = match kind {
            BinaryKind::Add => xa.iter().zip(&xb).map(|(&p, &q)| p + q).collect(),
            BinaryKind::Sub => xa.iter().zip(&xb).map(|(&p, &q)| p - q).collect(),
            BinaryKind::Mul => xa.iter().zip(&xb).map(|(&p, &q)| p * q).collect(),
            BinaryKind::Div => xa.iter().zip(&xb).map(|(&p, &q)| p / q).collect(),
        };
        let rg = self.any_grad(&[ia, ib]);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Binary { kind, a: ia, b: ib },
            rg,
        ))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    /// Elementwise quotient; rejects denominators with magnitude below 1e-12.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = &self.nodes[ix].value;
        match kind {
            UnaryKind::Log => {
                if let Some((index, v)) =
                    t.data().iter().enumerate().find(|(_, v)| **v <= T::zero())
                {
                    return Err(DiffError::Domain {
                        op: "log",
                        index,
                        value: v.to_f64_lossy(),
                    });
                }
            }
            UnaryKind::Powf(p) if p.fract() != 0.0 => {
                if let Some((index, v)) = t.data().iter().enumerate().find(|(_, v)| **v < T::zero())
                {
                    return Err(DiffError::Domain {
                        op: "powf",
                        index,
                        value: v.to_f64_lossy(),
                    });
                }
            }
            UnaryKind::Clamp(lo, hi) if lo > hi => {
                return Err(DiffError::InvalidArgument {
                    op: "clamp",
                    reason: format!("lower bound {lo} exceeds upper bound {hi}"),
                });
            }
            _ => {}
        }
        let out = match kind {
            UnaryKind::Neg => t.map(|v| -v),
            UnaryKind::Exp => t.map(|v| v.exp()),
            UnaryKind::Log => t.map(|v| v.ln()),
            UnaryKind::Sigmoid => t.map(sigmoid),
            UnaryKind::Relu => t.map(|v| if v > T::zero() { v } else { T::zero() }),
            UnaryKind::Scale(c) => {
                let c = T::lit(c);
                t.map(|v| v * c)
            }
            UnaryKind::AddScalar(c) => {
                let c = T::lit(c);
                t.map(|v| v + c)
            }
            UnaryKind::Powf(p) => {
                let p = T::lit(p);
                t.map(|v| v.powf(p))
            }
            UnaryKind::Clamp(lo, hi) => {
                let (lo, hi) = (T::lit(lo), T::lit(hi));
                t.map(|v| v.max(lo).min(hi))
            }
        };
        let rg = self.nodes[ix].requires_grad;
        Ok(self.push(out, Op::Unary { kind, x: ix }, rg))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    /// Natural logarithm; rejects non-positive inputs.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::AddScalar(c), x)
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        self.unary(UnaryKind::Powf(p), x)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(UnaryKind::Clamp(lo, hi), x)
    }

    /// Replaces positions where `mask` is true by `value` (use [`MASK_FILL`] before softmax).
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: f64) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = &self.nodes[ix].value;
        if mask.len() != t.len() {
            return Err(DiffError::ShapeMismatch {
                op: "masked_fill",
                lhs: t.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let fill = T::lit(value);
        let data = t
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { fill } else { v })
            .collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.nodes[ix].requires_grad;
        Ok(self.push(
            out,
            Op::MaskedFill {
                x: ix,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    // ---------------------------------------------------------------- linear algebra

    /// Matrix product.
    ///
    /// Accepts `[.., M, K] × [K, N]` (leading dimensions of the left operand are
    /// flattened) and batched `[B, M, K] × [B, K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        let mismatch = || DiffError::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        let (out_shape, batched) = match (sa.len(), sb.len()) {
            (ra, 2) if ra >= 2 => {
                if sa[ra - 1] != sb[0] {
                    return Err(mismatch());
                }
                let mut s = sa[..ra - 1].to_vec();
                s.push(sb[1]);
                (s, false)
            }
            (3, 3) => {
                if sa[0] != sb[0] || sa[2] != sb[1] {
                    return Err(mismatch());
                }
                (vec![sa[0], sa[1], sb[2]], true)
            }
            _ => return Err(mismatch()),
        };
        let mut out = vec![T::zero(); numel(&out_shape)];
        if batched {
            let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            for bi in 0..bs {
                T::gemm(
                    m,
                    k,
                    n,
                    &ta.data()[bi * m * k..(bi + 1) * m * k],
                    (k as isize, 1),
                    &tb.data()[bi * k * n..(bi + 1) * k * n],
                    (n as isize, 1),
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    (n as isize, 1),
                    false,
                );
            }
        } else {
            let k = sb[0];
            let n = sb[1];
            let rows = ta.len() / k;
            T::gemm(
                rows,
                k,
                n,
                ta.data(),
                (k as isize, 1),
                tb.data(),
                (n as isize, 1),
                &mut out,
                (n as isize, 1),
                false,
            );
        }
        let rg = self.any_grad(&[ia, ib]);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::MatMul {
                a: ia,
                b: ib,
                batched,
            },
            rg,
        ))
    }

    /// Softmax along `axis`, stabilized by subtracting the running maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = &self.nodes[ix].value;
        check_axis("softmax", t.shape(), axis)?;
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let mut out = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let max = (0..len).map(|k| out[at(k)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for k in 0..len {
                    let e = (out[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[at(k)] /= total;
                }
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.nodes[ix].requires_grad;
        Ok(self.push(out, Op::Softmax { x: ix, axis }, rg))
    }

    /// `x - logsumexp(x)` along `axis`.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = &self.nodes[ix].value;
        check_axis("log_softmax", t.shape(), axis)?;
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let mut out = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let max = (0..len).map(|k| out[at(k)]).fold(T::neg_infinity(), T::max);
                let lse = (0..len).map(|k| (out[at(k)] - max).exp()).sum::<T>().ln() + max;
                for k in 0..len {
                    out[at(k)] -= lse;
                }
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.nodes[ix].requires_grad;
        Ok(self.push(out, Op::LogSoftmax { x: ix, axis }, rg))
    }

    /// Layer normalization over the last axis with affine `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let (t, tg, tb) = (
            &self.nodes[ix].value,
            &self.nodes[ig].value,
            &self.nodes[ib].value,
        );
        let d = *t.shape().last().expect("non-empty shape");
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(DiffError::ShapeMismatch {
                op: "layer_norm",
                lhs: t.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let rows = t.len() / d;
        let eps = T::lit(eps);
        let dn = T::lit(d as f64);
        let mut xhat = vec![T::zero(); t.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); t.len()];
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.any_grad(&[ix, ig, ib]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Channels-last 2D convolution with zero padding.
    ///
    /// `x` is `[B, H, W, Cin]`, `w` is `[kh, kw, Cin, Cout]`; output is `[B, Ho, Wo, Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (ix, iw) = (self.idx(x)?, self.idx(w)?);
        let (tx, tw) = (&self.nodes[ix].value, &self.nodes[iw].value);
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[3] != sw[2] {
            return Err(DiffError::ShapeMismatch {
                op: "conv2d",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        if stride == 0 {
            return Err(DiffError::InvalidArgument {
                op: "conv2d",
                reason: "stride must be positive".into(),
            });
        }
        if sx[1] + 2 * pad < sw[0] || sx[2] + 2 * pad < sw[1] {
            return Err(DiffError::ShapeMismatch {
                op: "conv2d",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let geom = ConvGeom {
            batch: sx[0],
            height: sx[1],
            width: sx[2],
            in_channels: sx[3],
            out_channels: sw[3],
            kernel_h: sw[0],
            kernel_w: sw[1],
            stride,
            pad,
            out_h: (sx[1] + 2 * pad - sw[0]) / stride + 1,
            out_w: (sx[2] + 2 * pad - sw[1]) / stride + 1,
        };
        let cols = im2col(tx.data(), &geom);
        let mut out = vec![T::zero(); geom.rows() * geom.out_channels];
        let p = geom.patch_len();
        let co = geom.out_channels;
        T::gemm(
            geom.rows(),
            p,
            co,
            &cols,
            (p as isize, 1),
            tw.data(),
            (co as isize, 1),
            &mut out,
            (co as isize, 1),
            false,
        );
        let out = Tensor::from_parts(vec![geom.batch, geom.out_h, geom.out_w, co], out);
        let rg = self.any_grad(&[ix, iw]);
        Ok(self.push(out, Op::Conv2d { x: ix, w: iw, geom }, rg))
    }

    /// Nearest-neighbour upsampling of a `[B, H, W, C]` tensor by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = &self.nodes[ix].value;
        let s = t.shape();
        if s.len() != 4 || factor == 0 {
            return Err(DiffError::InvalidArgument {
                op: "upsample_nearest",
                reason: format!(
                    "expected [B, H, W, C] input and positive factor, got {s:?} x{factor}"
                ),
            });
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![T::zero(); b * oh * ow * c];
        for bi in 0..b {
            for y in 0..oh {
                for xx in 0..ow {
                    let src = ((bi * h + y / factor) * w + xx / factor) * c;
                    let dst = ((bi * oh + y) * ow + xx) * c;
                    out[dst..dst + c].copy_from_slice(&t.data()[src..src + c]);
                }
            }
        }
        let out = Tensor::from_parts(vec![b, oh, ow, c], out);
        let rg = self.nodes[ix].requires_grad;
        Ok(self.push(out, Op::Upsample { x: ix, factor }, rg))
    }

    // ---------------------------------------------------------------- reductions

    fn reduce(&mut self, x: Var, axes: &[usize], keepdim: bool, mean: bool) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = &self.nodes[ix].value;
        let shape = t.shape().to_vec();
        let mut keep_shape = shape.clone();
        let mut count = 1usize;
        for &a in axes {
            check_axis("reduce", &shape, a)?;
            if keep_shape[a] == 1 && shape[a] != 1 {
                return Err(DiffError::InvalidArgument {
                    op: "reduce",
                    reason: format!("axis {a} listed twice"),
                });
            }
            count *= shape[a];
            keep_shape[a] = 1;
        }
        let scale = if mean { 1.0 / count as f64 } else { 1.0 };
        let mut data = reduce_to(t.data(), &shape, &keep_shape);
        if mean {
            let s = T::lit(scale);
            data.iter_mut().for_each(|v| *v *= s);
        }
        let out_shape = if keepdim {
            keep_shape.clone()
        } else {
            let s: Vec<usize> = shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect();
            if s.is_empty() {
                vec![1]
            } else {
                s
            }
        };
        let rg = self.nodes[ix].requires_grad;
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Reduce {
                x: ix,
                keep_shape,
                scale,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(x, axes, keepdim, false)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(x, axes, keepdim, true)
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        let axes: Vec<usize> = (0..rank).collect();
        self.reduce(x, &axes, false, false)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        let axes: Vec<usize> = (0..rank).collect();
        self.reduce(x, &axes, false, true)
    }

    // ---------------------------------------------------------------- layout

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        check_shape(shape)?;
        let t = &self.nodes[ix].value;
        if broadcast_strides(t.shape(), shape).is_none() {
            return Err(DiffError::ShapeMismatch {
                op: "broadcast_to",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = broadcast_to(t.data(), t.shape(), shape);
        let rg = self.nodes[ix].requires_grad;
        Ok(self.push(
            Tensor::from_parts(shape.to_vec(), data),
            Op::BroadcastTo { x: ix },
            rg,
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let idx: Vec<usize> = xs.iter().map(|&v| self.idx(v)).collect::<Result<_>>()?;
        let first = idx.first().ok_or(DiffError::InvalidArgument {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let base = self.nodes[*first].value.shape().to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (p, q))| d == axis || p == q);
            if !compatible {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &i in &idx {
                let t = &self.nodes[i].value;
                let block = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let rg = self.any_grad(&idx);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Concat { xs: idx, axis },
            rg,
        ))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = &self.nodes[ix].value;
        let rank = t.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return Err(DiffError::InvalidArgument {
                op: "permute",
                reason: format!("{perm:?} is not a permutation of {rank} axes"),
            });
        }
        let in_strides = strides_of(t.shape());
        let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut out = vec![T::zero(); t.len()];
        for_each_offset(&out_shape, &strides, |i, o| out[i] = t.data()[o]);
        let rg = self.nodes[ix].requires_grad;
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Permute {
                x: ix,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let rank = self.node(x)?.value.shape().len();
        if a >= rank || b >= rank {
            return Err(DiffError::InvalidArgument {
                op: "transpose",
                reason: format!("axes ({a}, {b}) out of range for rank {rank}"),
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a, b);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = self.nodes[ix].value.clone().reshape(shape.to_vec())?;
        let rg = self.nodes[ix].requires_grad;
        Ok(self.push(t, Op::Reshape { x: ix }, rg))
    }

    /// Rows `indices` of a `[V, D]` table, giving `[len, D]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let it = self.idx(table)?;
        let t = &self.nodes[it].value;
        if t.shape().len() != 2 || indices.is_empty() {
            return Err(DiffError::InvalidArgument {
                op: "embedding",
                reason: format!("expected a [V, D] table and indices, got {:?}", t.shape()),
            });
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= v {
                return Err(DiffError::InvalidArgument {
                    op: "embedding",
                    reason: format!("index {i} out of range for {v} rows"),
                });
            }
            out.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let rg = self.nodes[it].requires_grad;
        Ok(self.push(
            Tensor::from_parts(vec![indices.len(), d], out),
            Op::Embedding {
                table: it,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Sub-range `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = &self.nodes[ix].value;
        check_axis("slice", t.shape(), axis)?;
        if start >= end || end > t.shape()[axis] {
            return Err(DiffError::InvalidArgument {
                op: "slice",
                reason: format!(
                    "range {start}..{end} invalid for extent {}",
                    t.shape()[axis]
                ),
            });
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let mut out_shape = t.shape().to_vec();
        out_shape[axis] = end - start;
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            let from = (o * len + start) * inner;
            out.extend_from_slice(&t.data()[from..from + (end - start) * inner]);
        }
        let rg = self.nodes[ix].requires_grad;
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Slice { x: ix, axis, start },
            rg,
        ))
    }

    // ---------------------------------------------------------------- backward

    /// Propagates `seed` (shaped like `root`) back through the tape.
    ///
    /// Every reachable leaf created with [`Graph::leaf`] accumulates `d(root·seed)/d(leaf)`;
    /// repeated calls add to existing gradients until [`Graph::zero_grad`].
    pub fn backward(&mut self, root: Var, seed: &Tensor<T>) -> Result<()> {
        let root = self.idx(root)?;
        if seed.shape() != self.nodes[root].value.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "backward",
                lhs: self.nodes[root].value.shape().to_vec(),
                rhs: seed.shape().to_vec(),
            });
        }
        if !self.nodes[root].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root + 1];
        grads[root] = Some(seed.data().to_vec());
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(a, b)| *a += *b),
                    None => node.grad = Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    /// Backward with a seed of ones.
    pub fn backward_scalar(&mut self, root: Var) -> Result<()> {
        let shape = self.node(root)?.value.shape().to_vec();
        let seed = Tensor::ones(shape)?;
        self.backward(root, &seed)
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let need = |j: usize| self.nodes[j].requires_grad;
        let val = |j: usize| &self.nodes[j].value;
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Binary { kind, a, b } => {
                let (a, b) = (*a, *b);
                let out_shape = node.value.shape();
                let (ta, tb) = (val(a), val(b));
                if need(a) {
                    let full: Vec<T> = match kind {
                        BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
                        BinaryKind::Mul => {
                            let xb = broadcast_to(tb.data(), tb.shape(), out_shape);
                            g.iter().zip(&xb).map(|(&g, &q)| g * q).collect()
                        }
                        BinaryKind::Div => {
                            let xb = broadcast_to(tb.data(), tb.shape(), out_shape);
                            g.iter().zip(&xb).map(|(&g, &q)| g / q).collect()
                        }
                    };
                    accumulate(grads, a, reduce_to(&full, out_shape, ta.shape()));
                }
                if need(b) {
                    let full: Vec<T> = match kind {
                        BinaryKind::Add => g.to_vec(),
                        BinaryKind::Sub => g.iter().map(|&g| -g).collect(),
                        BinaryKind::Mul => {
                            let xa = broadcast_to(ta.data(), ta.shape(), out_shape);
                            g.iter().zip(&xa).map(|(&g, &p)| g * p).collect()
                        }
                        BinaryKind::Div => {
                            let xb = broadcast_to(tb.data(), tb.shape(), out_shape);
                            g.iter()
                                .zip(&xb)
                                .zip(node.value.data())
                                .map(|((&g, &q), &y)| -g * y / q)
                                .collect()
                        }
                    };
                    accumulate(grads, b, reduce_to(&full, out_shape, tb.shape()));
                }
            }
            Op::Unary { kind, x } => {
                let x = *x;
                if !need(x) {
                    return;
                }
                let xv = val(x).data();
                let y = node.value.data();
                let gx: Vec<T> = match *kind {
                    UnaryKind::Neg => g.iter().map(|&g| -g).collect(),
                    UnaryKind::Exp => g.iter().zip(y).map(|(&g, &y)| g * y).collect(),
                    UnaryKind::Log => g.iter().zip(xv).map(|(&g, &x)| g / x).collect(),
                    UnaryKind::Sigmoid => g
                        .iter()
                        .zip(y)
                        .map(|(&g, &y)| g * y * (T::one() - y))
                        .collect(),
                    UnaryKind::Relu => g
                        .iter()
                        .zip(xv)
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect(),
                    UnaryKind::Scale(c) => {
                        let c = T::lit(c);
                        g.iter().map(|&g| g * c).collect()
                    }
                    UnaryKind::AddScalar(_) => g.to_vec(),
                    UnaryKind::Powf(p) => {
                        let (pt, pm1) = (T::lit(p), T::lit(p - 1.0));
                        g.iter()
                            .zip(xv)
                            .map(|(&g, &x)| g * pt * x.powf(pm1))
                            .collect()
                    }
                    UnaryKind::Clamp(lo, hi) => {
                        let (lo, hi) = (T::lit(lo), T::lit(hi));
                        g.iter()
                            .zip(xv)
                            .map(|(&g, &x)| if x >= lo && x <= hi { g } else { T::zero() })
                            .collect()
                    }
                };
                accumulate(grads, x, gx);
            }
            Op::MaskedFill { x, mask } => {
                if need(*x) {
                    let gx = g
                        .iter()
                        .zip(mask)
                        .map(|(&g, &m)| if m { T::zero() } else { g })
                        .collect();
                    accumulate(grads, *x, gx);
                }
            }
            Op::MatMul { a, b, batched } => {
                let (a, b) = (*a, *b);
                let (ta, tb) = (val(a), val(b));
                let (sa, sb) = (ta.shape(), tb.shape());
                if *batched {
                    let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                    if need(a) {
                        let mut ga = vec![T::zero(); ta.len()];
                        for bi in 0..bs {
                            // dA = G · Bᵀ
                            T::gemm(
                                m,
                                n,
                                k,
                                &g[bi * m * n..(bi + 1) * m * n],
                                (n as isize, 1),
                                &tb.data()[bi * k * n..(bi + 1) * k * n],
                                (1, n as isize),
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                                (k as isize, 1),
                                false,
                            );
                        }
                        accumulate(grads, a, ga);
                    }
                    if need(b) {
                        let mut gb = vec![T::zero(); tb.len()];
                        for bi in 0..bs {
                            // dB = Aᵀ · G
                            T::gemm(
                                k,
                                m,
                                n,
                                &ta.data()[bi * m * k..(bi + 1) * m * k],
                                (1, k as isize),
                                &g[bi * m * n..(bi + 1) * m * n],
                                (n as isize, 1),
                                &mut gb[bi * k * n..(bi + 1) * k * n],
                                (n as isize, 1),
                                false,
                            );
                        }
                        accumulate(grads, b, gb);
                    }
                } else {
                    let (k, n) = (sb[0], sb[1]);
                    let rows = ta.len() / k;
                    if need(a) {
                        let mut ga = vec![T::zero(); ta.len()];
                        T::gemm(
                            rows,
                            n,
                            k,
                            g,
                            (n as isize, 1),
                            tb.data(),
                            (1, n as isize),
                            &mut ga,
                            (k as isize, 1),
                            false,
                        );
                        accumulate(grads, a, ga);
                    }
                    if need(b) {
                        let mut gb = vec![T::zero(); tb.len()];
                        T::gemm(
                            k,
                            rows,
                            n,
                            ta.data(),
                            (1, k as isize),
                            g,
                            (n as isize, 1),
                            &mut gb,
                            (n as isize, 1),
                            false,
                        );
                        accumulate(grads, b, gb);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if !need(*x) {
                    return;
                }
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + i;
                        let dot: T = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            gx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::LogSoftmax { x, axis } => {
                if !need(*x) {
                    return;
                }
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + i;
                        let total: T = (0..len).map(|k| g[at(k)]).sum();
                        for k in 0..len {
                            gx[at(k)] = g[at(k)] - y[at(k)].exp() * total;
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = val(*gamma).len();
                let rows = xhat.len() / d;
                let gam = val(*gamma).data();
                if need(*gamma) {
                    let mut gg = vec![T::zero(); d];
                    for r in 0..rows {
                        for c in 0..d {
                            gg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                    accumulate(grads, *gamma, gg);
                }
                if need(*beta) {
                    let mut gb = vec![T::zero(); d];
                    for r in 0..rows {
                        for c in 0..d {
                            gb[c] += g[r * d + c];
                        }
                    }
                    accumulate(grads, *beta, gb);
                }
                if need(*x) {
                    let dn = T::lit(d as f64);
                    let mut gx = vec![T::zero(); xhat.len()];
                    for r in 0..rows {
                        let dxhat: Vec<T> = (0..d).map(|c| g[r * d + c] * gam[c]).collect();
                        let mean_d = dxhat.iter().copied().sum::<T>() / dn;
                        let mean_dx = (0..d).map(|c| dxhat[c] * xhat[r * d + c]).sum::<T>() / dn;
                        for c in 0..d {
                            gx[r * d + c] =
                                rstd[r] * (dxhat[c] - mean_d - xhat[r * d + c] * mean_dx);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::Conv2d { x, w, geom } => {
                let p = geom.patch_len();
                let co = geom.out_channels;
                let rows = geom.rows();
                if need(*w) {
                    let cols = im2col(val(*x).data(), geom);
                    let mut gw = vec![T::zero(); p * co];
                    T::gemm(
                        p,
                        rows,
                        co,
                        &cols,
                        (1, p as isize),
                        g,
                        (co as isize, 1),
                        &mut gw,
                        (co as isize, 1),
                        false,
                    );
                    accumulate(grads, *w, gw);
                }
                if need(*x) {
                    let mut gcols = vec![T::zero(); rows * p];
                    T::gemm(
                        rows,
                        co,
                        p,
                        g,
                        (co as isize, 1),
                        val(*w).data(),
                        (1, co as isize),
                        &mut gcols,
                        (p as isize, 1),
                        false,
                    );
                    accumulate(grads, *x, col2im(&gcols, geom));
                }
            }
            Op::Upsample { x, factor } => {
                if !need(*x) {
                    return;
                }
                let s = val(*x).shape();
                let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                let (oh, ow) = (h * factor, w * factor);
                let mut gx = vec![T::zero(); val(*x).len()];
                for bi in 0..b {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let dst = ((bi * h + y / factor) * w + xx / factor) * c;
                            let src = ((bi * oh + y) * ow + xx) * c;
                            for ch in 0..c {
                                gx[dst + ch] += g[src + ch];
                            }
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Reduce {
                x,
                keep_shape,
                scale,
            } => {
                if !need(*x) {
                    return;
                }
                let mut gx = broadcast_to(g, keep_shape, val(*x).shape());
                if *scale != 1.0 {
                    let s = T::lit(*scale);
                    gx.iter_mut().for_each(|v| *v *= s);
                }
                accumulate(grads, *x, gx);
            }
            Op::BroadcastTo { x } => {
                if need(*x) {
                    accumulate(grads, *x, reduce_to(g, node.value.shape(), val(*x).shape()));
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let total = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for &j in xs {
                    let block = val(j).shape()[*axis] * inner;
                    if need(j) {
                        let mut gx = Vec::with_capacity(val(j).len());
                        for o in 0..outer {
                            let from = o * total + offset;
                            gx.extend_from_slice(&g[from..from + block]);
                        }
                        accumulate(grads, j, gx);
                    }
                    offset += block;
                }
            }
            Op::Permute { x, perm } => {
                if !need(*x) {
                    return;
                }
                let in_strides = strides_of(val(*x).shape());
                let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
                let mut gx = vec![T::zero(); g.len()];
                for_each_offset(node.value.shape(), &strides, |i, o| gx[o] = g[i]);
                accumulate(grads, *x, gx);
            }
            Op::Reshape { x } => {
                if need(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
            }
            Op::Embedding { table, indices } => {
                if !need(*table) {
                    return;
                }
                let d = val(*table).shape()[1];
                let mut gt = vec![T::zero(); val(*table).len()];
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..d {
                        gt[i * d + c] += g[r * d + c];
                    }
                }
                accumulate(grads, *table, gt);
            }
            Op::Slice { x, axis, start } => {
                if !need(*x) {
                    return;
                }
                let (outer, len, inner) = split_axis(val(*x).shape(), *axis);
                let width = node.value.shape()[*axis] * inner;
                let mut gx = vec![T::zero(); val(*x).len()];
                for o in 0..outer {
                    let to = (o * len + start) * inner;
                    gx[to..to + width].copy_from_slice(&g[o * width..(o + 1) * width]);
                }
                accumulate(grads, *x, gx);
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], idx: usize, contribution: Vec<T>) {
    match &mut grads[idx] {
        Some(acc) => acc
            .iter_mut()
            .zip(&contribution)
            .for_each(|(a, b)| *a += *b),
        slot @ None => *slot = Some(contribution),
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(DiffError::InvalidArgument {
            op,
            reason: format!("axis {axis} out of range for shape {shape:?}"),
        });
    }
    Ok(())
}

/// Logistic function evaluated without overflow for large |x|.
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
