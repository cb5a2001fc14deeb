//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Operations record their inputs and whatever forward state the backward
//! rule needs; `backward` walks the tape once in reverse insertion order.
//! Tensors on the tape are immutable; a tape belongs to one worker.
//!
//! The op set is what the sequence models here need: matmuls (with
//! leading-dim collapse), batched matmul, elementwise arithmetic and a
//! few transcendentals (for materializing diagonal-SSM kernels on tape),
//! layer norm, softmax with causal masking, embedding lookup, FFT
//! convolution (delegated to `conv`, with the analytic spectral backward),
//! shape movement, and a last-token cross-entropy head.

use crate::error::{Error, Result};
use crate::fft::Radix2;
use crate::flops;
use crate::rng::Rng;
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

const LN_EPS: f64 = 1e-12;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;
const MASK_NEG: f64 = -1e30;

/// Same tolerance rule as `conv`: the imaginary part after the inverse
/// transform of a real convolution is numerical noise.
fn conv_residue_check(re: &[f64], im: &[f64]) {
    let scale = re.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let residue = im.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(
        residue <= 1e-8 * scale,
        "imaginary residue {residue:e} exceeds tolerance at scale {scale:e}"
    );
}

#[derive(Debug)]
struct ConvSaved {
    n: usize,
    ch: usize,
    rows: usize,
    padded: usize,
    /// Kernel spectra, flat [ch][2][padded].
    f_spec: Vec<f64>,
    /// Input spectra, flat [rows * ch][2][padded].
    u_spec: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Exp(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Recip(NodeId),
    Elu1(NodeId),
    ClampMin(NodeId, f64),
    Gelu { x: NodeId, t: Vec<f64> },
    Matmul(NodeId, NodeId),
    Bmm(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(NodeId),
    CausalMask(NodeId),
    Embedding {
        weight: NodeId,
        ids: Vec<usize>,
    },
    FftConv {
        u: NodeId,
        f: NodeId,
        d: NodeId,
        saved: Box<ConvSaved>,
    },
    Reshape(NodeId),
    SplitHeads {
        x: NodeId,
        heads: usize,
    },
    MergeHeads {
        x: NodeId,
        heads: usize,
    },
    TransposeLast2(NodeId),
    SliceLastAxis {
        x: NodeId,
        start: usize,
    },
    PadLastAxis(NodeId),
    StackLastAxis(Vec<NodeId>),
    SumLastAxis(NodeId),
    SumAll(NodeId),
    MulBroadcastLast {
        x: NodeId,
        s: NodeId,
    },
    RepeatRows {
        x: NodeId,
        times: usize,
    },
    CrossEntropyLastToken {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients for every node of a tape after `backward`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. this node; exact zeros if the node did
    /// not influence the loss.
    pub fn get(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    pub fn take(&mut self, id: NodeId) -> Tensor {
        match self.grads[id.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    clamp_events: u64,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of elements denominator-clamps fired during forward passes
    /// (linear attention stability guard).
    pub fn clamp_events(&self) -> u64 {
        self.clamp_events
    }

    /// Total elements stored on the tape (activation memory accounting).
    pub fn stored_elements(&self) -> usize {
        self.nodes.iter().map(|n| n.value.numel()).sum()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    // ---- elementwise -----------------------------------------------------

    fn zip_op(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(NodeId, NodeId) -> Op,
    ) -> Result<NodeId> {
        let va = self.value(a);
        let vb = self.value(b);
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let out = va.zip(vb, f)?;
        flops::add(out.numel() as u64);
        Ok(self.push(out, make(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = self.value(x).map(|v| c * v);
        flops::add(out.numel() as u64);
        self.push(out, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = self.value(x).map(|v| v + c);
        flops::add(out.numel() as u64);
        self.push(out, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(f64::exp);
        flops::add(4 * out.numel() as u64);
        self.push(out, Op::Exp(x))
    }

    pub fn sin(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(f64::sin);
        flops::add(4 * out.numel() as u64);
        self.push(out, Op::Sin(x))
    }

    pub fn cos(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(f64::cos);
        flops::add(4 * out.numel() as u64);
        self.push(out, Op::Cos(x))
    }

    pub fn recip(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| 1.0 / v);
        flops::add(out.numel() as u64);
        self.push(out, Op::Recip(x))
    }

    /// elu(x) + 1: positive, smooth feature map for linear attention.
    pub fn elu1(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| if v > 0.0 { v + 1.0 } else { v.exp() });
        flops::add(4 * out.numel() as u64);
        self.push(out, Op::Elu1(x))
    }

    pub fn clamp_min(&mut self, x: NodeId, lo: f64) -> NodeId {
        let clamped = self.value(x).data().iter().filter(|&&v| v < lo).count();
        self.clamp_events += clamped as u64;
        let out = self.value(x).map(|v| v.max(lo));
        self.push(out, Op::ClampMin(x, lo))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let t: Vec<f64> = vx
            .data()
            .iter()
            .map(|&v| (GELU_K * (v + GELU_C * v * v * v)).tanh())
            .collect();
        let mut out = Tensor::zeros(vx.shape());
        for ((o, &v), &tv) in out.data_mut().iter_mut().zip(vx.data()).zip(&t) {
            *o = 0.5 * v * (1.0 + tv);
        }
        flops::add(10 * vx.numel() as u64);
        self.push(out, Op::Gelu { x, t })
    }

    // ---- linear algebra --------------------------------------------------

    /// [..., q] x [q, r] with leading dims collapsed.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::Matmul(a, b)))
    }

    /// [L.., p, q] x [L.., q, r] -> [L.., p, r] batched over leading dims.
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() < 2 || sb.len() != sa.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (q2, r) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if q != q2 {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?}")));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out_shape = sa.to_vec();
        out_shape[sa.len() - 2] = p;
        out_shape[sa.len() - 1] = r;
        let mut out = vec![0.0; batch * p * r];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            matmul_nn(
                &mut out[i * p * r..(i + 1) * p * r],
                &da[i * p * q..(i + 1) * p * q],
                &db[i * q * r..(i + 1) * q * r],
                p,
                q,
                r,
            );
        }
        let out = Tensor::new(out_shape, out)?;
        Ok(self.push(out, Op::Bmm(a, b)))
    }

    /// [..., d] + [d] broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let vb = self.value(bias);
        let (rows, d) = vx.as_rows();
        if vb.shape() != [d] {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", vx.shape(), vb.shape()),
            ));
        }
        let mut out = vx.clone();
        for r in 0..rows {
            for (o, b) in out.data_mut()[r * d..(r + 1) * d].iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        flops::add((rows * d) as u64);
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    /// Per-row normalization over the last axis, then affine gain/bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let (rows, d) = vx.as_rows();
        if self.value(gain).shape() != [d] || self.value(bias).shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "x {:?}, gain {:?}, bias {:?}",
                    vx.shape(),
                    self.value(gain).shape(),
                    self.value(bias).shape()
                ),
            ));
        }
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let mut out = vx.clone();
        let mut mean = vec![0.0; rows];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &mut out.data_mut()[r * d..(r + 1) * d];
            let mu: f64 = row.iter().sum::<f64>() / d as f64;
            let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            mean[r] = mu;
            rstd[r] = rs;
            for (j, v) in row.iter_mut().enumerate() {
                *v = g[j] * ((*v - mu) * rs) + b[j];
            }
        }
        flops::add((rows * d * 5) as u64);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let (rows, d) = vx.as_rows();
        let mut out = vx.clone();
        for r in 0..rows {
            let row = &mut out.data_mut()[r * d..(r + 1) * d];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        flops::add((rows * d * 6) as u64);
        self.push(out, Op::Softmax(x))
    }

    /// Sets entries above the diagonal of the last two axes to -1e30.
    pub fn causal_mask(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
            return Err(Error::shape("causal_mask", format!("{s:?}")));
        }
        let n = s[s.len() - 1];
        let batch = vx.numel() / (n * n);
        let mut out = vx.clone();
        for b in 0..batch {
            let mat = &mut out.data_mut()[b * n * n..(b + 1) * n * n];
            for i in 0..n {
                for v in mat[i * n + i + 1..(i + 1) * n].iter_mut() {
                    *v = MASK_NEG;
                }
            }
        }
        Ok(self.push(out, Op::CausalMask(x)))
    }

    /// Row lookup: out[k] = weight[ids[k]], shaped batch_dims + [d].
    pub fn embedding(&mut self, weight: NodeId, ids: &[usize], batch_dims: &[usize]) -> Result<NodeId> {
        let w = self.value(weight);
        if w.shape().len() != 2 {
            return Err(Error::shape("embedding", format!("{:?}", w.shape())));
        }
        let (vocab, d) = (w.shape()[0], w.shape()[1]);
        let count: usize = batch_dims.iter().product();
        if count != ids.len() {
            return Err(Error::shape(
                "embedding",
                format!("{} ids vs dims {batch_dims:?}", ids.len()),
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Config(format!(
                "token id {bad} out of vocabulary {vocab}"
            )));
        }
        let mut out = vec![0.0; count * d];
        for (k, &id) in ids.iter().enumerate() {
            out[k * d..(k + 1) * d].copy_from_slice(&w.data()[id * d..(id + 1) * d]);
        }
        let mut shape = batch_dims.to_vec();
        shape.push(d);
        let out = Tensor::new(shape, out)?;
        Ok(self.push(
            out,
            Op::Embedding {
                weight,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Per-channel causal convolution along the second-to-last axis:
    /// out[.., t, c] = sum_s f[c, s] u[.., t-s, c] + d[c] u[.., t, c].
    pub fn fft_conv(&mut self, u: NodeId, f: NodeId, d: NodeId) -> Result<NodeId> {
        let vu = self.value(u);
        let su = vu.shape();
        if su.len() < 2 {
            return Err(Error::shape("fft_conv", format!("u {su:?}")));
        }
        let (n, ch) = (su[su.len() - 2], su[su.len() - 1]);
        let vf = self.value(f);
        let vd = self.value(d);
        if vf.shape() != [ch, n] {
            return Err(Error::shape(
                "fft_conv",
                format!("f {:?} vs expected [{ch}, {n}]", vf.shape()),
            ));
        }
        if vd.shape() != [ch] {
            return Err(Error::shape(
                "fft_conv",
                format!("d {:?} vs expected [{ch}]", vd.shape()),
            ));
        }
        let rows = vu.numel() / (n * ch);
        let plan = Radix2::new((2 * n).next_power_of_two().max(2))?;
        let p = plan.len();
        let mut f_spec = vec![0.0; ch * 2 * p];
        {
            let fd = vf.data();
            for c in 0..ch {
                let (re, im) = f_spec[c * 2 * p..(c + 1) * 2 * p].split_at_mut(p);
                re[..n].copy_from_slice(&fd[c * n..(c + 1) * n]);
                plan.forward(re, im);
            }
        }
        let mut u_spec = vec![0.0; rows * ch * 2 * p];
        let mut wre = vec![0.0; p];
        let mut wim = vec![0.0; p];
        let mut out = Tensor::zeros(vu.shape());
        let src = vu.data().to_vec();
        let dst = out.data_mut();
        let dd = vd.data().to_vec();
        for r in 0..rows {
            let base = r * n * ch;
            for c in 0..ch {
                let (ure, uim) =
                    u_spec[(r * ch + c) * 2 * p..(r * ch + c + 1) * 2 * p].split_at_mut(p);
                for t in 0..n {
                    ure[t] = src[base + t * ch + c];
                }
                plan.forward(ure, uim);
                let fre = &f_spec[c * 2 * p..c * 2 * p + p];
                let fim = &f_spec[c * 2 * p + p..(c + 1) * 2 * p];
                for i in 0..p {
                    wre[i] = ure[i] * fre[i] - uim[i] * fim[i];
                    wim[i] = ure[i] * fim[i] + uim[i] * fre[i];
                }
                plan.inverse(&mut wre, &mut wim);
                conv_residue_check(&wre, &wim);
                for t in 0..n {
                    let ut = src[base + t * ch + c];
                    dst[base + t * ch + c] = wre[t] + dd[c] * ut;
                }
            }
        }
        flops::add((rows * ch * (5 * p + n)) as u64);
        Ok(self.push(
            out,
            Op::FftConv {
                u,
                f,
                d,
                saved: Box::new(ConvSaved {
                    n,
                    ch,
                    rows,
                    padded: p,
                    f_spec,
                    u_spec,
                }),
            },
        ))
    }

    // ---- shape movement ---------------------------------------------------

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// [.., n, d] -> [.., h, n, d/h].
    pub fn split_heads(&mut self, x: NodeId, heads: usize) -> Result<NodeId> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() < 2 {
            return Err(Error::shape("split_heads", format!("{s:?}")));
        }
        let (n, d) = (s[s.len() - 2], s[s.len() - 1]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "head count {heads} must divide width {d}"
            )));
        }
        let dh = d / heads;
        let batch = vx.numel() / (n * d);
        let mut out = vec![0.0; vx.numel()];
        let src = vx.data();
        for b in 0..batch {
            let sbase = b * n * d;
            for h in 0..heads {
                for t in 0..n {
                    let dst = sbase + h * n * dh + t * dh;
                    let from = sbase + t * d + h * dh;
                    out[dst..dst + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let mut shape: Vec<usize> = s[..s.len() - 2].to_vec();
        shape.extend([heads, n, dh]);
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::SplitHeads { x, heads }))
    }

    /// [.., h, n, dh] -> [.., n, h*dh].
    pub fn merge_heads(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() < 3 {
            return Err(Error::shape("merge_heads", format!("{s:?}")));
        }
        let (h, n, dh) = (s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]);
        let batch = vx.numel() / (h * n * dh);
        let d = h * dh;
        let mut out = vec![0.0; vx.numel()];
        let src = vx.data();
        for b in 0..batch {
            let sbase = b * n * d;
            for hh in 0..h {
                for t in 0..n {
                    let from = sbase + hh * n * dh + t * dh;
                    let dst = sbase + t * d + hh * dh;
                    out[dst..dst + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let mut shape: Vec<usize> = s[..s.len() - 3].to_vec();
        shape.extend([n, d]);
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::MergeHeads { x, heads: h }))
    }

    pub fn transpose_last2(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() < 2 {
            return Err(Error::shape("transpose", format!("{s:?}")));
        }
        let (p, q) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = vx.numel() / (p * q);
        let mut out = vec![0.0; vx.numel()];
        let src = vx.data();
        for b in 0..batch {
            let base = b * p * q;
            for i in 0..p {
                for j in 0..q {
                    out[base + j * p + i] = src[base + i * q + j];
                }
            }
        }
        let mut shape = s.to_vec();
        shape[s.len() - 2] = q;
        shape[s.len() - 1] = p;
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::TransposeLast2(x)))
    }

    pub fn slice_last_axis(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let vx = self.value(x);
        let (rows, k) = vx.as_rows();
        if start + len > k || len == 0 {
            return Err(Error::shape(
                "slice_last_axis",
                format!("[{start}, {start}+{len}) of {k}"),
            ));
        }
        let mut out = vec![0.0; rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len]
                .copy_from_slice(&vx.data()[r * k + start..r * k + start + len]);
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::SliceLastAxis { x, start }))
    }

    /// Zero-pads the last axis at the end.
    pub fn pad_last_axis(&mut self, x: NodeId, new_len: usize) -> Result<NodeId> {
        let vx = self.value(x);
        let (rows, k) = vx.as_rows();
        if new_len < k {
            return Err(Error::shape("pad_last_axis", format!("{k} -> {new_len}")));
        }
        let mut out = vec![0.0; rows * new_len];
        for r in 0..rows {
            out[r * new_len..r * new_len + k].copy_from_slice(&vx.data()[r * k..(r + 1) * k]);
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = new_len;
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::PadLastAxis(x)))
    }

    /// Stacks equally-shaped tensors along a fresh trailing axis.
    pub fn stack_last_axis(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Config("stack of zero tensors".into()));
        }
        let base_shape = self.value(xs[0]).shape().to_vec();
        for &x in xs {
            if self.value(x).shape() != base_shape {
                return Err(Error::shape(
                    "stack_last_axis",
                    format!("{:?} vs {base_shape:?}", self.value(x).shape()),
                ));
            }
        }
        let k = xs.len();
        let rows: usize = base_shape.iter().product();
        let mut out = vec![0.0; rows * k];
        for (i, &x) in xs.iter().enumerate() {
            for (r, &v) in self.value(x).data().iter().enumerate() {
                out[r * k + i] = v;
            }
        }
        let mut shape = base_shape;
        shape.push(k);
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::StackLastAxis(xs.to_vec())))
    }

    pub fn sum_last_axis(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let (rows, k) = vx.as_rows();
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            out[r] = vx.data()[r * k..(r + 1) * k].iter().sum();
        }
        let shape: Vec<usize> = if vx.shape().len() == 1 {
            vec![1]
        } else {
            vx.shape()[..vx.shape().len() - 1].to_vec()
        };
        flops::add(vx.numel() as u64);
        let out = Tensor::new(shape, out).expect("sum shape");
        self.push(out, Op::SumLastAxis(x))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().sum();
        flops::add(self.value(x).numel() as u64);
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    /// x[.., k] * s[..] with s broadcast along the last axis of x.
    pub fn mul_broadcast_last(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let vs = self.value(s);
        let (rows, k) = vx.as_rows();
        let expected: &[usize] = if vx.shape().len() == 1 {
            &[1]
        } else {
            &vx.shape()[..vx.shape().len() - 1]
        };
        if vs.shape() != expected {
            return Err(Error::shape(
                "mul_broadcast_last",
                format!("{:?} * {:?}", vx.shape(), vs.shape()),
            ));
        }
        let mut out = vx.clone();
        for r in 0..rows {
            let c = vs.data()[r];
            for v in out.data_mut()[r * k..(r + 1) * k].iter_mut() {
                *v *= c;
            }
        }
        flops::add(vx.numel() as u64);
        Ok(self.push(out, Op::MulBroadcastLast { x, s }))
    }

    /// [g, c] -> [g*times, c], each row repeated `times` times consecutively.
    pub fn repeat_rows(&mut self, x: NodeId, times: usize) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.shape().len() != 2 || times == 0 {
            return Err(Error::shape(
                "repeat_rows",
                format!("{:?} x{times}", vx.shape()),
            ));
        }
        let (g, c) = (vx.shape()[0], vx.shape()[1]);
        let mut out = vec![0.0; g * times * c];
        for row in 0..g {
            let src = &vx.data()[row * c..(row + 1) * c];
            for t in 0..times {
                let dst = (row * times + t) * c;
                out[dst..dst + c].copy_from_slice(src);
            }
        }
        let out = Tensor::new(vec![g * times, c], out)?;
        Ok(self.push(out, Op::RepeatRows { x, times }))
    }

    /// Mean over examples of -log softmax(logits[.., last, :])[target].
    /// Accepts [n, v] with one target or [b, n, v] with b targets.
    pub fn cross_entropy_last_token(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let vl = self.value(logits);
        let s = vl.shape();
        let (b, n, v) = match s.len() {
            2 => (1, s[0], s[1]),
            3 => (s[0], s[1], s[2]),
            _ => return Err(Error::shape("cross_entropy_last_token", format!("{s:?}"))),
        };
        if targets.len() != b {
            return Err(Error::shape(
                "cross_entropy_last_token",
                format!("{} targets for batch {b}", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Config(format!(
                "target {bad} out of vocabulary {v}"
            )));
        }
        let mut probs = vec![0.0; b * v];
        let mut loss = 0.0;
        for e in 0..b {
            let row = &vl.data()[(e * n + n - 1) * v..(e * n + n) * v];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x));
            let mut z = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let p = (x - m).exp();
                probs[e * v + j] = p;
                z += p;
            }
            for p in probs[e * v..(e + 1) * v].iter_mut() {
                *p /= z;
            }
            loss -= probs[e * v + targets[e]].ln();
        }
        loss /= b as f64;
        flops::add((b * v * 6) as u64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyLastToken {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Inverted dropout: keeps with probability 1-p, scales by 1/(1-p).
    pub fn dropout(&mut self, x: NodeId, p: f64, rng: &mut Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} out of [0, 1)")));
        }
        if p == 0.0 {
            // no-op; keep the graph slim
            return Ok(x);
        }
        let keep = 1.0 - p;
        let inv = 1.0 / keep;
        let vx = self.value(x);
        let mask: Vec<f64> = (0..vx.numel())
            .map(|_| if rng.uniform() < keep { inv } else { 0.0 })
            .collect();
        let mut out = vx.clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        flops::add(out.numel() as u64);
        Ok(self.push(out, Op::Dropout { x, mask }))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar loss; visits nodes newest-to-oldest once.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..n).rev() {
            let Some(go) = grads[idx].take() else {
                continue;
            };
            self.accumulate_into_inputs(idx, &go, &mut grads)?;
            grads[idx] = Some(go);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate_into_inputs(
        &self,
        idx: usize,
        go: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let node = &self.nodes[idx];
        let accum = |grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor| {
            match &mut grads[id.0] {
                Some(g) => {
                    for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accum(grads, *a, go.clone());
                accum(grads, *b, go.clone());
            }
            Op::Sub(a, b) => {
                accum(grads, *a, go.clone());
                accum(grads, *b, go.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let da = go.zip(self.value(*b), |g, y| g * y)?;
                let db = go.zip(self.value(*a), |g, x| g * x)?;
                flops::add(2 * go.numel() as u64);
                accum(grads, *a, da);
                accum(grads, *b, db);
            }
            Op::Div(a, b) => {
                let vb = self.value(*b);
                let da = go.zip(vb, |g, y| g / y)?;
                let mut db = go.zip(self.value(*a), |g, x| g * x)?;
                for (d, y) in db.data_mut().iter_mut().zip(vb.data()) {
                    *d = -*d / (y * y);
                }
                flops::add(4 * go.numel() as u64);
                accum(grads, *a, da);
                accum(grads, *b, db);
            }
            Op::Scale(x, c) => {
                let c = *c;
                accum(grads, *x, go.map(|v| c * v));
            }
            Op::AddScalar(x) => accum(grads, *x, go.clone()),
            Op::Exp(x) => {
                let d = go.zip(&node.value, |g, y| g * y)?;
                accum(grads, *x, d);
            }
            Op::Sin(x) => {
                let d = go.zip(self.value(*x), |g, v| g * v.cos())?;
                accum(grads, *x, d);
            }
            Op::Cos(x) => {
                let d = go.zip(self.value(*x), |g, v| -g * v.sin())?;
                accum(grads, *x, d);
            }
            Op::Recip(x) => {
                let d = go.zip(&node.value, |g, y| -g * y * y)?;
                accum(grads, *x, d);
            }
            Op::Elu1(x) => {
                let d = go.zip(self.value(*x), |g, v| if v > 0.0 { g } else { g * v.exp() })?;
                accum(grads, *x, d);
            }
            Op::ClampMin(x, lo) => {
                let lo = *lo;
                let d = go.zip(self.value(*x), |g, v| if v >= lo { g } else { 0.0 })?;
                accum(grads, *x, d);
            }
            Op::Gelu { x, t } => {
                let vx = self.value(*x);
                let mut d = vec![0.0; vx.numel()];
                for (i, dv) in d.iter_mut().enumerate() {
                    let v = vx.data()[i];
                    let tv = t[i];
                    let sech2 = 1.0 - tv * tv;
                    *dv = go.data()[i]
                        * (0.5 * (1.0 + tv)
                            + 0.5 * v * sech2 * GELU_K * (1.0 + 3.0 * GELU_C * v * v));
                }
                flops::add(6 * vx.numel() as u64);
                accum(grads, *x, Tensor::new(vx.shape().to_vec(), d)?);
            }
            Op::Matmul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (rows, q) = va.as_rows();
                let r = vb.shape()[1];
                // da = go @ b^T
                let mut da = vec![0.0; rows * q];
                matmul_nt(&mut da, go.data(), vb.data(), rows, r, q);
                // db = a^T @ go
                let mut db = vec![0.0; q * r];
                matmul_tn(&mut db, va.data(), go.data(), rows, q, r);
                accum(grads, *a, Tensor::new(va.shape().to_vec(), da)?);
                accum(grads, *b, Tensor::new(vb.shape().to_vec(), db)?);
            }
            Op::Bmm(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let sa = va.shape();
                let sb = vb.shape();
                let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let r = sb[sb.len() - 1];
                let batch: usize = sa[..sa.len() - 2].iter().product();
                let mut da = vec![0.0; va.numel()];
                let mut db = vec![0.0; vb.numel()];
                for i in 0..batch {
                    matmul_nt(
                        &mut da[i * p * q..(i + 1) * p * q],
                        &go.data()[i * p * r..(i + 1) * p * r],
                        &vb.data()[i * q * r..(i + 1) * q * r],
                        p,
                        r,
                        q,
                    );
                    matmul_tn(
                        &mut db[i * q * r..(i + 1) * q * r],
                        &va.data()[i * p * q..(i + 1) * p * q],
                        &go.data()[i * p * r..(i + 1) * p * r],
                        p,
                        q,
                        r,
                    );
                }
                accum(grads, *a, Tensor::new(sa.to_vec(), da)?);
                accum(grads, *b, Tensor::new(sb.to_vec(), db)?);
            }
            Op::AddBias(x, bias) => {
                let d = self.value(*bias).numel();
                let (rows, _) = go.as_rows();
                let mut db = vec![0.0; d];
                for rr in 0..rows {
                    for (j, v) in go.data()[rr * d..(rr + 1) * d].iter().enumerate() {
                        db[j] += v;
                    }
                }
                accum(grads, *x, go.clone());
                accum(grads, *bias, Tensor::new(vec![d], db)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let vx = self.value(*x);
                let g = self.value(*gain).data();
                let (rows, d) = vx.as_rows();
                let mut dx = vec![0.0; vx.numel()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for rix in 0..rows {
                    let xrow = &vx.data()[rix * d..(rix + 1) * d];
                    let grow = &go.data()[rix * d..(rix + 1) * d];
                    let (mu, rs) = (mean[rix], rstd[rix]);
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let xhat = (xrow[j] - mu) * rs;
                        let dxhat = grow[j] * g[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgain[j] += grow[j] * xhat;
                        dbias[j] += grow[j];
                    }
                    let inv_d = 1.0 / d as f64;
                    for j in 0..d {
                        let xhat = (xrow[j] - mu) * rs;
                        let dxhat = grow[j] * g[j];
                        dx[rix * d + j] =
                            rs * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
                    }
                }
                flops::add((rows * d * 9) as u64);
                accum(grads, *x, Tensor::new(vx.shape().to_vec(), dx)?);
                accum(grads, *gain, Tensor::new(vec![d], dgain)?);
                accum(grads, *bias, Tensor::new(vec![d], dbias)?);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let (rows, d) = y.as_rows();
                let mut dx = vec![0.0; y.numel()];
                for r in 0..rows {
                    let yrow = &y.data()[r * d..(r + 1) * d];
                    let grow = &go.data()[r * d..(r + 1) * d];
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = yrow[j] * (grow[j] - dot);
                    }
                }
                flops::add((rows * d * 3) as u64);
                accum(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::CausalMask(x) => {
                let s = node.value.shape();
                let n = s[s.len() - 1];
                let batch = node.value.numel() / (n * n);
                let mut dx = go.data().to_vec();
                for b in 0..batch {
                    let mat = &mut dx[b * n * n..(b + 1) * n * n];
                    for i in 0..n {
                        for v in mat[i * n + i + 1..(i + 1) * n].iter_mut() {
                            *v = 0.0;
                        }
                    }
                }
                accum(grads, *x, Tensor::new(s.to_vec(), dx)?);
            }
            Op::Embedding { weight, ids } => {
                let w = self.value(*weight);
                let d = w.shape()[1];
                let mut dw = vec![0.0; w.numel()];
                for (k, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dw[id * d + j] += go.data()[k * d + j];
                    }
                }
                accum(grads, *weight, Tensor::new(w.shape().to_vec(), dw)?);
            }
            Op::FftConv { u, f, d, saved } => {
                let vu = self.value(*u);
                let vd = self.value(*d);
                let (n, ch, rows, p) = (saved.n, saved.ch, saved.rows, saved.padded);
                let plan = Radix2::new(p)?;
                let mut du = vec![0.0; vu.numel()];
                let mut df = vec![0.0; ch * n];
                let mut dd = vec![0.0; ch];
                // spectral accumulators for df, flat [ch][2][p]
                let mut df_acc = vec![0.0; ch * 2 * p];
                let mut dre = vec![0.0; p];
                let mut dim = vec![0.0; p];
                let mut wre = vec![0.0; p];
                let mut wim = vec![0.0; p];
                for r in 0..rows {
                    let base = r * n * ch;
                    for c in 0..ch {
                        dre[..n].iter_mut().enumerate().for_each(|(t, v)| {
                            *v = go.data()[base + t * ch + c];
                        });
                        dre[n..].fill(0.0);
                        dim.fill(0.0);
                        plan.forward(&mut dre, &mut dim);
                        let us = &saved.u_spec[(r * ch + c) * 2 * p..(r * ch + c + 1) * 2 * p];
                        let (ur, ui) = us.split_at(p);
                        // df_spec += conj(U) . DY
                        {
                            let (acc_r, acc_i) =
                                df_acc[c * 2 * p..(c + 1) * 2 * p].split_at_mut(p);
                            for i in 0..p {
                                acc_r[i] += ur[i] * dre[i] + ui[i] * dim[i];
                                acc_i[i] += ur[i] * dim[i] - ui[i] * dre[i];
                            }
                        }
                        // du = iFFT(conj(F) . DY)[:n] + d dy
                        let fs = &saved.f_spec[c * 2 * p..(c + 1) * 2 * p];
                        let (fr, fi) = fs.split_at(p);
                        for i in 0..p {
                            wre[i] = fr[i] * dre[i] + fi[i] * dim[i];
                            wim[i] = fr[i] * dim[i] - fi[i] * dre[i];
                        }
                        plan.inverse(&mut wre, &mut wim);
                        conv_residue_check(&wre, &wim);
                        let dc = vd.data()[c];
                        for t in 0..n {
                            let ut = vu.data()[base + t * ch + c];
                            let g = go.data()[base + t * ch + c];
                            du[base + t * ch + c] = wre[t] + dc * g;
                            dd[c] += g * ut;
                        }
                    }
                }
                flops::add((rows * ch * (8 * p + 2 * n)) as u64);
                for c in 0..ch {
                    let (acc_r, acc_i) = df_acc[c * 2 * p..(c + 1) * 2 * p].split_at_mut(p);
                    plan.inverse(acc_r, acc_i);
                    conv_residue_check(acc_r, acc_i);
                    df[c * n..(c + 1) * n].copy_from_slice(&acc_r[..n]);
                }
                accum(grads, *u, Tensor::new(vu.shape().to_vec(), du)?);
                accum(grads, *f, Tensor::new(vec![ch, n], df)?);
                accum(grads, *d, Tensor::new(vec![ch], dd)?);
            }
            Op::Reshape(x) => {
                let sx = self.value(*x).shape().to_vec();
                accum(grads, *x, go.reshape(&sx)?);
            }
            Op::SplitHeads { x, heads } => {
                // inverse permutation of split: merge
                let vx = self.value(*x);
                let s = vx.shape();
                let (n, d) = (s[s.len() - 2], s[s.len() - 1]);
                let dh = d / *heads;
                let batch = vx.numel() / (n * d);
                let mut dx = vec![0.0; vx.numel()];
                for b in 0..batch {
                    let base = b * n * d;
                    for h in 0..*heads {
                        for t in 0..n {
                            let from = base + h * n * dh + t * dh;
                            let dst = base + t * d + h * dh;
                            dx[dst..dst + dh].copy_from_slice(&go.data()[from..from + dh]);
                        }
                    }
                }
                accum(grads, *x, Tensor::new(s.to_vec(), dx)?);
            }
            Op::MergeHeads { x, heads } => {
                let vx = self.value(*x);
                let s = vx.shape();
                let (n, dh) = (s[s.len() - 2], s[s.len() - 1]);
                let d = *heads * dh;
                let batch = vx.numel() / (*heads * n * dh);
                let mut dx = vec![0.0; vx.numel()];
                for b in 0..batch {
                    let base = b * n * d;
                    for h in 0..*heads {
                        for t in 0..n {
                            let from = base + t * d + h * dh;
                            let dst = base + h * n * dh + t * dh;
                            dx[dst..dst + dh].copy_from_slice(&go.data()[from..from + dh]);
                        }
                    }
                }
                accum(grads, *x, Tensor::new(s.to_vec(), dx)?);
            }
            Op::TransposeLast2(x) => {
                let sx = self.value(*x).shape().to_vec();
                let (p, q) = (sx[sx.len() - 2], sx[sx.len() - 1]);
                let batch = self.value(*x).numel() / (p * q);
                let mut dx = vec![0.0; self.value(*x).numel()];
                for b in 0..batch {
                    let base = b * p * q;
                    for i in 0..p {
                        for j in 0..q {
                            dx[base + i * q + j] = go.data()[base + j * p + i];
                        }
                    }
                }
                accum(grads, *x, Tensor::new(sx, dx)?);
            }
            Op::SliceLastAxis { x, start } => {
                let vx = self.value(*x);
                let (rows, k) = vx.as_rows();
                let len = go.shape()[go.shape().len() - 1];
                let mut dx = vec![0.0; vx.numel()];
                for r in 0..rows {
                    dx[r * k + start..r * k + start + len]
                        .copy_from_slice(&go.data()[r * len..(r + 1) * len]);
                }
                accum(grads, *x, Tensor::new(vx.shape().to_vec(), dx)?);
            }
            Op::PadLastAxis(x) => {
                let vx = self.value(*x);
                let (rows, k) = vx.as_rows();
                let padded = go.shape()[go.shape().len() - 1];
                let mut dx = vec![0.0; vx.numel()];
                for r in 0..rows {
                    dx[r * k..(r + 1) * k].copy_from_slice(&go.data()[r * padded..r * padded + k]);
                }
                accum(grads, *x, Tensor::new(vx.shape().to_vec(), dx)?);
            }
            Op::StackLastAxis(xs) => {
                let k = xs.len();
                let rows = go.numel() / k;
                for (i, &x) in xs.iter().enumerate() {
                    let sx = self.value(x).shape().to_vec();
                    let mut dx = vec![0.0; rows];
                    for r in 0..rows {
                        dx[r] = go.data()[r * k + i];
                    }
                    accum(grads, x, Tensor::new(sx, dx)?);
                }
            }
            Op::SumLastAxis(x) => {
                let vx = self.value(*x);
                let (rows, k) = vx.as_rows();
                let mut dx = vec![0.0; vx.numel()];
                for r in 0..rows {
                    let g = go.data()[r];
                    dx[r * k..(r + 1) * k].fill(g);
                }
                accum(grads, *x, Tensor::new(vx.shape().to_vec(), dx)?);
            }
            Op::SumAll(x) => {
                let vx = self.value(*x);
                let g = go.item();
                accum(grads, *x, Tensor::full(vx.shape(), g));
            }
            Op::MulBroadcastLast { x, s } => {
                let vx = self.value(*x);
                let vs = self.value(*s);
                let (rows, k) = vx.as_rows();
                let mut dx = vec![0.0; vx.numel()];
                let mut ds = vec![0.0; vs.numel()];
                for r in 0..rows {
                    let c = vs.data()[r];
                    let mut acc = 0.0;
                    for j in 0..k {
                        let g = go.data()[r * k + j];
                        dx[r * k + j] = g * c;
                        acc += g * vx.data()[r * k + j];
                    }
                    ds[r] = acc;
                }
                flops::add(2 * vx.numel() as u64);
                accum(grads, *x, Tensor::new(vx.shape().to_vec(), dx)?);
                accum(grads, *s, Tensor::new(vs.shape().to_vec(), ds)?);
            }
            Op::RepeatRows { x, times } => {
                let vx = self.value(*x);
                let (g, c) = (vx.shape()[0], vx.shape()[1]);
                let mut dx = vec![0.0; vx.numel()];
                for row in 0..g {
                    for t in 0..*times {
                        let src = ((row * times) + t) * c;
                        for j in 0..c {
                            dx[row * c + j] += go.data()[src + j];
                        }
                    }
                }
                accum(grads, *x, Tensor::new(vx.shape().to_vec(), dx)?);
            }
            Op::CrossEntropyLastToken {
                logits,
                targets,
                probs,
            } => {
                let vl = self.value(*logits);
                let s = vl.shape();
                let (b, n, v) = match s.len() {
                    2 => (1, s[0], s[1]),
                    _ => (s[0], s[1], s[2]),
                };
                let g = go.item() / b as f64;
                let mut dl = vec![0.0; vl.numel()];
                for e in 0..b {
                    let base = (e * n + n - 1) * v;
                    for j in 0..v {
                        let onehot = if j == targets[e] { 1.0 } else { 0.0 };
                        dl[base + j] = g * (probs[e * v + j] - onehot);
                    }
                }
                flops::add((b * v) as u64);
                accum(grads, *logits, Tensor::new(s.to_vec(), dl)?);
            }
            Op::Dropout { x, mask } => {
                let mut dx = go.data().to_vec();
                for (d, m) in dx.iter_mut().zip(mask) {
                    *d *= m;
                }
                accum(grads, *x, Tensor::new(go.shape().to_vec(), dx)?);
            }
        }
        Ok(())
    }
}
