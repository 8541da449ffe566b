//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every operation executed through a [`Tape`] appends a node holding its
//! output value and whatever it needs to propagate gradients back to its
//! inputs. Nodes are appended in execution order, so the node list is
//! always topologically sorted and [`Tape::backward`] is a single reverse
//! sweep.
//!
//! Outputs are checked for NaN/Inf as each op completes. A non-finite value
//! fails the op with its name instead of propagating silently.

use crate::bypass::BypassKind;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddChannel(Var, Var),
    MulChannel(Var, Var),
    Relu(Var),
    Bypass(Var, BypassKind),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    BatchNormalize {
        x: Var,
        inv_std: Vec<f64>,
    },
    ChannelAffineConst {
        x: Var,
        scale: Vec<f64>,
    },
    GlobalAvgPool(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddChannel(..) => "add_channel",
            Op::MulChannel(..) => "mul_channel",
            Op::Relu(..) => "relu",
            Op::Bypass(..) => "bypass_apply",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNormalize { .. } => "batch_norm",
            Op::ChannelAffineConst { .. } => "batch_norm_inference",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Reshape(..) => "reshape",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddChannel(a, b)
            | Op::MulChannel(a, b)
            | Op::MatMul(a, b) => vec![a, b],
            Op::Conv2d { x, w, .. } => vec![x, w],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Bypass(a, _)
            | Op::GlobalAvgPool(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a) => vec![a],
            Op::BatchNormalize { x, .. } | Op::ChannelAffineConst { x, .. } => vec![x],
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Spatial bookkeeping for one convolution.
#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    batch: usize,
    in_ch: usize,
    height: usize,
    width: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Batch statistics computed by [`Tape::batch_normalize`], one entry per
/// channel. `variance` is the biased (population) estimate.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

/// Gradients returned by [`Tape::backward`], keyed by leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a `requires_grad` leaf. Leaves
    /// that did not contribute to the loss get an all-zero gradient; other
    /// nodes return `None`.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Iterates over `(leaf, gradient)` pairs in recording order.
    pub fn leaves(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (Var(i), g)))
    }
}

/// A recording of executed operations. One tape belongs to one thread.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn channel_layout(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(
            op,
            format!("expected a tensor of rank >= 2 with channels on axis 1, got {shape:?}"),
        ));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn rows_layout(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [rows, cols] => Ok((*rows, *cols)),
        _ => Err(Error::shape(op, format!("expected a [rows, cols] tensor, got {shape:?}"))),
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
fn gemm_abt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
fn gemm_atb_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

fn im2col(x: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let positions = g.positions();
    for c in 0..g.in_ch {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[r * positions..(r + 1) * positions];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        dst[oh * g.out_w + ow] = if ih >= 0
                            && iw >= 0
                            && (ih as usize) < g.height
                            && (iw as usize) < g.width
                        {
                            plane[ih as usize * g.width + iw as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im_acc(cols: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let positions = g.positions();
    for c in 0..g.in_ch {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[r * positions..(r + 1) * positions];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    if ih < 0 || ih as usize >= g.height {
                        continue;
                    }
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        if iw < 0 || iw as usize >= g.width {
                            continue;
                        }
                        plane[ih as usize * g.width + iw as usize] += src[oh * g.out_w + ow];
                    }
                }
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. It receives a gradient iff `value.requires_grad()`.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        let requires_grad = value.requires_grad();
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value.with_requires_grad(false), Op::Leaf, false)
    }

    /// Records a leaf that always receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.push(value.with_requires_grad(true), Op::Leaf, true)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn data(&self, var: Var) -> &[f64] {
        self.nodes[var.0].value.data()
    }

    fn needs_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = requires_grad || op.inputs().iter().any(|&v| self.needs_grad(v));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn record(&mut self, shape: &[usize], data: Vec<f64>, op: Op) -> Result<Var> {
        let value = Tensor::new(shape, data)?;
        self.push(value, op, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.record(&shape, data, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.record(&shape, data, Op::Scale(a, factor))
    }

    fn channel_binary(
        &mut self,
        x: Var,
        per_channel: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let name = op.name();
        let (n, c, inner) = channel_layout(name, self.shape(x))?;
        if self.shape(per_channel) != [c] {
            return Err(Error::shape(
                name,
                format!(
                    "per-channel operand {:?} does not match {c} channels",
                    self.shape(per_channel)
                ),
            ));
        }
        let src = self.data(x);
        let pc = self.data(per_channel);
        let mut data = Vec::with_capacity(src.len());
        for b in 0..n {
            for (ch, &p) in pc.iter().enumerate() {
                let base = (b * c + ch) * inner;
                data.extend(src[base..base + inner].iter().map(|&v| f(v, p)));
            }
        }
        let shape = self.shape(x).to_vec();
        self.record(&shape, data, op)
    }

    /// Adds `bias[c]` to every element of channel `c` (axis 1).
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.channel_binary(x, bias, Op::AddChannel(x, bias), |v, p| v + p)
    }

    /// Multiplies every element of channel `c` (axis 1) by `gain[c]`.
    pub fn mul_channel(&mut self, x: Var, gain: Var) -> Result<Var> {
        self.channel_binary(x, gain, Op::MulChannel(x, gain), |v, p| v * p)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.record(&shape, data, Op::Relu(x))
    }

    /// Applies a bypass function elementwise.
    pub fn bypass(&mut self, x: Var, kind: BypassKind) -> Result<Var> {
        let data = self
            .data(x)
            .iter()
            .map(|&v| kind.value_unchecked(v))
            .collect();
        let shape = self.shape(x).to_vec();
        self.record(&shape, data, Op::Bypass(x, kind))
    }

    /// `[m,k] · [k,n] → [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rows_layout("matmul", self.shape(a))?;
        let (k2, n) = rows_layout("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner extents differ: [{m},{k}] · [{k2},{n}]"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.data(a), self.data(b), &mut out, m, k, n);
        self.record(&[m, n], out, Op::MatMul(a, b))
    }

    /// 2-D cross-correlation of `x: [n,c,h,w]` with `w: [o,c,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (batch, in_ch, height, width) = match *self.shape(x) {
            [n, c, h, w] => (n, c, h, w),
            ref s => {
                return Err(Error::shape(
                    "conv2d",
                    format!("input must be [n,c,h,w], got {s:?}"),
                ))
            }
        };
        let (out_ch, kc, kh, kw) = match *self.shape(w) {
            [o, c, kh, kw] => (o, c, kh, kw),
            ref s => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel must be [out,in,kh,kw], got {s:?}"),
                ))
            }
        };
        if kc != in_ch {
            return Err(Error::contract(
                "conv2d",
                format!("kernel expects {kc} input channels, input has {in_ch}"),
            ));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d", "stride must be positive"));
        }
        let (ph, pw) = (height + 2 * padding, width + 2 * padding);
        if kh == 0 || kw == 0 || ph < kh || pw < kw {
            return Err(Error::contract(
                "conv2d",
                format!(
                    "kernel {kh}x{kw} does not fit a {height}x{width} input with padding {padding}"
                ),
            ));
        }
        let geom = ConvGeometry {
            batch,
            in_ch,
            height,
            width,
            out_ch,
            kh,
            kw,
            stride,
            padding,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        };
        let (patch, positions) = (geom.patch(), geom.positions());
        let mut cols = vec![0.0; batch * patch * positions];
        let mut out = vec![0.0; batch * out_ch * positions];
        let xs = self.data(x);
        let ws = self.data(w);
        let sample = in_ch * height * width;
        for b in 0..batch {
            let col = &mut cols[b * patch * positions..(b + 1) * patch * positions];
            im2col(&xs[b * sample..(b + 1) * sample], &geom, col);
            gemm_acc(
                ws,
                col,
                &mut out[b * out_ch * positions..(b + 1) * out_ch * positions],
                out_ch,
                patch,
                positions,
            );
        }
        self.record(
            &[batch, out_ch, geom.out_h, geom.out_w],
            out,
            Op::Conv2d { x, w, geom, cols },
        )
    }

    /// Normalizes each channel (axis 1) to zero mean and unit variance over
    /// all other axes, using the biased batch variance plus `eps`.
    pub fn batch_normalize(&mut self, x: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (n, c, inner) = channel_layout("batch_norm", self.shape(x))?;
        let count = n * inner;
        if count == 0 {
            return Err(Error::contract("batch_norm", "no elements to normalize"));
        }
        let src = self.data(x);
        let mut mean = vec![0.0; c];
        let mut variance = vec![0.0; c];
        for ch in 0..c {
            let values = || (0..n).flat_map(move |b| &src[(b * c + ch) * inner..(b * c + ch + 1) * inner]);
            let mu = values().sum::<f64>() / count as f64;
            mean[ch] = mu;
            variance[ch] = values().map(|v| (v - mu) * (v - mu)).sum::<f64>() / count as f64;
        }
        let inv_std: Vec<f64> = variance.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut data = Vec::with_capacity(src.len());
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                data.extend(
                    src[base..base + inner]
                        .iter()
                        .map(|&v| (v - mean[ch]) * inv_std[ch]),
                );
            }
        }
        let shape = self.shape(x).to_vec();
        let out = self.record(&shape, data, Op::BatchNormalize { x, inv_std })?;
        Ok((
            out,
            BatchStats {
                mean,
                variance,
                count,
            },
        ))
    }

    /// `(x − mean[c]) / sqrt(var[c] + eps)` with fixed statistics.
    pub fn normalize_with(&mut self, x: Var, mean: &[f64], variance: &[f64], eps: f64) -> Result<Var> {
        let (n, c, inner) = channel_layout("batch_norm_inference", self.shape(x))?;
        if mean.len() != c || variance.len() != c {
            return Err(Error::shape(
                "batch_norm_inference",
                format!("statistics for {} channels, input has {c}", mean.len()),
            ));
        }
        let scale: Vec<f64> = variance.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let src = self.data(x);
        let mut data = Vec::with_capacity(src.len());
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                data.extend(
                    src[base..base + inner]
                        .iter()
                        .map(|&v| (v - mean[ch]) * scale[ch]),
                );
            }
        }
        let shape = self.shape(x).to_vec();
        self.record(&shape, data, Op::ChannelAffineConst { x, scale })
    }

    /// `[n,c,h,w] → [n,c]`, averaging over spatial positions.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, inner) = match *self.shape(x) {
            [n, c, h, w] if h * w > 0 => (n, c, h * w),
            ref s => {
                return Err(Error::shape(
                    "global_avg_pool",
                    format!("expected non-empty [n,c,h,w], got {s:?}"),
                ))
            }
        };
        let data = self
            .data(x)
            .chunks(inner)
            .map(|plane| plane.iter().sum::<f64>() / inner as f64)
            .collect();
        self.record(&[n, c], data, Op::GlobalAvgPool(x))
    }

    /// Row-wise softmax over `[rows, classes]`, stabilized by subtracting
    /// each row's maximum.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, k) = rows_layout("softmax", self.shape(x))?;
        let data = softmax_rows(self.data(x), k);
        let shape = self.shape(x).to_vec();
        self.record(&shape, data, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (_, k) = rows_layout("log_softmax", self.shape(x))?;
        let mut data = Vec::with_capacity(self.data(x).len());
        for row in self.data(x).chunks(k) {
            let lse = log_sum_exp(row);
            data.extend(row.iter().map(|&v| v - lse));
        }
        let shape = self.shape(x).to_vec();
        self.record(&shape, data, Op::LogSoftmax(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.record(&[1], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.data(x).len();
        if n == 0 {
            return Err(Error::contract("mean", "mean of an empty tensor"));
        }
        let s = self.data(x).iter().sum::<f64>() / n as f64;
        self.record(&[1], vec![s], Op::Mean(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let data = self.data(x).to_vec();
        self.record(shape, data, Op::Reshape(x))
    }

    /// `(1/n) Σᵢ −weights[i] · ln softmax(logits[i])[labels[i]]`, fused for
    /// numerical stability.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
        let (n, k) = rows_layout("cross_entropy", self.shape(logits))?;
        if labels.len() != n || weights.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!(
                    "{n} rows but {} labels and {} weights",
                    labels.len(),
                    weights.len()
                ),
            ));
        }
        if n == 0 {
            return Err(Error::contract("cross_entropy", "empty batch"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::contract(
                "cross_entropy",
                format!("label {bad} outside [0, {k})"),
            ));
        }
        let z = self.data(logits);
        let mut loss = 0.0;
        for (i, row) in z.chunks(k).enumerate() {
            let lse = log_sum_exp(row);
            loss += weights[i] * (lse - row[labels[i]]);
        }
        let probs = softmax_rows(z, k);
        self.record(
            &[1],
            vec![loss / n as f64],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        )
    }

    /// Propagates gradients from a single-element `loss` back to every
    /// `requires_grad` leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(
                "backward",
                format!(
                    "loss must have exactly one element, got shape {:?}",
                    self.shape(loss)
                ),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            for (input, g) in self.local_grads(node, &upstream) {
                if !self.needs_grad(input) {
                    continue;
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: node.op.name() });
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        let grads = self
            .nodes
            .iter()
            .enumerate()
            .map(|(id, node)| {
                if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                    return None;
                }
                let data = grads
                    .get_mut(id)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                Some(Tensor::new(node.value.shape(), data).expect("gradient shape mirrors value"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian products of one node with respect to its inputs.
    fn local_grads(&self, node: &Node, up: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let out = node.value.data();
        match node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(a, up.to_vec()), (b, up.to_vec())],
            Op::Sub(a, b) => vec![(a, up.to_vec()), (b, up.iter().map(|g| -g).collect())],
            Op::Mul(a, b) => {
                let (da, db) = (self.data(a), self.data(b));
                vec![
                    (a, up.iter().zip(db).map(|(g, y)| g * y).collect()),
                    (b, up.iter().zip(da).map(|(g, x)| g * x).collect()),
                ]
            }
            Op::Scale(a, f) => vec![(a, up.iter().map(|g| g * f).collect())],
            Op::AddChannel(x, bias) => {
                let (n, c, inner) = channel_layout("add_channel", self.shape(x)).unwrap();
                let mut db = vec![0.0; c];
                for b in 0..n {
                    for (ch, acc) in db.iter_mut().enumerate() {
                        let base = (b * c + ch) * inner;
                        *acc += up[base..base + inner].iter().sum::<f64>();
                    }
                }
                vec![(x, up.to_vec()), (bias, db)]
            }
            Op::MulChannel(x, gain) => {
                let (n, c, inner) = channel_layout("mul_channel", self.shape(x)).unwrap();
                let (xs, gs) = (self.data(x), self.data(gain));
                let mut dx = vec![0.0; xs.len()];
                let mut dg = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * inner;
                        for i in base..base + inner {
                            dx[i] = up[i] * gs[ch];
                            dg[ch] += up[i] * xs[i];
                        }
                    }
                }
                vec![(x, dx), (gain, dg)]
            }
            Op::Relu(x) => vec![(
                x,
                up.iter()
                    .zip(self.data(x))
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect(),
            )],
            Op::Bypass(x, kind) => vec![(
                x,
                up.iter()
                    .zip(self.data(x))
                    .map(|(&g, &v)| g * kind.derivative_unchecked(v))
                    .collect(),
            )],
            Op::MatMul(a, b) => {
                let (m, k) = rows_layout("matmul", self.shape(a)).unwrap();
                let n = self.shape(b)[1];
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; k * n];
                if self.needs_grad(a) {
                    gemm_abt_acc(up, self.data(b), &mut da, m, n, k);
                }
                if self.needs_grad(b) {
                    gemm_atb_acc(self.data(a), up, &mut db, m, k, n);
                }
                vec![(a, da), (b, db)]
            }
            Op::Conv2d {
                x,
                w,
                ref geom,
                ref cols,
            } => {
                let (patch, positions) = (geom.patch(), geom.positions());
                let plane_out = geom.out_ch * positions;
                let sample = geom.in_ch * geom.height * geom.width;
                let mut dw = vec![0.0; geom.out_ch * patch];
                let mut dx = vec![0.0; geom.batch * sample];
                let want_dx = self.needs_grad(x);
                let mut dcols = vec![0.0; patch * positions];
                for b in 0..geom.batch {
                    let dout = &up[b * plane_out..(b + 1) * plane_out];
                    let col = &cols[b * patch * positions..(b + 1) * patch * positions];
                    gemm_abt_acc(dout, col, &mut dw, geom.out_ch, positions, patch);
                    if want_dx {
                        dcols.iter_mut().for_each(|v| *v = 0.0);
                        gemm_atb_acc(self.data(w), dout, &mut dcols, geom.out_ch, patch, positions);
                        col2im_acc(&dcols, geom, &mut dx[b * sample..(b + 1) * sample]);
                    }
                }
                vec![(x, dx), (w, dw)]
            }
            Op::BatchNormalize { x, ref inv_std } => {
                let (n, c, inner) = channel_layout("batch_norm", self.shape(x)).unwrap();
                let m = (n * inner) as f64;
                let mut dx = vec![0.0; up.len()];
                for (ch, &inv) in inv_std.iter().enumerate().take(c) {
                    let idx = || {
                        (0..n).flat_map(move |b| (b * c + ch) * inner..(b * c + ch + 1) * inner)
                    };
                    let sum_g: f64 = idx().map(|i| up[i]).sum();
                    let sum_gx: f64 = idx().map(|i| up[i] * out[i]).sum();
                    for i in idx() {
                        dx[i] = inv * (up[i] - sum_g / m - out[i] * sum_gx / m);
                    }
                }
                vec![(x, dx)]
            }
            Op::ChannelAffineConst { x, ref scale } => {
                let (_, c, inner) = channel_layout("batch_norm_inference", self.shape(x)).unwrap();
                let dx = up
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g * scale[(i / inner) % c])
                    .collect();
                vec![(x, dx)]
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(x);
                let inner = s[2] * s[3];
                let dx = up
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g / inner as f64, inner))
                    .collect();
                vec![(x, dx)]
            }
            Op::Softmax(x) => {
                let k = self.shape(x)[1];
                let mut dx = Vec::with_capacity(up.len());
                for (g, y) in up.chunks(k).zip(out.chunks(k)) {
                    let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                    dx.extend(g.iter().zip(y).map(|(gi, yi)| yi * (gi - dot)));
                }
                vec![(x, dx)]
            }
            Op::LogSoftmax(x) => {
                let k = self.shape(x)[1];
                let mut dx = Vec::with_capacity(up.len());
                for (g, y) in up.chunks(k).zip(out.chunks(k)) {
                    let total: f64 = g.iter().sum();
                    dx.extend(g.iter().zip(y).map(|(gi, yi)| gi - yi.exp() * total));
                }
                vec![(x, dx)]
            }
            Op::Sum(x) => vec![(x, vec![up[0]; self.data(x).len()])],
            Op::Mean(x) => {
                let n = self.data(x).len();
                vec![(x, vec![up[0] / n as f64; n])]
            }
            Op::Reshape(x) => vec![(x, up.to_vec())],
            Op::CrossEntropy {
                logits,
                ref labels,
                ref weights,
                ref probs,
            } => {
                let k = self.shape(logits)[1];
                let n = labels.len() as f64;
                let mut dz = probs.clone();
                for (i, row) in dz.chunks_mut(k).enumerate() {
                    row[labels[i]] -= 1.0;
                    let s = up[0] * weights[i] / n;
                    row.iter_mut().for_each(|v| *v *= s);
                }
                vec![(logits, dz)]
            }
        }
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_rows(data: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|v| (v - max).exp()));
        let total: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|v| *v /= total);
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape
            .param(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn h3_gradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[1])).unwrap();
        let y = tape.bypass(x, BypassKind::H3).unwrap();
        let loss = tape.sum(y).unwrap();
        assert_eq!(tape.backward(loss).unwrap().get(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn non_participating_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full(&[2], 3.0)).unwrap();
        let unused = tape.param(Tensor::full(&[4], 1.0)).unwrap();
        let loss = tape.sum(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(unused).unwrap(), &Tensor::zeros(&[4]));
        assert_eq!(grads.leaves().count(), 2);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full(&[2], 3.0)).unwrap();
        let x = tape.param(Tensor::full(&[2], 1.0)).unwrap();
        let y = tape.mul(c, x).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full(&[2], 1.0)).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Contract { .. })));
    }

    #[test]
    fn nan_is_reported_with_op_name() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full(&[1], 1e200)).unwrap();
        let err = tape.mul(x, x).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "mul" }), "{err}");
    }

    #[test]
    fn nan_leaf_is_rejected() {
        let mut tape = Tape::new();
        let err = tape
            .leaf(Tensor::new(&[1], vec![f64::NAN]).unwrap())
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "leaf" }));
    }

    #[test]
    fn reused_node_accumulates() {
        // loss = sum(x + x + x)
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full(&[2], 0.5)).unwrap();
        let a = tape.add(x, x).unwrap();
        let b = tape.add(a, x).unwrap();
        let loss = tape.sum(b).unwrap();
        assert_eq!(tape.backward(loss).unwrap().get(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::new();
        let z = tape.param(Tensor::zeros(&[1, 2])).unwrap();
        assert!(tape.cross_entropy(z, &[2], &[1.0]).is_err());
    }

    #[test]
    fn matmul_matches_hand_product() {
        let mut tape = Tape::new();
        let a = tape
            .constant(Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap())
            .unwrap();
        let b = tape
            .constant(Tensor::new(&[3, 1], vec![1., 0., -1.]).unwrap())
            .unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[-2.0, -2.0]);
    }

    #[test]
    fn replay_is_bitwise_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut tape = Tape::new();
            let x = tape.param(Tensor::randn(&[2, 2, 5, 5], 1.0, &mut rng)).unwrap();
            let w = tape.param(Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng)).unwrap();
            let y = tape.conv2d(x, w, 2, 1).unwrap();
            let y = tape.bypass(y, BypassKind::H2).unwrap();
            let loss = tape.sum(y).unwrap();
            let g = tape.backward(loss).unwrap();
            (
                tape.value(loss).clone(),
                g.get(x).unwrap().clone(),
                g.get(w).unwrap().clone(),
            )
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0.data()[0].to_bits(), b.0.data()[0].to_bits());
        assert!(a.1.data().iter().zip(b.1.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert!(a.2.data().iter().zip(b.2.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
