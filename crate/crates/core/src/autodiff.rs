//! Tape-based reverse-mode automatic differentiation over dense NCHW f64
//! tensors. Every primitive used by the network and its losses lives here;
//! gradients are exact (up to floating point) and are validated against
//! central finite differences in the test suite.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::ComplexGrid;
use crate::kspace::{fft2_centered, ifft2_centered};

/// Dense 4-D tensor in NCHW layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor { n, c, h, w, data: vec![0.0; n * c * h * w] }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::ShapeMismatch(format!(
                "tensor data: expected {} values for {}x{}x{}x{}, found {}",
                n * c * h * w,
                n,
                c,
                h,
                w,
                data.len()
            )));
        }
        Ok(Tensor { n, c, h, w, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { n: 1, c: 1, h: 1, w: 1, data: vec![v] }
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(n, c, y, x)]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub type NodeId = usize;

enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    /// x [n,c,h,w] + bias [1,c,1,1]
    AddBias,
    /// x [n,c,h,w] * s [n,c,1,1]
    MulChannel,
    /// x [n,c,1,1] broadcast to [n,c,h,w]
    BroadcastHw,
    Silu,
    Sigmoid,
    Abs,
    Square,
    /// softmax along the w axis
    SoftmaxW,
    /// [n,c,r,k] x [n,c,k,m] (or [n,c,m,k] when transposed)
    MatMul { transpose_b: bool },
    Reshape,
    Conv2d { groups: usize, dilation: usize, pad: usize },
    BatchNorm { training: bool, invstd: Vec<f64>, xhat: Vec<f64> },
    GroupNorm { groups: usize, invstd: Vec<f64>, xhat: Vec<f64> },
    MaxPool { argmax: Vec<usize> },
    UpNearest2,
    UpBilinear2,
    Concat,
    SliceC { start: usize },
    WarpBilinear,
    ComplexMag { eps: f64 },
    Fft2cMag { spectra: Vec<ComplexGrid>, mags: Vec<f64> },
    DiffH,
    DiffW,
    SumAll,
    MeanAll,
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    needs_grad: bool,
}

/// Records a forward computation so `backward` can replay it in reverse.
/// A tape is built per forward pass and discarded afterwards.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node { op, inputs, value, needs_grad });
        self.nodes.len() - 1
    }

    /// Insert a leaf tensor; `requires_grad` marks it as a differentiation
    /// target (parameters and probed inputs).
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, inputs: vec![], value, needs_grad: requires_grad });
        self.nodes.len() - 1
    }

    fn check_same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{}: {:?} vs {:?}",
                what,
                self.nodes[a].value.shape(),
                self.nodes[b].value.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape(a, b, "add operands")?;
        let mut v = self.nodes[a].value.clone();
        for (o, x) in v.data.iter_mut().zip(&self.nodes[b].value.data) {
            *o += x;
        }
        Ok(self.push(Op::Add, vec![a, b], v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape(a, b, "sub operands")?;
        let mut v = self.nodes[a].value.clone();
        for (o, x) in v.data.iter_mut().zip(&self.nodes[b].value.data) {
            *o -= x;
        }
        Ok(self.push(Op::Sub, vec![a, b], v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape(a, b, "mul operands")?;
        let mut v = self.nodes[a].value.clone();
        for (o, x) in v.data.iter_mut().zip(&self.nodes[b].value.data) {
            *o *= x;
        }
        Ok(self.push(Op::Mul, vec![a, b], v))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let mut v = self.nodes[a].value.clone();
        for o in v.data.iter_mut() {
            *o *= s;
        }
        self.push(Op::Scale(s), vec![a], v)
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        let bv = &self.nodes[bias].value;
        if bv.shape() != (1, xv.c, 1, 1) {
            return Err(Error::ShapeMismatch(format!(
                "bias: expected (1,{},1,1), found {:?}",
                xv.c,
                bv.shape()
            )));
        }
        let mut v = xv.clone();
        let hw = v.h * v.w;
        for n in 0..v.n {
            for c in 0..v.c {
                let b = bv.data[c];
                let base = (n * v.c + c) * hw;
                for i in 0..hw {
                    v.data[base + i] += b;
                }
            }
        }
        Ok(self.push(Op::AddBias, vec![x, bias], v))
    }

    pub fn mul_channel(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        let sv = &self.nodes[s].value;
        if sv.shape() != (xv.n, xv.c, 1, 1) {
            return Err(Error::ShapeMismatch(format!(
                "channel scale: expected ({},{},1,1), found {:?}",
                xv.n,
                xv.c,
                sv.shape()
            )));
        }
        let mut v = xv.clone();
        let hw = v.h * v.w;
        for n in 0..v.n {
            for c in 0..v.c {
                let f = sv.data[n * v.c + c];
                let base = (n * v.c + c) * hw;
                for i in 0..hw {
                    v.data[base + i] *= f;
                }
            }
        }
        Ok(self.push(Op::MulChannel, vec![x, s], v))
    }

    pub fn broadcast_hw(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        if xv.h != 1 || xv.w != 1 {
            return Err(Error::ShapeMismatch(format!(
                "broadcast source must be (n,c,1,1), found {:?}",
                xv.shape()
            )));
        }
        let mut v = Tensor::zeros(xv.n, xv.c, h, w);
        for nc in 0..xv.n * xv.c {
            let f = xv.data[nc];
            for i in 0..h * w {
                v.data[nc * h * w + i] = f;
            }
        }
        Ok(self.push(Op::BroadcastHw, vec![x], v))
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let mut v = self.nodes[x].value.clone();
        for o in v.data.iter_mut() {
            *o *= sigmoid_f(*o);
        }
        self.push(Op::Silu, vec![x], v)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let mut v = self.nodes[x].value.clone();
        for o in v.data.iter_mut() {
            *o = sigmoid_f(*o);
        }
        self.push(Op::Sigmoid, vec![x], v)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let mut v = self.nodes[x].value.clone();
        for o in v.data.iter_mut() {
            *o = o.abs();
        }
        self.push(Op::Abs, vec![x], v)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let mut v = self.nodes[x].value.clone();
        for o in v.data.iter_mut() {
            *o *= *o;
        }
        self.push(Op::Square, vec![x], v)
    }

    /// Numerically stable softmax along the innermost (w) axis.
    pub fn softmax_w(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let mut v = xv.clone();
        let rows = xv.n * xv.c * xv.h;
        for r in 0..rows {
            let row = &mut v.data[r * xv.w..(r + 1) * xv.w];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for o in row.iter_mut() {
                *o = (*o - m).exp();
                sum += *o;
            }
            for o in row.iter_mut() {
                *o /= sum;
            }
        }
        self.push(Op::SoftmaxW, vec![x], v)
    }

    /// Batched matrix product: a [n,c,r,k] x b [n,c,k,m] -> [n,c,r,m].
    /// With `transpose_b`, b is [n,c,m,k] and used transposed.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        let (bk, bm) = if transpose_b { (bv.w, bv.h) } else { (bv.h, bv.w) };
        if av.n != bv.n || av.c != bv.c || av.w != bk {
            return Err(Error::ShapeMismatch(format!(
                "matmul: {:?} x {:?} (transpose_b={})",
                av.shape(),
                bv.shape(),
                transpose_b
            )));
        }
        let (r, k, m) = (av.h, av.w, bm);
        let mut v = Tensor::zeros(av.n, av.c, r, m);
        for nc in 0..av.n * av.c {
            let abase = nc * r * k;
            let bbase = nc * bv.h * bv.w;
            let obase = nc * r * m;
            for i in 0..r {
                for j in 0..m {
                    let mut acc = 0.0;
                    for p in 0..k {
                        let bvx = if transpose_b {
                            bv.data[bbase + j * k + p]
                        } else {
                            bv.data[bbase + p * m + j]
                        };
                        acc += av.data[abase + i * k + p] * bvx;
                    }
                    v.data[obase + i * m + j] = acc;
                }
            }
        }
        Ok(self.push(Op::MatMul { transpose_b }, vec![a, b], v))
    }

    /// Metadata-only reshape; element count must be preserved.
    pub fn reshape(&mut self, x: NodeId, n: usize, c: usize, h: usize, w: usize) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        if xv.len() != n * c * h * w {
            return Err(Error::ShapeMismatch(format!(
                "reshape: {} elements into {}x{}x{}x{}",
                xv.len(),
                n,
                c,
                h,
                w
            )));
        }
        let v = Tensor { n, c, h, w, data: xv.data.clone() };
        Ok(self.push(Op::Reshape, vec![x], v))
    }

    /// 2-D convolution, stride 1. Weight layout [c_out, c_in/groups, kh, kw]
    /// (as tensor n=c_out, c=c_in/groups, h=kh, w=kw). Output spatial size is
    /// `in + 2*pad - dilation*(k-1)`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        groups: usize,
        dilation: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        let wv = &self.nodes[weight].value;
        let (c_out, c_in_g, kh, kw) = wv.shape();
        if groups == 0 || xv.c % groups != 0 || c_out % groups != 0 || xv.c / groups != c_in_g {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: input channels {} groups {} weight {:?}",
                xv.c,
                groups,
                wv.shape()
            )));
        }
        let oh = (xv.h + 2 * pad).checked_sub(dilation * (kh - 1)).unwrap_or(0);
        let ow = (xv.w + 2 * pad).checked_sub(dilation * (kw - 1)).unwrap_or(0);
        if oh == 0 || ow == 0 {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: kernel {}x{} dilation {} does not fit {}x{} input (pad {})",
                kh, kw, dilation, xv.h, xv.w, pad
            )));
        }
        let v = conv2d_forward(xv, wv, groups, dilation, pad, oh, ow);
        Ok(self.push(Op::Conv2d { groups, dilation, pad }, vec![x, weight], v))
    }

    /// Batch normalization over (n,h,w) per channel. In training mode the
    /// batch statistics are used (and returned for running-average updates);
    /// in eval mode the provided running statistics are used.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f64],
        running_var: &[f64],
        training: bool,
        eps: f64,
    ) -> Result<(NodeId, Option<(Vec<f64>, Vec<f64>)>)> {
        let xv = &self.nodes[x].value;
        let c = xv.c;
        let gv = &self.nodes[gamma].value;
        let bv = &self.nodes[beta].value;
        if gv.shape() != (1, c, 1, 1) || bv.shape() != (1, c, 1, 1) {
            return Err(Error::ShapeMismatch(format!(
                "batch norm scale/offset for {} channels: {:?}, {:?}",
                c,
                gv.shape(),
                bv.shape()
            )));
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::ShapeMismatch(format!(
                "batch norm running stats: expected {} channels, found {}/{}",
                c,
                running_mean.len(),
                running_var.len()
            )));
        }
        let m = (xv.n * xv.h * xv.w) as f64;
        let hw = xv.h * xv.w;
        let (mut mean, mut var) = (vec![0.0; c], vec![0.0; c]);
        if training {
            for ch in 0..c {
                let mut acc = 0.0;
                for n in 0..xv.n {
                    let base = (n * c + ch) * hw;
                    for i in 0..hw {
                        acc += xv.data[base + i];
                    }
                }
                mean[ch] = acc / m;
                let mut vv = 0.0;
                for n in 0..xv.n {
                    let base = (n * c + ch) * hw;
                    for i in 0..hw {
                        let d = xv.data[base + i] - mean[ch];
                        vv += d * d;
                    }
                }
                var[ch] = vv / m;
            }
        } else {
            mean.copy_from_slice(running_mean);
            var.copy_from_slice(running_var);
        }
        let invstd: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = xv.clone();
        for n in 0..xv.n {
            for ch in 0..c {
                let base = (n * c + ch) * hw;
                for i in 0..hw {
                    let xh = (xv.data[base + i] - mean[ch]) * invstd[ch];
                    xhat[base + i] = xh;
                    out.data[base + i] = gv.data[ch] * xh + bv.data[ch];
                }
            }
        }
        let stats = if training { Some((mean, var)) } else { None };
        let id = self.push(Op::BatchNorm { training, invstd, xhat }, vec![x, gamma, beta], out);
        Ok((id, stats))
    }

    /// Group normalization over (c/groups, h, w) per (n, group).
    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: f64,
    ) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        let c = xv.c;
        if groups == 0 || c % groups != 0 {
            return Err(Error::ShapeMismatch(format!(
                "group norm: {} channels not divisible by {} groups",
                c, groups
            )));
        }
        let gv = &self.nodes[gamma].value;
        let bv = &self.nodes[beta].value;
        if gv.shape() != (1, c, 1, 1) || bv.shape() != (1, c, 1, 1) {
            return Err(Error::ShapeMismatch(format!(
                "group norm scale/offset for {} channels: {:?}, {:?}",
                c,
                gv.shape(),
                bv.shape()
            )));
        }
        let cpg = c / groups;
        let hw = xv.h * xv.w;
        let m = (cpg * hw) as f64;
        let mut invstd = vec![0.0; xv.n * groups];
        let mut xhat = vec![0.0; xv.len()];
        let mut out = xv.clone();
        for n in 0..xv.n {
            for g in 0..groups {
                let mut acc = 0.0;
                for cc in 0..cpg {
                    let base = (n * c + g * cpg + cc) * hw;
                    for i in 0..hw {
                        acc += xv.data[base + i];
                    }
                }
                let mean = acc / m;
                let mut vv = 0.0;
                for cc in 0..cpg {
                    let base = (n * c + g * cpg + cc) * hw;
                    for i in 0..hw {
                        let d = xv.data[base + i] - mean;
                        vv += d * d;
                    }
                }
                let is = 1.0 / (vv / m + eps).sqrt();
                invstd[n * groups + g] = is;
                for cc in 0..cpg {
                    let ch = g * cpg + cc;
                    let base = (n * c + ch) * hw;
                    for i in 0..hw {
                        let xh = (xv.data[base + i] - mean) * is;
                        xhat[base + i] = xh;
                        out.data[base + i] = gv.data[ch] * xh + bv.data[ch];
                    }
                }
            }
        }
        Ok(self.push(Op::GroupNorm { groups, invstd, xhat }, vec![x, gamma, beta], out))
    }

    /// Max pooling with a k x k kernel and stride k; spatial dims must be
    /// divisible by k.
    pub fn max_pool(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        if k == 0 || xv.h % k != 0 || xv.w % k != 0 {
            return Err(Error::ShapeMismatch(format!(
                "max pool {}x{} on {}x{}",
                k, k, xv.h, xv.w
            )));
        }
        let (oh, ow) = (xv.h / k, xv.w / k);
        let mut v = Tensor::zeros(xv.n, xv.c, oh, ow);
        let mut argmax = vec![0usize; v.len()];
        for nc in 0..xv.n * xv.c {
            let ibase = nc * xv.h * xv.w;
            let obase = nc * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut bi = 0;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = ibase + (oy * k + dy) * xv.w + ox * k + dx;
                            if xv.data[i] > best {
                                best = xv.data[i];
                                bi = i;
                            }
                        }
                    }
                    v.data[obase + oy * ow + ox] = best;
                    argmax[obase + oy * ow + ox] = bi;
                }
            }
        }
        Ok(self.push(Op::MaxPool { argmax }, vec![x], v))
    }

    /// Nearest-neighbor x2 upsampling.
    pub fn upsample_nearest2(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let (oh, ow) = (xv.h * 2, xv.w * 2);
        let mut v = Tensor::zeros(xv.n, xv.c, oh, ow);
        for nc in 0..xv.n * xv.c {
            let ibase = nc * xv.h * xv.w;
            let obase = nc * oh * ow;
            for y in 0..oh {
                for x2 in 0..ow {
                    v.data[obase + y * ow + x2] = xv.data[ibase + (y / 2) * xv.w + x2 / 2];
                }
            }
        }
        self.push(Op::UpNearest2, vec![x], v)
    }

    /// Bilinear x2 upsampling with half-pixel alignment.
    pub fn upsample_bilinear2(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let (oh, ow) = (xv.h * 2, xv.w * 2);
        let ytaps = bilinear_taps(xv.h, oh);
        let xtaps = bilinear_taps(xv.w, ow);
        let mut v = Tensor::zeros(xv.n, xv.c, oh, ow);
        for nc in 0..xv.n * xv.c {
            let ibase = nc * xv.h * xv.w;
            let obase = nc * oh * ow;
            for y in 0..oh {
                let (y0, y1, fy) = ytaps[y];
                for x2 in 0..ow {
                    let (x0, x1, fx) = xtaps[x2];
                    let v00 = xv.data[ibase + y0 * xv.w + x0];
                    let v01 = xv.data[ibase + y0 * xv.w + x1];
                    let v10 = xv.data[ibase + y1 * xv.w + x0];
                    let v11 = xv.data[ibase + y1 * xv.w + x1];
                    v.data[obase + y * ow + x2] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                        + fy * ((1.0 - fx) * v10 + fx * v11);
                }
            }
        }
        self.push(Op::UpBilinear2, vec![x], v)
    }

    /// Channel concatenation of two tensors with equal (n,h,w).
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        if av.n != bv.n || av.h != bv.h || av.w != bv.w {
            return Err(Error::ShapeMismatch(format!(
                "concat: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut v = Tensor::zeros(av.n, av.c + bv.c, av.h, av.w);
        let hw = av.h * av.w;
        for n in 0..av.n {
            let dst = n * v.c * hw;
            v.data[dst..dst + av.c * hw]
                .copy_from_slice(&av.data[n * av.c * hw..(n + 1) * av.c * hw]);
            v.data[dst + av.c * hw..dst + v.c * hw]
                .copy_from_slice(&bv.data[n * bv.c * hw..(n + 1) * bv.c * hw]);
        }
        Ok(self.push(Op::Concat, vec![a, b], v))
    }

    pub fn concat_all(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        let mut it = ids.iter();
        let mut acc = *it
            .next()
            .ok_or_else(|| Error::InvalidInput("concat of zero tensors".into()))?;
        for &next in it {
            acc = self.concat(acc, next)?;
        }
        Ok(acc)
    }

    /// Channel slice [start, start+len).
    pub fn slice_c(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        if start + len > xv.c || len == 0 {
            return Err(Error::ShapeMismatch(format!(
                "slice channels {}..{} of {}",
                start,
                start + len,
                xv.c
            )));
        }
        let hw = xv.h * xv.w;
        let mut v = Tensor::zeros(xv.n, len, xv.h, xv.w);
        for n in 0..xv.n {
            let src = (n * xv.c + start) * hw;
            let dst = n * len * hw;
            v.data[dst..dst + len * hw].copy_from_slice(&xv.data[src..src + len * hw]);
        }
        Ok(self.push(Op::SliceC { start }, vec![x], v))
    }

    /// Backward warping of `img` [n,c,h,w] by `field` [n,2,h,w] with the
    /// same convention as `motion::warp_bilinear`: out(y,x) = img(y - uy,
    /// x - ux), border-clamped. Channel 0 of the field is ux, channel 1 uy.
    /// Differentiable with respect to both the image and the field.
    pub fn warp_bilinear(&mut self, img: NodeId, field: NodeId) -> Result<NodeId> {
        let iv = &self.nodes[img].value;
        let fv = &self.nodes[field].value;
        if fv.n != iv.n || fv.c != 2 || fv.h != iv.h || fv.w != iv.w {
            return Err(Error::ShapeMismatch(format!(
                "warp field: expected ({},2,{},{}), found {:?}",
                iv.n,
                iv.h,
                iv.w,
                fv.shape()
            )));
        }
        let (h, w) = (iv.h, iv.w);
        let mut v = Tensor::zeros(iv.n, iv.c, h, w);
        for n in 0..iv.n {
            let fux = (n * 2) * h * w;
            let fuy = (n * 2 + 1) * h * w;
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    let t = warp_taps(
                        y as f64 - fv.data[fuy + p],
                        x as f64 - fv.data[fux + p],
                        h,
                        w,
                    );
                    for c in 0..iv.c {
                        let base = (n * iv.c + c) * h * w;
                        v.data[base + p] = t.interp(&iv.data[base..base + h * w]);
                    }
                }
            }
        }
        Ok(self.push(Op::WarpBilinear, vec![img, field], v))
    }

    /// Magnitude of interleaved complex channel pairs: [n,2m,h,w] ->
    /// [n,m,h,w] with m_i = sqrt(re^2 + im^2 + eps^2).
    pub fn complex_magnitude(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        if xv.c % 2 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "complex magnitude needs channel pairs, found {} channels",
                xv.c
            )));
        }
        let m = xv.c / 2;
        let hw = xv.h * xv.w;
        let mut v = Tensor::zeros(xv.n, m, xv.h, xv.w);
        for n in 0..xv.n {
            for cc in 0..m {
                let re = (n * xv.c + 2 * cc) * hw;
                let im = re + hw;
                let out = (n * m + cc) * hw;
                for i in 0..hw {
                    let (a, b) = (xv.data[re + i], xv.data[im + i]);
                    v.data[out + i] = (a * a + b * b + eps * eps).sqrt();
                }
            }
        }
        Ok(self.push(Op::ComplexMag { eps }, vec![x], v))
    }

    /// Guarded magnitude of the centered unitary FFT of interleaved complex
    /// channel pairs: [n,2m,h,w] -> [n,m,h,w]. The backward pass applies the
    /// adjoint (inverse) FFT to the spectral gradient.
    pub fn fft2c_magnitude(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        if xv.c % 2 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "fft magnitude needs channel pairs, found {} channels",
                xv.c
            )));
        }
        let m = xv.c / 2;
        let hw = xv.h * xv.w;
        let mut v = Tensor::zeros(xv.n, m, xv.h, xv.w);
        let mut spectra = Vec::with_capacity(xv.n * m);
        let mut mags = vec![0.0; v.len()];
        for n in 0..xv.n {
            for cc in 0..m {
                let re = (n * xv.c + 2 * cc) * hw;
                let im = re + hw;
                let img = ComplexGrid::from_fn(xv.h, xv.w, |y, xq| {
                    Complex64::new(xv.data[re + y * xv.w + xq], xv.data[im + y * xv.w + xq])
                });
                let spec = fft2_centered(&img)?;
                let out = (n * m + cc) * hw;
                for i in 0..hw {
                    let z = spec.data[i];
                    let mag = (z.norm_sqr() + eps * eps).sqrt();
                    v.data[out + i] = mag;
                    mags[out + i] = mag;
                }
                spectra.push(spec);
            }
        }
        Ok(self.push(Op::Fft2cMag { spectra, mags }, vec![x], v))
    }

    /// Forward difference along h: out[y] = x[y+1] - x[y]; height shrinks by
    /// one.
    pub fn diff_h(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        if xv.h < 2 {
            return Err(Error::ShapeMismatch("diff_h needs height >= 2".into()));
        }
        let mut v = Tensor::zeros(xv.n, xv.c, xv.h - 1, xv.w);
        for nc in 0..xv.n * xv.c {
            let ib = nc * xv.h * xv.w;
            let ob = nc * (xv.h - 1) * xv.w;
            for y in 0..xv.h - 1 {
                for xq in 0..xv.w {
                    v.data[ob + y * xv.w + xq] =
                        xv.data[ib + (y + 1) * xv.w + xq] - xv.data[ib + y * xv.w + xq];
                }
            }
        }
        Ok(self.push(Op::DiffH, vec![x], v))
    }

    /// Forward difference along w: out[x] = x[x+1] - x[x]; width shrinks by
    /// one.
    pub fn diff_w(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        if xv.w < 2 {
            return Err(Error::ShapeMismatch("diff_w needs width >= 2".into()));
        }
        let mut v = Tensor::zeros(xv.n, xv.c, xv.h, xv.w - 1);
        for nc in 0..xv.n * xv.c {
            let ib = nc * xv.h * xv.w;
            let ob = nc * xv.h * (xv.w - 1);
            for y in 0..xv.h {
                for xq in 0..xv.w - 1 {
                    v.data[ob + y * (xv.w - 1) + xq] =
                        xv.data[ib + y * xv.w + xq + 1] - xv.data[ib + y * xv.w + xq];
                }
            }
        }
        Ok(self.push(Op::DiffW, vec![x], v))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x].value.data.iter().sum();
        self.push(Op::SumAll, vec![x], Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let len = self.nodes[x].value.len() as f64;
        let s: f64 = self.nodes[x].value.data.iter().sum();
        self.push(Op::MeanAll, vec![x], Tensor::scalar(s / len))
    }

    /// Reverse-mode sweep from a scalar loss node. Returns one gradient slot
    /// per node; only nodes on a path to a grad-requiring leaf are filled.
    pub fn backward(&self, loss: NodeId) -> Result<Vec<Option<Tensor>>> {
        let lv = &self.nodes[loss].value;
        if lv.len() != 1 {
            return Err(Error::InvalidInput(format!(
                "backward needs a scalar loss, found shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(1.0));
        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(grads)
    }

    fn backward_node(
        &self,
        id: NodeId,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        let needs = |i: usize| self.nodes[ins[i]].needs_grad;
        let add = |grads: &mut [Option<Tensor>], input: NodeId, delta: Tensor| {
            match &mut grads[input] {
                Some(acc) => {
                    for (a, d) in acc.data.iter_mut().zip(&delta.data) {
                        *a += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                if needs(0) {
                    add(grads, ins[0], g.clone());
                }
                if needs(1) {
                    add(grads, ins[1], g.clone());
                }
            }
            Op::Sub => {
                if needs(0) {
                    add(grads, ins[0], g.clone());
                }
                if needs(1) {
                    let mut d = g.clone();
                    for v in d.data.iter_mut() {
                        *v = -*v;
                    }
                    add(grads, ins[1], d);
                }
            }
            Op::Mul => {
                if needs(0) {
                    let bv = &self.nodes[ins[1]].value;
                    let mut d = g.clone();
                    for (o, x) in d.data.iter_mut().zip(&bv.data) {
                        *o *= x;
                    }
                    add(grads, ins[0], d);
                }
                if needs(1) {
                    let av = &self.nodes[ins[0]].value;
                    let mut d = g.clone();
                    for (o, x) in d.data.iter_mut().zip(&av.data) {
                        *o *= x;
                    }
                    add(grads, ins[1], d);
                }
            }
            Op::Scale(s) => {
                if needs(0) {
                    let mut d = g.clone();
                    for v in d.data.iter_mut() {
                        *v *= s;
                    }
                    add(grads, ins[0], d);
                }
            }
            Op::AddBias => {
                if needs(0) {
                    add(grads, ins[0], g.clone());
                }
                if needs(1) {
                    let c = self.nodes[ins[1]].value.c;
                    let hw = g.h * g.w;
                    let mut d = Tensor::zeros(1, c, 1, 1);
                    for n in 0..g.n {
                        for ch in 0..c {
                            let base = (n * c + ch) * hw;
                            d.data[ch] += g.data[base..base + hw].iter().sum::<f64>();
                        }
                    }
                    add(grads, ins[1], d);
                }
            }
            Op::MulChannel => {
                let xv = &self.nodes[ins[0]].value;
                let sv = &self.nodes[ins[1]].value;
                let hw = xv.h * xv.w;
                if needs(0) {
                    let mut d = g.clone();
                    for n in 0..xv.n {
                        for ch in 0..xv.c {
                            let f = sv.data[n * xv.c + ch];
                            let base = (n * xv.c + ch) * hw;
                            for i in 0..hw {
                                d.data[base + i] *= f;
                            }
                        }
                    }
                    add(grads, ins[0], d);
                }
                if needs(1) {
                    let mut d = Tensor::zeros(xv.n, xv.c, 1, 1);
                    for n in 0..xv.n {
                        for ch in 0..xv.c {
                            let base = (n * xv.c + ch) * hw;
                            let mut acc = 0.0;
                            for i in 0..hw {
                                acc += g.data[base + i] * xv.data[base + i];
                            }
                            d.data[n * xv.c + ch] = acc;
                        }
                    }
                    add(grads, ins[1], d);
                }
            }
            Op::BroadcastHw => {
                if needs(0) {
                    let xv = &self.nodes[ins[0]].value;
                    let hw = g.h * g.w;
                    let mut d = Tensor::zeros(xv.n, xv.c, 1, 1);
                    for nc in 0..xv.n * xv.c {
                        d.data[nc] = g.data[nc * hw..(nc + 1) * hw].iter().sum();
                    }
                    add(grads, ins[0], d);
                }
            }
            Op::Silu => {
                if needs(0) {
                    let xv = &self.nodes[ins[0]].value;
                    let mut d = g.clone();
                    for (o, x) in d.data.iter_mut().zip(&xv.data) {
                        let s = sigmoid_f(*x);
                        *o *= s * (1.0 + x * (1.0 - s));
                    }
                    add(grads, ins[0], d);
                }
            }
            Op::Sigmoid => {
                if needs(0) {
                    let yv = &node.value;
                    let mut d = g.clone();
                    for (o, y) in d.data.iter_mut().zip(&yv.data) {
                        *o *= y * (1.0 - y);
                    }
                    add(grads, ins[0], d);
                }
            }
            Op::Abs => {
                if needs(0) {
                    let xv = &self.nodes[ins[0]].value;
                    let mut d = g.clone();
                    for (o, x) in d.data.iter_mut().zip(&xv.data) {
                        *o *= if *x > 0.0 {
                            1.0
                        } else if *x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                    add(grads, ins[0], d);
                }
            }
            Op::Square => {
                if needs(0) {
                    let xv = &self.nodes[ins[0]].value;
                    let mut d = g.clone();
                    for (o, x) in d.data.iter_mut().zip(&xv.data) {
                        *o *= 2.0 * x;
                    }
                    add(grads, ins[0], d);
                }
            }
            Op::SoftmaxW => {
                if needs(0) {
                    let yv = &node.value;
                    let mut d = g.clone();
                    let rows = yv.n * yv.c * yv.h;
                    for r in 0..rows {
                        let y = &yv.data[r * yv.w..(r + 1) * yv.w];
                        let gr = &mut d.data[r * yv.w..(r + 1) * yv.w];
                        let dot: f64 = y.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                        for (o, yy) in gr.iter_mut().zip(y) {
                            *o = yy * (*o - dot);
                        }
                    }
                    add(grads, ins[0], d);
                }
            }
            Op::MatMul { transpose_b } => {
                let av = &self.nodes[ins[0]].value;
                let bv = &self.nodes[ins[1]].value;
                let (r, k) = (av.h, av.w);
                let m = node.value.w;
                for nc_needed in 0..2 {
                    if !needs(nc_needed) {
                        continue;
                    }
                    if nc_needed == 0 {
                        // dA = dC * B^T (or dC * B when b was transposed).
                        let mut d = Tensor::zeros(av.n, av.c, r, k);
                        for nc in 0..av.n * av.c {
                            let gb = nc * r * m;
                            let bb = nc * bv.h * bv.w;
                            let db = nc * r * k;
                            for i in 0..r {
                                for p in 0..k {
                                    let mut acc = 0.0;
                                    for j in 0..m {
                                        let bvx = if *transpose_b {
                                            bv.data[bb + j * k + p]
                                        } else {
                                            bv.data[bb + p * m + j]
                                        };
                                        acc += g.data[gb + i * m + j] * bvx;
                                    }
                                    d.data[db + i * k + p] = acc;
                                }
                            }
                        }
                        add(grads, ins[0], d);
                    } else {
                        // dB = A^T * dC (or dC^T * A when b was transposed).
                        let mut d = Tensor::zeros(bv.n, bv.c, bv.h, bv.w);
                        for nc in 0..bv.n * bv.c {
                            let gb = nc * r * m;
                            let ab = nc * r * k;
                            let db = nc * bv.h * bv.w;
                            for p in 0..k {
                                for j in 0..m {
                                    let mut acc = 0.0;
                                    for i in 0..r {
                                        acc += av.data[ab + i * k + p] * g.data[gb + i * m + j];
                                    }
                                    if *transpose_b {
                                        d.data[db + j * k + p] = acc;
                                    } else {
                                        d.data[db + p * m + j] = acc;
                                    }
                                }
                            }
                        }
                        add(grads, ins[1], d);
                    }
                }
            }
            Op::Reshape => {
                if needs(0) {
                    let xv = &self.nodes[ins[0]].value;
                    let d = Tensor {
                        n: xv.n,
                        c: xv.c,
                        h: xv.h,
                        w: xv.w,
                        data: g.data.clone(),
                    };
                    add(grads, ins[0], d);
                }
            }
            Op::Conv2d { groups, dilation, pad } => {
                let xv = &self.nodes[ins[0]].value;
                let wv = &self.nodes[ins[1]].value;
                if needs(0) {
                    add(grads, ins[0], conv2d_backward_input(g, wv, xv, *groups, *dilation, *pad));
                }
                if needs(1) {
                    add(grads, ins[1], conv2d_backward_weight(g, xv, wv, *groups, *dilation, *pad));
                }
            }
            Op::BatchNorm { training, invstd, xhat } => {
                let training = *training;
                let xv = &self.nodes[ins[0]].value;
                let gv = &self.nodes[ins[1]].value;
                let c = xv.c;
                let hw = xv.h * xv.w;
                let m = (xv.n * hw) as f64;
                // Per-channel reductions shared by all branches.
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for n in 0..xv.n {
                    for ch in 0..c {
                        let base = (n * c + ch) * hw;
                        for i in 0..hw {
                            sum_g[ch] += g.data[base + i];
                            sum_gx[ch] += g.data[base + i] * xhat[base + i];
                        }
                    }
                }
                if needs(0) {
                    let mut d = Tensor::zeros(xv.n, c, xv.h, xv.w);
                    for n in 0..xv.n {
                        for ch in 0..c {
                            let base = (n * c + ch) * hw;
                            let gam = gv.data[ch];
                            let is = invstd[ch];
                            for i in 0..hw {
                                d.data[base + i] = if training {
                                    gam * is / m
                                        * (m * g.data[base + i]
                                            - sum_g[ch]
                                            - xhat[base + i] * sum_gx[ch])
                                } else {
                                    gam * is * g.data[base + i]
                                };
                            }
                        }
                    }
                    add(grads, ins[0], d);
                }
                if needs(1) {
                    add(grads, ins[1], Tensor::from_vec(1, c, 1, 1, sum_gx.clone())?);
                }
                if needs(2) {
                    add(grads, ins[2], Tensor::from_vec(1, c, 1, 1, sum_g.clone())?);
                }
            }
            Op::GroupNorm { groups, invstd, xhat } => {
                let xv = &self.nodes[ins[0]].value;
                let gv = &self.nodes[ins[1]].value;
                let c = xv.c;
                let cpg = c / groups;
                let hw = xv.h * xv.w;
                let m = (cpg * hw) as f64;
                if needs(0) {
                    let mut d = Tensor::zeros(xv.n, c, xv.h, xv.w);
                    for n in 0..xv.n {
                        for gr in 0..*groups {
                            // dxhat = g * gamma, then the standard whitening
                            // backward within the (n, group) block.
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for cc in 0..cpg {
                                let ch = gr * cpg + cc;
                                let base = (n * c + ch) * hw;
                                for i in 0..hw {
                                    let dxh = g.data[base + i] * gv.data[ch];
                                    s1 += dxh;
                                    s2 += dxh * xhat[base + i];
                                }
                            }
                            let is = invstd[n * groups + gr];
                            for cc in 0..cpg {
                                let ch = gr * cpg + cc;
                                let base = (n * c + ch) * hw;
                                for i in 0..hw {
                                    let dxh = g.data[base + i] * gv.data[ch];
                                    d.data[base + i] =
                                        is / m * (m * dxh - s1 - xhat[base + i] * s2);
                                }
                            }
                        }
                    }
                    add(grads, ins[0], d);
                }
                if needs(1) || needs(2) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for n in 0..xv.n {
                        for ch in 0..c {
                            let base = (n * c + ch) * hw;
                            for i in 0..hw {
                                dg[ch] += g.data[base + i] * xhat[base + i];
                                db[ch] += g.data[base + i];
                            }
                        }
                    }
                    if needs(1) {
                        add(grads, ins[1], Tensor::from_vec(1, c, 1, 1, dg)?);
                    }
                    if needs(2) {
                        add(grads, ins[2], Tensor::from_vec(1, c, 1, 1, db)?);
                    }
                }
            }
            Op::MaxPool { argmax, .. } => {
                if needs(0) {
                    let xv = &self.nodes[ins[0]].value;
                    let mut d = Tensor::zeros(xv.n, xv.c, xv.h, xv.w);
                    for (o, &src) in argmax.iter().enumerate() {
                        d.data[src] += g.data[o];
                    }
                    add(grads, ins[0], d);
                }
            }
            Op::UpNearest2 => {
                if needs(0) {
                    let xv = &self.nodes[ins[0]].value;
                    let mut d = Tensor::zeros(xv.n, xv.c, xv.h, xv.w);
                    let (oh, ow) = (g.h, g.w);
                    for nc in 0..xv.n * xv.c {
                        let gb = nc * oh * ow;
                        let db = nc * xv.h * xv.w;
                        for y in 0..oh {
                            for x2 in 0..ow {
                                d.data[db + (y / 2) * xv.w + x2 / 2] += g.data[gb + y * ow + x2];
                            }
                        }
                    }
                    add(grads, ins[0], d);
                }
            }
            Op::UpBilinear2 => {
                if needs(0) {
                    let xv = &self.nodes[ins[0]].value;
                    let ytaps = bilinear_taps(xv.h, g.h);
                    let xtaps = bilinear_taps(xv.w, g.w);
                    let mut d = Tensor::zeros(xv.n, xv.c, xv.h, xv.w);
                    for nc in 0..xv.n * xv.c {
                        let gb = nc * g.h * g.w;
                        let db = nc * xv.h * xv.w;
                        for y in 0..g.h {
                            let (y0, y1, fy) = ytaps[y];
                            for x2 in 0..g.w {
                                let (x0, x1, fx) = xtaps[x2];
                                let gg = g.data[gb + y * g.w + x2];
                                d.data[db + y0 * xv.w + x0] += (1.0 - fy) * (1.0 - fx) * gg;
                                d.data[db + y0 * xv.w + x1] += (1.0 - fy) * fx * gg;
                                d.data[db + y1 * xv.w + x0] += fy * (1.0 - fx) * gg;
                                d.data[db + y1 * xv.w + x1] += fy * fx * gg;
                            }
                        }
                    }
                    add(grads, ins[0], d);
                }
            }
            Op::Concat => {
                let av = &self.nodes[ins[0]].value;
                let bv = &self.nodes[ins[1]].value;
                let hw = av.h * av.w;
                if needs(0) {
                    let mut d = Tensor::zeros(av.n, av.c, av.h, av.w);
                    for n in 0..av.n {
                        let src = n * (av.c + bv.c) * hw;
                        d.data[n * av.c * hw..(n + 1) * av.c * hw]
                            .copy_from_slice(&g.data[src..src + av.c * hw]);
                    }
                    add(grads, ins[0], d);
                }
                if needs(1) {
                    let mut d = Tensor::zeros(bv.n, bv.c, bv.h, bv.w);
                    for n in 0..bv.n {
                        let src = n * (av.c + bv.c) * hw + av.c * hw;
                        d.data[n * bv.c * hw..(n + 1) * bv.c * hw]
                            .copy_from_slice(&g.data[src..src + bv.c * hw]);
                    }
                    add(grads, ins[1], d);
                }
            }
            Op::SliceC { start } => {
                if needs(0) {
                    let xv = &self.nodes[ins[0]].value;
                    let hw = xv.h * xv.w;
                    let mut d = Tensor::zeros(xv.n, xv.c, xv.h, xv.w);
                    for n in 0..xv.n {
                        let dst = (n * xv.c + start) * hw;
                        let src = n * g.c * hw;
                        d.data[dst..dst + g.c * hw].copy_from_slice(&g.data[src..src + g.c * hw]);
                    }
                    add(grads, ins[0], d);
                }
            }
            Op::WarpBilinear => {
                let iv = &self.nodes[ins[0]].value;
                let fv = &self.nodes[ins[1]].value;
                let (h, w) = (iv.h, iv.w);
                let mut dimg = Tensor::zeros(iv.n, iv.c, h, w);
                let mut dfield = Tensor::zeros(fv.n, 2, h, w);
                for n in 0..iv.n {
                    let fux = (n * 2) * h * w;
                    let fuy = (n * 2 + 1) * h * w;
                    for y in 0..h {
                        for x in 0..w {
                            let p = y * w + x;
                            let t = warp_taps(
                                y as f64 - fv.data[fuy + p],
                                x as f64 - fv.data[fux + p],
                                h,
                                w,
                            );
                            let mut acc_dx = 0.0;
                            let mut acc_dy = 0.0;
                            for c in 0..iv.c {
                                let base = (n * iv.c + c) * h * w;
                                let gg = g.data[base + p];
                                if gg == 0.0 {
                                    continue;
                                }
                                let src = &iv.data[base..base + h * w];
                                // Gradient into the image: scatter bilinear
                                // weights.
                                dimg.data[base + t.i00] += gg * (1.0 - t.fy) * (1.0 - t.fx);
                                dimg.data[base + t.i01] += gg * (1.0 - t.fy) * t.fx;
                                dimg.data[base + t.i10] += gg * t.fy * (1.0 - t.fx);
                                dimg.data[base + t.i11] += gg * t.fy * t.fx;
                                // Gradient into the sample coordinates.
                                let dsx = (1.0 - t.fy) * (src[t.i01] - src[t.i00])
                                    + t.fy * (src[t.i11] - src[t.i10]);
                                let dsy = (1.0 - t.fx) * (src[t.i10] - src[t.i00])
                                    + t.fx * (src[t.i11] - src[t.i01]);
                                acc_dx += gg * dsx;
                                acc_dy += gg * dsy;
                            }
                            // sample = coord - u, so du = -dsample.
                            dfield.data[fux + p] = -acc_dx;
                            dfield.data[fuy + p] = -acc_dy;
                        }
                    }
                }
                if needs(0) {
                    add(grads, ins[0], dimg);
                }
                if needs(1) {
                    add(grads, ins[1], dfield);
                }
            }
            Op::ComplexMag { eps } => {
                if needs(0) {
                    let xv = &self.nodes[ins[0]].value;
                    let m = xv.c / 2;
                    let hw = xv.h * xv.w;
                    let mut d = Tensor::zeros(xv.n, xv.c, xv.h, xv.w);
                    for n in 0..xv.n {
                        for cc in 0..m {
                            let re = (n * xv.c + 2 * cc) * hw;
                            let im = re + hw;
                            let out = (n * m + cc) * hw;
                            for i in 0..hw {
                                let (a, b) = (xv.data[re + i], xv.data[im + i]);
                                let mag = (a * a + b * b + eps * eps).sqrt();
                                if mag > 0.0 {
                                    let gg = g.data[out + i] / mag;
                                    d.data[re + i] = gg * a;
                                    d.data[im + i] = gg * b;
                                }
                            }
                        }
                    }
                    add(grads, ins[0], d);
                }
            }
            Op::Fft2cMag { spectra, mags } => {
                if needs(0) {
                    let xv = &self.nodes[ins[0]].value;
                    let m = xv.c / 2;
                    let hw = xv.h * xv.w;
                    let mut d = Tensor::zeros(xv.n, xv.c, xv.h, xv.w);
                    for n in 0..xv.n {
                        for cc in 0..m {
                            let out = (n * m + cc) * hw;
                            let spec = &spectra[n * m + cc];
                            let gspec = ComplexGrid::from_fn(xv.h, xv.w, |y, xq| {
                                let i = y * xv.w + xq;
                                let mag = mags[out + i];
                                if mag > 0.0 {
                                    spec.data[i] * (g.data[out + i] / mag)
                                } else {
                                    Complex64::new(0.0, 0.0)
                                }
                            });
                            let gin = ifft2_centered(&gspec)?;
                            let re = (n * xv.c + 2 * cc) * hw;
                            let im = re + hw;
                            for i in 0..hw {
                                d.data[re + i] = gin.data[i].re;
                                d.data[im + i] = gin.data[i].im;
                            }
                        }
                    }
                    add(grads, ins[0], d);
                }
            }
            Op::DiffH => {
                if needs(0) {
                    let xv = &self.nodes[ins[0]].value;
                    let mut d = Tensor::zeros(xv.n, xv.c, xv.h, xv.w);
                    for nc in 0..xv.n * xv.c {
                        let gb = nc * (xv.h - 1) * xv.w;
                        let db = nc * xv.h * xv.w;
                        for y in 0..xv.h - 1 {
                            for xq in 0..xv.w {
                                let gg = g.data[gb + y * xv.w + xq];
                                d.data[db + (y + 1) * xv.w + xq] += gg;
                                d.data[db + y * xv.w + xq] -= gg;
                            }
                        }
                    }
                    add(grads, ins[0], d);
                }
            }
            Op::DiffW => {
                if needs(0) {
                    let xv = &self.nodes[ins[0]].value;
                    let mut d = Tensor::zeros(xv.n, xv.c, xv.h, xv.w);
                    for nc in 0..xv.n * xv.c {
                        let gb = nc * xv.h * (xv.w - 1);
                        let db = nc * xv.h * xv.w;
                        for y in 0..xv.h {
                            for xq in 0..xv.w - 1 {
                                let gg = g.data[gb + y * (xv.w - 1) + xq];
                                d.data[db + y * xv.w + xq + 1] += gg;
                                d.data[db + y * xv.w + xq] -= gg;
                            }
                        }
                    }
                    add(grads, ins[0], d);
                }
            }
            Op::SumAll => {
                if needs(0) {
                    let xv = &self.nodes[ins[0]].value;
                    let mut d = Tensor::zeros(xv.n, xv.c, xv.h, xv.w);
                    let gg = g.data[0];
                    for v in d.data.iter_mut() {
                        *v = gg;
                    }
                    add(grads, ins[0], d);
                }
            }
            Op::MeanAll => {
                if needs(0) {
                    let xv = &self.nodes[ins[0]].value;
                    let mut d = Tensor::zeros(xv.n, xv.c, xv.h, xv.w);
                    let gg = g.data[0] / xv.len() as f64;
                    for v in d.data.iter_mut() {
                        *v = gg;
                    }
                    add(grads, ins[0], d);
                }
            }
        }
        Ok(())
    }
}

/// Compares analytic reverse-mode gradients of a random scalar projection of
/// `f`'s output against central finite differences, for every element of
/// every input leaf, and returns the worst relative error. `f` receives the
/// inputs as leaves and must return the graph output node. Used by the
/// gradient test suites; `eps` around 1e-5 is appropriate in f64.
pub fn finite_difference_probe(
    inputs: &[Tensor],
    f: &dyn Fn(&mut Tape, &[NodeId]) -> NodeId,
    eps: f64,
) -> f64 {
    use rand::prelude::*;
    let mut wrng = rand_chacha::ChaCha20Rng::seed_from_u64(0x9e3779b97f4a7c15);
    let mut proj: Option<Tensor> = None;
    let mut eval = |tensors: &[Tensor], want_grads: bool| -> (f64, Option<Vec<Tensor>>) {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| tape.leaf(t.clone(), want_grads)).collect();
        let out = f(&mut tape, &ids);
        let ov = tape.value(out);
        let p = proj.get_or_insert_with(|| {
            let data = (0..ov.len()).map(|_| wrng.gen_range(-1.0..1.0)).collect();
            Tensor::from_vec(ov.n, ov.c, ov.h, ov.w, data).expect("projection shape")
        });
        let pid = tape.leaf(p.clone(), false);
        let prod = tape.mul(out, pid).expect("projection product");
        let loss = tape.sum_all(prod);
        let lv = tape.value(loss).item();
        if !want_grads {
            return (lv, None);
        }
        let grads = tape.backward(loss).expect("backward");
        let gs: Vec<Tensor> = ids
            .iter()
            .map(|&i| grads[i].clone().expect("missing input gradient"))
            .collect();
        (lv, Some(gs))
    };
    let (_, analytic) = eval(inputs, true);
    let analytic = analytic.expect("analytic gradients");
    let mut worst = 0.0f64;
    for (ti, t) in inputs.iter().enumerate() {
        for e in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[ti].data[e] += eps;
            let mut minus = inputs.to_vec();
            minus[ti].data[e] -= eps;
            let (lp, _) = eval(&plus, false);
            let (lm, _) = eval(&minus, false);
            let num = (lp - lm) / (2.0 * eps);
            let ana = analytic[ti].data[e];
            let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

#[inline]
fn sigmoid_f(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Half-pixel-aligned source taps (i0, i1, frac) for upsampling `src` to
/// `dst` samples along one axis.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

struct WarpTaps {
    i00: usize,
    i01: usize,
    i10: usize,
    i11: usize,
    fy: f64,
    fx: f64,
}

impl WarpTaps {
    #[inline]
    fn interp(&self, src: &[f64]) -> f64 {
        (1.0 - self.fy) * ((1.0 - self.fx) * src[self.i00] + self.fx * src[self.i01])
            + self.fy * ((1.0 - self.fx) * src[self.i10] + self.fx * src[self.i11])
    }
}

#[inline]
fn warp_taps(sy: f64, sx: f64, h: usize, w: usize) -> WarpTaps {
    let y0 = sy.floor();
    let x0 = sx.floor();
    let clamp = |v: f64, n: usize| -> usize {
        if v < 0.0 {
            0
        } else if v > (n - 1) as f64 {
            n - 1
        } else {
            v as usize
        }
    };
    let yc0 = clamp(y0, h);
    let yc1 = clamp(y0 + 1.0, h);
    let xc0 = clamp(x0, w);
    let xc1 = clamp(x0 + 1.0, w);
    WarpTaps {
        i00: yc0 * w + xc0,
        i01: yc0 * w + xc1,
        i10: yc1 * w + xc0,
        i11: yc1 * w + xc1,
        fy: sy - y0,
        fx: sx - x0,
    }
}

fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    groups: usize,
    dilation: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Tensor {
    let (c_out, c_in_g, kh, kw) = w.shape();
    let ocg = c_out / groups;
    let mut out = Tensor::zeros(x.n, c_out, oh, ow);
    for n in 0..x.n {
        for oc in 0..c_out {
            let g = oc / ocg;
            let obase = (n * c_out + oc) * oh * ow;
            for icg in 0..c_in_g {
                let ic = g * c_in_g + icg;
                let ibase = (n * x.c + ic) * x.h * x.w;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w.data[((oc * c_in_g + icg) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let dy = (ky * dilation) as isize - pad as isize;
                        let dx = (kx * dilation) as isize - pad as isize;
                        let y_lo = (-dy).max(0) as usize;
                        let y_hi = ((x.h as isize - dy).min(oh as isize)).max(0) as usize;
                        let x_lo = (-dx).max(0) as usize;
                        let x_hi = ((x.w as isize - dx).min(ow as isize)).max(0) as usize;
                        for y in y_lo..y_hi {
                            let irow = ibase + ((y as isize + dy) as usize) * x.w;
                            let orow = obase + y * ow;
                            for xx in x_lo..x_hi {
                                out.data[orow + xx] +=
                                    wv * x.data[irow + (xx as isize + dx) as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward_input(
    g: &Tensor,
    w: &Tensor,
    x: &Tensor,
    groups: usize,
    dilation: usize,
    pad: usize,
) -> Tensor {
    let (c_out, c_in_g, kh, kw) = w.shape();
    let ocg = c_out / groups;
    let (oh, ow) = (g.h, g.w);
    let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
    for n in 0..x.n {
        for oc in 0..c_out {
            let gr = oc / ocg;
            let gbase = (n * c_out + oc) * oh * ow;
            for icg in 0..c_in_g {
                let ic = gr * c_in_g + icg;
                let dbase = (n * x.c + ic) * x.h * x.w;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w.data[((oc * c_in_g + icg) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let dy = (ky * dilation) as isize - pad as isize;
                        let dx_off = (kx * dilation) as isize - pad as isize;
                        let y_lo = (-dy).max(0) as usize;
                        let y_hi = ((x.h as isize - dy).min(oh as isize)).max(0) as usize;
                        let x_lo = (-dx_off).max(0) as usize;
                        let x_hi = ((x.w as isize - dx_off).min(ow as isize)).max(0) as usize;
                        for y in y_lo..y_hi {
                            let drow = dbase + ((y as isize + dy) as usize) * x.w;
                            let grow = gbase + y * ow;
                            for xx in x_lo..x_hi {
                                dx.data[drow + (xx as isize + dx_off) as usize] +=
                                    wv * g.data[grow + xx];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv2d_backward_weight(
    g: &Tensor,
    x: &Tensor,
    w: &Tensor,
    groups: usize,
    dilation: usize,
    pad: usize,
) -> Tensor {
    let (c_out, c_in_g, kh, kw) = w.shape();
    let ocg = c_out / groups;
    let (oh, ow) = (g.h, g.w);
    let mut dw = Tensor::zeros(c_out, c_in_g, kh, kw);
    for n in 0..x.n {
        for oc in 0..c_out {
            let gr = oc / ocg;
            let gbase = (n * c_out + oc) * oh * ow;
            for icg in 0..c_in_g {
                let ic = gr * c_in_g + icg;
                let ibase = (n * x.c + ic) * x.h * x.w;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let dy = (ky * dilation) as isize - pad as isize;
                        let dx = (kx * dilation) as isize - pad as isize;
                        let y_lo = (-dy).max(0) as usize;
                        let y_hi = ((x.h as isize - dy).min(oh as isize)).max(0) as usize;
                        let x_lo = (-dx).max(0) as usize;
                        let x_hi = ((x.w as isize - dx).min(ow as isize)).max(0) as usize;
                        let mut acc = 0.0;
                        for y in y_lo..y_hi {
                            let irow = ibase + ((y as isize + dy) as usize) * x.w;
                            let grow = gbase + y * ow;
                            for xx in x_lo..x_hi {
                                acc += g.data[grow + xx] * x.data[irow + (xx as isize + dx) as usize];
                            }
                        }
                        dw.data[((oc * c_in_g + icg) * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    }
    dw
}
