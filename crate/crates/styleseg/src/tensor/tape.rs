//! Recorded-graph reverse-mode differentiation.
//!
//! A forward pass appends nodes to a [`Tape`]; each node owns its value and
//! the operation that produced it. [`Tape::backward`] walks the tape in
//! reverse creation order (a valid topological order, since operations only
//! reference earlier nodes) and accumulates `d loss / d parameter` into the
//! owning [`ParamStore`]. Repeated backward calls accumulate.
//!
//! All kernels are single-threaded and allocation is kept to whole-buffer
//! granularity; convolution runs through im2col + a cache-friendly matmul.

use std::collections::BTreeMap;

use super::{check_finite_slice, nchw, Result, Tensor, TensorError};
use crate::rng::Rng;

/// Handle to a named parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

/// A named, trainable tensor with its gradient companion.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Owns every trainable tensor of a model, in registration order.
///
/// Registration order is part of the determinism contract: optimizers and
/// the checkpoint container iterate parameters in this order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    /// Replace a parameter's value outright, resizing its gradient buffer
    /// when the shape changes (bank growth during fine-tuning).
    pub fn set_value(&mut self, id: ParamId, value: Tensor) {
        let p = &mut self.params[id.0];
        if p.grad.shape() != value.shape() {
            p.grad = Tensor::zeros(value.shape());
        }
        p.value = value;
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    fn accumulate_grad(&mut self, id: ParamId, delta: &[f64]) -> Result<()> {
        let p = &mut self.params[id.0];
        let g = p.grad.data_mut();
        debug_assert_eq!(g.len(), delta.len());
        for (gi, &d) in g.iter_mut().zip(delta) {
            *gi += d;
        }
        check_finite_slice(g, &format!("grad of {}", p.name))
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Padding mode for [`Tape::conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output spatial size is `ceil(in / stride)`; zero padding is split
    /// with the extra row/column at the bottom/right.
    Same,
    /// No padding; output is `floor((in - k) / stride) + 1`.
    Valid,
}

enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pads: [usize; 4], // top, bottom, left, right
    },
    /// Transposed convolution, kernel 3x3, stride 2, padding 1, output
    /// padding 1: exact 2x spatial upsampling.
    ConvTranspose2x {
        input: Var,
        weight: Var,
        bias: Var,
    },
    /// Pointwise (1x1) convolution: a per-pixel linear map over channels.
    Conv1x1 {
        input: Var,
        weight: Var,
        bias: Var,
    },
    InstanceNorm {
        input: Var,
        sigma: Tensor, // [N, C], cached for backward
    },
    /// Per-item, per-channel affine: `x * gamma[n,c] + beta[n,c]`.
    ScaleShift {
        input: Var,
        gamma: Var,
        beta: Var,
    },
    /// Row lookup `table[indices[n]]` producing one row per batch item.
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    LeakyRelu {
        input: Var,
        slope: f64,
    },
    Dropout {
        input: Var,
        mask: Vec<f64>, // entries 0 or 1/(1-p)
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    UpsampleNearest2x {
        input: Var,
    },
    GlobalAvgPool {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    SliceCols {
        input: Var,
        start: usize,
        len: usize,
    },
    Sigmoid {
        input: Var,
    },
    Sum {
        input: Var,
    },
    BceWithLogits {
        logits: Var,
        targets: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// The recorded forward graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    // Four b-rows per sweep of the output row: quarters the write traffic
    // and keeps the accumulator chain wide enough to vectorize.
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        let mut p = 0;
        while p + 4 <= k {
            let (a0, a1, a2, a3) = (a_row[p], a_row[p + 1], a_row[p + 2], a_row[p + 3]);
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for j in 0..n {
                o_row[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            p += 4;
        }
        while p < k {
            let av = a_row[p];
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
            p += 1;
        }
    }
}

/// `out[i,p] += sum_j a[i,j] * b[p,j]` (a: [m,n], b: [k,n], out: [m,k]).
fn matmul_abt_acc(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let mut p = 0;
        while p + 2 <= k {
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let (mut s0, mut s1) = (0.0, 0.0);
            for j in 0..n {
                s0 += a_row[j] * b0[j];
                s1 += a_row[j] * b1[j];
            }
            out[i * k + p] += s0;
            out[i * k + p + 1] += s1;
            p += 2;
        }
        if p < k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                s += av * bv;
            }
            out[i * k + p] += s;
        }
    }
}

fn same_pads(extent: usize, stride: usize) -> (usize, usize, usize) {
    let out = extent.div_ceil(stride);
    let total = ((out - 1) * stride + 3).saturating_sub(extent);
    (out, total / 2, total - total / 2)
}

/// Lower one image to its column matrix: `col[(c*9 + ky*3 + kx), oy*ow+ox]`.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pt: usize,
    pl: usize,
    col: &mut [f64],
) {
    col.fill(0.0);
    let ohw = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(ci * 9 + ky * 3 + kx) * ohw..(ci * 9 + ky * 3 + kx + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pt as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pl as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter a column-matrix gradient back onto the input image.
#[allow(clippy::too_many_arguments)]
fn col2im_acc(
    col: &[f64],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pt: usize,
    pl: usize,
    dx: &mut [f64],
) {
    let ohw = oh * ow;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[(ci * 9 + ky * 3 + kx) * ohw..(ci * 9 + ky * 3 + kx + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pt as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[oy * ow..(oy + 1) * ow];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pl as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        value.check_finite(name)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Record a constant (no gradient flows into it).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf { param: None },
        });
        Var(self.nodes.len() - 1)
    }

    /// Lease a parameter onto the tape; backward accumulates into its grad.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Leaf { param: Some(id) },
        });
        Var(self.nodes.len() - 1)
    }

    /// 3x3 cross-correlation plus bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        if stride != 1 && stride != 2 {
            return Err(TensorError::Contract(format!(
                "conv2d: stride must be 1 or 2, got {stride}"
            )));
        }
        let (n, c, h, w) = nchw(self.value(input).shape(), "conv2d input")?;
        let wshape = self.value(weight).shape().to_vec();
        if wshape.len() != 4 || wshape[2] != 3 || wshape[3] != 3 {
            return Err(TensorError::Contract(format!(
                "conv2d: weight must be [K,C,3,3], got {wshape:?}"
            )));
        }
        let (k, wc) = (wshape[0], wshape[1]);
        if wc != c {
            return Err(TensorError::DimensionMismatch {
                axis: 1,
                expected: wc,
                got: c,
                context: "conv2d input channels vs weight".into(),
            });
        }
        if self.value(bias).shape() != [k] {
            return Err(TensorError::DimensionMismatch {
                axis: 0,
                expected: k,
                got: self.value(bias).len(),
                context: "conv2d bias vs output channels".into(),
            });
        }
        let (oh, pt, pb, ow, pl, pr) = match padding {
            Padding::Same => {
                let (oh, pt, pb) = same_pads(h, stride);
                let (ow, pl, pr) = same_pads(w, stride);
                (oh, pt, pb, ow, pl, pr)
            }
            Padding::Valid => {
                if h < 3 || w < 3 {
                    return Err(TensorError::Contract(format!(
                        "conv2d: valid padding needs spatial extent >= 3, got {h}x{w}"
                    )));
                }
                ((h - 3) / stride + 1, 0, 0, (w - 3) / stride + 1, 0, 0)
            }
        };
        let ohw = oh * ow;
        let mut out = Tensor::zeros(&[n, k, oh, ow]);
        let mut col = vec![0.0; c * 9 * ohw];
        {
            let wdata = self.value(weight).data().to_vec();
            let bdata = self.value(bias).data().to_vec();
            let xdata = self.value(input).data();
            for ni in 0..n {
                im2col(
                    &xdata[ni * c * h * w..(ni + 1) * c * h * w],
                    c,
                    h,
                    w,
                    oh,
                    ow,
                    stride,
                    pt,
                    pl,
                    &mut col,
                );
                let o = &mut out.data_mut()[ni * k * ohw..(ni + 1) * k * ohw];
                for (ki, ob) in o.chunks_mut(ohw).enumerate() {
                    ob.fill(bdata[ki]);
                }
                matmul_acc(&wdata, &col, k, c * 9, ohw, o);
            }
        }
        self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pads: [pt, pb, pl, pr],
            },
            "conv2d",
        )
    }

    /// Transposed 3x3 convolution with stride 2: exact 2x upsampling.
    /// Weight layout is `[Cin, Cout, 3, 3]`.
    pub fn conv_transpose2x(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, c, h, w) = nchw(self.value(input).shape(), "conv_transpose2x input")?;
        let wshape = self.value(weight).shape().to_vec();
        if wshape.len() != 4 || wshape[2] != 3 || wshape[3] != 3 {
            return Err(TensorError::Contract(format!(
                "conv_transpose2x: weight must be [Cin,Cout,3,3], got {wshape:?}"
            )));
        }
        if wshape[0] != c {
            return Err(TensorError::DimensionMismatch {
                axis: 1,
                expected: wshape[0],
                got: c,
                context: "conv_transpose2x input channels vs weight".into(),
            });
        }
        let k = wshape[1];
        if self.value(bias).shape() != [k] {
            return Err(TensorError::DimensionMismatch {
                axis: 0,
                expected: k,
                got: self.value(bias).len(),
                context: "conv_transpose2x bias vs output channels".into(),
            });
        }
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Tensor::zeros(&[n, k, oh, ow]);
        {
            let xdata = self.value(input).data();
            let wdata = self.value(weight).data();
            let bdata = self.value(bias).data();
            let od = out.data_mut();
            od.chunks_mut(oh * ow)
                .enumerate()
                .for_each(|(i, plane)| plane.fill(bdata[i % k]));
            for ni in 0..n {
                for ci in 0..c {
                    let xp = &xdata[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for co in 0..k {
                        let wk = &wdata[(ci * k + co) * 9..(ci * k + co + 1) * 9];
                        let op = &mut od[(ni * k + co) * oh * ow..(ni * k + co + 1) * oh * ow];
                        for iy in 0..h {
                            for ix in 0..w {
                                let v = xp[iy * w + ix];
                                for ky in 0..3 {
                                    let oy = (2 * iy + ky) as isize - 1;
                                    if oy < 0 || oy >= oh as isize {
                                        continue;
                                    }
                                    for kx in 0..3 {
                                        let ox = (2 * ix + kx) as isize - 1;
                                        if ox < 0 || ox >= ow as isize {
                                            continue;
                                        }
                                        op[oy as usize * ow + ox as usize] += v * wk[ky * 3 + kx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        self.push(
            out,
            Op::ConvTranspose2x {
                input,
                weight,
                bias,
            },
            "conv_transpose2x",
        )
    }

    /// Pointwise convolution; weight is `[K, C]`.
    pub fn conv1x1(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, c, h, w) = nchw(self.value(input).shape(), "conv1x1 input")?;
        let wshape = self.value(weight).shape().to_vec();
        if wshape.len() != 2 || wshape[1] != c {
            return Err(TensorError::DimensionMismatch {
                axis: 1,
                expected: wshape.get(1).copied().unwrap_or(0),
                got: c,
                context: "conv1x1 input channels vs weight".into(),
            });
        }
        let k = wshape[0];
        if self.value(bias).shape() != [k] {
            return Err(TensorError::DimensionMismatch {
                axis: 0,
                expected: k,
                got: self.value(bias).len(),
                context: "conv1x1 bias".into(),
            });
        }
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, k, h, w]);
        {
            let x = self.value(input).data();
            let wv = self.value(weight).data();
            let bv = self.value(bias).data();
            let o = out.data_mut();
            for ni in 0..n {
                for ki in 0..k {
                    let op = &mut o[(ni * k + ki) * hw..(ni * k + ki + 1) * hw];
                    op.fill(bv[ki]);
                    for ci in 0..c {
                        let wkc = wv[ki * c + ci];
                        let xp = &x[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                        for (ov, &xv) in op.iter_mut().zip(xp) {
                            *ov += wkc * xv;
                        }
                    }
                }
            }
        }
        self.push(
            out,
            Op::Conv1x1 {
                input,
                weight,
                bias,
            },
            "conv1x1",
        )
    }

    /// Normalize each (n, c) plane to zero mean, unit variance (+eps).
    pub fn instance_norm(&mut self, input: Var, eps: f64) -> Result<Var> {
        let (n, c, h, w) = nchw(self.value(input).shape(), "instance_norm input")?;
        let (mu, sigma) = super::instance_stats(self.value(input), eps)?;
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, c, h, w]);
        {
            let x = self.value(input).data();
            let o = out.data_mut();
            for i in 0..n * c {
                let m = mu.data()[i];
                let s = sigma.data()[i];
                for j in 0..hw {
                    o[i * hw + j] = (x[i * hw + j] - m) / s;
                }
            }
        }
        self.push(out, Op::InstanceNorm { input, sigma }, "instance_norm")
    }

    /// `x * gamma[n,c] + beta[n,c]` with per-item rows.
    pub fn scale_shift(&mut self, input: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, c, h, w) = nchw(self.value(input).shape(), "scale_shift input")?;
        for (v, what) in [(gamma, "gamma"), (beta, "beta")] {
            if self.value(v).shape() != [n, c] {
                return Err(TensorError::Contract(format!(
                    "scale_shift: {what} must be [N,C]=[{n},{c}], got {:?}",
                    self.value(v).shape()
                )));
            }
        }
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, c, h, w]);
        {
            let x = self.value(input).data();
            let g = self.value(gamma).data();
            let b = self.value(beta).data();
            let o = out.data_mut();
            for i in 0..n * c {
                let (gi, bi) = (g[i], b[i]);
                for j in 0..hw {
                    o[i * hw + j] = x[i * hw + j] * gi + bi;
                }
            }
        }
        self.push(out, Op::ScaleShift { input, gamma, beta }, "scale_shift")
    }

    /// Select one row of `table` per batch item.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tshape = self.value(table).shape().to_vec();
        if tshape.len() != 2 {
            return Err(TensorError::Contract(format!(
                "gather_rows: table must be 2-d, got {tshape:?}"
            )));
        }
        let (s, c) = (tshape[0], tshape[1]);
        for &ix in indices {
            if ix >= s {
                return Err(TensorError::Contract(format!(
                    "gather_rows: row index {ix} out of range (table has {s} rows)"
                )));
            }
        }
        let n = indices.len();
        let mut out = Tensor::zeros(&[n, c]);
        for (i, &ix) in indices.iter().enumerate() {
            out.data_mut()[i * c..(i + 1) * c]
                .copy_from_slice(&self.value(table).data()[ix * c..(ix + 1) * c]);
        }
        self.push(
            out,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            "gather_rows",
        )
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&slope) || slope == 0.0 {
            return Err(TensorError::Contract(format!(
                "leaky_relu: slope must be in (0,1), got {slope}"
            )));
        }
        let out = Tensor::from_fn(self.value(input).shape(), |i| {
            let v = self.value(input).data()[i];
            if v >= 0.0 {
                v
            } else {
                slope * v
            }
        });
        self.push(out, Op::LeakyRelu { input, slope }, "leaky_relu")
    }

    /// Inverted-scaling dropout: kept entries are multiplied by `1/(1-p)`,
    /// so the expected value of the output equals the input.
    pub fn dropout(&mut self, input: Var, p: f64, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Contract(format!(
                "dropout: p must be in [0,1), got {p}"
            )));
        }
        let len = self.value(input).len();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..len)
            .map(|_| if rng.uniform() < p { 0.0 } else { keep })
            .collect();
        let out = Tensor::from_fn(self.value(input).shape(), |i| {
            self.value(input).data()[i] * mask[i]
        });
        self.push(out, Op::Dropout { input, mask }, "dropout")
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = nchw(self.value(a).shape(), "concat lhs")?;
        let (nb, cb, hb, wb) = nchw(self.value(b).shape(), "concat rhs")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(TensorError::Contract(format!(
                "concat_channels: incompatible shapes {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, ca + cb, h, w]);
        for ni in 0..n {
            let dst = &mut out.data_mut()[ni * (ca + cb) * hw..(ni + 1) * (ca + cb) * hw];
            dst[..ca * hw].copy_from_slice(&self.value(a).data()[ni * ca * hw..(ni + 1) * ca * hw]);
            dst[ca * hw..].copy_from_slice(&self.value(b).data()[ni * cb * hw..(ni + 1) * cb * hw]);
        }
        self.push(out, Op::ConcatChannels { a, b }, "concat_channels")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul")
    }

    fn elementwise(&mut self, a: Var, b: Var, kind: &str) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::Contract(format!(
                "{kind}: shape {:?} != {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out = Tensor::from_fn(self.value(a).shape(), |i| {
            let (x, y) = (self.value(a).data()[i], self.value(b).data()[i]);
            if kind == "add" {
                x + y
            } else {
                x * y
            }
        });
        let op = if kind == "add" {
            Op::Add { a, b }
        } else {
            Op::Mul { a, b }
        };
        self.push(out, op, kind)
    }

    pub fn upsample_nearest2x(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = nchw(self.value(input).shape(), "upsample input")?;
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        {
            let x = self.value(input).data();
            let o = out.data_mut();
            for i in 0..n * c {
                for y in 0..h {
                    for xx in 0..w {
                        let v = x[i * h * w + y * w + xx];
                        let base = i * 4 * h * w;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            o[base + (2 * y + dy) * 2 * w + 2 * xx + dx] = v;
                        }
                    }
                }
            }
        }
        self.push(out, Op::UpsampleNearest2x { input }, "upsample_nearest2x")
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = nchw(self.value(input).shape(), "global_avg_pool input")?;
        let hw = (h * w) as f64;
        let mut out = Tensor::zeros(&[n, c]);
        for i in 0..n * c {
            out.data_mut()[i] =
                self.value(input).data()[i * h * w..(i + 1) * h * w].iter().sum::<f64>() / hw;
        }
        self.push(out, Op::GlobalAvgPool { input }, "global_avg_pool")
    }

    /// Dense layer: `x[N,L] @ w[L,O] + b[O]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xshape = self.value(input).shape().to_vec();
        let wshape = self.value(weight).shape().to_vec();
        if xshape.len() != 2 || wshape.len() != 2 || xshape[1] != wshape[0] {
            return Err(TensorError::Contract(format!(
                "linear: incompatible shapes x{xshape:?} w{wshape:?}"
            )));
        }
        let (n, l, o) = (xshape[0], xshape[1], wshape[1]);
        if self.value(bias).shape() != [o] {
            return Err(TensorError::DimensionMismatch {
                axis: 0,
                expected: o,
                got: self.value(bias).len(),
                context: "linear bias".into(),
            });
        }
        let mut out = Tensor::zeros(&[n, o]);
        {
            let b = self.value(bias).data().to_vec();
            for ni in 0..n {
                out.data_mut()[ni * o..(ni + 1) * o].copy_from_slice(&b);
            }
            let x = self.value(input).data().to_vec();
            matmul_acc(
                &x,
                self.value(weight).data(),
                n,
                l,
                o,
                out.data_mut(),
            );
        }
        self.push(
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
            "linear",
        )
    }

    /// Column slice of a `[N, M]` tensor.
    pub fn slice_cols(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 2 || start + len > shape[1] {
            return Err(TensorError::Contract(format!(
                "slice_cols: [{start}, {}) out of range for shape {shape:?}",
                start + len
            )));
        }
        let (n, m) = (shape[0], shape[1]);
        let mut out = Tensor::zeros(&[n, len]);
        for ni in 0..n {
            out.data_mut()[ni * len..(ni + 1) * len]
                .copy_from_slice(&self.value(input).data()[ni * m + start..ni * m + start + len]);
        }
        self.push(out, Op::SliceCols { input, start, len }, "slice_cols")
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let out = super::sigmoid(self.value(input));
        self.push(out, Op::Sigmoid { input }, "sigmoid")
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).data().iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::Sum { input }, "sum")
    }

    /// Fused mean binary cross-entropy over logits; `targets` is constant.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor) -> Result<Var> {
        let loss = super::bce_with_logits(self.value(logits), &targets)?;
        self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits { logits, targets },
            "bce_with_logits",
        )
    }

    /// Reverse pass from a scalar root; accumulates parameter gradients
    /// into `store`. May be called repeatedly (gradients add up).
    pub fn backward(&self, root: Var, store: &mut ParamStore) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward: root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf { param } => {
                    if let Some(pid) = param {
                        store.accumulate_grad(*pid, &g)?;
                    }
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    pads,
                } => self.backward_conv2d(
                    &g, i, *input, *weight, *bias, *stride, *pads, &mut grads,
                ),
                Op::ConvTranspose2x {
                    input,
                    weight,
                    bias,
                } => self.backward_conv_transpose(&g, *input, *weight, *bias, &mut grads),
                Op::Conv1x1 {
                    input,
                    weight,
                    bias,
                } => {
                    let (n, c, h, w) = nchw(self.value(*input).shape(), "c1-bwd").unwrap();
                    let k = self.value(*weight).shape()[0];
                    let hw = h * w;
                    let xv = self.value(*input).data().to_vec();
                    let wv = self.value(*weight).data().to_vec();
                    let mut dw = vec![0.0; k * c];
                    let mut db = vec![0.0; k];
                    {
                        let dx = ensure(&mut grads, *input, n * c * hw);
                        for ni in 0..n {
                            for ki in 0..k {
                                let gp = &g[(ni * k + ki) * hw..(ni * k + ki + 1) * hw];
                                db[ki] += gp.iter().sum::<f64>();
                                for ci in 0..c {
                                    let xp = &xv[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                                    let dxp = &mut dx[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                                    let wkc = wv[ki * c + ci];
                                    let mut s = 0.0;
                                    for j in 0..hw {
                                        dxp[j] += wkc * gp[j];
                                        s += gp[j] * xp[j];
                                    }
                                    dw[ki * c + ci] += s;
                                }
                            }
                        }
                    }
                    add_into(&mut grads, *weight, &dw);
                    add_into(&mut grads, *bias, &db);
                }
                Op::InstanceNorm { input, sigma } => {
                    let u = self.nodes[i].value.data();
                    let (_, _, h, w) = nchw(self.value(*input).shape(), "in-bwd").unwrap();
                    let hw = h * w;
                    let dx = ensure(&mut grads, *input, self.value(*input).len());
                    for (pc, &s) in sigma.data().iter().enumerate() {
                        let gs = &g[pc * hw..(pc + 1) * hw];
                        let us = &u[pc * hw..(pc + 1) * hw];
                        let mean_g = gs.iter().sum::<f64>() / hw as f64;
                        let mean_gu =
                            gs.iter().zip(us).map(|(&a, &b)| a * b).sum::<f64>() / hw as f64;
                        let d = &mut dx[pc * hw..(pc + 1) * hw];
                        for j in 0..hw {
                            d[j] += (gs[j] - mean_g - us[j] * mean_gu) / s;
                        }
                    }
                }
                Op::ScaleShift { input, gamma, beta } => {
                    let (n, c, h, w) = nchw(self.value(*input).shape(), "ss-bwd").unwrap();
                    let hw = h * w;
                    let gvals = self.value(*gamma).data().to_vec();
                    let xvals = self.value(*input).data().to_vec();
                    {
                        let dx = ensure(&mut grads, *input, n * c * hw);
                        for i2 in 0..n * c {
                            for j in 0..hw {
                                dx[i2 * hw + j] += g[i2 * hw + j] * gvals[i2];
                            }
                        }
                    }
                    {
                        let dg = ensure(&mut grads, *gamma, n * c);
                        for i2 in 0..n * c {
                            let mut s = 0.0;
                            for j in 0..hw {
                                s += g[i2 * hw + j] * xvals[i2 * hw + j];
                            }
                            dg[i2] += s;
                        }
                    }
                    let db = ensure(&mut grads, *beta, n * c);
                    for i2 in 0..n * c {
                        db[i2] += g[i2 * hw..(i2 + 1) * hw].iter().sum::<f64>();
                    }
                }
                Op::GatherRows { table, indices } => {
                    let c = self.value(*table).shape()[1];
                    let dt = ensure(&mut grads, *table, self.value(*table).len());
                    for (row, &ix) in indices.iter().enumerate() {
                        for j in 0..c {
                            dt[ix * c + j] += g[row * c + j];
                        }
                    }
                }
                Op::LeakyRelu { input, slope } => {
                    let x = self.value(*input).data();
                    let dx = ensure(&mut grads, *input, x.len());
                    for j in 0..x.len() {
                        dx[j] += g[j] * if x[j] >= 0.0 { 1.0 } else { *slope };
                    }
                }
                Op::Dropout { input, mask } => {
                    let dx = ensure(&mut grads, *input, mask.len());
                    for j in 0..mask.len() {
                        dx[j] += g[j] * mask[j];
                    }
                }
                Op::ConcatChannels { a, b } => {
                    let (n, ca, h, w) = nchw(self.value(*a).shape(), "cc-bwd").unwrap();
                    let cb = self.value(*b).shape()[1];
                    let hw = h * w;
                    {
                        let da = ensure(&mut grads, *a, n * ca * hw);
                        for ni in 0..n {
                            let src = &g[ni * (ca + cb) * hw..ni * (ca + cb) * hw + ca * hw];
                            for (d, &s) in da[ni * ca * hw..(ni + 1) * ca * hw].iter_mut().zip(src)
                            {
                                *d += s;
                            }
                        }
                    }
                    let db = ensure(&mut grads, *b, n * cb * hw);
                    for ni in 0..n {
                        let src = &g[ni * (ca + cb) * hw + ca * hw..(ni + 1) * (ca + cb) * hw];
                        for (d, &s) in db[ni * cb * hw..(ni + 1) * cb * hw].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                Op::Add { a, b } => {
                    for v in [a, b] {
                        let d = ensure(&mut grads, *v, g.len());
                        for (di, &gi) in d.iter_mut().zip(&g) {
                            *di += gi;
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let av = self.value(*a).data().to_vec();
                    let bv = self.value(*b).data().to_vec();
                    {
                        let da = ensure(&mut grads, *a, g.len());
                        for j in 0..g.len() {
                            da[j] += g[j] * bv[j];
                        }
                    }
                    let db = ensure(&mut grads, *b, g.len());
                    for j in 0..g.len() {
                        db[j] += g[j] * av[j];
                    }
                }
                Op::UpsampleNearest2x { input } => {
                    let (n, c, h, w) = nchw(self.value(*input).shape(), "up-bwd").unwrap();
                    let dx = ensure(&mut grads, *input, n * c * h * w);
                    for i2 in 0..n * c {
                        for y in 0..h {
                            for xx in 0..w {
                                let base = i2 * 4 * h * w;
                                let mut s = 0.0;
                                for (dy, dxo) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    s += g[base + (2 * y + dy) * 2 * w + 2 * xx + dxo];
                                }
                                dx[i2 * h * w + y * w + xx] += s;
                            }
                        }
                    }
                }
                Op::GlobalAvgPool { input } => {
                    let (n, c, h, w) = nchw(self.value(*input).shape(), "gap-bwd").unwrap();
                    let hw = h * w;
                    let dx = ensure(&mut grads, *input, n * c * hw);
                    for i2 in 0..n * c {
                        let gv = g[i2] / hw as f64;
                        for j in 0..hw {
                            dx[i2 * hw + j] += gv;
                        }
                    }
                }
                Op::Linear {
                    input,
                    weight,
                    bias,
                } => {
                    let xshape = self.value(*input).shape().to_vec();
                    let (n, l) = (xshape[0], xshape[1]);
                    let o = self.value(*weight).shape()[1];
                    let xv = self.value(*input).data().to_vec();
                    let wv = self.value(*weight).data().to_vec();
                    {
                        // dx[n,l] = g[n,o] @ w[l,o]^T
                        let dx = ensure(&mut grads, *input, n * l);
                        matmul_abt_acc(&g, &wv, n, o, l, dx);
                    }
                    {
                        // dw[l,o] += x[n,l]^T @ g[n,o]
                        let dw = ensure(&mut grads, *weight, l * o);
                        for ni in 0..n {
                            for li in 0..l {
                                let xval = xv[ni * l + li];
                                let gr = &g[ni * o..(ni + 1) * o];
                                let dr = &mut dw[li * o..(li + 1) * o];
                                for j in 0..o {
                                    dr[j] += xval * gr[j];
                                }
                            }
                        }
                    }
                    let db = ensure(&mut grads, *bias, o);
                    for ni in 0..n {
                        for j in 0..o {
                            db[j] += g[ni * o + j];
                        }
                    }
                }
                Op::SliceCols { input, start, len } => {
                    let shape = self.value(*input).shape().to_vec();
                    let (n, m) = (shape[0], shape[1]);
                    let dx = ensure(&mut grads, *input, n * m);
                    for ni in 0..n {
                        for j in 0..*len {
                            dx[ni * m + start + j] += g[ni * len + j];
                        }
                    }
                }
                Op::Sigmoid { input } => {
                    let s = self.nodes[i].value.data();
                    let dx = ensure(&mut grads, *input, s.len());
                    for j in 0..s.len() {
                        dx[j] += g[j] * s[j] * (1.0 - s[j]);
                    }
                }
                Op::Sum { input } => {
                    let dx = ensure(&mut grads, *input, self.value(*input).len());
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
                Op::BceWithLogits { logits, targets } => {
                    let x = self.value(*logits).data();
                    let m = x.len() as f64;
                    let dx = ensure(&mut grads, *logits, x.len());
                    for j in 0..x.len() {
                        let s = if x[j] >= 0.0 {
                            1.0 / (1.0 + (-x[j]).exp())
                        } else {
                            let e = x[j].exp();
                            e / (1.0 + e)
                        };
                        dx[j] += g[0] * (s - targets.data()[j]) / m;
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_conv2d(
        &self,
        g: &[f64],
        node: usize,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pads: [usize; 4],
        grads: &mut Vec<Option<Vec<f64>>>,
    ) {
        let (n, c, h, w) = nchw(self.value(input).shape(), "conv-bwd").unwrap();
        let oshape = self.nodes[node].value.shape();
        let (k, oh, ow) = (oshape[1], oshape[2], oshape[3]);
        let ohw = oh * ow;
        let [pt, _pb, pl, _pr] = pads;
        let wv = self.value(weight).data().to_vec();
        let xv = self.value(input).data().to_vec();

        let mut col = vec![0.0; c * 9 * ohw];
        let mut dcol = vec![0.0; c * 9 * ohw];
        let mut dw = vec![0.0; k * c * 9];
        let mut db = vec![0.0; k];
        // transpose of the weight matrix, reused across the batch
        let mut wt = vec![0.0; c * 9 * k];
        for ki in 0..k {
            for p in 0..c * 9 {
                wt[p * k + ki] = wv[ki * c * 9 + p];
            }
        }
        {
            let dx = ensure(grads, input, n * c * h * w);
            for ni in 0..n {
                let go = &g[ni * k * ohw..(ni + 1) * k * ohw];
                im2col(
                    &xv[ni * c * h * w..(ni + 1) * c * h * w],
                    c,
                    h,
                    w,
                    oh,
                    ow,
                    stride,
                    pt,
                    pl,
                    &mut col,
                );
                // dW += gOut @ col^T
                matmul_abt_acc(go, &col, k, ohw, c * 9, &mut dw);
                for ki in 0..k {
                    db[ki] += go[ki * ohw..(ki + 1) * ohw].iter().sum::<f64>();
                }
                // dcol = W^T @ gOut
                dcol.fill(0.0);
                matmul_acc(&wt, go, c * 9, k, ohw, &mut dcol);
                col2im_acc(
                    &dcol,
                    c,
                    h,
                    w,
                    oh,
                    ow,
                    stride,
                    pt,
                    pl,
                    &mut dx[ni * c * h * w..(ni + 1) * c * h * w],
                );
            }
        }
        add_into(grads, weight, &dw);
        add_into(grads, bias, &db);
    }

    fn backward_conv_transpose(
        &self,
        g: &[f64],
        input: Var,
        weight: Var,
        bias: Var,
        grads: &mut Vec<Option<Vec<f64>>>,
    ) {
        let (n, c, h, w) = nchw(self.value(input).shape(), "tconv-bwd").unwrap();
        let k = self.value(weight).shape()[1];
        let (oh, ow) = (2 * h, 2 * w);
        let wv = self.value(weight).data().to_vec();
        let xv = self.value(input).data().to_vec();
        let mut dw = vec![0.0; c * k * 9];
        let mut db = vec![0.0; k];
        {
            let dx = ensure(grads, input, n * c * h * w);
            for ni in 0..n {
                for co in 0..k {
                    let gp = &g[(ni * k + co) * oh * ow..(ni * k + co + 1) * oh * ow];
                    db[co] += gp.iter().sum::<f64>();
                    for ci in 0..c {
                        let xp = &xv[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                        let dxp = &mut dx[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                        let wk = &wv[(ci * k + co) * 9..(ci * k + co + 1) * 9];
                        let dwk = &mut dw[(ci * k + co) * 9..(ci * k + co + 1) * 9];
                        for iy in 0..h {
                            for ix in 0..w {
                                let xval = xp[iy * w + ix];
                                let mut acc = 0.0;
                                for ky in 0..3 {
                                    let oy = (2 * iy + ky) as isize - 1;
                                    if oy < 0 || oy >= oh as isize {
                                        continue;
                                    }
                                    for kx in 0..3 {
                                        let ox = (2 * ix + kx) as isize - 1;
                                        if ox < 0 || ox >= ow as isize {
                                            continue;
                                        }
                                        let gv = gp[oy as usize * ow + ox as usize];
                                        acc += gv * wk[ky * 3 + kx];
                                        dwk[ky * 3 + kx] += gv * xval;
                                    }
                                }
                                dxp[iy * w + ix] += acc;
                            }
                        }
                    }
                }
            }
        }
        add_into(grads, weight, &dw);
        add_into(grads, bias, &db);
    }
}

fn ensure(grads: &mut Vec<Option<Vec<f64>>>, v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(grads: &mut Vec<Option<Vec<f64>>>, v: Var, delta: &[f64]) {
    let g = grads[v.0].get_or_insert_with(|| vec![0.0; delta.len()]);
    for (gi, &d) in g.iter_mut().zip(delta) {
        *gi += d;
    }
}

#[cfg(test)]
mod tests {
    use super::*;


    fn tensor4(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![n, c, h, w], data).unwrap()
    }

    /// Direct nested-loop cross-correlation oracle (stride 1, same padding).
    fn conv_oracle_same_s1(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        let (n, c, h, ww) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let k = w.shape()[0];
        let mut out = Tensor::zeros(&[n, k, h, ww]);
        for ni in 0..n {
            for ki in 0..k {
                for oy in 0..h {
                    for ox in 0..ww {
                        let mut s = b.data()[ki];
                        for ci in 0..c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = oy as isize + ky as isize - 1;
                                    let ix = ox as isize + kx as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= ww as isize {
                                        continue;
                                    }
                                    s += x.data()[((ni * c + ci) * h + iy as usize) * ww
                                        + ix as usize]
                                        * w.data()[((ki * c + ci) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                        out.data_mut()[((ni * k + ki) * h + oy) * ww + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_zero_input_yields_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        let w = tape.constant(Tensor::from_fn(&[2, 1, 3, 3], |i| i as f64 * 0.3 - 1.0));
        let b = tape.constant(Tensor::new(vec![2], vec![0.7, -0.2]).unwrap());
        let out = tape.conv2d(x, w, b, 1, Padding::Same).unwrap();
        for (i, &v) in tape.value(out).data().iter().enumerate() {
            let expect = if i < 9 { 0.7 } else { -0.2 };
            assert_eq!(v, expect);
        }
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut tape = Tape::new();
        let xt = Tensor::from_fn(&[1, 1, 4, 5], |i| (i as f64).sin());
        let x = tape.constant(xt.clone());
        let mut wt = Tensor::zeros(&[1, 1, 3, 3]);
        wt.data_mut()[4] = 1.0; // center tap
        let w = tape.constant(wt);
        let b = tape.constant(Tensor::zeros(&[1]));
        let out = tape.conv2d(x, w, b, 1, Padding::Same).unwrap();
        assert_eq!(tape.value(out).data(), xt.data());
    }

    #[test]
    fn conv_all_ones_kernel_on_2x2() {
        // window sum of the zero-padded 2x2 input is 10 at every position
        let mut tape = Tape::new();
        let xt = tensor4(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let x = tape.constant(xt.clone());
        let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let out = tape.conv2d(x, w, b, 1, Padding::Same).unwrap();
        assert_eq!(tape.value(out).data(), &[10.0, 10.0, 10.0, 10.0]);
        // and the independent nested-loop oracle agrees
        let oracle = conv_oracle_same_s1(
            &xt,
            &Tensor::ones(&[1, 1, 3, 3]),
            &Tensor::zeros(&[1]),
        );
        assert_eq!(oracle.data(), tape.value(out).data());
    }

    #[test]
    fn conv_matches_oracle_on_random_input() {
        let mut rng = crate::Rng::new(17);
        let xt = Tensor::from_fn(&[2, 3, 5, 4], |_| rng.normal());
        let wt = Tensor::from_fn(&[4, 3, 3, 3], |_| rng.normal());
        let bt = Tensor::from_fn(&[4], |_| rng.normal());
        let mut tape = Tape::new();
        let x = tape.constant(xt.clone());
        let w = tape.constant(wt.clone());
        let b = tape.constant(bt.clone());
        let out = tape.conv2d(x, w, b, 1, Padding::Same).unwrap();
        let oracle = conv_oracle_same_s1(&xt, &wt, &bt);
        for (a, e) in tape.value(out).data().iter().zip(oracle.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_stride2_halves_spatial_size() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 6, 8]));
        let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let out = tape.conv2d(x, w, b, 2, Padding::Same).unwrap();
        assert_eq!(tape.value(out).shape(), &[1, 1, 3, 4]);
    }

    #[test]
    fn conv_channel_mismatch_names_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 4, 4]));
        let w = tape.constant(Tensor::ones(&[1, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        match tape.conv2d(x, w, b, 1, Padding::Same) {
            Err(TensorError::DimensionMismatch { axis, .. }) => assert_eq!(axis, 1),
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn leaky_relu_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3], vec![0.0, -2.0, 3.0]).unwrap());
        let out = tape.leaky_relu(x, 0.01).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0, -0.02, 3.0]);
        assert!(tape.leaky_relu(x, 0.0).is_err());
        assert!(tape.leaky_relu(x, 1.0).is_err());
    }

    #[test]
    fn instance_norm_output_is_standardized() {
        let mut rng = crate::Rng::new(5);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 8, 8], |_| rng.normal_scaled(4.0, 3.0)));
        let out = tape.instance_norm(x, 1e-5).unwrap();
        let v = tape.value(out);
        for pc in 0..6 {
            let plane = &v.data()[pc * 64..(pc + 1) * 64];
            let mean = plane.iter().sum::<f64>() / 64.0;
            let var = plane.iter().map(|&u| (u - mean) * (u - mean)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-9, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn dropout_train_mode_preserves_expectation() {
        // inverted scaling: E[out] == input, checked over >= 1e5 draws
        let mut rng = crate::Rng::new(21);
        let n = 200_000;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 1, n]));
        let out = tape.dropout(x, 0.1, &mut rng).unwrap();
        let mean = tape.value(out).data().iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn upsample_nearest_repeats_pixels() {
        let mut tape = Tape::new();
        let x = tape.constant(tensor4(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let out = tape.upsample_nearest2x(x).unwrap();
        assert_eq!(
            tape.value(out).data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn conv_transpose_doubles_spatial_size_and_matches_scatter_oracle() {
        let mut rng = crate::Rng::new(12);
        let xt = Tensor::from_fn(&[1, 2, 3, 3], |_| rng.normal());
        let wt = Tensor::from_fn(&[2, 3, 3, 3], |_| rng.normal());
        let bt = Tensor::from_fn(&[3], |_| rng.normal());
        let mut tape = Tape::new();
        let x = tape.constant(xt.clone());
        let w = tape.constant(wt.clone());
        let b = tape.constant(bt.clone());
        let out = tape.conv_transpose2x(x, w, b).unwrap();
        assert_eq!(tape.value(out).shape(), &[1, 3, 6, 6]);

        // brute-force scatter oracle
        let mut oracle = vec![0.0; 3 * 36];
        for (i, v) in oracle.iter_mut().enumerate() {
            *v = bt.data()[i / 36];
        }
        for ci in 0..2 {
            for co in 0..3 {
                for iy in 0..3 {
                    for ix in 0..3 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let oy = 2 * iy as isize + ky as isize - 1;
                                let ox = 2 * ix as isize + kx as isize - 1;
                                if oy < 0 || ox < 0 || oy >= 6 || ox >= 6 {
                                    continue;
                                }
                                oracle[co * 36 + oy as usize * 6 + ox as usize] += xt.data()
                                    [(ci * 3 + iy) * 3 + ix]
                                    * wt.data()[((ci * 3 + co) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                }
            }
        }
        for (a, e) in tape.value(out).data().iter().zip(&oracle) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn gather_rows_and_scale_shift() {
        let mut tape = Tape::new();
        let table = tape.constant(
            Tensor::new(vec![2, 2], vec![1.0, 2.0, 10.0, 20.0]).unwrap(),
        );
        let rows = tape.gather_rows(table, &[1, 0, 1]).unwrap();
        assert_eq!(tape.value(rows).data(), &[10.0, 20.0, 1.0, 2.0, 10.0, 20.0]);

        let x = tape.constant(Tensor::ones(&[3, 2, 1, 1]));
        let beta = tape.constant(Tensor::zeros(&[3, 2]));
        let out = tape.scale_shift(x, rows, beta).unwrap();
        assert_eq!(tape.value(out).data(), &[10.0, 20.0, 1.0, 2.0, 10.0, 20.0]);
    }

    #[test]
    fn concat_then_backward_splits_gradient() {
        let mut store = ParamStore::new();
        let a = store.register("a", Tensor::ones(&[1, 1, 2, 2]));
        let b = store.register("b", Tensor::ones(&[1, 2, 2, 2]));
        let mut tape = Tape::new();
        let av = tape.param(&store, a);
        let bv = tape.param(&store, b);
        let cat = tape.concat_channels(av, bv).unwrap();
        assert_eq!(tape.value(cat).shape(), &[1, 3, 2, 2]);
        let loss = tape.sum(cat).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert!(store.grad(a).data().iter().all(|&g| g == 1.0));
        assert!(store.grad(b).data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn nonfinite_forward_is_a_hard_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1], vec![1e308]).unwrap());
        let y = tape.constant(Tensor::new(vec![1], vec![1e308]).unwrap());
        assert!(matches!(
            tape.add(x, y),
            Err(TensorError::NonFinite { .. })
        ));
    }
}
