//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive as a node holding its forward value.
//! Nodes are appended in evaluation order, so the backward sweep simply walks
//! the node list in reverse and accumulates vector-Jacobian products.
//!
//! Lifecycle: one tape per forward pass. [`Tape::backward`] does not consume
//! the tape and may be called repeatedly (e.g. for different losses built on
//! the same graph); [`Tape::clear`] drops all nodes so the allocation can be
//! reused for the next step.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};
use crate::error::{shape_err, Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
/// Lower clamp on vector norms inside cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

#[derive(Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub ho: usize,
    pub wo: usize,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    MeanRows(Var),
    Exp(Var),
    Ln(Var),
    Sigmoid(Var),
    Silu(Var),
    XLogX(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Im2Col {
        x: Var,
        geo: ConvGeometry,
    },
    DepthwiseConv1d {
        x: Var,
        w: Var,
    },
    SliceCols {
        x: Var,
        start: usize,
        end: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    Grl(Var),
    StraightThrough(Var),
    ReplaceRows {
        x: Var,
        fill: Var,
        rows: Vec<usize>,
    },
    CosineRows {
        a: Var,
        b: Var,
        na: Vec<f64>,
        nb: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::AddRow(..) => "add_row",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumLast(..) => "sum_last",
            Op::MeanRows(..) => "mean_rows",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Sigmoid(..) => "sigmoid",
            Op::Silu(..) => "silu",
            Op::XLogX(..) => "xlogx",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Im2Col { .. } => "im2col",
            Op::DepthwiseConv1d { .. } => "depthwise_conv1d",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::Reshape(..) => "reshape",
            Op::Pick { .. } => "pick",
            Op::Grl(..) => "grl",
            Op::StraightThrough(..) => "straight_through",
            Op::ReplaceRows { .. } => "replace_rows",
            Op::CosineRows { .. } => "cosine_rows",
        }
    }
}

struct Node {
    value: Value,
    op: Op,
}

/// Result of a backward sweep.
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient with respect to an arbitrary tape node.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Gradient of a parameter, or exact zeros when it did not take part.
    pub fn param_or_zeros(&self, id: ParamId, store: &ParamStore) -> Tensor {
        self.params
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (*k, v))
    }

    pub fn remove_param(&mut self, id: ParamId) -> Option<Tensor> {
        self.params.remove(&id)
    }

    /// L2 norm over all parameter gradients.
    pub fn global_norm(&self) -> f64 {
        libm::sqrt(self.params.values().map(Tensor::norm_sq).sum())
    }

    pub(crate) fn into_param_map(self) -> BTreeMap<ParamId, Tensor> {
        self.params
    }
}

/// Gradient tape.
pub struct Tape<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: BTreeMap<ParamId, Var>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    /// A tape with no parameter store; only constants can be leaves.
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_vars: BTreeMap::new(),
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: BTreeMap::new(),
        }
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.param_vars.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn store(&self) -> Option<&'p ParamStore> {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.expect("param node without store").get(*id),
        }
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let store = self
            .store
            .ok_or_else(|| Error::Contract("tape has no parameter store".into()))?;
        if id.0 >= store.len() {
            return Err(Error::Contract(format!("unknown parameter id {}", id.0)));
        }
        if let Some(v) = self.param_vars.get(&id) {
            return Ok(*v);
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        Ok(v)
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let store = self
            .store
            .ok_or_else(|| Error::Contract("tape has no parameter store".into()))?;
        let id = store.require(name)?;
        self.param(id)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let tb = self.value(b);
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::Offset(a))
    }

    /// Adds a `[d]` row vector to every row of `[.., d]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, c) = self.value(x).rows_cols();
        if self.value(row).len() != c {
            return Err(shape_err(
                "add_row",
                format!("{:?} + {:?}", self.shape(x), self.shape(row)),
            ));
        }
        let r = self.value(row).data().to_vec();
        let mut out = self.value(x).clone();
        if c > 0 {
            for chunk in out.data_mut().chunks_mut(c) {
                for (o, b) in chunk.iter_mut().zip(&r) {
                    *o += b;
                }
            }
        }
        self.push(out, Op::AddRow(x, row))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b))
    }

    /// `x W + b` for `x: [N, d_in]`, `W: [d_in, d_out]`, `b: [d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(shape_err("transpose", format!("{s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(shape_err("mean", "empty tensor"));
        }
        let s = t.sum() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Sums over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.rows_cols();
        let data: Vec<f64> = (0..r)
            .map(|i| t.data()[i * c..(i + 1) * c].iter().sum())
            .collect();
        let mut shape = t.shape().to_vec();
        shape.pop();
        self.push(Tensor::from_parts(shape, data), Op::SumLast(a))
    }

    /// Averages a `[N, d]` matrix over its rows, giving `[d]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.rows_cols();
        if r == 0 {
            return Err(shape_err("mean_rows", "no rows"));
        }
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        self.push(Tensor::from_parts(vec![c], out), Op::MeanRows(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(libm::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(libm::log);
        self.push(v, Op::Ln(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    /// `x ln x`, with the continuous extension `0 ln 0 = 0`.
    pub fn xlogx(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(xlogx);
        self.push(v, Op::XLogX(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = softmax_last(self.value(a));
        self.push(v, Op::Softmax(a))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.rows_cols();
        let mut out = t.data().to_vec();
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + libm::log(row.iter().map(|v| libm::exp(v - m)).sum::<f64>());
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let v = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(v, Op::LogSoftmax(a))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.rows_cols();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(shape_err("layer_norm", format!("features {c}")));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = t.row(i);
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let inv = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            inv_std[i] = inv;
            for j in 0..c {
                let xh = (row[j] - mu) * inv;
                xhat[i * c + j] = xh;
                out[i * c + j] = xh * g[j] + b[j];
            }
        }
        let v = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Unfolds a `[h, w, c]` image (any stored shape with `h*w*c` values)
    /// into `[ho*wo, kh*kw*c]` patches with "same" padding.
    pub fn im2col(
        &mut self,
        x: Var,
        hwc: (usize, usize, usize),
        kernel: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Var> {
        let (h, w, c) = hwc;
        if self.value(x).len() != h * w * c {
            return Err(shape_err(
                "im2col",
                format!("{:?} is not {h}x{w}x{c}", self.shape(x)),
            ));
        }
        let (kh, kw) = kernel;
        let (sh, sw) = stride;
        let (ho, ph) = same_padding(h, kh, sh);
        let (wo, pw) = same_padding(w, kw, sw);
        let geo = ConvGeometry {
            h,
            w,
            c,
            kh,
            kw,
            sh,
            sw,
            ph,
            pw,
            ho,
            wo,
        };
        let src = self.value(x).data();
        let cols = kh * kw * c;
        let mut out = vec![0.0; ho * wo * cols];
        for oy in 0..ho {
            for ox in 0..wo {
                let base = (oy * wo + ox) * cols;
                for ky in 0..kh {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * sw + kx) as isize - pw as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let s = (iy as usize * w + ix as usize) * c;
                        let d = base + (ky * kw + kx) * c;
                        out[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
        self.push(
            Tensor::from_parts(vec![ho * wo, cols], out),
            Op::Im2Col { x, geo },
        )
    }

    /// Depthwise 1-D convolution along rows of `[T, C]` with kernel `[K, C]`,
    /// stride 1 and symmetric "same" padding (`K` odd).
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] || sw[0] % 2 == 0 {
            return Err(shape_err("depthwise_conv1d", format!("{sx:?} * {sw:?}")));
        }
        let (t, c, k) = (sx[0], sx[1], sw[0]);
        let pad = (k - 1) / 2;
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let mut out = vec![0.0; t * c];
        for ti in 0..t {
            let orow = &mut out[ti * c..(ti + 1) * c];
            for ki in 0..k {
                let src = ti as isize + ki as isize - pad as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let xrow = &xs[src as usize * c..(src as usize + 1) * c];
                let wrow = &ws[ki * c..(ki + 1) * c];
                for j in 0..c {
                    orow[j] += wrow[j] * xrow[j];
                }
            }
        }
        self.push(
            Tensor::from_parts(vec![t, c], out),
            Op::DepthwiseConv1d { x, w },
        )
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start > end || end > s[1] {
            return Err(shape_err("slice_cols", format!("{s:?}[{start}..{end}]")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        self.push(
            Tensor::from_parts(vec![r, w], out),
            Op::SliceCols { x, start, end },
        )
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(shape_err("concat_cols", "no inputs"));
        }
        let r = self.shape(xs[0])[0];
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != 2 || s[0] != r {
                return Err(shape_err("concat_cols", format!("{s:?} with {r} rows")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &x in xs {
                out.extend_from_slice(self.value(x).row(i));
            }
        }
        self.push(
            Tensor::from_parts(vec![r, total], out),
            Op::ConcatCols(xs.to_vec()),
        )
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(shape_err("concat_rows", "no inputs"));
        }
        let tail = self.shape(xs[0])[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(shape_err("concat_rows", format!("{s:?} vs tail {tail:?}")));
            }
            rows += s[0];
            out.extend_from_slice(self.value(x).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        self.push(Tensor::from_parts(shape, out), Op::ConcatRows(xs.to_vec()))
    }

    /// Selects (possibly repeated) rows of `[N, d]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.rows_cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::IndexOutOfRange { index: i, len: r });
            }
            out.extend_from_slice(t.row(i));
        }
        self.push(
            Tensor::from_parts(vec![idx.len(), c], out),
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        self.push(v, Op::Reshape(x))
    }

    /// `out[i] = x[i, idx[i]]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.rows_cols();
        if idx.len() != r {
            return Err(shape_err(
                "pick",
                format!("{} indices for {r} rows", idx.len()),
            ));
        }
        let mut out = Vec::with_capacity(r);
        for (i, &j) in idx.iter().enumerate() {
            if j >= c {
                return Err(Error::LabelOutOfRange {
                    label: j,
                    classes: c,
                });
            }
            out.push(t.row(i)[j]);
        }
        self.push(
            Tensor::from_parts(vec![r], out),
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    /// Gradient reversal: identity forward, negated gradient backward.
    pub fn grl(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).clone();
        self.push(v, Op::Grl(x))
    }

    /// Forward value `hard`, gradient routed unchanged to `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return Err(shape_err(
                "straight_through",
                format!("{:?} vs {:?}", hard.shape(), self.shape(soft)),
            ));
        }
        self.push(hard, Op::StraightThrough(soft))
    }

    /// Replaces the listed rows of `[N, d]` with the `[d]` vector `fill`.
    pub fn replace_rows(&mut self, x: Var, fill: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).rows_cols();
        if self.value(fill).len() != c {
            return Err(shape_err("replace_rows", "fill width"));
        }
        let mut out = self.value(x).clone();
        let f = self.value(fill).data().to_vec();
        for &i in rows {
            if i >= r {
                return Err(Error::IndexOutOfRange { index: i, len: r });
            }
            out.data_mut()[i * c..(i + 1) * c].copy_from_slice(&f);
        }
        self.push(
            out,
            Op::ReplaceRows {
                x,
                fill,
                rows: rows.to_vec(),
            },
        )
    }

    /// Row-wise cosine similarity of two `[N, d]` matrices, giving `[N]`.
    /// Norms are clamped below at [`COSINE_EPS`]; an exactly zero row is an error.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_rows", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (r, _) = ta.rows_cols();
        let mut na = Vec::with_capacity(r);
        let mut nb = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let (ra, rb) = (ta.row(i), tb.row(i));
            let sa: f64 = ra.iter().map(|v| v * v).sum();
            let sb: f64 = rb.iter().map(|v| v * v).sum();
            if sa == 0.0 || sb == 0.0 {
                return Err(Error::ZeroNorm { row: i });
            }
            let (ua, ub) = (
                libm::sqrt(sa).max(COSINE_EPS),
                libm::sqrt(sb).max(COSINE_EPS),
            );
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            na.push(ua);
            nb.push(ub);
            out.push(dot / (ua * ub));
        }
        self.push(
            Tensor::from_parts(vec![r], out),
            Op::CosineRows { a, b, na, nb },
        )
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !g.all_finite() {
                return Err(Error::NonFinite { op: node.op.name() });
            }
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let mut params = BTreeMap::new();
        for (&id, &v) in &self.param_vars {
            if v.0 < n {
                if let Some(g) = &grads[v.0] {
                    params.insert(id, g.clone());
                }
            }
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = self.value(Var(i));
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(grads, *a, zip(g, tb, |x, y| x * y));
                acc(grads, *b, zip(g, ta, |x, y| x * y));
            }
            Op::Scale(a, s) => acc(grads, *a, g.map(|v| v * s)),
            Op::Offset(a) => acc(grads, *a, g.clone()),
            Op::AddRow(x, row) => {
                acc(grads, *x, g.clone());
                let c = self.value(*row).len();
                let mut gr = vec![0.0; c];
                if c > 0 {
                    for chunk in g.data().chunks(c) {
                        for (o, v) in gr.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                }
                acc(
                    grads,
                    *row,
                    Tensor::from_parts(self.shape(*row).to_vec(), gr),
                );
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let mut ga = vec![0.0; m * k];
                gemm_nt_acc(g.data(), tb.data(), &mut ga, m, n, k);
                let mut gb = vec![0.0; k * n];
                gemm_tn_acc(ta.data(), g.data(), &mut gb, m, k, n);
                acc(grads, *a, Tensor::from_parts(vec![m, k], ga));
                acc(grads, *b, Tensor::from_parts(vec![k, n], gb));
            }
            Op::Transpose(a) => {
                let (n, m) = (g.shape()[0], g.shape()[1]);
                let mut out = vec![0.0; m * n];
                for r in 0..n {
                    for c in 0..m {
                        out[c * n + r] = g.data()[r * m + c];
                    }
                }
                acc(grads, *a, Tensor::from_parts(vec![m, n], out));
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                acc(grads, *a, Tensor::full(self.shape(*a), s));
            }
            Op::Mean(a) => {
                let len = self.value(*a).len() as f64;
                let s = g.data()[0] / len;
                acc(grads, *a, Tensor::full(self.shape(*a), s));
            }
            Op::SumLast(a) => {
                let (r, c) = self.value(*a).rows_cols();
                let mut out = vec![0.0; r * c];
                for ri in 0..r {
                    out[ri * c..(ri + 1) * c].fill(g.data()[ri]);
                }
                acc(grads, *a, Tensor::from_parts(self.shape(*a).to_vec(), out));
            }
            Op::MeanRows(a) => {
                let (r, c) = self.value(*a).rows_cols();
                let mut out = Vec::with_capacity(r * c);
                for _ in 0..r {
                    out.extend(g.data().iter().map(|v| v / r as f64));
                }
                acc(grads, *a, Tensor::from_parts(self.shape(*a).to_vec(), out));
            }
            Op::Exp(a) => acc(grads, *a, zip(g, out, |x, y| x * y)),
            Op::Ln(a) => acc(grads, *a, zip(g, self.value(*a), |x, y| x / y)),
            Op::Sigmoid(a) => acc(grads, *a, zip(g, out, |x, y| x * y * (1.0 - y))),
            Op::Silu(a) => acc(
                grads,
                *a,
                zip(g, self.value(*a), |gv, x| {
                    let s = sigmoid(x);
                    gv * s * (1.0 + x * (1.0 - s))
                }),
            ),
            Op::XLogX(a) => acc(
                grads,
                *a,
                zip(g, self.value(*a), |gv, x| {
                    if x > 0.0 {
                        gv * (libm::log(x) + 1.0)
                    } else {
                        0.0
                    }
                }),
            ),
            Op::Softmax(a) => {
                let (r, c) = out.rows_cols();
                let mut gx = vec![0.0; r * c];
                for ri in 0..r {
                    let y = out.row(ri);
                    let gr = &g.data()[ri * c..(ri + 1) * c];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[ri * c + j] = y[j] * (gr[j] - dot);
                    }
                }
                acc(grads, *a, Tensor::from_parts(out.shape().to_vec(), gx));
            }
            Op::LogSoftmax(a) => {
                let (r, c) = out.rows_cols();
                let mut gx = vec![0.0; r * c];
                for ri in 0..r {
                    let y = out.row(ri);
                    let gr = &g.data()[ri * c..(ri + 1) * c];
                    let gs: f64 = gr.iter().sum();
                    for j in 0..c {
                        gx[ri * c + j] = gr[j] - libm::exp(y[j]) * gs;
                    }
                }
                acc(grads, *a, Tensor::from_parts(out.shape().to_vec(), gx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (r, c) = out.rows_cols();
                let gam = self.value(*gamma).data();
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                let mut gx = vec![0.0; r * c];
                let mut gxh = vec![0.0; c];
                for ri in 0..r {
                    let gr = &g.data()[ri * c..(ri + 1) * c];
                    let xh = &xhat[ri * c..(ri + 1) * c];
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..c {
                        gg[j] += gr[j] * xh[j];
                        gb[j] += gr[j];
                        gxh[j] = gr[j] * gam[j];
                        s1 += gxh[j];
                        s2 += gxh[j] * xh[j];
                    }
                    let k = inv_std[ri] / c as f64;
                    for j in 0..c {
                        gx[ri * c + j] = k * (c as f64 * gxh[j] - s1 - xh[j] * s2);
                    }
                }
                acc(grads, *x, Tensor::from_parts(out.shape().to_vec(), gx));
                acc(
                    grads,
                    *gamma,
                    Tensor::from_parts(self.shape(*gamma).to_vec(), gg),
                );
                acc(
                    grads,
                    *beta,
                    Tensor::from_parts(self.shape(*beta).to_vec(), gb),
                );
            }
            Op::Im2Col { x, geo } => {
                let ConvGeometry {
                    h,
                    w,
                    c,
                    kh,
                    kw,
                    sh,
                    sw,
                    ph,
                    pw,
                    ho,
                    wo,
                } = *geo;
                let cols = kh * kw * c;
                let mut gx = vec![0.0; h * w * c];
                let gd = g.data();
                for oy in 0..ho {
                    for ox in 0..wo {
                        let base = (oy * wo + ox) * cols;
                        for ky in 0..kh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let s = (iy as usize * w + ix as usize) * c;
                                let d = base + (ky * kw + kx) * c;
                                for j in 0..c {
                                    gx[s + j] += gd[d + j];
                                }
                            }
                        }
                    }
                }
                acc(grads, *x, Tensor::from_parts(self.shape(*x).to_vec(), gx));
            }
            Op::DepthwiseConv1d { x, w } => {
                let (t, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let k = self.shape(*w)[0];
                let pad = (k - 1) / 2;
                let xs = self.value(*x).data();
                let ws = self.value(*w).data();
                let mut gx = vec![0.0; t * c];
                let mut gw = vec![0.0; k * c];
                for ti in 0..t {
                    let grow = &g.data()[ti * c..(ti + 1) * c];
                    for ki in 0..k {
                        let src = ti as isize + ki as isize - pad as isize;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        let s = src as usize;
                        for j in 0..c {
                            gx[s * c + j] += ws[ki * c + j] * grow[j];
                            gw[ki * c + j] += xs[s * c + j] * grow[j];
                        }
                    }
                }
                acc(grads, *x, Tensor::from_parts(vec![t, c], gx));
                acc(grads, *w, Tensor::from_parts(vec![k, c], gw));
            }
            Op::SliceCols { x, start, end } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let wdt = end - start;
                let mut gx = vec![0.0; r * c];
                for ri in 0..r {
                    gx[ri * c + start..ri * c + end]
                        .copy_from_slice(&g.data()[ri * wdt..(ri + 1) * wdt]);
                }
                acc(grads, *x, Tensor::from_parts(vec![r, c], gx));
            }
            Op::ConcatCols(xs) => {
                let (r, total) = (g.shape()[0], g.shape()[1]);
                let mut off = 0;
                for &x in xs {
                    let wdt = self.shape(x)[1];
                    let mut gx = Vec::with_capacity(r * wdt);
                    for ri in 0..r {
                        gx.extend_from_slice(&g.data()[ri * total + off..ri * total + off + wdt]);
                    }
                    acc(grads, x, Tensor::from_parts(vec![r, wdt], gx));
                    off += wdt;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    let gx = g.data()[off..off + n].to_vec();
                    acc(grads, x, Tensor::from_parts(self.shape(x).to_vec(), gx));
                    off += n;
                }
            }
            Op::GatherRows { x, idx } => {
                let (r, c) = self.value(*x).rows_cols();
                let mut gx = vec![0.0; r * c];
                for (k, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        gx[src * c + j] += g.data()[k * c + j];
                    }
                }
                acc(grads, *x, Tensor::from_parts(self.shape(*x).to_vec(), gx));
            }
            Op::Reshape(x) => {
                let gx = Tensor::from_parts(self.shape(*x).to_vec(), g.data().to_vec());
                acc(grads, *x, gx);
            }
            Op::Pick { x, idx } => {
                let (r, c) = self.value(*x).rows_cols();
                let mut gx = vec![0.0; r * c];
                for (ri, &j) in idx.iter().enumerate() {
                    gx[ri * c + j] = g.data()[ri];
                }
                acc(grads, *x, Tensor::from_parts(self.shape(*x).to_vec(), gx));
            }
            Op::Grl(x) => acc(grads, *x, g.map(|v| -v)),
            Op::StraightThrough(soft) => acc(grads, *soft, g.clone()),
            Op::ReplaceRows { x, fill, rows } => {
                let (_, c) = out.rows_cols();
                let mut gx = g.clone();
                let mut gf = vec![0.0; c];
                for &ri in rows {
                    // a repeated row finds its segment already zeroed
                    let seg = &mut gx.data_mut()[ri * c..(ri + 1) * c];
                    for (f, v) in gf.iter_mut().zip(seg.iter()) {
                        *f += v;
                    }
                    seg.fill(0.0);
                }
                acc(grads, *x, gx);
                acc(
                    grads,
                    *fill,
                    Tensor::from_parts(self.shape(*fill).to_vec(), gf),
                );
            }
            Op::CosineRows { a, b, na, nb } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (r, c) = ta.rows_cols();
                let mut ga = vec![0.0; r * c];
                let mut gb = vec![0.0; r * c];
                for ri in 0..r {
                    let (ra, rb) = (ta.row(ri), tb.row(ri));
                    let cos = out.data()[ri];
                    let gi = g.data()[ri];
                    let denom = na[ri] * nb[ri];
                    // clamped norms are constants w.r.t. the inputs
                    let ka = if na[ri] > COSINE_EPS {
                        cos / (na[ri] * na[ri])
                    } else {
                        0.0
                    };
                    let kb = if nb[ri] > COSINE_EPS {
                        cos / (nb[ri] * nb[ri])
                    } else {
                        0.0
                    };
                    for j in 0..c {
                        ga[ri * c + j] = gi * (rb[j] / denom - ka * ra[j]);
                        gb[ri * c + j] = gi * (ra[j] / denom - kb * rb[j]);
                    }
                }
                acc(grads, *a, Tensor::from_parts(ta.shape().to_vec(), ga));
                acc(grads, *b, Tensor::from_parts(tb.shape().to_vec(), gb));
            }
        }
        Ok(())
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub(crate) fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * libm::log(x)
    } else {
        0.0
    }
}

/// Output length and leading pad for a "same"-padded strided convolution.
pub fn same_padding(len: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = len.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(len);
    (out, total / 2)
}

/// Row-wise softmax over the last axis of a plain tensor.
pub fn softmax_last(t: &Tensor) -> Tensor {
    let (r, c) = t.rows_cols();
    let mut out = t.data().to_vec();
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - m);
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}
