//! Reverse-mode differentiation over dense 2-D values.
//!
//! A [`Graph`] records every operation in creation order, which is a valid
//! topological order, so [`Graph::backward`] walks the node list once in
//! reverse. Every value is a `rows × cols` matrix; vectors are single rows and
//! scalars are `1 × 1`.
//!
//! Binary elementwise ops broadcast any operand dimension of extent 1.
//!
//! A graph is single-threaded and single-use: build it, call `backward` once,
//! read gradients, drop it.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::array::Array;
use crate::error::{shape_err, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which entries of a row-wise softmax participate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mask {
    None,
    /// Row `i` sees columns `0..=i + offset`.
    Causal { offset: usize },
    /// Only the first `n` columns are visible in every row.
    Prefix(usize),
}

impl Mask {
    fn visible(self, row: usize, cols: usize) -> usize {
        match self {
            Mask::None => cols,
            Mask::Causal { offset } => (row + offset + 1).min(cols),
            Mask::Prefix(n) => n.min(cols),
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Gelu(Var),
    Normalize { x: Var, inv_std: Vec<f64> },
    LogSoftmax(Var),
    Softmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SelectRows { x: Var, rows: Vec<usize> },
    Gather { table: Var, idx: Vec<usize> },
    Pick { x: Var, idx: Vec<usize> },
    DepthwiseConv { x: Var, w: Var },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    PadRows(Var),
    /// Scalar output whose gradient w.r.t. `x` was computed during the forward pass.
    ScalarWithGrad { x: Var, grad: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Layer-normalisation epsilon.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node { rows, cols, value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ------------------------------------------------------------------
    // leaves and accessors

    /// Leaf from an [`Array`]; differentiable iff `a.requires_grad`.
    pub fn leaf(&mut self, a: &Array) -> Var {
        let (r, c) = a.dims2();
        self.push(r, c, a.data().to_vec(), Op::Leaf, a.requires_grad)
    }

    /// Differentiable leaf.
    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        self.matrix_leaf(rows, cols, data, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        self.matrix_leaf(rows, cols, data, false)
    }

    fn matrix_leaf(&mut self, rows: usize, cols: usize, data: Vec<f64>, ng: bool) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(shape_err("leaf", format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len())));
        }
        Ok(self.push(rows, cols, data, Op::Leaf, ng))
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.push(1, 1, vec![x], Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].rows
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].cols
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    pub fn to_array(&self, v: Var) -> Array {
        let n = &self.nodes[v.0];
        Array::new(&[n.rows, n.cols], n.value.clone()).expect("node shape is consistent")
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ------------------------------------------------------------------
    // linear algebra

    /// `(m×k)·(k×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(shape_err("matmul", format!("({m}x{k})·({k2}x{n})")));
        }
        let mut out = vec![0.0; m * n];
        mm(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n, &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(m, n, out, Op::MatMul(a, b), ng))
    }

    /// `a·bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(shape_err("matmul_nt", format!("({m}x{k})·({n}x{k2})ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        mm_nt(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n, &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(m, n, out, Op::MatMulNt(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let src = &self.nodes[a.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let ng = self.ng(a);
        self.push(n, m, out, Op::Transpose(a), ng)
    }

    // ------------------------------------------------------------------
    // broadcasting elementwise binaries

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        let dim = |x: usize, y: usize| -> Option<usize> {
            if x == y || y == 1 {
                Some(x)
            } else if x == 1 {
                Some(y)
            } else {
                None
            }
        };
        match (dim(ra, rb), dim(ca, cb)) {
            (Some(r), Some(c)) => Ok((r, c)),
            _ => Err(shape_err(op, format!("cannot broadcast {ra}x{ca} with {rb}x{cb}"))),
        }
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (r, c) = self.broadcast(name, a, b)?;
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let out = if ra == rb && ca == cb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = Vec::with_capacity(r * c);
            for i in 0..r {
                let ai = if ra == 1 { 0 } else { i };
                let bi = if rb == 1 { 0 } else { i };
                for j in 0..c {
                    let x = av[ai * ca + if ca == 1 { 0 } else { j }];
                    let y = bv[bi * cb + if cb == 1 { 0 } else { j }];
                    out.push(f(x, y));
                }
            }
            out
        };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(r, c, out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.nodes[a.0].value.iter().map(|x| x * s).collect();
        let (r, c) = self.shape(a);
        let ng = self.ng(a);
        self.push(r, c, out, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.nodes[a.0].value.iter().map(|x| x + s).collect();
        let (r, c) = self.shape(a);
        let ng = self.ng(a);
        self.push(r, c, out, Op::AddScalar(a), ng)
    }

    /// Clamps every entry into `[lo, hi]`; the gradient passes only where
    /// the input lies strictly inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.nodes[a.0].value.iter().map(|x| x.clamp(lo, hi)).collect();
        let (r, c) = self.shape(a);
        let ng = self.ng(a);
        self.push(r, c, out, Op::Clamp { x: a, lo, hi }, ng)
    }

    // ------------------------------------------------------------------
    // pointwise nonlinearities

    fn unary(&mut self, a: Var, f: fn(f64) -> f64, op: Op) -> Var {
        let out = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let (r, c) = self.shape(a);
        let ng = self.ng(a);
        self.push(r, c, out, op, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, libm::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// Exact (erf) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    // ------------------------------------------------------------------
    // row-wise normalisations

    /// Zero-mean, unit-variance rows (`ε = 1e-5`), no affine part.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let src = &self.nodes[a.0].value;
        let mut out = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / libm::sqrt(var + LN_EPS);
            for (o, x) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (x - mean) * inv;
            }
            inv_std.push(inv);
        }
        let ng = self.ng(a);
        self.push(r, c, out, Op::Normalize { x: a, inv_std }, ng)
    }

    /// Layer normalisation with per-feature `gain` and `bias` (each `1×cols`).
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = self.normalize_rows(a);
        let s = self.mul(n, gain)?;
        self.add(s, bias)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let src = &self.nodes[a.0].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let lse = log_sum_exp(row);
            for (o, x) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        let ng = self.ng(a);
        self.push(r, c, out, Op::LogSoftmax(a), ng)
    }

    /// Row-wise softmax; masked entries are exactly zero.
    pub fn softmax_rows(&mut self, a: Var, mask: Mask) -> Var {
        let (r, c) = self.shape(a);
        let src = &self.nodes[a.0].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let vis = mask.visible(i, c);
            let row = &src[i * c..i * c + vis];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, x) in out[i * c..i * c + vis].iter_mut().zip(row) {
                *o = libm::exp(x - m);
                z += *o;
            }
            out[i * c..i * c + vis].iter_mut().for_each(|o| *o /= z);
        }
        let ng = self.ng(a);
        self.push(r, c, out, Op::Softmax(a), ng)
    }

    // ------------------------------------------------------------------
    // structural ops

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map(|&p| self.rows(p)).ok_or_else(|| shape_err("concat_cols", "no inputs".into()))?;
        if let Some(&bad) = parts.iter().find(|&&p| self.rows(p) != r) {
            return Err(shape_err("concat_cols", format!("row count {} vs {r}", self.rows(bad))));
        }
        let c: usize = parts.iter().map(|&p| self.cols(p)).sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                let pc = self.cols(p);
                out.extend_from_slice(&self.nodes[p.0].value[i * pc..(i + 1) * pc]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(r, c, out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map(|&p| self.cols(p)).ok_or_else(|| shape_err("concat_rows", "no inputs".into()))?;
        if let Some(&bad) = parts.iter().find(|&&p| self.cols(p) != c) {
            return Err(shape_err("concat_rows", format!("column count {} vs {c}", self.cols(bad))));
        }
        let r: usize = parts.iter().map(|&p| self.rows(p)).sum();
        let mut out = Vec::with_capacity(r * c);
        for &p in parts {
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(r, c, out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(shape_err("slice_cols", format!("{start}+{len} exceeds {c} columns")));
        }
        let src = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(a);
        Ok(self.push(r, len, out, Op::SliceCols { x: a, start }, ng))
    }

    /// Splits columns at the given widths; `concat_cols` of the result is the input.
    pub fn split_cols(&mut self, a: Var, widths: &[usize]) -> Result<Vec<Var>> {
        let total: usize = widths.iter().sum();
        if total != self.cols(a) {
            return Err(shape_err("split_cols", format!("widths sum to {total}, input has {}", self.cols(a))));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(widths.len());
        for &w in widths {
            out.push(self.slice_cols(a, start, w)?);
            start += w;
        }
        Ok(out)
    }

    /// Gathers rows by index (rows may repeat).
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(shape_err("select_rows", format!("row {bad} out of {r}")));
        }
        let src = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let ng = self.ng(a);
        Ok(self.push(rows.len(), c, out, Op::SelectRows { x: a, rows: rows.to_vec() }, ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let rows: Vec<usize> = (start..start + len).collect();
        self.select_rows(a, &rows)
    }

    /// Rows `0, stride, 2·stride, …` — `⌈rows/stride⌉` of them.
    pub fn subsample_rows(&mut self, a: Var, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(shape_err("subsample_rows", "stride must be ≥ 1".into()));
        }
        let rows: Vec<usize> = (0..self.rows(a)).step_by(stride).collect();
        self.select_rows(a, &rows)
    }

    /// Embedding lookup: row `idx[i]` of `table` becomes output row `i`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(shape_err("gather", format!("index {bad} out of {r} rows")));
        }
        let src = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let ng = self.ng(table);
        Ok(self.push(idx.len(), c, out, Op::Gather { table, idx: idx.to_vec() }, ng))
    }

    /// Column `idx[i]` of row `i`, as an `rows×1` column.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if idx.len() != r {
            return Err(shape_err("pick", format!("{} indices for {r} rows", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(shape_err("pick", format!("column {bad} out of {c}")));
        }
        let src = &self.nodes[a.0].value;
        let out = idx.iter().enumerate().map(|(i, &j)| src[i * c + j]).collect();
        let ng = self.ng(a);
        Ok(self.push(r, 1, out, Op::Pick { x: a, idx: idx.to_vec() }, ng))
    }

    /// Zero-pads to `total` rows.
    pub fn pad_rows(&mut self, a: Var, total: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if total < r {
            return Err(shape_err("pad_rows", format!("cannot pad {r} rows down to {total}")));
        }
        let mut out = self.nodes[a.0].value.clone();
        out.resize(total * c, 0.0);
        let ng = self.ng(a);
        Ok(self.push(total, c, out, Op::PadRows(a), ng))
    }

    // ------------------------------------------------------------------
    // convolution

    /// Depthwise 1-D convolution over time with zero "same" padding.
    ///
    /// `x` is `T×C`, `w` is `K×C` with odd `K`; each channel has its own filter.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (t, c) = self.shape(x);
        let (k, cw) = self.shape(w);
        if cw != c || k % 2 == 0 {
            return Err(shape_err("depthwise_conv1d", format!("input {t}x{c}, kernel {k}x{cw} (kernel must be odd, channels equal)")));
        }
        let half = k / 2;
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let mut out = vec![0.0; t * c];
        for ti in 0..t {
            let o = &mut out[ti * c..(ti + 1) * c];
            for kk in 0..k {
                let src = ti + kk;
                if src < half || src - half >= t {
                    continue;
                }
                let xr = &xv[(src - half) * c..(src - half + 1) * c];
                let wr = &wv[kk * c..(kk + 1) * c];
                for ((o, x), w) in o.iter_mut().zip(xr).zip(wr) {
                    *o += x * w;
                }
            }
        }
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(t, c, out, Op::DepthwiseConv { x, w }, ng))
    }

    // ------------------------------------------------------------------
    // reductions

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        let ng = self.ng(a);
        self.push(1, 1, vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(a);
        self.push(1, 1, vec![s], Op::Mean(a), ng)
    }

    /// Column means (`1×cols`).
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let src = &self.nodes[a.0].value;
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, x) in out.iter_mut().zip(&src[i * c..(i + 1) * c]) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let ng = self.ng(a);
        self.push(1, c, out, Op::MeanRows(a), ng)
    }

    /// Scalar node with a gradient w.r.t. `x` supplied by the caller.
    ///
    /// Used for losses (CTC) whose gradient is computed by their own dynamic
    /// program.
    pub fn scalar_with_grad(&mut self, x: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.nodes[x.0].value.len() {
            return Err(shape_err("scalar_with_grad", format!("gradient has {} entries, input {}", grad.len(), self.nodes[x.0].value.len())));
        }
        let ng = self.ng(x);
        Ok(self.push(1, 1, vec![value], Op::ScalarWithGrad { x, grad }, ng))
    }

    // ------------------------------------------------------------------
    // composites

    /// `x·w + b` with `w: in×out`, `b: 1×out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// Scaled dot-product attention `softmax(q·kᵀ/√d)·v`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: Mask) -> Result<Var> {
        let d = self.cols(q);
        let s = self.matmul_nt(q, k)?;
        let s = self.scale(s, 1.0 / libm::sqrt(d as f64));
        let p = self.softmax_rows(s, mask);
        self.matmul(p, v)
    }

    // ------------------------------------------------------------------
    // backward

    /// Accumulates d`target`/d`node` for every node that needs a gradient.
    ///
    /// `target` must be `1×1`. Calling `backward` again discards previous
    /// gradients.
    pub fn backward(&mut self, target: Var) -> Result<()> {
        if self.shape(target) != (1, 1) {
            return Err(shape_err("backward", format!("target must be scalar, got {:?}", self.shape(target))));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[target.0] = Some(vec![1.0]);
        for id in (0..=target.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(dy) = self.grads[id].take() else { continue };
            backprop_node(&self.nodes, &mut self.grads, id, &dy);
            self.grads[id] = Some(dy);
        }
        Ok(())
    }

}

fn ng(nodes: &[Node], v: &Var) -> bool {
    nodes[v.0].needs_grad
}

fn shape(nodes: &[Node], v: &Var) -> (usize, usize) {
    (nodes[v.0].rows, nodes[v.0].cols)
}

fn cols_of(nodes: &[Node], v: &Var) -> usize {
    nodes[v.0].cols
}

fn rows_of(nodes: &[Node], v: &Var) -> usize {
    nodes[v.0].rows
}

fn acc<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: &Var) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

/// Values of `v` expanded to the `r×c` broadcast shape.
fn broadcast_values<'n>(nodes: &'n [Node], v: &Var, r: usize, c: usize) -> alloc::borrow::Cow<'n, [f64]> {
    let (vr, vc) = shape(nodes, v);
    let src = &nodes[v.0].value;
    if vr == r && vc == c {
        return alloc::borrow::Cow::Borrowed(src);
    }
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let si = if vr == 1 { 0 } else { i };
        for j in 0..c {
            out.push(src[si * vc + if vc == 1 { 0 } else { j }]);
        }
    }
    alloc::borrow::Cow::Owned(out)
}

/// Sums `f(dy[k], k)` over broadcast dimensions back into `v`'s gradient.
fn reduce_broadcast(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: &Var, r: usize, c: usize, dy: &[f64], f: impl Fn(f64, usize) -> f64) {
    let (vr, vc) = shape(nodes, v);
    let Some(dv) = acc(nodes, grads, v) else { return };
    if vr == r && vc == c {
        for (k, d) in dv.iter_mut().enumerate() {
            *d += f(dy[k], k);
        }
        return;
    }
    for i in 0..r {
        let si = if vr == 1 { 0 } else { i };
        for j in 0..c {
            let sj = if vc == 1 { 0 } else { j };
            let k = i * c + j;
            dv[si * vc + sj] += f(dy[k], k);
        }
    }
}

fn backprop_node(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, dy: &[f64]) {
    let node = &nodes[id];
    let (r, c) = (node.rows, node.cols);
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = shape(nodes, a);
            let n = cols_of(nodes, b);
            if ng(nodes, a) {
                let bv = &nodes[b.0].value;
                let da = acc(nodes, grads, a).unwrap();
                mm_nt_acc(dy, bv, m, n, k, da);
            }
            if ng(nodes, b) {
                let av = &nodes[a.0].value;
                let db = acc(nodes, grads, b).unwrap();
                mm_tn_acc(av, dy, m, k, n, db);
            }
        }
        Op::MatMulNt(a, b) => {
            // y = a·bᵀ: da = dy·b, db = dyᵀ·a
            let (m, k) = shape(nodes, a);
            let n = rows_of(nodes, b);
            if ng(nodes, a) {
                let bv = &nodes[b.0].value;
                let da = acc(nodes, grads, a).unwrap();
                mm_acc(dy, bv, m, n, k, da);
            }
            if ng(nodes, b) {
                let av = &nodes[a.0].value;
                let db = acc(nodes, grads, b).unwrap();
                mm_tn_acc(dy, av, m, n, k, db);
            }
        }
        Op::Transpose(a) => {
            if let Some(da) = acc(nodes, grads, a) {
                // y is r×c, a is c×r
                for i in 0..r {
                    for j in 0..c {
                        da[j * r + i] += dy[i * c + j];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            reduce_broadcast(nodes, grads, a, r, c, dy, |g, _| g);
            reduce_broadcast(nodes, grads, b, r, c, dy, |g, _| g);
        }
        Op::Sub(a, b) => {
            reduce_broadcast(nodes, grads, a, r, c, dy, |g, _| g);
            reduce_broadcast(nodes, grads, b, r, c, dy, |g, _| -g);
        }
        Op::Mul(a, b) => {
            let bv = broadcast_values(nodes, b, r, c);
            let av = broadcast_values(nodes, a, r, c);
            reduce_broadcast(nodes, grads, a, r, c, dy, |g, i| g * bv[i]);
            reduce_broadcast(nodes, grads, b, r, c, dy, |g, i| g * av[i]);
        }
        Op::Div(a, b) => {
            let bv = broadcast_values(nodes, b, r, c);
            let yv = &nodes[id].value;
            reduce_broadcast(nodes, grads, a, r, c, dy, |g, i| g / bv[i]);
            reduce_broadcast(nodes, grads, b, r, c, dy, |g, i| -g * yv[i] / bv[i]);
        }
        Op::Scale(a, s) => {
            if let Some(da) = acc(nodes, grads, a) {
                da.iter_mut().zip(dy).for_each(|(d, g)| *d += g * s);
            }
        }
        Op::AddScalar(a) => {
            if let Some(da) = acc(nodes, grads, a) {
                da.iter_mut().zip(dy).for_each(|(d, g)| *d += g);
            }
        }
        Op::Clamp { x: a, lo, hi } => {
            let x = &nodes[a.0].value;
            if let Some(da) = acc(nodes, grads, a) {
                for ((d, g), x) in da.iter_mut().zip(dy).zip(x.iter()) {
                    if *lo < *x && *x < *hi {
                        *d += g;
                    }
                }
            }
        }
        Op::Tanh(a) => {
            let y = &nodes[id].value;
            if let Some(da) = acc(nodes, grads, a) {
                for ((d, g), y) in da.iter_mut().zip(dy).zip(y.iter()) {
                    *d += g * (1.0 - y * y);
                }
            }
        }
        Op::Sigmoid(a) => {
            let y = &nodes[id].value;
            if let Some(da) = acc(nodes, grads, a) {
                for ((d, g), y) in da.iter_mut().zip(dy).zip(y.iter()) {
                    *d += g * y * (1.0 - y);
                }
            }
        }
        Op::Softplus(a) => {
            let x = &nodes[a.0].value;
            if let Some(da) = acc(nodes, grads, a) {
                for ((d, g), x) in da.iter_mut().zip(dy).zip(x.iter()) {
                    *d += g * sigmoid(*x);
                }
            }
        }
        Op::Gelu(a) => {
            let x = &nodes[a.0].value;
            if let Some(da) = acc(nodes, grads, a) {
                for ((d, g), x) in da.iter_mut().zip(dy).zip(x.iter()) {
                    *d += g * gelu_grad(*x);
                }
            }
        }
        Op::Normalize { x, inv_std } => {
            let xhat = &nodes[id].value;
            if let Some(dx) = acc(nodes, grads, x) {
                for i in 0..r {
                    let g = &dy[i * c..(i + 1) * c];
                    let h = &xhat[i * c..(i + 1) * c];
                    let sg: f64 = g.iter().sum();
                    let sgh: f64 = g.iter().zip(h).map(|(a, b)| a * b).sum();
                    let n = c as f64;
                    for j in 0..c {
                        dx[i * c + j] += inv_std[i] / n * (n * g[j] - sg - h[j] * sgh);
                    }
                }
            }
        }
        Op::LogSoftmax(a) => {
            let y = &nodes[id].value;
            if let Some(da) = acc(nodes, grads, a) {
                for i in 0..r {
                    let g = &dy[i * c..(i + 1) * c];
                    let sg: f64 = g.iter().sum();
                    for j in 0..c {
                        da[i * c + j] += g[j] - libm::exp(y[i * c + j]) * sg;
                    }
                }
            }
        }
        Op::Softmax(a) => {
            let p = &nodes[id].value;
            if let Some(da) = acc(nodes, grads, a) {
                for i in 0..r {
                    let g = &dy[i * c..(i + 1) * c];
                    let pr = &p[i * c..(i + 1) * c];
                    let dot: f64 = g.iter().zip(pr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        da[i * c + j] += pr[j] * (g[j] - dot);
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let mut off = 0;
            for p in parts {
                let pc = cols_of(nodes, p);
                if let Some(dp) = acc(nodes, grads, p) {
                    for i in 0..r {
                        for j in 0..pc {
                            dp[i * pc + j] += dy[i * c + off + j];
                        }
                    }
                }
                off += pc;
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for p in parts {
                let n = nodes[p.0].value.len();
                if let Some(dp) = acc(nodes, grads, p) {
                    dp.iter_mut().zip(&dy[off..off + n]).for_each(|(d, g)| *d += g);
                }
                off += n;
            }
        }
        Op::SliceCols { x, start } => {
            let xc = cols_of(nodes, x);
            if let Some(dx) = acc(nodes, grads, x) {
                for i in 0..r {
                    for j in 0..c {
                        dx[i * xc + start + j] += dy[i * c + j];
                    }
                }
            }
        }
        Op::SelectRows { x: a, rows: idx } | Op::Gather { table: a, idx } => {
            if let Some(da) = acc(nodes, grads, a) {
                for (o, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        da[src * c + j] += dy[o * c + j];
                    }
                }
            }
        }
        Op::Pick { x, idx } => {
            let xc = cols_of(nodes, x);
            if let Some(dx) = acc(nodes, grads, x) {
                for (i, &j) in idx.iter().enumerate() {
                    dx[i * xc + j] += dy[i];
                }
            }
        }
        Op::DepthwiseConv { x, w } => {
            let k = rows_of(nodes, w);
            let half = k / 2;
            let t = r;
            if ng(nodes, x) {
                let wv = &nodes[w.0].value;
                let dx = acc(nodes, grads, x).unwrap();
                for ti in 0..t {
                    for kk in 0..k {
                        let src = ti + kk;
                        if src < half || src - half >= t {
                            continue;
                        }
                        let s = src - half;
                        for ch in 0..c {
                            dx[s * c + ch] += wv[kk * c + ch] * dy[ti * c + ch];
                        }
                    }
                }
            }
            if ng(nodes, w) {
                let xv = &nodes[x.0].value;
                let dw = acc(nodes, grads, w).unwrap();
                for ti in 0..t {
                    for kk in 0..k {
                        let src = ti + kk;
                        if src < half || src - half >= t {
                            continue;
                        }
                        let s = src - half;
                        for ch in 0..c {
                            dw[kk * c + ch] += xv[s * c + ch] * dy[ti * c + ch];
                        }
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(da) = acc(nodes, grads, a) {
                da.iter_mut().for_each(|d| *d += dy[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(da) = acc(nodes, grads, a) {
                let n = da.len() as f64;
                da.iter_mut().for_each(|d| *d += dy[0] / n);
            }
        }
        Op::MeanRows(a) => {
            let ar = rows_of(nodes, a);
            if let Some(da) = acc(nodes, grads, a) {
                for i in 0..ar {
                    for j in 0..c {
                        da[i * c + j] += dy[j] / ar as f64;
                    }
                }
            }
        }
        Op::PadRows(a) => {
            if let Some(da) = acc(nodes, grads, a) {
                let n = da.len();
                da.iter_mut().zip(&dy[..n]).for_each(|(d, g)| *d += g);
            }
        }
        Op::ScalarWithGrad { x, grad } => {
            if let Some(dx) = acc(nodes, grads, x) {
                dx.iter_mut().zip(grad).for_each(|(d, g)| *d += dy[0] * g);
            }
        }
    }
}

// ----------------------------------------------------------------------
// scalar helpers

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p(libm::exp(-x.abs()))
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2));
    let pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI);
    cdf + x * pdf
}

/// `ln Σ exp(xᵢ)`; `-∞` for an empty or all `-∞` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m.is_nan() || xs.iter().any(|x| x.is_nan()) {
        return f64::NAN;
    }
    m + libm::log(xs.iter().map(|x| libm::exp(x - m)).sum::<f64>())
}

/// `ln(eᵃ + eᵇ)`.
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + libm::log1p(libm::exp(-(a - b).abs()))
}

// ----------------------------------------------------------------------
// matrix kernels (row-major)

fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    mm_acc(a, b, m, k, n, out)
}

/// out += a(m×k)·b(k×n)
fn mm_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let o = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            for (o, y) in o.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += x * y;
            }
        }
    }
}

fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    mm_nt_acc(a, b, m, k, n, out)
}

/// out += a(m×k)·b(n×k)ᵀ
fn mm_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            out[i * n + j] += ar.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// out += a(m×k)ᵀ·b(m×n)  → k×n
fn mm_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let br = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            for (o, y) in out[p * n..(p + 1) * n].iter_mut().zip(br) {
                *o += x * y;
            }
        }
    }
}
