//! Wengert tape: operations are recorded in execution order and replayed in
//! reverse by [`Tape::backward`].
//!
//! Every op validates shapes up front and returns [`AutodiffError::Shape`] on
//! mismatch. Non-finite forward values do not abort the forward pass; the
//! first one is remembered and surfaced by [`Tape::check`] and
//! [`Tape::backward`].

use std::sync::Arc;

use super::linalg::{gemm, Layout};
use super::tensor::Tensor;
use super::warp::{Affine, WarpPlan};
use super::AutodiffError;

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Index maps from output elements to input elements under broadcasting.
#[derive(Debug)]
struct Broadcast {
    lhs: Option<Vec<usize>>,
    rhs: Option<Vec<usize>>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Div(Var, Var, Broadcast),
    Scale(Var, f64),
    Shift(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Gelu(Var),
    Abs(Var),
    Sqrt(Var),
    ClampMin(Var, f64),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Sum(Var),
    SumAxis { x: Var, outer: usize, len: usize, inner: usize },
    MaxAxis { x: Var, argmax: Vec<usize> },
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, index: Vec<usize> },
    MaskedSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    StopGradient,
    StraightThrough { soft: Var },
    BceWithLogits { logits: Var, targets: Vec<f64> },
    Cosine { a: Var, b: Var, eps: f64 },
    Warp { x: Var, plan: Arc<WarpPlan> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sigmoid(..) => "sigmoid",
            Op::Gelu(..) => "gelu",
            Op::Abs(..) => "abs",
            Op::Sqrt(..) => "sqrt",
            Op::ClampMin(..) => "clamp_min",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Transpose(..) => "transpose",
            Op::Sum(..) => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::MaxAxis { .. } => "max_axis",
            Op::Reshape(..) => "reshape",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::MaskedSoftmax(..) => "masked_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::StopGradient => "stop_gradient",
            Op::StraightThrough { .. } => "straight_through",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::Cosine { .. } => "cosine",
            Op::Warp { .. } => "affine_warp",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    retain: bool,
}

/// Recorded computation graph with its forward values.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<AutodiffError>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf (or retained node), if any flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with an all-zero fallback shaped like `like`.
    pub fn wrt(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Flat input index for every flat output index, or `None` if shapes agree.
fn broadcast_index(out: &[usize], input: &[usize]) -> Option<Vec<usize>> {
    if out == input {
        return None;
    }
    let n = out.len();
    let offset = n - input.len();
    let mut strides = vec![0usize; n];
    let mut acc = 1;
    for i in (0..input.len()).rev() {
        strides[i + offset] = if input[i] == 1 { 0 } else { acc };
        acc *= input[i];
    }
    let total: usize = out.iter().product();
    let mut index = Vec::with_capacity(total);
    let mut counter = vec![0usize; n];
    for _ in 0..total {
        index.push(counter.iter().zip(&strides).map(|(c, s)| c * s).sum());
        for d in (0..n).rev() {
            counter[d] += 1;
            if counter[d] < out[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    Some(index)
}

fn erf(x: f64) -> f64 {
    libm::erf(x)
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(t.data_mut());
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Keep the gradient of an intermediate node after [`Tape::backward`].
    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].retain = true;
    }

    /// First non-finite forward value, if one occurred.
    pub fn check(&self) -> Result<()> {
        match &self.fault {
            Some(e) => Err(e.clone()),
            None => Ok(()),
        }
    }

    /// Sequence of op names, used to compare recorded graphs.
    pub fn op_trace(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.fault.is_none() && !value.is_finite() {
            self.fault = Some(AutodiffError::NonFinite { op: op.name(), node: self.nodes.len() });
        }
        self.nodes.push(Node { value, op, requires_grad, retain: false });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(Var, Var, Broadcast) -> Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb)
            .ok_or_else(|| AutodiffError::Shape(format!("{name}: cannot broadcast {sa:?} with {sb:?}")))?;
        let ia = broadcast_index(&out_shape, &sa);
        let ib = broadcast_index(&out_shape, &sb);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let total: usize = out_shape.iter().product();
        let data: Vec<f64> = (0..total)
            .map(|o| {
                let x = va[ia.as_ref().map_or(o, |m| m[o])];
                let y = vb[ib.as_ref().map_or(o, |m| m[o])];
                f(x, y)
            })
            .collect();
        let rg = self.rg(&[a, b]);
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, make(a, b, Broadcast { lhs: ia, rhs: ib }), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(v.shape(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::Shift(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, |x| 0.5 * x * (1.0 + erf(x * INV_SQRT_2)), Op::Gelu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, |x| x.max(floor), Op::ClampMin(a, floor))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    // ---- linear algebra ----------------------------------------------------

    fn matrix_dims(&self, v: Var, op: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(AutodiffError::Shape(format!("{op}: expected a matrix, got {s:?}"))),
        }
    }

    /// `a[m x k] · b[k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(AutodiffError::Shape(format!("matmul: inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), Layout::Normal, self.value(b).data(), Layout::Normal, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a[m x k] · b[n x k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_nt")?;
        let (n, k2) = self.matrix_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(AutodiffError::Shape(format!("matmul_nt: inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), Layout::Normal, self.value(b).data(), Layout::Transposed, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulNT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.matrix_dims(a, "transpose")?;
        let value = self.value(a).transpose2();
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    // ---- reductions and reshaping -----------------------------------------

    /// Sum of all elements (left to right) as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        (outer, shape[axis], inner)
    }

    fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
        let mut s: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
        if s.is_empty() {
            s.push(1);
        }
        s
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(AutodiffError::Shape(format!("sum_axis: axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = Self::axis_split(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += x[(o * len + l) * inner + i];
                }
            }
        }
        let rg = self.rg(&[a]);
        let value = Tensor::new(&Self::reduced_shape(&shape, axis), out)?;
        Ok(self.push(value, Op::SumAxis { x: a, outer, len, inner }, rg))
    }

    /// Maximum along `axis`; ties route the gradient to the first maximum.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(AutodiffError::Shape(format!("max_axis: axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = Self::axis_split(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let src = (o * len + l) * inner + i;
                    if x[src] > out[o * inner + i] {
                        out[o * inner + i] = x[src];
                        argmax[o * inner + i] = src;
                    }
                }
            }
        }
        let rg = self.rg(&[a]);
        let value = Tensor::new(&Self::reduced_shape(&shape, axis), out)?;
        Ok(self.push(value, Op::MaxAxis { x: a, argmax }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "slice_cols")?;
        if start + len > n || len == 0 {
            return Err(AutodiffError::Shape(format!("slice_cols: [{start}, {}) of {n} columns", start + len)));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&x[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&[m, len], out)?, Op::SliceCols { x: a, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| AutodiffError::Shape("concat_cols: no inputs".into()))?;
        let (m, _) = self.matrix_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_cols")?;
            if r != m {
                return Err(AutodiffError::Shape(format!("concat_cols: row counts {m} vs {r}")));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Rows `[start, start + len)` along the first axis of a tensor viewed as `[rows, last]`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        let (rows, d) = (v.rows(), v.last_dim());
        if start + len > rows || len == 0 {
            return Err(AutodiffError::Shape(format!("slice_rows: [{start}, {}) of {rows} rows", start + len)));
        }
        let out = v.data()[start * d..(start + len) * d].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&[len, d], out)?, Op::SliceRows { x: a, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| AutodiffError::Shape("concat_rows: no inputs".into()))?;
        let d = self.value(first).last_dim();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.last_dim() != d {
                return Err(AutodiffError::Shape(format!("concat_rows: widths {d} vs {}", v.last_dim())));
            }
            rows += v.rows();
            out.extend_from_slice(v.data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(&[rows, d], out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Selects rows by index (repeats allowed); gradients scatter-add back.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let (rows, d) = (v.rows(), v.last_dim());
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(AutodiffError::Shape(format!("gather_rows: index {bad} out of {rows} rows")));
        }
        let mut out = Vec::with_capacity(index.len() * d);
        for &i in index {
            out.extend_from_slice(v.row(i));
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&[index.len(), d], out)?, Op::GatherRows { x: a, index: index.to_vec() }, rg))
    }

    // ---- neural-network primitives ----------------------------------------

    /// Softmax over the last axis. Entries with `allowed[i] == false` are
    /// excluded from the normalization and come out as exactly zero.
    pub fn masked_softmax(&mut self, a: Var, allowed: Option<&[bool]>) -> Result<Var> {
        let v = self.value(a);
        let d = v.last_dim();
        if let Some(m) = allowed {
            if m.len() != v.len() {
                return Err(AutodiffError::Shape(format!(
                    "masked_softmax: mask has {} entries for {} values",
                    m.len(),
                    v.len()
                )));
            }
        }
        let x = v.data();
        let mut out = vec![0.0; x.len()];
        for r in 0..v.rows() {
            let row = &x[r * d..(r + 1) * d];
            let ok = |j: usize| allowed.map_or(true, |m| m[r * d + j]);
            let mut max = f64::NEG_INFINITY;
            let mut any = false;
            for (j, &xv) in row.iter().enumerate() {
                if ok(j) {
                    any = true;
                    if xv > max {
                        max = xv;
                    }
                }
            }
            if !any {
                return Err(AutodiffError::EmptyRow { row: r });
            }
            let o = &mut out[r * d..(r + 1) * d];
            let mut sum = 0.0;
            for (j, &xv) in row.iter().enumerate() {
                if ok(j) {
                    let e = (xv - max).exp();
                    o[j] = e;
                    sum += e;
                }
            }
            for (j, ov) in o.iter_mut().enumerate() {
                if ok(j) {
                    *ov /= sum;
                }
            }
        }
        let shape = v.shape().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MaskedSoftmax(a), rg))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.masked_softmax(a, None)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of shape `[d]`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(AutodiffError::InvalidArgument(format!("layer_norm: eps must be positive, got {eps}")));
        }
        let v = self.value(a);
        let d = v.last_dim();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(AutodiffError::Shape(format!("layer_norm: affine params must have length {d}")));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let x = v.data();
        let rows = v.rows();
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = v.shape().to_vec();
        let rg = self.rg(&[a, gamma, beta]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::LayerNorm { x: a, gamma, beta, xhat, rstd }, rg))
    }

    /// Forward identity that blocks gradients.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::StopGradient, false)
    }

    /// Forward value of `hard` (bit-exact), gradient routed to `soft` unchanged.
    ///
    /// Equivalent to `SG(hard) + soft - SG(soft)` without the floating-point
    /// round trip of the add/subtract.
    pub fn straight_through(&mut self, hard: Var, soft: Var) -> Result<Var> {
        if self.shape(hard) != self.shape(soft) {
            return Err(AutodiffError::Shape(format!(
                "straight_through: {:?} vs {:?}",
                self.shape(hard),
                self.shape(soft)
            )));
        }
        let value = self.value(hard).clone();
        let rg = self.rg(&[soft]);
        Ok(self.push(value, Op::StraightThrough { soft }, rg))
    }

    /// Mean binary cross-entropy between `logits` and 0/1 `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let x = self.value(logits).data();
        if x.len() != targets.len() {
            return Err(AutodiffError::Shape(format!(
                "bce_with_logits: {} logits vs {} targets",
                x.len(),
                targets.len()
            )));
        }
        let n = x.len() as f64;
        let loss = x
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogits { logits, targets: targets.to_vec() }, rg))
    }

    /// `a·b / (‖a‖‖b‖ + eps)` for two equal-length vectors.
    pub fn cosine(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        if va.len() != vb.len() {
            return Err(AutodiffError::Shape(format!("cosine: lengths {} vs {}", va.len(), vb.len())));
        }
        let dot: f64 = va.iter().zip(vb).map(|(x, y)| x * y).sum();
        let na = va.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = vb.iter().map(|x| x * x).sum::<f64>().sqrt();
        let c = dot / (na * nb + eps);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(c), Op::Cosine { a, b, eps }, rg))
    }

    /// Resamples a token-major map `[H*W x C]` through `theta` (bilinear, zero padding).
    pub fn affine_warp(&mut self, a: Var, height: usize, width: usize, theta: &Affine) -> Result<Var> {
        self.affine_warp_with(a, Arc::new(WarpPlan::new(height, width, theta)))
    }

    pub fn affine_warp_with(&mut self, a: Var, plan: Arc<WarpPlan>) -> Result<Var> {
        let (rows, c) = self.matrix_dims(a, "affine_warp")?;
        if rows != plan.height * plan.width {
            return Err(AutodiffError::Shape(format!(
                "affine_warp: {rows} rows for a {}x{} grid",
                plan.height, plan.width
            )));
        }
        let out = plan.apply_token_major(self.value(a).data(), c);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&[rows, c], out)?, Op::Warp { x: a, plan }, rg))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse-mode pass from a scalar `loss`.
    ///
    /// Gradients are kept for leaves and for nodes marked with
    /// [`Tape::retain_grad`]; other intermediates are freed as the sweep
    /// passes them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check()?;
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutodiffError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) || node.retain {
                grads[i] = Some(g);
            }
        }
        let bad = grads.iter().flatten().any(|g| !g.is_finite());
        if bad {
            return Err(AutodiffError::NonFinite { op: "backward", node: loss.0 });
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, map, s) in [(*a, &bc.lhs, 1.0), (*b, &bc.rhs, sign)] {
                    if self.wants(v) {
                        let shape = self.shape(v).to_vec();
                        accumulate(&mut grads[v.0], &shape, |dst| match map {
                            None => dst.iter_mut().zip(gd).for_each(|(d, &x)| *d += s * x),
                            Some(m) => m.iter().zip(gd).for_each(|(&k, &x)| dst[k] += s * x),
                        });
                    }
                }
            }
            Op::Mul(a, b, bc) | Op::Div(a, b, bc) => {
                let is_div = matches!(node.op, Op::Div(..));
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let ia = |o: usize| bc.lhs.as_ref().map_or(o, |m| m[o]);
                let ib = |o: usize| bc.rhs.as_ref().map_or(o, |m| m[o]);
                if self.wants(*a) {
                    let shape = self.shape(*a).to_vec();
                    accumulate(&mut grads[a.0], &shape, |dst| {
                        for (o, &x) in gd.iter().enumerate() {
                            let y = vb[ib(o)];
                            dst[ia(o)] += if is_div { x / y } else { x * y };
                        }
                    });
                }
                if self.wants(*b) {
                    let shape = self.shape(*b).to_vec();
                    accumulate(&mut grads[b.0], &shape, |dst| {
                        for (o, &x) in gd.iter().enumerate() {
                            let (p, q) = (va[ia(o)], vb[ib(o)]);
                            dst[ib(o)] += if is_div { -x * p / (q * q) } else { x * p };
                        }
                    });
                }
            }
            Op::Scale(a, s) => self.elementwise(*a, grads, |_, x, _| x * s, gd, out),
            Op::Shift(a) => self.elementwise(*a, grads, |_, x, _| x, gd, out),
            Op::Exp(a) => self.elementwise(*a, grads, |_, x, y| x * y, gd, out),
            Op::Log(a) => {
                let xa = self.value(*a).data();
                self.elementwise_in(*a, grads, |i, x| x / xa[i], gd);
            }
            Op::Sigmoid(a) => self.elementwise(*a, grads, |_, x, y| x * y * (1.0 - y), gd, out),
            Op::Gelu(a) => {
                let xa = self.value(*a).data();
                self.elementwise_in(
                    *a,
                    grads,
                    |i, x| {
                        let z = xa[i];
                        let cdf = 0.5 * (1.0 + erf(z * INV_SQRT_2));
                        let pdf = INV_SQRT_2PI * (-0.5 * z * z).exp();
                        x * (cdf + z * pdf)
                    },
                    gd,
                );
            }
            Op::Abs(a) => {
                let xa = self.value(*a).data();
                self.elementwise_in(
                    *a,
                    grads,
                    |i, x| {
                        if xa[i] > 0.0 {
                            x
                        } else if xa[i] < 0.0 {
                            -x
                        } else {
                            0.0
                        }
                    },
                    gd,
                );
            }
            Op::Sqrt(a) => self.elementwise(*a, grads, |_, x, y| x * 0.5 / y, gd, out),
            Op::ClampMin(a, floor) => {
                let xa = self.value(*a).data();
                self.elementwise_in(*a, grads, |i, x| if xa[i] >= *floor { x } else { 0.0 }, gd);
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.wants(*a) {
                    let bv = self.value(*b).data();
                    accumulate(&mut grads[a.0], &[m, k], |dst| {
                        gemm(m, n, k, gd, Layout::Normal, bv, Layout::Transposed, dst, true)
                    });
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    accumulate(&mut grads[b.0], &[k, n], |dst| {
                        gemm(k, m, n, av, Layout::Transposed, gd, Layout::Normal, dst, true)
                    });
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if self.wants(*a) {
                    let bv = self.value(*b).data();
                    accumulate(&mut grads[a.0], &[m, k], |dst| {
                        gemm(m, n, k, gd, Layout::Normal, bv, Layout::Normal, dst, true)
                    });
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    accumulate(&mut grads[b.0], &[n, k], |dst| {
                        gemm(n, m, k, gd, Layout::Transposed, av, Layout::Normal, dst, true)
                    });
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    let gt = g.transpose2();
                    let shape = self.shape(*a).to_vec();
                    accumulate(&mut grads[a.0], &shape, |dst| {
                        dst.iter_mut().zip(gt.data()).for_each(|(d, &x)| *d += x)
                    });
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    let shape = self.shape(*a).to_vec();
                    accumulate(&mut grads[a.0], &shape, |dst| dst.iter_mut().for_each(|d| *d += gd[0]));
                }
            }
            Op::SumAxis { x, outer, len, inner } => {
                if self.wants(*x) {
                    let shape = self.shape(*x).to_vec();
                    accumulate(&mut grads[x.0], &shape, |dst| {
                        for o in 0..*outer {
                            for l in 0..*len {
                                for i in 0..*inner {
                                    dst[(o * len + l) * inner + i] += gd[o * inner + i];
                                }
                            }
                        }
                    });
                }
            }
            Op::MaxAxis { x, argmax } => {
                if self.wants(*x) {
                    let shape = self.shape(*x).to_vec();
                    accumulate(&mut grads[x.0], &shape, |dst| {
                        argmax.iter().zip(gd).for_each(|(&k, &v)| dst[k] += v)
                    });
                }
            }
            Op::Reshape(a) => self.elementwise(*a, grads, |_, x, _| x, gd, out),
            Op::StraightThrough { soft } => self.elementwise(*soft, grads, |_, x, _| x, gd, out),
            Op::SliceCols { x, start } => {
                if self.wants(*x) {
                    let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let len = g.shape()[1];
                    accumulate(&mut grads[x.0], &[m, n], |dst| {
                        for i in 0..m {
                            for j in 0..len {
                                dst[i * n + start + j] += gd[i * len + j];
                            }
                        }
                    });
                }
            }
            Op::ConcatCols(parts) => {
                let n = g.shape()[1];
                let m = g.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.wants(p) {
                        accumulate(&mut grads[p.0], &[m, w], |dst| {
                            for i in 0..m {
                                for j in 0..w {
                                    dst[i * w + j] += gd[i * n + offset + j];
                                }
                            }
                        });
                    }
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                if self.wants(*x) {
                    let shape = self.shape(*x).to_vec();
                    let d = g.shape()[1];
                    accumulate(&mut grads[x.0], &shape, |dst| {
                        dst[start * d..start * d + gd.len()].iter_mut().zip(gd).for_each(|(a, &b)| *a += b)
                    });
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.wants(p) {
                        let shape = self.shape(p).to_vec();
                        accumulate(&mut grads[p.0], &shape, |dst| {
                            dst.iter_mut().zip(&gd[offset..offset + len]).for_each(|(a, &b)| *a += b)
                        });
                    }
                    offset += len;
                }
            }
            Op::GatherRows { x, index } => {
                if self.wants(*x) {
                    let shape = self.shape(*x).to_vec();
                    let d = g.shape()[1];
                    accumulate(&mut grads[x.0], &shape, |dst| {
                        for (r, &src) in index.iter().enumerate() {
                            for j in 0..d {
                                dst[src * d + j] += gd[r * d + j];
                            }
                        }
                    });
                }
            }
            Op::MaskedSoftmax(a) => {
                if self.wants(*a) {
                    let d = node.value.last_dim();
                    let shape = self.shape(*a).to_vec();
                    accumulate(&mut grads[a.0], &shape, |dst| {
                        for r in 0..node.value.rows() {
                            let y = &out[r * d..(r + 1) * d];
                            let dy = &gd[r * d..(r + 1) * d];
                            let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                            for j in 0..d {
                                dst[r * d + j] += y[j] * (dy[j] - dot);
                            }
                        }
                    });
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = node.value.last_dim();
                let rows = node.value.rows();
                if self.wants(*x) {
                    let gv = self.value(*gamma).data();
                    let shape = self.shape(*x).to_vec();
                    accumulate(&mut grads[x.0], &shape, |dst| {
                        for r in 0..rows {
                            let dy = &gd[r * d..(r + 1) * d];
                            let h = &xhat[r * d..(r + 1) * d];
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for j in 0..d {
                                let dh = dy[j] * gv[j];
                                m1 += dh;
                                m2 += dh * h[j];
                            }
                            m1 /= d as f64;
                            m2 /= d as f64;
                            for j in 0..d {
                                dst[r * d + j] += rstd[r] * (dy[j] * gv[j] - m1 - h[j] * m2);
                            }
                        }
                    });
                }
                if self.wants(*gamma) {
                    accumulate(&mut grads[gamma.0], &[d], |dst| {
                        for r in 0..rows {
                            for j in 0..d {
                                dst[j] += gd[r * d + j] * xhat[r * d + j];
                            }
                        }
                    });
                }
                if self.wants(*beta) {
                    accumulate(&mut grads[beta.0], &[d], |dst| {
                        for r in 0..rows {
                            for j in 0..d {
                                dst[j] += gd[r * d + j];
                            }
                        }
                    });
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let x = self.value(*logits).data();
                let n = x.len() as f64;
                let s = gd[0] / n;
                self.elementwise_in(*logits, grads, |i, _| s * (sigmoid(x[i]) - targets[i]), x);
            }
            Op::Cosine { a, b, eps } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let dot: f64 = va.iter().zip(vb).map(|(x, y)| x * y).sum();
                let na = va.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = vb.iter().map(|x| x * x).sum::<f64>().sqrt();
                let den = na * nb + eps;
                let up = gd[0];
                for (v, w, nv, nw) in [(*a, vb, na, nb), (*b, va, nb, na)] {
                    if self.wants(v) {
                        let own = self.value(v).data();
                        let shape = self.shape(v).to_vec();
                        accumulate(&mut grads[v.0], &shape, |dst| {
                            for i in 0..own.len() {
                                let unit = if nv > 0.0 { own[i] / nv } else { 0.0 };
                                dst[i] += up * (w[i] / den - dot / (den * den) * nw * unit);
                            }
                        });
                    }
                }
            }
            Op::Warp { x, plan } => {
                if self.wants(*x) {
                    let c = g.shape()[1];
                    let shape = self.shape(*x).to_vec();
                    accumulate(&mut grads[x.0], &shape, |dst| {
                        for (o, taps) in plan.taps.iter().enumerate() {
                            for &(s, w) in taps {
                                for ch in 0..c {
                                    dst[s * c + ch] += w * gd[o * c + ch];
                                }
                            }
                        }
                    });
                }
            }
        }
    }

    /// Same-shape unary backward using the node's output `y`.
    fn elementwise(
        &self,
        a: Var,
        grads: &mut [Option<Tensor>],
        f: impl Fn(usize, f64, f64) -> f64,
        gd: &[f64],
        out: &[f64],
    ) {
        if !self.wants(a) {
            return;
        }
        let shape = self.shape(a).to_vec();
        accumulate(&mut grads[a.0], &shape, |dst| {
            for i in 0..dst.len() {
                dst[i] += f(i, gd[i], out[i]);
            }
        });
    }

    /// Same-shape unary backward indexed by element position.
    fn elementwise_in(&self, a: Var, grads: &mut [Option<Tensor>], f: impl Fn(usize, f64) -> f64, gd: &[f64]) {
        if !self.wants(a) {
            return;
        }
        let shape = self.shape(a).to_vec();
        accumulate(&mut grads[a.0], &shape, |dst| {
            for i in 0..dst.len() {
                dst[i] += f(i, gd[i]);
            }
        });
    }
}
