//! Dense `f64` tensors and a define-by-run reverse-mode tape.
//!
//! A [`Tape`] is rebuilt for every forward pass. Leaves are copied in from
//! [`Tensor`]s, every kernel appends one node, and [`Tape::backward`] walks
//! the nodes in reverse to produce a [`Gradients`] table. The tape itself is
//! never mutated by `backward`, so the same tape can be differentiated twice.
//!
//! Binary elementwise kernels broadcast a smaller operand whose shape is a
//! suffix of the larger one (scalars and row vectors), which is all the
//! models in this crate need.

use crate::error::{Error, Result};

/// Owned dense tensor, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "tensor shape {shape:?} must have positive dims"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; numel]).expect("positive shape")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![1], vec![value]).expect("scalar")
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).expect("nonempty vector")
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Softplus(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var, Vec<f64>),
    Concat(Vec<Var>, usize),
    Slice { src: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    Reshape(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Detach,
}

#[derive(Clone, Debug)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Operation recorder. Nodes are appended in execution order, so parents
/// always precede children.
#[derive(Default, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one [`Tape::backward`] call.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// d(loss)/d(var). Nodes the loss does not depend on get zeros.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Writes the gradient of `v` into `t.grad`.
    pub fn assign(&self, v: Var, t: &mut Tensor) {
        t.grad = Some(self.get(v).into_data());
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Result shape when `small` broadcasts into `big` as a suffix.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let strip = |s: &[usize]| -> Vec<usize> {
        let first = s.iter().position(|&d| d != 1).unwrap_or(s.len());
        s[first..].to_vec()
    };
    let (big, small) = if numel(a) >= numel(b) { (a, b) } else { (b, a) };
    let small_core = strip(small);
    if small_core.len() <= big.len() && big[big.len() - small_core.len()..] == small_core[..] {
        Ok(big.to_vec())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// c[m×n] += a[m×k] · b[k×n]
pub(crate) fn mm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

/// c[m×n] += a[m×k] · b[n×k]ᵀ
pub(crate) fn mm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// c[m×n] += a[k×m]ᵀ · b[k×n]
pub(crate) fn mm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += api * bj;
            }
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let g = slot.get_or_insert_with(|| vec![0.0; len]);
    f(g);
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

    fn push(
        &mut self,
        op_name: &'static str,
        value: Vec<f64>,
        shape: Vec<usize>,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        check_finite(op_name, &value)?;
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a tensor as a leaf, honouring its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.push(
            "leaf",
            t.data.clone(),
            t.shape.clone(),
            Op::Leaf,
            t.requires_grad,
        )
    }

    pub fn param(&mut self, t: &Tensor, requires_grad: bool) -> Result<Var> {
        self.push(
            "leaf",
            t.data.clone(),
            t.shape.clone(),
            Op::Leaf,
            requires_grad,
        )
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        self.push("constant", t.data, t.shape, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Result<Var> {
        self.constant(vec![1], vec![value])
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::ShapeMismatch {
                op,
                lhs: s.to_vec(),
                rhs: vec![0, 0],
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        mm_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", out, vec![m, n], Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul_nt", a)?;
        let (n, k2) = self.dims2("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let mut out = vec![0.0; m * n];
        mm_nt_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul_nt", out, vec![m, n], Op::MatMulNt(a, b), rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let shape = broadcast_shape(name, self.shape(a), self.shape(b))?;
        let n = numel(&shape);
        let (av, bv) = (self.value(a), self.value(b));
        let (la, lb) = (av.len(), bv.len());
        let out: Vec<f64> = if la == n && lb == n {
            av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect()
        } else {
            (0..n).map(|i| f(av[i % la], bv[i % lb])).collect()
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(name, out, shape, op, rg)
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

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, f64::max, Op::Maximum(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, f64::min, Op::Minimum(a, b))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out: Vec<f64> = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(name, out, shape, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    /// `ln(1 + eˣ)`, computed without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, Op::Softplus(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, f64::abs, Op::Abs(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Stop-gradient: same value, no backward flow.
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).to_vec();
        let shape = self.shape(a).to_vec();
        self.push("detach", value, shape, Op::Detach, false)
    }

    fn last_axis(&self, v: Var) -> (usize, usize) {
        let shape = self.shape(v);
        let cols = *shape.last().unwrap();
        (numel(shape) / cols, cols)
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.last_axis(a);
        let x = self.value(a);
        check_finite("softmax", x)?;
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let xr = &x[r * cols..(r + 1) * cols];
            let m = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[r * cols..(r + 1) * cols];
            let mut s = 0.0;
            for (oi, xi) in o.iter_mut().zip(xr) {
                *oi = (xi - m).exp();
                s += *oi;
            }
            o.iter_mut().for_each(|v| *v /= s);
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push("softmax", out, shape, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.last_axis(a);
        let x = self.value(a);
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let xr = &x[r * cols..(r + 1) * cols];
            let m = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + xr.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for (o, xi) in out[r * cols..(r + 1) * cols].iter_mut().zip(xr) {
                *o = xi - lse;
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push("log_softmax", out, shape, Op::LogSoftmax(a), rg)
    }

    /// Normalizes each row over the last axis to zero mean, unit variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.last_axis(a);
        let x = self.value(a);
        let mut out = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let xr = &x[r * cols..(r + 1) * cols];
            let mean = xr.iter().sum::<f64>() / cols as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, xi) in out[r * cols..(r + 1) * cols].iter_mut().zip(xr) {
                *o = (xi - mean) * is;
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push("layer_norm", out, shape, Op::LayerNorm(a, inv_std), rg)
    }

    fn axis_split(shape: &[usize], axis: usize) -> (usize, usize) {
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        (outer, inner)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!(
                "concat: axis {axis} out of range for {base:?}"
            )));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, inner) = Self::axis_split(&base, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                out.extend_from_slice(&self.value(*p)[o * len..(o + 1) * len]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push("concat", out, shape, Op::Concat(parts.to_vec(), axis), rg)
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let src_shape = self.shape(a).to_vec();
        if axis >= src_shape.len() || start >= end || end > src_shape[axis] {
            return Err(Error::invalid(format!(
                "slice: range {start}..{end} on axis {axis} invalid for {src_shape:?}"
            )));
        }
        let (outer, inner) = Self::axis_split(&src_shape, axis);
        let src_len = src_shape[axis] * inner;
        let x = self.value(a);
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[o * src_len + start * inner..o * src_len + end * inner]);
        }
        let mut shape = src_shape;
        shape[axis] = end - start;
        let rg = self.rg(a);
        self.push(
            "slice",
            out,
            shape,
            Op::Slice {
                src: a,
                axis,
                start,
            },
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push("sum", vec![s], vec![1], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let s = x.iter().sum::<f64>() / x.len() as f64;
        let rg = self.rg(a);
        self.push("mean", vec![s], vec![1], Op::Mean(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", a)?;
        let x = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let rg = self.rg(a);
        self.push("transpose", out, vec![c, r], Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != numel(self.shape(a)) || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(a);
        self.push("reshape", value, shape, Op::Reshape(a), rg)
    }

    /// Gathers rows of a `V×d` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2("embedding", table)?;
        if ids.is_empty() {
            return Err(Error::Empty("embedding ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::TokenOutOfVocab { id: bad, vocab: v });
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        self.push(
            "embedding",
            out,
            vec![ids.len(), d],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if numel(shape) != 1 {
            return Err(Error::NotScalar(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.shape.clone()).collect(),
        })
    }

    /// Reduces a full-size gradient onto a (possibly broadcast) operand.
    fn reduce_into(
        &self,
        slot: &mut Option<Vec<f64>>,
        target: Var,
        full: impl Fn(usize) -> f64,
        n: usize,
    ) {
        let len = self.value(target).len();
        accumulate(slot, len, |acc| {
            if len == n {
                for (i, a) in acc.iter_mut().enumerate() {
                    *a += full(i);
                }
            } else {
                for i in 0..n {
                    acc[i % len] += full(i);
                }
            }
        });
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let n = g.len();
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let nn = self.shape(*b)[1];
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], m * k, |ga| {
                        mm_nt_acc(g, self.value(*b), ga, m, nn, k)
                    });
                }
                if self.rg(*b) {
                    accumulate(&mut grads[b.0], k * nn, |gb| {
                        mm_tn_acc(self.value(*a), g, gb, m, k, nn)
                    });
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let nn = self.shape(*b)[0];
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], m * k, |ga| {
                        mm_acc(g, self.value(*b), ga, m, nn, k)
                    });
                }
                if self.rg(*b) {
                    accumulate(&mut grads[b.0], nn * k, |gb| {
                        mm_tn_acc(g, self.value(*a), gb, m, nn, k)
                    });
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if self.rg(*a) {
                    self.reduce_into(&mut grads[a.0], *a, |i| g[i], n);
                }
                if self.rg(*b) {
                    self.reduce_into(&mut grads[b.0], *b, |i| sign * g[i], n);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (la, lb) = (av.len(), bv.len());
                if self.rg(*a) {
                    self.reduce_into(&mut grads[a.0], *a, |i| g[i] * bv[i % lb], n);
                }
                if self.rg(*b) {
                    self.reduce_into(&mut grads[b.0], *b, |i| g[i] * av[i % la], n);
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (la, lb) = (av.len(), bv.len());
                if self.rg(*a) {
                    self.reduce_into(&mut grads[a.0], *a, |i| g[i] / bv[i % lb], n);
                }
                if self.rg(*b) {
                    self.reduce_into(
                        &mut grads[b.0],
                        *b,
                        |i| {
                            let d = bv[i % lb];
                            -g[i] * av[i % la] / (d * d)
                        },
                        n,
                    );
                }
            }
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let is_max = matches!(node.op, Op::Maximum(..));
                let (av, bv) = (self.value(*a), self.value(*b));
                let (la, lb) = (av.len(), bv.len());
                // Ties route the gradient to the left operand.
                let pick_a = |i: usize| {
                    let (x, z) = (av[i % la], bv[i % lb]);
                    if is_max {
                        x >= z
                    } else {
                        x <= z
                    }
                };
                if self.rg(*a) {
                    self.reduce_into(
                        &mut grads[a.0],
                        *a,
                        |i| if pick_a(i) { g[i] } else { 0.0 },
                        n,
                    );
                }
                if self.rg(*b) {
                    self.reduce_into(
                        &mut grads[b.0],
                        *b,
                        |i| if pick_a(i) { 0.0 } else { g[i] },
                        n,
                    );
                }
            }
            Op::Scale(a, c) => {
                accumulate(&mut grads[a.0], n, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, gi)| *x += c * gi)
                });
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                accumulate(&mut grads[a.0], n, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi)
                });
            }
            Op::Sigmoid(a) => {
                accumulate(&mut grads[a.0], n, |ga| {
                    for i in 0..n {
                        ga[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                accumulate(&mut grads[a.0], n, |ga| {
                    for i in 0..n {
                        ga[i] += g[i] * sigmoid(x[i]);
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                accumulate(&mut grads[a.0], n, |ga| {
                    for i in 0..n {
                        if x[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Exp(a) => {
                accumulate(&mut grads[a.0], n, |ga| {
                    for i in 0..n {
                        ga[i] += g[i] * y[i];
                    }
                });
            }
            Op::Log(a) => {
                let x = self.value(*a);
                accumulate(&mut grads[a.0], n, |ga| {
                    for i in 0..n {
                        ga[i] += g[i] / x[i];
                    }
                });
            }
            Op::Abs(a) => {
                let x = self.value(*a);
                accumulate(&mut grads[a.0], n, |ga| {
                    for i in 0..n {
                        ga[i] += g[i] * x[i].signum() * f64::from(x[i] != 0.0);
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                accumulate(&mut grads[a.0], n, |ga| {
                    for i in 0..n {
                        if x[i] > *lo && x[i] < *hi {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let (rows, cols) = self.last_axis(*a);
                accumulate(&mut grads[a.0], n, |ga| {
                    for r in 0..rows {
                        let s = r * cols..(r + 1) * cols;
                        let dot: f64 = g[s.clone()]
                            .iter()
                            .zip(&y[s.clone()])
                            .map(|(p, q)| p * q)
                            .sum();
                        for i in s {
                            ga[i] += y[i] * (g[i] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let (rows, cols) = self.last_axis(*a);
                accumulate(&mut grads[a.0], n, |ga| {
                    for r in 0..rows {
                        let s = r * cols..(r + 1) * cols;
                        let gsum: f64 = g[s.clone()].iter().sum();
                        for i in s {
                            ga[i] += g[i] - y[i].exp() * gsum;
                        }
                    }
                });
            }
            Op::LayerNorm(a, inv_std) => {
                let (rows, cols) = self.last_axis(*a);
                let c = cols as f64;
                accumulate(&mut grads[a.0], n, |ga| {
                    for r in 0..rows {
                        let s = r * cols..(r + 1) * cols;
                        let gm = g[s.clone()].iter().sum::<f64>() / c;
                        let gy = g[s.clone()]
                            .iter()
                            .zip(&y[s.clone()])
                            .map(|(p, q)| p * q)
                            .sum::<f64>()
                            / c;
                        for i in s {
                            ga[i] += inv_std[r] * (g[i] - gm - y[i] * gy);
                        }
                    }
                });
            }
            Op::Concat(parts, axis) => {
                let (outer, inner) = Self::axis_split(&node.shape, *axis);
                let out_len = node.shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis] * inner;
                    if self.rg(*p) {
                        accumulate(&mut grads[p.0], outer * len, |gp| {
                            for o in 0..outer {
                                let src = &g[o * out_len + offset..o * out_len + offset + len];
                                gp[o * len..(o + 1) * len]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(x, s)| *x += s);
                            }
                        });
                    }
                    offset += len;
                }
            }
            Op::Slice { src, axis, start } => {
                let src_shape = self.shape(*src);
                let (outer, inner) = Self::axis_split(src_shape, *axis);
                let src_len = src_shape[*axis] * inner;
                let len = node.shape[*axis] * inner;
                accumulate(&mut grads[src.0], outer * src_len, |gs| {
                    for o in 0..outer {
                        let dst =
                            &mut gs[o * src_len + start * inner..o * src_len + start * inner + len];
                        dst.iter_mut()
                            .zip(&g[o * len..(o + 1) * len])
                            .for_each(|(x, s)| *x += s);
                    }
                });
            }
            Op::Sum(a) => {
                let len = self.value(*a).len();
                accumulate(&mut grads[a.0], len, |ga| {
                    ga.iter_mut().for_each(|x| *x += g[0])
                });
            }
            Op::Mean(a) => {
                let len = self.value(*a).len();
                let gi = g[0] / len as f64;
                accumulate(&mut grads[a.0], len, |ga| {
                    ga.iter_mut().for_each(|x| *x += gi)
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                accumulate(&mut grads[a.0], n, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let len = self.value(*table).len();
                accumulate(&mut grads[table.0], len, |gt| {
                    for (row, &id) in ids.iter().enumerate() {
                        gt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[row * d..(row + 1) * d])
                            .for_each(|(x, s)| *x += s);
                    }
                });
            }
        }
    }
}
