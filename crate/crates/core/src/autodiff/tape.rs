//! Define-by-run tape. Every operation appends one node; `backward` replays
//! the nodes in reverse insertion order, which is a valid topological order.

use super::gemm::{gemm, MatRef};
use super::{AutodiffError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Square,
    Sqrt,
    Exp,
    Sin,
    Cos,
    Tanh,
    Sigmoid,
    Relu,
    Silu,
    Gelu,
    Neg,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Square => "square",
            Unary::Sqrt => "sqrt",
            Unary::Exp => "exp",
            Unary::Sin => "sin",
            Unary::Cos => "cos",
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Relu => "relu",
            Unary::Silu => "silu",
            Unary::Gelu => "gelu",
            Unary::Neg => "neg",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Exp => x.exp(),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Unary::Silu => x * sigmoid(x),
            Unary::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * x * (1.0 + t)
            }
            Unary::Neg => -x,
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Square => 2.0 * x,
            Unary::Sqrt => 0.5 / y,
            Unary::Exp => y,
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Silu => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Unary::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            Unary::Neg => -1.0,
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

/// How the second operand of an elementwise op maps onto the first.
#[derive(Clone, Copy, Debug)]
enum Broadcast {
    Same,
    /// rhs repeats over the leading dims of lhs
    Rhs,
    /// lhs repeats over the leading dims of rhs
    Lhs,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var, Broadcast),
    Unary(Unary, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    Sum(Var),
    Mean(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { src: Var, axis: usize, start: usize },
    Reshape(Var),
    Transpose(Var),
    GatherRows { src: Var, index: Vec<usize> },
    ScatterAddRows { src: Var, index: Vec<usize> },
    CausalConv { x: Var, w: Var, b: Var, dilation: usize },
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode differentiation tape confined to one thread.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    nan_check: bool,
    first_non_finite: Option<(usize, &'static str)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits `shape` around `axis` into (outer, axis_len, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn grad_slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
    let len = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            nan_check: cfg!(debug_assertions),
            first_non_finite: None,
        }
    }

    /// Enables or disables the non-finite value check on every recorded op.
    pub fn set_nan_check(&mut self, on: bool) {
        self.nan_check = on;
    }

    /// First op (tape index, op name) that produced a NaN or infinity, when checking is on.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.first_non_finite
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool, name: &'static str) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        if self.nan_check && self.first_non_finite.is_none() && value.iter().any(|v| !v.is_finite()) {
            log::warn!("non-finite value produced by `{name}` at tape index {}", self.nodes.len());
            self.first_non_finite = Some((self.nodes.len(), name));
        }
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records `t` as a leaf; it participates in gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad(), "leaf")
    }

    /// Records a trainable leaf regardless of the tensor's own flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true, "param")
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var, AutodiffError> {
        if numel(shape) != data.len() {
            return Err(AutodiffError::Invalid {
                op: "constant",
                msg: format!("shape {shape:?} holds {} values, got {}", numel(shape), data.len()),
            });
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false, "constant"))
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.push(shape.to_vec(), vec![0.0; numel(shape)], Op::Leaf, false, "zeros")
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("tape node shape is consistent")
    }

    /// Accumulated gradient of a leaf after `backward`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    /// Gradient of a leaf, or zeros if it received none.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        self.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; self.node(v).value.len()])
    }

    pub fn zero_grad(&mut self) {
        for g in self.leaf_grads.iter_mut() {
            *g = None;
        }
    }

    // ------------------------------------------------------------------
    // elementwise

    fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast, AutodiffError> {
        if a == b {
            Ok(Broadcast::Same)
        } else if b.len() < a.len() && a.ends_with(b) {
            Ok(Broadcast::Rhs)
        } else if a.len() < b.len() && b.ends_with(a) {
            Ok(Broadcast::Lhs)
        } else {
            Err(AutodiffError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            })
        }
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let (na, nb) = (self.node(a), self.node(b));
        let bc = Self::broadcast(name, &na.shape, &nb.shape)?;
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let (shape, value) = match bc {
            Broadcast::Same => (
                na.shape.clone(),
                na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Broadcast::Rhs => {
                let m = nb.value.len();
                (
                    na.shape.clone(),
                    na.value.iter().enumerate().map(|(i, &x)| f(x, nb.value[i % m])).collect(),
                )
            }
            Broadcast::Lhs => {
                let m = na.value.len();
                (
                    nb.shape.clone(),
                    nb.value.iter().enumerate().map(|(i, &y)| f(na.value[i % m], y)).collect(),
                )
            }
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, value, Op::Binary(kind, a, b, bc), rg, name))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let n = self.node(a);
        let value = n.value.iter().map(|&x| kind.apply(x)).collect();
        let shape = n.shape.clone();
        let rg = self.rg(a);
        self.push(shape, value, Op::Unary(kind, a), rg, kind.name())
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Unary::Sqrt, a)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }
    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(Unary::Sin, a)
    }
    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(Unary::Cos, a)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(Unary::Silu, a)
    }
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(Unary::Gelu, a)
    }
    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Neg, a)
    }

    /// `s * a` for a constant real `s`.
    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let n = self.node(a);
        let value = n.value.iter().map(|x| x * s).collect();
        let shape = n.shape.clone();
        let rg = self.rg(a);
        self.push(shape, value, Op::Scale(a, s), rg, "scale")
    }

    /// `a + s` for a constant real `s`.
    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let n = self.node(a);
        let value = n.value.iter().map(|x| x + s).collect();
        let shape = n.shape.clone();
        let rg = self.rg(a);
        self.push(shape, value, Op::AddScalar(a), rg, "add_scalar")
    }

    // ------------------------------------------------------------------
    // linear algebra

    fn matrix_dims(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize, usize), AutodiffError> {
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        Ok((sa[0], sa[1], sb[1]))
    }

    /// `[m,k] @ [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, k, n) = self.matrix_dims("matmul", a, b)?;
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            MatRef::row_major(&self.node(a).value, m, k),
            MatRef::row_major(&self.node(b).value, k, n),
            0.0,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg, "matmul"))
    }

    /// Fused `x @ w + bias` with `x: [m,k]`, `w: [k,n]`, `bias: [n]`.
    pub fn affine(&mut self, x: Var, w: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (m, k, n) = self.matrix_dims("affine", x, w)?;
        if self.node(bias).shape != [n] {
            return Err(AutodiffError::ShapeMismatch {
                op: "affine(bias)",
                lhs: vec![m, n],
                rhs: self.node(bias).shape.clone(),
            });
        }
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(&self.node(bias).value);
        }
        gemm(
            1.0,
            MatRef::row_major(&self.node(x).value, m, k),
            MatRef::row_major(&self.node(w).value, k, n),
            1.0,
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(bias);
        Ok(self.push(vec![m, n], out, Op::Affine(x, w, bias), rg, "affine"))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let n = self.node(a);
        if n.shape.len() != 2 {
            return Err(AutodiffError::Invalid {
                op: "transpose",
                msg: format!("expected a matrix, got shape {:?}", n.shape),
            });
        }
        let (r, c) = (n.shape[0], n.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = n.value[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), rg, "transpose"))
    }

    // ------------------------------------------------------------------
    // reductions

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.node(a).value.iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.node(a);
        let s: f64 = n.value.iter().sum::<f64>() / n.value.len() as f64;
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Mean(a), rg, "mean")
    }

    // ------------------------------------------------------------------
    // structural

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let first = parts.first().ok_or(AutodiffError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.node(*first).shape.clone();
        if axis >= base.len() {
            return Err(AutodiffError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range for shape {base:?}"),
            });
        }
        let mut total = 0;
        for p in parts {
            let s = &self.node(*p).shape;
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.clone(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let n = self.node(*p);
                let chunk = n.shape[axis] * inner;
                out.extend_from_slice(&n.value[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
            "concat",
        ))
    }

    /// Takes `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let n = self.node(a);
        if axis >= n.shape.len() || start > end || end > n.shape[axis] {
            return Err(AutodiffError::Invalid {
                op: "slice",
                msg: format!("range {start}..{end} on axis {axis} invalid for shape {:?}", n.shape),
            });
        }
        let (outer, len, inner) = split_axis(&n.shape, axis);
        let width = end - start;
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&n.value[base + start * inner..base + end * inner]);
        }
        let mut shape = n.shape.clone();
        shape[axis] = width;
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Slice { src: a, axis, start }, rg, "slice"))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let n = self.node(a);
        if numel(shape) != n.value.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: n.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let value = n.value.clone();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), rg, "reshape"))
    }

    /// Selects rows (first-axis slices) by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var, AutodiffError> {
        let n = self.node(a);
        if n.shape.is_empty() {
            return Err(AutodiffError::Invalid {
                op: "gather_rows",
                msg: "scalar source".into(),
            });
        }
        let rows = n.shape[0];
        let width = n.value.len() / rows.max(1);
        let mut out = Vec::with_capacity(index.len() * width);
        for &r in index {
            if r >= rows {
                return Err(AutodiffError::Invalid {
                    op: "gather_rows",
                    msg: format!("row {r} out of range for shape {:?}", n.shape),
                });
            }
            out.extend_from_slice(&n.value[r * width..(r + 1) * width]);
        }
        let mut shape = n.shape.clone();
        shape[0] = index.len();
        let rg = self.rg(a);
        Ok(self.push(
            shape,
            out,
            Op::GatherRows {
                src: a,
                index: index.to_vec(),
            },
            rg,
            "gather_rows",
        ))
    }

    /// `out[index[r]] += a[r]` into `rows` zero-initialised rows, summed in increasing `r`.
    pub fn scatter_add_rows(&mut self, a: Var, index: &[usize], rows: usize) -> Result<Var, AutodiffError> {
        let n = self.node(a);
        if n.shape.is_empty() || n.shape[0] != index.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "scatter_add_rows",
                lhs: n.shape.clone(),
                rhs: vec![index.len()],
            });
        }
        let width = n.value.len() / index.len().max(1);
        let mut out = vec![0.0; rows * width];
        for (r, &dst) in index.iter().enumerate() {
            if dst >= rows {
                return Err(AutodiffError::Invalid {
                    op: "scatter_add_rows",
                    msg: format!("target row {dst} out of range ({rows} rows)"),
                });
            }
            add_into(&mut out[dst * width..(dst + 1) * width], &n.value[r * width..(r + 1) * width]);
        }
        let mut shape = n.shape.clone();
        shape[0] = rows;
        let rg = self.rg(a);
        Ok(self.push(
            shape,
            out,
            Op::ScatterAddRows {
                src: a,
                index: index.to_vec(),
            },
            rg,
            "scatter_add_rows",
        ))
    }

    /// Batched 1-D causal dilated convolution with left zero padding.
    ///
    /// `x: [M, T, I]`, `w: [O, K, I]`, `b: [O]` → `[M, T, O]` with
    /// `out[m,t,o] = b[o] + Σ_j Σ_i w[o,j,i] · x[m, t - d·j, i]`.
    pub fn causal_conv1d(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var, AutodiffError> {
        let (sx, sw, sb) = (&self.node(x).shape, &self.node(w).shape, &self.node(b).shape);
        if sx.len() != 3 || sw.len() != 3 || sx[2] != sw[2] || sb.as_slice() != [sw[0]] {
            return Err(AutodiffError::ShapeMismatch {
                op: "causal_conv1d",
                lhs: sx.clone(),
                rhs: sw.clone(),
            });
        }
        if dilation == 0 {
            return Err(AutodiffError::Invalid {
                op: "causal_conv1d",
                msg: "dilation must be >= 1".into(),
            });
        }
        let (m, t, ci) = (sx[0], sx[1], sx[2]);
        let (co, k) = (sw[0], sw[1]);
        let xv = &self.node(x).value;
        let wv = &self.node(w).value;
        let mut out = Vec::with_capacity(m * t * co);
        for _ in 0..m * t {
            out.extend_from_slice(&self.node(b).value);
        }
        let mut z = vec![0.0; m * t * co];
        for j in 0..k {
            let shift = dilation * j;
            if shift >= t {
                break;
            }
            // z = X @ W_j^T over all rows, W_j = w[:, j, :] as [O, I]
            let wj = MatRef {
                data: &wv[j * ci..],
                rows: co,
                cols: ci,
                row_stride: k * ci,
                col_stride: 1,
            };
            gemm(1.0, MatRef::row_major(xv, m * t, ci), wj.t(), 0.0, &mut z);
            for s in 0..m {
                let dst = &mut out[(s * t + shift) * co..(s + 1) * t * co];
                let src = &z[s * t * co..((s + 1) * t - shift) * co];
                add_into(dst, src);
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(vec![m, t, co], out, Op::CausalConv { x, w, b, dilation }, rg, "causal_conv1d"))
    }

    // ------------------------------------------------------------------
    // backward

    /// Accumulates d`loss`/d`leaf` into every gradient-tracking leaf.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        let ln = self.node(loss);
        if ln.value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(ln.shape.clone()));
        }
        if !ln.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => add_into(acc, &g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let want = |v: Var| nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {
                grad_slot(grads, nodes, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b, bc) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (la, lb) = (va.len(), vb.len());
                if want(*a) {
                    let ga = acc!(*a);
                    match (kind, bc) {
                        (Binary::Add | Binary::Sub, Broadcast::Lhs) => {
                            for (r, x) in g.iter().enumerate() {
                                ga[r % la] += x;
                            }
                        }
                        (Binary::Add | Binary::Sub, _) => add_into(ga, g),
                        (Binary::Mul, Broadcast::Same) => {
                            for r in 0..g.len() {
                                ga[r] += g[r] * vb[r];
                            }
                        }
                        (Binary::Mul, Broadcast::Rhs) => {
                            for r in 0..g.len() {
                                ga[r] += g[r] * vb[r % lb];
                            }
                        }
                        (Binary::Mul, Broadcast::Lhs) => {
                            for r in 0..g.len() {
                                ga[r % la] += g[r] * vb[r];
                            }
                        }
                    }
                }
                if want(*b) {
                    let gb = acc!(*b);
                    let sign = if *kind == Binary::Sub { -1.0 } else { 1.0 };
                    match (kind, bc) {
                        (Binary::Add | Binary::Sub, Broadcast::Rhs) => {
                            for (r, x) in g.iter().enumerate() {
                                gb[r % lb] += sign * x;
                            }
                        }
                        (Binary::Add | Binary::Sub, _) => {
                            for (d, x) in gb.iter_mut().zip(g) {
                                *d += sign * x;
                            }
                        }
                        (Binary::Mul, Broadcast::Same) => {
                            for r in 0..g.len() {
                                gb[r] += g[r] * va[r];
                            }
                        }
                        (Binary::Mul, Broadcast::Rhs) => {
                            for r in 0..g.len() {
                                gb[r % lb] += g[r] * va[r];
                            }
                        }
                        (Binary::Mul, Broadcast::Lhs) => {
                            for r in 0..g.len() {
                                gb[r] += g[r] * va[r % la];
                            }
                        }
                    }
                }
            }
            Op::Unary(kind, a) => {
                let x = &nodes[a.0].value;
                let y = &node.value;
                let ga = acc!(*a);
                for r in 0..g.len() {
                    ga[r] += g[r] * kind.derivative(x[r], y[r]);
                }
            }
            Op::Scale(a, s) => {
                let ga = acc!(*a);
                for (d, x) in ga.iter_mut().zip(g) {
                    *d += s * x;
                }
            }
            Op::AddScalar(a) => add_into(acc!(*a), g),
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                let gm = MatRef::row_major(g, m, n);
                if want(*a) {
                    gemm(1.0, gm, MatRef::row_major(&nodes[b.0].value, k, n).t(), 1.0, acc!(*a));
                }
                if want(*b) {
                    gemm(1.0, MatRef::row_major(&nodes[a.0].value, m, k).t(), gm, 1.0, acc!(*b));
                }
            }
            Op::Affine(x, w, b) => {
                let (m, k) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let n = nodes[w.0].shape[1];
                let gm = MatRef::row_major(g, m, n);
                if want(*x) {
                    gemm(1.0, gm, MatRef::row_major(&nodes[w.0].value, k, n).t(), 1.0, acc!(*x));
                }
                if want(*w) {
                    gemm(1.0, MatRef::row_major(&nodes[x.0].value, m, k).t(), gm, 1.0, acc!(*w));
                }
                if want(*b) {
                    let gb = acc!(*b);
                    for r in 0..m {
                        add_into(gb, &g[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let ga = acc!(*a);
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Sum(a) => {
                for d in acc!(*a).iter_mut() {
                    *d += g[0];
                }
            }
            Op::Mean(a) => {
                let ga = acc!(*a);
                let s = g[0] / ga.len() as f64;
                for d in ga.iter_mut() {
                    *d += s;
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].shape[*axis];
                    if want(*p) {
                        let gp = acc!(*p);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut gp[o * len * inner..(o + 1) * len * inner], src);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { src, axis, start } => {
                let (outer, len, inner) = split_axis(&nodes[src.0].shape, *axis);
                let width = node.shape[*axis];
                let gs = acc!(*src);
                for o in 0..outer {
                    let base = (o * len + start) * inner;
                    add_into(&mut gs[base..base + width * inner], &g[o * width * inner..(o + 1) * width * inner]);
                }
            }
            Op::Reshape(a) => add_into(acc!(*a), g),
            Op::GatherRows { src, index } => {
                let width = node.value.len() / index.len().max(1);
                let gs = acc!(*src);
                for (r, &s) in index.iter().enumerate() {
                    add_into(&mut gs[s * width..(s + 1) * width], &g[r * width..(r + 1) * width]);
                }
            }
            Op::ScatterAddRows { src, index } => {
                let width = nodes[src.0].value.len() / index.len().max(1);
                let gs = acc!(*src);
                for (r, &d) in index.iter().enumerate() {
                    add_into(&mut gs[r * width..(r + 1) * width], &g[d * width..(d + 1) * width]);
                }
            }
            Op::CausalConv { x, w, b, dilation } => {
                let sx = &nodes[x.0].shape;
                let (m, t, ci) = (sx[0], sx[1], sx[2]);
                let (co, k) = (nodes[w.0].shape[0], nodes[w.0].shape[1]);
                if want(*b) {
                    let gb = acc!(*b);
                    for r in 0..m * t {
                        add_into(gb, &g[r * co..(r + 1) * co]);
                    }
                }
                let need_x = want(*x);
                let need_w = want(*w);
                let wv = &nodes[w.0].value;
                let xv = &nodes[x.0].value;
                let mut gz = vec![0.0; m * t * co];
                for j in 0..k {
                    let shift = dilation * j;
                    if shift >= t {
                        break;
                    }
                    // gz[s, t'] = g[s, t' + shift] for t' < t - shift, else 0
                    gz.iter_mut().for_each(|v| *v = 0.0);
                    for s in 0..m {
                        gz[s * t * co..((s + 1) * t - shift) * co]
                            .copy_from_slice(&g[(s * t + shift) * co..(s + 1) * t * co]);
                    }
                    let gzm = MatRef::row_major(&gz, m * t, co);
                    if need_x {
                        let wj = MatRef {
                            data: &wv[j * ci..],
                            rows: co,
                            cols: ci,
                            row_stride: k * ci,
                            col_stride: 1,
                        };
                        gemm(1.0, gzm, wj, 1.0, acc!(*x));
                    }
                    if need_w {
                        // dW_j[o, i] = Σ_rows gz[r, o] x[r, i]
                        let mut dwj = vec![0.0; co * ci];
                        gemm(1.0, gzm.t(), MatRef::row_major(xv, m * t, ci), 0.0, &mut dwj);
                        let gw = acc!(*w);
                        for o in 0..co {
                            add_into(&mut gw[(o * k + j) * ci..(o * k + j + 1) * ci], &dwj[o * ci..(o + 1) * ci]);
                        }
                    }
                }
            }
        }
    }
}
