//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation of a forward pass in creation order.
//! [`Graph::backward`] replays the record in reverse, so each node is visited
//! exactly once, and accumulates adjoints into the leaves that were registered
//! with `requires_grad`.
//!
//! Operations that are awkward to express as a chain of primitives (the ray
//! compositing in [`crate::render`]) plug in through [`CustomOp`], which
//! supplies its own vector-Jacobian product.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("tensor data of length {len} does not fit shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    BadAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major tensor with an optional gradient accumulator.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad)
            .field("numel", &self.data.len())
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(AutodiffError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds `delta` into the gradient accumulator, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let g = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (a, d) in g.iter_mut().zip(delta) {
            *a += d;
        }
    }
}

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-supplied operation with a hand-written adjoint.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Accumulates `d loss / d input_k` into `grads[k]` for every input.
    /// `grads[k]` is pre-sized to the input's element count and zeroed.
    fn backward(&self, inputs: &[&[f64]], output: &[f64], grad_out: &[f64], grads: &mut [Vec<f64>]);
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sin(Var),
    Cos(Var),
    Exp(Var),
    ExpClamped(Var, f64),
    Sigmoid(Var),
    Abs(Var),
    Softmax { input: Var, axis: usize },
    Sum(Var),
    SumAxis { input: Var, axis: usize },
    Reshape(Var),
    Transpose(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Conv3d(Var, Var),
    StraightThrough(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Ordered record of one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(AutodiffError::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Maps every element of `out_shape` to the flat offset in a broadcast input.
fn broadcast_offsets(input: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..input.len()).rev() {
        let axis = i + rank - input.len();
        strides[axis] = if input[i] == 1 { 0 } else { acc };
        acc *= input[i];
    }
    let total = numel(out_shape);
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    offsets
}

/// (outer, len, inner) decomposition of a shape around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn dgemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    // Row-major strides; transposition is expressed by swapping them.
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Gradients flow to it iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(tensor.shape.clone(), tensor.data.clone(), Op::Leaf, tensor.requires_grad)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(AutodiffError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(vec![], vec![value], Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Accumulated gradient of a trainable leaf; `None` for constants and
    /// before any backward pass.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        let node = &self.nodes[v.0];
        if matches!(node.op, Op::Leaf) && node.requires_grad {
            node.grad.as_deref()
        } else {
            None
        }
    }

    /// Adds the leaf's accumulated gradient into `tensor.grad`.
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor) {
        if let Some(g) = self.grad(v) {
            tensor.accumulate_grad(g);
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0f64; m * n];
        dgemm(m, k, n, self.value(a), false, self.value(b), false, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(name, &sa, &sb)?;
        let (va, vb) = (self.value(a), self.value(b));
        let out: Vec<f64> = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let oa = broadcast_offsets(&sa, &out_shape);
            let ob = broadcast_offsets(&sb, &out_shape);
            oa.iter().zip(&ob).map(|(&i, &j)| f(va[i], vb[j])).collect()
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out_shape, out, op, rg))
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

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, op, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, f64::sin, Op::Sin(x))
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, f64::cos, Op::Cos(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    /// `exp(x)` whose adjoint uses `exp(min(x, cap))`.
    pub fn exp_clamped(&mut self, x: Var, cap: f64) -> Var {
        self.unary(x, f64::exp, Op::ExpClamped(x, cap))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(AutodiffError::BadAxis {
                op: "softmax",
                axis,
                shape,
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let v = self.value(x);
        let mut out = vec![0.0f64; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let max = (0..len).map(|k| v[base + k * inner]).fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0f64;
                for k in 0..len {
                    let e = (v[base + k * inner] - max).exp();
                    out[base + k * inner] = e;
                    denom += e;
                }
                for k in 0..len {
                    out[base + k * inner] /= denom;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Softmax { input: x, axis }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().map(|&v| v).sum();
        let rg = self.rg(x);
        self.push(vec![], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(AutodiffError::BadAxis {
                op: "sum_axis",
                axis,
                shape,
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let v = self.value(x);
        let mut out = vec![0.0f64; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = 0.0f64;
                for k in 0..len {
                    acc += v[(o * len + k) * inner + i];
                }
                out[o * inner + i] = acc;
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(out_shape, out, Op::SumAxis { input: x, axis }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(x).len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let v = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, v, Op::Reshape(x), rg))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "transpose",
                lhs: s,
                rhs: vec![],
            });
        }
        let (r, c) = (s[0], s[1]);
        let v = self.value(x);
        let mut out = vec![0.0f64; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c, r], out, Op::Transpose(x), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(AutodiffError::BadAxis {
                op: "concat",
                axis,
                shape: first,
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let chunk = len * inner;
                out.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            out_shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Contiguous range `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(AutodiffError::BadAxis {
                op: "slice",
                axis,
                shape,
            });
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let v = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(out_shape, out, Op::Slice { input: x, axis, start }, rg))
    }

    /// Valid-padding 3-D cross-correlation.
    /// `input: [C, X, Y, Z]`, `weights: [P, C, KX, KY, KZ]` → `[P, X-KX+1, Y-KY+1, Z-KZ+1]`.
    pub fn conv3d(&mut self, input: Var, weights: Var) -> Result<Var> {
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weights).to_vec());
        let ok = si.len() == 4
            && sw.len() == 5
            && si[0] == sw[1]
            && (1..4).all(|d| sw[d + 1] >= 1 && sw[d + 1] <= si[d]);
        if !ok {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv3d",
                lhs: si,
                rhs: sw,
            });
        }
        let geom = ConvGeom::new(&si, &sw);
        let out = geom.forward(self.value(input), self.value(weights));
        let rg = self.rg(input) || self.rg(weights);
        Ok(self.push(geom.out_shape(), out, Op::Conv3d(input, weights), rg))
    }

    /// Forward value is `hard` (same shape as `soft`); the adjoint passes
    /// through to `soft` unchanged.
    pub fn straight_through(&mut self, soft: Var, hard: Vec<f64>) -> Result<Var> {
        let shape = self.shape(soft).to_vec();
        if hard.len() != numel(&shape) {
            return Err(AutodiffError::DataLength { shape, len: hard.len() });
        }
        let rg = self.rg(soft);
        Ok(self.push(shape, hard, Op::StraightThrough(soft), rg))
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], shape: Vec<usize>, value: Vec<f64>, op: Box<dyn CustomOp>) -> Result<Var> {
        if numel(&shape) != value.len() {
            return Err(AutodiffError::DataLength { shape, len: value.len() });
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            shape,
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                let node = &mut self.nodes[idx];
                match node.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(idx, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let mut send = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                send(*a, &mut |ga| dgemm(m, n, k, g, false, vb, true, ga));
                send(*b, &mut |gb| dgemm(k, m, n, va, true, g, false, gb));
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let out_shape = &node.shape;
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let same_a = nodes[a.0].shape == *out_shape;
                let same_b = nodes[b.0].shape == *out_shape;
                let oa = if same_a { None } else { Some(broadcast_offsets(&nodes[a.0].shape, out_shape)) };
                let ob = if same_b { None } else { Some(broadcast_offsets(&nodes[b.0].shape, out_shape)) };
                let ia = |i: usize| oa.as_ref().map_or(i, |o| o[i]);
                let ib = |i: usize| ob.as_ref().map_or(i, |o| o[i]);
                let kind = match &node.op {
                    Op::Add(..) => 0,
                    Op::Sub(..) => 1,
                    _ => 2,
                };
                send(*a, &mut |ga| {
                    for (i, &gi) in g.iter().enumerate() {
                        ga[ia(i)] += if kind == 2 { gi * vb[ib(i)] } else { gi };
                    }
                });
                send(*b, &mut |gb| {
                    for (i, &gi) in g.iter().enumerate() {
                        gb[ib(i)] += match kind {
                            0 => gi,
                            1 => -gi,
                            _ => gi * va[ia(i)],
                        };
                    }
                });
            }
            Op::Scale(x, s) => send(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, d)| *a += d * s)),
            Op::AddScalar(x) | Op::Reshape(x) | Op::StraightThrough(x) => {
                send(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, d)| *a += d))
            }
            Op::Relu(x) => {
                let vx = &nodes[x.0].value;
                send(*x, &mut |gx| {
                    for i in 0..g.len() {
                        if vx[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                })
            }
            Op::Sin(x) => {
                let vx = &nodes[x.0].value;
                send(*x, &mut |gx| (0..g.len()).for_each(|i| gx[i] += g[i] * vx[i].cos()))
            }
            Op::Cos(x) => {
                let vx = &nodes[x.0].value;
                send(*x, &mut |gx| (0..g.len()).for_each(|i| gx[i] -= g[i] * vx[i].sin()))
            }
            Op::Exp(x) => send(*x, &mut |gx| (0..g.len()).for_each(|i| gx[i] += g[i] * out[i])),
            Op::ExpClamped(x, cap) => {
                let vx = &nodes[x.0].value;
                send(*x, &mut |gx| (0..g.len()).for_each(|i| gx[i] += g[i] * vx[i].min(*cap).exp()))
            }
            Op::Sigmoid(x) => send(*x, &mut |gx| (0..g.len()).for_each(|i| gx[i] += g[i] * out[i] * (1.0 - out[i]))),
            Op::Abs(x) => {
                let vx = &nodes[x.0].value;
                send(*x, &mut |gx| {
                    for i in 0..g.len() {
                        let s = if vx[i] > 0.0 {
                            1.0
                        } else if vx[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        gx[i] += g[i] * s;
                    }
                })
            }
            Op::Softmax { input, axis } => {
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                send(*input, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: f64 = (0..len)
                                .map(|k| g[base + k * inner] * out[base + k * inner])
                                .sum();
                            for k in 0..len {
                                let j = base + k * inner;
                                gx[j] += out[j] * (g[j] - dot);
                            }
                        }
                    }
                })
            }
            Op::Sum(x) => send(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0])),
            Op::SumAxis { input, axis } => {
                let (outer, len, inner) = axis_split(&nodes[input.0].shape, *axis);
                send(*input, &mut |gx| {
                    for o in 0..outer {
                        for k in 0..len {
                            for i in 0..inner {
                                gx[(o * len + k) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                })
            }
            Op::Transpose(x) => {
                let (r, c) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                send(*x, &mut |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                })
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(&node.shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = nodes[v.0].shape[*axis];
                    send(v, &mut |gv| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for t in 0..len * inner {
                                gv[dst + t] += g[src + t];
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, full, inner) = axis_split(&nodes[input.0].shape, *axis);
                let len = node.shape[*axis];
                send(*input, &mut |gx| {
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        for t in 0..len * inner {
                            gx[dst + t] += g[src + t];
                        }
                    }
                })
            }
            Op::Conv3d(input, weights) => {
                let geom = ConvGeom::new(&nodes[input.0].shape, &nodes[weights.0].shape);
                let (vi, vw) = (&nodes[input.0].value, &nodes[weights.0].value);
                send(*input, &mut |gi| geom.backward_input(vw, g, gi));
                send(*weights, &mut |gw| geom.backward_weights(vi, g, gw));
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&[f64]> = inputs.iter().map(|v| nodes[v.0].value.as_slice()).collect();
                let mut grads: Vec<Vec<f64>> = inputs.iter().map(|v| vec![0.0; nodes[v.0].value.len()]).collect();
                op.backward(&vals, out, g, &mut grads);
                for (v, gv) in inputs.iter().zip(grads) {
                    send(*v, &mut |slot| slot.iter_mut().zip(&gv).for_each(|(a, d)| *a += d));
                }
            }
        }
    }
}

struct ConvGeom {
    c: usize,
    n: [usize; 3],
    p: usize,
    k: [usize; 3],
    o: [usize; 3],
}

impl ConvGeom {
    fn new(si: &[usize], sw: &[usize]) -> Self {
        let n = [si[1], si[2], si[3]];
        let k = [sw[2], sw[3], sw[4]];
        Self {
            c: si[0],
            n,
            p: sw[0],
            k,
            o: [n[0] - k[0] + 1, n[1] - k[1] + 1, n[2] - k[2] + 1],
        }
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.p, self.o[0], self.o[1], self.o[2]]
    }

    fn in_idx(&self, c: usize, x: usize, y: usize, z: usize) -> usize {
        ((c * self.n[0] + x) * self.n[1] + y) * self.n[2] + z
    }

    fn w_idx(&self, p: usize, c: usize, x: usize, y: usize, z: usize) -> usize {
        (((p * self.c + c) * self.k[0] + x) * self.k[1] + y) * self.k[2] + z
    }

    fn out_idx(&self, p: usize, x: usize, y: usize, z: usize) -> usize {
        ((p * self.o[0] + x) * self.o[1] + y) * self.o[2] + z
    }

    /// Visits every (output, input, weight) index triple with a nonzero weight.
    fn for_each_tap(&self, weights: &[f64], mut f: impl FnMut(usize, usize, usize)) {
        for p in 0..self.p {
            for c in 0..self.c {
                for kx in 0..self.k[0] {
                    for ky in 0..self.k[1] {
                        for kz in 0..self.k[2] {
                            let wi = self.w_idx(p, c, kx, ky, kz);
                            if weights[wi] == 0.0 {
                                continue;
                            }
                            for x in 0..self.o[0] {
                                for y in 0..self.o[1] {
                                    for z in 0..self.o[2] {
                                        f(self.out_idx(p, x, y, z), self.in_idx(c, x + kx, y + ky, z + kz), wi);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, input: &[f64], weights: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0f64; self.p * self.o.iter().product::<usize>()];
        self.for_each_tap(weights, |o, i, w| out[o] += weights[w] * input[i]);
        out
    }

    fn backward_input(&self, weights: &[f64], g: &[f64], gi: &mut [f64]) {
        self.for_each_tap(weights, |o, i, w| gi[i] += weights[w] * g[o]);
    }

    fn backward_weights(&self, input: &[f64], g: &[f64], gw: &mut [f64]) {
        // Zero weights still need a gradient, so visit every tap.
        for p in 0..self.p {
            for c in 0..self.c {
                for kx in 0..self.k[0] {
                    for ky in 0..self.k[1] {
                        for kz in 0..self.k[2] {
                            let mut acc = 0.0f64;
                            for x in 0..self.o[0] {
                                for y in 0..self.o[1] {
                                    for z in 0..self.o[2] {
                                        acc += g[self.out_idx(p, x, y, z)]
                                            * input[self.in_idx(c, x + kx, y + ky, z + kz)];
                                    }
                                }
                            }
                            gw[self.w_idx(p, c, kx, ky, kz)] += acc;
                        }
                    }
                }
            }
        }
    }
}
