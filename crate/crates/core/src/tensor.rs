//! Dense row-major `f64` tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. Nodes
//! whose operands all lack `requires_grad` are stored as constants and skipped
//! by [`Tape::backward`]. Values recorded on a tape are never mutated.
//!
//! Broadcasting is limited to leading size-1 axes: `[D]` or `[1, D]` against
//! `[N, D]`, and rank-0 scalars against anything.

use std::cell::RefCell;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("zero-sized axis in shape {0:?}")]
    ZeroDim(Vec<usize>),
    #[error("axis {axis} out of range for shape {shape:?}")]
    Axis { axis: usize, shape: Vec<usize> },
    #[error("range {start}..{end} out of bounds for axis of length {len}")]
    Range { start: usize, end: usize, len: usize },
    #[error("index {index} out of bounds for {len} rows")]
    Index { index: usize, len: usize },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("backward root does not require gradient")]
    NoGradient,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A dense tensor value.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroDim(shape));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            requires_grad: false,
        }
    }

    /// Marks the tensor as a trainable leaf.
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Element at row `i`, column `j` of a 2-D tensor.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape.last().copied().unwrap_or(1);
        &self.data[i * cols..(i + 1) * cols]
    }
}

/// How the smaller operand of a binary op is repeated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    None,
    Lhs,
    Rhs,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Minimum(usize, usize),
    Maximum(usize, usize),
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize, tb: bool },
    Transpose(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Neg(usize),
    Sigmoid(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sin(usize),
    Abs(usize),
    Pow(usize, f64),
    Clamp(usize, f64, f64),
    Softmax(usize),
    LayerNorm { a: usize, inv_std: Vec<f64> },
    Sum(usize),
    Mean(usize),
    SumLast(usize),
    Concat { parts: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize, end: usize },
    GatherRows { a: usize, rows: Vec<usize> },
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    grad: bool,
}

/// Operation record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf; `None` when the leaf does not require gradient
    /// or the root does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but yields zeros for unreachable leaves.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.shape()),
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// `small` broadcasts onto `big` when, after stripping leading ones, it equals
/// a suffix of `big`.
fn broadcasts_onto(small: &[usize], big: &[usize]) -> bool {
    let first = small.iter().position(|&d| d != 1).unwrap_or(small.len());
    let core = &small[first..];
    core.len() <= big.len() && big[big.len() - core.len()..] == *core
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let len = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    (outer, len, inner)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c += op(a) * op(b)` where `a` is `m x k` and `b` is `k x n` after the
/// optional transposes.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64]) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: the slices cover exactly the strided extents described above.
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

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

/// Adds `g` into `dst`, folding repeats when `dst` is the broadcast operand.
fn add_reduced(dst: &mut [f64], g: &[f64], sign: f64) {
    let n = dst.len();
    if n == g.len() {
        for (d, x) in dst.iter_mut().zip(g) {
            *d += sign * x;
        }
    } else {
        for chunk in g.chunks_exact(n) {
            for (d, x) in dst.iter_mut().zip(chunk) {
                *d += sign * x;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let op = if grad { op } else { Op::Leaf };
        nodes.push(Node {
            shape,
            value,
            op,
            grad,
        });
        Var { tape: self, id }
    }

    /// Records a leaf; it participates in differentiation when the tensor
    /// requires gradient.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    /// Records a leaf that takes ownership of the tensor's storage.
    pub fn leaf_owned(&self, t: Tensor) -> Var<'_> {
        let grad = t.requires_grad;
        self.push(t.shape, t.data, Op::Leaf, grad)
    }

    /// Records a constant (never differentiated).
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t.shape, t.data, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if numel(&root_node.shape) != 1 {
            return Err(TensorError::NonScalarRoot(root_node.shape.clone()));
        }
        if !root_node.grad {
            return Err(TensorError::NoGradient);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        grads[root.id] = Some(vec![1.0]);
        let mut out: Vec<Option<Tensor>> = vec![None; root.id + 1];

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            if let Op::Leaf = node.op {
                out[id] = Some(Tensor {
                    shape: node.shape.clone(),
                    data: g,
                    requires_grad: false,
                });
                continue;
            }
            backprop_node(&nodes, node, &g, &mut grads);
        }
        Ok(Gradients { grads: out })
    }

    fn unary(&self, a: Var<'_>, op: impl FnOnce(usize) -> Op, f: impl Fn(f64) -> f64) -> Var<'_> {
        let (shape, value, grad) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.id];
            (n.shape.clone(), n.value.iter().map(|&x| f(x)).collect(), n.grad)
        };
        self.push(shape, value, op(a.id), grad)
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var<'_>,
        b: Var<'_>,
        make: impl FnOnce(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'_>> {
        let (shape, value, grad) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.id], &nodes[b.id]);
            let bc = if na.shape == nb.shape {
                Bcast::None
            } else if broadcasts_onto(&nb.shape, &na.shape) {
                Bcast::Rhs
            } else if broadcasts_onto(&na.shape, &nb.shape) {
                Bcast::Lhs
            } else {
                return Err(TensorError::ShapeMismatch {
                    op: name,
                    lhs: na.shape.clone(),
                    rhs: nb.shape.clone(),
                });
            };
            let value: Vec<f64> = match bc {
                Bcast::None => na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect(),
                Bcast::Rhs => {
                    let p = nb.value.len();
                    na.value.iter().enumerate().map(|(i, &x)| f(x, nb.value[i % p])).collect()
                }
                Bcast::Lhs => {
                    let p = na.value.len();
                    nb.value.iter().enumerate().map(|(i, &y)| f(na.value[i % p], y)).collect()
                }
            };
            let shape = if bc == Bcast::Lhs { nb.shape.clone() } else { na.shape.clone() };
            (shape, value, na.grad || nb.grad)
        };
        Ok(self.push(shape, value, make(a.id, b.id), grad))
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |id: usize| -> &[f64] { &nodes[id].value };
    let wants = |id: usize| nodes[id].grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign_b = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if wants(*a) {
                let len = val(*a).len();
                add_reduced(accumulate(&mut grads[*a], len), g, 1.0);
            }
            if wants(*b) {
                let len = val(*b).len();
                add_reduced(accumulate(&mut grads[*b], len), g, sign_b);
            }
        }
        Op::Mul(a, b) | Op::Div(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (pa, pb) = (va.len(), vb.len());
            let is_div = matches!(node.op, Op::Div(..));
            if wants(*a) {
                let local: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| {
                        let y = vb[i % pb];
                        if is_div {
                            gi / y
                        } else {
                            gi * y
                        }
                    })
                    .collect();
                add_reduced(accumulate(&mut grads[*a], pa), &local, 1.0);
            }
            if wants(*b) {
                let local: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| {
                        let x = va[i % pa];
                        if is_div {
                            let y = vb[i % pb];
                            -gi * x / (y * y)
                        } else {
                            gi * x
                        }
                    })
                    .collect();
                add_reduced(accumulate(&mut grads[*b], pb), &local, 1.0);
            }
        }
        Op::Minimum(a, b) | Op::Maximum(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let is_min = matches!(node.op, Op::Minimum(..));
            let pick_a = |i: usize| if is_min { va[i] <= vb[i] } else { va[i] >= vb[i] };
            if wants(*a) {
                let dst = accumulate(&mut grads[*a], va.len());
                for i in 0..g.len() {
                    if pick_a(i) {
                        dst[i] += g[i];
                    }
                }
            }
            if wants(*b) {
                let dst = accumulate(&mut grads[*b], vb.len());
                for i in 0..g.len() {
                    if !pick_a(i) {
                        dst[i] += g[i];
                    }
                }
            }
        }
        Op::MatMul { a, b, m, k, n, tb } => {
            let (m, k, n, tb) = (*m, *k, *n, *tb);
            if wants(*a) {
                // dA = dC * op(B)^T
                let dst = accumulate(&mut grads[*a], m * k);
                gemm(m, n, k, g, false, val(*b), !tb, dst);
            }
            if wants(*b) {
                let dst = accumulate(&mut grads[*b], k * n);
                if tb {
                    // B stored n x k: dB = dC^T * A
                    gemm(n, m, k, g, true, val(*a), false, dst);
                } else {
                    gemm(k, m, n, val(*a), true, g, false, dst);
                }
            }
        }
        Op::Transpose(a) => {
            if wants(*a) {
                let (r, c) = (node.shape[1], node.shape[0]);
                let dst = accumulate(&mut grads[*a], r * c);
                for i in 0..r {
                    for j in 0..c {
                        dst[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Scale(a, s) => {
            if wants(*a) {
                let dst = accumulate(&mut grads[*a], g.len());
                for (d, x) in dst.iter_mut().zip(g) {
                    *d += s * x;
                }
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if wants(*a) {
                let dst = accumulate(&mut grads[*a], g.len());
                for (d, x) in dst.iter_mut().zip(g) {
                    *d += x;
                }
            }
        }
        Op::Neg(a) => {
            if wants(*a) {
                let dst = accumulate(&mut grads[*a], g.len());
                for (d, x) in dst.iter_mut().zip(g) {
                    *d -= x;
                }
            }
        }
        Op::Sigmoid(a) | Op::Relu(a) | Op::Exp(a) | Op::Log(a) | Op::Sin(a) | Op::Abs(a) | Op::Pow(a, _) | Op::Clamp(a, ..) => {
            if wants(*a) {
                let x = val(*a);
                let y = &node.value;
                let op = &node.op;
                let dst = accumulate(&mut grads[*a], g.len());
                for i in 0..g.len() {
                    let local = match op {
                        Op::Sigmoid(_) => y[i] * (1.0 - y[i]),
                        Op::Relu(_) => {
                            if x[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Op::Exp(_) => y[i],
                        Op::Log(_) => 1.0 / x[i],
                        Op::Sin(_) => x[i].cos(),
                        Op::Abs(_) => {
                            if x[i] > 0.0 {
                                1.0
                            } else if x[i] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        Op::Pow(_, p) => {
                            if *p == 0.0 {
                                0.0
                            } else if x[i] == 0.0 && *p < 1.0 {
                                0.0
                            } else {
                                p * x[i].powf(p - 1.0)
                            }
                        }
                        Op::Clamp(_, lo, hi) => {
                            if x[i] >= *lo && x[i] <= *hi {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        _ => unreachable!(),
                    };
                    dst[i] += g[i] * local;
                }
            }
        }
        Op::Softmax(a) => {
            if wants(*a) {
                let cols = *node.shape.last().unwrap_or(&1);
                let y = &node.value;
                let dst = accumulate(&mut grads[*a], g.len());
                for (r, (yr, gr)) in y.chunks_exact(cols).zip(g.chunks_exact(cols)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    let dr = &mut dst[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm { a, inv_std } => {
            if wants(*a) {
                let cols = *node.shape.last().unwrap_or(&1);
                let xhat = &node.value;
                let dst = accumulate(&mut grads[*a], g.len());
                let nf = cols as f64;
                for (r, (xr, gr)) in xhat.chunks_exact(cols).zip(g.chunks_exact(cols)).enumerate() {
                    let mean_g: f64 = gr.iter().sum::<f64>() / nf;
                    let mean_gx: f64 = gr.iter().zip(xr).map(|(p, q)| p * q).sum::<f64>() / nf;
                    let s = inv_std[r];
                    let dr = &mut dst[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        dr[j] += s * (gr[j] - mean_g - xr[j] * mean_gx);
                    }
                }
            }
        }
        Op::Sum(a) | Op::Mean(a) => {
            if wants(*a) {
                let len = val(*a).len();
                let scale = if matches!(node.op, Op::Mean(_)) { 1.0 / len as f64 } else { 1.0 };
                let dst = accumulate(&mut grads[*a], len);
                for d in dst.iter_mut() {
                    *d += g[0] * scale;
                }
            }
        }
        Op::SumLast(a) => {
            if wants(*a) {
                let len = val(*a).len();
                let cols = len / g.len();
                let dst = accumulate(&mut grads[*a], len);
                for (r, dr) in dst.chunks_exact_mut(cols).enumerate() {
                    for d in dr {
                        *d += g[r];
                    }
                }
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, _, inner) = outer_inner(&node.shape, *axis);
            let total = node.shape[*axis];
            let mut offset = 0;
            for &p in parts {
                let plen = nodes[p].shape[*axis];
                if wants(p) {
                    let dst = accumulate(&mut grads[p], outer * plen * inner);
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + plen) * inner];
                        let d = &mut dst[o * plen * inner..(o + 1) * plen * inner];
                        for (x, y) in d.iter_mut().zip(src) {
                            *x += y;
                        }
                    }
                }
                offset += plen;
            }
        }
        Op::Slice { a, axis, start, end } => {
            if wants(*a) {
                let src_shape = &nodes[*a].shape;
                let (outer, len, inner) = outer_inner(src_shape, *axis);
                let w = end - start;
                let dst = accumulate(&mut grads[*a], outer * len * inner);
                for o in 0..outer {
                    let d = &mut dst[(o * len + start) * inner..(o * len + end) * inner];
                    let s = &g[o * w * inner..(o + 1) * w * inner];
                    for (x, y) in d.iter_mut().zip(s) {
                        *x += y;
                    }
                }
            }
        }
        Op::GatherRows { a, rows } => {
            if wants(*a) {
                let len = val(*a).len();
                let cols = len / nodes[*a].shape[0];
                let dst = accumulate(&mut grads[*a], len);
                for (k, &r) in rows.iter().enumerate() {
                    let d = &mut dst[r * cols..(r + 1) * cols];
                    for (x, y) in d.iter_mut().zip(&g[k * cols..(k + 1) * cols]) {
                        *x += y;
                    }
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].grad
    }

    /// Copy of the recorded value.
    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: false,
        }
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    /// Same value recorded as a constant; gradients stop here.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary("add", self, other, Op::Add, |x, y| x + y)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary("sub", self, other, Op::Sub, |x, y| x - y)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary("mul", self, other, Op::Mul, |x, y| x * y)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary("div", self, other, Op::Div, |x, y| x / y)
    }

    fn same_shape(self, other: Var<'t>, name: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(TensorError::ShapeMismatch { op: name, lhs: a, rhs: b });
        }
        Ok(())
    }

    /// Elementwise minimum; ties route the gradient to `self`.
    pub fn minimum(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "minimum")?;
        self.tape.binary("minimum", self, other, Op::Minimum, f64::min)
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn maximum(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "maximum")?;
        self.tape.binary("maximum", self, other, Op::Maximum, f64::max)
    }

    fn matmul_impl(self, other: Var<'t>, tb: bool) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        let name = if tb { "matmul_nt" } else { "matmul" };
        let err = || TensorError::ShapeMismatch {
            op: name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 2 || sb.len() != 2 {
            return Err(err());
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(err());
        }
        let (value, grad) = {
            let nodes = self.tape.nodes.borrow();
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, &nodes[self.id].value, false, &nodes[other.id].value, tb, &mut c);
            (c, nodes[self.id].grad || nodes[other.id].grad)
        };
        Ok(self.tape.push(
            vec![m, n],
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
                tb,
            },
            grad,
        ))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, false)
    }

    /// `[m, k] x [n, k]^T -> [m, n]`.
    pub fn matmul_nt(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, true)
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(TensorError::Axis { axis: 1, shape: s });
        }
        let (r, c) = (s[0], s[1]);
        let (value, grad) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = v[i * c + j];
                }
            }
            (out, nodes[self.id].grad)
        };
        Ok(self.tape.push(vec![c, r], value, Op::Transpose(self.id), grad))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.tape.unary(self, |a| Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        self.tape.unary(self, Op::AddScalar, |x| x + s)
    }

    /// `s - self`.
    pub fn rsub_scalar(self, s: f64) -> Var<'t> {
        self.neg().add_scalar(s)
    }

    pub fn neg(self) -> Var<'t> {
        self.tape.unary(self, Op::Neg, |x| -x)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape.unary(self, Op::Sigmoid, sigmoid)
    }

    pub fn relu(self) -> Var<'t> {
        self.tape.unary(self, Op::Relu, |x| x.max(0.0))
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self, Op::Exp, f64::exp)
    }

    pub fn log(self) -> Var<'t> {
        self.tape.unary(self, Op::Log, f64::ln)
    }

    pub fn sin(self) -> Var<'t> {
        self.tape.unary(self, Op::Sin, f64::sin)
    }

    pub fn abs(self) -> Var<'t> {
        self.tape.unary(self, Op::Abs, f64::abs)
    }

    pub fn pow(self, p: f64) -> Var<'t> {
        self.tape.unary(self, |a| Op::Pow(a, p), |x| x.powf(p))
    }

    /// Clamps into `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.tape.unary(self, |a| Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t> {
        let (shape, value, grad) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let cols = *n.shape.last().unwrap_or(&1);
            let mut out = n.value.clone();
            for row in out.chunks_exact_mut(cols) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    s += *x;
                }
                for x in row.iter_mut() {
                    *x /= s;
                }
            }
            (n.shape.clone(), out, n.grad)
        };
        self.tape.push(shape, value, Op::Softmax(self.id), grad)
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(self, eps: f64) -> Var<'t> {
        let (shape, value, grad, inv_std) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let cols = *n.shape.last().unwrap_or(&1);
            let mut out = n.value.clone();
            let mut inv_std = Vec::with_capacity(out.len() / cols);
            for row in out.chunks_exact_mut(cols) {
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
                let s = 1.0 / (var + eps).sqrt();
                for x in row.iter_mut() {
                    *x = (*x - mean) * s;
                }
                inv_std.push(s);
            }
            (n.shape.clone(), out, n.grad, inv_std)
        };
        self.tape.push(shape, value, Op::LayerNorm { a: self.id, inv_std }, grad)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(self) -> Var<'t> {
        let (v, grad) = {
            let nodes = self.tape.nodes.borrow();
            (nodes[self.id].value.iter().sum::<f64>(), nodes[self.id].grad)
        };
        self.tape.push(Vec::new(), vec![v], Op::Sum(self.id), grad)
    }

    pub fn mean(self) -> Var<'t> {
        let (v, grad) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            (x.iter().sum::<f64>() / x.len() as f64, nodes[self.id].grad)
        };
        self.tape.push(Vec::new(), vec![v], Op::Mean(self.id), grad)
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(self) -> Var<'t> {
        let (shape, value, grad) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let cols = *n.shape.last().unwrap_or(&1);
            let value: Vec<f64> = n.value.chunks_exact(cols).map(|r| r.iter().sum()).collect();
            let mut shape = n.shape.clone();
            shape.pop();
            (shape, value, n.grad)
        };
        self.tape.push(shape, value, Op::SumLast(self.id), grad)
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let shape = shape.into();
        let (value, grad, old) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.value.clone(), n.grad, n.shape.clone())
        };
        if numel(&shape) != value.len() || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: old,
                rhs: shape,
            });
        }
        Ok(self.tape.push(shape, value, Op::Reshape(self.id), grad))
    }

    /// Contiguous range `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let (shape, value, grad) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            if axis >= n.shape.len() {
                return Err(TensorError::Axis {
                    axis,
                    shape: n.shape.clone(),
                });
            }
            let (outer, len, inner) = outer_inner(&n.shape, axis);
            if start >= end || end > len {
                return Err(TensorError::Range { start, end, len });
            }
            let mut value = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                value.extend_from_slice(&n.value[(o * len + start) * inner..(o * len + end) * inner]);
            }
            let mut shape = n.shape.clone();
            shape[axis] = end - start;
            (shape, value, n.grad)
        };
        Ok(self.tape.push(
            shape,
            value,
            Op::Slice {
                a: self.id,
                axis,
                start,
                end,
            },
            grad,
        ))
    }

    /// Selects rows (axis 0) by index; indices may repeat.
    pub fn gather_rows(self, rows: &[usize]) -> Result<Var<'t>> {
        let (shape, value, grad) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            if n.shape.is_empty() || rows.is_empty() {
                return Err(TensorError::Axis {
                    axis: 0,
                    shape: n.shape.clone(),
                });
            }
            let len = n.shape[0];
            let cols = n.value.len() / len;
            let mut value = Vec::with_capacity(rows.len() * cols);
            for &r in rows {
                if r >= len {
                    return Err(TensorError::Index { index: r, len });
                }
                value.extend_from_slice(&n.value[r * cols..(r + 1) * cols]);
            }
            let mut shape = n.shape.clone();
            shape[0] = rows.len();
            (shape, value, n.grad)
        };
        Ok(self.tape.push(
            shape,
            value,
            Op::GatherRows {
                a: self.id,
                rows: rows.to_vec(),
            },
            grad,
        ))
    }
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts.first().ok_or(TensorError::Axis {
        axis,
        shape: Vec::new(),
    })?;
    let tape = first.tape;
    let (shape, value, grad) = {
        let nodes = tape.nodes.borrow();
        let base = &nodes[first.id].shape;
        if axis >= base.len() {
            return Err(TensorError::Axis {
                axis,
                shape: base.clone(),
            });
        }
        let mut total = 0;
        for p in parts {
            let s = &nodes[p.id].shape;
            let compatible = s.len() == base.len()
                && s.iter().zip(base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.clone(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = outer_inner(base, axis);
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let n = &nodes[p.id];
                let plen = n.shape[axis];
                value.extend_from_slice(&n.value[o * plen * inner..(o + 1) * plen * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        (shape, value, parts.iter().any(|p| nodes[p.id].grad))
    };
    Ok(tape.push(
        shape,
        value,
        Op::Concat {
            parts: parts.iter().map(|p| p.id).collect(),
            axis,
        },
        grad,
    ))
}
