use super::{Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    LogSumExp,
    Max,
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Neg,
    Exp,
    Log,
    Tanh,
    Relu,
    Sigmoid,
    Softplus,
    Sqrt,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Binary(Binary, usize, usize),
    Unary(Unary, usize),
    Affine { x: usize, scale: f64 },
    ClampMin { x: usize, min: f64 },
    Reduce { op: ReduceOp, x: usize, axis: usize },
    SumAll(usize),
    LogSoftmax(usize),
    Reshape(usize),
    SelectRows(usize, Vec<usize>),
    Take(usize, Vec<usize>),
    ConcatCols(usize, usize),
    NarrowCols { x: usize, start: usize },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Linear record of one forward computation.
///
/// Nodes are appended in creation order, so every parent precedes its
/// consumers and a reverse sweep is a valid topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

type Res = Result<Var, TensorError>;

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Output shape under trailing-dimension broadcasting.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>, TensorError> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// For every element of `out`, the flat index of the broadcast source in `input`.
fn broadcast_index(out: &[usize], input: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..input.len()).rev() {
        let o = i + rank - input.len();
        strides[o] = if input[i] == 1 { 0 } else { s };
        s *= input[i];
    }
    let n = numel(out);
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..n {
        idx.push(flat);
        for d in (0..rank).rev() {
            counter[d] += 1;
            flat += strides[d];
            if counter[d] < out[d] {
                break;
            }
            flat -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

/// Splits a shape around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn matmul_raw(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * c..(p + 1) * c];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn stable_softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logsumexp_slice(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
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

    /// Drops every recorded node and gradient.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.leaf_grads.clear();
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of `t`; it tracks gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a non-differentiable value.
    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Res {
        if numel(shape) != values.len() {
            return Err(TensorError::BadLength {
                shape: shape.to_vec(),
                len: values.len(),
            });
        }
        Ok(self.push(shape.to_vec(), values, Op::Leaf, false))
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(vec![], vec![v], Op::Leaf, false)
    }

    /// Copy of `x` with no gradient path back to `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let n = &self.nodes[x.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// The single value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        debug_assert_eq!(n.value.len(), 1);
        n.value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Accumulated gradient of a gradient-tracking leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Res {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (r, k, c) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a), self.value(b), r, k, c);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![r, c], out, Op::MatMul(a.0, b.0), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Res {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(TensorError::Axis {
                op: "transpose",
                axis: 1,
                rank: s.len(),
            });
        }
        let (r, c) = (s[0], s[1]);
        let out = transpose_raw(self.value(a), r, c);
        let ng = self.needs(a);
        Ok(self.push(vec![c, r], out, Op::Transpose(a.0), ng))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, op: Binary, name: &'static str, a: Var, b: Var) -> Res {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let f: fn(f64, f64) -> f64 = match op {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
        };
        let (va, vb) = (self.value(a), self.value(b));
        let (shape, out) = if sa == sb {
            (sa, va.iter().zip(vb).map(|(x, y)| f(*x, *y)).collect())
        } else {
            let shape = broadcast_shape(name, &sa, &sb)?;
            let (ia, ib) = (broadcast_index(&shape, &sa), broadcast_index(&shape, &sb));
            let out = ia.iter().zip(&ib).map(|(i, j)| f(va[*i], vb[*j])).collect();
            (shape, out)
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, Op::Binary(op, a.0, b.0), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Res {
        self.binary(Binary::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Res {
        self.binary(Binary::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Res {
        self.binary(Binary::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Res {
        self.binary(Binary::Div, "div", a, b)
    }

    fn unary(&mut self, op: Unary, x: Var) -> Res {
        let v = self.value(x);
        let out: Vec<f64> = match op {
            Unary::Neg => v.iter().map(|a| -a).collect(),
            Unary::Exp => v.iter().map(|a| a.exp()).collect(),
            Unary::Log => {
                if let Some((i, &bad)) = v.iter().enumerate().find(|(_, a)| **a <= 0.0 || a.is_nan()) {
                    return Err(TensorError::Domain {
                        op: "log",
                        index: i,
                        value: bad,
                    });
                }
                v.iter().map(|a| a.ln()).collect()
            }
            Unary::Tanh => v.iter().map(|a| a.tanh()).collect(),
            Unary::Relu => v.iter().map(|a| if *a <= 0.0 { 0.0 } else { *a }).collect(),
            Unary::Sigmoid => v.iter().map(|a| stable_sigmoid(*a)).collect(),
            Unary::Softplus => v.iter().map(|a| stable_softplus(*a)).collect(),
            Unary::Sqrt => {
                if let Some((i, &bad)) = v.iter().enumerate().find(|(_, a)| **a < 0.0) {
                    return Err(TensorError::Domain {
                        op: "sqrt",
                        index: i,
                        value: bad,
                    });
                }
                v.iter().map(|a| a.sqrt()).collect()
            }
        };
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        Ok(self.push(shape, out, Op::Unary(op, x.0), ng))
    }

    pub fn neg(&mut self, x: Var) -> Res {
        self.unary(Unary::Neg, x)
    }

    pub fn exp(&mut self, x: Var) -> Res {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Res {
        self.unary(Unary::Log, x)
    }

    pub fn tanh(&mut self, x: Var) -> Res {
        self.unary(Unary::Tanh, x)
    }

    /// Rectifier; the adjoint at exactly zero is zero and NaN passes through.
    pub fn relu(&mut self, x: Var) -> Res {
        self.unary(Unary::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Res {
        self.unary(Unary::Sigmoid, x)
    }

    /// log(1 + e^x), evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Res {
        self.unary(Unary::Softplus, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Res {
        self.unary(Unary::Sqrt, x)
    }

    /// `scale * x`.
    pub fn scale(&mut self, x: Var, scale: f64) -> Res {
        let out = self.value(x).iter().map(|a| a * scale).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        Ok(self.push(shape, out, Op::Affine { x: x.0, scale }, ng))
    }

    /// `max(x, min)`; the adjoint is zero where the clamp is active.
    pub fn clamp_min(&mut self, x: Var, min: f64) -> Res {
        let out = self.value(x).iter().map(|a| a.max(min)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        Ok(self.push(shape, out, Op::ClampMin { x: x.0, min }, ng))
    }

    // ---- reductions -----------------------------------------------------

    /// Reduces along `axis`, removing it from the shape.
    pub fn reduce(&mut self, op: ReduceOp, x: Var, axis: usize) -> Res {
        let shape = self.shape(x).to_vec();
        let name = match op {
            ReduceOp::Sum => "sum",
            ReduceOp::Mean => "mean",
            ReduceOp::LogSumExp => "logsumexp",
            ReduceOp::Max => "max",
        };
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op: name,
                axis,
                rank: shape.len(),
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        if n == 0 {
            return Err(TensorError::EmptyAxis { op: name });
        }
        let v = self.value(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let lane = (0..n).map(|j| v[(o * n + j) * inner + i]);
                out[o * inner + i] = match op {
                    ReduceOp::Sum => lane.sum(),
                    ReduceOp::Mean => lane.sum::<f64>() / n as f64,
                    ReduceOp::LogSumExp => logsumexp_slice(lane),
                    ReduceOp::Max => lane.fold(f64::NEG_INFINITY, f64::max),
                };
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let ng = self.needs(x);
        Ok(self.push(out_shape, out, Op::Reduce { op, x: x.0, axis }, ng))
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Res {
        self.reduce(ReduceOp::Sum, x, axis)
    }

    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Res {
        self.reduce(ReduceOp::LogSumExp, x, axis)
    }

    pub fn sum_all(&mut self, x: Var) -> Res {
        let s = self.value(x).iter().sum();
        let ng = self.needs(x);
        Ok(self.push(vec![], vec![s], Op::SumAll(x.0), ng))
    }

    /// Normalized log-probabilities along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Res {
        let shape = self.shape(x).to_vec();
        let Some(&n) = shape.last() else {
            return Err(TensorError::Axis {
                op: "log_softmax",
                axis: 0,
                rank: 0,
            });
        };
        if n == 0 {
            return Err(TensorError::EmptyAxis { op: "log_softmax" });
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(v.len());
        for row in v.chunks(n) {
            let lse = logsumexp_slice(row.iter().copied());
            out.extend(row.iter().map(|a| a - lse));
        }
        let ng = self.needs(x);
        Ok(self.push(shape, out, Op::LogSoftmax(x.0), ng))
    }

    // ---- shape and indexing ---------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Res {
        if numel(shape) != self.value(x).len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.value(x).to_vec();
        let ng = self.needs(x);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x.0), ng))
    }

    /// Gathers rows of a rank-2 tensor; indices may repeat.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Res {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Axis {
                op: "select_rows",
                axis: 0,
                rank: s.len(),
            });
        }
        let (r, c) = (s[0], s[1]);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(TensorError::IndexOutOfRange {
                op: "select_rows",
                index: bad,
                len: r,
            });
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&v[i * c..(i + 1) * c]);
        }
        let ng = self.needs(x);
        Ok(self.push(vec![rows.len(), c], out, Op::SelectRows(x.0, rows.to_vec()), ng))
    }

    /// Gathers elements by flat index into a rank-1 tensor.
    pub fn take(&mut self, x: Var, idx: &[usize]) -> Res {
        let v = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.len()) {
            return Err(TensorError::IndexOutOfRange {
                op: "take",
                index: bad,
                len: v.len(),
            });
        }
        let out = idx.iter().map(|&i| v[i]).collect();
        let ng = self.needs(x);
        Ok(self.push(vec![idx.len()], out, Op::Take(x.0, idx.to_vec()), ng))
    }

    /// Concatenates two rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Res {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: sa,
                rhs: sb,
            });
        }
        let (r, ca, cb) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            out.extend_from_slice(&va[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&vb[i * cb..(i + 1) * cb]);
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![r, ca + cb], out, Op::ConcatCols(a.0, b.0), ng))
    }

    /// Columns `start..start + len` of a rank-2 tensor.
    pub fn narrow_cols(&mut self, x: Var, start: usize, len: usize) -> Res {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[1] {
            return Err(TensorError::ShapeMismatch {
                op: "narrow_cols",
                lhs: s,
                rhs: vec![start, len],
            });
        }
        let (r, c) = (s[0], s[1]);
        let v = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + start + len]);
        }
        let ng = self.needs(x);
        Ok(self.push(vec![r, len], out, Op::NarrowCols { x: x.0, start }, ng))
    }

    // ---- backward -------------------------------------------------------

    /// Accumulates d(root)/d(leaf) into every gradient-tracking leaf reachable
    /// from `root`. Repeated calls add to the stored leaf gradients.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(TensorError::NonScalarRoot(self.nodes[root.0].shape.clone()));
        }
        if !self.nodes[root.0].needs_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let mut send = |p: usize, contrib: Vec<f64>| {
            if !nodes[p].needs_grad {
                return;
            }
            match &mut adj[p] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[*a].shape, &nodes[*b].shape);
                let (r, k, c) = (sa[0], sa[1], sb[1]);
                if nodes[*a].needs_grad {
                    let bt = transpose_raw(&nodes[*b].value, k, c);
                    send(*a, matmul_raw(g, &bt, r, c, k));
                }
                if nodes[*b].needs_grad {
                    let at = transpose_raw(&nodes[*a].value, r, k);
                    send(*b, matmul_raw(&at, g, k, r, c));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                send(*a, transpose_raw(g, c, r));
            }
            Op::Binary(op, a, b) => {
                let (na, nb) = (&nodes[*a], &nodes[*b]);
                let out_shape = &node.shape;
                let same = na.shape == *out_shape && nb.shape == *out_shape;
                let ia = (!same).then(|| broadcast_index(out_shape, &na.shape));
                let ib = (!same).then(|| broadcast_index(out_shape, &nb.shape));
                let ai = |k: usize| ia.as_ref().map_or(k, |m| m[k]);
                let bi = |k: usize| ib.as_ref().map_or(k, |m| m[k]);
                if na.needs_grad {
                    let mut ga = vec![0.0; na.value.len()];
                    for (k, gk) in g.iter().enumerate() {
                        ga[ai(k)] += match op {
                            Binary::Add | Binary::Sub => *gk,
                            Binary::Mul => gk * nb.value[bi(k)],
                            Binary::Div => gk / nb.value[bi(k)],
                        };
                    }
                    send(*a, ga);
                }
                if nb.needs_grad {
                    let mut gb = vec![0.0; nb.value.len()];
                    for (k, gk) in g.iter().enumerate() {
                        gb[bi(k)] += match op {
                            Binary::Add => *gk,
                            Binary::Sub => -gk,
                            Binary::Mul => gk * na.value[ai(k)],
                            Binary::Div => {
                                let bv = nb.value[bi(k)];
                                -gk * na.value[ai(k)] / (bv * bv)
                            }
                        };
                    }
                    send(*b, gb);
                }
            }
            Op::Unary(op, x) => {
                let xv = &nodes[*x].value;
                let out = &node.value;
                let gx = (0..g.len())
                    .map(|k| {
                        g[k] * match op {
                            Unary::Neg => -1.0,
                            Unary::Exp => out[k],
                            Unary::Log => 1.0 / xv[k],
                            Unary::Tanh => 1.0 - out[k] * out[k],
                            Unary::Relu => {
                                if xv[k] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Sigmoid => out[k] * (1.0 - out[k]),
                            Unary::Softplus => stable_sigmoid(xv[k]),
                            Unary::Sqrt => 0.5 / out[k],
                        }
                    })
                    .collect();
                send(*x, gx);
            }
            Op::Affine { x, scale } => send(*x, g.iter().map(|v| v * scale).collect()),
            Op::ClampMin { x, min } => {
                let xv = &nodes[*x].value;
                send(
                    *x,
                    g.iter().zip(xv).map(|(gk, v)| if *v > *min { *gk } else { 0.0 }).collect(),
                );
            }
            Op::Reduce { op, x, axis } => {
                let nx = &nodes[*x];
                let (outer, n, inner) = split_axis(&nx.shape, *axis);
                let mut gx = vec![0.0; nx.value.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let gi = g[o * inner + ii];
                        let out = node.value[o * inner + ii];
                        let at = |j: usize| (o * n + j) * inner + ii;
                        match op {
                            ReduceOp::Sum => (0..n).for_each(|j| gx[at(j)] = gi),
                            ReduceOp::Mean => (0..n).for_each(|j| gx[at(j)] = gi / n as f64),
                            ReduceOp::LogSumExp => (0..n).for_each(|j| {
                                let w = if out.is_finite() {
                                    (nx.value[at(j)] - out).exp()
                                } else {
                                    0.0
                                };
                                gx[at(j)] = gi * w;
                            }),
                            ReduceOp::Max => {
                                let arg = (0..n).find(|&j| nx.value[at(j)] == out).unwrap_or(0);
                                gx[at(arg)] = gi;
                            }
                        }
                    }
                }
                send(*x, gx);
            }
            Op::SumAll(x) => send(*x, vec![g[0]; nodes[*x].value.len()]),
            Op::LogSoftmax(x) => {
                let n = *node.shape.last().unwrap();
                let mut gx = Vec::with_capacity(g.len());
                for (grow, orow) in g.chunks(n).zip(node.value.chunks(n)) {
                    let total: f64 = grow.iter().sum();
                    gx.extend(grow.iter().zip(orow).map(|(gk, o)| gk - o.exp() * total));
                }
                send(*x, gx);
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::SelectRows(x, rows) => {
                let c = nodes[*x].shape[1];
                let mut gx = vec![0.0; nodes[*x].value.len()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        gx[r * c + j] += g[k * c + j];
                    }
                }
                send(*x, gx);
            }
            Op::Take(x, idx) => {
                let mut gx = vec![0.0; nodes[*x].value.len()];
                for (k, &i) in idx.iter().enumerate() {
                    gx[i] += g[k];
                }
                send(*x, gx);
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (nodes[*a].shape[1], nodes[*b].shape[1]);
                let r = node.shape[0];
                let mut ga = Vec::with_capacity(r * ca);
                let mut gb = Vec::with_capacity(r * cb);
                for row in g.chunks(ca + cb) {
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                send(*a, ga);
                send(*b, gb);
            }
            Op::NarrowCols { x, start } => {
                let c = nodes[*x].shape[1];
                let len = node.shape[1];
                let mut gx = vec![0.0; nodes[*x].value.len()];
                for (i, row) in g.chunks(len).enumerate() {
                    gx[i * c + start..i * c + start + len].copy_from_slice(row);
                }
                send(*x, gx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn leaf(t: &mut Tape, shape: &[usize], v: &[f64]) -> Var {
        t.leaf(&Tensor::new(shape.to_vec(), v.to_vec()).unwrap().with_grad())
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut t = Tape::new();
        let i = t.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = t.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = t.matmul(i, b).unwrap();
        assert_eq!(t.value(y), &[1.0, 2.0, 3.0, 4.0]);

        let p = t.constant(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = t.constant(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let y = t.matmul(p, b).unwrap();
        assert_eq!(t.value(y), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn matmul_gradient() {
        // d/da sum(a b) at a=[[1,1]], b=[[2],[3]] is [[2,3]]
        let mut t = Tape::new();
        let a = leaf(&mut t, &[1, 2], &[1.0, 1.0]);
        let b = leaf(&mut t, &[2, 1], &[2.0, 3.0]);
        let y = t.matmul(a, b).unwrap();
        let s = t.sum_all(y).unwrap();
        t.backward(s).unwrap();
        let g = t.grad(a).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-12 && (g[1] - 3.0).abs() < 1e-12);
        assert_eq!(t.grad(b).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn relu_sigmoid_values_and_relu_adjoint_at_zero() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[3], &[-1.0, 0.0, 2.0]);
        let r = t.relu(x).unwrap();
        assert_eq!(t.value(r), &[0.0, 0.0, 2.0]);
        let s = t.sum_all(r).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0, 1.0]);

        let z = t.scalar(0.0);
        let sg = t.sigmoid(z).unwrap();
        assert_eq!(t.item(sg), 0.5);
    }

    #[test]
    fn exp_gradient() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2], &[0.0, 1.0]);
        let e = t.exp(x).unwrap();
        let s = t.sum_all(e).unwrap();
        t.backward(s).unwrap();
        let g = t.grad(x).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-12);
        assert!((g[1] - std::f64::consts::E).abs() < 1e-12);
    }

    #[test]
    fn log_domain_error_carries_index() {
        let mut t = Tape::new();
        let x = t.constant(&[3], vec![1.0, 2.0, -0.5]).unwrap();
        match t.log(x) {
            Err(TensorError::Domain { op: "log", index: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn logsumexp_cases() {
        let mut t = Tape::new();
        let x = t.constant(&[2], vec![0.0, 0.0]).unwrap();
        let l = t.logsumexp(x, 0).unwrap();
        assert!((t.item(l) - 2f64.ln()).abs() < 1e-15);
        let x = t.constant(&[2], vec![1000.0, 1000.0]).unwrap();
        let l = t.logsumexp(x, 0).unwrap();
        assert!((t.item(l) - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn max_routes_adjoint_to_argmax() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[3], &[3.0, 1.0, 2.0]);
        let m = t.reduce(ReduceOp::Max, x, 0).unwrap();
        assert_eq!(t.item(m), 3.0);
        t.backward(m).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_axis_and_bad_axis_are_errors() {
        let mut t = Tape::new();
        let x = t.constant(&[2, 0], vec![]).unwrap();
        assert!(matches!(t.sum(x, 1), Err(TensorError::EmptyAxis { .. })));
        assert!(matches!(t.sum(x, 2), Err(TensorError::Axis { .. })));
    }

    #[test]
    fn backward_basics() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[3], &[1.0, 2.0, 3.0]);
        let s = t.sum_all(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let x = leaf(&mut t, &[], &[3.0]);
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0]);
        // a second call accumulates
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[12.0]);
        t.zero_grad();
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2], &[1.0, 2.0]);
        assert!(matches!(t.backward(x), Err(TensorError::NonScalarRoot(_))));
    }

    #[test]
    fn broadcast_adjoint_has_parameter_shape() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = leaf(&mut t, &[3], &[1.0, 1.0, 1.0]);
        let c = leaf(&mut t, &[2, 1], &[2.0, 3.0]);
        let y = t.add(x, b).unwrap();
        let y = t.mul(y, c).unwrap();
        let s = t.sum_all(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(b).unwrap(), &[5.0, 5.0, 5.0]);
        assert_eq!(t.grad(c).unwrap(), &[9.0, 18.0]);
        assert_eq!(t.grad(x).unwrap().len(), 6);
    }

    #[test]
    fn stop_gradient_blocks_path() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[], &[2.0]);
        let d = t.stop_gradient(x);
        let y = t.mul(x, d).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn clear_frees_nodes() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2], &[1.0, 2.0]);
        let _ = t.exp(x).unwrap();
        t.clear();
        assert!(t.is_empty());
    }

    fn fd_check(
        build: impl Fn(&mut Tape, &[Var]) -> Var,
        inputs: &[(Vec<usize>, Vec<f64>)],
    ) -> f64 {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|(s, v)| leaf(&mut t, s, v)).collect();
        let root = build(&mut t, &vars);
        t.backward(root).unwrap();
        let analytic: Vec<Vec<f64>> = vars.iter().map(|v| t.grad(*v).unwrap().to_vec()).collect();
        let eval = |inp: &[(Vec<usize>, Vec<f64>)]| {
            let mut t = Tape::new();
            let vars: Vec<Var> = inp.iter().map(|(s, v)| leaf(&mut t, s, v)).collect();
            let root = build(&mut t, &vars);
            t.item(root)
        };
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for (p, grads) in analytic.iter().enumerate() {
            for (k, g) in grads.iter().enumerate() {
                let mut plus = inputs.to_vec();
                plus[p].1[k] += h;
                let mut minus = inputs.to_vec();
                minus[p].1[k] -= h;
                let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let rel = (g - num).abs() / g.abs().max(num.abs()).max(1e-8);
                worst = worst.max(rel);
            }
        }
        worst
    }

    #[test]
    fn composite_ops_match_finite_differences() {
        let inputs = vec![
            (vec![2, 3], vec![0.3, -0.2, 0.5, 1.1, -0.7, 0.4]),
            (vec![3, 2], vec![0.2, 0.1, -0.4, 0.6, 0.9, -0.3]),
            (vec![2], vec![0.5, -0.25]),
        ];
        let worst = fd_check(
            |t, v| {
                let h = t.matmul(v[0], v[1]).unwrap();
                let h = t.add(h, v[2]).unwrap();
                let h = t.tanh(h).unwrap();
                let s = t.sigmoid(h).unwrap();
                let sp = t.softplus(h).unwrap();
                let c = t.concat_cols(s, sp).unwrap();
                let n = t.narrow_cols(c, 1, 2).unwrap();
                let ls = t.log_softmax(n).unwrap();
                let r = t.select_rows(ls, &[1, 0, 1]).unwrap();
                let sq = t.mul(r, r).unwrap();
                let l = t.logsumexp(sq, 1).unwrap();
                let tk = t.take(c, &[0, 3, 3]).unwrap();
                let tk = t.sum_all(tk).unwrap();
                let sq2 = t.mul(n, n).unwrap();
                let rs = t.sum(sq2, 1).unwrap();
                let rs = t.clamp_min(rs, 1e-16).unwrap();
                let nrm = t.sqrt(rs).unwrap();
                let nrm = t.reshape(nrm, &[2, 1]).unwrap();
                let dv = t.div(n, nrm).unwrap();
                let dv = t.sum_all(dv).unwrap();
                let a = t.sum_all(l).unwrap();
                let a = t.add(a, tk).unwrap();
                t.add(a, dv).unwrap()
            },
            &inputs,
        );
        assert!(worst < 1e-6, "worst relative error {worst}");
    }

    proptest! {
        #[test]
        fn logsumexp_shift_invariance(
            xs in proptest::collection::vec(-50.0f64..50.0, 1..16),
            c in -100.0f64..100.0,
        ) {
            let mut t = Tape::new();
            let x = t.constant(&[xs.len()], xs.clone()).unwrap();
            let shifted = t.constant(&[xs.len()], xs.iter().map(|v| v - c).collect()).unwrap();
            let a = t.logsumexp(x, 0).unwrap();
            let b = t.logsumexp(shifted, 0).unwrap();
            prop_assert!((t.item(a) - (t.item(b) + c)).abs() <= 1e-12 * (1.0 + t.item(a).abs()));
        }

        #[test]
        fn random_mlp_gradients_match_central_differences(
            seed in 0u64..1000,
            layers in 1usize..=3,
            width in 2usize..=32,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let input_dim = 3;
            let mut inputs = vec![(vec![2, input_dim], (0..2 * input_dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>())];
            let mut fan_in = input_dim;
            for l in 0..layers {
                let out = if l + 1 == layers { 1 } else { width };
                let scale = (1.0 / fan_in as f64).sqrt();
                inputs.push((vec![fan_in, out], (0..fan_in * out).map(|_| rng.random_range(-scale..scale)).collect()));
                inputs.push((vec![out], (0..out).map(|_| rng.random_range(-0.1..0.1)).collect()));
                fan_in = out;
            }
            let worst = fd_check_step(
                move |t, v| {
                    let mut h = v[0];
                    for l in 0..layers {
                        h = t.matmul(h, v[1 + 2 * l]).unwrap();
                        h = t.add(h, v[2 + 2 * l]).unwrap();
                        if l + 1 < layers {
                            h = t.tanh(h).unwrap();
                        }
                    }
                    let h = t.mul(h, h).unwrap();
                    t.sum_all(h).unwrap()
                },
                &inputs,
                1e-5,
            );
            prop_assert!(worst <= 1e-4, "worst relative error {}", worst);
        }
    }

    fn fd_check_step(
        build: impl Fn(&mut Tape, &[Var]) -> Var,
        inputs: &[(Vec<usize>, Vec<f64>)],
        h: f64,
    ) -> f64 {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|(s, v)| leaf(&mut t, s, v)).collect();
        let root = build(&mut t, &vars);
        t.backward(root).unwrap();
        let mut worst: f64 = 0.0;
        for (p, var) in vars.iter().enumerate() {
            let grads = t.grad(*var).unwrap().to_vec();
            for (k, g) in grads.iter().enumerate() {
                let eval = |d: f64| {
                    let mut inp = inputs.to_vec();
                    inp[p].1[k] += d;
                    let mut t = Tape::new();
                    let vars: Vec<Var> = inp.iter().map(|(s, v)| leaf(&mut t, s, v)).collect();
                    let root = build(&mut t, &vars);
                    t.item(root)
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let rel = (g - num).abs() / g.abs().max(num.abs()).max(1e-8);
                worst = worst.max(rel);
            }
        }
        worst
    }
}
