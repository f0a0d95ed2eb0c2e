use crate::scalar::Scalar;

use super::AutodiffError;

/// Position of a node inside its owning [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Handle to a tensor node. Values, shape and gradient live in the [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Tensor {
    id: NodeId,
}

impl Tensor {
    pub fn id(self) -> NodeId {
        self.id
    }
}

/// Operation kinds, used for diagnostics and for backward fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    MatMul,
    Exp,
    Log,
    Neg,
    Tanh,
    Sigmoid,
    LogSigmoid,
    Sum,
    Mean,
    Softmax,
    LogSoftmax,
    Gather,
    Rows,
}

impl OpKind {
    pub const ALL: [OpKind; 18] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::MatMul,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Neg,
        OpKind::Tanh,
        OpKind::Sigmoid,
        OpKind::LogSigmoid,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::Gather,
        OpKind::Rows,
    ];

    /// Lowercase name, e.g. `log_softmax`.
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::MatMul => "matmul",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Neg => "neg",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::LogSigmoid => "log_sigmoid",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Gather => "gather",
            OpKind::Rows => "rows",
        }
    }
}

impl std::str::FromStr for OpKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown op `{s}`"))
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    MatMul(NodeId, NodeId),
    Exp(NodeId),
    Log(NodeId),
    Neg(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    LogSigmoid(NodeId),
    Sum(NodeId, Option<usize>),
    Mean(NodeId, Option<usize>),
    Softmax(NodeId, usize),
    LogSoftmax(NodeId, usize),
    Gather(NodeId, Vec<usize>),
    Rows(NodeId, Vec<usize>),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::Neg(_) => OpKind::Neg,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::LogSigmoid(_) => OpKind::LogSigmoid,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LogSoftmax(..) => OpKind::LogSoftmax,
            Op::Gather(..) => OpKind::Gather,
            Op::Rows(..) => OpKind::Rows,
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Append-only define-by-run tape. Every op record references earlier nodes
/// only, so the node order is a topological order.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    fault: Option<(OpKind, T)>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    sizes: Vec<usize>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the root w.r.t. `t`, or `None` when `t` does not require
    /// grad or is not an ancestor of the root.
    pub fn get(&self, t: Tensor) -> Option<&[T]> {
        self.grads.get(t.id.0).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but returns zeros for non-ancestors.
    pub fn get_or_zeros(&self, t: Tensor) -> Vec<T> {
        match self.get(t) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); self.sizes[t.id.0]],
        }
    }

    /// Node ids that received a gradient.
    pub fn populated(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.grads
            .iter()
            .enumerate()
            .filter(|(_, g)| g.is_some())
            .map(|(i, _)| NodeId(i))
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits `shape` around `axis` into (outer, len, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// log σ(x) in the branch form that never overflows.
pub(crate) fn log_sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Test hook: scales the local backward rule of `op` by `factor`.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, op: OpKind, factor: T) {
        self.fault = Some((op, factor));
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<T>, requires_grad: bool, op: Op<T>) -> Tensor {
        debug_assert_eq!(numel(&shape), values.len());
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            shape,
            values,
            requires_grad,
            op,
        });
        Tensor { id }
    }

    fn node(&self, t: Tensor) -> &Node<T> {
        &self.nodes[t.id.0]
    }

    fn leaf(&mut self, shape: &[usize], values: Vec<T>, requires_grad: bool) -> Result<Tensor, AutodiffError> {
        if numel(shape) != values.len() {
            return Err(AutodiffError::LeafSize {
                shape: shape.to_vec(),
                len: values.len(),
            });
        }
        Ok(self.push(shape.to_vec(), values, requires_grad, Op::Leaf))
    }

    /// Trainable leaf.
    pub fn param(&mut self, shape: &[usize], values: Vec<T>) -> Result<Tensor, AutodiffError> {
        self.leaf(shape, values, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], values: Vec<T>) -> Result<Tensor, AutodiffError> {
        self.leaf(shape, values, false)
    }

    pub fn scalar(&mut self, value: T) -> Tensor {
        self.push(Vec::new(), vec![value], false, Op::Leaf)
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.node(t).shape
    }

    pub fn values(&self, t: Tensor) -> &[T] {
        &self.node(t).values
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.node(t).requires_grad
    }

    pub fn op_kind(&self, t: Tensor) -> OpKind {
        self.node(t).op.kind()
    }

    pub fn node_kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    /// Value of a single-element tensor.
    pub fn item(&self, t: Tensor) -> T {
        self.node(t).values[0]
    }

    fn check_finite(&self, op: &'static str, t: Tensor) -> Result<(), AutodiffError> {
        match self.node(t).values.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(AutodiffError::NonFinite { op, index }),
            None => Ok(()),
        }
    }

    fn unary(&mut self, a: Tensor, op: Op<T>, f: impl Fn(T) -> T) -> Tensor {
        let node = self.node(a);
        let values = node.values.iter().map(|&v| f(v)).collect();
        let shape = node.shape.clone();
        let rg = node.requires_grad;
        self.push(shape, values, rg, op)
    }

    /// Elementwise binary op; operands must have identical shapes or one of
    /// them must hold a single element.
    fn binary(
        &mut self,
        name: &'static str,
        a: Tensor,
        b: Tensor,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor, AutodiffError> {
        let (na, nb) = (self.node(a), self.node(b));
        let (shape, values) = if na.shape == nb.shape {
            let v = na.values.iter().zip(&nb.values).map(|(&x, &y)| f(x, y)).collect();
            (na.shape.clone(), v)
        } else if nb.values.len() == 1 {
            let y = nb.values[0];
            (na.shape.clone(), na.values.iter().map(|&x| f(x, y)).collect())
        } else if na.values.len() == 1 {
            let x = na.values[0];
            (nb.shape.clone(), nb.values.iter().map(|&y| f(x, y)).collect())
        } else {
            return Err(AutodiffError::ShapeMismatch {
                op: name,
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            });
        };
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(shape, values, rg, op))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, AutodiffError> {
        self.binary("add", a, b, Op::Add(a.id, b.id), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, AutodiffError> {
        self.binary("sub", a, b, Op::Sub(a.id, b.id), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, AutodiffError> {
        self.binary("mul", a, b, Op::Mul(a.id, b.id), |x, y| x * y)
    }

    /// Multiplication by a constant that is not part of the graph.
    pub fn scale(&mut self, a: Tensor, c: T) -> Tensor {
        self.unary(a, Op::Scale(a.id, c), |x| x * c)
    }

    /// Plain 2-D matrix product `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, AutodiffError> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            });
        }
        let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
        let values = matmul_raw(&na.values, &nb.values, m, k, n);
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(vec![m, n], values, rg, Op::MatMul(a.id, b.id)))
    }

    pub fn exp(&mut self, a: Tensor) -> Result<Tensor, AutodiffError> {
        self.check_finite("exp", a)?;
        Ok(self.unary(a, Op::Exp(a.id), |x| x.exp()))
    }

    pub fn log(&mut self, a: Tensor) -> Result<Tensor, AutodiffError> {
        self.check_finite("log", a)?;
        if let Some(index) = self.node(a).values.iter().position(|&v| v <= T::zero()) {
            return Err(AutodiffError::Domain {
                op: "log",
                index,
                value: self.node(a).values[index].f64(),
            });
        }
        Ok(self.unary(a, Op::Log(a.id), |x| x.ln()))
    }

    pub fn neg(&mut self, a: Tensor) -> Tensor {
        self.unary(a, Op::Neg(a.id), |x| -x)
    }

    pub fn tanh(&mut self, a: Tensor) -> Tensor {
        self.unary(a, Op::Tanh(a.id), |x| x.tanh())
    }

    pub fn sigmoid(&mut self, a: Tensor) -> Tensor {
        self.unary(a, Op::Sigmoid(a.id), sigmoid_scalar)
    }

    pub fn log_sigmoid(&mut self, a: Tensor) -> Tensor {
        self.unary(a, Op::LogSigmoid(a.id), log_sigmoid_scalar)
    }

    fn check_axis(&self, a: Tensor, axis: usize) -> Result<(), AutodiffError> {
        let shape = &self.node(a).shape;
        if axis >= shape.len() {
            return Err(AutodiffError::Axis {
                axis,
                shape: shape.clone(),
            });
        }
        Ok(())
    }

    fn reduce(&mut self, a: Tensor, axis: Option<usize>, mean: bool) -> Result<Tensor, AutodiffError> {
        let node = self.node(a);
        let rg = node.requires_grad;
        let (shape, values) = match axis {
            None => {
                let mut s: T = node.values.iter().copied().sum();
                if mean {
                    s = s / T::of_usize(node.values.len().max(1));
                }
                (Vec::new(), vec![s])
            }
            Some(ax) => {
                self.check_axis(a, ax)?;
                let (outer, len, inner) = axis_split(&node.shape, ax);
                let mut out = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for i in 0..len {
                        for j in 0..inner {
                            out[o * inner + j] = out[o * inner + j] + node.values[(o * len + i) * inner + j];
                        }
                    }
                }
                if mean {
                    let d = T::of_usize(len.max(1));
                    out.iter_mut().for_each(|v| *v = *v / d);
                }
                let mut shape = node.shape.clone();
                shape.remove(ax);
                (shape, out)
            }
        };
        let op = if mean { Op::Mean(a.id, axis) } else { Op::Sum(a.id, axis) };
        Ok(self.push(shape, values, rg, op))
    }

    /// Sum over `axis`, or over every element when `axis` is `None`.
    pub fn sum(&mut self, a: Tensor, axis: Option<usize>) -> Result<Tensor, AutodiffError> {
        self.reduce(a, axis, false)
    }

    pub fn mean(&mut self, a: Tensor, axis: Option<usize>) -> Result<Tensor, AutodiffError> {
        self.reduce(a, axis, true)
    }

    fn softmax_like(&mut self, a: Tensor, axis: usize, log: bool) -> Result<Tensor, AutodiffError> {
        self.check_axis(a, axis)?;
        self.check_finite(if log { "log_softmax" } else { "softmax" }, a)?;
        let node = self.node(a);
        let (outer, len, inner) = axis_split(&node.shape, axis);
        let mut out = vec![T::zero(); node.values.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let max = (0..len).map(|i| node.values[at(i)]).fold(T::neg_infinity(), T::max);
                let z: T = (0..len).map(|i| (node.values[at(i)] - max).exp()).sum();
                let log_z = max + z.ln();
                for i in 0..len {
                    let lp = node.values[at(i)] - log_z;
                    out[at(i)] = if log { lp } else { (node.values[at(i)] - max).exp() / z };
                }
            }
        }
        let shape = node.shape.clone();
        let rg = node.requires_grad;
        let op = if log { Op::LogSoftmax(a.id, axis) } else { Op::Softmax(a.id, axis) };
        Ok(self.push(shape, out, rg, op))
    }

    pub fn softmax(&mut self, a: Tensor, axis: usize) -> Result<Tensor, AutodiffError> {
        self.softmax_like(a, axis, false)
    }

    pub fn log_softmax(&mut self, a: Tensor, axis: usize) -> Result<Tensor, AutodiffError> {
        self.softmax_like(a, axis, true)
    }

    /// Picks `a[i, indices[i]]` from a `[m, n]` matrix, giving a `[m]` vector.
    pub fn gather(&mut self, a: Tensor, indices: &[usize]) -> Result<Tensor, AutodiffError> {
        let node = self.node(a);
        if node.shape.len() != 2 || node.shape[0] != indices.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "gather",
                lhs: node.shape.clone(),
                rhs: vec![indices.len()],
            });
        }
        let n = node.shape[1];
        if let Some(&index) = indices.iter().find(|&&i| i >= n) {
            return Err(AutodiffError::Index { op: "gather", index, bound: n });
        }
        let values = indices.iter().enumerate().map(|(i, &c)| node.values[i * n + c]).collect();
        let rg = node.requires_grad;
        Ok(self.push(vec![indices.len()], values, rg, Op::Gather(a.id, indices.to_vec())))
    }

    /// Selects whole rows of a `[m, n]` matrix (embedding lookup).
    pub fn rows(&mut self, a: Tensor, rows: &[usize]) -> Result<Tensor, AutodiffError> {
        let node = self.node(a);
        if node.shape.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "rows",
                lhs: node.shape.clone(),
                rhs: vec![rows.len()],
            });
        }
        let (m, n) = (node.shape[0], node.shape[1]);
        if let Some(&index) = rows.iter().find(|&&r| r >= m) {
            return Err(AutodiffError::Index { op: "rows", index, bound: m });
        }
        let mut values = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            values.extend_from_slice(&node.values[r * n..(r + 1) * n]);
        }
        let rg = node.requires_grad;
        Ok(self.push(vec![rows.len(), n], values, rg, Op::Rows(a.id, rows.to_vec())))
    }

    /// Reverse sweep from a single-element root.
    pub fn backward(&self, root: Tensor) -> Result<Gradients<T>, AutodiffError> {
        let root_node = self.node(root);
        if root_node.values.len() != 1 {
            return Err(AutodiffError::NonScalarRoot {
                shape: root_node.shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if root_node.requires_grad {
            grads[root.id.0] = Some(vec![T::one()]);
        }
        for idx in (0..=root.id.0).rev() {
            let Some(upstream) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let factor = match self.fault {
                Some((kind, f)) if kind == node.op.kind() => f,
                _ => T::one(),
            };
            self.propagate(node, &upstream, factor, &mut grads);
            grads[idx] = Some(upstream);
        }
        Ok(Gradients {
            grads,
            sizes: self.nodes.iter().map(|n| n.values.len()).collect(),
        })
    }

    fn propagate(&self, node: &Node<T>, up: &[T], factor: T, grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let mut acc = |id: NodeId, contrib: Vec<T>| {
            if !nodes[id.0].requires_grad {
                return;
            }
            let target = &nodes[id.0];
            // Scalar-broadcast operands collapse the contribution by summation.
            let contrib = if contrib.len() != target.values.len() {
                debug_assert_eq!(target.values.len(), 1);
                vec![contrib.iter().copied().sum()]
            } else {
                contrib
            };
            match &mut grads[id.0] {
                Some(g) => g.iter_mut().zip(contrib).for_each(|(g, c)| *g = *g + c * factor),
                slot @ None => *slot = Some(contrib.into_iter().map(|c| c * factor).collect()),
            }
        };
        let vals = |id: NodeId| -> &[T] { &nodes[id.0].values };
        // Expands a single-element operand to the output length.
        let bcast = |id: NodeId, n: usize| -> Vec<T> {
            let v = vals(id);
            if v.len() == n {
                v.to_vec()
            } else {
                vec![v[0]; n]
            }
        };
        let n = up.len();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, up.to_vec());
                acc(*b, up.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, up.to_vec());
                acc(*b, up.iter().map(|&u| -u).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (bcast(*a, n), bcast(*b, n));
                acc(*a, up.iter().zip(&vb).map(|(&u, &y)| u * y).collect());
                acc(*b, up.iter().zip(&va).map(|(&u, &x)| u * x).collect());
            }
            Op::Scale(a, c) => acc(*a, up.iter().map(|&u| u * *c).collect()),
            Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (m, k, nn) = (sa[0], sa[1], sb[1]);
                if nodes[a.0].requires_grad {
                    let bt = transpose(vals(*b), k, nn);
                    acc(*a, matmul_raw(up, &bt, m, nn, k));
                }
                if nodes[b.0].requires_grad {
                    let at = transpose(vals(*a), m, k);
                    acc(*b, matmul_raw(&at, up, k, m, nn));
                }
            }
            Op::Exp(a) => acc(*a, up.iter().zip(&node.values).map(|(&u, &y)| u * y).collect()),
            Op::Log(a) => acc(*a, up.iter().zip(vals(*a)).map(|(&u, &x)| u / x).collect()),
            Op::Neg(a) => acc(*a, up.iter().map(|&u| -u).collect()),
            Op::Tanh(a) => acc(
                *a,
                up.iter().zip(&node.values).map(|(&u, &y)| u * (T::one() - y * y)).collect(),
            ),
            Op::Sigmoid(a) => acc(
                *a,
                up.iter().zip(&node.values).map(|(&u, &s)| u * s * (T::one() - s)).collect(),
            ),
            Op::LogSigmoid(a) => acc(
                *a,
                up.iter().zip(vals(*a)).map(|(&u, &x)| u * sigmoid_scalar(-x)).collect(),
            ),
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let src = &nodes[a.0];
                let is_mean = matches!(node.op, Op::Mean(..));
                let out = match axis {
                    None => {
                        let d = if is_mean { T::of_usize(src.values.len().max(1)) } else { T::one() };
                        vec![up[0] / d; src.values.len()]
                    }
                    Some(ax) => {
                        let (outer, len, inner) = axis_split(&src.shape, *ax);
                        let d = if is_mean { T::of_usize(len.max(1)) } else { T::one() };
                        let mut g = vec![T::zero(); src.values.len()];
                        for o in 0..outer {
                            for i in 0..len {
                                for j in 0..inner {
                                    g[(o * len + i) * inner + j] = up[o * inner + j] / d;
                                }
                            }
                        }
                        g
                    }
                };
                acc(*a, out);
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                let y = &node.values;
                let mut g = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * len + i) * inner + j;
                        let dot: T = (0..len).map(|i| up[at(i)] * y[at(i)]).sum();
                        for i in 0..len {
                            g[at(i)] = y[at(i)] * (up[at(i)] - dot);
                        }
                    }
                }
                acc(*a, g);
            }
            Op::LogSoftmax(a, axis) => {
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                let y = &node.values;
                let mut g = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * len + i) * inner + j;
                        let total: T = (0..len).map(|i| up[at(i)]).sum();
                        for i in 0..len {
                            g[at(i)] = up[at(i)] - y[at(i)].exp() * total;
                        }
                    }
                }
                acc(*a, g);
            }
            Op::Gather(a, indices) => {
                let cols = nodes[a.0].shape[1];
                let mut g = vec![T::zero(); nodes[a.0].values.len()];
                for (i, &c) in indices.iter().enumerate() {
                    g[i * cols + c] = up[i];
                }
                acc(*a, g);
            }
            Op::Rows(a, rows) => {
                let cols = nodes[a.0].shape[1];
                let mut g = vec![T::zero(); nodes[a.0].values.len()];
                for (i, &r) in rows.iter().enumerate() {
                    for c in 0..cols {
                        g[r * cols + c] = g[r * cols + c] + up[i * cols + c];
                    }
                }
                acc(*a, g);
            }
        }
    }
}

fn transpose<T: Scalar>(v: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); v.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = v[r * cols + c];
        }
    }
    out
}

fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &y) in row.iter_mut().zip(brow) {
                *o = *o + x * y;
            }
        }
    }
    out
}
