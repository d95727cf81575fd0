use super::kernels::{axpy, dot, gemm_nn, gemm_nt, gemm_tn};
use super::{Tensor, TensorError};
use crate::nn::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Tanh,
    Sigmoid,
    Relu,
    Scale,
}

/// Second argument of [`Graph::elementwise`].
#[derive(Debug, Clone, Copy)]
pub enum Operand<T> {
    Node(NodeId),
    Scalar(T),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    VarPopulation,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Log,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Binary(Binary, NodeId, NodeId),
    Scale(NodeId, T),
    Offset(NodeId),
    Unary(Unary, NodeId),
    Clamp(NodeId, T, T),
    AddRow(NodeId, NodeId),
    AddCol(NodeId, NodeId),
    MulCol(NodeId, NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Concat(Vec<NodeId>, usize),
    Slice(NodeId, usize, usize),
    Reshape(NodeId),
    Reduce(Reduction, NodeId),
    WeightedSum(NodeId, Vec<NodeId>),
}

#[derive(Debug, Clone)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Execution record of one forward pass.
///
/// Nodes are stored in execution order, which is a topological order, so the
/// reverse pass is a single backwards sweep.
#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bound: Vec<Option<NodeId>>,
    frozen: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient of one scalar loss with respect to every node that needs it.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: Vec::new(),
            frozen: false,
        }
    }

    /// A graph whose bound parameters do not request gradients (evaluation only).
    pub fn inference() -> Self {
        Self {
            frozen: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id.0]
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn scalar_value(&self, id: NodeId) -> T {
        self.nodes[id.0].value[0]
    }

    /// Copies a node out as a standalone tensor.
    pub fn tensor(&self, id: NodeId) -> Tensor<T> {
        let n = self.node(id);
        Tensor::new(&n.shape, n.value.clone()).expect("node shapes are consistent")
    }

    /// Records a leaf; it takes part in differentiation if `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> NodeId {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, t: &Tensor<T>) -> NodeId {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<T>) -> Result<NodeId, TensorError> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape, t.data, Op::Leaf, false))
    }

    pub fn zeros(&mut self, shape: &[usize]) -> NodeId {
        let n = shape.iter().product();
        self.push(shape.to_vec(), vec![T::zero(); n], Op::Leaf, false)
    }

    /// Cuts the differentiation path: a constant copy of `id`.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let n = self.node(id);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    /// Binds a stored parameter as a leaf. Repeated binds of the same id return
    /// the same node, so a graph must only ever see one [`ParamStore`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        let idx = id.index();
        if idx >= self.bound.len() {
            self.bound.resize(idx + 1, None);
        }
        if let Some(node) = self.bound[idx] {
            return node;
        }
        let t = store.get(id);
        let needs = !self.frozen && t.requires_grad();
        let node = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, needs);
        self.bound[idx] = Some(node);
        node
    }

    /// Parameters bound so far, with their graph nodes.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, NodeId)> + '_ {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.map(|n| (ParamId::from_index(i), n)))
    }

    fn matrix_dims(&self, id: NodeId, op: &'static str) -> Result<(usize, usize), TensorError> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(TensorError::Invalid(format!("{op}: expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// `a[m×k] · b[k×p]`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, p) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * p];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, p);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, p], out, Op::MatMul(a, b), ng))
    }

    /// `a[m×k] · b[p×k]ᵀ`, the layout of `x · Wᵀ` for a weight stored as `[out×in]`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, k) = self.matrix_dims(a, "matmul_t")?;
        let (p, k2) = self.matrix_dims(b, "matmul_t")?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul_t",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * p];
        gemm_nt(self.value(a), self.value(b), &mut out, m, k, p);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, p], out, Op::MatMulT(a, b), ng))
    }

    fn binary(&mut self, kind: Binary, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let (sa, sb) = (self.shape(a), self.shape(b));
        let broadcast = self.value(b).len() == 1;
        if sa != sb && !broadcast {
            return Err(TensorError::Shape {
                op: name,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let shape = sa.to_vec();
        let av = self.value(a);
        let bv = self.value(b);
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let out: Vec<T> = if broadcast {
            let y = bv[0];
            av.iter().map(|&x| f(x, y)).collect()
        } else {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(shape, out, Op::Binary(kind, a, b), ng))
    }

    /// Elementwise sum; `b` may also hold a single element.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        let out = self.value(a).iter().map(|&x| x * factor).collect();
        let (shape, ng) = (self.shape(a).to_vec(), self.ng(a));
        self.push(shape, out, Op::Scale(a, factor), ng)
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: NodeId, c: T) -> NodeId {
        let out = self.value(a).iter().map(|&x| x + c).collect();
        let (shape, ng) = (self.shape(a).to_vec(), self.ng(a));
        self.push(shape, out, Op::Offset(a), ng)
    }

    fn unary(&mut self, kind: Unary, a: NodeId) -> NodeId {
        let f = |x: T| match kind {
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Relu => x.max(T::zero()),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sqrt => x.sqrt(),
        };
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let (shape, ng) = (self.shape(a).to_vec(), self.ng(a));
        self.push(shape, out, Op::Unary(kind, a), ng)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Relu, a)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Exp, a)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Log, a)
    }

    /// Square root; the derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Sqrt, a)
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&mut self, a: NodeId, lo: T, hi: T) -> NodeId {
        let out = self.value(a).iter().map(|&x| x.max(lo).min(hi)).collect();
        let (shape, ng) = (self.shape(a).to_vec(), self.ng(a));
        self.push(shape, out, Op::Clamp(a, lo, hi), ng)
    }

    /// One entry point for the elementwise family.
    pub fn elementwise(
        &mut self,
        op: ElementwiseOp,
        a: NodeId,
        b: Option<Operand<T>>,
    ) -> Result<NodeId, TensorError> {
        let missing = || TensorError::Invalid(format!("{op:?} needs a second operand"));
        match op {
            ElementwiseOp::Tanh => Ok(self.tanh(a)),
            ElementwiseOp::Sigmoid => Ok(self.sigmoid(a)),
            ElementwiseOp::Relu => Ok(self.relu(a)),
            ElementwiseOp::Scale => match b.ok_or_else(missing)? {
                Operand::Scalar(c) => Ok(self.scale(a, c)),
                Operand::Node(n) => self.mul(a, n),
            },
            ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul => {
                let rhs = match b.ok_or_else(missing)? {
                    Operand::Node(n) => n,
                    Operand::Scalar(c) => self.push(vec![1], vec![c], Op::Leaf, false),
                };
                match op {
                    ElementwiseOp::Add => self.add(a, rhs),
                    ElementwiseOp::Sub => self.sub(a, rhs),
                    _ => self.mul(a, rhs),
                }
            }
        }
    }

    /// `x[m×n] + b[n]` with `b` repeated on every row.
    pub fn add_row(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.value(b).len() != n {
            return Err(TensorError::Shape {
                op: "add_row",
                left: self.shape(x).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let bv = self.value(b);
        let out = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv).map(|(&v, &c)| v + c))
            .collect();
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow(x, b), ng))
    }

    fn column_check(&self, x: NodeId, c: NodeId, op: &'static str) -> Result<usize, TensorError> {
        let (m, n) = self.matrix_dims(x, op)?;
        if self.value(c).len() != m {
            return Err(TensorError::Shape {
                op,
                left: self.shape(x).to_vec(),
                right: self.shape(c).to_vec(),
            });
        }
        Ok(n)
    }

    /// `x[m×n] + c[m×1]` with `c` repeated on every column.
    pub fn add_col(&mut self, x: NodeId, c: NodeId) -> Result<NodeId, TensorError> {
        let n = self.column_check(x, c, "add_col")?;
        let cv = self.value(c);
        let out = self
            .value(x)
            .chunks(n)
            .zip(cv)
            .flat_map(|(row, &s)| row.iter().map(move |&v| v + s))
            .collect();
        let ng = self.ng(x) || self.ng(c);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddCol(x, c), ng))
    }

    /// `x[m×n] ⊙ s[m×1]`: row `i` scaled by `s[i]`.
    pub fn mul_col(&mut self, x: NodeId, s: NodeId) -> Result<NodeId, TensorError> {
        let n = self.column_check(x, s, "mul_col")?;
        let sv = self.value(s);
        let out = self
            .value(x)
            .chunks(n)
            .zip(sv)
            .flat_map(|(row, &f)| row.iter().map(move |&v| v * f))
            .collect();
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(self.shape(x).to_vec(), out, Op::MulCol(x, s), ng))
    }

    fn last_axis_rows(&self, x: NodeId, op: &'static str) -> Result<usize, TensorError> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if n == 0 || self.value(x).is_empty() {
            return Err(TensorError::Empty { op });
        }
        Ok(n)
    }

    /// Softmax along the last axis, with the row maximum subtracted first.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let n = self.last_axis_rows(x, "softmax")?;
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut total = T::zero();
            for &v in row {
                let e = (v - max).exp();
                total += e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e /= total);
        }
        let (shape, ng) = (self.shape(x).to_vec(), self.ng(x));
        Ok(self.push(shape, out, Op::Softmax(x), ng))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let n = self.last_axis_rows(x, "log_softmax")?;
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            out.extend(row.iter().map(|&v| v - lse));
        }
        let (shape, ng) = (self.shape(x).to_vec(), self.ng(x));
        Ok(self.push(shape, out, Op::LogSoftmax(x), ng))
    }

    /// Joins `parts` along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, TensorError> {
        let first = *parts.first().ok_or(TensorError::Empty { op: "concat" })?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Axis {
                op: "concat",
                axis,
                shape: base,
            });
        }
        let mut axis_len = 0;
        for &p in parts {
            let s = self.shape(p);
            let same_rank = s.len() == base.len();
            if !same_rank || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(TensorError::Shape {
                    op: "concat",
                    left: base,
                    right: s.to_vec(),
                });
            }
            axis_len += s[axis];
        }
        if parts.len() == 1 {
            let value = self.value(first).to_vec();
            let ng = self.ng(first);
            return Ok(self.push(base, value, Op::Concat(parts.to_vec(), axis), ng));
        }
        let (outer, inner) = outer_inner(&base, axis);
        let mut out = Vec::with_capacity(outer * axis_len * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = axis_len;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(shape, out, Op::Concat(parts.to_vec(), axis), ng))
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        let first = *parts.first().ok_or(TensorError::Empty { op: "concat" })?;
        let axis = self.shape(first).len() - 1;
        self.concat(parts, axis)
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::Axis { op: "slice", axis, shape });
        }
        let (outer, inner) = outer_inner(&shape, axis);
        let full = shape[axis] * inner;
        let v = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&v[o * full + start * inner..o * full + (start + len) * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let ng = self.ng(x);
        Ok(self.push(new_shape, out, Op::Slice(x, axis, start), ng))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: self.value(x).len(),
            });
        }
        let (value, ng) = (self.value(x).to_vec(), self.ng(x));
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), ng))
    }

    /// Reduces all entries to a one-element tensor. Variance divides by `n`.
    pub fn reduce(&mut self, stat: Reduction, x: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(TensorError::Empty { op: "reduce" });
        }
        let n = T::of(v.len() as f64);
        let sum: T = v.iter().copied().sum();
        let out = match stat {
            Reduction::Sum => sum,
            Reduction::Mean => sum / n,
            Reduction::VarPopulation => {
                // Shifting by the first entry makes a constant series exactly zero.
                let shift = v[0];
                let mean = shift + v.iter().map(|&a| a - shift).sum::<T>() / n;
                v.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / n
            }
        };
        let ng = self.ng(x);
        Ok(self.push(vec![1], vec![out], Op::Reduce(stat, x), ng))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.reduce(Reduction::Sum, x)
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.reduce(Reduction::Mean, x)
    }

    pub fn var(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.reduce(Reduction::VarPopulation, x)
    }

    /// `Σ_j weights[:, j] ⊙ states[j]` for `weights[m×k]` and `k` states of shape `[m×d]`.
    pub fn weighted_sum(&mut self, weights: NodeId, states: &[NodeId]) -> Result<NodeId, TensorError> {
        let (m, k) = self.matrix_dims(weights, "weighted_sum")?;
        let first = *states.first().ok_or(TensorError::Empty { op: "weighted_sum" })?;
        let (m2, d) = self.matrix_dims(first, "weighted_sum")?;
        if k != states.len() || m != m2 {
            return Err(TensorError::Shape {
                op: "weighted_sum",
                left: self.shape(weights).to_vec(),
                right: vec![states.len(), m2, d],
            });
        }
        for &s in states {
            if self.shape(s) != [m, d] {
                return Err(TensorError::Shape {
                    op: "weighted_sum",
                    left: vec![m, d],
                    right: self.shape(s).to_vec(),
                });
            }
        }
        let w = self.value(weights);
        let mut out = vec![T::zero(); m * d];
        for (j, &s) in states.iter().enumerate() {
            let sv = self.value(s);
            for i in 0..m {
                axpy(w[i * k + j], &sv[i * d..(i + 1) * d], &mut out[i * d..(i + 1) * d]);
            }
        }
        let ng = self.ng(weights) || states.iter().any(|&s| self.ng(s));
        Ok(self.push(vec![m, d], out, Op::WeightedSum(weights, states.to_vec()), ng))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, TensorError> {
        let ln = self.node(loss);
        if ln.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let p = self.shape(*b)[1];
                if self.ng(*a) {
                    // dA = G · Bᵀ
                    let buf = slot(grads, *a, m * k);
                    gemm_nt(g, self.value(*b), buf, m, p, k);
                }
                if self.ng(*b) {
                    // dB = Aᵀ · G
                    let buf = slot(grads, *b, k * p);
                    gemm_tn(self.value(*a), g, buf, m, k, p);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let p = self.shape(*b)[0];
                if self.ng(*a) {
                    // dA = G · B
                    let buf = slot(grads, *a, m * k);
                    gemm_nn(g, self.value(*b), buf, m, p, k);
                }
                if self.ng(*b) {
                    // dB = Gᵀ · A
                    let buf = slot(grads, *b, p * k);
                    gemm_tn(g, self.value(*a), buf, m, p, k);
                }
            }
            Op::Binary(kind, a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let broadcast = bv.len() == 1 && av.len() != 1;
                let bat = |i: usize| if broadcast { bv[0] } else { bv[i] };
                if self.ng(*a) {
                    let buf = slot(grads, *a, av.len());
                    for i in 0..av.len() {
                        buf[i] += match kind {
                            Binary::Add | Binary::Sub => g[i],
                            Binary::Mul => g[i] * bat(i),
                            Binary::Div => g[i] / bat(i),
                        };
                    }
                }
                if self.ng(*b) {
                    let buf = slot(grads, *b, bv.len());
                    for i in 0..av.len() {
                        let d = match kind {
                            Binary::Add => g[i],
                            Binary::Sub => -g[i],
                            Binary::Mul => g[i] * av[i],
                            Binary::Div => -g[i] * av[i] / (bat(i) * bat(i)),
                        };
                        buf[if broadcast { 0 } else { i }] += d;
                    }
                }
            }
            Op::Scale(a, f) => {
                let buf = slot(grads, *a, g.len());
                axpy(*f, g, buf);
            }
            Op::Offset(a) => {
                let buf = slot(grads, *a, g.len());
                axpy(T::one(), g, buf);
            }
            Op::Unary(kind, a) => {
                let x = self.value(*a);
                let buf = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    let d = match kind {
                        Unary::Tanh => T::one() - y[i] * y[i],
                        Unary::Sigmoid => y[i] * (T::one() - y[i]),
                        Unary::Relu => {
                            if x[i] > T::zero() {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        Unary::Exp => y[i],
                        Unary::Log => T::one() / x[i],
                        Unary::Sqrt => {
                            if y[i] > T::zero() {
                                T::one() / (T::of(2.0) * y[i])
                            } else {
                                T::zero()
                            }
                        }
                    };
                    buf[i] += g[i] * d;
                }
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                let buf = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    if x[i] >= *lo && x[i] <= *hi {
                        buf[i] += g[i];
                    }
                }
            }
            Op::AddRow(x, b) => {
                let n = self.value(*b).len();
                if self.ng(*x) {
                    axpy(T::one(), g, slot(grads, *x, g.len()));
                }
                if self.ng(*b) {
                    let buf = slot(grads, *b, n);
                    for row in g.chunks(n) {
                        axpy(T::one(), row, buf);
                    }
                }
            }
            Op::AddCol(x, c) => {
                let m = self.value(*c).len();
                let n = g.len() / m;
                if self.ng(*x) {
                    axpy(T::one(), g, slot(grads, *x, g.len()));
                }
                if self.ng(*c) {
                    let buf = slot(grads, *c, m);
                    for (i, row) in g.chunks(n).enumerate() {
                        buf[i] += row.iter().copied().sum();
                    }
                }
            }
            Op::MulCol(x, s) => {
                let m = self.value(*s).len();
                let n = g.len() / m;
                let sv = self.value(*s);
                let xv = self.value(*x);
                if self.ng(*x) {
                    let buf = slot(grads, *x, g.len());
                    for i in 0..m {
                        axpy(sv[i], &g[i * n..(i + 1) * n], &mut buf[i * n..(i + 1) * n]);
                    }
                }
                if self.ng(*s) {
                    let buf = slot(grads, *s, m);
                    for i in 0..m {
                        buf[i] += dot(&g[i * n..(i + 1) * n], &xv[i * n..(i + 1) * n]);
                    }
                }
            }
            Op::Softmax(x) => {
                let n = *node.shape.last().unwrap();
                let buf = slot(grads, *x, g.len());
                for ((gr, yr), br) in g.chunks(n).zip(y.chunks(n)).zip(buf.chunks_mut(n)) {
                    let inner: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for i in 0..n {
                        br[i] += yr[i] * (gr[i] - inner);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let n = *node.shape.last().unwrap();
                let buf = slot(grads, *x, g.len());
                for ((gr, yr), br) in g.chunks(n).zip(y.chunks(n)).zip(buf.chunks_mut(n)) {
                    let total: T = gr.iter().copied().sum();
                    for i in 0..n {
                        br[i] += gr[i] - yr[i].exp() * total;
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let (outer, inner) = outer_inner(&node.shape, *axis);
                let full = node.shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.shape(p)[*axis] * inner;
                    if self.ng(p) {
                        let buf = slot(grads, p, outer * chunk);
                        for o in 0..outer {
                            axpy(
                                T::one(),
                                &g[o * full + offset..o * full + offset + chunk],
                                &mut buf[o * chunk..(o + 1) * chunk],
                            );
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Slice(x, axis, start) => {
                let src = self.shape(*x);
                let (outer, inner) = outer_inner(src, *axis);
                let full = src[*axis] * inner;
                let chunk = node.shape[*axis] * inner;
                let total = self.value(*x).len();
                let buf = slot(grads, *x, total);
                for o in 0..outer {
                    let base = o * full + start * inner;
                    axpy(T::one(), &g[o * chunk..(o + 1) * chunk], &mut buf[base..base + chunk]);
                }
            }
            Op::Reshape(x) => {
                axpy(T::one(), g, slot(grads, *x, g.len()));
            }
            Op::Reduce(stat, x) => {
                let xv = self.value(*x);
                let n = T::of(xv.len() as f64);
                let buf = slot(grads, *x, xv.len());
                match stat {
                    Reduction::Sum => buf.iter_mut().for_each(|b| *b += g[0]),
                    Reduction::Mean => buf.iter_mut().for_each(|b| *b += g[0] / n),
                    Reduction::VarPopulation => {
                        let shift = xv[0];
                        let mean = shift + xv.iter().map(|&a| a - shift).sum::<T>() / n;
                        let f = T::of(2.0) * g[0] / n;
                        buf.iter_mut().zip(xv).for_each(|(b, &v)| *b += f * (v - mean));
                    }
                }
            }
            Op::WeightedSum(w, states) => {
                let (m, k) = (self.shape(*w)[0], self.shape(*w)[1]);
                let d = g.len() / m;
                let wv = self.value(*w);
                if self.ng(*w) {
                    let mut dw = vec![T::zero(); m * k];
                    for (j, &s) in states.iter().enumerate() {
                        let sv = self.value(s);
                        for i in 0..m {
                            dw[i * k + j] = dot(&g[i * d..(i + 1) * d], &sv[i * d..(i + 1) * d]);
                        }
                    }
                    axpy(T::one(), &dw, slot(grads, *w, m * k));
                }
                for (j, &s) in states.iter().enumerate() {
                    if self.ng(s) {
                        let buf = slot(grads, s, m * d);
                        for i in 0..m {
                            axpy(wv[i * k + j], &g[i * d..(i + 1) * d], &mut buf[i * d..(i + 1) * d]);
                        }
                    }
                }
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], id: NodeId, len: usize) -> &mut [T] {
    grads[id.0].get_or_insert_with(|| vec![T::zero(); len])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn var(g: &mut Graph<f64>, shape: &[usize], data: &[f64]) -> NodeId {
        g.leaf(&Tensor::from_f64(shape, data).unwrap().with_requires_grad(true))
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let eye = g.constant_from(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = g.constant_from(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0, 3.0, 4.0]);
        let ones = g.constant_from(&[2, 1], vec![1.0, 1.0]).unwrap();
        let y = g.matmul(a, ones).unwrap();
        assert_eq!((g.shape(y), g.value(y)), (&[2, 1][..], &[3.0, 7.0][..]));
        let z = g.zeros(&[2, 2]);
        let y = g.matmul(z, a).unwrap();
        assert!(g.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.zeros(&[2, 3]);
        let b = g.zeros(&[2, 3]);
        let err = g.matmul(a, b).unwrap_err();
        assert!(matches!(&err, TensorError::Shape { left, right, .. } if left == &[2, 3] && right == &[2, 3]));
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn matmul_t_matches_explicit_transpose() {
        let mut g = Graph::new();
        let a = g.constant_from(&[2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0]).unwrap();
        let b = g.constant_from(&[2, 3], vec![0.5, 1.0, 2.0, -1.0, 4.0, 0.0]).unwrap();
        let bt = g.constant_from(&[3, 2], vec![0.5, -1.0, 1.0, 4.0, 2.0, 0.0]).unwrap();
        let x = g.matmul_t(a, b).unwrap();
        let y = g.matmul(a, bt).unwrap();
        assert_eq!(g.value(x), g.value(y));
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let zero = g.constant_from(&[1], vec![0.0]).unwrap();
        let s = g.elementwise(ElementwiseOp::Sigmoid, zero, None).unwrap();
        let t = g.elementwise(ElementwiseOp::Tanh, zero, None).unwrap();
        assert_eq!((g.value(s)[0], g.value(t)[0]), (0.5, 0.0));
        let a = g.constant_from(&[2], vec![1.0, 2.0]).unwrap();
        let b = g.constant_from(&[2], vec![3.0, 4.0]).unwrap();
        let sum = g.elementwise(ElementwiseOp::Add, a, Some(Operand::Node(b))).unwrap();
        assert_eq!(g.value(sum), &[4.0, 6.0]);
        let sc = g.elementwise(ElementwiseOp::Scale, a, Some(Operand::Scalar(-2.0))).unwrap();
        assert_eq!(g.value(sc), &[-2.0, -4.0]);
        let plus = g.elementwise(ElementwiseOp::Sub, a, Some(Operand::Scalar(1.0))).unwrap();
        assert_eq!(g.value(plus), &[0.0, 1.0]);
        let three = g.constant_from(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(g.elementwise(ElementwiseOp::Mul, a, Some(Operand::Node(three))).is_err());
        assert!(g.elementwise(ElementwiseOp::Add, a, None).is_err());
    }

    #[test]
    fn sigmoid_stays_strictly_inside_the_unit_interval() {
        let mut g = Graph::new();
        let x = g.constant_from(&[4], vec![-30.0, -1.0, 1.0, 30.0]).unwrap();
        let s = g.sigmoid(x);
        assert!(g.value(s).iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant_from(&[2], vec![0.0, 0.0]).unwrap();
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y), &[0.5, 0.5]);
        let x = g.constant_from(&[2], vec![1f64.ln(), 3f64.ln()]).unwrap();
        let y = g.softmax(x).unwrap();
        assert!(close(g.value(y), &[0.25, 0.75], 1e-15));
        let x = g.constant_from(&[3], vec![1000.0; 3]).unwrap();
        let y = g.softmax(x).unwrap();
        assert!(close(g.value(y), &[1.0 / 3.0; 3], 1e-15));
    }

    #[test]
    fn softmax_is_row_wise_and_shift_invariant() {
        let mut g = Graph::new();
        let x = g.constant_from(&[2, 3], vec![0.3, -1.2, 2.0, 5.0, 5.5, 4.0]).unwrap();
        let shifted = g.offset(x, 17.25);
        let a = g.softmax(x).unwrap();
        let b = g.softmax(shifted).unwrap();
        assert!(close(g.value(a), g.value(b), 1e-12));
        for row in g.value(a).chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn concat_examples() {
        let mut g = Graph::new();
        let a = g.constant_from(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = g.constant_from(&[1, 1], vec![3.0]).unwrap();
        let c = g.concat_last(&[a, b]).unwrap();
        assert_eq!((g.shape(c), g.value(c)), (&[1, 3][..], &[1.0, 2.0, 3.0][..]));
        let single = g.concat_last(&[a]).unwrap();
        assert_eq!(g.value(single), g.value(a));
        let p = g.zeros(&[2, 3]);
        let q = g.zeros(&[2, 4]);
        let r = g.concat_last(&[p, q]).unwrap();
        assert_eq!(g.shape(r), &[2, 7]);
        let bad = g.zeros(&[3, 4]);
        assert!(g.concat_last(&[p, bad]).is_err());
    }

    #[test]
    fn concat_then_slice_reproduces_parts() {
        let mut g = Graph::new();
        let a = g.constant_from(&[2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let b = g.constant_from(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = g.concat(&[a, b], 1).unwrap();
        let a2 = g.slice(c, 1, 0, 2).unwrap();
        let b2 = g.slice(c, 1, 2, 3).unwrap();
        assert_eq!(g.value(a2), g.value(a));
        assert_eq!(g.value(b2), g.value(b));
        let rows = g.concat(&[a, a], 0).unwrap();
        assert_eq!(g.shape(rows), &[4, 2]);
    }

    #[test]
    fn reductions() {
        let mut g = Graph::<f64>::new();
        let x = g.constant_from(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let m = g.mean(x).unwrap();
        let v = g.var(x).unwrap();
        let s = g.reduce(Reduction::Sum, x).unwrap();
        assert_eq!((g.scalar_value(m), g.scalar_value(s)), (2.0, 6.0));
        assert!((g.scalar_value(v) - 2.0 / 3.0).abs() < 1e-15);
        let c = g.constant_from(&[3], vec![0.7; 3]).unwrap();
        let v = g.var(c).unwrap();
        assert_eq!(g.scalar_value(v), 0.0);
        assert!(g.constant_from(&[0], vec![]).is_err());
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = var(&mut g, &[2], &[1.0, 2.0]);
        let loss = g.sum(x).unwrap();
        assert_eq!(g.backward(loss).unwrap().get(x).unwrap(), &[1.0, 1.0]);

        let mut g = Graph::new();
        let x = var(&mut g, &[1], &[3.0]);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        assert_eq!(g.backward(loss).unwrap().get(x).unwrap(), &[6.0]);

        let mut g = Graph::new();
        let x = var(&mut g, &[1], &[0.0]);
        let s = g.sigmoid(x);
        let loss = g.mean(s).unwrap();
        assert_eq!(g.backward(loss).unwrap().get(x).unwrap(), &[0.25]);
    }

    #[test]
    fn backward_needs_a_scalar_loss() {
        let mut g = Graph::new();
        let x = var(&mut g, &[2], &[1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn detached_and_constant_nodes_get_no_gradient() {
        let mut g = Graph::new();
        let x = var(&mut g, &[2], &[1.0, 2.0]);
        let d = g.detach(x);
        let c = g.constant_from(&[2], vec![5.0, 5.0]).unwrap();
        let y = g.mul(d, c).unwrap();
        let z = g.add(y, x).unwrap();
        let loss = g.sum(z).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0]);
        assert!(grads.get(c).is_none() && grads.get(d).is_none());
    }

    #[test]
    fn repeated_backward_is_bit_identical() {
        let build = || {
            let mut g = Graph::new();
            let x = var(&mut g, &[2, 2], &[0.3, -0.7, 1.1, 0.2]);
            let t = g.tanh(x);
            let y = g.matmul(t, x).unwrap();
            let s = g.softmax(y).unwrap();
            let loss = g.var(s).unwrap();
            let grads = g.backward(loss).unwrap();
            grads.get(x).unwrap().to_vec()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn broadcast_helpers() {
        let mut g = Graph::new();
        let x = g.constant_from(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = g.constant_from(&[2], vec![10.0, 20.0]).unwrap();
        let r = g.add_row(x, b).unwrap();
        assert_eq!(g.value(r), &[11.0, 22.0, 13.0, 24.0]);
        let c = g.constant_from(&[2, 1], vec![10.0, 20.0]).unwrap();
        let r = g.add_col(x, c).unwrap();
        assert_eq!(g.value(r), &[11.0, 12.0, 23.0, 24.0]);
        let r = g.mul_col(x, c).unwrap();
        assert_eq!(g.value(r), &[10.0, 20.0, 60.0, 80.0]);
    }

    #[test]
    fn weighted_sum_of_states() {
        let mut g = Graph::new();
        let w = g.constant_from(&[1, 2], vec![0.25, 0.75]).unwrap();
        let s1 = g.constant_from(&[1, 2], vec![4.0, 0.0]).unwrap();
        let s2 = g.constant_from(&[1, 2], vec![0.0, 8.0]).unwrap();
        let y = g.weighted_sum(w, &[s1, s2]).unwrap();
        assert_eq!(g.value(y), &[1.0, 6.0]);
        assert!(g.weighted_sum(w, &[s1]).is_err());
    }

    #[test]
    fn frozen_graph_does_not_track_parameters() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_f64(&[1], &[2.0]).unwrap()).unwrap();
        let mut g = Graph::<f64>::inference();
        let w = g.param(&store, id);
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq).unwrap();
        assert!(g.backward(loss).unwrap().get(w).is_none());
        let mut g = Graph::<f64>::new();
        let w = g.param(&store, id);
        assert_eq!(g.param(&store, id), w);
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq).unwrap();
        assert_eq!(g.backward(loss).unwrap().get(w).unwrap(), &[4.0]);
    }
}
