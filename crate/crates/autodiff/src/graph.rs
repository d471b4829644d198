//! Expression graph construction.
//!
//! A [`Graph`] is an append-only list of nodes. Every node refers only to
//! nodes with a smaller index, so the node list is already a topological
//! order. Shapes are inferred when a node is added; incompatible shapes are a
//! programming error and panic immediately, the way `ndarray` arithmetic does.
//!
//! Structurally identical nodes are shared (hash-consing), which keeps the
//! graphs produced by repeated differentiation passes from blowing up.

use std::collections::HashMap;
use std::fmt;

use ndarray::Array2;

/// Dense row-major 64-bit tensor. Scalars are `1 x 1`, vectors are rows.
pub type Tensor = Array2<f64>;

/// Handle to a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape { rows: 1, cols: 1 };

    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn len(self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(self) -> bool {
        self == Self::SCALAR
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

/// An `f64` stored by bit pattern so that ops carrying constants can be
/// hashed for node sharing.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Scalar(u64);

impl Scalar {
    pub fn new(v: f64) -> Self {
        Scalar(v.to_bits())
    }

    pub fn get(self) -> f64 {
        f64::from_bits(self.0)
    }
}

impl fmt::Debug for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.get())
    }
}

/// Primitive operations. Elementwise binary ops require equal shapes;
/// broadcasting is always explicit.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Op {
    /// Index into [`Graph::leaves`].
    Leaf(usize),
    /// Index into the graph's constant pool.
    Const(usize),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Hadamard product.
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    /// `x * c`
    Scale(NodeId, Scalar),
    /// `x + c`
    Offset(NodeId, Scalar),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Softplus(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    /// Heaviside step, `1{x > 0}`. Piecewise constant, so it has no gradient.
    Step(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Sqrt(NodeId),
    Powf(NodeId, Scalar),
    /// `1/x`, with `1/0 := 0`.
    Recip0(NodeId),
    /// Sum of all entries, `1 x 1`.
    Sum(NodeId),
    /// Column sums, `r x c -> 1 x c`.
    SumRows(NodeId),
    /// Row sums, `r x c -> r x 1`.
    SumCols(NodeId),
    /// Repeat a `1 x c` row `r` times.
    BroadcastRows(NodeId, usize),
    /// Repeat an `r x 1` column `c` times.
    BroadcastCols(NodeId, usize),
    /// Fill an `r x c` tensor with a `1 x 1` value.
    BroadcastScalar(NodeId, Shape),
    /// Repeat every row `k` times consecutively, `r x c -> rk x c`.
    RepeatRows(NodeId, usize),
    /// Sum consecutive groups of `k` rows, `rk x c -> r x c`.
    SumRowGroups(NodeId, usize),
    /// Rows `start..start+len`.
    SliceRows(NodeId, usize, usize),
    /// Embed at row `start` into `total` zero rows.
    PadRows(NodeId, usize, usize),
    ConcatRows(Vec<NodeId>),
    /// Single entry as `1 x 1`.
    Index(NodeId, usize, usize),
    /// Place a `1 x 1` value at `(i, j)` of a zero tensor.
    Scatter(NodeId, usize, usize, Shape),
    /// Euclidean distances between the rows of two matrices, `m x n, k x n -> m x k`.
    PairwiseDist(NodeId, NodeId),
    /// `log det` of a symmetric positive definite matrix, via Cholesky.
    LogDetSpd(NodeId),
    /// Inverse of a symmetric positive definite matrix, via Cholesky.
    InverseSpd(NodeId),
}

impl Op {
    /// Operand nodes, in order.
    pub fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf(_) | Const(_) => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) | PairwiseDist(a, b) => {
                vec![*a, *b]
            }
            Neg(a)
            | Scale(a, _)
            | Offset(a, _)
            | Transpose(a)
            | Softplus(a)
            | Sigmoid(a)
            | Tanh(a)
            | Relu(a)
            | Step(a)
            | Log(a)
            | Exp(a)
            | Sqrt(a)
            | Powf(a, _)
            | Recip0(a)
            | Sum(a)
            | SumRows(a)
            | SumCols(a)
            | BroadcastRows(a, _)
            | BroadcastCols(a, _)
            | BroadcastScalar(a, _)
            | RepeatRows(a, _)
            | SumRowGroups(a, _)
            | SliceRows(a, _, _)
            | PadRows(a, _, _)
            | Index(a, _, _)
            | Scatter(a, _, _, _)
            | LogDetSpd(a)
            | InverseSpd(a) => vec![*a],
            ConcatRows(xs) => xs.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub shape: Shape,
}

/// A named tensor slot bound at evaluation time.
#[derive(Clone, Debug)]
pub struct Leaf {
    pub name: String,
    pub shape: Shape,
    /// Parameters are differentiable; data inputs are not.
    pub differentiable: bool,
    pub node: NodeId,
}

/// Differentiable computation graph over dense tensors.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: Vec<Leaf>,
    leaf_index: HashMap<String, usize>,
    consts: Vec<Tensor>,
    interned: HashMap<Op, NodeId>,
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

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].shape
    }

    pub fn leaves(&self) -> &[Leaf] {
        &self.leaves
    }

    pub fn leaf_by_name(&self, name: &str) -> Option<&Leaf> {
        self.leaf_index.get(name).map(|&i| &self.leaves[i])
    }

    pub(crate) fn const_value(&self, idx: usize) -> &Tensor {
        &self.consts[idx]
    }

    /// Returns the constant tensor if `id` is a constant node.
    pub fn as_const(&self, id: NodeId) -> Option<&Tensor> {
        match self.nodes[id.0].op {
            Op::Const(i) => Some(&self.consts[i]),
            _ => None,
        }
    }

    fn push(&mut self, op: Op, shape: Shape) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, shape });
        id
    }

    fn intern(&mut self, op: Op, shape: Shape) -> NodeId {
        if let Some(&id) = self.interned.get(&op) {
            return id;
        }
        let id = self.push(op.clone(), shape);
        self.interned.insert(op, id);
        id
    }

    fn add_leaf(&mut self, name: &str, rows: usize, cols: usize, differentiable: bool) -> NodeId {
        assert!(
            !self.leaf_index.contains_key(name),
            "leaf `{name}` declared twice"
        );
        let shape = Shape::new(rows, cols);
        let idx = self.leaves.len();
        let node = self.push(Op::Leaf(idx), shape);
        self.leaves.push(Leaf {
            name: name.to_string(),
            shape,
            differentiable,
            node,
        });
        self.leaf_index.insert(name.to_string(), idx);
        node
    }

    /// Declares a differentiable leaf (a parameter).
    pub fn parameter(&mut self, name: &str, rows: usize, cols: usize) -> NodeId {
        self.add_leaf(name, rows, cols, true)
    }

    /// Declares a data leaf. It can still be named in `gradient(.., wrt)`.
    pub fn input(&mut self, name: &str, rows: usize, cols: usize) -> NodeId {
        self.add_leaf(name, rows, cols, false)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = Shape::new(value.nrows(), value.ncols());
        let idx = self.consts.len();
        self.consts.push(value);
        self.push(Op::Const(idx), shape)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::from_elem((1, 1), v))
    }

    pub fn zeros(&mut self, shape: Shape) -> NodeId {
        self.constant(Tensor::zeros((shape.rows, shape.cols)))
    }

    fn same_shape(&self, op: &str, a: NodeId, b: NodeId) -> Shape {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "{op}: shape mismatch {sa} vs {sb}");
        sa
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let s = self.same_shape("add", a, b);
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        self.intern(Op::Add(a, b), s)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let s = self.same_shape("sub", a, b);
        self.intern(Op::Sub(a, b), s)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let s = self.same_shape("mul", a, b);
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        self.intern(Op::Mul(a, b), s)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let s = self.same_shape("div", a, b);
        self.intern(Op::Div(a, b), s)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a);
        self.intern(Op::Neg(a), s)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let s = self.shape(a);
        self.intern(Op::Scale(a, Scalar::new(c)), s)
    }

    pub fn offset(&mut self, a: NodeId, c: f64) -> NodeId {
        let s = self.shape(a);
        self.intern(Op::Offset(a, Scalar::new(c)), s)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa.cols, sb.rows, "matmul: inner dimensions {sa} * {sb}");
        self.intern(Op::MatMul(a, b), Shape::new(sa.rows, sb.cols))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a);
        self.intern(Op::Transpose(a), Shape::new(s.cols, s.rows))
    }

    fn unary(&mut self, op: Op, a: NodeId) -> NodeId {
        let s = self.shape(a);
        self.intern(op, s)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Softplus(a), a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sigmoid(a), a)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Tanh(a), a)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Relu(a), a)
    }

    pub fn step(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Step(a), a)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Log(a), a)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Exp(a), a)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sqrt(a), a)
    }

    pub fn powf(&mut self, a: NodeId, p: f64) -> NodeId {
        self.unary(Op::Powf(a, Scalar::new(p)), a)
    }

    pub fn recip0(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Recip0(a), a)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.intern(Op::Sum(a), Shape::SCALAR)
    }

    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a);
        self.intern(Op::SumRows(a), Shape::new(1, s.cols))
    }

    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a);
        self.intern(Op::SumCols(a), Shape::new(s.rows, 1))
    }

    pub fn broadcast_rows(&mut self, a: NodeId, rows: usize) -> NodeId {
        let s = self.shape(a);
        assert_eq!(s.rows, 1, "broadcast_rows: expected a row, got {s}");
        if rows == 1 {
            return a;
        }
        self.intern(Op::BroadcastRows(a, rows), Shape::new(rows, s.cols))
    }

    pub fn broadcast_cols(&mut self, a: NodeId, cols: usize) -> NodeId {
        let s = self.shape(a);
        assert_eq!(s.cols, 1, "broadcast_cols: expected a column, got {s}");
        if cols == 1 {
            return a;
        }
        self.intern(Op::BroadcastCols(a, cols), Shape::new(s.rows, cols))
    }

    pub fn broadcast_scalar(&mut self, a: NodeId, shape: Shape) -> NodeId {
        let s = self.shape(a);
        assert!(s.is_scalar(), "broadcast_scalar: expected 1x1, got {s}");
        if shape.is_scalar() {
            return a;
        }
        self.intern(Op::BroadcastScalar(a, shape), shape)
    }

    pub fn repeat_rows(&mut self, a: NodeId, k: usize) -> NodeId {
        assert!(k >= 1, "repeat_rows: k must be positive");
        if k == 1 {
            return a;
        }
        let s = self.shape(a);
        self.intern(Op::RepeatRows(a, k), Shape::new(s.rows * k, s.cols))
    }

    pub fn sum_row_groups(&mut self, a: NodeId, k: usize) -> NodeId {
        let s = self.shape(a);
        assert!(
            k >= 1 && s.rows % k == 0,
            "sum_row_groups: {} rows not divisible into groups of {k}",
            s.rows
        );
        if k == 1 {
            return a;
        }
        self.intern(Op::SumRowGroups(a, k), Shape::new(s.rows / k, s.cols))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let s = self.shape(a);
        assert!(
            start + len <= s.rows,
            "slice_rows: {start}..{} out of range for {s}",
            start + len
        );
        if start == 0 && len == s.rows {
            return a;
        }
        self.intern(Op::SliceRows(a, start, len), Shape::new(len, s.cols))
    }

    pub fn pad_rows(&mut self, a: NodeId, start: usize, total: usize) -> NodeId {
        let s = self.shape(a);
        assert!(start + s.rows <= total, "pad_rows: {s} at row {start} exceeds {total} rows");
        if start == 0 && total == s.rows {
            return a;
        }
        self.intern(Op::PadRows(a, start, total), Shape::new(total, s.cols))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows: no parts");
        if parts.len() == 1 {
            return parts[0];
        }
        let cols = self.shape(parts[0]).cols;
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.cols, cols, "concat_rows: column mismatch {s}");
            rows += s.rows;
        }
        self.intern(Op::ConcatRows(parts.to_vec()), Shape::new(rows, cols))
    }

    pub fn index(&mut self, a: NodeId, i: usize, j: usize) -> NodeId {
        let s = self.shape(a);
        assert!(i < s.rows && j < s.cols, "index: ({i},{j}) out of range for {s}");
        if s.is_scalar() {
            return a;
        }
        self.intern(Op::Index(a, i, j), Shape::SCALAR)
    }

    pub fn scatter(&mut self, a: NodeId, i: usize, j: usize, shape: Shape) -> NodeId {
        assert!(self.shape(a).is_scalar(), "scatter: value must be 1x1");
        assert!(i < shape.rows && j < shape.cols, "scatter: ({i},{j}) out of range for {shape}");
        if shape.is_scalar() {
            return a;
        }
        self.intern(Op::Scatter(a, i, j, shape), shape)
    }

    pub fn pairwise_dist(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa.cols, sb.cols, "pairwise_dist: dimension mismatch {sa} vs {sb}");
        self.intern(Op::PairwiseDist(a, b), Shape::new(sa.rows, sb.rows))
    }

    pub fn logdet_spd(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a);
        assert_eq!(s.rows, s.cols, "logdet_spd: matrix must be square, got {s}");
        self.intern(Op::LogDetSpd(a), Shape::SCALAR)
    }

    pub fn inverse_spd(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a);
        assert_eq!(s.rows, s.cols, "inverse_spd: matrix must be square, got {s}");
        self.intern(Op::InverseSpd(a), s)
    }

    // Composite helpers.

    /// Inner product of two same-shaped tensors.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let m = self.mul(a, b);
        self.sum(m)
    }

    /// Squared Euclidean (Frobenius) norm.
    pub fn sq_norm(&mut self, a: NodeId) -> NodeId {
        self.dot(a, a)
    }

    /// Euclidean (Frobenius) norm.
    pub fn norm(&mut self, a: NodeId) -> NodeId {
        let sq = self.sq_norm(a);
        self.sqrt(sq)
    }

    /// `x * s` with a `1 x 1` node `s`.
    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let shape = self.shape(x);
        let b = self.broadcast_scalar(s, shape);
        self.mul(x, b)
    }

    /// `x W + b` for a batch of rows `x`, weights `W` and bias row `b`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xw = self.matmul(x, w);
        let rows = self.shape(xw).rows;
        let bb = self.broadcast_rows(b, rows);
        self.add(xw, bb)
    }
}
