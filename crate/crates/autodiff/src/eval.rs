//! Numerical evaluation of graph nodes under leaf bindings.

use ndarray::{s, Axis};

use crate::graph::{Graph, NodeId, Op, Shape, Tensor};
use crate::linalg;
use crate::AutodiffError;

/// Values for the leaves of one graph, indexed by leaf position.
#[derive(Clone, Debug)]
pub struct Bindings {
    values: Vec<Option<Tensor>>,
}

impl Bindings {
    pub fn new(graph: &Graph) -> Self {
        Self {
            values: vec![None; graph.leaves().len()],
        }
    }

    /// Binds leaf `name`. The tensor must have the declared leaf shape.
    pub fn set(&mut self, graph: &Graph, name: &str, value: Tensor) -> Result<(), AutodiffError> {
        let leaf = graph
            .leaf_by_name(name)
            .ok_or_else(|| AutodiffError::UnknownLeaf(name.to_string()))?;
        let got = Shape::new(value.nrows(), value.ncols());
        if got != leaf.shape {
            return Err(AutodiffError::BindingShape {
                name: name.to_string(),
                expected: leaf.shape,
                got,
            });
        }
        let Op::Leaf(idx) = graph.node(leaf.node).op else {
            unreachable!("leaf table points at a non-leaf node")
        };
        if idx >= self.values.len() {
            self.values.resize(idx + 1, None);
        }
        self.values[idx] = Some(value);
        Ok(())
    }

    pub fn get(&self, graph: &Graph, name: &str) -> Option<&Tensor> {
        let leaf = graph.leaf_by_name(name)?;
        match graph.node(leaf.node).op {
            Op::Leaf(idx) => self.values.get(idx).and_then(|v| v.as_ref()),
            _ => None,
        }
    }

    fn leaf(&self, idx: usize) -> Option<&Tensor> {
        self.values.get(idx).and_then(|v| v.as_ref())
    }
}

/// A precomputed evaluation schedule for a fixed set of roots. Reusing a
/// program avoids re-deriving which nodes are needed on every evaluation.
#[derive(Clone, Debug)]
pub struct Program {
    roots: Vec<NodeId>,
    order: Vec<usize>,
    leaves: Vec<usize>,
}

impl Program {
    pub fn new(graph: &Graph, roots: &[NodeId]) -> Self {
        let max = roots.iter().map(|r| r.0).max().map_or(0, |m| m + 1);
        let mut needed = vec![false; max];
        for r in roots {
            needed[r.0] = true;
        }
        for i in (0..max).rev() {
            if needed[i] {
                for input in graph.node(NodeId(i)).op.inputs() {
                    needed[input.0] = true;
                }
            }
        }
        let mut order = Vec::new();
        let mut leaves = Vec::new();
        for (i, &n) in needed.iter().enumerate() {
            if !n {
                continue;
            }
            match graph.node(NodeId(i)).op {
                Op::Leaf(idx) => leaves.push(idx),
                Op::Const(_) => {}
                _ => order.push(i),
            }
        }
        Self {
            roots: roots.to_vec(),
            order,
            leaves,
        }
    }

    pub fn roots(&self) -> &[NodeId] {
        &self.roots
    }

    /// Number of non-leaf, non-constant nodes executed per run.
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn run(&self, graph: &Graph, bindings: &Bindings) -> Result<Vec<Tensor>, AutodiffError> {
        for &idx in &self.leaves {
            let leaf = &graph.leaves()[idx];
            match bindings.leaf(idx) {
                None => return Err(AutodiffError::Unbound(leaf.name.clone())),
                Some(t) if Shape::new(t.nrows(), t.ncols()) != leaf.shape => {
                    return Err(AutodiffError::BindingShape {
                        name: leaf.name.clone(),
                        expected: leaf.shape,
                        got: Shape::new(t.nrows(), t.ncols()),
                    })
                }
                Some(_) => {}
            }
        }
        let mut values: Vec<Option<Tensor>> = vec![None; graph.len()];
        for &i in &self.order {
            let v = compute(graph, bindings, &values, NodeId(i))?;
            values[i] = Some(v);
        }
        Ok(self
            .roots
            .iter()
            .map(|&r| fetch(graph, bindings, &values, r).clone())
            .collect())
    }
}

impl Graph {
    /// Value of `root` under `bindings`.
    pub fn evaluate(&self, root: NodeId, bindings: &Bindings) -> Result<Tensor, AutodiffError> {
        let mut out = Program::new(self, &[root]).run(self, bindings)?;
        Ok(out.pop().expect("one root"))
    }

    /// Values of several roots, sharing common subexpressions.
    pub fn evaluate_many(
        &self,
        roots: &[NodeId],
        bindings: &Bindings,
    ) -> Result<Vec<Tensor>, AutodiffError> {
        Program::new(self, roots).run(self, bindings)
    }
}

fn fetch<'a>(
    graph: &'a Graph,
    bindings: &'a Bindings,
    values: &'a [Option<Tensor>],
    id: NodeId,
) -> &'a Tensor {
    match graph.node(id).op {
        Op::Leaf(idx) => bindings.leaf(idx).expect("bound leaf"),
        Op::Const(idx) => graph.const_value(idx),
        _ => values[id.0].as_ref().expect("operand evaluated before use"),
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn compute(
    graph: &Graph,
    bindings: &Bindings,
    values: &[Option<Tensor>],
    id: NodeId,
) -> Result<Tensor, AutodiffError> {
    let node = graph.node(id);
    let v = |n: &NodeId| fetch(graph, bindings, values, *n);
    let out = match &node.op {
        Op::Leaf(_) | Op::Const(_) => v(&id).clone(),
        Op::Add(a, b) => v(a) + v(b),
        Op::Sub(a, b) => v(a) - v(b),
        Op::Mul(a, b) => v(a) * v(b),
        Op::Div(a, b) => v(a) / v(b),
        Op::Neg(a) => v(a).mapv(|x| -x),
        Op::Scale(a, c) => {
            let c = c.get();
            v(a).mapv(|x| x * c)
        }
        Op::Offset(a, c) => {
            let c = c.get();
            v(a).mapv(|x| x + c)
        }
        Op::MatMul(a, b) => v(a).dot(v(b)),
        Op::Transpose(a) => v(a).t().to_owned(),
        Op::Softplus(a) => v(a).mapv(softplus),
        Op::Sigmoid(a) => v(a).mapv(sigmoid),
        Op::Tanh(a) => v(a).mapv(f64::tanh),
        Op::Relu(a) => v(a).mapv(|x| if x > 0.0 { x } else { 0.0 }),
        Op::Step(a) => v(a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }),
        Op::Log(a) => v(a).mapv(f64::ln),
        Op::Exp(a) => v(a).mapv(f64::exp),
        Op::Sqrt(a) => v(a).mapv(f64::sqrt),
        Op::Powf(a, p) => {
            let p = p.get();
            v(a).mapv(|x| x.powf(p))
        }
        Op::Recip0(a) => v(a).mapv(|x| if x == 0.0 { 0.0 } else { 1.0 / x }),
        Op::Sum(a) => Tensor::from_elem((1, 1), v(a).sum()),
        Op::SumRows(a) => v(a).sum_axis(Axis(0)).insert_axis(Axis(0)),
        Op::SumCols(a) => v(a).sum_axis(Axis(1)).insert_axis(Axis(1)),
        Op::BroadcastRows(a, _) | Op::BroadcastCols(a, _) => v(a)
            .broadcast((node.shape.rows, node.shape.cols))
            .expect("broadcast shape checked at construction")
            .to_owned(),
        Op::BroadcastScalar(a, s) => Tensor::from_elem((s.rows, s.cols), v(a)[[0, 0]]),
        Op::RepeatRows(a, k) => {
            let x = v(a);
            let mut out = Tensor::zeros((node.shape.rows, node.shape.cols));
            for (r, row) in x.rows().into_iter().enumerate() {
                for j in 0..*k {
                    out.row_mut(r * k + j).assign(&row);
                }
            }
            out
        }
        Op::SumRowGroups(a, k) => {
            let x = v(a);
            let mut out = Tensor::zeros((node.shape.rows, node.shape.cols));
            for (r, row) in x.rows().into_iter().enumerate() {
                let mut target = out.row_mut(r / k);
                target += &row;
            }
            out
        }
        Op::SliceRows(a, start, len) => v(a).slice(s![*start..*start + *len, ..]).to_owned(),
        Op::PadRows(a, start, _) => {
            let x = v(a);
            let mut out = Tensor::zeros((node.shape.rows, node.shape.cols));
            out.slice_mut(s![*start..*start + x.nrows(), ..]).assign(x);
            out
        }
        Op::ConcatRows(parts) => {
            let views: Vec<_> = parts.iter().map(|p| v(p).view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("concat shapes checked at construction")
        }
        Op::Index(a, i, j) => Tensor::from_elem((1, 1), v(a)[[*i, *j]]),
        Op::Scatter(a, i, j, s) => {
            let mut out = Tensor::zeros((s.rows, s.cols));
            out[[*i, *j]] = v(a)[[0, 0]];
            out
        }
        Op::PairwiseDist(a, b) => {
            let (x, y) = (v(a), v(b));
            let mut out = Tensor::zeros((x.nrows(), y.nrows()));
            for (i, xr) in x.rows().into_iter().enumerate() {
                for (j, yr) in y.rows().into_iter().enumerate() {
                    let d2: f64 = xr.iter().zip(yr.iter()).map(|(p, q)| (p - q) * (p - q)).sum();
                    out[[i, j]] = d2.sqrt();
                }
            }
            out
        }
        Op::LogDetSpd(a) => {
            let l = linalg::cholesky(v(a)).ok_or(AutodiffError::NotPositiveDefinite { node: *a })?;
            Tensor::from_elem((1, 1), linalg::logdet_from_cholesky(&l))
        }
        Op::InverseSpd(a) => {
            let l = linalg::cholesky(v(a)).ok_or(AutodiffError::NotPositiveDefinite { node: *a })?;
            linalg::inverse_from_cholesky(&l)
        }
    };
    Ok(out)
}
