//! Reverse-mode differentiation by graph extension.
//!
//! `gradient` appends the adjoint computation to the same graph, built from
//! the same primitive ops as the forward pass. The returned gradient nodes are
//! therefore ordinary nodes and can be differentiated again.

use crate::graph::{Graph, NodeId, Op};
use crate::AutodiffError;

/// Largest dimension `hessian` accepts by default.
pub const DEFAULT_HESSIAN_CAP: usize = 64;

/// Gradient nodes keyed by leaf name.
#[derive(Clone, Debug, Default)]
pub struct GradientMap {
    entries: Vec<(String, NodeId)>,
}

impl GradientMap {
    pub fn get(&self, name: &str) -> Option<NodeId> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, id)| *id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.entries.iter().map(|(n, id)| (n.as_str(), *id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn nodes(&self) -> Vec<NodeId> {
        self.entries.iter().map(|(_, id)| *id).collect()
    }
}

impl Graph {
    /// Appends nodes computing `∂root/∂w` for every `w` in `wrt`. The targets
    /// may be leaves or interior nodes; in the latter case the result is the
    /// adjoint of that node (total derivative through all of its consumers).
    pub fn gradient(&mut self, root: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>, AutodiffError> {
        let shape = self.shape(root);
        if !shape.is_scalar() {
            return Err(AutodiffError::NonScalarRoot(shape));
        }
        let r = root.index();
        let mut dep = vec![false; r + 1];
        for w in wrt {
            if w.index() <= r {
                dep[w.index()] = true;
            }
        }
        for i in 0..=r {
            if !dep[i] {
                dep[i] = self.node(NodeId(i)).op.inputs().iter().any(|x| dep[x.index()]);
            }
        }

        let mut adj: Vec<Option<NodeId>> = vec![None; r + 1];
        if dep[r] {
            adj[r] = Some(self.scalar(1.0));
        }
        for i in (0..=r).rev() {
            let Some(g) = adj[i] else { continue };
            let op = self.node(NodeId(i)).op.clone();
            for (input, contrib) in self.vjp(&op, NodeId(i), g, &dep) {
                if !dep[input.index()] {
                    continue;
                }
                let acc = match adj[input.index()] {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib),
                };
                adj[input.index()] = Some(acc);
            }
        }

        Ok(wrt
            .iter()
            .map(|w| match adj.get(w.index()).copied().flatten() {
                Some(g) => g,
                None => {
                    let s = self.shape(*w);
                    self.zeros(s)
                }
            })
            .collect())
    }

    /// Gradient with respect to every differentiable leaf.
    pub fn gradient_map(&mut self, root: NodeId) -> Result<GradientMap, AutodiffError> {
        let params: Vec<(String, NodeId)> = self
            .leaves()
            .iter()
            .filter(|l| l.differentiable)
            .map(|l| (l.name.clone(), l.node))
            .collect();
        let ids: Vec<NodeId> = params.iter().map(|(_, id)| *id).collect();
        let grads = self.gradient(root, &ids)?;
        Ok(GradientMap {
            entries: params.into_iter().map(|(n, _)| n).zip(grads).collect(),
        })
    }

    /// Exact Hessian of a scalar `root` with respect to a `1 x n` node, built
    /// from `n` further gradient passes over the components of the gradient.
    pub fn hessian(&mut self, root: NodeId, wrt: NodeId) -> Result<NodeId, AutodiffError> {
        self.hessian_with_cap(root, wrt, DEFAULT_HESSIAN_CAP)
    }

    pub fn hessian_with_cap(
        &mut self,
        root: NodeId,
        wrt: NodeId,
        cap: usize,
    ) -> Result<NodeId, AutodiffError> {
        let s = self.shape(wrt);
        if s.rows != 1 {
            return Err(AutodiffError::NotARowVector(s));
        }
        if s.cols > cap {
            return Err(AutodiffError::HessianTooLarge { dim: s.cols, cap });
        }
        let g = self.gradient(root, &[wrt])?[0];
        let mut rows = Vec::with_capacity(s.cols);
        for i in 0..s.cols {
            let gi = self.index(g, 0, i);
            rows.push(self.gradient(gi, &[wrt])?[0]);
        }
        Ok(self.concat_rows(&rows))
    }

    /// Vector-Jacobian products of `op` (whose output node is `y`) for the
    /// operands marked in `dep`.
    fn vjp(&mut self, op: &Op, y: NodeId, g: NodeId, dep: &[bool]) -> Vec<(NodeId, NodeId)> {
        let need = |n: &NodeId| dep[n.index()];
        let mut out = Vec::with_capacity(2);
        match *op {
            Op::Leaf(_) | Op::Const(_) | Op::Step(_) => {}
            Op::Add(a, b) => {
                if need(&a) {
                    out.push((a, g));
                }
                if need(&b) {
                    out.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if need(&a) {
                    out.push((a, g));
                }
                if need(&b) {
                    out.push((b, self.neg(g)));
                }
            }
            Op::Mul(a, b) => {
                if need(&a) {
                    out.push((a, self.mul(g, b)));
                }
                if need(&b) {
                    out.push((b, self.mul(g, a)));
                }
            }
            Op::Div(a, b) => {
                if need(&a) {
                    out.push((a, self.div(g, b)));
                }
                if need(&b) {
                    let q = self.div(y, b);
                    let t = self.mul(g, q);
                    out.push((b, self.neg(t)));
                }
            }
            Op::Neg(a) => out.push((a, self.neg(g))),
            Op::Scale(a, c) => out.push((a, self.scale(g, c.get()))),
            Op::Offset(a, _) => out.push((a, g)),
            Op::MatMul(a, b) => {
                if need(&a) {
                    let bt = self.transpose(b);
                    out.push((a, self.matmul(g, bt)));
                }
                if need(&b) {
                    let at = self.transpose(a);
                    out.push((b, self.matmul(at, g)));
                }
            }
            Op::Transpose(a) => out.push((a, self.transpose(g))),
            Op::Softplus(a) => {
                let s = self.sigmoid(a);
                out.push((a, self.mul(g, s)));
            }
            Op::Sigmoid(a) => {
                let ny = self.neg(y);
                let one_minus = self.offset(ny, 1.0);
                let d = self.mul(y, one_minus);
                out.push((a, self.mul(g, d)));
            }
            Op::Tanh(a) => {
                let y2 = self.mul(y, y);
                let ny2 = self.neg(y2);
                let d = self.offset(ny2, 1.0);
                out.push((a, self.mul(g, d)));
            }
            Op::Relu(a) => {
                let st = self.step(a);
                out.push((a, self.mul(g, st)));
            }
            Op::Log(a) => out.push((a, self.div(g, a))),
            Op::Exp(a) => out.push((a, self.mul(g, y))),
            Op::Sqrt(a) => {
                let q = self.div(g, y);
                out.push((a, self.scale(q, 0.5)));
            }
            Op::Powf(a, p) => {
                let p = p.get();
                let d = if p == 2.0 {
                    self.scale(a, 2.0)
                } else {
                    let pm = self.powf(a, p - 1.0);
                    self.scale(pm, p)
                };
                out.push((a, self.mul(g, d)));
            }
            Op::Recip0(a) => {
                let y2 = self.mul(y, y);
                let t = self.mul(g, y2);
                out.push((a, self.neg(t)));
            }
            Op::Sum(a) => {
                let s = self.shape(a);
                out.push((a, self.broadcast_scalar(g, s)));
            }
            Op::SumRows(a) => {
                let rows = self.shape(a).rows;
                out.push((a, self.broadcast_rows(g, rows)));
            }
            Op::SumCols(a) => {
                let cols = self.shape(a).cols;
                out.push((a, self.broadcast_cols(g, cols)));
            }
            Op::BroadcastRows(a, _) => out.push((a, self.sum_rows(g))),
            Op::BroadcastCols(a, _) => out.push((a, self.sum_cols(g))),
            Op::BroadcastScalar(a, _) => out.push((a, self.sum(g))),
            Op::RepeatRows(a, k) => out.push((a, self.sum_row_groups(g, k))),
            Op::SumRowGroups(a, k) => out.push((a, self.repeat_rows(g, k))),
            Op::SliceRows(a, start, _) => {
                let total = self.shape(a).rows;
                out.push((a, self.pad_rows(g, start, total)));
            }
            Op::PadRows(a, start, _) => {
                let len = self.shape(a).rows;
                out.push((a, self.slice_rows(g, start, len)));
            }
            Op::ConcatRows(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p).rows;
                    if need(&p) {
                        out.push((p, self.slice_rows(g, offset, len)));
                    }
                    offset += len;
                }
            }
            Op::Index(a, i, j) => {
                let s = self.shape(a);
                out.push((a, self.scatter(g, i, j, s)));
            }
            Op::Scatter(a, i, j, _) => out.push((a, self.index(g, i, j))),
            Op::PairwiseDist(a, b) => {
                let n = self.shape(a).cols;
                let inv = self.recip0(y);
                let r = self.mul(g, inv);
                if need(&a) {
                    let rs = self.sum_cols(r);
                    let rs = self.broadcast_cols(rs, n);
                    let lhs = self.mul(rs, a);
                    let rhs = self.matmul(r, b);
                    out.push((a, self.sub(lhs, rhs)));
                }
                if need(&b) {
                    let cs = self.sum_rows(r);
                    let cs = self.transpose(cs);
                    let cs = self.broadcast_cols(cs, n);
                    let lhs = self.mul(cs, b);
                    let rt = self.transpose(r);
                    let rhs = self.matmul(rt, a);
                    out.push((b, self.sub(lhs, rhs)));
                }
            }
            Op::LogDetSpd(a) => {
                let inv = self.inverse_spd(a);
                out.push((a, self.mul_scalar(inv, g)));
            }
            Op::InverseSpd(a) => {
                let yt = self.transpose(y);
                let t = self.matmul(yt, g);
                let t = self.matmul(t, yt);
                out.push((a, self.neg(t)));
            }
        }
        out
    }
}
