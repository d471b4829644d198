//! Dense tensor expression graphs with nested reverse-mode differentiation.
//!
//! Graphs are built symbolically from named leaves, evaluated under
//! [`Bindings`], and differentiated by appending adjoint nodes to the same
//! graph. Because gradients are ordinary nodes, any scalar function of a
//! gradient can be differentiated again; this is what lets a loss defined on
//! `∇ₓ f(x; θ)` be differentiated with respect to `θ`.
//!
//! ```
//! use mqf2_autodiff::{Bindings, Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.parameter("x", 1, 1);
//! let x3 = g.powf(x, 3.0);
//! let dx = g.gradient(x3, &[x]).unwrap()[0];
//! let d2x = g.gradient(dx, &[x]).unwrap()[0];
//!
//! let mut b = Bindings::new(&g);
//! b.set(&g, "x", Tensor::from_elem((1, 1), 2.0)).unwrap();
//! assert_eq!(g.evaluate(d2x, &b).unwrap()[[0, 0]], 12.0);
//! ```

mod eval;
mod grad;
mod graph;
pub mod linalg;

pub use eval::{Bindings, Program};
pub use grad::{GradientMap, DEFAULT_HESSIAN_CAP};
pub use graph::{Graph, Leaf, Node, NodeId, Op, Scalar, Shape, Tensor};

/// Numerically stable `ln(1 + eˣ)`, shared with code that evaluates outside a graph.
pub fn softplus(x: f64) -> f64 {
    eval::softplus(x)
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    eval::sigmoid(x)
}

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("leaf `{0}` is not bound")]
    Unbound(String),
    #[error("no leaf named `{0}`")]
    UnknownLeaf(String),
    #[error("leaf `{name}` bound to a {got} tensor, declared {expected}")]
    BindingShape {
        name: String,
        expected: Shape,
        got: Shape,
    },
    #[error("gradient root must be 1x1, got {0}")]
    NonScalarRoot(Shape),
    #[error("hessian target must be a 1xn row, got {0}")]
    NotARowVector(Shape),
    #[error("hessian dimension {dim} exceeds the cap of {cap}")]
    HessianTooLarge { dim: usize, cap: usize },
    #[error("matrix at node {node} is not positive definite")]
    NotPositiveDefinite { node: NodeId },
}
