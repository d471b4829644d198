//! Partially input-convex network potential.
//!
//! `G(α, h)` is convex in the quantile vector `α` and unconstrained in the
//! context `h`. With `u = softplus(W̃h + b̃)` each layer computes
//!
//! ```text
//! v₁     = a(W₁ᵅ(α ∘ (W₁ᵅᵘu + b₁ᵅ)) + W₁ᵘu + b₁)
//! vᵢ₊₁   = a(Wᵢᵛ(vᵢ ∘ [Wᵢᵛᵘu + bᵢᵛ]₊) + Wᵢᵅ(α ∘ (Wᵢᵅᵘu + bᵢᵅ)) + Wᵢᵘu + bᵢ)
//! G      = v_out + (γ/2)‖α‖²
//! ```
//!
//! where `a` is softplus on hidden layers, the output layer is linear and
//! scalar, `Wᵛ = softplus(raw)` is entrywise positive, and
//! `γ = gamma_floor + softplus(raw_gamma)`.
//!
//! All builders operate on batches: `α` is `R x n` and `u` is `R x width`,
//! one row per evaluation point, so the potential comes out as `R x 1`.
//! Weights are stored `in x out` and applied as `x W`.

use mqf2_autodiff::{softplus, Bindings, Graph, NodeId, Tensor};
use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{uniform, ParamNodes, ParamSet};

pub const PREFIX: &str = "picnn";
const RAW_GAMMA: &str = "picnn.raw_gamma";
const EMBED_W: &str = "picnn.embed.w";
const EMBED_B: &str = "picnn.embed.b";
/// Initial bias of the ReLU gates on the convex path, so that every gate
/// starts open.
const GATE_BIAS_INIT: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PicnnConfig {
    /// Dimension `n` of the quantile vector.
    pub input_dim: usize,
    /// Dimension `d` of the context vector.
    pub context_dim: usize,
    pub hidden_width: usize,
    /// Number of hidden (softplus) layers; a linear scalar output layer follows.
    pub num_layers: usize,
    #[serde(default = "default_gamma_floor")]
    pub gamma_floor: f64,
}

fn default_gamma_floor() -> f64 {
    1e-2
}

impl PicnnConfig {
    pub fn new(input_dim: usize, context_dim: usize, hidden_width: usize, num_layers: usize) -> Self {
        Self {
            input_dim,
            context_dim,
            hidden_width,
            num_layers,
            gamma_floor: default_gamma_floor(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 1 || self.context_dim < 1 || self.hidden_width < 1 {
            return Err(Error::Config(
                "picnn input_dim, context_dim and hidden_width must be at least 1".into(),
            ));
        }
        if self.num_layers < 2 {
            return Err(Error::Config("picnn num_layers must be at least 2".into()));
        }
        if !(self.gamma_floor > 0.0) {
            return Err(Error::Config("picnn gamma_floor must be positive".into()));
        }
        Ok(())
    }

    fn layer_out(&self, l: usize) -> usize {
        if l == self.num_layers {
            1
        } else {
            self.hidden_width
        }
    }

    /// Parameter names and shapes, in declaration order.
    pub fn layout(&self) -> Vec<(String, usize, usize)> {
        let (n, d, w) = (self.input_dim, self.context_dim, self.hidden_width);
        let mut out = vec![
            (EMBED_W.to_string(), d, w),
            (EMBED_B.to_string(), 1, w),
            (RAW_GAMMA.to_string(), 1, 1),
        ];
        for l in 0..=self.num_layers {
            let o = self.layer_out(l);
            let p = |s: &str| format!("{PREFIX}.l{l}.{s}");
            if l > 0 {
                out.push((p("w_vu"), w, w));
                out.push((p("b_v"), 1, w));
                out.push((p("w_v_raw"), w, o));
            }
            out.push((p("w_alpha_u"), w, n));
            out.push((p("b_alpha"), 1, n));
            out.push((p("w_alpha"), n, o));
            out.push((p("w_u"), w, o));
            out.push((p("b"), 1, o));
        }
        out
    }

    /// Raw gamma giving an effective strong-convexity coefficient `target`.
    /// `target` must exceed `gamma_floor`.
    pub fn raw_gamma_for(&self, target: f64) -> f64 {
        inverse_softplus(target - self.gamma_floor)
    }

    /// Fan-in uniform weights, zero biases except the open gates,
    /// effective γ ≈ 0.1.
    pub fn init_params(&self, rng: &mut impl Rng) -> ParamSet {
        let mut ps = ParamSet::new();
        for (name, r, c) in self.layout() {
            let t = if name == RAW_GAMMA {
                Tensor::from_elem((1, 1), self.raw_gamma_for(0.1_f64.max(2.0 * self.gamma_floor)))
            } else if name.ends_with(".b_v") {
                Tensor::from_elem((r, c), GATE_BIAS_INIT)
            } else if is_bias(&name) {
                Tensor::zeros((r, c))
            } else {
                uniform(r, c, 1.0 / (r as f64).sqrt(), rng)
            };
            ps.insert(name, t);
        }
        ps
    }

    /// All tensors zero. The effective γ is then `gamma_floor + ln 2`.
    pub fn zero_params(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        for (name, r, c) in self.layout() {
            ps.insert(name, Tensor::zeros((r, c)));
        }
        ps
    }
}

fn is_bias(name: &str) -> bool {
    let last = name.rsplit('.').next().unwrap_or("");
    last.starts_with('b')
}

pub(crate) fn inverse_softplus(y: f64) -> f64 {
    assert!(y > 0.0, "softplus only reaches positive values");
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Effective strong-convexity coefficient of a parameter set.
pub fn effective_gamma(config: &PicnnConfig, params: &ParamSet) -> f64 {
    config.gamma_floor + softplus(params.expect(RAW_GAMMA)[[0, 0]])
}

/// `u = softplus(h W̃ + b̃)` for a batch of context rows `h`.
pub fn build_context_embed(graph: &mut Graph, p: &ParamNodes, h: NodeId) -> NodeId {
    let pre = graph.affine(h, p.get(EMBED_W), p.get(EMBED_B));
    graph.softplus(pre)
}

/// Builds the potential for `alpha` (`R x n`) and embedded context `u`
/// (`R x width`), returning an `R x 1` node.
pub fn build_potential(
    graph: &mut Graph,
    config: &PicnnConfig,
    p: &ParamNodes,
    alpha: NodeId,
    u: NodeId,
) -> NodeId {
    let rows = graph.shape(alpha).rows;
    assert_eq!(graph.shape(u).rows, rows, "alpha and context rows must align");
    let mut v: Option<NodeId> = None;
    for l in 0..=config.num_layers {
        let name = |s: &str| format!("{PREFIX}.l{l}.{s}");
        let alpha_gate = graph.affine(u, p.get(&name("w_alpha_u")), p.get(&name("b_alpha")));
        let gated_alpha = graph.mul(alpha, alpha_gate);
        let mut pre = graph.matmul(gated_alpha, p.get(&name("w_alpha")));
        let ctx = graph.affine(u, p.get(&name("w_u")), p.get(&name("b")));
        pre = graph.add(pre, ctx);
        if let Some(prev) = v {
            let gate = graph.affine(u, p.get(&name("w_vu")), p.get(&name("b_v")));
            let gate = graph.relu(gate);
            let gated = graph.mul(prev, gate);
            let wv = graph.softplus(p.get(&name("w_v_raw")));
            let path = graph.matmul(gated, wv);
            pre = graph.add(pre, path);
        }
        v = Some(if l == config.num_layers { pre } else { graph.softplus(pre) });
    }
    let out = v.expect("at least one layer");

    let raw = p.get(RAW_GAMMA);
    let sp = graph.softplus(raw);
    let gamma = graph.offset(sp, config.gamma_floor);
    let sq = graph.mul(alpha, alpha);
    let sq = graph.sum_cols(sq);
    let quad = graph.mul_scalar(sq, gamma);
    let quad = graph.scale(quad, 0.5);
    graph.add(out, quad)
}

/// A potential graph with leaves `alpha` (`rows x n`) and `h` (`1 x d`),
/// exposing `G` and `∇_α G`. Parameters are bound once; evaluate repeatedly.
#[derive(Clone, Debug)]
pub struct PotentialEvaluator {
    graph: Graph,
    bindings: Bindings,
    program: mqf2_autodiff::Program,
    rows: usize,
}

impl PotentialEvaluator {
    pub fn new(config: &PicnnConfig, params: &ParamSet, rows: usize) -> Result<Self> {
        let mut graph = Graph::new();
        let nodes = params.declare(&mut graph);
        let alpha = graph.input("alpha", rows, config.input_dim);
        let h = graph.input("h", 1, config.context_dim);
        let u = build_context_embed(&mut graph, &nodes, h);
        let u = graph.broadcast_rows(u, rows);
        let pot = build_potential(&mut graph, config, &nodes, alpha, u);
        let total = graph.sum(pot);
        let grad = graph.gradient(total, &[alpha])?[0];
        let program = mqf2_autodiff::Program::new(&graph, &[pot, grad]);
        let mut bindings = Bindings::new(&graph);
        params.bind(&graph, &mut bindings)?;
        Ok(Self {
            graph,
            bindings,
            program,
            rows,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn set_context(&mut self, h: &Array1<f64>) -> Result<()> {
        let t = h.clone().insert_axis(ndarray::Axis(0));
        self.bindings.set(&self.graph, "h", t)?;
        Ok(())
    }

    /// Potential values (`rows`) and gradients (`rows x n`).
    pub fn evaluate(&mut self, alpha: &Tensor) -> Result<(Array1<f64>, Tensor)> {
        self.bindings.set(&self.graph, "alpha", alpha.clone())?;
        let mut out = self.program.run(&self.graph, &self.bindings)?;
        let grad = out.pop().expect("gradient");
        let pot = out.pop().expect("potential");
        Ok((pot.column(0).to_owned(), grad))
    }
}

fn check_dims(config: &PicnnConfig, alpha: usize, h: usize) -> Result<()> {
    if alpha != config.input_dim {
        return Err(Error::DimensionMismatch {
            what: "quantile vector",
            expected: config.input_dim,
            got: alpha,
        });
    }
    if h != config.context_dim {
        return Err(Error::DimensionMismatch {
            what: "context vector",
            expected: config.context_dim,
            got: h,
        });
    }
    Ok(())
}

/// `u = softplus(W̃h + b̃)` for a single context vector.
pub fn context_embed(config: &PicnnConfig, params: &ParamSet, h: &Array1<f64>) -> Result<Array1<f64>> {
    check_dims(config, config.input_dim, h.len())?;
    let mut graph = Graph::new();
    let nodes = params.declare(&mut graph);
    let hn = graph.input("h", 1, config.context_dim);
    let u = build_context_embed(&mut graph, &nodes, hn);
    let mut b = Bindings::new(&graph);
    params.bind(&graph, &mut b)?;
    b.set(&graph, "h", h.clone().insert_axis(ndarray::Axis(0)))?;
    Ok(graph.evaluate(u, &b)?.row(0).to_owned())
}

/// `G(α, h)`.
pub fn potential(config: &PicnnConfig, params: &ParamSet, alpha: &Array1<f64>, h: &Array1<f64>) -> Result<f64> {
    Ok(evaluate_single(config, params, alpha, h)?.0)
}

/// `∇_α G(α, h)`.
pub fn grad_potential(
    config: &PicnnConfig,
    params: &ParamSet,
    alpha: &Array1<f64>,
    h: &Array1<f64>,
) -> Result<Array1<f64>> {
    Ok(evaluate_single(config, params, alpha, h)?.1)
}

fn evaluate_single(
    config: &PicnnConfig,
    params: &ParamSet,
    alpha: &Array1<f64>,
    h: &Array1<f64>,
) -> Result<(f64, Array1<f64>)> {
    check_dims(config, alpha.len(), h.len())?;
    let mut ev = PotentialEvaluator::new(config, params, 1)?;
    ev.set_context(h)?;
    let (pot, grad) = ev.evaluate(&alpha.clone().insert_axis(ndarray::Axis(0)))?;
    Ok((pot[0], grad.row(0).to_owned()))
}
