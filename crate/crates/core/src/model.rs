//! The conditional multivariate quantile function `q(·|h) = ∇_α G(·, h)`.
//!
//! In energy-score mode the map pushes standard Gaussian draws forward to
//! forecasts. In maximum-likelihood mode the same kind of map runs in the
//! flow direction, data to reference, so sampling requires inversion and the
//! density follows from the change of variables with the Hessian of `G`.

use mqf2_autodiff::{Bindings, Graph, NodeId, Program, Tensor};
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::lbfgs::{self, LbfgsConfig};
use crate::params::{ParamNodes, ParamSet};
use crate::picnn::{self, PicnnConfig, PotentialEvaluator};
use crate::rng::{stream, Stream};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Energy score: forward map from reference draws to forecasts.
    Es,
    /// Maximum likelihood: flow map from data to the reference.
    Ml,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "es" => Ok(Mode::Es),
            "ml" => Ok(Mode::Ml),
            other => Err(Error::Config(format!("unknown mode `{other}` (expected es or ml)"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Es => "es",
            Mode::Ml => "ml",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantileModel {
    pub picnn: PicnnConfig,
    pub encoder: EncoderConfig,
    pub mode: Mode,
    pub params: ParamSet,
}

impl QuantileModel {
    /// Freshly initialized model; encoder and potential draw from the init stream.
    pub fn new(picnn: PicnnConfig, encoder: EncoderConfig, mode: Mode, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, Stream::Init);
        let mut params = encoder.init_params(&mut rng);
        params.extend(picnn.init_params(&mut rng));
        let model = Self { picnn, encoder, mode, params };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.picnn.validate()?;
        self.encoder.validate()?;
        if self.picnn.context_dim != self.encoder.hidden_size {
            return Err(Error::Config(format!(
                "picnn context_dim {} must equal encoder hidden_size {}",
                self.picnn.context_dim, self.encoder.hidden_size
            )));
        }
        Ok(())
    }

    /// Horizon length `n`.
    pub fn n(&self) -> usize {
        self.picnn.input_dim
    }

    pub fn gamma(&self) -> f64 {
        picnn::effective_gamma(&self.picnn, &self.params)
    }

    /// Context vector for an already-scaled window.
    pub fn context(&self, window: &Array2<f64>) -> Result<Array1<f64>> {
        encoder::encode(&self.encoder, &self.params, window)
    }

    fn check_len(&self, what: &'static str, got: usize) -> Result<()> {
        if got != self.n() {
            return Err(Error::DimensionMismatch { what, expected: self.n(), got });
        }
        Ok(())
    }

    /// `g(α, h)` for every row of `alphas`.
    pub fn map(&self, alphas: &Array2<f64>, h: &Array1<f64>) -> Result<Array2<f64>> {
        self.check_len("quantile vector", alphas.ncols())?;
        let mut ev = PotentialEvaluator::new(&self.picnn, &self.params, alphas.nrows())?;
        ev.set_context(h)?;
        Ok(ev.evaluate(alphas)?.1)
    }

    /// `count` draws `g(α_j, h)` with `α_j ~ N(0, I)` from the sampling stream.
    pub fn sample_forward(&self, h: &Array1<f64>, count: usize, seed: u64) -> Result<Array2<f64>> {
        let alphas = reference_draws(&mut stream(seed, Stream::Sampling), count, self.n());
        self.map(&alphas, h)
    }

    pub fn inverter(&self, h: &Array1<f64>) -> Result<Inverter> {
        Inverter::new(self, h)
    }

    /// The unique `z` with `g(z, h) = y`.
    pub fn invert(&self, y: &Array1<f64>, h: &Array1<f64>) -> Result<Array1<f64>> {
        self.check_len("quantile vector", y.len())?;
        self.inverter(h)?.invert(y)
    }

    /// `log φ(g(z, h)) + log det ∇²G(z, h)`.
    pub fn log_density(&self, z: &Array1<f64>, h: &Array1<f64>) -> Result<f64> {
        self.check_len("sample path", z.len())?;
        let zs = z.clone().insert_axis(Axis(0));
        let hs = h.clone().insert_axis(Axis(0));
        Ok(self.log_density_batch(&zs, &hs)?[0])
    }

    /// Row-wise log densities; row `b` of `z` pairs with row `b` of `h`.
    pub fn log_density_batch(&self, z: &Array2<f64>, h: &Array2<f64>) -> Result<Array1<f64>> {
        self.check_len("sample path", z.ncols())?;
        let b = z.nrows();
        let mut graph = Graph::new();
        let nodes = self.params.declare(&mut graph);
        let zn = graph.input("z", b, self.n());
        let hn = graph.input("h", b, self.picnn.context_dim);
        let u = picnn::build_context_embed(&mut graph, &nodes, hn);
        let lp = build_log_density(&mut graph, &self.picnn, &nodes, zn, u);
        let mut bind = Bindings::new(&graph);
        self.params.bind(&graph, &mut bind)?;
        bind.set(&graph, "z", z.clone())?;
        bind.set(&graph, "h", h.clone())?;
        let out = graph.evaluate(lp, &bind).map_err(not_pd)?;
        Ok(out.column(0).to_owned())
    }

    /// Finite-difference Jacobians of the inverse map at each row of `ys`.
    pub fn check_inverse_monotone(&self, ys: &Array2<f64>, h: &Array1<f64>) -> Result<InverseReport> {
        self.check_len("quantile vector", ys.ncols())?;
        let mut inv = self.inverter(h)?;
        inv.config.tolerance = 1e-11;
        let eps = 1e-4;
        let n = self.n();
        let mut points = Vec::with_capacity(ys.nrows());
        for y in ys.rows() {
            let mut jac = DMatrix::<f64>::zeros(n, n);
            for j in 0..n {
                let mut yp = y.to_owned();
                let mut ym = y.to_owned();
                yp[j] += eps;
                ym[j] -= eps;
                let zp = inv.invert_abs(&yp)?;
                let zm = inv.invert_abs(&ym)?;
                for i in 0..n {
                    jac[(i, j)] = (zp[i] - zm[i]) / (2.0 * eps);
                }
            }
            let symmetry_error = (&jac - jac.transpose()).amax();
            let sym = (&jac + jac.transpose()) * 0.5;
            let min_eigenvalue = SymmetricEigen::new(sym).eigenvalues.min();
            points.push(InversePoint { symmetry_error, min_eigenvalue });
        }
        Ok(InverseReport { points })
    }
}

fn not_pd(e: mqf2_autodiff::AutodiffError) -> Error {
    match e {
        mqf2_autodiff::AutodiffError::NotPositiveDefinite { .. } => Error::HessianNotPD,
        other => Error::Autodiff(other),
    }
}

/// `count x n` standard normal draws.
pub fn reference_draws(rng: &mut impl Rng, count: usize, n: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((count, n), || rng.sample(StandardNormal))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct InversePoint {
    pub symmetry_error: f64,
    pub min_eigenvalue: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct InverseReport {
    pub points: Vec<InversePoint>,
}

impl InverseReport {
    pub const SYMMETRY_TOL: f64 = 1e-3;
    pub const EIGEN_TOL: f64 = -1e-6;

    pub fn max_symmetry_error(&self) -> f64 {
        self.points.iter().fold(0.0, |m, p| m.max(p.symmetry_error))
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.points.iter().fold(f64::INFINITY, |m, p| m.min(p.min_eigenvalue))
    }

    pub fn passed(&self) -> bool {
        self.max_symmetry_error() <= Self::SYMMETRY_TOL && self.min_eigenvalue() >= Self::EIGEN_TOL
    }
}

/// Solves `min_z G(z, h) − zᵀy` by L-BFGS for a fixed context.
pub struct Inverter {
    evaluator: PotentialEvaluator,
    gamma: f64,
    pub config: LbfgsConfig,
}

impl Inverter {
    pub fn new(model: &QuantileModel, h: &Array1<f64>) -> Result<Self> {
        let mut evaluator = PotentialEvaluator::new(&model.picnn, &model.params, 1)?;
        evaluator.set_context(h)?;
        Ok(Self {
            evaluator,
            gamma: model.gamma(),
            config: LbfgsConfig::default(),
        })
    }

    fn value_grad(&mut self, z: &Array1<f64>, y: &Array1<f64>) -> Result<(f64, Array1<f64>)> {
        let (pot, grad) = self.evaluator.evaluate(&z.clone().insert_axis(Axis(0)))?;
        let g = grad.row(0).to_owned();
        Ok((pot[0] - z.dot(y), g - y))
    }

    /// Inverts with tolerance `1e-6 · (1 + ‖y‖∞)` (scaled by the configured
    /// tolerance relative to its default).
    pub fn invert(&mut self, y: &Array1<f64>) -> Result<Array1<f64>> {
        let ynorm = y.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let saved = self.config.tolerance;
        self.config.tolerance = saved * (1.0 + ynorm);
        let out = self.invert_abs(y);
        self.config.tolerance = saved;
        out
    }

    /// Inverts with the configured tolerance taken as absolute.
    pub fn invert_abs(&mut self, y: &Array1<f64>) -> Result<Array1<f64>> {
        // Start from y/γ or y, whichever has the smaller residual.
        let mut start = y.clone();
        if self.gamma > 0.0 {
            let alt = y / self.gamma;
            if inf(&self.value_grad(&alt, y)?.1) < inf(&self.value_grad(&start, y)?.1) {
                start = alt;
            }
        }
        let config = self.config;
        let res = lbfgs::minimize(|z| self.value_grad(z, y), start, &config)?;
        Ok(res.x)
    }
}

fn inf(v: &Array1<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Row-wise `log φ(g(z)) + log det ∇²G(z)` for `z` (`B x n`) and embedded
/// contexts `u` (`B x width`); returns a `B x 1` node.
///
/// Each row is replicated `n` times; replica `i` of instance `b` extracts the
/// `i`-th gradient component, so one extra gradient pass yields all `B`
/// Hessians stacked as `n x n` blocks.
pub fn build_log_density(
    graph: &mut Graph,
    config: &PicnnConfig,
    p: &ParamNodes,
    z: NodeId,
    u: NodeId,
) -> NodeId {
    let n = config.input_dim;
    let b = graph.shape(z).rows;
    let z_rep = graph.repeat_rows(z, n);
    let u_rep = graph.repeat_rows(u, n);
    let pot = picnn::build_potential(graph, config, p, z_rep, u_rep);
    let total = graph.sum(pot);
    let g = graph.gradient(total, &[z_rep]).expect("scalar root")[0];

    let mut mask = Tensor::zeros((b * n, n));
    for r in 0..b * n {
        mask[[r, r % n]] = 1.0;
    }
    let mask = graph.constant(mask);
    let picked = graph.mul(g, mask);
    let picked = graph.sum(picked);
    let hess = graph.gradient(picked, &[z_rep]).expect("scalar root")[0];

    let sq = graph.mul(g, g);
    let sq = graph.sum_cols(sq);
    let sq = graph.sum_row_groups(sq, n);
    let gauss = graph.scale(sq, -0.5 / n as f64);
    let gauss = graph.offset(gauss, -0.5 * n as f64 * LN_2PI);

    let logdets: Vec<NodeId> = (0..b)
        .map(|i| {
            let block = graph.slice_rows(hess, i * n, n);
            graph.logdet_spd(block)
        })
        .collect();
    let logdets = graph.concat_rows(&logdets);
    graph.add(gauss, logdets)
}

/// A reusable program computing row-wise log densities for a fixed batch size.
pub struct DensityProgram {
    graph: Graph,
    program: Program,
    bindings: Bindings,
}

impl DensityProgram {
    pub fn new(model: &QuantileModel, batch: usize) -> Result<Self> {
        let mut graph = Graph::new();
        let nodes = model.params.declare(&mut graph);
        let z = graph.input("z", batch, model.n());
        let h = graph.input("h", 1, model.picnn.context_dim);
        let u = picnn::build_context_embed(&mut graph, &nodes, h);
        let u = graph.broadcast_rows(u, batch);
        let lp = build_log_density(&mut graph, &model.picnn, &nodes, z, u);
        let program = Program::new(&graph, &[lp]);
        let mut bindings = Bindings::new(&graph);
        model.params.bind(&graph, &mut bindings)?;
        Ok(Self { graph, program, bindings })
    }

    pub fn set_context(&mut self, h: &Array1<f64>) -> Result<()> {
        self.bindings.set(&self.graph, "h", h.clone().insert_axis(Axis(0)))?;
        Ok(())
    }

    pub fn evaluate(&mut self, z: &Array2<f64>) -> Result<Array1<f64>> {
        self.bindings.set(&self.graph, "z", z.clone())?;
        let out = self.program.run(&self.graph, &self.bindings).map_err(not_pd)?;
        Ok(out[0].column(0).to_owned())
    }
}
