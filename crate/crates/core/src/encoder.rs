//! Recurrent context encoder.
//!
//! A stack of gated recurrent cells reads the conditioning window left to
//! right; the top layer's final hidden state is the context vector `h`.
//! Each step's input row is the mean-scaled target followed by covariates.

use mqf2_autodiff::{Bindings, Graph, NodeId, Shape, Tensor};
use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{uniform, ParamNodes, ParamSet};

pub const PREFIX: &str = "encoder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    #[serde(default = "default_hidden")]
    pub hidden_size: usize,
    #[serde(default = "default_layers")]
    pub num_layers: usize,
    pub context_length: usize,
    /// Number of covariate columns per step (the scaled target is extra).
    #[serde(default)]
    pub feature_dim: usize,
}

fn default_hidden() -> usize {
    40
}

fn default_layers() -> usize {
    2
}

impl EncoderConfig {
    pub fn new(context_length: usize, feature_dim: usize) -> Self {
        Self {
            hidden_size: default_hidden(),
            num_layers: default_layers(),
            context_length,
            feature_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_size < 1 || self.num_layers < 1 || self.context_length < 1 {
            return Err(Error::Config(
                "encoder hidden_size, num_layers and context_length must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Width of one input row.
    pub fn input_width(&self) -> usize {
        1 + self.feature_dim
    }

    pub fn layout(&self) -> Vec<(String, usize, usize)> {
        let hs = self.hidden_size;
        let mut out = Vec::new();
        for l in 0..self.num_layers {
            let inp = if l == 0 { self.input_width() } else { hs };
            let p = |s: &str| format!("{PREFIX}.l{l}.{s}");
            for gate in ["z", "r", "n"] {
                out.push((p(&format!("w_x{gate}")), inp, hs));
                out.push((p(&format!("w_h{gate}")), hs, hs));
                out.push((p(&format!("b_{gate}")), 1, hs));
            }
            out.push((p("b_hn"), 1, hs));
        }
        out
    }

    /// Uniform(±1/√hidden) for every tensor, the usual recurrent-cell init.
    pub fn init_params(&self, rng: &mut impl Rng) -> ParamSet {
        let bound = 1.0 / (self.hidden_size as f64).sqrt();
        let mut ps = ParamSet::new();
        for (name, r, c) in self.layout() {
            ps.insert(name, uniform(r, c, bound, rng));
        }
        ps
    }

    pub fn zero_params(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        for (name, r, c) in self.layout() {
            ps.insert(name, Tensor::zeros((r, c)));
        }
        ps
    }
}

/// Mean scaling: `s = 1 + mean(|past|)`, returns `(past / s, s)`.
pub fn scale_window(past: &[f64]) -> (Vec<f64>, f64) {
    assert!(!past.is_empty(), "scale_window needs at least one value");
    let s = 1.0 + past.iter().map(|v| v.abs()).sum::<f64>() / past.len() as f64;
    (past.iter().map(|v| v / s).collect(), s)
}

/// Builds the encoder over `batch` windows stored step-major in `window`
/// (`context_length * batch` rows; row `t * batch + b` is step `t` of window
/// `b`). Returns the `batch x hidden` context node.
pub fn build_encoder(
    graph: &mut Graph,
    config: &EncoderConfig,
    p: &ParamNodes,
    window: NodeId,
    batch: usize,
) -> NodeId {
    let s = graph.shape(window);
    assert_eq!(s, Shape::new(config.context_length * batch, config.input_width()));
    let hs = config.hidden_size;
    let mut states: Vec<Option<NodeId>> = vec![None; config.num_layers];
    for t in 0..config.context_length {
        let mut x = graph.slice_rows(window, t * batch, batch);
        for (l, state) in states.iter_mut().enumerate() {
            let name = |s: &str| format!("{PREFIX}.l{l}.{s}");
            let gate = |graph: &mut Graph, g: &str, act: fn(&mut Graph, NodeId) -> NodeId, h: Option<NodeId>| {
                let mut pre = graph.affine(x, p.get(&name(&format!("w_x{g}"))), p.get(&name(&format!("b_{g}"))));
                if let Some(h) = h {
                    let hh = graph.matmul(h, p.get(&name(&format!("w_h{g}"))));
                    pre = graph.add(pre, hh);
                }
                act(graph, pre)
            };
            let z = gate(graph, "z", Graph::sigmoid, *state);
            let r = gate(graph, "r", Graph::sigmoid, *state);
            // Candidate: tanh(x W_xn + b_n + r ∘ (h W_hn + b_hn)).
            let mut cand = graph.affine(x, p.get(&name("w_xn")), p.get(&name("b_n")));
            let recur = match *state {
                Some(h) => graph.affine(h, p.get(&name("w_hn")), p.get(&name("b_hn"))),
                None => graph.broadcast_rows(p.get(&name("b_hn")), batch),
            };
            let recur = graph.mul(r, recur);
            cand = graph.add(cand, recur);
            let cand = graph.tanh(cand);
            // h' = n + z ∘ (h - n), with h = 0 before the first step.
            let next = match *state {
                Some(h) => {
                    let diff = graph.sub(h, cand);
                    let zd = graph.mul(z, diff);
                    graph.add(cand, zd)
                }
                None => {
                    let zc = graph.mul(z, cand);
                    graph.sub(cand, zc)
                }
            };
            *state = Some(next);
            x = next;
        }
    }
    let h = states[config.num_layers - 1].expect("at least one step");
    assert_eq!(graph.shape(h), Shape::new(batch, hs));
    h
}

/// Lays out per-window step rows `[scaled target, covariates...]` step-major.
pub fn stack_windows(config: &EncoderConfig, windows: &[Array2<f64>]) -> Result<Tensor> {
    let b = windows.len();
    let mut out = Tensor::zeros((config.context_length * b, config.input_width()));
    for (j, w) in windows.iter().enumerate() {
        if w.dim() != (config.context_length, config.input_width()) {
            return Err(Error::DimensionMismatch {
                what: "encoder window rows",
                expected: config.context_length,
                got: w.nrows(),
            });
        }
        for t in 0..config.context_length {
            out.row_mut(t * b + j).assign(&w.row(t));
        }
    }
    Ok(out)
}

/// Builds one encoder input window from already-scaled targets and covariates.
pub fn window_rows(scaled: &[f64], covariates: &Array2<f64>) -> Array2<f64> {
    let c = covariates.ncols();
    let mut w = Array2::zeros((scaled.len(), 1 + c));
    for (t, v) in scaled.iter().enumerate() {
        w[[t, 0]] = *v;
        if c > 0 {
            w.row_mut(t).slice_mut(ndarray::s![1..]).assign(&covariates.row(t));
        }
    }
    w
}

/// Encodes one window (`context_length x input_width`).
pub fn encode(config: &EncoderConfig, params: &ParamSet, window: &Array2<f64>) -> Result<Array1<f64>> {
    Ok(encode_batch(config, params, std::slice::from_ref(window))?.row(0).to_owned())
}

/// Encodes several windows at once; row `b` is the context of window `b`.
pub fn encode_batch(config: &EncoderConfig, params: &ParamSet, windows: &[Array2<f64>]) -> Result<Tensor> {
    let stacked = stack_windows(config, windows)?;
    let mut graph = Graph::new();
    let nodes = params.declare(&mut graph);
    let w = graph.input("window", stacked.nrows(), stacked.ncols());
    let h = build_encoder(&mut graph, config, &nodes, w, windows.len());
    let mut b = Bindings::new(&graph);
    params.bind(&graph, &mut b)?;
    b.set(&graph, "window", stacked)?;
    Ok(graph.evaluate(h, &b)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use ndarray::array;

    #[test]
    fn scale_window_examples() {
        assert_eq!(scale_window(&[0.0, 0.0, 0.0]), (vec![0.0, 0.0, 0.0], 1.0));
        assert_eq!(scale_window(&[2.0, 4.0]), (vec![0.5, 1.0], 4.0));
        let (scaled, s) = scale_window(&[-2.0, 2.0]);
        assert_eq!(s, 3.0);
        assert!((scaled[0] + 2.0 / 3.0).abs() < 1e-15 && (scaled[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_and_inputs_give_zero_context() {
        let cfg = EncoderConfig::new(5, 2);
        let ps = cfg.zero_params();
        let h = encode(&cfg, &ps, &Array2::zeros((5, 3))).unwrap();
        assert_eq!(h, Array1::<f64>::zeros(40));
    }

    #[test]
    fn order_matters_for_generic_weights() {
        let mut cfg = EncoderConfig::new(4, 0);
        cfg.hidden_size = 6;
        let ps = cfg.init_params(&mut stream(3, Stream::Init));
        let fwd = array![[0.1], [0.9], [-0.4], [0.3]];
        let rev = array![[0.3], [-0.4], [0.9], [0.1]];
        let a = encode(&cfg, &ps, &fwd).unwrap();
        let b = encode(&cfg, &ps, &rev).unwrap();
        assert!(a.iter().zip(b.iter()).any(|(x, y)| (x - y).abs() > 1e-6));
        assert_eq!(a, encode(&cfg, &ps, &fwd).unwrap());
    }

    #[test]
    fn batch_rows_match_single_windows() {
        let mut cfg = EncoderConfig::new(3, 1);
        cfg.hidden_size = 5;
        let ps = cfg.init_params(&mut stream(1, Stream::Init));
        let w1 = array![[0.1, 0.0], [0.2, 0.5], [0.3, 1.0]];
        let w2 = array![[-1.0, 0.2], [0.0, 0.4], [2.0, 0.6]];
        let batch = encode_batch(&cfg, &ps, &[w1.clone(), w2.clone()]).unwrap();
        let h1 = encode(&cfg, &ps, &w1).unwrap();
        let h2 = encode(&cfg, &ps, &w2).unwrap();
        for k in 0..5 {
            assert!((batch[[0, k]] - h1[k]).abs() < 1e-15);
            assert!((batch[[1, k]] - h2[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn wrong_window_length_is_rejected() {
        let cfg = EncoderConfig::new(3, 0);
        let ps = cfg.zero_params();
        assert!(encode(&cfg, &ps, &Array2::zeros((2, 1))).is_err());
    }
}
