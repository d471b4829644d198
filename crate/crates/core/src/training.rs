//! Training objectives, the window sampler and the optimization loop.

use mqf2_autodiff::{Bindings, Graph, NodeId, Program, Tensor};
use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::TimeSeriesDataset;
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{self, Mode, QuantileModel};
use crate::params::ParamSet;
use crate::picnn::{self, PicnnConfig};
use crate::rng::{stream, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub beta: f64,
    pub es_samples: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Es,
            beta: 1.0,
            es_samples: 50,
            batch_size: 32,
            epochs: 50,
            batches_per_epoch: 50,
            learning_rate: 1e-3,
            grad_clip: 10.0,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 2.0) {
            return Err(Error::Config("beta must lie in (0, 2)".into()));
        }
        if self.es_samples < 2 {
            return Err(Error::Config("es_samples must be at least 2".into()));
        }
        if self.batch_size < 1 || self.batches_per_epoch < 1 {
            return Err(Error::Config("batch_size and batches_per_epoch must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::Config("learning_rate and grad_clip must be positive".into()));
        }
        Ok(())
    }
}

/// Sample energy score; the training objective per instance.
pub fn energy_score_loss(
    c: &Array2<f64>,
    c_prime: &Array2<f64>,
    c_all: &Array2<f64>,
    z: ArrayView1<f64>,
    beta: f64,
) -> Result<f64> {
    metrics::energy_score_estimate(c, c_prime, c_all, z, beta)
}

/// `−log p(z | h)`.
pub fn nll_loss(model: &QuantileModel, z: &Array1<f64>, h: &Array1<f64>) -> Result<f64> {
    Ok(-model.log_density(z, h)?)
}

/// One conditioning window and its target horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingInstance {
    pub series: usize,
    pub start: usize,
    /// Scaled encoder input, `context_length x (1 + features)`.
    pub window: Array2<f64>,
    /// Target in data units.
    pub target: Vec<f64>,
    pub scale: f64,
}

impl TrainingInstance {
    pub fn scaled_target(&self) -> Vec<f64> {
        self.target.iter().map(|v| v / self.scale).collect()
    }
}

/// Builds the encoder input for the `context_length` points before `end`.
/// Context-free datasets give an all-zero window and unit scale.
pub fn context_window(
    dataset: &TimeSeriesDataset,
    series: usize,
    end: usize,
    context_length: usize,
) -> (Array2<f64>, f64) {
    if dataset.context_free {
        return (Array2::zeros((context_length, 1)), 1.0);
    }
    let s = &dataset.series[series];
    let past = &s.target[end - context_length..end];
    let (scaled, scale) = encoder::scale_window(past);
    let cov = dataset.covariates(s);
    let cov = cov.slice(ndarray::s![end - context_length..end, ..]).to_owned();
    (encoder::window_rows(&scaled, &cov), scale)
}

/// Draws uniformly over series, then uniformly over admissible starts.
#[derive(Clone, Debug)]
pub struct InstanceSampler<'a> {
    dataset: &'a TimeSeriesDataset,
    context_length: usize,
    n: usize,
    eligible: Vec<usize>,
    /// Series too short to yield a single window.
    pub skipped: usize,
}

impl<'a> InstanceSampler<'a> {
    pub fn new(dataset: &'a TimeSeriesDataset, context_length: usize, n: usize) -> Result<Self> {
        let need = n + if dataset.context_free { 0 } else { context_length };
        let eligible: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.series[i].len() >= need).collect();
        let skipped = dataset.len() - eligible.len();
        if skipped > 0 {
            log::warn!("{skipped} series shorter than {need} points skipped");
        }
        if eligible.is_empty() {
            return Err(Error::SeriesTooShort(dataset.series.iter().map(|s| s.id.clone()).collect()));
        }
        Ok(Self { dataset, context_length, n, eligible, skipped })
    }

    fn history(&self) -> usize {
        if self.dataset.context_free {
            0
        } else {
            self.context_length
        }
    }

    /// Largest admissible start for series `i`.
    pub fn max_start(&self, i: usize) -> usize {
        self.dataset.series[i].len() - self.history() - self.n
    }

    pub fn draw(&self, rng: &mut impl Rng) -> TrainingInstance {
        let series = self.eligible[rng.random_range(0..self.eligible.len())];
        let start = rng.random_range(0..=self.max_start(series));
        self.instance(series, start)
    }

    pub fn instance(&self, series: usize, start: usize) -> TrainingInstance {
        let end = start + self.history();
        let (window, scale) = context_window(self.dataset, series, end, self.context_length);
        TrainingInstance {
            series,
            start,
            window,
            target: self.dataset.series[series].target[end..end + self.n].to_vec(),
            scale,
        }
    }
}

/// `count` seeded instances with uniformly random admissible starts.
pub fn make_instances(
    dataset: &TimeSeriesDataset,
    context_length: usize,
    n: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<TrainingInstance>> {
    let sampler = InstanceSampler::new(dataset, context_length, n)?;
    let mut rng = stream(seed, Stream::Training);
    Ok((0..count).map(|_| sampler.draw(&mut rng)).collect())
}

/// Graph inputs for one batch.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Step-major stacked windows.
    pub window: Tensor,
    /// Scaled targets, `B x n`.
    pub target: Tensor,
    /// Reference draws `B·2S x n` (energy-score mode only).
    pub alpha: Option<Tensor>,
    /// `Σ_b n log s_b / B`, the density correction of mean scaling
    /// (zero in energy-score mode).
    pub log_scale: f64,
}

impl Batch {
    pub fn new(
        model: &QuantileModel,
        instances: &[TrainingInstance],
        es_samples: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let windows: Vec<Array2<f64>> = instances.iter().map(|i| i.window.clone()).collect();
        let window = encoder::stack_windows(&model.encoder, &windows)?;
        let n = model.n();
        let b = instances.len();
        let mut target = Tensor::zeros((b, n));
        for (r, inst) in instances.iter().enumerate() {
            for (t, v) in inst.scaled_target().into_iter().enumerate() {
                target[[r, t]] = v;
            }
        }
        let alpha = match model.mode {
            Mode::Es => Some(model::reference_draws(rng, b * 2 * es_samples, n)),
            Mode::Ml => None,
        };
        let log_scale = match model.mode {
            Mode::Es => 0.0,
            Mode::Ml => instances.iter().map(|i| n as f64 * i.scale.ln()).sum::<f64>() / b as f64,
        };
        Ok(Self { window, target, alpha, log_scale })
    }
}

/// Batched loss and parameter gradients as one reusable program.
pub struct LossProgram {
    graph: Graph,
    program: Program,
    bindings: Bindings,
    names: Vec<String>,
    batch: usize,
}

impl LossProgram {
    pub fn new(model: &QuantileModel, batch: usize, es_samples: usize, beta: f64) -> Result<Self> {
        let n = model.n();
        let mut graph = Graph::new();
        let nodes = model.params.declare(&mut graph);
        let window = graph.input("window", model.encoder.context_length * batch, model.encoder.input_width());
        let h = encoder::build_encoder(&mut graph, &model.encoder, &nodes, window, batch);
        let u = picnn::build_context_embed(&mut graph, &nodes, h);
        let target = graph.input("target", batch, n);
        let loss = match model.mode {
            Mode::Es => {
                let s = es_samples;
                let alpha = graph.input("alpha", batch * 2 * s, n);
                let u_rep = graph.repeat_rows(u, 2 * s);
                let pot = picnn::build_potential(&mut graph, &model.picnn, &nodes, alpha, u_rep);
                let total = graph.sum(pot);
                let g = graph.gradient(total, &[alpha])?[0];
                let per: Vec<NodeId> = (0..batch)
                    .map(|b| es_instance(&mut graph, g, target, b, s, beta))
                    .collect();
                let per = graph.concat_rows(&per);
                let sum = graph.sum(per);
                graph.scale(sum, 1.0 / batch as f64)
            }
            Mode::Ml => {
                let lp = model::build_log_density(&mut graph, &model.picnn, &nodes, target, u);
                let sum = graph.sum(lp);
                graph.scale(sum, -1.0 / batch as f64)
            }
        };
        let ids = nodes.ids();
        let grads = graph.gradient(loss, &ids)?;
        let mut roots = vec![loss];
        roots.extend(grads);
        let program = Program::new(&graph, &roots);
        let bindings = Bindings::new(&graph);
        Ok(Self {
            graph,
            program,
            bindings,
            names: nodes.names().into_iter().map(String::from).collect(),
            batch,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Mean loss and gradients in parameter declaration order.
    pub fn evaluate(&mut self, params: &ParamSet, batch: &Batch) -> Result<(f64, Vec<Tensor>)> {
        params.bind(&self.graph, &mut self.bindings)?;
        self.bindings.set(&self.graph, "window", batch.window.clone())?;
        self.bindings.set(&self.graph, "target", batch.target.clone())?;
        if let Some(a) = &batch.alpha {
            self.bindings.set(&self.graph, "alpha", a.clone())?;
        }
        let mut out = self.program.run(&self.graph, &self.bindings).map_err(|e| match e {
            mqf2_autodiff::AutodiffError::NotPositiveDefinite { .. } => Error::HessianNotPD,
            other => Error::Autodiff(other),
        })?;
        let grads = out.split_off(1);
        Ok((out[0][[0, 0]] + batch.log_scale, grads))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Sample energy score of instance `b` from its `2S` forward samples.
fn es_instance(graph: &mut Graph, g: NodeId, target: NodeId, b: usize, s: usize, beta: f64) -> NodeId {
    let pow = |graph: &mut Graph, d: NodeId| if beta == 1.0 { d } else { graph.powf(d, beta) };
    let gb = graph.slice_rows(g, b * 2 * s, 2 * s);
    let c = graph.slice_rows(gb, 0, s);
    let c2 = graph.slice_rows(gb, s, s);
    let d = graph.pairwise_dist(c, c2);
    let d = pow(graph, d);
    let spread = graph.sum(d);
    let spread = graph.scale(spread, 1.0 / (2.0 * (s * s) as f64));
    let zb = graph.slice_rows(target, b, 1);
    let e = graph.pairwise_dist(gb, zb);
    let e = pow(graph, e);
    let err = graph.sum(e);
    let err = graph.scale(err, 1.0 / (2 * s) as f64);
    graph.sub(err, spread)
}

/// Adam with global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    clip: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64, clip: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.dim())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) {
        let norm = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        let factor = if norm > self.clip { self.clip / norm } else { 1.0 };
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (_, p)) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(&grads[k])
                .for_each(|p, m, v, &g| {
                    let g = g * factor;
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                });
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: QuantileModel,
    /// Mean loss per epoch.
    pub losses: Vec<f64>,
    pub skipped_series: usize,
}

/// Trains a fresh model; see [`train_model`].
pub fn train(
    dataset: &TimeSeriesDataset,
    encoder: &EncoderConfig,
    picnn: &PicnnConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let model = QuantileModel::new(picnn.clone(), encoder.clone(), config.mode, config.seed)?;
    train_model(dataset, model, config, |_, _, _| Ok(()))
}

/// Optimizes `model` in place of its parameters. `on_epoch(epoch, model,
/// mean_loss)` runs after every epoch.
pub fn train_model<F>(
    dataset: &TimeSeriesDataset,
    mut model: QuantileModel,
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(usize, &QuantileModel, f64) -> Result<()>,
{
    config.validate()?;
    model.validate()?;
    if model.mode != config.mode {
        return Err(Error::Config(format!(
            "model mode {} differs from training mode {}",
            model.mode, config.mode
        )));
    }
    if dataset.feature_dim() != model.encoder.feature_dim {
        return Err(Error::Config(format!(
            "encoder feature_dim {} does not match the dataset's {} covariates",
            model.encoder.feature_dim,
            dataset.feature_dim()
        )));
    }
    let sampler = InstanceSampler::new(dataset, model.encoder.context_length, model.n())?;
    let mut rng = stream(config.seed, Stream::Training);
    let mut program = LossProgram::new(&model, config.batch_size, config.es_samples, config.beta)?;
    let mut adam = Adam::new(&model.params, config.learning_rate, config.grad_clip);
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        for batch_idx in 0..config.batches_per_epoch {
            let instances: Vec<TrainingInstance> = (0..config.batch_size).map(|_| sampler.draw(&mut rng)).collect();
            let batch = Batch::new(&model, &instances, config.es_samples, &mut rng)?;
            let (loss, grads) = match program.evaluate(&model.params, &batch) {
                Ok(v) => v,
                Err(Error::HessianNotPD) => return Err(Error::NonFiniteLoss { epoch, batch: batch_idx }),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
                return Err(Error::NonFiniteLoss { epoch, batch: batch_idx });
            }
            adam.step(&mut model.params, &grads);
            total += loss;
        }
        let mean = total / config.batches_per_epoch as f64;
        log::info!("epoch {epoch}: mean loss {mean:.6}");
        losses.push(mean);
        on_epoch(epoch, &model, mean)?;
    }
    Ok(TrainOutcome { model, losses, skipped_series: sampler.skipped })
}

/// Independent Gaussian marginals per horizon step, fitted to the last `n`
/// points of every series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndependentBaseline {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn baseline_independent(dataset: &TimeSeriesDataset, n: usize) -> Result<IndependentBaseline> {
    let tails: Vec<&[f64]> = dataset
        .series
        .iter()
        .filter(|s| s.len() >= n)
        .map(|s| &s.target[s.len() - n..])
        .collect();
    if tails.is_empty() {
        return Err(Error::SeriesTooShort(dataset.series.iter().map(|s| s.id.clone()).collect()));
    }
    let m = tails.len() as f64;
    let mean: Vec<f64> = (0..n).map(|t| tails.iter().map(|s| s[t]).sum::<f64>() / m).collect();
    let std = (0..n)
        .map(|t| (tails.iter().map(|s| (s[t] - mean[t]).powi(2)).sum::<f64>() / m).sqrt())
        .collect();
    Ok(IndependentBaseline { mean, std })
}

impl IndependentBaseline {
    /// `count x n` independent draws.
    pub fn sample(&self, count: usize, rng: &mut impl Rng) -> Array2<f64> {
        let n = self.mean.len();
        let mut out = Array2::zeros((count, n));
        for r in 0..count {
            for t in 0..n {
                out[[r, t]] = if self.std[t] > 0.0 {
                    Normal::new(self.mean[t], self.std[t]).expect("positive std").sample(rng)
                } else {
                    self.mean[t]
                };
            }
        }
        out
    }
}
