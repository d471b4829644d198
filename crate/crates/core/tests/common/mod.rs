#![allow(dead_code)]

use mqf2::data::{parse_timestamp, Frequency, Series, TimeSeriesDataset};
use mqf2::rng::{stream, Stream};
use mqf2::{EncoderConfig, Mode, ParamSet, PicnnConfig, QuantileModel};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn small_encoder(context_length: usize, feature_dim: usize) -> EncoderConfig {
    EncoderConfig { hidden_size: 4, num_layers: 1, context_length, feature_dim }
}

/// Initialized parameters shaken by uniform noise of half-width `noise`, so
/// that some gates are closed and the network is far from its init.
pub fn perturb(params: &mut ParamSet, noise: f64, rng: &mut impl Rng) {
    for (_, t) in params.iter_mut() {
        t.mapv_inplace(|v| v + rng.random_range(-noise..noise));
    }
}

/// A random model with `n` outputs and a random context vector.
pub fn random_model(n: usize, mode: Mode, seed: u64) -> (QuantileModel, Array1<f64>) {
    let picnn = PicnnConfig::new(n, 4, 6, 2);
    let mut model = QuantileModel::new(picnn, small_encoder(3, 0), mode, seed).unwrap();
    let mut rng = stream(seed, Stream::Data);
    perturb(&mut model.params, 0.5, &mut rng);
    let h = Array1::from_shape_fn(4, |_| rng.sample::<f64, _>(StandardNormal));
    (model, h)
}

pub fn normal_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
}

pub fn normal_vector(len: usize, rng: &mut impl Rng) -> Array1<f64> {
    Array1::from_shape_fn(len, |_| rng.sample::<f64, _>(StandardNormal))
}

/// Hourly series with a daily cycle and noise.
pub fn hourly_dataset(count: usize, len: usize, prediction_length: usize, seed: u64) -> TimeSeriesDataset {
    let mut rng = stream(seed, Stream::Data);
    let start = parse_timestamp("2021-03-01 00:00:00").unwrap();
    let series = (0..count)
        .map(|i| {
            let level = 5.0 + i as f64;
            let target = (0..len)
                .map(|t| {
                    let phase = 2.0 * std::f64::consts::PI * t as f64 / 24.0;
                    level + phase.sin() + 0.3 * rng.sample::<f64, _>(StandardNormal)
                })
                .collect();
            Series { id: format!("s{i}"), start, target, feat_dynamic_real: vec![] }
        })
        .collect();
    TimeSeriesDataset { series, freq: Frequency::Hourly, prediction_length, context_free: false, gp: None }
}

/// Context-free i.i.d. `N(mean, sd²)` targets of length one.
pub fn gaussian_dataset(count: usize, mean: f64, sd: f64, seed: u64) -> TimeSeriesDataset {
    let mut rng = stream(seed, Stream::Data);
    let start = parse_timestamp("2021-01-01 00:00:00").unwrap();
    let series = (0..count)
        .map(|i| Series {
            id: i.to_string(),
            start,
            target: vec![mean + sd * rng.sample::<f64, _>(StandardNormal)],
            feat_dynamic_real: vec![],
        })
        .collect();
    TimeSeriesDataset { series, freq: Frequency::Hourly, prediction_length: 1, context_free: true, gp: None }
}

/// Central difference of `f` at every coordinate of `x`.
pub fn fd_gradient(x: &Array1<f64>, step: f64, mut f: impl FnMut(&Array1<f64>) -> f64) -> Array1<f64> {
    let mut g = Array1::zeros(x.len());
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp[i] += step;
        let mut xm = x.clone();
        xm[i] -= step;
        g[i] = (f(&xp) - f(&xm)) / (2.0 * step);
    }
    g
}

/// Jacobian by central differences, `J[i][j] = ∂f_i/∂x_j`.
pub fn fd_jacobian(x: &Array1<f64>, step: f64, mut f: impl FnMut(&Array1<f64>) -> Array1<f64>) -> Array2<f64> {
    let n = x.len();
    let mut jac = Array2::zeros((n, n));
    for j in 0..n {
        let mut xp = x.clone();
        xp[j] += step;
        let mut xm = x.clone();
        xm[j] -= step;
        let d = (f(&xp) - f(&xm)) / (2.0 * step);
        jac.column_mut(j).assign(&d);
    }
    jac
}

/// `log |det a|` by an LU decomposition.
pub fn log_abs_det(a: &Array2<f64>) -> f64 {
    let m = nalgebra::DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]]);
    m.lu().determinant().abs().ln()
}

pub fn inf_norm(v: &Array1<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Relative errors of the analytic loss gradient against central differences
/// of an independently assembled loss on a 3-D toy: `(picnn, encoder)`
/// groups, each `‖a − f‖ / ‖f‖`.
pub fn loss_gradient_errors(mode: Mode, seed: u64) -> (f64, f64) {
    use mqf2::metrics::energy_score_estimate;
    use mqf2::training::{make_instances, nll_loss, Batch, LossProgram};

    let ds = hourly_dataset(3, 20, 3, seed);
    let encoder = small_encoder(4, ds.feature_dim());
    let picnn = PicnnConfig::new(3, 4, 4, 2);
    let mut model = QuantileModel::new(picnn, encoder, mode, seed).unwrap();
    perturb(&mut model.params, 0.3, &mut stream(seed, Stream::Init));
    let (s, beta) = (3, 1.0);
    let instances = make_instances(&ds, 4, 3, 2, seed).unwrap();
    let batch = Batch::new(&model, &instances, s, &mut stream(seed, Stream::Training)).unwrap();
    let mut program = LossProgram::new(&model, instances.len(), s, beta).unwrap();
    let (value, grads) = program.evaluate(&model.params, &batch).unwrap();

    let independent = |m: &QuantileModel| -> f64 {
        let mut total = 0.0;
        for (b, inst) in instances.iter().enumerate() {
            let h = m.context(&inst.window).unwrap();
            let z = Array1::from(inst.scaled_target());
            total += match mode {
                Mode::Es => {
                    let alpha = batch.alpha.as_ref().unwrap();
                    let a = alpha.slice(ndarray::s![b * 2 * s..(b + 1) * 2 * s, ..]).to_owned();
                    let w = m.map(&a, &h).unwrap();
                    let c = w.slice(ndarray::s![..s, ..]).to_owned();
                    let c2 = w.slice(ndarray::s![s.., ..]).to_owned();
                    energy_score_estimate(&c, &c2, &w, z.view(), beta).unwrap()
                }
                Mode::Ml => nll_loss(m, &z, &h).unwrap(),
            };
        }
        total / instances.len() as f64 + batch.log_scale
    };
    assert!(rel_err(independent(&model), value) < 1e-10, "loss values disagree");

    let step = 1e-5;
    let (mut num_p, mut den_p, mut num_e, mut den_e) = (0.0, 0.0, 0.0, 0.0);
    let names: Vec<String> = program.names().to_vec();
    for (name, g) in names.iter().zip(&grads) {
        for idx in 0..g.len() {
            let (r, c) = (idx / g.ncols(), idx % g.ncols());
            let mut probe = model.clone();
            probe.params.get_mut(name).unwrap()[[r, c]] += step;
            let up = independent(&probe);
            probe.params.get_mut(name).unwrap()[[r, c]] -= 2.0 * step;
            let down = independent(&probe);
            let fd = (up - down) / (2.0 * step);
            let diff = (g[[r, c]] - fd).powi(2);
            if name.starts_with("encoder") {
                num_e += diff;
                den_e += fd * fd;
            } else {
                num_p += diff;
                den_p += fd * fd;
            }
        }
    }
    ((num_p / den_p).sqrt(), (num_e / den_e).sqrt())
}

/// Upper 1% point of the χ² distribution with 9 degrees of freedom.
pub const CHI2_9_P01: f64 = 21.666;
