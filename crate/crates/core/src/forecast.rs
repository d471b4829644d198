//! Sample-path forecasts for the final horizon of every series.

use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::data::TimeSeriesDataset;
use crate::error::{Error, Result};
use crate::model::{reference_draws, Mode, QuantileModel};
use crate::rng::{stream, Stream};
use crate::training::context_window;

/// A path whose inversion did not converge.
#[derive(Clone, Debug, PartialEq)]
pub struct PathFailure {
    pub series: usize,
    pub sample: usize,
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug)]
pub struct Forecast {
    /// One `S' x n` block per series in data units, `S' ≤ S` when some
    /// inversions failed. Rows keep their draw order.
    pub paths: Vec<Array2<f64>>,
    /// Sample indices of the rows in `paths`, per series.
    pub samples: Vec<Vec<usize>>,
    pub failures: Vec<PathFailure>,
}

/// Seed of the sampling stream for series `i`.
pub fn series_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_add((i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Targets over the final `tau` points and the histories before them.
pub fn holdout(dataset: &TimeSeriesDataset, tau: usize) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let short: Vec<String> = dataset.series.iter().filter(|s| s.len() < tau).map(|s| s.id.clone()).collect();
    if !short.is_empty() {
        return Err(Error::SeriesTooShort(short));
    }
    Ok(dataset
        .series
        .iter()
        .map(|s| {
            let cut = s.len() - tau;
            (s.target[cut..].to_vec(), s.target[..cut].to_vec())
        })
        .unzip())
}

/// `count` paths for the horizon after the first `end` points of series `i`.
pub fn sample_paths(
    model: &QuantileModel,
    dataset: &TimeSeriesDataset,
    i: usize,
    end: usize,
    count: usize,
    seed: u64,
) -> Result<(Array2<f64>, Vec<usize>, Vec<PathFailure>)> {
    let (window, scale) = context_window(dataset, i, end, model.encoder.context_length);
    let h = model.context(&window)?;
    let seed = series_seed(seed, i);
    match model.mode {
        Mode::Es => {
            let paths = model.sample_forward(&h, count, seed)? * scale;
            Ok((paths, (0..count).collect(), Vec::new()))
        }
        Mode::Ml => {
            let ys = reference_draws(&mut stream(seed, Stream::Sampling), count, model.n());
            let mut inv = model.inverter(&h)?;
            let mut rows: Vec<Array1<f64>> = Vec::with_capacity(count);
            let mut kept = Vec::with_capacity(count);
            let mut failures = Vec::new();
            for (j, y) in ys.rows().into_iter().enumerate() {
                match inv.invert(&y.to_owned()) {
                    Ok(z) => {
                        rows.push(z * scale);
                        kept.push(j);
                    }
                    Err(Error::NonConvergence { residual, iterations }) => {
                        failures.push(PathFailure { series: i, sample: j, residual, iterations });
                    }
                    Err(e) => return Err(e),
                }
            }
            let mut paths = Array2::zeros((rows.len(), model.n()));
            for (r, z) in rows.iter().enumerate() {
                paths.row_mut(r).assign(z);
            }
            Ok((paths, kept, failures))
        }
    }
}

/// Forecasts the final `n` points of every series from the window before
/// them. Series are processed in parallel with per-series seeds, so the
/// output does not depend on the thread count.
pub fn predict(model: &QuantileModel, dataset: &TimeSeriesDataset, count: usize, seed: u64) -> Result<Forecast> {
    model.validate()?;
    let n = model.n();
    if dataset.prediction_length != n {
        return Err(Error::Config(format!(
            "model horizon {n} differs from the dataset's prediction_length {}",
            dataset.prediction_length
        )));
    }
    if dataset.feature_dim() != model.encoder.feature_dim {
        return Err(Error::Config(format!(
            "encoder feature_dim {} does not match the dataset's {} covariates",
            model.encoder.feature_dim,
            dataset.feature_dim()
        )));
    }
    let history = if dataset.context_free { 0 } else { model.encoder.context_length };
    let short: Vec<String> = dataset
        .series
        .iter()
        .filter(|s| s.len() < n + history)
        .map(|s| s.id.clone())
        .collect();
    if !short.is_empty() {
        return Err(Error::SeriesTooShort(short));
    }
    let per_series: Vec<_> = (0..dataset.len())
        .into_par_iter()
        .map(|i| sample_paths(model, dataset, i, dataset.series[i].len() - n, count, seed))
        .collect::<Result<_>>()?;
    let mut out = Forecast { paths: Vec::new(), samples: Vec::new(), failures: Vec::new() };
    for (p, k, f) in per_series {
        out.paths.push(p);
        out.samples.push(k);
        out.failures.extend(f);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{parse_timestamp, Frequency, Series};
    use crate::{EncoderConfig, PicnnConfig};

    fn dataset(len: usize, tau: usize) -> TimeSeriesDataset {
        let start = parse_timestamp("2020-01-01").unwrap();
        let series = (0..3)
            .map(|i| Series {
                id: format!("{i}"),
                start,
                target: (0..len).map(|t| (i * len + t) as f64).collect(),
                feat_dynamic_real: vec![],
            })
            .collect();
        TimeSeriesDataset { series, freq: Frequency::Daily, prediction_length: tau, context_free: false, gp: None }
    }

    fn model(mode: Mode, tau: usize) -> QuantileModel {
        let enc = EncoderConfig { hidden_size: 3, num_layers: 1, context_length: 4, feature_dim: 2 };
        QuantileModel::new(PicnnConfig::new(tau, 3, 4, 2), enc, mode, 1).unwrap()
    }

    #[test]
    fn holdout_splits_the_tail() {
        let (t, h) = holdout(&dataset(6, 2), 2).unwrap();
        assert_eq!(t[0], vec![4.0, 5.0]);
        assert_eq!(h[1], vec![6.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn predictions_are_seeded_and_shaped() {
        let ds = dataset(8, 2);
        for mode in [Mode::Es, Mode::Ml] {
            let m = model(mode, 2);
            let a = predict(&m, &ds, 5, 3).unwrap();
            let b = predict(&m, &ds, 5, 3).unwrap();
            assert!(a.failures.is_empty());
            assert_eq!(a.paths.len(), 3);
            assert_eq!(a.paths[0].dim(), (5, 2));
            assert_eq!(a.paths, b.paths);
            assert_ne!(a.paths[0], a.paths[1]);
        }
    }

    #[test]
    fn horizon_and_length_are_checked() {
        assert!(matches!(predict(&model(Mode::Es, 3), &dataset(8, 2), 2, 0), Err(Error::Config(_))));
        assert!(matches!(predict(&model(Mode::Es, 2), &dataset(5, 2), 2, 0), Err(Error::SeriesTooShort(_))));
    }
}
