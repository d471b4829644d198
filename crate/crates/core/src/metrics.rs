//! Forecast evaluation: weighted quantile loss, CRPS of the horizon sum,
//! scaled interval score, energy score and correlation recovery.
//!
//! Sample paths for one series are an `S x τ` matrix, one path per row.
//! Predicted quantiles are per-step empirical quantiles of the paths.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub quantile_levels: Vec<f64>,
    pub msis_zeta: f64,
    /// Seasonal lag; taken from the dataset frequency when absent.
    pub seasonal_lag: Option<usize>,
    pub energy_beta: f64,
    /// 1-based horizon steps reported individually.
    pub wql_steps: Vec<usize>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            quantile_levels: (1..=9).map(|i| i as f64 / 10.0).collect(),
            msis_zeta: 0.05,
            seasonal_lag: None,
            energy_beta: 1.0,
            wql_steps: vec![1, 5, 10, 15, 20],
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        let l = &self.quantile_levels;
        if l.is_empty() || l.iter().any(|a| !(*a > 0.0 && *a < 1.0)) || l.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "quantile levels must lie in (0, 1) and increase strictly".into(),
            ));
        }
        if !(self.msis_zeta > 0.0 && self.msis_zeta < 1.0) {
            return Err(Error::Config("msis_zeta must lie in (0, 1)".into()));
        }
        if self.seasonal_lag == Some(0) {
            return Err(Error::Config("seasonal_lag must be at least 1".into()));
        }
        if !(self.energy_beta > 0.0 && self.energy_beta < 2.0) {
            return Err(Error::Config("energy_beta must lie in (0, 2)".into()));
        }
        Ok(())
    }
}

/// `ρ_α(z, ẑ) = (z − ẑ)(α − 1{z < ẑ})`.
pub fn quantile_loss(z: f64, zhat: f64, alpha: f64) -> f64 {
    let d = z - zhat;
    d * (alpha - if d < 0.0 { 1.0 } else { 0.0 })
}

/// Order statistic of rank `⌈αS⌉` (1-based, at least 1).
pub fn empirical_quantile(values: &[f64], alpha: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_of_sorted(&sorted, alpha)
}

fn quantile_of_sorted(sorted: &[f64], alpha: f64) -> f64 {
    let s = sorted.len();
    assert!(s > 0, "quantile of an empty sample");
    // Guard against α·S landing a rounding error above an integer.
    let rank = ((alpha * s as f64) - 1e-9).ceil().max(1.0) as usize;
    sorted[rank.min(s) - 1]
}

/// Per-step empirical quantiles: `levels x τ`.
pub fn path_quantiles(paths: &Array2<f64>, levels: &[f64]) -> Array2<f64> {
    let mut out = Array2::zeros((levels.len(), paths.ncols()));
    for (t, col) in paths.axis_iter(Axis(1)).enumerate() {
        let mut sorted = col.to_vec();
        sorted.sort_by(f64::total_cmp);
        for (k, a) in levels.iter().enumerate() {
            out[[k, t]] = quantile_of_sorted(&sorted, *a);
        }
    }
    out
}

fn check_shapes(targets: &[Vec<f64>], paths: &[Array2<f64>]) -> Result<()> {
    if targets.len() != paths.len() {
        return Err(Error::DimensionMismatch {
            what: "series count",
            expected: targets.len(),
            got: paths.len(),
        });
    }
    for (z, p) in targets.iter().zip(paths) {
        if p.nrows() == 0 {
            return Err(Error::EmptySampleSet);
        }
        if p.ncols() != z.len() {
            return Err(Error::DimensionMismatch {
                what: "horizon length",
                expected: z.len(),
                got: p.ncols(),
            });
        }
    }
    Ok(())
}

/// Weighted quantile loss per level, restricted to the given steps
/// (0-based) or the full horizon when `steps` is `None`.
fn wql_by_level(
    targets: &[Vec<f64>],
    paths: &[Array2<f64>],
    levels: &[f64],
    steps: Option<&[usize]>,
) -> Result<Vec<f64>> {
    check_shapes(targets, paths)?;
    let mut num = vec![0.0; levels.len()];
    let mut den = 0.0;
    for (z, p) in targets.iter().zip(paths) {
        let q = path_quantiles(p, levels);
        let all: Vec<usize> = (0..z.len()).collect();
        for &t in steps.unwrap_or(&all) {
            if t >= z.len() {
                continue;
            }
            den += z[t].abs();
            for (k, a) in levels.iter().enumerate() {
                num[k] += 2.0 * quantile_loss(z[t], q[[k, t]], *a);
            }
        }
    }
    if den == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    Ok(num.into_iter().map(|v| v / den).collect())
}

pub fn mean_wql(targets: &[Vec<f64>], paths: &[Array2<f64>], levels: &[f64]) -> Result<f64> {
    let w = wql_by_level(targets, paths, levels, None)?;
    Ok(w.iter().sum::<f64>() / w.len() as f64)
}

/// Mean weighted quantile loss at 1-based horizon step `step`.
pub fn per_step_wql(targets: &[Vec<f64>], paths: &[Array2<f64>], levels: &[f64], step: usize) -> Result<f64> {
    assert!(step >= 1, "steps are 1-based");
    let w = wql_by_level(targets, paths, levels, Some(&[step - 1]))?;
    Ok(w.iter().sum::<f64>() / w.len() as f64)
}

/// CRPS of the horizon sum, averaged over series.
pub fn sum_crps(targets: &[Vec<f64>], paths: &[Array2<f64>]) -> Result<f64> {
    check_shapes(targets, paths)?;
    let mut total = 0.0;
    for (z, p) in targets.iter().zip(paths) {
        let u: f64 = z.iter().sum();
        let sums: Vec<f64> = p.rows().into_iter().map(|r| r.sum()).collect();
        let s = sums.len() as f64;
        let mut spread = 0.0;
        for a in &sums {
            for b in &sums {
                spread += (a - b).abs();
            }
        }
        let err: f64 = sums.iter().map(|a| (a - u).abs()).sum();
        total += -spread / (2.0 * s * s) + err / s;
    }
    Ok(total / targets.len() as f64)
}

/// Mean absolute seasonal difference at lag `f`, pooled over histories.
pub fn seasonal_error(histories: &[Vec<f64>], f: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for h in histories {
        for t in 0..h.len().saturating_sub(f) {
            sum += (h[t] - h[t + f]).abs();
            count += 1;
        }
    }
    if count == 0 || sum == 0.0 {
        return Err(Error::ZeroSeasonalError);
    }
    Ok(sum / count as f64)
}

/// Interval score of the central `1 − ζ` interval, scaled by the seasonal error.
pub fn msis(
    targets: &[Vec<f64>],
    paths: &[Array2<f64>],
    histories: &[Vec<f64>],
    zeta: f64,
    f: usize,
) -> Result<f64> {
    check_shapes(targets, paths)?;
    let se = seasonal_error(histories, f)?;
    let (lo_a, hi_a) = (zeta / 2.0, 1.0 - zeta / 2.0);
    let mut total = 0.0;
    let mut count = 0usize;
    for (z, p) in targets.iter().zip(paths) {
        let q = path_quantiles(p, &[lo_a, hi_a]);
        for (t, zt) in z.iter().enumerate() {
            let (lo, hi) = (q[[0, t]], q[[1, t]]);
            let mut score = hi - lo;
            if *zt < lo {
                score += 2.0 / zeta * (lo - zt);
            }
            if *zt > hi {
                score += 2.0 / zeta * (zt - hi);
            }
            total += score;
            count += 1;
        }
    }
    Ok(total / count as f64 / se)
}

fn norm_pow(a: ArrayView1<f64>, b: ArrayView1<f64>, beta: f64) -> f64 {
    let d2: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    if beta == 1.0 {
        d2.sqrt()
    } else {
        d2.powf(beta / 2.0)
    }
}

/// Sample energy score
/// `−1/(2|C||C′|) Σ ‖w − w′‖^β + 1/|C″| Σ ‖w″ − z‖^β`
/// with sample sets as matrix rows.
pub fn energy_score_estimate(
    c: &Array2<f64>,
    c_prime: &Array2<f64>,
    c_all: &Array2<f64>,
    z: ArrayView1<f64>,
    beta: f64,
) -> Result<f64> {
    if c.nrows() == 0 || c_prime.nrows() == 0 || c_all.nrows() == 0 {
        return Err(Error::EmptySampleSet);
    }
    let mut spread = 0.0;
    for w in c.rows() {
        for w2 in c_prime.rows() {
            spread += norm_pow(w, w2, beta);
        }
    }
    let mut err = 0.0;
    for w in c_all.rows() {
        err += norm_pow(w, z, beta);
    }
    Ok(-spread / (2.0 * (c.nrows() * c_prime.nrows()) as f64) + err / c_all.nrows() as f64)
}

/// Energy score with `C`, `C′` the first and second half of the paths and
/// `C″` all of them, averaged over series.
pub fn energy_score(targets: &[Vec<f64>], paths: &[Array2<f64>], beta: f64) -> Result<f64> {
    check_shapes(targets, paths)?;
    let mut total = 0.0;
    for (z, p) in targets.iter().zip(paths) {
        if p.nrows() < 2 {
            return Err(Error::EmptySampleSet);
        }
        let half = p.nrows() / 2;
        let c = p.slice(ndarray::s![..half, ..]).to_owned();
        let c2 = p.slice(ndarray::s![half.., ..]).to_owned();
        let z = Array1::from(z.clone());
        total += energy_score_estimate(&c, &c2, p, z.view(), beta)?;
    }
    Ok(total / targets.len() as f64)
}

/// Pearson correlation of the columns of `samples` (draws as rows).
pub fn sample_correlation(samples: &Array2<f64>) -> Result<Array2<f64>> {
    if samples.nrows() < 2 {
        return Err(Error::EmptySampleSet);
    }
    let mean = samples.mean_axis(Axis(0)).expect("non-empty");
    let centered = samples - &mean;
    let cov = centered.t().dot(&centered);
    let sd: Vec<f64> = cov.diag().iter().map(|v| v.sqrt()).collect();
    if let Some(step) = sd.iter().position(|s| !(*s > 0.0)) {
        return Err(Error::DegenerateVariance { step });
    }
    Ok(Array2::from_shape_fn(cov.dim(), |(i, j)| cov[[i, j]] / (sd[i] * sd[j])))
}

/// Correlation of sample paths pooled over series after standardizing each
/// series' paths per step.
pub fn pooled_correlation(paths: &[Array2<f64>]) -> Result<Array2<f64>> {
    let n = paths.first().ok_or(Error::EmptySampleSet)?.ncols();
    let total: usize = paths.iter().map(|p| p.nrows()).sum();
    let mut pooled = Array2::zeros((total, n));
    let mut row = 0;
    for p in paths {
        if p.nrows() < 2 {
            return Err(Error::EmptySampleSet);
        }
        if p.ncols() != n {
            return Err(Error::DimensionMismatch { what: "horizon length", expected: n, got: p.ncols() });
        }
        let mean = p.mean_axis(Axis(0)).expect("non-empty");
        let sd = p.std_axis(Axis(0), 0.0);
        if let Some(step) = sd.iter().position(|s| !(*s > 0.0)) {
            return Err(Error::DegenerateVariance { step });
        }
        let z = (p - &mean) / &sd;
        pooled.slice_mut(ndarray::s![row..row + p.nrows(), ..]).assign(&z);
        row += p.nrows();
    }
    sample_correlation(&pooled)
}

/// Mean absolute entrywise difference of two matrices.
pub fn matrix_mae(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    (a - b).mapv(f64::abs).mean().expect("non-empty")
}

/// MAE between the pooled sample correlation and `truth`.
pub fn corr_mae(paths: &[Array2<f64>], truth: &Array2<f64>) -> Result<f64> {
    let c = pooled_correlation(paths)?;
    if c.dim() != truth.dim() {
        return Err(Error::DimensionMismatch {
            what: "correlation size",
            expected: truth.nrows(),
            got: c.nrows(),
        });
    }
    Ok(matrix_mae(&c, truth))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvaluationReport {
    pub mean_wql: f64,
    /// `(1-based step, wQL)` for steps within the horizon.
    pub wql_steps: Vec<(usize, f64)>,
    /// `(level, wQL)`.
    pub wql_levels: Vec<(f64, f64)>,
    pub sum_crps: f64,
    /// Absent when there is no usable history for the seasonal error.
    pub msis: Option<f64>,
    pub energy_score: f64,
    pub corr_mae: Option<f64>,
}

impl EvaluationReport {
    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        m.insert("mean_wql".into(), Value::from(self.mean_wql));
        for (k, v) in &self.wql_steps {
            m.insert(format!("wql_step_{k}"), Value::from(*v));
        }
        for (a, v) in &self.wql_levels {
            m.insert(format!("wql_level_{a}"), Value::from(*v));
        }
        m.insert("sum_crps".into(), Value::from(self.sum_crps));
        m.insert("msis".into(), self.msis.map_or(Value::Null, Value::from));
        m.insert("energy_score".into(), Value::from(self.energy_score));
        if let Some(c) = self.corr_mae {
            m.insert("corr_mae".into(), Value::from(c));
        }
        Value::Object(m)
    }
}

/// Scores forecasts over held-out horizons.
///
/// `histories` are the in-sample parts used for the seasonal error; MSIS is
/// omitted when they are too short.
pub fn evaluate(
    targets: &[Vec<f64>],
    paths: &[Array2<f64>],
    histories: &[Vec<f64>],
    seasonal_lag: usize,
    config: &MetricConfig,
    truth_corr: Option<&Array2<f64>>,
) -> Result<EvaluationReport> {
    config.validate()?;
    let levels = &config.quantile_levels;
    let by_level = wql_by_level(targets, paths, levels, None)?;
    let tau = targets.first().map_or(0, |z| z.len());
    let mut wql_steps = Vec::new();
    for &k in &config.wql_steps {
        if k >= 1 && k <= tau {
            wql_steps.push((k, per_step_wql(targets, paths, levels, k)?));
        }
    }
    let msis = match msis(targets, paths, histories, config.msis_zeta, config.seasonal_lag.unwrap_or(seasonal_lag)) {
        Ok(v) => Some(v),
        Err(Error::ZeroSeasonalError) => None,
        Err(e) => return Err(e),
    };
    Ok(EvaluationReport {
        mean_wql: by_level.iter().sum::<f64>() / by_level.len() as f64,
        wql_steps,
        wql_levels: levels.iter().copied().zip(by_level).collect(),
        sum_crps: sum_crps(targets, paths)?,
        msis,
        energy_score: energy_score(targets, paths, config.energy_beta)?,
        corr_mae: truth_corr.map(|t| corr_mae(paths, t)).transpose()?,
    })
}
