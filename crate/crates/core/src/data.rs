//! Datasets: JSON-lines ingestion, holdout splitting, calendar covariates and
//! the Gaussian-process synthetic generator.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{Datelike, Duration, Months, NaiveDate, NaiveDateTime, Timelike};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Frequency {
    #[serde(rename = "H")]
    Hourly,
    #[serde(rename = "D")]
    Daily,
    #[serde(rename = "W")]
    Weekly,
    #[serde(rename = "M")]
    Monthly,
    #[serde(rename = "Q")]
    Quarterly,
    #[serde(rename = "Y")]
    Yearly,
}

impl std::str::FromStr for Frequency {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().trim_start_matches('1').to_ascii_uppercase();
        Ok(match t.as_str() {
            "H" => Frequency::Hourly,
            "D" => Frequency::Daily,
            "W" => Frequency::Weekly,
            "M" | "MS" => Frequency::Monthly,
            "Q" | "QS" => Frequency::Quarterly,
            "Y" | "A" | "YS" | "AS" => Frequency::Yearly,
            _ => return Err(Error::UnknownFrequency(s.to_string())),
        })
    }
}

impl Frequency {
    pub fn code(self) -> &'static str {
        match self {
            Frequency::Hourly => "H",
            Frequency::Daily => "D",
            Frequency::Weekly => "W",
            Frequency::Monthly => "M",
            Frequency::Quarterly => "Q",
            Frequency::Yearly => "Y",
        }
    }

    /// Seasonal lag used by the scaled interval score.
    pub fn seasonal_lag(self) -> usize {
        match self {
            Frequency::Hourly => 24,
            Frequency::Daily => 7,
            Frequency::Weekly => 52,
            Frequency::Monthly => 12,
            Frequency::Quarterly => 4,
            Frequency::Yearly => 1,
        }
    }

    /// Timestamp `steps` periods after `start`.
    pub fn advance(self, start: NaiveDateTime, steps: usize) -> NaiveDateTime {
        let months = |m: usize| {
            start
                .checked_add_months(Months::new(m as u32))
                .expect("timestamp within calendar range")
        };
        match self {
            Frequency::Hourly => start + Duration::hours(steps as i64),
            Frequency::Daily => start + Duration::days(steps as i64),
            Frequency::Weekly => start + Duration::weeks(steps as i64),
            Frequency::Monthly => months(steps),
            Frequency::Quarterly => months(3 * steps),
            Frequency::Yearly => months(12 * steps),
        }
    }

    /// Number of calendar covariate columns.
    pub fn calendar_width(self) -> usize {
        match self {
            Frequency::Hourly | Frequency::Daily => 2,
            Frequency::Weekly | Frequency::Monthly | Frequency::Quarterly => 1,
            Frequency::Yearly => 0,
        }
    }
}

/// Calendar covariates in `[0, 1]`, one row per step.
pub fn calendar_features(freq: Frequency, start: NaiveDateTime, length: usize) -> Array2<f64> {
    let mut out = Array2::zeros((length, freq.calendar_width()));
    for t in 0..length {
        let ts = freq.advance(start, t);
        let dow = ts.weekday().num_days_from_monday() as f64 / 6.0;
        match freq {
            Frequency::Hourly => {
                out[[t, 0]] = ts.hour() as f64 / 23.0;
                out[[t, 1]] = dow;
            }
            Frequency::Daily => {
                out[[t, 0]] = dow;
                out[[t, 1]] = ts.day0() as f64 / 30.0;
            }
            Frequency::Weekly => out[[t, 0]] = ((ts.iso_week().week0() as f64) / 51.0).min(1.0),
            Frequency::Monthly => out[[t, 0]] = ts.month0() as f64 / 11.0,
            Frequency::Quarterly => out[[t, 0]] = (ts.month0() / 3) as f64 / 3.0,
            Frequency::Yearly => {}
        }
    }
    out
}

/// Parses `YYYY-MM-DD HH:MM:SS`, the `T`-separated form, or a bare date.
pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t);
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
}

pub fn format_timestamp(t: NaiveDateTime) -> String {
    t.format("%Y-%m-%d %H:%M:%S").to_string()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub id: String,
    pub start: NaiveDateTime,
    pub target: Vec<f64>,
    /// Dynamic real covariates, one inner vector per feature, each aligned
    /// with `target`.
    pub feat_dynamic_real: Vec<Vec<f64>>,
}

impl Series {
    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub freq: String,
    pub prediction_length: usize,
    /// Series carry no usable history: the forecast is the unconditional
    /// distribution over the horizon and the encoder sees zeros.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub context_free: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gp: Option<GpConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesDataset {
    pub series: Vec<Series>,
    pub freq: Frequency,
    pub prediction_length: usize,
    pub context_free: bool,
    /// Generator settings when the data is synthetic.
    pub gp: Option<GpConfig>,
}

impl TimeSeriesDataset {
    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    /// Covariate columns per step fed to the encoder.
    pub fn feature_dim(&self) -> usize {
        if self.context_free {
            return 0;
        }
        let dynamic = self.series.first().map_or(0, |s| s.feat_dynamic_real.len());
        self.freq.calendar_width() + dynamic
    }

    /// Covariates for every step of `series`, calendar columns first.
    pub fn covariates(&self, series: &Series) -> Array2<f64> {
        let cal = calendar_features(self.freq, series.start, series.len());
        if self.context_free {
            return Array2::zeros((series.len(), 0));
        }
        let k = cal.ncols();
        let mut out = Array2::zeros((series.len(), k + series.feat_dynamic_real.len()));
        out.slice_mut(ndarray::s![.., ..k]).assign(&cal);
        for (j, feat) in series.feat_dynamic_real.iter().enumerate() {
            for (t, v) in feat.iter().enumerate() {
                out[[t, k + j]] = *v;
            }
        }
        out
    }

    pub fn metadata(&self) -> DatasetMetadata {
        DatasetMetadata {
            freq: self.freq.code().to_string(),
            prediction_length: self.prediction_length,
            context_free: self.context_free,
            gp: self.gp.clone(),
        }
    }
}

/// Sidecar metadata location: `data.jsonl` → `data.metadata.json`.
pub fn metadata_path(path: &Path) -> PathBuf {
    path.with_extension("metadata.json")
}

#[derive(Deserialize)]
struct Record {
    start: String,
    target: Vec<Option<f64>>,
    #[serde(default)]
    item_id: Option<serde_json::Value>,
    #[serde(default)]
    feat_dynamic_real: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    item_id: &'a str,
    start: String,
    target: &'a [f64],
    #[serde(skip_serializing_if = "<[Vec<f64>]>::is_empty")]
    feat_dynamic_real: &'a [Vec<f64>],
}

pub fn load_metadata(path: &Path) -> Result<DatasetMetadata> {
    let meta = metadata_path(path);
    let text = std::fs::read_to_string(&meta).map_err(|_| Error::MissingMetadata(meta.clone()))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: meta,
        line: e.line(),
        message: e.to_string(),
    })
}

/// Reads a JSON-lines dataset plus its sidecar metadata.
pub fn load_jsonlines(path: &Path) -> Result<TimeSeriesDataset> {
    let meta = load_metadata(path)?;
    let freq: Frequency = meta.freq.parse()?;
    if meta.prediction_length < 1 {
        return Err(Error::Config("prediction_length must be at least 1".into()));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut series = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let start = parse_timestamp(&rec.start)
            .ok_or_else(|| parse_err(format!("invalid start timestamp `{}`", rec.start)))?;
        let target: Vec<f64> = rec
            .target
            .into_iter()
            .map(|v| v.ok_or_else(|| parse_err("missing target value".into())))
            .collect::<Result<_>>()?;
        if target.is_empty() {
            return Err(parse_err("empty target".into()));
        }
        let id = match rec.item_id {
            Some(serde_json::Value::String(s)) => s,
            Some(v) => v.to_string(),
            None => i.to_string(),
        };
        for feat in &rec.feat_dynamic_real {
            if feat.len() != target.len() {
                return Err(Error::LengthMismatch { id, expected: target.len(), got: feat.len() });
            }
        }
        series.push(Series {
            id,
            start,
            target,
            feat_dynamic_real: rec.feat_dynamic_real,
        });
    }
    Ok(TimeSeriesDataset {
        series,
        freq,
        prediction_length: meta.prediction_length,
        context_free: meta.context_free,
        gp: meta.gp,
    })
}

/// Writes the dataset as JSON lines with its sidecar metadata.
pub fn save_jsonlines(dataset: &TimeSeriesDataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in &dataset.series {
        let rec = RecordOut {
            item_id: &s.id,
            start: format_timestamp(s.start),
            target: &s.target,
            feat_dynamic_real: &s.feat_dynamic_real,
        };
        let line = serde_json::to_string(&rec).expect("plain data serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let meta = metadata_path(path);
    let text = serde_json::to_string_pretty(&dataset.metadata()).expect("plain data serializes");
    std::fs::write(&meta, text + "\n").map_err(|e| Error::io(meta, e))
}

/// Holds out the last `tau` points of every series. The test set keeps the
/// full series.
pub fn split(dataset: &TimeSeriesDataset, tau: usize) -> Result<(TimeSeriesDataset, TimeSeriesDataset)> {
    let short: Vec<String> = dataset
        .series
        .iter()
        .filter(|s| s.len() <= tau)
        .map(|s| s.id.clone())
        .collect();
    if !short.is_empty() {
        return Err(Error::SeriesTooShort(short));
    }
    let mut train = dataset.clone();
    for s in &mut train.series {
        let keep = s.len() - tau;
        s.target.truncate(keep);
        for f in &mut s.feat_dynamic_real {
            f.truncate(keep);
        }
    }
    Ok((train, dataset.clone()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpConfig {
    pub num_series: usize,
    pub length: usize,
    pub rbf_lengthscale: f64,
    pub rbf_variance: f64,
    pub periodic_period: f64,
    pub periodic_lengthscale: f64,
    pub periodic_variance: f64,
    pub noise_jitter: f64,
    pub seed: u64,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            num_series: 500,
            length: 24,
            rbf_lengthscale: 5.0,
            rbf_variance: 0.5,
            periodic_period: 12.0,
            periodic_lengthscale: 1.0,
            periodic_variance: 0.5,
            noise_jitter: 1e-6,
            seed: 0,
        }
    }
}

impl GpConfig {
    pub fn validate(&self) -> Result<()> {
        let scales = [
            self.rbf_lengthscale,
            self.rbf_variance,
            self.periodic_period,
            self.periodic_lengthscale,
            self.periodic_variance,
        ];
        if scales.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("gp scales must be positive".into()));
        }
        if !(self.noise_jitter >= 1e-8) {
            return Err(Error::Config("gp noise_jitter must be at least 1e-8".into()));
        }
        if self.num_series < 1 || self.length < 1 {
            return Err(Error::Config("gp num_series and length must be at least 1".into()));
        }
        Ok(())
    }
}

/// RBF plus periodic covariance over steps `0..length`.
pub fn gp_kernel(config: &GpConfig) -> Array2<f64> {
    let n = config.length;
    Array2::from_shape_fn((n, n), |(s, t)| {
        let d = s as f64 - t as f64;
        let rbf = config.rbf_variance * (-d * d / (2.0 * config.rbf_lengthscale.powi(2))).exp();
        let sin = (std::f64::consts::PI * d / config.periodic_period).sin();
        let per = config.periodic_variance * (-2.0 * sin * sin / config.periodic_lengthscale.powi(2)).exp();
        rbf + per + if s == t { config.noise_jitter } else { 0.0 }
    })
}

/// Correlation matrix of a covariance matrix.
pub fn correlation_from_covariance(k: &Array2<f64>) -> Array2<f64> {
    let d: Array1<f64> = k.diag().mapv(f64::sqrt);
    Array2::from_shape_fn(k.dim(), |(i, j)| k[[i, j]] / (d[i] * d[j]))
}

/// Zero-mean draws `L ε` with `K = L Lᵀ`, one series per draw, starting at
/// 2021-01-01 with hourly steps. The whole series is the forecast horizon.
pub fn gp_synthesize(config: &GpConfig) -> Result<TimeSeriesDataset> {
    config.validate()?;
    let k = gp_kernel(config);
    let l = mqf2_autodiff::linalg::cholesky(&k).ok_or(Error::FactorizationFailure)?;
    let mut rng = stream(config.seed, Stream::Data);
    let start = parse_timestamp("2021-01-01 00:00:00").expect("valid literal");
    let series = (0..config.num_series)
        .map(|i| {
            let eps: Array1<f64> = (0..config.length).map(|_| rng.sample(StandardNormal)).collect();
            Series {
                id: i.to_string(),
                start,
                target: l.dot(&eps).to_vec(),
                feat_dynamic_real: Vec::new(),
            }
        })
        .collect();
    Ok(TimeSeriesDataset {
        series,
        freq: Frequency::Hourly,
        prediction_length: config.length,
        context_free: true,
        gp: Some(config.clone()),
    })
}

/// Writes a matrix as headerless CSV with shortest round-trip decimals.
pub fn export_corr(matrix: &Array2<f64>, path: &Path) -> Result<()> {
    let mut text = String::new();
    for row in matrix.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_corr(path: &Path) -> Result<Array2<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        rows.push(row);
    }
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "matrix is not square".into(),
        });
    }
    Ok(Array2::from_shape_fn((n, n), |(i, j)| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_parsing() {
        assert_eq!("H".parse::<Frequency>().unwrap(), Frequency::Hourly);
        assert_eq!("1D".parse::<Frequency>().unwrap(), Frequency::Daily);
        assert!(matches!("5min".parse::<Frequency>(), Err(Error::UnknownFrequency(_))));
    }

    #[test]
    fn hourly_calendar_is_daily_periodic() {
        let start = parse_timestamp("2020-01-01 00:00:00").unwrap();
        let f = calendar_features(Frequency::Hourly, start, 30);
        assert_eq!(f.ncols(), 2);
        assert_eq!(f[[0, 0]], 0.0);
        assert_eq!(f[[24, 0]], f[[0, 0]]);
        assert!(f.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn yearly_calendar_is_empty() {
        let start = parse_timestamp("2000-01-01").unwrap();
        assert_eq!(calendar_features(Frequency::Yearly, start, 5).dim(), (5, 0));
    }

    #[test]
    fn monthly_and_daily_calendars() {
        let start = parse_timestamp("2021-11-30").unwrap();
        let m = calendar_features(Frequency::Monthly, start, 3);
        assert_eq!(m.column(0).to_vec(), vec![10.0 / 11.0, 1.0, 0.0]);
        let d = calendar_features(Frequency::Daily, parse_timestamp("2024-01-01").unwrap(), 8);
        // 2024-01-01 is a Monday.
        assert_eq!(d[[0, 0]], 0.0);
        assert_eq!(d[[7, 0]], 0.0);
        assert_eq!(d[[6, 0]], 1.0);
        assert_eq!(d[[0, 1]], 0.0);
    }

    #[test]
    fn kernel_diagonal_and_periodicity() {
        let cfg = GpConfig::default();
        let k = gp_kernel(&cfg);
        for t in 0..24 {
            assert!((k[[t, t]] - (0.5 + 0.5 + 1e-6)).abs() < 1e-15);
        }
        let c = correlation_from_covariance(&k);
        // The periodic part returns to its maximum at lag 12.
        assert!(c[[0, 12]] > c[[0, 6]]);
        assert!(c[[0, 12]] > c[[0, 11]]);
    }

    #[test]
    fn synthesis_is_deterministic() {
        let cfg = GpConfig { num_series: 3, ..Default::default() };
        let a = gp_synthesize(&cfg).unwrap();
        let b = gp_synthesize(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.series[0].len(), 24);
        assert!(a.context_free);
    }
}
