use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mqf2::data::{
    correlation_from_covariance, export_corr, gp_kernel, gp_synthesize, load_jsonlines, read_corr, save_jsonlines,
    split, TimeSeriesDataset,
};
use mqf2::forecast::{self, holdout, series_seed};
use mqf2::metrics::{self, pooled_correlation};
use mqf2::model::reference_draws;
use mqf2::rng::{stream, Stream};
use mqf2::training::{baseline_independent, train_model};
use mqf2::{checkpoint, QuantileModel};
use ndarray::{Array1, Array2};
use rand::Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::io;

/// `println!` that tolerates a closed stdout (e.g. piped into `head`).
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = std::io::Write::write_fmt(&mut std::io::stdout(), format_args!("{}\n", format_args!($($arg)*)));
    }};
}

pub const MONOTONE_PAIRS: usize = 1000;
pub const MONOTONE_SLACK: f64 = -1e-6;
pub const ROUND_TRIP_DRAWS: usize = 100;
pub const ROUND_TRIP_TOL: f64 = 1e-4;
pub const JACOBIAN_DRAWS: usize = 20;
const CHECK_CONTEXTS: usize = 4;

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes") + "\n";
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Creates the output directory and stores the effective configuration.
fn archive(config: &RunConfig, command: &str) -> CliResult<()> {
    create_dir(&config.out)?;
    write_json(&config.out.join(format!("{command}.config.json")), config)
}

fn load_dataset(config: &RunConfig) -> CliResult<TimeSeriesDataset> {
    Ok(load_jsonlines(&config.data_path())?)
}

pub fn default_checkpoint(config: &RunConfig) -> PathBuf {
    config.out.join("model.json")
}

fn load_checkpoint(path: &Path) -> CliResult<QuantileModel> {
    if !path.exists() {
        return Err(CliError::Io(format!("checkpoint not found: {}", path.display())));
    }
    Ok(checkpoint::load(path)?)
}

pub fn synth(config: &RunConfig) -> CliResult<()> {
    archive(config, "synth")?;
    let dataset = gp_synthesize(&config.gp)?;
    let path = config.data_path();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_jsonlines(&dataset, &path)?;
    let truth_path = config.out.join("truth_corr.csv");
    export_corr(&correlation_from_covariance(&gp_kernel(&config.gp)), &truth_path)?;
    say!(
        "wrote {} series of length {} to {} and the true correlation to {}",
        dataset.len(),
        config.gp.length,
        path.display(),
        truth_path.display()
    );
    Ok(())
}

pub fn train(config: &RunConfig, checkpoint_path: Option<PathBuf>) -> CliResult<()> {
    let dataset = load_dataset(config)?;
    let (encoder, picnn) = config.model_configs(&dataset)?;
    archive(config, "train")?;
    let train_set = if dataset.context_free { dataset } else { split(&dataset, dataset.prediction_length)?.0 };
    let model = QuantileModel::new(picnn, encoder, config.train.mode, config.seed)?;
    let out = config.out.clone();
    let every = config.train.checkpoint_every;
    let mut losses = Vec::new();
    let outcome = train_model(&train_set, model, &config.train, |epoch, m, loss| {
        losses.push(loss);
        if every > 0 && (epoch + 1) % every == 0 {
            checkpoint::save(m, &out.join(format!("model.epoch{}.json", epoch + 1)))?;
        }
        Ok(())
    });
    let loss_path = config.out.join("loss.csv");
    io::write_losses(&loss_path, &losses)?;
    let outcome = outcome?;
    let path = checkpoint_path.unwrap_or_else(|| default_checkpoint(config));
    checkpoint::save(&outcome.model, &path)?;
    if outcome.skipped_series > 0 {
        log::warn!("{} series were too short to train on", outcome.skipped_series);
    }
    say!(
        "trained {} model for {} epochs, final loss {:.6}; wrote {} and {}",
        config.train.mode,
        losses.len(),
        losses.last().copied().unwrap_or(f64::NAN),
        path.display(),
        loss_path.display()
    );
    Ok(())
}

pub fn predict(
    config: &RunConfig,
    checkpoint_path: Option<PathBuf>,
    output: Option<PathBuf>,
    baseline: bool,
) -> CliResult<()> {
    let dataset = load_dataset(config)?;
    archive(config, "predict")?;
    let default_name = if baseline { "baseline_forecasts.csv" } else { "forecasts.csv" };
    let output = output.unwrap_or_else(|| config.out.join(default_name));
    let (paths, samples, failures) = if baseline {
        let n = dataset.prediction_length;
        let fit_on = if dataset.context_free { dataset.clone() } else { split(&dataset, n)?.0 };
        let base = baseline_independent(&fit_on, n)?;
        let paths: Vec<Array2<f64>> = (0..dataset.len())
            .map(|i| base.sample(config.samples, &mut stream(series_seed(config.seed, i), Stream::Sampling)))
            .collect();
        (paths, vec![(0..config.samples).collect(); dataset.len()], Vec::new())
    } else {
        let path = checkpoint_path.unwrap_or_else(|| default_checkpoint(config));
        let model = load_checkpoint(&path)?;
        log::info!("forecasting with a {} model from {}", model.mode, path.display());
        let f = forecast::predict(&model, &dataset, config.samples, config.seed)?;
        (f.paths, f.samples, f.failures)
    };
    io::write_forecasts(&output, &dataset, &paths, &samples)?;
    for f in &failures {
        eprintln!(
            "series {} sample {}: inversion did not converge (residual {:e} after {} iterations)",
            dataset.series[f.series].id, f.sample, f.residual, f.iterations
        );
    }
    let rows: usize = paths.iter().map(|p| p.nrows()).sum();
    say!("wrote {rows} sample paths to {}", output.display());
    if !failures.is_empty() {
        return Err(CliError::Numerical(format!(
            "{} of {} sample paths did not converge and were left out",
            failures.len(),
            dataset.len() * config.samples
        )));
    }
    Ok(())
}

pub fn evaluate(config: &RunConfig, forecasts: Option<PathBuf>, truth: Option<PathBuf>) -> CliResult<()> {
    let dataset = load_dataset(config)?;
    archive(config, "evaluate")?;
    let forecasts = forecasts.unwrap_or_else(|| config.out.join("forecasts.csv"));
    let paths = io::read_forecasts(&forecasts, &dataset)?;
    let (targets, mut histories) = holdout(&dataset, dataset.prediction_length)?;
    if dataset.context_free {
        histories.iter_mut().for_each(Vec::clear);
    }
    let truth = match (truth, &dataset.gp) {
        (Some(path), _) => Some(read_corr(&path)?),
        (None, Some(gp)) => Some(correlation_from_covariance(&gp_kernel(gp))),
        (None, None) => None,
    };
    let report = metrics::evaluate(
        &targets,
        &paths,
        &histories,
        dataset.freq.seasonal_lag(),
        &config.metrics,
        truth.as_ref(),
    )?;
    let mut value = report.to_json();
    value["forecasts"] = json!(forecasts.display().to_string());
    let report_path = forecasts.with_extension("report.json");
    write_json(&report_path, &value)?;
    if truth.is_some() {
        export_corr(&pooled_correlation(&paths)?, &forecasts.with_extension("corr.csv"))?;
    }
    say!("{}", serde_json::to_string_pretty(&value).expect("report serializes"));
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn from(name: &'static str, outcome: Result<(bool, String), String>) -> Self {
        match outcome {
            Ok((passed, detail)) => Self { name, passed, detail },
            Err(detail) => Self { name, passed: false, detail },
        }
    }
}

/// Contexts the checks run at: the encoding of an all-zero window and random
/// points of the encoder's output range.
fn check_contexts(model: &QuantileModel, seed: u64) -> Result<Vec<Array1<f64>>, String> {
    let window = Array2::zeros((model.encoder.context_length, 1 + model.encoder.feature_dim));
    let mut out = vec![model.context(&window).map_err(|e| e.to_string())?];
    let mut rng = stream(seed, Stream::Sampling);
    let d = model.picnn.context_dim;
    out.extend((1..CHECK_CONTEXTS).map(|_| Array1::from_shape_fn(d, |_| rng.random_range(-1.0..1.0))));
    Ok(out)
}

fn check_monotone(model: &QuantileModel, contexts: &[Array1<f64>], seed: u64) -> Result<(bool, String), String> {
    let n = model.n();
    let mut rng = stream(seed, Stream::Data);
    let mut worst = f64::INFINITY;
    for (k, h) in contexts.iter().enumerate() {
        let pairs = MONOTONE_PAIRS / contexts.len() + usize::from(k < MONOTONE_PAIRS % contexts.len());
        let a = reference_draws(&mut rng, 2 * pairs, n);
        let g = model.map(&a, h).map_err(|e| e.to_string())?;
        for p in 0..pairs {
            let d: f64 = (0..n).map(|t| (g[[2 * p, t]] - g[[2 * p + 1, t]]) * (a[[2 * p, t]] - a[[2 * p + 1, t]])).sum();
            worst = worst.min(d);
        }
    }
    Ok((worst >= MONOTONE_SLACK, format!("min (g1-g2)·(a1-a2) = {worst:.3e} over {MONOTONE_PAIRS} pairs")))
}

fn check_round_trip(model: &QuantileModel, contexts: &[Array1<f64>], seed: u64) -> Result<(bool, String), String> {
    let n = model.n();
    let mut rng = stream(seed.wrapping_add(1), Stream::Data);
    let mut worst: f64 = 0.0;
    for (k, h) in contexts.iter().enumerate() {
        let count = ROUND_TRIP_DRAWS / contexts.len() + usize::from(k < ROUND_TRIP_DRAWS % contexts.len());
        let a = reference_draws(&mut rng, count, n);
        let y = model.map(&a, h).map_err(|e| e.to_string())?;
        let mut inv = model.inverter(h).map_err(|e| e.to_string())?;
        for (ar, yr) in a.rows().into_iter().zip(y.rows()) {
            let back = inv.invert(&yr.to_owned()).map_err(|e| e.to_string())?;
            worst = worst.max((&back - &ar).iter().fold(0.0, |m: f64, v| m.max(v.abs())));
        }
    }
    Ok((worst <= ROUND_TRIP_TOL, format!("max |g^-1(g(a)) - a| = {worst:.3e} over {ROUND_TRIP_DRAWS} draws")))
}

fn check_inverse_jacobian(
    model: &QuantileModel,
    contexts: &[Array1<f64>],
    seed: u64,
) -> Result<(bool, String), String> {
    let mut rng = stream(seed.wrapping_add(2), Stream::Data);
    let (mut sym, mut eig, mut passed) = (0.0f64, f64::INFINITY, true);
    for (k, h) in contexts.iter().enumerate() {
        let count = JACOBIAN_DRAWS / contexts.len() + usize::from(k < JACOBIAN_DRAWS % contexts.len());
        let ys = reference_draws(&mut rng, count, model.n());
        let report = model.check_inverse_monotone(&ys, h).map_err(|e| e.to_string())?;
        sym = sym.max(report.max_symmetry_error());
        eig = eig.min(report.min_eigenvalue());
        passed &= report.passed();
    }
    Ok((
        passed,
        format!("max asymmetry {sym:.3e}, min eigenvalue {eig:.3e} over {JACOBIAN_DRAWS} points"),
    ))
}

pub fn run_checks(model: &QuantileModel, seed: u64) -> Vec<CheckResult> {
    let gamma = model.gamma();
    let mut results = vec![CheckResult {
        name: "strong_convexity",
        passed: gamma.is_finite() && gamma > 0.0,
        detail: format!("effective gamma {gamma:.6e}"),
    }];
    match check_contexts(model, seed) {
        Ok(ctx) => {
            results.push(CheckResult::from("monotonicity", check_monotone(model, &ctx, seed)));
            results.push(CheckResult::from("round_trip", check_round_trip(model, &ctx, seed)));
            results.push(CheckResult::from("inverse_jacobian", check_inverse_jacobian(model, &ctx, seed)));
        }
        Err(e) => {
            for name in ["monotonicity", "round_trip", "inverse_jacobian"] {
                results.push(CheckResult { name, passed: false, detail: format!("no context: {e}") });
            }
        }
    }
    results
}

pub fn check(config: &RunConfig, checkpoint_path: Option<PathBuf>) -> CliResult<()> {
    let path = checkpoint_path.unwrap_or_else(|| default_checkpoint(config));
    let model = load_checkpoint(&path)?;
    archive(config, "check")?;
    let results = run_checks(&model, config.seed);
    for r in &results {
        say!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    let value = json!({
        "checkpoint": path.display().to_string(),
        "passed": failed.is_empty(),
        "checks": results,
    });
    write_json(&config.out.join("check.json"), &value)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("failed checks: {}", failed.join(", "))))
    }
}

fn read_json(path: &Path) -> CliResult<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::io(path, e))
}

fn fmt_metric(v: &Value) -> String {
    v.as_f64().map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

/// Summarizes the artifacts found in the output directory as markdown.
pub fn report(config: &RunConfig) -> CliResult<()> {
    let out = &config.out;
    let entries = std::fs::read_dir(out).map_err(|e| CliError::io(out, e))?;
    let mut reports: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".report.json"))
        .collect();
    reports.sort();
    let mut md = String::from("# Run summary\n");
    let mut found = false;

    let train_config = out.join("train.config.json");
    let loss_path = out.join("loss.csv");
    if loss_path.exists() {
        found = true;
        let losses = io::read_losses(&loss_path)?;
        let mode = if train_config.exists() {
            read_json(&train_config)?["train"]["mode"].as_str().unwrap_or("?").to_string()
        } else {
            "?".to_string()
        };
        let first = losses.first().copied().unwrap_or(f64::NAN);
        let last = losses.last().copied().unwrap_or(f64::NAN);
        let _ = write!(
            md,
            "\n## Training\n\nmode {mode}, {} epochs, loss {first:.6} -> {last:.6}\n",
            losses.len()
        );
    }
    if !reports.is_empty() {
        found = true;
        md.push_str("\n## Forecasts\n\n| forecasts | mean_wQL | sum_CRPS | MSIS | ES | corr_mae |\n");
        md.push_str("|---|---|---|---|---|---|\n");
        for path in &reports {
            let r = read_json(path)?;
            let name = path.file_name().map(|s| s.to_string_lossy().replace(".report.json", "")).unwrap_or_default();
            let _ = writeln!(
                md,
                "| {name} | {} | {} | {} | {} | {} |",
                fmt_metric(&r["mean_wql"]),
                fmt_metric(&r["sum_crps"]),
                fmt_metric(&r["msis"]),
                fmt_metric(&r["energy_score"]),
                fmt_metric(&r["corr_mae"])
            );
        }
    }
    let check_path = out.join("check.json");
    if check_path.exists() {
        found = true;
        let c = read_json(&check_path)?;
        md.push_str("\n## Checks\n\n");
        for item in c["checks"].as_array().into_iter().flatten() {
            let status = if item["passed"].as_bool() == Some(true) { "PASS" } else { "FAIL" };
            let _ = writeln!(
                md,
                "- {status} {}: {}",
                item["name"].as_str().unwrap_or("?"),
                item["detail"].as_str().unwrap_or("")
            );
        }
    }
    if !found {
        return Err(CliError::Io(format!("no training, evaluation or check artifacts in {}", out.display())));
    }
    let path = out.join("summary.md");
    std::fs::write(&path, &md).map_err(|e| CliError::io(&path, e))?;
    let _ = std::io::Write::write_all(&mut std::io::stdout(), md.as_bytes());
    Ok(())
}
