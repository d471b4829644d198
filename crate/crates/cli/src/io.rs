//! Forecast and loss CSV files.

use std::collections::HashMap;
use std::path::Path;

use mqf2::data::TimeSeriesDataset;
use ndarray::Array2;

use crate::error::{CliError, CliResult};

/// Writes one row per path: `series_id,sample_index,h1..hn`.
pub fn write_forecasts(
    path: &Path,
    dataset: &TimeSeriesDataset,
    paths: &[Array2<f64>],
    samples: &[Vec<usize>],
) -> CliResult<()> {
    let n = dataset.prediction_length;
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
    let mut header = vec!["series_id".to_string(), "sample_index".to_string()];
    header.extend((1..=n).map(|k| format!("h{k}")));
    w.write_record(&header).map_err(|e| CliError::io(path, e))?;
    for ((series, block), idx) in dataset.series.iter().zip(paths).zip(samples) {
        for (row, j) in block.rows().into_iter().zip(idx) {
            let mut rec = vec![series.id.clone(), j.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| CliError::io(path, e))?;
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Reads a forecast CSV into one path block per dataset series, rows ordered
/// by sample index.
pub fn read_forecasts(path: &Path, dataset: &TimeSeriesDataset) -> CliResult<Vec<Array2<f64>>> {
    let n = dataset.prediction_length;
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::io(path, e))?;
    let header = r.headers().map_err(|e| CliError::io(path, e))?.clone();
    if header.len() != n + 2 || &header[0] != "series_id" || &header[1] != "sample_index" {
        return Err(CliError::io(
            path,
            format!("expected header series_id,sample_index and {n} horizon columns"),
        ));
    }
    let index: HashMap<&str, usize> = dataset.series.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let mut rows: Vec<Vec<(usize, Vec<f64>)>> = vec![Vec::new(); dataset.len()];
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| CliError::io(path, e))?;
        let bad = |what: &str| CliError::io(path, format!("row {}: {what}", line + 2));
        let i = *index.get(&rec[0]).ok_or_else(|| bad(&format!("unknown series `{}`", &rec[0])))?;
        let j: usize = rec[1].parse().map_err(|_| bad("invalid sample_index"))?;
        let values = (2..n + 2)
            .map(|k| rec[k].parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| bad("invalid value"))?;
        rows[i].push((j, values));
    }
    let mut out = Vec::with_capacity(dataset.len());
    for (i, mut block) in rows.into_iter().enumerate() {
        if block.is_empty() {
            return Err(CliError::io(path, format!("no forecasts for series `{}`", dataset.series[i].id)));
        }
        block.sort_by_key(|(j, _)| *j);
        let flat: Vec<f64> = block.into_iter().flat_map(|(_, v)| v).collect();
        out.push(Array2::from_shape_vec((flat.len() / n, n), flat).expect("rows have n values"));
    }
    Ok(out)
}

pub fn write_losses(path: &Path, losses: &[f64]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
    w.write_record(["epoch", "mean_loss"]).map_err(|e| CliError::io(path, e))?;
    for (epoch, loss) in losses.iter().enumerate() {
        w.write_record([epoch.to_string(), loss.to_string()]).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_losses(path: &Path) -> CliResult<Vec<f64>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::io(path, e))?;
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| CliError::io(path, e))?;
            rec.get(1)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| CliError::io(path, "invalid mean_loss"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use mqf2::data::{parse_timestamp, Frequency, Series};
    use ndarray::array;

    fn dataset() -> TimeSeriesDataset {
        let start = parse_timestamp("2020-01-01").unwrap();
        let series = ["a", "b"]
            .iter()
            .map(|id| Series { id: id.to_string(), start, target: vec![0.0; 4], feat_dynamic_real: vec![] })
            .collect();
        TimeSeriesDataset { series, freq: Frequency::Daily, prediction_length: 2, context_free: false, gp: None }
    }

    #[test]
    fn forecasts_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        let ds = dataset();
        let paths = vec![array![[1.5, -2.0], [0.1, 1e-17]], array![[3.0, 4.0]]];
        write_forecasts(&path, &ds, &paths, &[vec![0, 2], vec![1]]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("series_id,sample_index,h1,h2\na,0,1.5,-2\n"));
        assert_eq!(read_forecasts(&path, &ds).unwrap(), paths);
    }

    #[test]
    fn missing_series_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        std::fs::write(&path, "series_id,sample_index,h1,h2\na,0,1,2\n").unwrap();
        let err = read_forecasts(&path, &dataset()).unwrap_err();
        assert!(err.to_string().contains("series `b`"), "{err}");
    }

    #[test]
    fn losses_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        write_losses(&path, &[3.25, 1.0 / 3.0]).unwrap();
        assert_eq!(read_losses(&path).unwrap(), vec![3.25, 1.0 / 3.0]);
    }
}
