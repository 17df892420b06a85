//! CSV schemas. Reals use 17 significant digits so every value round-trips.

use std::path::Path;

use svda_core::attention::Mechanism;
use svda_core::harness::{DepthMetrics, EpochLog, LayerwiseRow, TrendRow};

use crate::error::{CliError, Result};

pub const EPOCHS_HEADER: [&str; 9] = [
    "epoch",
    "train_loss",
    "val_loss",
    "abs_rel",
    "sq_rel",
    "rmse",
    "rmse_log",
    "srmse_log",
    "delta1",
];
pub const INDICATORS_HEADER: [&str; 5] = ["epoch", "layer", "head", "indicator", "value"];
pub const METRICS_HEADER: [&str; 7] = ["mechanism", "abs_rel", "sq_rel", "rmse", "rmse_log", "srmse_log", "delta1"];
pub const LAYERWISE_HEADER: [&str; 8] = ["layer", "head", "indicator", "min", "q25", "median", "q75", "max"];
pub const ALIGNMENT_HEADER: [&str; 5] = ["layer", "head", "p5", "p50", "p95"];
pub const TRENDS_HEADER: [&str; 5] = ["mechanism", "indicator", "first10_mean", "last10_mean", "delta"];

pub fn real(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_csv<I>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let err = |source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(err)?;
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn metric_cells(m: &DepthMetrics) -> impl Iterator<Item = String> {
    m.as_array().into_iter().map(real)
}

pub fn epochs_rows(logs: &[EpochLog]) -> Vec<Vec<String>> {
    logs.iter()
        .map(|l| {
            [l.epoch.to_string(), real(l.train_loss), real(l.val_loss)]
                .into_iter()
                .chain(metric_cells(&l.val_metrics))
                .collect()
        })
        .collect()
}

pub fn indicator_rows(logs: &[EpochLog]) -> Vec<Vec<String>> {
    logs.iter()
        .flat_map(|l| &l.indicators)
        .map(|s| {
            vec![
                s.epoch.to_string(),
                s.layer.to_string(),
                s.head.to_string(),
                s.name.as_str().to_string(),
                real(s.value),
            ]
        })
        .collect()
}

pub fn metrics_row(mechanism: Mechanism, m: &DepthMetrics) -> Vec<String> {
    std::iter::once(mechanism.as_str().to_string()).chain(metric_cells(m)).collect()
}

pub fn layerwise_rows(rows: &[LayerwiseRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            let s = r.stats;
            vec![
                r.layer.to_string(),
                r.head.to_string(),
                r.name.as_str().to_string(),
                real(s.min),
                real(s.q25),
                real(s.median),
                real(s.q75),
                real(s.max),
            ]
        })
        .collect()
}

pub fn trend_rows(rows: &[TrendRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|t| {
            vec![
                t.mechanism.as_str().to_string(),
                t.indicator.as_str().to_string(),
                real(t.first_mean),
                real(t.last_mean),
                real(t.delta),
            ]
        })
        .collect()
}
