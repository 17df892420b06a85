use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Predictions are floored here before logarithms and ratios.
pub const PRED_FLOOR: f64 = 1e-6;
pub const DELTA1_THRESHOLD: f64 = 1.25;

/// Standard monocular-depth error metrics for one image or an average.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub srmse_log: f64,
    pub delta1: f64,
}

impl DepthMetrics {
    pub const COLUMNS: [&'static str; 6] = ["abs_rel", "sq_rel", "rmse", "rmse_log", "srmse_log", "delta1"];

    pub fn as_array(&self) -> [f64; 6] {
        [self.abs_rel, self.sq_rel, self.rmse, self.rmse_log, self.srmse_log, self.delta1]
    }

    /// Unweighted mean of per-image metrics.
    pub fn mean(items: &[DepthMetrics]) -> Option<DepthMetrics> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let mut acc = [0.0; 6];
        for m in items {
            for (a, v) in acc.iter_mut().zip(m.as_array()) {
                *a += v;
            }
        }
        Some(DepthMetrics {
            abs_rel: acc[0] / n,
            sq_rel: acc[1] / n,
            rmse: acc[2] / n,
            rmse_log: acc[3] / n,
            srmse_log: acc[4] / n,
            delta1: acc[5] / n,
        })
    }
}

pub fn compute_metrics(pred: &Tensor, gt: &Tensor) -> Result<DepthMetrics> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    if let Some((index, &value)) = gt.values().iter().enumerate().find(|(_, &g)| !(g > 0.0)) {
        return Err(Error::NonPositiveDepth { index, value });
    }
    let n = gt.len() as f64;
    let (mut abs_rel, mut sq_rel, mut sq, mut hits) = (0.0, 0.0, 0.0, 0usize);
    let mut log_err = Vec::with_capacity(gt.len());
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        let d = p - g;
        abs_rel += d.abs() / g;
        sq_rel += d * d / g;
        sq += d * d;
        let pc = p.max(PRED_FLOOR);
        if (pc / g).max(g / pc) < DELTA1_THRESHOLD {
            hits += 1;
        }
        log_err.push(pc.ln() - g.ln());
    }
    let mean_e = log_err.iter().sum::<f64>() / n;
    let second = log_err.iter().map(|e| e * e).sum::<f64>() / n;
    // two-pass variance; cannot exceed the second moment except by rounding
    let var = log_err.iter().map(|e| (e - mean_e) * (e - mean_e)).sum::<f64>() / n;
    let rmse_log = second.sqrt();
    Ok(DepthMetrics {
        abs_rel: abs_rel / n,
        sq_rel: sq_rel / n,
        rmse: (sq / n).sqrt(),
        rmse_log,
        srmse_log: var.sqrt().min(rmse_log),
        delta1: hits as f64 / n,
    })
}
