use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{median, nearest_rank};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub num_samples: usize,
    pub mae_m: Option<f64>,
    pub ce90_m: Option<f64>,
    pub top1_pct: Option<f64>,
    /// Euclidean error in meters (localization) or 1.0 per miss (beam).
    pub per_sample_errors: Vec<f64>,
}

pub fn mae(errors: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::invalid("MAE of an empty error set"));
    }
    Ok(errors.iter().sum::<f64>() / errors.len() as f64)
}

/// 90th percentile error, nearest-rank.
pub fn ce90(errors: &[f64]) -> Result<f64> {
    nearest_rank(errors, 0.9).ok_or_else(|| Error::invalid("CE90 of an empty error set"))
}

pub fn top1(predicted: &[u32], labels: &[u32]) -> Result<f64> {
    if predicted.is_empty() || predicted.len() != labels.len() {
        return Err(Error::invalid("top-1 needs equal, non-empty prediction and label lists"));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * hits as f64 / predicted.len() as f64)
}

pub fn euclidean_errors(predicted: &[[f64; 2]], truth: &[[f64; 2]]) -> Vec<f64> {
    predicted
        .iter()
        .zip(truth)
        .map(|(p, t)| ((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2)).sqrt())
        .collect()
}

/// MAE of always predicting the mean training position.
pub fn mean_predictor_mae(train: &[[f64; 2]], test: &[[f64; 2]]) -> Result<f64> {
    if train.is_empty() {
        return Err(Error::invalid("no training positions"));
    }
    let n = train.len() as f64;
    let mean = [
        train.iter().map(|p| p[0]).sum::<f64>() / n,
        train.iter().map(|p| p[1]).sum::<f64>() / n,
    ];
    mae(&euclidean_errors(&vec![mean; test.len()], test))
}

/// `max / median` of per-atom activation counts, with the median floored at
/// one count so that mostly-dead dictionaries stay finite.
pub fn activation_spread(counts: &[u64]) -> f64 {
    let v: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let max = v.iter().copied().fold(0.0, f64::max);
    max / median(&v).unwrap_or(1.0).max(1.0)
}

pub fn histogram_csv(counts: &[u64]) -> String {
    let mut s = String::from("atom,count\n");
    for (i, c) in counts.iter().enumerate() {
        s.push_str(&format!("{i},{c}\n"));
    }
    s
}
