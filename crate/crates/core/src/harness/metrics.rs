//! Episode metrics and cross-seed aggregation.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub cumulative_reward: f64,
    pub ctr: f64,
    pub episode_length: usize,
    pub seed: u64,
}

/// Share of strictly positive rewards.
pub fn compute_ctr(rewards: &[f64]) -> Result<f64> {
    if rewards.is_empty() {
        return Err(Error::InvalidArgument("ctr of an empty episode".into()));
    }
    Ok(rewards.iter().filter(|r| **r > 0.0).count() as f64 / rewards.len() as f64)
}

/// Per-episode mean and 95% half-width across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateCurve {
    pub label: String,
    pub mean: Vec<f64>,
    pub half_width: Vec<f64>,
}

/// Mean and `1.96 · sd / √n` of one set of per-seed values, with the
/// population standard deviation.
pub fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

/// Aggregates per-seed streams of equal length; `window > 1` smooths each
/// stream with a trailing moving average first.
pub fn aggregate_ci(label: &str, runs: &[Vec<f64>], window: usize) -> Result<AggregateCurve> {
    if runs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 seeds to aggregate, got {}",
            runs.len()
        )));
    }
    let len = runs[0].len();
    if let Some(bad) = runs.iter().find(|r| r.len() != len) {
        return Err(Error::LengthMismatch(len, vec![bad.len()]));
    }
    let smoothed: Vec<Vec<f64>> = runs.iter().map(|r| smooth(r, window)).collect();
    let mut mean = Vec::with_capacity(len);
    let mut half_width = Vec::with_capacity(len);
    let mut column = vec![0.0; runs.len()];
    for e in 0..len {
        for (c, r) in column.iter_mut().zip(&smoothed) {
            *c = r[e];
        }
        let (m, h) = mean_ci(&column);
        mean.push(m);
        half_width.push(h);
    }
    Ok(AggregateCurve {
        label: label.to_string(),
        mean,
        half_width,
    })
}

/// Trailing moving average; windows of 0 or 1 return the input.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    if window <= 1 {
        return values.to_vec();
    }
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// Mean of the last `fraction` of a stream (at least one value).
pub fn tail_mean(values: &[f64], fraction: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let n = ((values.len() as f64 * fraction).ceil() as usize).clamp(1, values.len());
    let tail = &values[values.len() - n..];
    Some(tail.iter().sum::<f64>() / n as f64)
}
