//! Straggler and wasted-time metrics.

use crate::error::{Error, Result};
use crate::model::RoutingBatch;
use crate::sim::{Direction, LayerTimeline};

fn max_minus_mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Argument("straggler of an empty device set".into()));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.iter().all(|&v| v == max) {
        return Ok(0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok((max - mean).max(0.0))
}

/// `max_d T_d - mean_d T_d` over per-device token counts.
pub fn token_straggler(loads: &[u64]) -> Result<f64> {
    let v: Vec<f64> = loads.iter().map(|&x| x as f64).collect();
    max_minus_mean(&v)
}

/// `max_d G_d - mean_d G_d` over per-device GEMM seconds.
pub fn gemm_straggler(times: &[f64]) -> Result<f64> {
    max_minus_mean(times)
}

/// Share of the slowest device's time that an average device spends idle:
/// `(max - mean) / max`, or 0 when every device takes no time.
pub fn wasted_ratio(times: &[f64]) -> Result<f64> {
    let gap = max_minus_mean(times)?;
    let max = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(if max > 0.0 { gap / max } else { 0.0 })
}

/// Metrics of one micro-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationMetrics {
    pub micro_batch_id: usize,
    pub token_straggler: f64,
    /// Forward-pass GEMM straggler, seconds.
    pub gemm_straggler: f64,
    pub layer_fwd: f64,
    pub layer_bwd: f64,
    /// Forward-pass wasted ratio over per-device layer completion times.
    pub wasted_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub token_straggler_mean: f64,
    pub gemm_straggler_mean: f64,
    pub layer_time_fwd_mean: f64,
    pub layer_time_bwd_mean: f64,
    pub wasted_ratio_mean: f64,
    pub series: Vec<IterationMetrics>,
}

impl RunMetrics {
    pub fn from_series(series: Vec<IterationMetrics>) -> Result<Self> {
        if series.is_empty() {
            return Err(Error::Argument("cannot aggregate an empty run".into()));
        }
        let n = series.len() as f64;
        let mean = |f: fn(&IterationMetrics) -> f64| series.iter().map(f).sum::<f64>() / n;
        Ok(RunMetrics {
            token_straggler_mean: mean(|m| m.token_straggler),
            gemm_straggler_mean: mean(|m| m.gemm_straggler),
            layer_time_fwd_mean: mean(|m| m.layer_fwd),
            layer_time_bwd_mean: mean(|m| m.layer_bwd),
            wasted_ratio_mean: mean(|m| m.wasted_ratio),
            series,
        })
    }
}

/// Pairs forward and backward timelines per micro-batch and averages over
/// the run. `batches`, when non-empty, must match the forward timelines one
/// to one and is used to check token conservation.
pub fn aggregate(timelines: &[LayerTimeline], batches: &[RoutingBatch]) -> Result<RunMetrics> {
    let forward: Vec<&LayerTimeline> = timelines
        .iter()
        .filter(|t| t.direction == Direction::Forward)
        .collect();
    let backward: Vec<&LayerTimeline> = timelines
        .iter()
        .filter(|t| t.direction == Direction::Backward)
        .collect();
    if !batches.is_empty() && batches.len() != forward.len() {
        return Err(Error::Argument(format!(
            "{} batches for {} forward timelines",
            batches.len(),
            forward.len()
        )));
    }
    let mut series = Vec::with_capacity(forward.len());
    for (i, fwd) in forward.iter().enumerate() {
        let loads = fwd.token_loads();
        if let Some(b) = batches.get(i) {
            if loads.iter().sum::<u64>() != b.total() {
                return Err(Error::Argument(format!(
                    "timeline {} computes {} tokens, batch routes {}",
                    fwd.micro_batch_id,
                    loads.iter().sum::<u64>(),
                    b.total()
                )));
            }
        }
        let layer_bwd = backward
            .iter()
            .find(|b| b.micro_batch_id == fwd.micro_batch_id)
            .map_or(0.0, |b| b.layer_time());
        series.push(IterationMetrics {
            micro_batch_id: fwd.micro_batch_id,
            token_straggler: token_straggler(&loads)?,
            gemm_straggler: gemm_straggler(&fwd.gemm_times())?,
            layer_fwd: fwd.layer_time(),
            layer_bwd,
            wasted_ratio: wasted_ratio(&fwd.device_times())?,
        });
    }
    RunMetrics::from_series(series)
}
