//! Parameter, FLOP and latency accounting for a single clip-pair input.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::DyadModel;
use crate::nn::{FlopEntry, Scalar, Tensor};

pub fn count_params<F: Scalar>(model: &DyadModel<F>) -> usize {
    model.num_params()
}

/// Per-node FLOP ledger of one forward pass on a `[batch, c, t, h, w]`
/// zero input for each stream.
pub fn flop_ledger<F: Scalar>(model: &DyadModel<F>, batch: usize) -> Result<Vec<FlopEntry>> {
    let [c, t, h, w] = model.config.backbone.clip_shape();
    let mut g = model.graph();
    let l = g.constant(Tensor::zeros(&[batch, c, t, h, w]))?;
    let a = g.constant(Tensor::zeros(&[batch, c, t, h, w]))?;
    model.forward(&mut g, l, a)?;
    Ok(g.flop_ledger())
}

/// Forward FLOPs for one clip pair (conv, linear and attention cores; two
/// FLOPs per multiply-add).
pub fn estimate_flops<F: Scalar>(model: &DyadModel<F>) -> Result<u64> {
    Ok(flop_ledger(model, 1)?.iter().map(|e| e.flops).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyStats {
    pub repeats: usize,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub mean_ms: f64,
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Wall time of `repeats` warm forward passes (two untimed warm-up runs).
pub fn benchmark_latency(
    model: &DyadModel<f32>,
    leader: &Tensor<f32>,
    assistant: &Tensor<f32>,
    repeats: usize,
) -> Result<LatencyStats> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    for _ in 0..2 {
        model.predict(leader, assistant)?;
    }
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        model.predict(leader, assistant)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mean_ms = times.iter().sum::<f64>() / repeats as f64;
    times.sort_by(f64::total_cmp);
    let median_ms = if repeats % 2 == 1 {
        times[repeats / 2]
    } else {
        0.5 * (times[repeats / 2 - 1] + times[repeats / 2])
    };
    Ok(LatencyStats {
        repeats,
        median_ms,
        p95_ms: percentile(&times, 0.95),
        mean_ms,
    })
}

/// One row of a complexity table: model size, per-view cost, latency.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub model: String,
    pub params: usize,
    /// Forward GFLOPs of one clip pair (one view).
    pub gflops_per_view: f64,
    /// Views averaged at test time.
    pub views: usize,
    pub latency: LatencyStats,
}

impl BenchReport {
    pub fn header() -> String {
        format!(
            "{:<28} {:>10} {:>12} {:>7} {:>14} {:>12} {:>12}",
            "model", "params(M)", "GFLOPs/view", "views", "GFLOPs×views", "median(ms)", "p95(ms)"
        )
    }

    pub fn row(&self) -> String {
        format!(
            "{:<28} {:>10.4} {:>12.4} {:>7} {:>14.4} {:>12.3} {:>12.3}",
            self.model,
            self.params as f64 / 1e6,
            self.gflops_per_view,
            self.views,
            self.gflops_per_view * self.views as f64,
            self.latency.median_ms,
            self.latency.p95_ms
        )
    }
}

/// Full benchmark of `model` on a single zero clip pair.
pub fn bench(
    model: &DyadModel<f32>,
    name: &str,
    views: usize,
    repeats: usize,
) -> Result<BenchReport> {
    let [c, t, h, w] = model.config.backbone.clip_shape();
    let clip = Tensor::zeros(&[1, c, t, h, w]);
    Ok(BenchReport {
        model: name.to_string(),
        params: count_params(model),
        gflops_per_view: estimate_flops(model)? as f64 / 1e9,
        views,
        latency: benchmark_latency(model, &clip, &clip, repeats)?,
    })
}
