use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{G2rError, Result};
use crate::rng::rng_from_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub warmup: usize,
    pub iters: usize,
    pub mean_us: f64,
    pub p50_us: f64,
    pub p99_us: f64,
    pub min_us: f64,
    pub max_us: f64,
}

/// Bench record written by `g2r bench latency`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchOutput {
    pub n: usize,
    pub dim: usize,
    pub kind: super::IndexKind,
    pub ef_search: usize,
    pub mean_us: f64,
    pub p50_us: f64,
    pub p99_us: f64,
    pub recall_at_1: Option<f64>,
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Times `f` on `inputs`, cycling through them. The first `warmup` calls are
/// not recorded; the next `iters` are, one sample per call.
pub fn bench_latency<T, F>(inputs: &[T], warmup: usize, iters: usize, mut f: F) -> Result<LatencyReport>
where
    F: FnMut(&T),
{
    if iters == 0 {
        return Err(G2rError::invalid("iters must be at least 1"));
    }
    if inputs.is_empty() {
        return Err(G2rError::Empty("no benchmark inputs".into()));
    }
    let mut it = inputs.iter().cycle();
    for _ in 0..warmup {
        f(it.next().unwrap());
    }
    let mut samples = Vec::with_capacity(iters);
    for _ in 0..iters {
        let x = it.next().unwrap();
        let t = Instant::now();
        f(x);
        // Sub-nanosecond calls still count as one tick.
        samples.push((t.elapsed().as_nanos().max(1)) as f64 / 1000.0);
    }
    let mean_us = samples.iter().sum::<f64>() / iters as f64;
    samples.sort_by(f64::total_cmp);
    Ok(LatencyReport {
        warmup,
        iters,
        mean_us,
        p50_us: percentile(&samples, 0.5),
        p99_us: percentile(&samples, 0.99),
        min_us: samples[0],
        max_us: samples[iters - 1],
    })
}

/// `n` vectors with i.i.d. standard normal coordinates.
pub fn random_gaussian_vectors(seed: u64, n: usize, dim: usize) -> Vec<Vec<f32>> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}
