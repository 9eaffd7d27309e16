//! Measure candidate tile configs and keep the fastest.

use std::time::{Duration, Instant};

use super::gemm::{gemm_i64, gemm_naive, IntMatrix};
use super::pack::BitPlaneMatrix;
use super::tile::TileConfig;
use crate::error::{AbqError, Result};

pub const NAIVE_ID: &str = "naive";

/// One timed configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub config_id: String,
    /// `None` for the untiled baseline.
    pub tile: Option<TileConfig>,
    pub p: u32,
    pub q: u32,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub median_us: f64,
    /// `2·M·N·K / latency`, in tera-ops per second.
    pub tops: f64,
}

impl BenchRecord {
    pub fn new(
        config_id: impl Into<String>,
        tile: Option<TileConfig>,
        (p, q): (u32, u32),
        (m, n, k): (usize, usize, usize),
        median: Duration,
    ) -> Self {
        let median_us = (median.as_secs_f64() * 1e6).max(1e-3);
        Self {
            config_id: config_id.into(),
            tile,
            p,
            q,
            m,
            n,
            k,
            median_us,
            tops: tops(m, n, k, median_us),
        }
    }
}

pub fn tops(m: usize, n: usize, k: usize, median_us: f64) -> f64 {
    2.0 * m as f64 * n as f64 * k as f64 / (median_us * 1e-6) / 1e12
}

pub fn median(mut samples: Vec<Duration>) -> Duration {
    samples.sort();
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        (samples[n / 2 - 1] + samples[n / 2]) / 2
    }
}

/// Run `f` once untimed, then `trials` timed runs; returns the warm-up output
/// and the median latency.
pub fn time_median<R>(trials: usize, mut f: impl FnMut() -> Result<R>) -> Result<(R, Duration)> {
    let warm = f()?;
    let mut samples = Vec::with_capacity(trials);
    for _ in 0..trials {
        let start = Instant::now();
        let out = f()?;
        samples.push(start.elapsed());
        drop(out);
    }
    Ok((warm, median(samples)))
}

/// Time the untiled baseline and return its result for cross-checking.
pub fn bench_naive(
    a: &BitPlaneMatrix,
    b: &BitPlaneMatrix,
    trials: usize,
) -> Result<(IntMatrix<i64>, BenchRecord)> {
    let (reference, med) = time_median(trials, || gemm_naive(a, b))?;
    let rec = BenchRecord::new(
        NAIVE_ID,
        None,
        (a.planes(), b.planes()),
        (a.rows(), b.rows(), a.cols()),
        med,
    );
    Ok((reference, rec))
}

/// Time every candidate against a known-good `reference` product.
pub fn autotune_against(
    candidates: &[TileConfig],
    a: &BitPlaneMatrix,
    b: &BitPlaneMatrix,
    trials: usize,
    reference: &IntMatrix<i64>,
) -> Result<(TileConfig, Vec<BenchRecord>)> {
    if candidates.is_empty() {
        return Err(AbqError::InvalidTile {
            config: "<none>".into(),
            reason: "empty candidate list".into(),
        });
    }
    if trials < 3 {
        return Err(AbqError::Config(format!(
            "trials must be ≥ 3, got {trials}"
        )));
    }
    let mut records = Vec::with_capacity(candidates.len());
    for (idx, tile) in candidates.iter().enumerate() {
        let (out, med) = time_median(trials, || gemm_i64(a, b, tile))?;
        if &out != reference {
            return Err(AbqError::TileMismatch {
                config: tile.to_string(),
            });
        }
        log::debug!("candidate {idx} {tile}: {med:?}");
        records.push(BenchRecord::new(
            format!("c{idx}"),
            Some(*tile),
            (a.planes(), b.planes()),
            (a.rows(), b.rows(), a.cols()),
            med,
        ));
    }
    let best = records
        .iter()
        .min_by(|x, y| x.median_us.total_cmp(&y.median_us))
        .and_then(|r| r.tile)
        .expect("non-empty");
    Ok((best, records))
}

/// Time every candidate, checking each against the untiled reference product.
pub fn autotune(
    candidates: &[TileConfig],
    a: &BitPlaneMatrix,
    b: &BitPlaneMatrix,
    trials: usize,
) -> Result<(TileConfig, Vec<BenchRecord>)> {
    let reference = gemm_naive(a, b)?;
    autotune_against(candidates, a, b, trials, &reference)
}
