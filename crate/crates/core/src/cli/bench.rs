//! Estimator-quality benchmark: how well do different statistics estimators
//! recover the true moments of a (possibly drifting) Gaussian stream?
//!
//! Each trial draws `memory + 1` consecutive batches. Batch `t` has feature
//! means `μ₀ + t·drift` and fixed variances; the target is the generating
//! moments of the last batch. A *refreshed* memory holds the earlier batches
//! as they would look one step later (shifted by one more `drift`), the
//! analogue of recording statistics after the parameter update.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{indexed, Stream};
use crate::stats::{
    memorized_stats, update_moving, weighted_moving_stats, weights_for_memory, BatchStats,
    Moments, MovingStats, StatsMemory,
};
use crate::tensor::Tensor;

pub const ESTIMATORS: [&str; 5] = ["single", "moving", "weighted", "memorized", "memorized_refreshed"];

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub seed: u64,
    pub batch_sizes: Vec<usize>,
    pub drifts: Vec<f64>,
    pub trials: usize,
    pub features: usize,
    pub memory: usize,
    pub eta: f64,
    pub lambda: f64,
    pub theta: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            seed: 1,
            batch_sizes: vec![8, 16, 32, 64, 128],
            drifts: vec![0.0],
            trials: 200,
            features: 4,
            memory: 20,
            eta: 1.0,
            lambda: 1.0,
            theta: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub batch_size: usize,
    pub drift: f64,
    pub estimator: &'static str,
    pub mse_mean: f64,
    pub mse_var: f64,
    pub trials: usize,
}

impl BenchRow {
    pub fn mse(&self) -> f64 {
        self.mse_mean + self.mse_var
    }
}

pub const BENCH_HEADER: &str = "batch_size,drift,estimator,mse_mean,mse_var,mse,trials";

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(BENCH_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.batch_size,
            r.drift,
            r.estimator,
            r.mse_mean,
            r.mse_var,
            r.mse(),
            r.trials
        )
        .expect("writing to a String cannot fail");
    }
    s
}

fn true_moments(features: usize) -> (Vec<f64>, Vec<f64>) {
    let mean = (0..features).map(|f| f as f64 - 1.0).collect();
    let var = (0..features).map(|f| (1.0 + 0.5 * f as f64).powi(2)).collect();
    (mean, var)
}

fn draw<R: Rng>(rng: &mut R, n: usize, mean: &[f64], var: &[f64]) -> Tensor {
    let f = mean.len();
    Tensor::from_fn(&[n, f], |i| {
        let z: f64 = StandardNormal.sample(rng);
        mean[i % f] + var[i % f].sqrt() * z
    })
}

fn shifted(s: &BatchStats, by: f64) -> BatchStats {
    BatchStats {
        mean: s.mean.iter().map(|m| m + by).collect(),
        var: s.var.clone(),
        count: s.count,
    }
}

/// Mean squared errors of every estimator for every (batch size, drift).
pub fn run(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.trials == 0 || cfg.trials >= 1 << 20 {
        return Err(Error::Config("statsbench trials must lie in 1..2^20".into()));
    }
    if cfg.features == 0 || cfg.batch_sizes.iter().any(|&b| b == 0 || b >= 1 << 12) {
        return Err(Error::Config("statsbench needs features >= 1 and batch sizes in 1..4096".into()));
    }
    let (mu0, var) = true_moments(cfg.features);
    let mut rows = Vec::new();
    for (di, &drift) in cfg.drifts.iter().enumerate() {
        if !drift.is_finite() {
            return Err(Error::Config("statsbench drift must be finite".into()));
        }
        for &bs in &cfg.batch_sizes {
            let mut sq = [[0.0f64; 2]; ESTIMATORS.len()];
            for trial in 0..cfg.trials {
                let stream_index = ((di as u64) << 32) ^ ((bs as u64) << 20) ^ trial as u64;
                let mut rng = indexed(cfg.seed, Stream::Bench, stream_index);
                let steps = cfg.memory + 1;
                let mut stale = StatsMemory::new(cfg.memory, cfg.eta, cfg.lambda)?;
                let mut fresh = StatsMemory::new(cfg.memory, cfg.eta, cfg.lambda)?;
                let mut moving = MovingStats::new(cfg.theta)?;
                let mut current = None;
                for t in 0..steps {
                    let mean: Vec<f64> = mu0.iter().map(|m| m + t as f64 * drift).collect();
                    let s = BatchStats::from_activations(&draw(&mut rng, bs, &mean, &var))?;
                    update_moving(&mut moving, &s)?;
                    if t + 1 < steps {
                        stale.push(s.clone())?;
                        fresh.push(shifted(&s, drift))?;
                    } else {
                        current = Some(s);
                    }
                }
                let current = current.expect("at least one step");
                let weights = weights_for_memory(&stale);
                let history: Vec<(BatchStats, f64)> = stale
                    .entries()
                    .cloned()
                    .chain(std::iter::once(current.clone()))
                    .zip(weights)
                    .collect();
                let estimates: [Moments; 5] = [
                    Moments::from(&current),
                    Moments {
                        mean: moving.mean.clone(),
                        var: moving.var.clone(),
                    },
                    weighted_moving_stats(&history)?,
                    memorized_stats(&stale, &current)?,
                    memorized_stats(&fresh, &current)?,
                ];
                let target: Vec<f64> = mu0.iter().map(|m| m + cfg.memory as f64 * drift).collect();
                for (acc, est) in sq.iter_mut().zip(&estimates) {
                    for f in 0..cfg.features {
                        acc[0] += (est.mean[f] - target[f]).powi(2);
                        acc[1] += (est.var[f] - var[f]).powi(2);
                    }
                }
            }
            let denom = (cfg.trials * cfg.features) as f64;
            for (name, acc) in ESTIMATORS.iter().zip(sq) {
                rows.push(BenchRow {
                    batch_size: bs,
                    drift,
                    estimator: name,
                    mse_mean: acc[0] / denom,
                    mse_var: acc[1] / denom,
                    trials: cfg.trials,
                });
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row<'a>(rows: &'a [BenchRow], bs: usize, drift: f64, est: &str) -> &'a BenchRow {
        rows.iter()
            .find(|r| r.batch_size == bs && r.drift == drift && r.estimator == est)
            .unwrap()
    }

    #[test]
    fn memory_helps_small_batches() {
        let cfg = BenchConfig {
            batch_sizes: vec![8, 128],
            trials: 100,
            ..BenchConfig::default()
        };
        let rows = run(&cfg).unwrap();
        assert!(row(&rows, 8, 0.0, "memorized").mse() < row(&rows, 8, 0.0, "single").mse());
        // large batches make every estimator accurate
        assert!(row(&rows, 128, 0.0, "single").mse() < row(&rows, 8, 0.0, "single").mse());
        assert!(row(&rows, 128, 0.0, "memorized").mse() < 0.05);
    }

    #[test]
    fn refreshed_memory_beats_stale_under_drift() {
        let cfg = BenchConfig {
            batch_sizes: vec![16],
            drifts: vec![0.2],
            trials: 100,
            ..BenchConfig::default()
        };
        let rows = run(&cfg).unwrap();
        assert!(row(&rows, 16, 0.2, "memorized_refreshed").mse() < row(&rows, 16, 0.2, "memorized").mse());
    }

    #[test]
    fn csv_has_one_row_per_estimator() {
        let cfg = BenchConfig {
            batch_sizes: vec![8],
            trials: 3,
            ..BenchConfig::default()
        };
        let csv = bench_csv(&run(&cfg).unwrap());
        assert_eq!(csv.lines().count(), 1 + ESTIMATORS.len());
        assert!(csv.starts_with(BENCH_HEADER));
    }
}
