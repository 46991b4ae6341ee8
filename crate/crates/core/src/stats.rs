//! Per-feature batch statistics and the estimators built on them.
//!
//! Three ways of turning a stream of [`BatchStats`] into normalization
//! statistics live here:
//!
//! * [`update_moving`]: exponential moving average, the usual BN inference
//!   statistics.
//! * [`weighted_moving_stats`]: weighted average of means and of variances,
//!   with no cross-batch term.
//! * [`memorized_stats`]: the pooled mean and variance of the `k` remembered
//!   batches plus the current one, where each batch contributes its
//!   within-batch variance *and* the squared offset of its mean from the
//!   pooled mean. With equal weights this is exactly the population variance
//!   of the concatenated data.
//!
//! All variances are population variances (divide by `n`).

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::tensor::{reduce_moments, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Number of values contributing to each feature (samples x spatial positions).
    pub count: usize,
}

impl BatchStats {
    pub fn new(mean: Vec<f64>, var: Vec<f64>, count: usize) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::arg(format!(
                "mean has {} features but var has {}",
                mean.len(),
                var.len()
            )));
        }
        if count == 0 {
            return Err(Error::arg("batch statistics need count >= 1"));
        }
        if var.iter().any(|&v| v < 0.0 || v.is_nan()) {
            return Err(Error::arg("variance must be non-negative"));
        }
        Ok(BatchStats { mean, var, count })
    }

    /// Statistics of an activation tensor. Rank-2 inputs (batch x features)
    /// reduce over the batch axis; rank-4 inputs (batch x channels x H x W)
    /// reduce over batch and both spatial axes per channel.
    pub fn from_activations(x: &Tensor) -> Result<Self> {
        let axes: &[usize] = match x.rank() {
            2 => &[0],
            4 => &[0, 2, 3],
            r => {
                return Err(Error::arg(format!(
                    "normalization expects rank 2 or 4 input, got rank {r}"
                )))
            }
        };
        let (mean, var) = reduce_moments(x, axes)?;
        let count = x.len() / mean.len().max(1);
        Ok(BatchStats {
            mean: mean.into_data(),
            var: var.into_data(),
            count,
        })
    }

    pub fn features(&self) -> usize {
        self.mean.len()
    }
}

/// A mean/variance pair produced by one of the estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl From<&BatchStats> for Moments {
    fn from(s: &BatchStats) -> Self {
        Moments {
            mean: s.mean.clone(),
            var: s.var.clone(),
        }
    }
}

/// Bounded FIFO of the most recent batch statistics of one layer, together
/// with the decay parameters that weight them.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsMemory {
    entries: VecDeque<BatchStats>,
    capacity: usize,
    eta: f64,
    lambda: f64,
}

impl StatsMemory {
    pub fn new(capacity: usize, eta: f64, lambda: f64) -> Result<Self> {
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(Error::arg(format!("eta must lie in (0, 1], got {eta}")));
        }
        check_lambda(lambda)?;
        Ok(StatsMemory {
            entries: VecDeque::with_capacity(capacity),
            capacity,
            eta,
            lambda,
        })
    }

    /// Oldest first.
    pub fn entries(&self) -> impl ExactSizeIterator<Item = &BatchStats> + '_ {
        self.entries.iter()
    }

    pub fn newest(&self) -> Option<&BatchStats> {
        self.entries.back()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        check_lambda(lambda)?;
        self.lambda = lambda;
        Ok(())
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Appends `entry` as the newest element, evicting the oldest once the
    /// memory is over capacity. A zero-capacity memory stays empty.
    pub fn push(&mut self, entry: BatchStats) -> Result<()> {
        if let Some(first) = self.entries.front() {
            if first.features() != entry.features() {
                return Err(Error::arg(format!(
                    "memory holds {} features, entry has {}",
                    first.features(),
                    entry.features()
                )));
            }
        }
        if self.capacity == 0 {
            return Ok(());
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
        Ok(())
    }

    /// See [`weights_for_memory`].
    pub fn weights(&self) -> Vec<f64> {
        weights_for_memory(self)
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::arg(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

/// `[λη^(m-1), ..., λη, λ, 1]` for `m` stored entries (oldest first); the
/// trailing 1 is the weight of the current batch.
pub fn weights_for_memory(memory: &StatsMemory) -> Vec<f64> {
    let m = memory.len();
    let mut w: Vec<f64> = (0..m)
        .map(|i| memory.lambda * memory.eta.powi((m - 1 - i) as i32))
        .collect();
    w.push(1.0);
    w
}

fn check_features(expected: usize, got: &BatchStats) -> Result<()> {
    if got.features() != expected {
        return Err(Error::arg(format!(
            "expected {} features, got {}",
            expected,
            got.features()
        )));
    }
    Ok(())
}

/// Memorized statistics together with the shared denominator `Σ α_i n_i`.
pub(crate) fn memorized_with_weight(
    memory: &StatsMemory,
    current: &BatchStats,
) -> Result<(Moments, f64)> {
    let f = current.features();
    for e in memory.entries() {
        check_features(f, e)?;
    }
    let weights = memory.weights();
    let terms: Vec<(&BatchStats, f64)> = memory
        .entries()
        .zip(&weights)
        .filter(|(_, &a)| a > 0.0)
        .map(|(e, &a)| (e, a * e.count as f64))
        .collect();
    if terms.is_empty() {
        return Ok((Moments::from(current), current.count as f64));
    }

    let all = || {
        terms
            .iter()
            .copied()
            .chain(std::iter::once((current, current.count as f64)))
    };
    let total: f64 = all().map(|(_, w)| w).sum();
    let mut mean = vec![0.0; f];
    for (s, w) in all() {
        for (m, &mu) in mean.iter_mut().zip(&s.mean) {
            *m += w * mu;
        }
    }
    mean.iter_mut().for_each(|m| *m /= total);
    let mut var = vec![0.0; f];
    for (s, w) in all() {
        for c in 0..f {
            let d = s.mean[c] - mean[c];
            var[c] += w * (d * d + s.var[c]);
        }
    }
    var.iter_mut().for_each(|v| *v /= total);
    Ok((Moments { mean, var }, total))
}

/// Pooled mean and variance over the remembered batches plus `current`,
/// weighted by [`weights_for_memory`] and each batch's count.
///
/// Entries with zero weight drop out; when nothing but the current batch
/// remains, its own statistics are returned unchanged.
pub fn memorized_stats(memory: &StatsMemory, current: &BatchStats) -> Result<Moments> {
    memorized_with_weight(memory, current).map(|(m, _)| m)
}

/// Weighted means of the per-batch means and of the per-batch variances,
/// without the cross-batch correction term.
pub fn weighted_moving_stats(history: &[(BatchStats, f64)]) -> Result<Moments> {
    let refs: Vec<(&BatchStats, f64)> = history.iter().map(|(s, a)| (s, *a)).collect();
    weighted_with_weight(&refs).map(|(m, _)| m)
}

pub(crate) fn weighted_with_weight(history: &[(&BatchStats, f64)]) -> Result<(Moments, f64)> {
    let Some((first, _)) = history.first() else {
        return Err(Error::arg("weighted statistics need a non-empty history"));
    };
    let f = first.features();
    for (s, a) in history {
        check_features(f, s)?;
        if *a < 0.0 || !a.is_finite() {
            return Err(Error::arg(format!("weight {a} is not a non-negative number")));
        }
    }
    let total: f64 = history.iter().map(|(s, a)| a * s.count as f64).sum();
    if total <= 0.0 {
        return Err(Error::arg("weighted statistics need positive total weight"));
    }
    let mut mean = vec![0.0; f];
    let mut var = vec![0.0; f];
    for (s, a) in history {
        let w = a * s.count as f64;
        for c in 0..f {
            mean[c] += w * s.mean[c];
            var[c] += w * s.var[c];
        }
    }
    mean.iter_mut().for_each(|m| *m /= total);
    var.iter_mut().for_each(|v| *v /= total);
    Ok((Moments { mean, var }, total))
}

/// [`weighted_moving_stats`] over the memory entries (with their memory
/// weights) followed by the current batch at weight 1.
pub(crate) fn weighted_with_memory(
    memory: &StatsMemory,
    current: &BatchStats,
) -> Result<(Moments, f64)> {
    let weights = memory.weights();
    let mut history: Vec<(&BatchStats, f64)> = memory.entries().zip(weights).collect();
    history.push((current, 1.0));
    weighted_with_weight(&history)
}

/// Exponential moving average of batch statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct MovingStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    theta: f64,
    initialized: bool,
}

impl MovingStats {
    /// `theta` is the weight of the incoming batch.
    pub fn new(theta: f64) -> Result<Self> {
        if !(theta > 0.0 && theta <= 1.0) {
            return Err(Error::arg(format!("theta must lie in (0, 1], got {theta}")));
        }
        Ok(MovingStats {
            mean: Vec::new(),
            var: Vec::new(),
            theta,
            initialized: false,
        })
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Restores a previously saved state.
    pub fn restore(theta: f64, mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        let mut m = MovingStats::new(theta)?;
        if mean.len() != var.len() {
            return Err(Error::arg("moving mean and var differ in length"));
        }
        m.initialized = !mean.is_empty();
        m.mean = mean;
        m.var = var;
        Ok(m)
    }
}

/// `mov := θ·batch + (1-θ)·mov` for mean and variance; the first call seeds
/// the average with the batch statistics.
pub fn update_moving(mov: &mut MovingStats, batch: &BatchStats) -> Result<()> {
    if !mov.initialized {
        mov.mean = batch.mean.clone();
        mov.var = batch.var.clone();
        mov.initialized = true;
        return Ok(());
    }
    if mov.mean.len() != batch.features() {
        return Err(Error::arg(format!(
            "moving statistics have {} features, batch has {}",
            mov.mean.len(),
            batch.features()
        )));
    }
    let t = mov.theta;
    for (m, &b) in mov.mean.iter_mut().zip(&batch.mean) {
        *m = t * b + (1.0 - t) * *m;
    }
    for (v, &b) in mov.var.iter_mut().zip(&batch.var) {
        *v = t * b + (1.0 - t) * *v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stats(mean: f64, var: f64, n: usize) -> BatchStats {
        BatchStats::new(vec![mean], vec![var], n).unwrap()
    }

    #[test]
    fn weights_follow_geometric_decay() {
        let mut mem = StatsMemory::new(5, 0.9, 0.1).unwrap();
        for _ in 0..3 {
            mem.push(stats(0.0, 1.0, 2)).unwrap();
        }
        let w = weights_for_memory(&mem);
        let expected = [0.1 * 0.81, 0.1 * 0.9, 0.1, 1.0];
        assert_eq!(w.len(), 4);
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{w:?}");
        }
        assert!((w[0] - 0.081).abs() < 1e-15 && (w[1] - 0.09).abs() < 1e-15);
    }

    #[test]
    fn zero_lambda_zeroes_memory_weights() {
        let mut mem = StatsMemory::new(4, 0.9, 0.0).unwrap();
        mem.push(stats(1.0, 1.0, 3)).unwrap();
        mem.push(stats(2.0, 1.0, 3)).unwrap();
        assert_eq!(mem.weights(), vec![0.0, 0.0, 1.0]);
        let cur = stats(7.25, 0.3, 3);
        assert_eq!(memorized_stats(&mem, &cur).unwrap(), Moments::from(&cur));
    }

    #[test]
    fn unit_lambda_and_eta_give_uniform_weights() {
        let mut mem = StatsMemory::new(4, 1.0, 1.0).unwrap();
        for _ in 0..4 {
            mem.push(stats(0.0, 1.0, 1)).unwrap();
        }
        assert!(mem.weights().iter().all(|&w| w == 1.0));
    }

    #[test]
    fn empty_memory_returns_current() {
        let mem = StatsMemory::new(3, 0.9, 0.5).unwrap();
        let cur = BatchStats::new(vec![0.1, -3.3], vec![2.0, 0.7], 5).unwrap();
        assert_eq!(memorized_stats(&mem, &cur).unwrap(), Moments::from(&cur));
    }

    #[test]
    fn equal_weight_pair_matches_pooled_data() {
        // [0, 2] and [4, 6] pooled -> mean 3, population var 5
        let mut mem = StatsMemory::new(3, 1.0, 1.0).unwrap();
        mem.push(stats(1.0, 1.0, 2)).unwrap();
        let m = memorized_stats(&mem, &stats(5.0, 1.0, 2)).unwrap();
        assert!((m.mean[0] - 3.0).abs() < 1e-15);
        assert!((m.var[0] - 5.0).abs() < 1e-15);
    }

    #[test]
    fn half_weight_worked_example() {
        let mut mem = StatsMemory::new(3, 0.9, 0.5).unwrap();
        mem.push(stats(0.0, 1.0, 2)).unwrap();
        let m = memorized_stats(&mem, &stats(4.0, 1.0, 2)).unwrap();
        assert!((m.mean[0] - 8.0 / 3.0).abs() < 1e-14);
        assert!((m.var[0] - 123.0 / 27.0).abs() < 1e-14);
    }

    #[test]
    fn memorized_rejects_shape_mismatch() {
        let mut mem = StatsMemory::new(3, 0.9, 0.5).unwrap();
        mem.push(stats(0.0, 1.0, 2)).unwrap();
        let cur = BatchStats::new(vec![0.0, 0.0], vec![1.0, 1.0], 2).unwrap();
        assert!(matches!(memorized_stats(&mem, &cur), Err(Error::Argument(_))));
    }

    #[test]
    fn weighted_moving_contrast() {
        let single = weighted_moving_stats(&[(stats(1.5, 0.25, 4), 0.3)]).unwrap();
        assert!((single.mean[0] - 1.5).abs() < 1e-15 && (single.var[0] - 0.25).abs() < 1e-15);

        let w = weighted_moving_stats(&[(stats(1.0, 1.0, 2), 1.0), (stats(5.0, 1.0, 2), 1.0)])
            .unwrap();
        assert_eq!((w.mean[0], w.var[0]), (3.0, 1.0));
        assert!(weighted_moving_stats(&[]).is_err());
    }

    #[test]
    fn weighted_equals_memorized_when_means_agree() {
        let mut mem = StatsMemory::new(3, 0.9, 0.7).unwrap();
        mem.push(stats(2.0, 1.0, 4)).unwrap();
        mem.push(stats(2.0, 3.0, 4)).unwrap();
        let cur = stats(2.0, 0.5, 4);
        let (a, _) = weighted_with_memory(&mem, &cur).unwrap();
        let b = memorized_stats(&mem, &cur).unwrap();
        assert!((a.mean[0] - b.mean[0]).abs() < 1e-15);
        assert!((a.var[0] - b.var[0]).abs() < 1e-15);
    }

    #[test]
    fn moving_average_updates() {
        let mut mov = MovingStats::new(0.5).unwrap();
        update_moving(&mut mov, &stats(0.0, 1.0, 2)).unwrap();
        update_moving(&mut mov, &stats(2.0, 1.0, 2)).unwrap();
        assert_eq!(mov.mean, vec![1.0]);

        let mut full = MovingStats::new(1.0).unwrap();
        update_moving(&mut full, &stats(9.0, 9.0, 1)).unwrap();
        update_moving(&mut full, &stats(-1.0, 0.5, 1)).unwrap();
        assert_eq!((full.mean[0], full.var[0]), (-1.0, 0.5));

        let mut fresh = MovingStats::new(0.1).unwrap();
        update_moving(&mut fresh, &stats(3.0, 2.0, 7)).unwrap();
        assert_eq!((fresh.mean[0], fresh.var[0]), (3.0, 2.0));
        let bad = BatchStats::new(vec![0.0; 2], vec![0.0; 2], 1).unwrap();
        assert!(update_moving(&mut fresh, &bad).is_err());
    }

    #[test]
    fn push_evicts_oldest() {
        let mut mem = StatsMemory::new(2, 0.9, 0.5).unwrap();
        assert!(mem.is_empty());
        mem.push(stats(1.0, 0.0, 1)).unwrap();
        assert_eq!(mem.len(), 1);
        mem.push(stats(2.0, 0.0, 1)).unwrap();
        mem.push(stats(3.0, 0.0, 1)).unwrap();
        let means: Vec<f64> = mem.entries().map(|e| e.mean[0]).collect();
        assert_eq!(means, vec![2.0, 3.0]);

        let mut zero = StatsMemory::new(0, 0.9, 0.5).unwrap();
        zero.push(stats(1.0, 0.0, 1)).unwrap();
        assert!(zero.is_empty());

        let wide = BatchStats::new(vec![0.0; 2], vec![0.0; 2], 1).unwrap();
        assert!(mem.push(wide).is_err());
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(StatsMemory::new(3, 0.0, 0.5).is_err());
        assert!(StatsMemory::new(3, 0.9, 1.5).is_err());
        assert!(MovingStats::new(0.0).is_err());
        assert!(BatchStats::new(vec![0.0], vec![-1.0], 1).is_err());
        assert!(BatchStats::new(vec![0.0], vec![1.0], 0).is_err());
    }

    fn arb_stats(f: usize) -> impl Strategy<Value = BatchStats> {
        (
            prop::collection::vec(-10.0f64..10.0, f),
            prop::collection::vec(0.0f64..5.0, f),
            1usize..10,
        )
            .prop_map(|(m, v, n)| BatchStats::new(m, v, n).unwrap())
    }

    proptest! {
        #[test]
        fn memorized_dominates_weighted(
            entries in prop::collection::vec(arb_stats(3), 0..6),
            cur in arb_stats(3),
            lambda in 0.0f64..=1.0,
            eta in 0.05f64..=1.0,
        ) {
            let mut mem = StatsMemory::new(6, eta, lambda).unwrap();
            for e in entries { mem.push(e).unwrap(); }
            let (wm, _) = weighted_with_memory(&mem, &cur).unwrap();
            let mm = memorized_stats(&mem, &cur).unwrap();
            for c in 0..3 {
                prop_assert!(mm.var[c] >= 0.0);
                prop_assert!(mm.var[c] >= wm.var[c] * (1.0 - 1e-12) - 1e-12);
            }
        }

        #[test]
        fn zero_lambda_collapses_exactly(
            entries in prop::collection::vec(arb_stats(2), 0..5),
            cur in arb_stats(2),
        ) {
            let mut mem = StatsMemory::new(5, 0.9, 0.0).unwrap();
            for e in entries { mem.push(e).unwrap(); }
            prop_assert_eq!(memorized_stats(&mem, &cur).unwrap(), Moments::from(&cur));
        }

        #[test]
        fn moving_update_is_convex(
            old in arb_stats(2), new in arb_stats(2), theta in 0.01f64..=1.0
        ) {
            let mut mov = MovingStats::new(theta).unwrap();
            update_moving(&mut mov, &old).unwrap();
            update_moving(&mut mov, &new).unwrap();
            for c in 0..2 {
                let (lo, hi) = (old.mean[c].min(new.mean[c]), old.mean[c].max(new.mean[c]));
                prop_assert!(mov.mean[c] >= lo - 1e-12 && mov.mean[c] <= hi + 1e-12);
                let (lo, hi) = (old.var[c].min(new.var[c]), old.var[c].max(new.var[c]));
                prop_assert!(mov.var[c] >= lo - 1e-12 && mov.var[c] <= hi + 1e-12);
            }
        }
    }
}
