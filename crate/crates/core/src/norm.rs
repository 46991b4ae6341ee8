//! Normalization layers: BN, memorized BN, batch renormalization and the
//! moving-statistics baseline, each with a hand-derived backward pass.
//!
//! Every mode normalizes with some center `c` and variance `v`,
//! `x̂ = (x - c) / sqrt(v + ε)`, then applies `y = γ(r·x̂ + d) + β`
//! (`r = 1, d = 0` outside BRN). What differs is where `(c, v)` comes from:
//!
//! | mode      | training statistics                                  | eval statistics          |
//! |-----------|------------------------------------------------------|--------------------------|
//! | `Bn`      | current batch                                        | moving average           |
//! | `Mbn`     | memorized pool of memory + current batch             | last pool used in training |
//! | `Brn`     | current batch, corrected by clipped `r`, `d`         | moving average           |
//! | `MovNorm` | weighted means/variances of memory + current batch   | last pool used in training |
//!
//! Backward treats anything not derived from the current batch as constant
//! (memory entries, moving averages, BRN's `r` and `d`). Under that rule every
//! mode shares one input-gradient formula:
//!
//! ```text
//! g_j  = dy_j · γ · r
//! dx_j = (g_j - Σg / W - z_j · Σ(g·x̂) / W) / sqrt(v + ε)
//! ```
//!
//! where `W` is the pooled weight `Σ α_i n_i` (just `n` for BN and BRN) and
//! `z_j = x̂_j`, except for `MovNorm`, whose variance depends on the batch only
//! through the batch's own variance, giving `z_j = (x_j - μ_B) / sqrt(v + ε)`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::stats::{
    memorized_with_weight, update_moving, weighted_with_memory, BatchStats, Moments, MovingStats,
    StatsMemory,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormMode {
    Bn,
    Mbn,
    Brn,
    MovNorm,
}

impl NormMode {
    pub const ALL: [NormMode; 4] = [NormMode::Bn, NormMode::Mbn, NormMode::Brn, NormMode::MovNorm];

    pub fn as_str(self) -> &'static str {
        match self {
            NormMode::Bn => "bn",
            NormMode::Mbn => "mbn",
            NormMode::Brn => "brn",
            NormMode::MovNorm => "movnorm",
        }
    }

    /// Whether the layer keeps a [`StatsMemory`] (as opposed to moving averages).
    pub fn uses_memory(self) -> bool {
        matches!(self, NormMode::Mbn | NormMode::MovNorm)
    }
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bn" => Ok(NormMode::Bn),
            "mbn" => Ok(NormMode::Mbn),
            "brn" => Ok(NormMode::Brn),
            "movnorm" => Ok(NormMode::MovNorm),
            other => Err(Error::arg(format!(
                "unknown normalization mode `{other}` (expected bn, mbn, brn or movnorm)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormConfig {
    pub mode: NormMode,
    pub eps: f64,
    /// Weight of the incoming batch in the moving averages.
    pub theta: f64,
    /// Memory capacity `k`.
    pub memory: usize,
    pub eta: f64,
    pub lambda: f64,
    pub r_max: f64,
    pub d_max: f64,
}

impl Default for NormConfig {
    fn default() -> Self {
        NormConfig {
            mode: NormMode::Mbn,
            eps: 1e-5,
            theta: 0.1,
            memory: 20,
            eta: 0.9,
            lambda: 0.1,
            r_max: 1.0,
            d_max: 0.0,
        }
    }
}

impl NormConfig {
    pub fn with_mode(mode: NormMode) -> Self {
        NormConfig {
            mode,
            ..Default::default()
        }
    }
}

/// Where one feature axis sits inside a rank-2 or rank-4 activation:
/// flat index = `(outer * features + f) * inner + i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Layout {
    pub outer: usize,
    pub features: usize,
    pub inner: usize,
}

impl Layout {
    pub fn of(shape: &[usize]) -> Result<Self> {
        match *shape {
            [n, f] => Ok(Layout {
                outer: n,
                features: f,
                inner: 1,
            }),
            [n, c, h, w] => Ok(Layout {
                outer: n,
                features: c,
                inner: h * w,
            }),
            _ => Err(Error::arg(format!(
                "normalization expects rank 2 or 4 input, got shape {shape:?}"
            ))),
        }
    }

    /// Flat indices belonging to feature `f`, in ascending order.
    pub fn indices(self, f: usize) -> impl Iterator<Item = usize> {
        (0..self.outer).flat_map(move |o| {
            let base = (o * self.features + f) * self.inner;
            base..base + self.inner
        })
    }
}

#[derive(Debug, Clone)]
enum Store {
    Moving(MovingStats),
    Memory(StatsMemory),
}

/// Statistics chosen for one forward pass.
#[derive(Debug, Clone)]
struct Plan {
    center: Vec<f64>,
    var: Vec<f64>,
    weight_sum: f64,
    correction: Option<(Vec<f64>, Vec<f64>)>,
    batch_mean: Option<Vec<f64>>,
}

/// Intermediates kept by a gradient-carrying forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input_shape: Vec<usize>,
    pub x_hat: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// Center and variance the forward normalized with.
    pub used: Moments,
    /// `Σ α_i n_i` over the statistics that entered `used`.
    pub weight_sum: f64,
    /// BRN's per-feature `(r, d)`.
    pub correction: Option<(Vec<f64>, Vec<f64>)>,
    /// MovNorm only: `(x - μ_B) / sqrt(v + ε)`.
    pub batch_centered: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormGrads {
    pub grad_x: Tensor,
    pub grad_gamma: Vec<f64>,
    pub grad_beta: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct NormLayer {
    gamma: Vec<f64>,
    beta: Vec<f64>,
    eps: f64,
    mode: NormMode,
    store: Store,
    r_max: f64,
    d_max: f64,
    frozen: Option<Moments>,
    cache: Option<ForwardCache>,
}

impl NormLayer {
    pub fn new(features: usize, config: &NormConfig) -> Result<Self> {
        if !(config.eps > 0.0) {
            return Err(Error::arg(format!("eps must be positive, got {}", config.eps)));
        }
        let store = if config.mode.uses_memory() {
            Store::Memory(StatsMemory::new(config.memory, config.eta, config.lambda)?)
        } else {
            Store::Moving(MovingStats::new(config.theta)?)
        };
        let mut layer = NormLayer {
            gamma: vec![1.0; features],
            beta: vec![0.0; features],
            eps: config.eps,
            mode: config.mode,
            store,
            r_max: 1.0,
            d_max: 0.0,
            frozen: None,
            cache: None,
        };
        layer.set_brn_bounds(config.r_max, config.d_max)?;
        Ok(layer)
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn gamma_mut(&mut self) -> &mut [f64] {
        &mut self.gamma
    }

    pub fn beta_mut(&mut self) -> &mut [f64] {
        &mut self.beta
    }

    pub(crate) fn params_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.gamma, &mut self.beta)
    }

    pub fn memory(&self) -> Option<&StatsMemory> {
        match &self.store {
            Store::Memory(m) => Some(m),
            Store::Moving(_) => None,
        }
    }

    pub fn memory_mut(&mut self) -> Option<&mut StatsMemory> {
        match &mut self.store {
            Store::Memory(m) => Some(m),
            Store::Moving(_) => None,
        }
    }

    pub fn moving(&self) -> Option<&MovingStats> {
        match &self.store {
            Store::Moving(m) => Some(m),
            Store::Memory(_) => None,
        }
    }

    pub fn set_moving(&mut self, moving: MovingStats) -> Result<()> {
        match &mut self.store {
            Store::Moving(m) => {
                *m = moving;
                Ok(())
            }
            Store::Memory(_) => Err(Error::state(format!(
                "{} layers keep a memory, not moving statistics",
                self.mode
            ))),
        }
    }

    /// Statistics the eval path of a memory-based layer normalizes with.
    pub fn frozen(&self) -> Option<&Moments> {
        self.frozen.as_ref()
    }

    pub fn set_frozen(&mut self, moments: Option<Moments>) {
        self.frozen = moments;
    }

    pub fn cache(&self) -> Option<&ForwardCache> {
        self.cache.as_ref()
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// No-op for layers without a memory.
    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        match &mut self.store {
            Store::Memory(m) => m.set_lambda(lambda),
            Store::Moving(_) => Ok(()),
        }
    }

    pub fn brn_bounds(&self) -> (f64, f64) {
        (self.r_max, self.d_max)
    }

    pub fn set_brn_bounds(&mut self, r_max: f64, d_max: f64) -> Result<()> {
        if !(r_max >= 1.0) || !(d_max >= 0.0) {
            return Err(Error::arg(format!(
                "BRN bounds need r_max >= 1 and d_max >= 0, got ({r_max}, {d_max})"
            )));
        }
        self.r_max = r_max;
        self.d_max = d_max;
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<Layout> {
        let layout = Layout::of(x.shape())?;
        if layout.features != self.features() {
            return Err(Error::arg(format!(
                "layer has {} features, input shape {:?}",
                self.features(),
                x.shape()
            )));
        }
        Ok(layout)
    }

    fn plan(&self, current: &BatchStats) -> Result<Plan> {
        let batch_only = || Plan {
            center: current.mean.clone(),
            var: current.var.clone(),
            weight_sum: current.count as f64,
            correction: None,
            batch_mean: None,
        };
        Ok(match (&self.store, self.mode) {
            (Store::Memory(mem), NormMode::Mbn) => {
                let (m, w) = memorized_with_weight(mem, current)?;
                Plan {
                    center: m.mean,
                    var: m.var,
                    weight_sum: w,
                    correction: None,
                    batch_mean: None,
                }
            }
            (Store::Memory(mem), _) => {
                let (m, w) = weighted_with_memory(mem, current)?;
                Plan {
                    center: m.mean,
                    var: m.var,
                    weight_sum: w,
                    correction: None,
                    batch_mean: Some(current.mean.clone()),
                }
            }
            (Store::Moving(mov), NormMode::Brn) => {
                let (mov_mean, mov_var) = if mov.is_initialized() {
                    (&mov.mean, &mov.var)
                } else {
                    (&current.mean, &current.var)
                };
                let mut plan = batch_only();
                plan.correction = Some(self.correction(current, mov_mean, mov_var));
                plan
            }
            (Store::Moving(_), _) => batch_only(),
        })
    }

    /// BRN's clipped `(r, d)` against the given moving statistics.
    fn correction(
        &self,
        batch: &BatchStats,
        mov_mean: &[f64],
        mov_var: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let f = batch.features();
        let mut r = Vec::with_capacity(f);
        let mut d = Vec::with_capacity(f);
        for c in 0..f {
            let mov_std = (mov_var[c] + self.eps).sqrt();
            let batch_std = (batch.var[c] + self.eps).sqrt();
            r.push((batch_std / mov_std).clamp(1.0 / self.r_max, self.r_max));
            d.push(((batch.mean[c] - mov_mean[c]) / mov_std).clamp(-self.d_max, self.d_max));
        }
        (r, d)
    }

    /// Normalizes `x` with `(center, var)` and applies the affine map.
    /// Returns the output, `x̂` and the per-feature `1/sqrt(var + ε)`.
    fn apply(
        &self,
        x: &Tensor,
        layout: Layout,
        center: &[f64],
        var: &[f64],
        correction: Option<(&[f64], &[f64])>,
    ) -> (Tensor, Vec<f64>, Vec<f64>) {
        let xs = x.data();
        let mut out = vec![0.0; xs.len()];
        let mut x_hat = vec![0.0; xs.len()];
        let mut inv_std = Vec::with_capacity(layout.features);
        for f in 0..layout.features {
            let s = 1.0 / (var[f] + self.eps).sqrt();
            inv_std.push(s);
            let (g, b, c) = (self.gamma[f], self.beta[f], center[f]);
            match correction {
                Some((r, d)) => {
                    for i in layout.indices(f) {
                        let h = (xs[i] - c) * s;
                        x_hat[i] = h;
                        out[i] = g * (r[f] * h + d[f]) + b;
                    }
                }
                None => {
                    for i in layout.indices(f) {
                        let h = (xs[i] - c) * s;
                        x_hat[i] = h;
                        out[i] = g * h + b;
                    }
                }
            }
        }
        let y = Tensor::new(x.shape().to_vec(), out).expect("same shape as input");
        (y, x_hat, inv_std)
    }

    fn run(&self, x: &Tensor) -> Result<(Tensor, BatchStats, Plan, Vec<f64>, Vec<f64>)> {
        let layout = self.check_input(x)?;
        let current = BatchStats::from_activations(x)?;
        let plan = self.plan(&current)?;
        let (y, x_hat, inv_std) = self.apply(
            x,
            layout,
            &plan.center,
            &plan.var,
            plan.correction.as_ref().map(|(r, d)| (&r[..], &d[..])),
        );
        Ok((y, current, plan, x_hat, inv_std))
    }

    /// Training forward that keeps what [`NormLayer::backward`] needs.
    ///
    /// Statistics stores are not touched except for the eval statistics of
    /// memory-based layers; recording the returned batch statistics is the
    /// caller's job (see [`NormLayer::record`]).
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, BatchStats)> {
        let (y, current, plan, x_hat, inv_std) = self.run(x)?;
        let layout = Layout::of(x.shape())?;
        let batch_centered = plan.batch_mean.as_ref().map(|mu| {
            let mut z = vec![0.0; x.len()];
            for f in 0..layout.features {
                for i in layout.indices(f) {
                    z[i] = (x.data()[i] - mu[f]) * inv_std[f];
                }
            }
            z
        });
        let used = Moments {
            mean: plan.center,
            var: plan.var,
        };
        if self.mode.uses_memory() {
            self.frozen = Some(used.clone());
        }
        self.cache = Some(ForwardCache {
            input_shape: x.shape().to_vec(),
            x_hat,
            inv_std,
            used,
            weight_sum: plan.weight_sum,
            correction: plan.correction,
            batch_centered,
        });
        Ok((y, current))
    }

    /// Training-rule forward without side effects: returns the output, the
    /// fresh batch statistics and the statistics used for normalizing.
    pub fn forward_stats(&self, x: &Tensor) -> Result<(Tensor, BatchStats, Moments)> {
        let (y, current, plan, _, _) = self.run(x)?;
        Ok((
            y,
            current,
            Moments {
                mean: plan.center,
                var: plan.var,
            },
        ))
    }

    /// BRN forward with `(r, d)` supplied instead of derived from the batch.
    pub fn forward_with_correction(&self, x: &Tensor, r: &[f64], d: &[f64]) -> Result<Tensor> {
        let layout = self.check_input(x)?;
        if r.len() != layout.features || d.len() != layout.features {
            return Err(Error::arg("correction length differs from feature count"));
        }
        let current = BatchStats::from_activations(x)?;
        let (y, _, _) = self.apply(x, layout, &current.mean, &current.var, Some((r, d)));
        Ok(y)
    }

    /// Folds freshly observed batch statistics into the layer's store:
    /// a moving-average update for BN/BRN, a memory push for MBN/MovNorm.
    pub fn record(&mut self, stats: &BatchStats) -> Result<()> {
        if stats.features() != self.features() {
            return Err(Error::arg(format!(
                "layer has {} features, statistics have {}",
                self.features(),
                stats.features()
            )));
        }
        match &mut self.store {
            Store::Moving(m) => update_moving(m, stats),
            Store::Memory(m) => m.push(stats.clone()),
        }
    }

    /// Inference forward. Never mutates the layer.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let layout = self.check_input(x)?;
        let (center, var) = match &self.store {
            Store::Moving(m) => {
                if !m.is_initialized() {
                    return Err(Error::state(format!(
                        "{} layer has no moving statistics yet",
                        self.mode
                    )));
                }
                (&m.mean, &m.var)
            }
            Store::Memory(_) => match &self.frozen {
                Some(m) => (&m.mean, &m.var),
                None => {
                    return Err(Error::state(format!(
                        "{} layer has not run a training forward yet",
                        self.mode
                    )))
                }
            },
        };
        Ok(self.apply(x, layout, center, var, None).0)
    }

    pub fn backward(&self, grad_y: &Tensor) -> Result<NormGrads> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::state("backward called without a cached training forward"))?;
        if grad_y.shape() != cache.input_shape.as_slice() {
            return Err(Error::arg(format!(
                "gradient shape {:?} differs from forward input {:?}",
                grad_y.shape(),
                cache.input_shape
            )));
        }
        let layout = Layout::of(&cache.input_shape)?;
        let dy = grad_y.data();
        let xh = &cache.x_hat;
        let z = cache.batch_centered.as_deref().unwrap_or(xh);
        let w = cache.weight_sum;
        let mut dx = vec![0.0; dy.len()];
        let mut grad_gamma = vec![0.0; layout.features];
        let mut grad_beta = vec![0.0; layout.features];
        for f in 0..layout.features {
            let (r, d) = match &cache.correction {
                Some((r, d)) => (r[f], d[f]),
                None => (1.0, 0.0),
            };
            let scale = self.gamma[f] * r;
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            let mut gg = 0.0;
            let mut gb = 0.0;
            for i in layout.indices(f) {
                let g = dy[i] * scale;
                sum_g += g;
                sum_gx += g * xh[i];
                gg += dy[i] * (r * xh[i] + d);
                gb += dy[i];
            }
            grad_gamma[f] = gg;
            grad_beta[f] = gb;
            let s = cache.inv_std[f];
            let (mean_g, mean_gx) = (sum_g / w, sum_gx / w);
            for i in layout.indices(f) {
                dx[i] = s * (dy[i] * scale - mean_g - z[i] * mean_gx);
            }
        }
        Ok(NormGrads {
            grad_x: Tensor::new(cache.input_shape.clone(), dx)?,
            grad_gamma,
            grad_beta,
        })
    }

    fn expect_mode(&self, mode: NormMode) -> Result<()> {
        if self.mode != mode {
            return Err(Error::state(format!(
                "{} operation on a {} layer",
                mode, self.mode
            )));
        }
        Ok(())
    }

    /// Batch-statistics forward followed by a moving-average update.
    pub fn bn_forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.expect_mode(NormMode::Bn)?;
        let (y, stats) = self.forward_train(x)?;
        self.record(&stats)?;
        Ok(y)
    }

    /// Memorized-statistics forward. With `grad_pass` the backward cache is
    /// filled; otherwise any stale cache is dropped. The memory is never
    /// pushed here.
    pub fn mbn_forward(&mut self, x: &Tensor, grad_pass: bool) -> Result<Tensor> {
        self.expect_mode(NormMode::Mbn)?;
        if grad_pass {
            return self.forward_train(x).map(|(y, _)| y);
        }
        let (y, _, used) = self.forward_stats(x)?;
        self.frozen = Some(used);
        self.cache = None;
        Ok(y)
    }

    pub fn mbn_backward(&self, grad_y: &Tensor) -> Result<NormGrads> {
        self.expect_mode(NormMode::Mbn)?;
        self.backward(grad_y)
    }

    /// Renormalized forward; `(r, d)` come from the moving statistics before
    /// this batch is folded into them.
    pub fn brn_forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.expect_mode(NormMode::Brn)?;
        let (y, stats) = self.forward_train(x)?;
        self.record(&stats)?;
        Ok(y)
    }

    pub fn brn_backward(&self, grad_y: &Tensor) -> Result<NormGrads> {
        self.expect_mode(NormMode::Brn)?;
        self.backward(grad_y)
    }

    pub fn movnorm_forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.expect_mode(NormMode::MovNorm)?;
        self.forward_train(x).map(|(y, _)| y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column(values: &[f64]) -> Tensor {
        Tensor::new(vec![values.len(), 1], values.to_vec()).unwrap()
    }

    fn layer(mode: NormMode, features: usize) -> NormLayer {
        NormLayer::new(features, &NormConfig::with_mode(mode)).unwrap()
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn bn_standardizes_unit_pair() {
        let mut l = layer(NormMode::Bn, 1);
        let y = l.bn_forward_train(&column(&[-1.0, 1.0])).unwrap();
        assert!(max_diff(y.data(), &[-1.0, 1.0]) < 1e-5);
        assert_eq!(l.moving().unwrap().mean, vec![0.0]);
    }

    #[test]
    fn bn_recovers_input_with_batch_affine() {
        let x = column(&[0.5, 2.0, 3.5, -1.0]);
        let stats = BatchStats::from_activations(&x).unwrap();
        let mut l = layer(NormMode::Bn, 1);
        l.gamma_mut()[0] = (stats.var[0] + l.eps()).sqrt();
        l.beta_mut()[0] = stats.mean[0];
        let y = l.bn_forward_train(&x).unwrap();
        assert!(max_diff(y.data(), x.data()) < 1e-12);
    }

    #[test]
    fn bn_constant_column_maps_to_beta() {
        let mut l = layer(NormMode::Bn, 1);
        l.beta_mut()[0] = 0.75;
        let y = l.bn_forward_train(&column(&[3.0; 5])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn eval_requires_statistics() {
        for mode in NormMode::ALL {
            let l = layer(mode, 1);
            assert!(matches!(l.forward_eval(&column(&[1.0, 2.0])), Err(Error::State(_))));
        }
    }

    #[test]
    fn bn_eval_with_unit_moving_is_identity() {
        let mut l = layer(NormMode::Bn, 1);
        l.set_moving(MovingStats::restore(0.1, vec![0.0], vec![1.0]).unwrap())
            .unwrap();
        let x = column(&[-2.0, 0.3, 4.0]);
        let y = l.forward_eval(&x).unwrap();
        assert!(max_diff(y.data(), x.data()) < 1e-4);
        l.beta_mut()[0] = 2.0;
        let shifted = l.forward_eval(&x).unwrap();
        for (a, b) in shifted.data().iter().zip(y.data()) {
            assert!((a - b - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mbn_with_empty_memory_matches_bn() {
        let x = Tensor::new(vec![4, 2], vec![1.0, -2.0, 0.5, 3.0, 2.0, 0.0, -1.0, 1.0]).unwrap();
        let mut bn = layer(NormMode::Bn, 2);
        let mut mbn = layer(NormMode::Mbn, 2);
        let a = bn.bn_forward_train(&x).unwrap();
        let b = mbn.mbn_forward(&x, true).unwrap();
        assert!(max_diff(a.data(), b.data()) <= 1e-12);
    }

    #[test]
    fn mbn_memory_shifts_center() {
        let mut cfg = NormConfig::with_mode(NormMode::Mbn);
        cfg.lambda = 1.0;
        cfg.eta = 1.0;
        let mut l = NormLayer::new(1, &cfg).unwrap();
        l.record(&BatchStats::new(vec![0.0], vec![1.0], 2).unwrap()).unwrap();
        let delta = 1e-3;
        let y = l.mbn_forward(&column(&[4.0 - delta, 4.0 + delta]), true).unwrap();
        let used = l.frozen().unwrap();
        assert!((used.mean[0] - 2.0).abs() < 1e-12);
        let expected = (4.0 - used.mean[0]) / (used.var[0] + 1e-5).sqrt();
        assert!(y.data().iter().all(|&v| v > 0.0));
        assert!(y.data().iter().all(|&v| (v - expected).abs() < 1e-3));
    }

    #[test]
    fn doubling_gamma_doubles_centered_output() {
        let x = column(&[1.0, 4.0, -2.0]);
        let mut l = layer(NormMode::Mbn, 1);
        l.beta_mut()[0] = 0.3;
        let y1 = l.mbn_forward(&x, false).unwrap();
        l.gamma_mut()[0] = 2.0;
        let y2 = l.mbn_forward(&x, false).unwrap();
        for (a, b) in y1.data().iter().zip(y2.data()) {
            assert!(((b - 0.3) - 2.0 * (a - 0.3)).abs() < 1e-12);
        }
    }

    #[test]
    fn mbn_backward_zero_and_collapse() {
        let x = Tensor::new(vec![3, 2], vec![0.1, 2.0, -1.0, 0.5, 4.0, 1.5]).unwrap();
        let mut cfg = NormConfig::with_mode(NormMode::Mbn);
        cfg.lambda = 0.0;
        let mut l = NormLayer::new(2, &cfg).unwrap();
        l.record(&BatchStats::new(vec![5.0, 5.0], vec![1.0, 1.0], 3).unwrap()).unwrap();
        l.mbn_forward(&x, true).unwrap();
        let g = l.mbn_backward(&Tensor::zeros(&[3, 2])).unwrap();
        assert!(g.grad_x.data().iter().all(|&v| v == 0.0));
        assert!(g.grad_gamma.iter().chain(&g.grad_beta).all(|&v| v == 0.0));

        let g = l.mbn_backward(&Tensor::full(&[3, 2], 1.0)).unwrap();
        assert!(g.grad_gamma.iter().all(|v| v.abs() < 1e-12));
        assert_eq!(g.grad_beta, vec![3.0, 3.0]);
    }

    #[test]
    fn backward_without_cache_fails() {
        let l = layer(NormMode::Mbn, 1);
        assert!(matches!(l.mbn_backward(&column(&[1.0])), Err(Error::State(_))));
        let mut l = layer(NormMode::Mbn, 1);
        l.mbn_forward(&column(&[1.0, 2.0]), true).unwrap();
        l.mbn_forward(&column(&[1.0, 2.0]), false).unwrap();
        assert!(l.cache().is_none());
    }

    #[test]
    fn mode_mismatch_is_rejected() {
        let mut l = layer(NormMode::Bn, 1);
        assert!(l.mbn_forward(&column(&[1.0, 2.0]), true).is_err());
        assert!(l.forward_train(&Tensor::zeros(&[2, 3])).is_err());
        assert!(l.forward_train(&Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn brn_clips_ratio_and_offset() {
        let mut cfg = NormConfig::with_mode(NormMode::Brn);
        cfg.r_max = 3.0;
        cfg.d_max = 5.0;
        cfg.eps = 1e-12;
        let mut l = NormLayer::new(1, &cfg).unwrap();
        l.set_moving(MovingStats::restore(0.1, vec![0.0], vec![1.0]).unwrap())
            .unwrap();
        // batch std 5 against moving std 1
        l.forward_train(&column(&[-5.0, 5.0])).unwrap();
        let (r, d) = l.cache().unwrap().correction.clone().unwrap();
        assert_eq!(r, vec![3.0]);
        assert_eq!(d, vec![0.0]);

        l.forward_train(&column(&[9.0, 11.0])).unwrap();
        let (r, d) = l.cache().unwrap().correction.clone().unwrap();
        assert!((r[0] - 1.0).abs() < 1e-9);
        assert_eq!(d, vec![5.0]);
    }

    #[test]
    fn brn_identity_bounds_match_bn() {
        let x = Tensor::new(vec![4, 2], vec![1.0, -2.0, 0.5, 3.0, 2.0, 0.0, -1.0, 1.0]).unwrap();
        let mut bn = layer(NormMode::Bn, 2);
        let mut brn = layer(NormMode::Brn, 2);
        brn.set_moving(MovingStats::restore(0.1, vec![3.0, -1.0], vec![4.0, 0.1]).unwrap())
            .unwrap();
        let a = bn.bn_forward_train(&x).unwrap();
        let b = brn.brn_forward_train(&x).unwrap();
        assert_eq!(a, b);
        let gy = Tensor::from_fn(&[4, 2], |i| (i as f64 * 0.7).sin());
        assert_eq!(bn.backward(&gy).unwrap(), brn.brn_backward(&gy).unwrap());
    }

    #[test]
    fn record_routes_to_store() {
        let s = BatchStats::new(vec![1.0], vec![2.0], 4).unwrap();
        let mut mbn = layer(NormMode::Mbn, 1);
        mbn.record(&s).unwrap();
        assert_eq!(mbn.memory().unwrap().len(), 1);
        let mut bn = layer(NormMode::Bn, 1);
        bn.record(&s).unwrap();
        assert!(bn.moving().unwrap().is_initialized());
        assert!(bn.record(&BatchStats::new(vec![1.0; 2], vec![1.0; 2], 1).unwrap()).is_err());
    }

    #[test]
    fn rank4_uses_spatial_positions() {
        let x = Tensor::from_fn(&[2, 3, 2, 2], |i| ((i * 7) % 5) as f64);
        let mut l = layer(NormMode::Bn, 3);
        let (y, stats) = l.forward_train(&x).unwrap();
        assert_eq!(stats.count, 8);
        let ys = BatchStats::from_activations(&y).unwrap();
        for c in 0..3 {
            assert!(ys.mean[c].abs() < 1e-12);
        }
    }
}
