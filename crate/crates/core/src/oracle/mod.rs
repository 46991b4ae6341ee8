//! Ground truth that does not share code paths with the layers it checks:
//! central finite differences, the sample-level pooled statistics, and a
//! tolerance comparator.

mod harness;

pub use harness::{
    check_network, check_norm_instance, GradCheck, GroupCheck, NormInstance, TOL_LAYER,
    TOL_NETWORK,
};

use crate::error::{Error, Result};
use crate::stats::Moments;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_REL_TOL: f64 = 1e-5;
pub const DEFAULT_ABS_TOL: f64 = 1e-8;

/// Richardson-extrapolated central-difference gradient of a scalar
/// function: `(4·D(s/2) - D(s)) / 3`, where `D(s)` is the central quotient
/// with step `s = h * max(1, |x_i|)`. Truncation error is `O(s⁴)`, which
/// keeps the estimate sharp on nearly degenerate batches where the
/// curvature is large.
pub fn fd_gradient<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::arg(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let xi = x.data()[i];
        let mut quotient = |step: f64| -> Result<f64> {
            probe.data_mut()[i] = xi + step;
            let up = f(&probe)?;
            probe.data_mut()[i] = xi - step;
            let down = f(&probe)?;
            probe.data_mut()[i] = xi;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Numeric(format!(
                    "function is not finite around coordinate {i}"
                )));
            }
            Ok((up - down) / (2.0 * step))
        };
        let step = h * xi.abs().max(1.0);
        let coarse = quotient(step)?;
        let fine = quotient(0.5 * step)?;
        grad.push((4.0 * fine - coarse) / 3.0);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Weighted pooled mean and population variance computed sample by sample:
/// every value of batch `i` counts with weight `weights[i]`.
///
/// Batches are rank 1 (one feature) or rank 2 (samples x features).
pub fn pooled_stats(batches: &[Tensor], weights: &[f64]) -> Result<Moments> {
    if batches.len() != weights.len() {
        return Err(Error::arg(format!(
            "{} batches but {} weights",
            batches.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::arg("weights must be finite and non-negative"));
    }
    let features = |t: &Tensor| match t.shape() {
        [_] => Ok(1),
        [_, f] => Ok(*f),
        s => Err(Error::arg(format!("batch must be rank 1 or 2, got shape {s:?}"))),
    };
    let Some(first) = batches.first() else {
        return Err(Error::arg("pooled statistics need at least one batch"));
    };
    let f = features(first)?;
    for b in batches {
        if features(b)? != f {
            return Err(Error::arg("batches disagree on feature count"));
        }
    }
    let mut total = 0.0;
    for (b, &w) in batches.iter().zip(weights) {
        total += w * (b.len() / f) as f64;
    }
    if !(total > 0.0) {
        return Err(Error::arg("weights are degenerate: total weighted count is zero"));
    }

    let mut mean = vec![0.0; f];
    for (b, &w) in batches.iter().zip(weights) {
        for (j, v) in b.data().iter().enumerate() {
            mean[j % f] += w * v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= total);
    let mut var = vec![0.0; f];
    for (b, &w) in batches.iter().zip(weights) {
        for (j, v) in b.data().iter().enumerate() {
            let d = v - mean[j % f];
            var[j % f] += w * d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= total);
    Ok(Moments { mean, var })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Offender {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub abs_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub passed: bool,
    pub failures: usize,
    pub max_abs_err: f64,
    /// `max |a - n| / (max(|a|, |n|) + abs_tol / rel_tol)`; at most `rel_tol`
    /// exactly when every element passes.
    pub max_rel_err: f64,
    /// Up to five elements with the largest tolerance excess, worst first.
    pub worst: Vec<Offender>,
}

/// Element `i` passes when `|a - n| <= abs_tol + rel_tol * max(|a|, |n|)`.
pub fn compare_grads(
    analytic: &Tensor,
    numeric: &Tensor,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<GradReport> {
    if analytic.shape() != numeric.shape() {
        return Err(Error::arg(format!(
            "cannot compare gradients of shapes {:?} and {:?}",
            analytic.shape(),
            numeric.shape()
        )));
    }
    let floor = if rel_tol > 0.0 { abs_tol / rel_tol } else { f64::INFINITY };
    let mut failures = 0;
    let mut max_abs_err: f64 = 0.0;
    let mut max_rel_err: f64 = 0.0;
    let mut scored = Vec::with_capacity(analytic.len());
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let err = (a - n).abs();
        let scale = a.abs().max(n.abs());
        let allowed = abs_tol + rel_tol * scale;
        if !(err <= allowed) {
            failures += 1;
        }
        max_abs_err = max_abs_err.max(err);
        if floor.is_finite() {
            max_rel_err = max_rel_err.max(err / (scale + floor));
        }
        scored.push((err - allowed, i, a, n, err));
    }
    scored.sort_by(|x, y| y.0.total_cmp(&x.0));
    let worst = scored
        .into_iter()
        .take(5)
        .map(|(_, index, analytic, numeric, abs_err)| Offender {
            index,
            analytic,
            numeric,
            abs_err,
        })
        .collect();
    Ok(GradReport {
        passed: failures == 0,
        failures,
        max_abs_err,
        max_rel_err,
        worst,
    })
}
