use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{compare_grads, fd_gradient, GradReport};
use crate::error::Result;
use crate::net::{softmax_xent, ForwardMode, Network};
use crate::norm::{NormConfig, NormLayer, NormMode};
use crate::stats::{BatchStats, MovingStats};
use crate::tensor::Tensor;

/// `(rel_tol, abs_tol)` for single-layer checks.
pub const TOL_LAYER: (f64, f64) = (1e-5, 1e-8);
/// `(rel_tol, abs_tol)` for whole-network checks.
pub const TOL_NETWORK: (f64, f64) = (1e-4, 1e-8);

#[derive(Debug, Clone)]
pub struct GroupCheck {
    pub name: String,
    pub report: GradReport,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheck {
    pub groups: Vec<GroupCheck>,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.report.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.report.max_rel_err)
            .fold(0.0, f64::max)
    }

    fn push(&mut self, name: &str, analytic: &Tensor, numeric: &Tensor, tol: (f64, f64)) -> Result<()> {
        self.groups.push(GroupCheck {
            name: name.to_string(),
            report: compare_grads(analytic, numeric, tol.0, tol.1)?,
        });
        Ok(())
    }
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// A randomly populated normalization layer with an input batch and an
/// upstream gradient.
#[derive(Debug, Clone)]
pub struct NormInstance {
    pub layer: NormLayer,
    pub x: Tensor,
    pub grad_y: Tensor,
}

impl NormInstance {
    /// `memory` is the number of stored entries for MBN/MovNorm; BRN gets
    /// random moving statistics and bounds so clipping is sometimes active.
    pub fn random<R: Rng>(
        mode: NormMode,
        batch: usize,
        features: usize,
        memory: usize,
        lambda: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let cfg = NormConfig {
            mode,
            lambda,
            memory: memory.max(1),
            ..NormConfig::default()
        };
        let mut layer = NormLayer::new(features, &cfg)?;
        for g in layer.gamma_mut() {
            *g = rng.random_range(0.5..1.5);
        }
        for b in layer.beta_mut() {
            *b = normal(rng);
        }
        let offsets: Vec<f64> = (0..features).map(|_| normal(rng)).collect();
        let scales: Vec<f64> = (0..features).map(|_| rng.random_range(0.5..2.0)).collect();
        match mode {
            NormMode::Mbn | NormMode::MovNorm => {
                for _ in 0..memory {
                    let mean = offsets.iter().map(|o| o + normal(rng)).collect();
                    let var = scales.iter().map(|s| s * s * rng.random_range(0.5..1.5)).collect();
                    layer.record(&BatchStats::new(mean, var, batch)?)?;
                }
            }
            NormMode::Brn => {
                let mean = offsets.iter().map(|o| o + normal(rng)).collect();
                let var = scales.iter().map(|s| s * s * rng.random_range(0.2..3.0)).collect();
                layer.set_moving(MovingStats::restore(cfg.theta, mean, var)?)?;
                layer.set_brn_bounds(rng.random_range(1.0..3.0), rng.random_range(0.0..2.0))?;
            }
            NormMode::Bn => {}
        }
        let x = Tensor::from_fn(&[batch, features], |i| {
            offsets[i % features] + scales[i % features] * normal(rng)
        });
        let grad_y = Tensor::from_fn(&[batch, features], |_| normal(rng));
        Ok(NormInstance { layer, x, grad_y })
    }
}

/// Compares the analytic backward of `inst.layer` against central
/// differences of `⟨grad_y, forward(x)⟩` in `x`, `γ` and `β`. Memory
/// entries, moving statistics and BRN's `(r, d)` are held fixed.
pub fn check_norm_instance(inst: &NormInstance, h: f64, tol: (f64, f64)) -> Result<GradCheck> {
    let mut layer = inst.layer.clone();
    layer.forward_train(&inst.x)?;
    let analytic = layer.backward(&inst.grad_y)?;
    let correction = layer.cache().and_then(|c| c.correction.clone());

    let base = inst.layer.clone();
    let gy = &inst.grad_y;
    let forward = move |l: &NormLayer, x: &Tensor| -> Result<f64> {
        let y = match &correction {
            Some((r, d)) => l.forward_with_correction(x, r, d)?,
            None => l.forward_stats(x)?.0,
        };
        y.dot(gy)
    };

    let mut out = GradCheck::default();
    let num_x = fd_gradient(|x| forward(&base, x), &inst.x, h)?;
    out.push("x", &analytic.grad_x, &num_x, tol)?;

    let gamma = Tensor::vector(base.gamma().to_vec());
    let num_gamma = fd_gradient(
        |g| {
            let mut l = base.clone();
            l.gamma_mut().copy_from_slice(g.data());
            forward(&l, &inst.x)
        },
        &gamma,
        h,
    )?;
    out.push("gamma", &Tensor::vector(analytic.grad_gamma.clone()), &num_gamma, tol)?;

    let beta = Tensor::vector(base.beta().to_vec());
    let num_beta = fd_gradient(
        |b| {
            let mut l = base.clone();
            l.beta_mut().copy_from_slice(b.data());
            forward(&l, &inst.x)
        },
        &beta,
        h,
    )?;
    out.push("beta", &Tensor::vector(analytic.grad_beta.clone()), &num_beta, tol)?;
    Ok(out)
}

/// Whole-network check of the softmax cross-entropy gradient with respect to
/// every parameter group and the input. Normalization statistics stores are
/// held fixed, so the check is exact for BN, MBN and MovNorm networks (and
/// for BRN only while its bounds make the correction an identity).
pub fn check_network(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    h: f64,
    tol: (f64, f64),
) -> Result<GradCheck> {
    let mut trained = net.clone();
    let out = trained.forward(x, ForwardMode::TrainGrad)?;
    let (_, grad_logits) = softmax_xent(&out.output, labels)?;
    let analytic = trained.backward(&grad_logits)?;

    let loss = |n: &Network, input: &Tensor| -> Result<f64> {
        let (logits, _, _) = n.stats_pass(input)?;
        Ok(softmax_xent(&logits, labels)?.0)
    };

    let mut report = GradCheck::default();
    let mut probe = net.clone();
    let params: Vec<(String, Vec<f64>)> = probe.param_values();
    for (k, (name, values)) in params.iter().enumerate() {
        let p = Tensor::vector(values.clone());
        let numeric = fd_gradient(
            |v| {
                let mut n = net.clone();
                n.params_mut()[k].values.copy_from_slice(v.data());
                loss(&n, x)
            },
            &p,
            h,
        )?;
        report.push(name, &Tensor::vector(analytic.params[k].clone()), &numeric, tol)?;
    }
    let numeric_x = fd_gradient(|v| loss(net, v), x, h)?;
    report.push("input", &analytic.input, &numeric_x, tol)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::DEFAULT_STEP;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn every_mode_passes_on_a_fixed_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for mode in NormMode::ALL {
            let inst = NormInstance::random(mode, 4, 3, 3, 0.9, &mut rng).unwrap();
            let check = check_norm_instance(&inst, DEFAULT_STEP, TOL_LAYER).unwrap();
            assert!(check.passed(), "{mode}: {check:?}");
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inst = NormInstance::random(NormMode::Mbn, 4, 2, 2, 0.5, &mut rng).unwrap();
        let mut layer = inst.layer.clone();
        layer.forward_train(&inst.x).unwrap();
        let mut analytic = layer.backward(&inst.grad_y).unwrap();
        analytic.grad_gamma[0] += 1e-3;
        let numeric = fd_gradient(
            |g| {
                let mut l = inst.layer.clone();
                l.gamma_mut().copy_from_slice(g.data());
                l.forward_stats(&inst.x)?.0.dot(&inst.grad_y)
            },
            &Tensor::vector(inst.layer.gamma().to_vec()),
            DEFAULT_STEP,
        )
        .unwrap();
        let r = compare_grads(&Tensor::vector(analytic.grad_gamma), &numeric, 1e-5, 1e-8).unwrap();
        assert!(!r.passed);
    }
}
