//! Numerical check of the regularizer gradient decompositions on seeded
//! random models and inputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck::{finite_difference_grad, relative_error, DEFAULT_STEP};
use crate::nn::{build_model, Checkpoint, ModelSpec};
use crate::objectives::{grad_decompose_self, grad_decompose_teach, r_self, r_teach, GradMap, DECOMPOSITION_TOLERANCE};
use crate::rng::{derive_seed, rng_for};
use crate::tensor::Tensor;

pub const FD_TOLERANCE: f64 = 1e-4;
/// Required share of triples with a nonzero self-reference gradient.
pub const MOVING_TARGET_SHARE: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub triples: usize,
    /// How many of the triples also get a finite-difference check.
    pub fd_triples: usize,
    pub batch: usize,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            triples: 100,
            fd_triples: 8,
            batch: 4,
            epsilon: 8.0 / 255.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PropositionReport {
    pub triples: usize,
    pub max_self_residual: f64,
    pub max_teach_reference: f64,
    pub max_teach_residual: f64,
    pub moving_target_share: f64,
    pub max_fd_rel_error: f64,
    pub failures: Vec<String>,
}

impl PropositionReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn specs() -> [ModelSpec; 2] {
    [
        ModelSpec::mlp(&[12, 6, 3], &[3, 2, 2]),
        ModelSpec::cnn(&[3, 2], 3, &[3, 2, 2]),
    ]
}

fn with_params(base: &Checkpoint, flat: &[Tensor]) -> Checkpoint {
    let mut m = base.clone();
    for (slot, t) in m.params.values_mut().zip(flat) {
        *slot = t.clone();
    }
    m
}

fn fd_error(total: &GradMap, model: &Checkpoint, f: impl Fn(&Checkpoint) -> Result<f64>) -> f64 {
    let params: Vec<Tensor> = model.params.values().cloned().collect();
    let fd = finite_difference_grad(|p| f(&with_params(model, p)).unwrap_or(f64::NAN), &params, DEFAULT_STEP);
    let analytic: Vec<f64> = total.values().flatten().copied().collect();
    let numeric: Vec<f64> = fd.into_iter().flatten().collect();
    relative_error(&analytic, &numeric, 1e-8)
}

/// Draws `cfg.triples` (model, x, x̂) triples and checks that the
/// self-anchored gradient splits additively, that the teacher-anchored
/// reference side is exactly zero, that the self-anchored reference side is
/// generically nonzero, and that totals agree with finite differences.
pub fn verify_proposition(cfg: &VerifyConfig) -> Result<PropositionReport> {
    if cfg.triples == 0 || cfg.batch == 0 {
        return Err(Error::InvalidConfig("verification needs at least one triple and one sample".into()));
    }
    let mut report = PropositionReport {
        triples: cfg.triples,
        ..Default::default()
    };
    let mut nonzero = 0usize;
    for t in 0..cfg.triples {
        let spec = &specs()[t % 2];
        let student = build_model(spec, derive_seed(cfg.seed, 3 * t as u64))?;
        let teacher = build_model(spec, derive_seed(cfg.seed, 3 * t as u64 + 1))?;
        let mut rng = rng_for(cfg.seed, 3 * t as u64 + 2);
        let mut shape = vec![cfg.batch];
        shape.extend_from_slice(&spec.input_shape);
        let n: usize = shape.iter().product();
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let x_hat: Vec<f64> = x
            .iter()
            .map(|&v| (v + rng.random_range(-cfg.epsilon..=cfg.epsilon)).clamp(0.0, 1.0))
            .collect();
        let x = Tensor::new(shape.clone(), x)?;
        let x_hat = Tensor::new(shape, x_hat)?;

        match grad_decompose_self(&student, &x, &x_hat) {
            Ok(d) => {
                report.max_self_residual = report.max_self_residual.max(d.residual());
                if d.reference_max_abs() > 0.0 {
                    nonzero += 1;
                }
                if t < cfg.fd_triples {
                    let e = fd_error(&d.total, &student, |m| r_self(m, &x, &x_hat));
                    report.max_fd_rel_error = report.max_fd_rel_error.max(e);
                }
            }
            Err(Error::Verification(msg)) => report.failures.push(format!("triple {t}: {msg}")),
            Err(e) => return Err(e),
        }
        match grad_decompose_teach(&teacher, &student, &x, &x_hat) {
            Ok(d) => {
                report.max_teach_reference = report.max_teach_reference.max(d.reference_max_abs());
                report.max_teach_residual = report.max_teach_residual.max(d.residual());
                if t < cfg.fd_triples {
                    let e = fd_error(&d.total, &student, |m| r_teach(&teacher, m, &x, &x_hat));
                    report.max_fd_rel_error = report.max_fd_rel_error.max(e);
                }
            }
            Err(Error::Verification(msg)) => report.failures.push(format!("triple {t}: {msg}")),
            Err(e) => return Err(e),
        }
    }
    report.moving_target_share = nonzero as f64 / cfg.triples as f64;
    if report.max_self_residual > DECOMPOSITION_TOLERANCE {
        report.failures.push(format!("self residual {:e}", report.max_self_residual));
    }
    if report.moving_target_share < MOVING_TARGET_SHARE {
        report
            .failures
            .push(format!("self reference side nonzero on only {:.0}% of triples", 100.0 * report.moving_target_share));
    }
    if !(report.max_fd_rel_error < FD_TOLERANCE) {
        report.failures.push(format!("finite-difference relative error {:e}", report.max_fd_rel_error));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_run_passes() {
        let cfg = VerifyConfig {
            triples: 6,
            fd_triples: 2,
            ..Default::default()
        };
        let r = verify_proposition(&cfg).unwrap();
        assert!(r.passed(), "{:?}", r.failures);
        assert_eq!(r.max_teach_reference, 0.0);
        assert!(r.max_self_residual < 1e-6);
    }
}
