//! Losses for supervised and label-free adversarial adaptation, and the
//! branch-wise gradient decomposition of the two robustness regularizers.
//!
//! All divergences are taken between softmax distributions at temperature 1.
//! The inner maximizer `x_hat` always enters as data: gradients are taken at
//! a fixed perturbation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BnMode, BoundParams, Checkpoint};
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::Tensor;

/// Probability floor applied inside KL logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Largest admissible per-coordinate residual of the self-regularizer split.
pub const DECOMPOSITION_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct LogitVector(pub Vec<f64>);

/// A point on the probability simplex; only constructed by [`softmax`].
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn probs(&self) -> &[f64] {
        &self.0
    }
}

/// Max-subtracted softmax.
pub fn softmax(z: &LogitVector) -> ProbVector {
    let m = z.0.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.0.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    ProbVector(e.into_iter().map(|v| v / s).collect())
}

/// `Σ pᵢ ln(pᵢ / max(qᵢ, τ))` with `0 · ln(0 / ·) = 0`.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> f64 {
    p.0.iter()
        .zip(&q.0)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(PROB_FLOOR).ln()))
        .sum()
}

pub fn log_softmax(z: &LogitVector) -> Vec<f64> {
    let m = z.0.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.0.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.0.iter().map(|v| v - lse).collect()
}

pub fn cross_entropy(z: &LogitVector, y: usize) -> Result<f64> {
    if y >= z.0.len() {
        return Err(Error::LabelOutOfRange {
            label: y,
            num_classes: z.0.len(),
        });
    }
    Ok(-log_softmax(z)[y])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    PgdAt,
    Trades,
    TradesU,
    Tgra,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::PgdAt, Method::Trades, Method::TradesU, Method::Tgra];

    pub fn is_supervised(self) -> bool {
        matches!(self, Method::PgdAt | Method::Trades)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::PgdAt => "pgd_at",
            Method::Trades => "trades",
            Method::TradesU => "trades_u",
            Method::Tgra => "tgra",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub method: Method,
    pub beta: f64,
}

impl MethodConfig {
    pub fn new(method: Method, beta: f64) -> Result<Self> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::InvalidConfig(format!("beta must be a nonnegative real, got {beta}")));
        }
        Ok(Self { method, beta })
    }

    /// Labels must be present exactly when the method is supervised.
    pub fn check_labels(&self, labels: Option<&[usize]>) -> Result<()> {
        match (self.method.is_supervised(), labels.is_some()) {
            (true, false) => Err(Error::LabelPolicy(format!("{} requires labels", self.method.name()))),
            (false, true) => Err(Error::LabelPolicy(format!("{} must not receive labels", self.method.name()))),
            _ => Ok(()),
        }
    }
}

/// `mean_rows Σₖ exp(ref)·(ref − max(other, ln τ))` for row-wise log-probabilities.
pub fn kl_on_tape(tape: &mut Tape, reference_logp: Var, other_logp: Var) -> Result<Var> {
    let n = tape.shape(reference_logp)[0];
    let floored = tape.clamp_min(other_logp, PROB_FLOOR.ln())?;
    let p = tape.exp(reference_logp)?;
    let diff = tape.sub(reference_logp, floored)?;
    let terms = tape.mul(p, diff)?;
    let total = tape.sum(terms)?;
    Ok(tape.scale(total, 1.0 / n as f64)?)
}

/// Mean cross-entropy of `logits` against `labels`.
pub fn cross_entropy_on_tape(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let k = tape.shape(logits)[1];
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            num_classes: k,
        });
    }
    let logp = tape.log_softmax(logits)?;
    let picked = tape.gather(logp, labels)?;
    let m = tape.mean(picked)?;
    Ok(tape.scale(m, -1.0)?)
}

/// Student log-probabilities on `x`, with any batch statistics collected into `stats`.
pub fn student_log_probs(
    tape: &mut Tape,
    student: &Checkpoint,
    params: &BoundParams,
    x: &Tensor,
    mode: BnMode,
    stats: &mut Vec<(String, BatchStats)>,
) -> Result<Var> {
    let xv = tape.constant(x.clone())?;
    let out = student.forward_on_tape(tape, params, xv, mode)?;
    stats.extend(out.batch_stats);
    Ok(tape.log_softmax(out.logits)?)
}

/// Teacher log-probabilities with frozen statistics, detached from the tape.
pub fn reference_log_probs(tape: &mut Tape, teacher: &Checkpoint, params: &BoundParams, x: &Tensor) -> Result<Var> {
    let xv = tape.constant(x.clone())?;
    let out = teacher.forward_on_tape(tape, params, xv, BnMode::FrozenEval)?;
    let logp = tape.log_softmax(out.logits)?;
    Ok(tape.detach(logp))
}

/// Tape nodes of a composite objective.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub accuracy: Var,
    pub robustness: Var,
    pub total: Var,
}

/// Inputs shared by every composite objective.
pub struct LossInputs<'a> {
    pub teacher: &'a Checkpoint,
    pub student: &'a Checkpoint,
    pub x: &'a Tensor,
    pub x_hat: &'a Tensor,
    pub labels: Option<&'a [usize]>,
    /// BN mode for the student's passes; the teacher is always frozen.
    pub student_mode: BnMode,
}

/// A recorded composite objective with the student's parameters bound as leaves.
pub struct BuiltLoss {
    pub tape: Tape,
    pub terms: LossTerms,
    pub student_params: BoundParams,
    pub batch_stats: Vec<(String, BatchStats)>,
}

impl BuiltLoss {
    pub fn value(&self, v: Var) -> f64 {
        self.tape.value(v).data()[0]
    }

    /// Gradient of the total objective per student parameter.
    pub fn student_gradients(&self) -> Result<BTreeMap<String, Vec<f64>>> {
        let g = self.tape.backward(self.terms.total)?;
        Ok(self.student_params.iter().map(|(n, &v)| (n.clone(), g.wrt(v))).collect())
    }
}

/// Builds `accuracy + β · robustness` for `cfg.method`:
///
/// | method   | accuracy          | robustness         |
/// |----------|-------------------|--------------------|
/// | pgd_at   | CE(f(x), y)       | CE(f(x̂), y)        |
/// | trades   | CE(f(x), y)       | KL(p(x) ‖ p(x̂))    |
/// | trades_u | KL(q(x) ‖ p(x))   | KL(p(x) ‖ p(x̂))    |
/// | tgra     | KL(q(x) ‖ p(x))   | KL(q(x) ‖ p(x̂))    |
pub fn composite_loss(cfg: &MethodConfig, inputs: &LossInputs<'_>) -> Result<BuiltLoss> {
    cfg.check_labels(inputs.labels)?;
    let mut tape = Tape::new();
    let student_params = inputs.student.bind(&mut tape, true)?;
    let mut stats = Vec::new();
    let mode = inputs.student_mode;

    let student_x = tape.constant(inputs.x.clone())?;
    let clean = inputs.student.forward_on_tape(&mut tape, &student_params, student_x, mode)?;
    stats.extend(clean.batch_stats);
    let student_xh = tape.constant(inputs.x_hat.clone())?;
    let adv = inputs.student.forward_on_tape(&mut tape, &student_params, student_xh, mode)?;
    stats.extend(adv.batch_stats);

    let terms = match cfg.method {
        Method::PgdAt | Method::Trades => {
            let labels = inputs.labels.expect("checked above");
            let accuracy = cross_entropy_on_tape(&mut tape, clean.logits, labels)?;
            let robustness = if cfg.method == Method::PgdAt {
                cross_entropy_on_tape(&mut tape, adv.logits, labels)?
            } else {
                let lp = tape.log_softmax(clean.logits)?;
                let lq = tape.log_softmax(adv.logits)?;
                kl_on_tape(&mut tape, lp, lq)?
            };
            (accuracy, robustness)
        }
        Method::TradesU | Method::Tgra => {
            let teacher_params = inputs.teacher.bind(&mut tape, false)?;
            let q = reference_log_probs(&mut tape, inputs.teacher, &teacher_params, inputs.x)?;
            let lp = tape.log_softmax(clean.logits)?;
            let lq = tape.log_softmax(adv.logits)?;
            let accuracy = kl_on_tape(&mut tape, q, lp)?;
            let anchor = if cfg.method == Method::Tgra { q } else { lp };
            let robustness = kl_on_tape(&mut tape, anchor, lq)?;
            (accuracy, robustness)
        }
    };
    let weighted = tape.scale(terms.1, cfg.beta)?;
    let total = tape.add(terms.0, weighted)?;
    Ok(BuiltLoss {
        tape,
        terms: LossTerms {
            accuracy: terms.0,
            robustness: terms.1,
            total,
        },
        student_params,
        batch_stats: stats,
    })
}

/// `KL(p_θ(x) ‖ p_θ(x̂))` with both branches live, frozen statistics.
pub fn r_self(student: &Checkpoint, x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let params = student.bind(&mut tape, true)?;
    let mut stats = Vec::new();
    let lp = student_log_probs(&mut tape, student, &params, x, BnMode::FrozenEval, &mut stats)?;
    let lq = student_log_probs(&mut tape, student, &params, x_hat, BnMode::FrozenEval, &mut stats)?;
    let kl = kl_on_tape(&mut tape, lp, lq)?;
    Ok(tape.value(kl).data()[0])
}

/// `KL(q(x) ‖ p_θ(x̂))` with the teacher branch detached, frozen statistics.
pub fn r_teach(teacher: &Checkpoint, student: &Checkpoint, x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let tp = teacher.bind(&mut tape, false)?;
    let sp = student.bind(&mut tape, true)?;
    let q = reference_log_probs(&mut tape, teacher, &tp, x)?;
    let mut stats = Vec::new();
    let lq = student_log_probs(&mut tape, student, &sp, x_hat, BnMode::FrozenEval, &mut stats)?;
    let kl = kl_on_tape(&mut tape, q, lq)?;
    Ok(tape.value(kl).data()[0])
}

pub type GradMap = BTreeMap<String, Vec<f64>>;

/// Branch-wise split of a regularizer gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct GradDecomposition {
    /// Gradient flowing through the clean (reference) branch only.
    pub reference_side: GradMap,
    /// Gradient flowing through the perturbed branch only.
    pub adversarial_side: GradMap,
    /// Gradient with every branch live.
    pub total: GradMap,
}

impl GradDecomposition {
    /// `max |total − (reference + adversarial)|` over all coordinates.
    pub fn residual(&self) -> f64 {
        self.total
            .iter()
            .flat_map(|(n, t)| {
                let r = &self.reference_side[n];
                let a = &self.adversarial_side[n];
                t.iter().zip(r).zip(a).map(|((t, r), a)| (t - (r + a)).abs())
            })
            .fold(0.0, f64::max)
    }

    pub fn reference_max_abs(&self) -> f64 {
        max_abs(&self.reference_side)
    }

    pub fn total_max_abs(&self) -> f64 {
        max_abs(&self.total)
    }
}

pub fn max_abs(m: &GradMap) -> f64 {
    m.values().flatten().fold(0.0, |a, v| a.max(v.abs()))
}

fn grads_for(tape: &Tape, loss: Var, params: &BoundParams) -> Result<GradMap> {
    let g = tape.backward(loss)?;
    Ok(params.iter().map(|(n, &v)| (n.clone(), g.wrt(v))).collect())
}

/// Splits `∇θ KL(p_θ(x) ‖ p_θ(x̂))` into its reference and adversarial
/// branches by detaching one side at a time. Fails when the two sides do not
/// add up to the total within [`DECOMPOSITION_TOLERANCE`].
pub fn grad_decompose_self(student: &Checkpoint, x: &Tensor, x_hat: &Tensor) -> Result<GradDecomposition> {
    let mut tape = Tape::new();
    let params = student.bind(&mut tape, true)?;
    let mut stats = Vec::new();
    let lp = student_log_probs(&mut tape, student, &params, x, BnMode::FrozenEval, &mut stats)?;
    let lq = student_log_probs(&mut tape, student, &params, x_hat, BnMode::FrozenEval, &mut stats)?;
    let lp_fixed = tape.detach(lp);
    let lq_fixed = tape.detach(lq);
    let total = kl_on_tape(&mut tape, lp, lq)?;
    let reference = kl_on_tape(&mut tape, lp, lq_fixed)?;
    let adversarial = kl_on_tape(&mut tape, lp_fixed, lq)?;
    let d = GradDecomposition {
        reference_side: grads_for(&tape, reference, &params)?,
        adversarial_side: grads_for(&tape, adversarial, &params)?,
        total: grads_for(&tape, total, &params)?,
    };
    let r = d.residual();
    if r > DECOMPOSITION_TOLERANCE {
        return Err(Error::Verification(format!("self-regularizer decomposition residual {r:e}")));
    }
    Ok(d)
}

/// Same split for `∇θ KL(q(x) ‖ p_θ(x̂))`. The reference branch carries no
/// student parameters, so its gradient must be exactly zero.
pub fn grad_decompose_teach(teacher: &Checkpoint, student: &Checkpoint, x: &Tensor, x_hat: &Tensor) -> Result<GradDecomposition> {
    let mut tape = Tape::new();
    let tp = teacher.bind(&mut tape, false)?;
    let params = student.bind(&mut tape, true)?;
    let q = reference_log_probs(&mut tape, teacher, &tp, x)?;
    let mut stats = Vec::new();
    let lq = student_log_probs(&mut tape, student, &params, x_hat, BnMode::FrozenEval, &mut stats)?;
    let lq_fixed = tape.detach(lq);
    let total = kl_on_tape(&mut tape, q, lq)?;
    let reference = kl_on_tape(&mut tape, q, lq_fixed)?;
    let q_fixed = tape.detach(q);
    let adversarial = kl_on_tape(&mut tape, q_fixed, lq)?;
    let d = GradDecomposition {
        reference_side: grads_for(&tape, reference, &params)?,
        adversarial_side: grads_for(&tape, adversarial, &params)?,
        total: grads_for(&tape, total, &params)?,
    };
    let r = d.reference_max_abs();
    if r != 0.0 {
        return Err(Error::Verification(format!("teacher-anchored reference side is nonzero ({r:e})")));
    }
    if d.residual() > DECOMPOSITION_TOLERANCE {
        return Err(Error::Verification("teacher-anchored total differs from its adversarial side".into()));
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_model, fork_teacher_student, ModelSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn perturb(x: &Tensor, eps: f64, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = x.data().iter().map(|v| v + rng.random_range(-eps..eps)).collect();
        Tensor::new(x.shape().to_vec(), data).unwrap()
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&LogitVector(vec![0.0, 0.0])).probs(), &[0.5, 0.5]);
        let p = softmax(&LogitVector(vec![1000.0, 1000.0 + 3f64.ln()]));
        assert!((p.probs()[0] - 0.25).abs() < 1e-12);
        assert!((p.probs()[1] - 0.75).abs() < 1e-12);
        let z = LogitVector(vec![0.3, -1.2, 2.0]);
        let shifted = LogitVector(z.0.iter().map(|v| v + 17.5).collect());
        let (a, b) = (softmax(&z), softmax(&shifted));
        assert!(a.probs().iter().zip(b.probs()).all(|(x, y)| (x - y).abs() < 1e-15));
        assert!((a.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_examples() {
        let half = softmax(&LogitVector(vec![0.0, 0.0]));
        assert_eq!(kl_divergence(&half, &half), 0.0);
        let q = softmax(&LogitVector(vec![0.0, (1.0f64 / 9.0).ln()]));
        assert!((q.probs()[0] - 0.9).abs() < 1e-15);
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((kl_divergence(&half, &q) - expected).abs() < 1e-12);
        assert!((expected - 0.5 * (25.0f64 / 9.0).ln()).abs() < 1e-12);
        let one_hot = ProbVector(vec![1.0, 0.0]);
        assert!((kl_divergence(&one_hot, &half) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(kl_divergence(&half, &one_hot).is_finite());
    }

    #[test]
    fn kl_is_asymmetric() {
        let p = softmax(&LogitVector(vec![2.0, 0.0, -1.0]));
        let q = softmax(&LogitVector(vec![0.0, 0.5, 0.5]));
        assert!((kl_divergence(&p, &q) - kl_divergence(&q, &p)).abs() > 1e-3);
    }

    #[test]
    fn cross_entropy_examples() {
        let ce = cross_entropy(&LogitVector(vec![0.0, 0.0]), 0).unwrap();
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(cross_entropy(&LogitVector(vec![50.0, 0.0, 0.0]), 0).unwrap() < 1e-6);
        assert!(matches!(
            cross_entropy(&LogitVector(vec![0.0, 0.0]), 2),
            Err(Error::LabelOutOfRange { .. })
        ));
        let z = LogitVector(vec![0.4, -0.7, 1.3]);
        let p = softmax(&z);
        assert!((cross_entropy(&z, 2).unwrap() + p.probs()[2].ln()).abs() < 1e-14);
    }

    fn tiny() -> Checkpoint {
        build_model(&ModelSpec::mlp(&[3, 5, 3], &[3]), 4).unwrap()
    }

    #[test]
    fn r_self_zero_at_identity_and_matches_kl() {
        let m = tiny();
        let x = batch(2, 3, 1);
        assert!(r_self(&m, &x, &x).unwrap().abs() < 1e-15);
        let xh = perturb(&x, 0.2, 2);
        let (za, zb) = (m.logits(&x).unwrap(), m.logits(&xh).unwrap());
        let oracle: f64 = (0..2)
            .map(|r| {
                let p = softmax(&LogitVector(za.row(r).into_data()));
                let q = softmax(&LogitVector(zb.row(r).into_data()));
                kl_divergence(&p, &q)
            })
            .sum::<f64>()
            / 2.0;
        assert!((r_self(&m, &x, &xh).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn r_teach_matches_kl_and_vanishes_at_identity() {
        let (teacher, student) = fork_teacher_student(&tiny());
        let x = batch(3, 3, 5);
        assert!(r_teach(&teacher, &student, &x, &x).unwrap().abs() < 1e-15);
        let other = build_model(&ModelSpec::mlp(&[3, 5, 3], &[3]), 9).unwrap();
        let xh = perturb(&x, 0.1, 6);
        let (zt, zs) = (other.logits(&x).unwrap(), student.logits(&xh).unwrap());
        let oracle: f64 = (0..3)
            .map(|r| {
                kl_divergence(
                    &softmax(&LogitVector(zt.row(r).into_data())),
                    &softmax(&LogitVector(zs.row(r).into_data())),
                )
            })
            .sum::<f64>()
            / 3.0;
        assert!((r_teach(&other, &student, &x, &xh).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn r_teach_never_reaches_teacher_parameters() {
        let teacher = build_model(&ModelSpec::mlp(&[3, 5, 3], &[3]), 1).unwrap();
        let student = tiny();
        let x = batch(4, 3, 0);
        let xh = perturb(&x, 0.1, 1);
        let mut tape = Tape::new();
        let tp = teacher.bind(&mut tape, true).unwrap();
        let sp = student.bind(&mut tape, true).unwrap();
        let q = reference_log_probs(&mut tape, &teacher, &tp, &x).unwrap();
        let mut stats = Vec::new();
        let lq = student_log_probs(&mut tape, &student, &sp, &xh, BnMode::FrozenEval, &mut stats).unwrap();
        let kl = kl_on_tape(&mut tape, q, lq).unwrap();
        let g = tape.backward(kl).unwrap();
        for (_, &v) in tp.iter() {
            assert!(g.wrt(v).iter().all(|&x| x == 0.0));
        }
        assert!(sp.iter().any(|(_, &v)| g.wrt(v).iter().any(|&x| x != 0.0)));
    }

    #[test]
    fn label_policy() {
        let m = tiny();
        let x = batch(2, 3, 0);
        let inputs = |labels| LossInputs {
            teacher: &m,
            student: &m,
            x: &x,
            x_hat: &x,
            labels,
            student_mode: BnMode::FrozenEval,
        };
        let y = [0usize, 1];
        for method in Method::ALL {
            let cfg = MethodConfig::new(method, 6.0).unwrap();
            let with = composite_loss(&cfg, &inputs(Some(&y)));
            let without = composite_loss(&cfg, &inputs(None));
            if method.is_supervised() {
                assert!(with.is_ok());
                assert!(matches!(without, Err(Error::LabelPolicy(_))));
            } else {
                assert!(matches!(with, Err(Error::LabelPolicy(_))));
                assert!(without.is_ok());
            }
        }
        assert!(MethodConfig::new(Method::Tgra, -1.0).is_err());
    }

    #[test]
    fn tgra_with_zero_beta_is_distillation() {
        let teacher = build_model(&ModelSpec::mlp(&[3, 5, 3], &[3]), 2).unwrap();
        let student = tiny();
        let x = batch(3, 3, 0);
        let xh = perturb(&x, 0.1, 3);
        let cfg = MethodConfig::new(Method::Tgra, 0.0).unwrap();
        let built = composite_loss(
            &cfg,
            &LossInputs {
                teacher: &teacher,
                student: &student,
                x: &x,
                x_hat: &xh,
                labels: None,
                student_mode: BnMode::FrozenEval,
            },
        )
        .unwrap();
        let distill = r_teach(&teacher, &student, &x, &x).unwrap();
        assert!((built.value(built.terms.total) - distill).abs() < 1e-14);
    }

    #[test]
    fn trades_u_and_tgra_agree_in_value_at_fork() {
        let (teacher, student) = fork_teacher_student(&tiny());
        let x = batch(4, 3, 11);
        let xh = perturb(&x, 0.05, 12);
        let value = |method| {
            let built = composite_loss(
                &MethodConfig::new(method, 6.0).unwrap(),
                &LossInputs {
                    teacher: &teacher,
                    student: &student,
                    x: &x,
                    x_hat: &xh,
                    labels: None,
                    student_mode: BnMode::FrozenEval,
                },
            )
            .unwrap();
            built.value(built.terms.total)
        };
        assert!((value(Method::TradesU) - value(Method::Tgra)).abs() < 1e-14);
    }

    #[test]
    fn decomposition_on_tiny_linear_model() {
        let m = build_model(&ModelSpec::mlp(&[2, 2], &[2]), 3).unwrap();
        let x = Tensor::new(vec![1, 2], vec![0.2, 0.7]).unwrap();
        let xh = Tensor::new(vec![1, 2], vec![0.25, 0.65]).unwrap();
        let d = grad_decompose_self(&m, &x, &xh).unwrap();
        assert!(d.residual() < 1e-6);
        assert!(d.reference_max_abs() > 0.0);
        let same = grad_decompose_self(&m, &x, &x).unwrap();
        assert!(same.total_max_abs() < 1e-15);
        let teach = grad_decompose_teach(&m, &m, &x, &x).unwrap();
        assert!(teach.total_max_abs() < 1e-15);
        assert_eq!(teach.reference_max_abs(), 0.0);
    }
}
