//! L∞ attacks: projected sign-gradient ascent with pluggable objectives, a
//! score-only random square search, and the ball/box projection both share.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{argmax_rows, BnMode, Checkpoint};
use crate::objectives::{cross_entropy_on_tape, kl_on_tape, Method, MethodConfig};
use crate::rng::rng_for;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AttackInit {
    /// Start at the clean input.
    None,
    /// Uniform noise over the whole ε-ball.
    UniformBall,
    /// Small Gaussian jitter; the KL objectives have zero gradient at `x̂ = x`.
    Gaussian { std: f64 },
}

/// L∞ threat model intersected with a valid value box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThreatModel {
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub init: AttackInit,
    pub low: f64,
    pub high: f64,
}

impl ThreatModel {
    /// Inner maximization used while training: ε = 8/255, α = 2/255, 5 steps.
    pub fn training() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            alpha: 2.0 / 255.0,
            steps: 5,
            init: AttackInit::Gaussian { std: 0.001 },
            low: 0.0,
            high: 1.0,
        }
    }

    /// PGD-20 evaluation attack with a uniform random start.
    pub fn evaluation() -> Self {
        Self {
            steps: 20,
            init: AttackInit::UniformBall,
            ..Self::training()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be nonnegative, got {}", self.epsilon));
        }
        if self.epsilon > 0.0 && !(self.alpha > 0.0 && self.alpha <= 2.0 * self.epsilon) {
            return bad(format!("alpha must lie in (0, 2ε], got {} for ε={}", self.alpha, self.epsilon));
        }
        if !(self.low < self.high) {
            return bad(format!("value box [{}, {}] is empty", self.low, self.high));
        }
        if let AttackInit::Gaussian { std } = self.init {
            if !(std >= 0.0) {
                return bad(format!("init std must be nonnegative, got {std}"));
            }
        }
        Ok(())
    }
}

/// Clamps `x_hat` elementwise into `[x − ε, x + ε] ∩ [low, high]`.
pub fn project_linf_box(x_hat: &Tensor, x: &Tensor, tm: &ThreatModel) -> Tensor {
    assert_eq!(x_hat.shape(), x.shape(), "projection operands must share a shape");
    let data = x_hat
        .data()
        .iter()
        .zip(x.data())
        .map(|(&v, &c)| v.max(c - tm.epsilon).min(c + tm.epsilon).max(tm.low).min(tm.high))
        .collect();
    Tensor::new(x_hat.shape().to_vec(), data).expect("same shape")
}

/// True when every coordinate of `x_hat` is inside the ball-box intersection
/// (up to `slack` for accumulated rounding in the ball bound).
pub fn within_ball_box(x_hat: &Tensor, x: &Tensor, tm: &ThreatModel, slack: f64) -> bool {
    x_hat.shape() == x.shape()
        && x_hat.data().iter().zip(x.data()).all(|(&v, &c)| {
            (v - c).abs() <= tm.epsilon + slack && v >= tm.low && v <= tm.high
        })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectiveKind {
    CeTrueLabel,
    KlFromStudentClean,
    KlFromTeacherClean,
}

/// What the attack ascends. Reference distributions are captured once, before
/// the first step, and never recomputed.
#[derive(Clone, Debug)]
pub struct AttackObjective {
    kind: ObjectiveKind,
    labels: Vec<usize>,
    reference_logp: Option<Tensor>,
}

fn log_softmax_rows(logits: &Tensor) -> Tensor {
    let k = logits.row_len();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

impl AttackObjective {
    pub fn ce_true_label(labels: &[usize]) -> Self {
        Self {
            kind: ObjectiveKind::CeTrueLabel,
            labels: labels.to_vec(),
            reference_logp: None,
        }
    }

    pub fn kl_from_student_clean(student: &Checkpoint, x: &Tensor) -> Result<Self> {
        Ok(Self {
            kind: ObjectiveKind::KlFromStudentClean,
            labels: Vec::new(),
            reference_logp: Some(log_softmax_rows(&student.logits(x)?)),
        })
    }

    pub fn kl_from_teacher_clean(teacher: &Checkpoint, x: &Tensor) -> Result<Self> {
        Ok(Self {
            kind: ObjectiveKind::KlFromTeacherClean,
            labels: Vec::new(),
            reference_logp: Some(log_softmax_rows(&teacher.logits(x)?)),
        })
    }

    pub fn kind(&self) -> ObjectiveKind {
        self.kind
    }

    /// Frozen reference log-probabilities for the KL objectives.
    pub fn reference(&self) -> Option<&Tensor> {
        self.reference_logp.as_ref()
    }

    /// Objective value and its gradient w.r.t. `x_hat`, model statistics frozen.
    pub fn value_and_grad(&self, model: &Checkpoint, x_hat: &Tensor) -> Result<(f64, Tensor)> {
        let mut tape = Tape::new();
        let params = model.bind(&mut tape, false)?;
        let xv = tape.leaf(x_hat.clone())?;
        let out = model.forward_on_tape(&mut tape, &params, xv, BnMode::FrozenEval)?;
        let loss = match &self.reference_logp {
            None => cross_entropy_on_tape(&mut tape, out.logits, &self.labels)?,
            Some(reference) => {
                let r = tape.constant(reference.clone())?;
                let lq = tape.log_softmax(out.logits)?;
                kl_on_tape(&mut tape, r, lq)?
            }
        };
        let g = tape.backward(loss)?;
        let grad = Tensor::new(x_hat.shape().to_vec(), g.wrt(xv))?;
        Ok((tape.value(loss).data()[0], grad))
    }
}

fn initial_point(x: &Tensor, tm: &ThreatModel, rng: &mut impl Rng) -> Tensor {
    let start = match tm.init {
        AttackInit::None => x.clone(),
        AttackInit::UniformBall => {
            let data = x
                .data()
                .iter()
                .map(|&v| if tm.epsilon > 0.0 { v + rng.random_range(-tm.epsilon..=tm.epsilon) } else { v })
                .collect();
            Tensor::new(x.shape().to_vec(), data).expect("same shape")
        }
        AttackInit::Gaussian { std } => {
            let normal = Normal::new(0.0, std).expect("validated std");
            let data = x.data().iter().map(|&v| v + normal.sample(rng)).collect();
            Tensor::new(x.shape().to_vec(), data).expect("same shape")
        }
    };
    project_linf_box(&start, x, tm)
}

/// `x̂ ← Π(x̂ + α · sign ∇ₓ̂ L(x̂))` for `tm.steps` steps on `model` with
/// frozen statistics. Deterministic in `seed`.
pub fn pgd_attack(model: &Checkpoint, x: &Tensor, obj: &AttackObjective, tm: &ThreatModel, seed: u64) -> Result<Tensor> {
    tm.validate()?;
    let mut rng = rng_for(seed, 0);
    let mut x_hat = initial_point(x, tm, &mut rng);
    if tm.epsilon == 0.0 {
        return Ok(x_hat);
    }
    for step in 0..tm.steps {
        let (_, grad) = obj.value_and_grad(model, &x_hat)?;
        if !grad.all_finite() {
            return Err(Error::Verification(format!("non-finite attack gradient at step {step}")));
        }
        let data = x_hat
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&v, &g)| v + tm.alpha * sign(g))
            .collect();
        x_hat = project_linf_box(&Tensor::new(x.shape().to_vec(), data)?, x, tm);
    }
    Ok(x_hat)
}

fn sign(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// The objective each method's inner maximization ascends.
pub fn inner_objective(
    cfg: &MethodConfig,
    teacher: &Checkpoint,
    student: &Checkpoint,
    x: &Tensor,
    labels: Option<&[usize]>,
) -> Result<AttackObjective> {
    cfg.check_labels(labels)?;
    match cfg.method {
        Method::PgdAt => Ok(AttackObjective::ce_true_label(labels.expect("checked"))),
        Method::Trades | Method::TradesU => AttackObjective::kl_from_student_clean(student, x),
        Method::Tgra => AttackObjective::kl_from_teacher_clean(teacher, x),
    }
}

/// Crafts the training perturbation for `cfg.method` against `student`.
pub fn craft_inner_max(
    cfg: &MethodConfig,
    teacher: &Checkpoint,
    student: &Checkpoint,
    x: &Tensor,
    labels: Option<&[usize]>,
    tm: &ThreatModel,
    seed: u64,
) -> Result<Tensor> {
    let obj = inner_objective(cfg, teacher, student, x, labels)?;
    pgd_attack(student, x, &obj, tm, seed)
}

/// Black-box access: class scores for a batch, nothing else.
pub trait ScoreOracle {
    fn scores(&self, batch: &Tensor) -> Result<Tensor>;
}

impl ScoreOracle for Checkpoint {
    fn scores(&self, batch: &Tensor) -> Result<Tensor> {
        self.logits(batch)
    }
}

#[derive(Clone, Debug)]
pub struct SquareOutcome {
    pub x_adv: Tensor,
    /// Oracle queries spent per sample.
    pub queries: Vec<usize>,
}

/// `z_y − max_{j≠y} z_j`; negative once the sample is misclassified.
fn margin(scores: &[f64], y: usize) -> f64 {
    let other = scores
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != y)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    scores[y] - other
}

/// `(channels, height, width)` of one sample; flat inputs are one row.
fn image_layout(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [_, c, h, w] => (*c, *h, *w),
        [_, c, w] => (*c, 1, *w),
        _ => (1, 1, shape[1..].iter().product()),
    }
}

/// Score-based random search over axis-aligned squares at ±ε.
///
/// Starts from vertical ±ε stripes, then proposes squares whose side shrinks
/// from √(0.1·HW) to √(0.01·HW) over the budget, keeping a proposal only if
/// it lowers the classification margin. Stops per sample once misclassified.
/// With `query_budget == 0` the stripe initialization is returned untouched.
pub fn square_attack(
    oracle: &impl ScoreOracle,
    x: &Tensor,
    labels: &[usize],
    tm: &ThreatModel,
    query_budget: usize,
    seed: u64,
) -> Result<SquareOutcome> {
    tm.validate()?;
    let n = x.batch_len();
    if labels.len() != n {
        return Err(Error::InvalidConfig(format!("{} labels for {n} samples", labels.len())));
    }
    let (c, h, w) = image_layout(x.shape());
    let mut rows = Vec::with_capacity(n);
    let mut queries = Vec::with_capacity(n);
    for (i, &y) in labels.iter().enumerate() {
        let mut rng = rng_for(seed, i as u64);
        let xi = x.row(i);
        let eps = tm.epsilon;
        let mut stripes = xi.clone();
        for ch in 0..c {
            for col in 0..w {
                let s = if rng.random_bool(0.5) { eps } else { -eps };
                for r in 0..h {
                    stripes.data_mut()[(ch * h + r) * w + col] += s;
                }
            }
        }
        let mut best = project_linf_box(&stripes, &xi, tm);
        let mut used = 0;
        if query_budget > 0 {
            let mut best_margin = margin(oracle.scores(&best)?.data(), y);
            used = 1;
            while used < query_budget && best_margin >= 0.0 {
                let frac = used as f64 / query_budget as f64;
                let p = 0.1 + (0.01 - 0.1) * frac;
                let side = ((p * (h * w) as f64).sqrt().round() as usize).clamp(1, h.min(w).max(1));
                let side_h = side.min(h);
                let r0 = rng.random_range(0..=h - side_h);
                let c0 = rng.random_range(0..=w - side);
                let mut proposal = best.clone();
                for ch in 0..c {
                    let delta = if rng.random_bool(0.5) { eps } else { -eps };
                    for r in r0..r0 + side_h {
                        for col in c0..c0 + side {
                            let idx = (ch * h + r) * w + col;
                            proposal.data_mut()[idx] = xi.data()[idx] + delta;
                        }
                    }
                }
                let proposal = project_linf_box(&proposal, &xi, tm);
                let m = margin(oracle.scores(&proposal)?.data(), y);
                used += 1;
                if m < best_margin {
                    best_margin = m;
                    best = proposal;
                }
            }
        }
        rows.push(best);
        queries.push(used);
    }
    Ok(SquareOutcome {
        x_adv: Tensor::stack(&rows)?,
        queries,
    })
}

/// Whether each row of `x` is classified as its label.
pub fn correct_mask(model: &Checkpoint, x: &Tensor, labels: &[usize]) -> Result<Vec<bool>> {
    Ok(argmax_rows(&model.logits(x)?).into_iter().zip(labels).map(|(p, &y)| p == y).collect())
}
