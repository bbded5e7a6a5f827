//! Source pretraining, teacher BN adaptation, and the student's adversarial
//! fine-tuning loop with per-epoch dynamics logging.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attacks::{craft_inner_max, ThreatModel};
use crate::codec::write_atomic;
use crate::data::{Dataset, UnlabeledView};
use crate::error::{Error, Result, TensorError};
use crate::evaluation::{clean_accuracy, robust_accuracy, Attack};
use crate::exec::Execution;
use crate::nn::{build_model, fork_teacher_student, BnMode, Checkpoint, ModelSpec};
use crate::objectives::{composite_loss, cross_entropy_on_tape, GradMap, LossInputs, Method, MethodConfig};
use crate::rng::{derive_seed, rng_for, stream};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial_lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl LrSchedule {
    /// 1e-3, decayed by 0.1 at epochs 10, 25 and 30.
    pub fn fine_tuning() -> Self {
        Self {
            initial_lr: 1e-3,
            decay_epochs: vec![10, 25, 30],
            decay_factor: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("initial lr must be positive, got {}", self.initial_lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::InvalidConfig(format!("decay factor must lie in (0, 1), got {}", self.decay_factor)));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidConfig("decay epochs must be sorted".into()));
        }
        Ok(())
    }
}

/// `initial_lr · factor^#{d ∈ decay_epochs : d ≤ epoch}`, epochs counted from 0.
pub fn lr_at_epoch(s: &LrSchedule, epoch: usize) -> f64 {
    let decays = s.decay_epochs.iter().filter(|&&d| d <= epoch).count();
    s.initial_lr * s.decay_factor.powi(decays as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: BTreeMap<String, Vec<f64>>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(params: &BTreeMap<String, Tensor>, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidConfig(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(format!("weight decay must be nonnegative, got {weight_decay}")));
        }
        Ok(Self {
            velocity: params.iter().map(|(n, t)| (n.clone(), vec![0.0; t.len()])).collect(),
            momentum,
            weight_decay,
        })
    }
}

/// `v ← μ·v + g + wd·θ; θ ← θ − lr·v` for every parameter.
pub fn sgd_momentum_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &GradMap,
    opt: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    for (name, theta) in params.iter() {
        let g = grads.get(name).ok_or_else(|| TensorError::ShapeMismatch {
            op: "sgd_momentum_step",
            detail: format!("no gradient for {name}"),
        })?;
        let v = opt.velocity.get(name).map_or(0, Vec::len);
        if g.len() != theta.len() || v != theta.len() {
            return Err(TensorError::ShapeMismatch {
                op: "sgd_momentum_step",
                detail: format!("{name}: {} params, {} grads, {v} velocity", theta.len(), g.len()),
            }
            .into());
        }
    }
    let (mu, wd) = (opt.momentum, opt.weight_decay);
    for (name, theta) in params.iter_mut() {
        let g = &grads[name];
        let v = opt.velocity.get_mut(name).expect("checked");
        for ((t, vi), gi) in theta.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = mu * *vi + gi + wd * *t;
            *t -= lr * *vi;
        }
    }
    Ok(())
}

/// Consecutive batches of a shuffled index order. A trailing batch smaller
/// than `min_batch` is dropped.
fn batches(n: usize, batch_size: usize, min_batch: usize, rng: &mut impl rand::Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= min_batch)
        .map(<[usize]>::to_vec)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 32,
            schedule: LrSchedule {
                initial_lr: 0.02,
                decay_epochs: vec![10],
                decay_factor: 0.2,
            },
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// Cross-entropy training from a seeded initialization.
pub fn pretrain_source(spec: &ModelSpec, source: &Dataset, cfg: &PretrainConfig, seed: u64) -> Result<Checkpoint> {
    cfg.schedule.validate()?;
    if cfg.batch_size < 2 {
        return Err(Error::InvalidConfig("pretraining batch size must be at least 2".into()));
    }
    if source.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut model = build_model(spec, derive_seed(seed, stream::INIT))?;
    let mut opt = OptimizerState::new(&model.params, cfg.momentum, cfg.weight_decay)?;
    let labels = source.labels();
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(&cfg.schedule, epoch);
        let mut rng = rng_for(derive_seed(seed, stream::SHUFFLE), epoch as u64);
        for idx in batches(source.len(), cfg.batch_size, 2, &mut rng) {
            let x = source.inputs().select_rows(&idx);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let params = model.bind(&mut tape, true)?;
            let xv = tape.constant(x)?;
            let out = model.forward_on_tape(&mut tape, &params, xv, BnMode::Train).map_err(|e| diverged(epoch, e))?;
            let loss = cross_entropy_on_tape(&mut tape, out.logits, &y)?;
            let g = tape.backward(loss)?;
            let grads: GradMap = params.iter().map(|(n, &v)| (n.clone(), g.wrt(v))).collect();
            if grads.values().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    reason: "non-finite gradient".into(),
                });
            }
            model.absorb(&out.batch_stats);
            sgd_momentum_step(&mut model.params, &grads, &mut opt, lr)?;
        }
    }
    model.provenance = format!("pretrain seed={seed} epochs={}", cfg.epochs);
    Ok(model)
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { op }) => Error::Diverged {
            epoch,
            reason: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherPolicy {
    /// Source statistics throughout.
    Frozen,
    /// One BN update per adaptation batch, before the student's step.
    #[default]
    BnParallel,
    /// BN statistics adapted on the target set before fine-tuning starts.
    BnBefore,
}

impl TeacherPolicy {
    pub fn name(self) -> &'static str {
        match self {
            TeacherPolicy::Frozen => "frozen",
            TeacherPolicy::BnParallel => "bn_parallel",
            TeacherPolicy::BnBefore => "bn_before",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [TeacherPolicy::Frozen, TeacherPolicy::BnParallel, TeacherPolicy::BnBefore]
            .into_iter()
            .find(|p| p.name() == s)
    }
}

/// Re-estimates BN running statistics from `batches`; weights stay untouched.
pub fn adapt_teacher<'a>(
    teacher: &Checkpoint,
    batches: impl IntoIterator<Item = &'a Tensor>,
    policy: TeacherPolicy,
) -> Result<Checkpoint> {
    let mut adapted = teacher.clone();
    if policy == TeacherPolicy::Frozen {
        return Ok(adapted);
    }
    for b in batches {
        if b.batch_len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "BN adaptation needs batches of at least 2, got {}",
                b.batch_len()
            )));
        }
        adapted.forward(b, BnMode::TtaAdaptive)?;
    }
    Ok(adapted)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationConfig {
    pub method: MethodConfig,
    pub threat: ThreatModel,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub teacher_policy: TeacherPolicy,
    /// Passes over the target set when the policy is `bn_before`.
    pub teacher_passes: usize,
    pub eval_attack: Attack,
    /// Size of the fixed eval subset scored after every epoch.
    pub eval_subset: usize,
    pub seed: u64,
    pub exec: Execution,
}

impl AdaptationConfig {
    pub fn new(method: MethodConfig) -> Self {
        Self {
            method,
            threat: ThreatModel::training(),
            epochs: 30,
            batch_size: 32,
            schedule: LrSchedule::fine_tuning(),
            momentum: 0.9,
            weight_decay: 0.0,
            teacher_policy: TeacherPolicy::default(),
            teacher_passes: 5,
            eval_attack: Attack::Pgd(ThreatModel::evaluation()),
            eval_subset: 512,
            seed: 0,
            exec: Execution::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.threat.validate()?;
        self.eval_attack.threat().validate()?;
        self.schedule.validate()?;
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch size must be at least 2 for batch statistics".into()));
        }
        if self.eval_subset == 0 {
            return Err(Error::InvalidConfig("eval subset must be nonempty".into()));
        }
        MethodConfig::new(self.method.method, self.method.beta)?;
        OptimizerState::new(&BTreeMap::new(), self.momentum, self.weight_decay)?;
        Ok(())
    }
}

/// Adaptation inputs: always the label-free view, plus labels only for
/// supervised methods.
#[derive(Clone, Copy, Debug)]
pub struct TrainingData<'a> {
    pub inputs: UnlabeledView<'a>,
    pub labels: Option<&'a [usize]>,
}

impl<'a> TrainingData<'a> {
    pub fn unlabeled(view: UnlabeledView<'a>) -> Self {
        Self { inputs: view, labels: None }
    }

    /// Reads labels only when `method` needs them.
    pub fn for_method(d: &'a Dataset, method: Method) -> Self {
        Self {
            inputs: d.unlabeled(),
            labels: method.is_supervised().then(|| d.labels()),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub accuracy_term: f64,
    pub robustness_term: f64,
    pub total: f64,
    pub batches: usize,
}

/// One pass over the adaptation set. The teacher's weights are never
/// touched; under `bn_parallel` its BN statistics follow each clean batch.
pub fn adapt_student_epoch(
    teacher: &mut Checkpoint,
    student: &mut Checkpoint,
    data: TrainingData<'_>,
    cfg: &AdaptationConfig,
    opt: &mut OptimizerState,
    epoch: usize,
) -> Result<EpochLosses> {
    cfg.method.check_labels(data.labels)?;
    let lr = lr_at_epoch(&cfg.schedule, epoch);
    let mut rng = rng_for(derive_seed(cfg.seed, stream::SHUFFLE), epoch as u64);
    let plan = batches(data.inputs.len(), cfg.batch_size, 2, &mut rng);
    if plan.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let attack_seed = derive_seed(derive_seed(cfg.seed, stream::INNER_MAX), epoch as u64);
    let mut sums = EpochLosses::default();
    for (b, idx) in plan.iter().enumerate() {
        let x = data.inputs.batch(idx);
        let y: Option<Vec<usize>> = data.labels.map(|l| idx.iter().map(|&i| l[i]).collect());
        if cfg.teacher_policy == TeacherPolicy::BnParallel {
            teacher.forward(&x, BnMode::TtaAdaptive)?;
        }
        let x_hat = craft_inner_max(
            &cfg.method,
            teacher,
            student,
            &x,
            y.as_deref(),
            &cfg.threat,
            derive_seed(attack_seed, b as u64),
        )
        .map_err(|e| diverged(epoch, e))?;
        let built = composite_loss(
            &cfg.method,
            &LossInputs {
                teacher,
                student,
                x: &x,
                x_hat: &x_hat,
                labels: y.as_deref(),
                student_mode: BnMode::Train,
            },
        )
        .map_err(|e| diverged(epoch, e))?;
        let total = built.value(built.terms.total);
        let grads = built.student_gradients()?;
        if !total.is_finite() || grads.values().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                epoch,
                reason: format!("non-finite loss or gradient at batch {b}"),
            });
        }
        sums.accuracy_term += built.value(built.terms.accuracy);
        sums.robustness_term += built.value(built.terms.robustness);
        sums.total += total;
        sums.batches += 1;
        student.absorb(&built.batch_stats);
        sgd_momentum_step(&mut student.params, &grads, opt, lr)?;
    }
    let n = sums.batches as f64;
    Ok(EpochLosses {
        accuracy_term: sums.accuracy_term / n,
        robustness_term: sums.robustness_term / n,
        total: sums.total / n,
        batches: sums.batches,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsRecord {
    /// 1-based count of completed epochs.
    pub epoch: usize,
    pub lr: f64,
    pub loss_acc_term: f64,
    pub loss_rob_term: f64,
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub teacher_clean_acc: f64,
}

pub const DYNAMICS_CSV_HEADER: &str = "epoch,lr,loss_acc_term,loss_rob_term,clean_acc,robust_acc,teacher_clean_acc";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DynamicsLog {
    pub records: Vec<DynamicsRecord>,
    /// Epoch (1-based) whose update produced non-finite values, if any.
    pub diverged_at: Option<usize>,
}

impl DynamicsLog {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain record") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("line {}: {e}", i + 1))))
            .collect::<Result<_>>()?;
        Ok(Self {
            records,
            diverged_at: None,
        })
    }

    /// Floats are written in shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(DYNAMICS_CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{:?},{:?},{:?},{:?},{:?},{:?}",
                r.epoch, r.lr, r.loss_acc_term, r.loss_rob_term, r.clean_acc, r.robust_acc, r.teacher_clean_acc
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(DYNAMICS_CSV_HEADER) {
            return Err(Error::Format("unexpected dynamics CSV header".into()));
        }
        let records = lines
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                let bad = || Error::Format(format!("line {}: malformed record", i + 2));
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 7 {
                    return Err(bad());
                }
                let num = |j: usize| f[j].parse::<f64>().map_err(|_| bad());
                Ok(DynamicsRecord {
                    epoch: f[0].parse().map_err(|_| bad())?,
                    lr: num(1)?,
                    loss_acc_term: num(2)?,
                    loss_rob_term: num(3)?,
                    clean_acc: num(4)?,
                    robust_acc: num(5)?,
                    teacher_clean_acc: num(6)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            records,
            diverged_at: None,
        })
    }

    /// Writes `<stem>.csv` and `<stem>.jsonl`.
    pub fn write(&self, stem: &Path) -> Result<()> {
        write_atomic(&stem.with_extension("csv"), self.to_csv().as_bytes())?;
        write_atomic(&stem.with_extension("jsonl"), self.to_jsonl().as_bytes())
    }
}

#[derive(Clone, Debug)]
pub struct AdaptationOutcome {
    pub student: Checkpoint,
    pub teacher: Checkpoint,
    pub log: DynamicsLog,
}

/// The fixed seeded eval subset scored after each epoch.
pub fn eval_subset(eval_set: &Dataset, size: usize, seed: u64) -> Dataset {
    if eval_set.len() <= size {
        return eval_set.clone();
    }
    let mut idx: Vec<usize> = (0..eval_set.len()).collect();
    idx.shuffle(&mut rng_for(seed, stream::EVAL_SUBSET));
    idx.truncate(size);
    idx.sort_unstable();
    eval_set.subset(&idx)
}

/// Forks teacher and student, adapts the teacher per policy, then runs
/// `cfg.epochs` student epochs, scoring a fixed eval subset after each.
///
/// A non-finite loss stops the run: the student from the last completed
/// epoch is returned and `log.diverged_at` names the failing epoch.
pub fn run_adaptation(
    pretrained: &Checkpoint,
    target: TrainingData<'_>,
    eval_set: &Dataset,
    cfg: &AdaptationConfig,
) -> Result<AdaptationOutcome> {
    cfg.validate()?;
    if eval_set.is_empty() || target.inputs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (teacher, mut student) = fork_teacher_student(pretrained);
    let mut teacher = if cfg.teacher_policy == TeacherPolicy::BnBefore {
        let mut rng = rng_for(derive_seed(cfg.seed, stream::SHUFFLE), u64::MAX);
        let plan: Vec<Tensor> = (0..cfg.teacher_passes)
            .flat_map(|_| batches(target.inputs.len(), cfg.batch_size, 2, &mut rng))
            .map(|idx| target.inputs.batch(&idx))
            .collect();
        adapt_teacher(&teacher, plan.iter(), cfg.teacher_policy)?
    } else {
        teacher
    };
    let scored = eval_subset(eval_set, cfg.eval_subset, cfg.seed);
    let mut opt = OptimizerState::new(&student.params, cfg.momentum, cfg.weight_decay)?;
    let mut log = DynamicsLog::default();
    for epoch in 0..cfg.epochs {
        let (mut t, mut s, mut o) = (teacher.clone(), student.clone(), opt.clone());
        match adapt_student_epoch(&mut t, &mut s, target, cfg, &mut o, epoch) {
            Ok(losses) => {
                (teacher, student, opt) = (t, s, o);
                let attack_seed = derive_seed(derive_seed(cfg.seed, stream::EVAL_ATTACK), epoch as u64);
                log.records.push(DynamicsRecord {
                    epoch: epoch + 1,
                    lr: lr_at_epoch(&cfg.schedule, epoch),
                    loss_acc_term: losses.accuracy_term,
                    loss_rob_term: losses.robustness_term,
                    clean_acc: clean_accuracy(&student, &scored)?,
                    robust_acc: robust_accuracy(&student, &scored, &cfg.eval_attack, attack_seed, cfg.exec)?,
                    teacher_clean_acc: clean_accuracy(&teacher, &scored)?,
                });
            }
            Err(Error::Diverged { .. }) => {
                log.diverged_at = Some(epoch + 1);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    student.provenance = format!(
        "{} | {} beta={} epochs={} seed={}",
        pretrained.provenance,
        cfg.method.method.name(),
        cfg.method.beta,
        log.records.len(),
        cfg.seed
    );
    Ok(AdaptationOutcome { student, teacher, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let s = LrSchedule::fine_tuning();
        assert_eq!(lr_at_epoch(&s, 0), 1e-3);
        assert_eq!(lr_at_epoch(&s, 9), 1e-3);
        assert!((lr_at_epoch(&s, 10) - 1e-4).abs() < 1e-18);
        assert!((lr_at_epoch(&s, 26) - 1e-5).abs() < 1e-18);
        assert!((lr_at_epoch(&s, 30) - 1e-6).abs() < 1e-18);
    }

    fn one_param(v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("w".to_string(), Tensor::vector(vec![v]))])
    }

    #[test]
    fn plain_gradient_descent() {
        let mut p = one_param(1.0);
        let mut opt = OptimizerState::new(&p, 0.0, 0.0).unwrap();
        let g = GradMap::from([("w".to_string(), vec![0.5])]);
        sgd_momentum_step(&mut p, &g, &mut opt, 0.1).unwrap();
        assert_eq!(p["w"].data()[0], 1.0 - 0.1 * 0.5);
        let zero = GradMap::from([("w".to_string(), vec![0.0])]);
        let mut q = one_param(2.0);
        let mut opt = OptimizerState::new(&q, 0.9, 0.0).unwrap();
        sgd_momentum_step(&mut q, &zero, &mut opt, 0.1).unwrap();
        assert_eq!(q["w"].data()[0], 2.0);
    }

    #[test]
    fn momentum_on_quadratic_bowl() {
        let mut p = one_param(1.0);
        let mut opt = OptimizerState::new(&p, 0.9, 0.0).unwrap();
        // Oracle: the linear recurrence v' = 0.9 v + θ, θ' = θ − 0.1 v'.
        let (mut theta, mut v) = (1.0f64, 0.0f64);
        for step in 1..=150 {
            let g = GradMap::from([("w".to_string(), vec![p["w"].data()[0]])]);
            sgd_momentum_step(&mut p, &g, &mut opt, 0.1).unwrap();
            v = 0.9 * v + theta;
            theta -= 0.1 * v;
            assert!((p["w"].data()[0] - theta).abs() < 1e-15);
            if step == 50 {
                // Damping per step is only √0.9, so 50 steps leave |θ| ≈ 0.067.
                assert!((theta + 0.066_680_238_9).abs() < 1e-9, "{theta}");
            }
        }
        assert!(theta.abs() < 1e-3, "{theta}");
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = one_param(1.0);
        let mut opt = OptimizerState::new(&p, 0.9, 0.0).unwrap();
        let g = GradMap::from([("w".to_string(), vec![0.0, 1.0])]);
        assert!(sgd_momentum_step(&mut p, &g, &mut opt, 0.1).is_err());
        assert!(sgd_momentum_step(&mut p, &GradMap::new(), &mut opt, 0.1).is_err());
    }

    #[test]
    fn weight_decay_enters_velocity() {
        let mut p = one_param(2.0);
        let mut opt = OptimizerState::new(&p, 0.0, 0.5).unwrap();
        let g = GradMap::from([("w".to_string(), vec![1.0])]);
        sgd_momentum_step(&mut p, &g, &mut opt, 0.1).unwrap();
        assert!((p["w"].data()[0] - (2.0 - 0.1 * (1.0 + 0.5 * 2.0))).abs() < 1e-15);
    }

    #[test]
    fn dynamics_round_trip() {
        let log = DynamicsLog {
            records: (1..=3)
                .map(|e| DynamicsRecord {
                    epoch: e,
                    lr: 1e-3 / e as f64,
                    loss_acc_term: 0.1 * e as f64,
                    loss_rob_term: 1.0 / 3.0,
                    clean_acc: 0.5,
                    robust_acc: 0.125,
                    teacher_clean_acc: 0.7,
                })
                .collect(),
            diverged_at: None,
        };
        assert_eq!(DynamicsLog::from_csv(&log.to_csv()).unwrap(), log);
        assert_eq!(DynamicsLog::from_jsonl(&log.to_jsonl()).unwrap(), log);
        assert!(log.to_csv().starts_with(DYNAMICS_CSV_HEADER));
    }

    #[test]
    fn teacher_policy_names() {
        for p in [TeacherPolicy::Frozen, TeacherPolicy::BnParallel, TeacherPolicy::BnBefore] {
            assert_eq!(TeacherPolicy::parse(p.name()), Some(p));
        }
        assert_eq!(TeacherPolicy::parse("both"), None);
    }
}
