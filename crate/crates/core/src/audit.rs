//! Seeded audit of the tape against central finite differences, covering
//! every primitive and every composite loss.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result, TensorError};
use crate::gradcheck::{finite_difference_grad, relative_error, DEFAULT_STEP};
use crate::nn::{build_model, BnMode, Checkpoint, ModelSpec, BN_EPS};
use crate::objectives::{composite_loss, LossInputs, Method, MethodConfig};
use crate::rng::{derive_seed, rng_for};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Largest relative error accepted against finite differences.
pub const AUDIT_TOLERANCE: f64 = 1e-4;

const FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditLine {
    pub name: String,
    pub cases: usize,
    pub max_rel_error: f64,
}

impl AuditLine {
    pub fn passed(&self) -> bool {
        self.max_rel_error < AUDIT_TOLERANCE
    }
}

pub const PRIMITIVES: [&str; 17] = [
    "affine",
    "conv2d",
    "relu",
    "batch_norm_train",
    "batch_norm_eval",
    "log_softmax",
    "exp",
    "clamp_min",
    "add",
    "sub",
    "mul",
    "scale",
    "sum",
    "mean",
    "gather",
    "reshape",
    "flatten",
];

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("consistent shape")
}

/// Uniform values kept at least `gap` away from `kink`.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize], kink: f64, gap: f64) -> Tensor {
    let mut t = uniform(rng, shape, -1.0, 1.0);
    for v in t.data_mut() {
        *v = kink + v.signum() * (v.abs() + gap);
    }
    t
}

/// Inputs and a builder for one random instance of `name`.
fn instance(name: &str, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Build) {
    let n = rng.random_range(2..5);
    let k = rng.random_range(2..5);
    let image = |rng: &mut ChaCha8Rng| {
        let shape = [rng.random_range(1..3), rng.random_range(1..3), rng.random_range(2..4), rng.random_range(2..4)];
        uniform(rng, &shape, -1.0, 1.0)
    };
    match name {
        "affine" => {
            let o = rng.random_range(1..4);
            let x = uniform(rng, &[n, k], -1.0, 1.0);
            let w = uniform(rng, &[o, k], -1.0, 1.0);
            let b = uniform(rng, &[o], -1.0, 1.0);
            (vec![x, w, b], Box::new(|t, v| t.affine(v[0], v[1], v[2])))
        }
        "conv2d" => {
            let x = image(rng);
            let c = x.shape()[1];
            let o = rng.random_range(1..3);
            let ksize = if rng.random_bool(0.5) { 1 } else { 3 };
            let pad = if rng.random_bool(0.5) { ksize / 2 } else { 0 };
            let (h, w) = (x.shape()[2], x.shape()[3]);
            let x = if h + 2 * pad < ksize || w + 2 * pad < ksize {
                uniform(rng, &[x.shape()[0], c, 3, 3], -1.0, 1.0)
            } else {
                x
            };
            let wt = uniform(rng, &[o, c, ksize, ksize], -1.0, 1.0);
            let b = uniform(rng, &[o], -1.0, 1.0);
            (vec![x, wt, b], Box::new(move |t, v| t.conv2d(v[0], v[1], v[2], pad)))
        }
        "relu" => (vec![off_kink(rng, &[n, k], 0.0, 0.01)], Box::new(|t, v| t.relu(v[0]))),
        "batch_norm_train" | "batch_norm_eval" => {
            let x = if rng.random_bool(0.5) {
                uniform(rng, &[n, k], -1.0, 1.0)
            } else {
                let mut x = image(rng);
                if x.shape()[0] * x.shape()[2] * x.shape()[3] < 2 {
                    x = uniform(rng, &[2, x.shape()[1], 2, 2], -1.0, 1.0);
                }
                x
            };
            let c = x.shape()[1];
            let gamma = uniform(rng, &[c], 0.5, 1.5);
            let beta = uniform(rng, &[c], -0.5, 0.5);
            if name == "batch_norm_train" {
                (vec![x, gamma, beta], Box::new(|t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], BN_EPS)?.0)))
            } else {
                let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
                let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..2.0)).collect();
                (
                    vec![x, gamma, beta],
                    Box::new(move |t, v| t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, BN_EPS)),
                )
            }
        }
        "log_softmax" => (vec![uniform(rng, &[n, k], -3.0, 3.0)], Box::new(|t, v| t.log_softmax(v[0]))),
        "exp" => (vec![uniform(rng, &[n, k], -2.0, 2.0)], Box::new(|t, v| t.exp(v[0]))),
        "clamp_min" => (vec![off_kink(rng, &[n, k], 0.1, 0.01)], Box::new(|t, v| t.clamp_min(v[0], 0.1))),
        "add" | "sub" | "mul" => {
            let a = uniform(rng, &[n, k], -1.0, 1.0);
            let b = uniform(rng, &[n, k], -1.0, 1.0);
            let build: Build = match name {
                "add" => Box::new(|t, v| t.add(v[0], v[1])),
                "sub" => Box::new(|t, v| t.sub(v[0], v[1])),
                _ => Box::new(|t, v| t.mul(v[0], v[1])),
            };
            (vec![a, b], build)
        }
        "scale" => {
            let c = rng.random_range(-2.0..2.0);
            (vec![uniform(rng, &[n, k], -1.0, 1.0)], Box::new(move |t, v| t.scale(v[0], c)))
        }
        "sum" => (vec![uniform(rng, &[n, k], -1.0, 1.0)], Box::new(|t, v| t.sum(v[0]))),
        "mean" => (vec![uniform(rng, &[n, k], -1.0, 1.0)], Box::new(|t, v| t.mean(v[0]))),
        "gather" => {
            let index: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            (vec![uniform(rng, &[n, k], -1.0, 1.0)], Box::new(move |t, v| t.gather(v[0], &index)))
        }
        "reshape" => (
            vec![uniform(rng, &[n, 2 * k], -1.0, 1.0)],
            Box::new(move |t, v| t.reshape(v[0], &[2 * n, k])),
        ),
        "flatten" => (vec![image(rng)], Box::new(|t, v| t.flatten(v[0]))),
        other => unreachable!("unknown primitive {other}"),
    }
}

/// `Σ probe ⊙ build(inputs)`, so every output coordinate is exercised.
fn scalarize(tape: &mut Tape, build: &Build, leaves: &[Var], probe: &Tensor) -> Result<Var, TensorError> {
    let y = build(tape, leaves)?;
    if tape.value(y).len() == 1 {
        return Ok(y);
    }
    let p = tape.constant(probe.clone())?;
    let py = tape.mul(y, p)?;
    tape.sum(py)
}

fn primitive_case(name: &str, rng: &mut ChaCha8Rng) -> Result<f64> {
    let (inputs, build) = instance(name, rng);
    let out_shape = {
        let mut tape = Tape::new();
        let leaves = inputs.iter().map(|t| tape.leaf(t.clone())).collect::<Result<Vec<_>, _>>()?;
        let y = build(&mut tape, &leaves)?;
        tape.shape(y).to_vec()
    };
    let probe = uniform(rng, &out_shape, -1.0, 1.0);
    let mut tape = Tape::new();
    let leaves = inputs.iter().map(|t| tape.leaf(t.clone())).collect::<Result<Vec<_>, _>>()?;
    let loss = scalarize(&mut tape, &build, &leaves, &probe)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<f64> = leaves.iter().flat_map(|&v| grads.wrt(v)).collect();
    let numeric: Vec<f64> = finite_difference_grad(
        |params| {
            let mut t = Tape::new();
            let vars: Vec<Var> = params.iter().map(|p| t.leaf(p.clone()).expect("finite input")).collect();
            match scalarize(&mut t, &build, &vars, &probe) {
                Ok(v) => t.value(v).data()[0],
                Err(_) => f64::NAN,
            }
        },
        &inputs,
        DEFAULT_STEP,
    )
    .into_iter()
    .flatten()
    .collect();
    Ok(relative_error(&analytic, &numeric, FLOOR))
}

/// Checks each primitive on `cases` random instances.
pub fn audit_primitives(cases: usize, seed: u64) -> Result<Vec<AuditLine>> {
    PRIMITIVES
        .iter()
        .enumerate()
        .map(|(p, name)| {
            let mut rng = rng_for(seed, p as u64);
            let mut max_rel_error = 0.0f64;
            for _ in 0..cases {
                let e = primitive_case(name, &mut rng)?;
                max_rel_error = if e.is_nan() { f64::INFINITY } else { max_rel_error.max(e) };
            }
            Ok(AuditLine {
                name: (*name).to_string(),
                cases,
                max_rel_error,
            })
        })
        .collect()
}

fn with_flat(base: &Checkpoint, params: &[Tensor]) -> Checkpoint {
    let mut m = base.clone();
    for (slot, t) in m.params.values_mut().zip(params) {
        *slot = t.clone();
    }
    m
}

fn loss_case(method: Method, case: usize, seed: u64) -> Result<f64> {
    let spec = if case.is_multiple_of(2) {
        ModelSpec::mlp(&[12, 5, 3], &[3, 2, 2])
    } else {
        ModelSpec::cnn(&[3, 2], 3, &[3, 2, 2])
    };
    let student = build_model(&spec, derive_seed(seed, 4 * case as u64))?;
    let teacher = build_model(&spec, derive_seed(seed, 4 * case as u64 + 1))?;
    let mut rng = rng_for(seed, 4 * case as u64 + 2);
    let batch = 4;
    let x = uniform(&mut rng, &[batch, 3, 2, 2], 0.0, 1.0);
    let eps = 8.0 / 255.0;
    let mut x_hat = x.clone();
    for v in x_hat.data_mut() {
        *v = (*v + rng.random_range(-eps..eps)).clamp(0.0, 1.0);
    }
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..3)).collect();
    let cfg = MethodConfig::new(method, rng.random_range(1.0..12.0))?;
    let mode = if case % 4 < 2 { BnMode::Train } else { BnMode::FrozenEval };
    let inputs = |student: &Checkpoint| -> Result<crate::objectives::BuiltLoss> {
        composite_loss(
            &cfg,
            &LossInputs {
                teacher: &teacher,
                student,
                x: &x,
                x_hat: &x_hat,
                labels: method.is_supervised().then_some(&labels[..]),
                student_mode: mode,
            },
        )
    };
    let built = inputs(&student)?;
    let analytic: Vec<f64> = built.student_gradients()?.into_values().flatten().collect();
    let params: Vec<Tensor> = student.params.values().cloned().collect();
    let numeric: Vec<f64> = finite_difference_grad(
        |p| match inputs(&with_flat(&student, p)) {
            Ok(b) => b.value(b.terms.total),
            Err(_) => f64::NAN,
        },
        &params,
        DEFAULT_STEP,
    )
    .into_iter()
    .flatten()
    .collect();
    Ok(relative_error(&analytic, &numeric, FLOOR))
}

/// Checks each composite loss on `cases` random (teacher, student, x, x̂) draws.
pub fn audit_composite_losses(cases: usize, seed: u64) -> Result<Vec<AuditLine>> {
    Method::ALL
        .iter()
        .enumerate()
        .map(|(m, &method)| {
            let mut max_rel_error = 0.0f64;
            for c in 0..cases {
                let e = loss_case(method, c, derive_seed(seed, 100 + m as u64))?;
                max_rel_error = if e.is_nan() { f64::INFINITY } else { max_rel_error.max(e) };
            }
            Ok(AuditLine {
                name: method.name().to_string(),
                cases,
                max_rel_error,
            })
        })
        .collect()
}

/// Both audits; fails with the first line over tolerance.
pub fn audit_all(cases: usize, seed: u64) -> Result<Vec<AuditLine>> {
    let mut lines = audit_primitives(cases, seed)?;
    lines.extend(audit_composite_losses(cases, seed)?);
    if let Some(bad) = lines.iter().find(|l| !l.passed()) {
        return Err(Error::Verification(format!(
            "{} gradient off by relative error {:e}",
            bad.name, bad.max_rel_error
        )));
    }
    Ok(lines)
}
