//! Small batch-normalized classifiers and their checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{self, BlockKind, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;
const CONV_KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Fully connected layers; `widths[0]` is the flattened input size and the
    /// last width is the number of classes.
    Mlp { widths: Vec<usize> },
    /// 3×3 same-padded conv blocks; `channels[0]` is the input channel count.
    /// A linear head maps the flattened last block to the classes.
    Cnn { channels: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub num_classes: usize,
    /// Per-sample input extents, e.g. `[3, 8, 8]`.
    pub input_shape: Vec<usize>,
}

impl ModelSpec {
    pub fn mlp(widths: &[usize], input_shape: &[usize]) -> Self {
        Self {
            architecture: Architecture::Mlp {
                widths: widths.to_vec(),
            },
            num_classes: *widths.last().unwrap_or(&0),
            input_shape: input_shape.to_vec(),
        }
    }

    pub fn cnn(channels: &[usize], num_classes: usize, input_shape: &[usize]) -> Self {
        Self {
            architecture: Architecture::Cnn {
                channels: channels.to_vec(),
            },
            num_classes,
            input_shape: input_shape.to_vec(),
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return bad(format!("invalid input shape {:?}", self.input_shape));
        }
        match &self.architecture {
            Architecture::Mlp { widths } => {
                if widths.len() < 2 || widths.contains(&0) {
                    return bad(format!("mlp widths {widths:?} need at least two positive entries"));
                }
                if widths[0] != self.input_len() {
                    return bad(format!("mlp input width {} != input size {}", widths[0], self.input_len()));
                }
                if *widths.last().unwrap() != self.num_classes {
                    return bad(format!("final width {} != num_classes {}", widths.last().unwrap(), self.num_classes));
                }
            }
            Architecture::Cnn { channels } => {
                if channels.len() < 2 || channels.contains(&0) {
                    return bad(format!("cnn channel plan {channels:?} needs at least one block"));
                }
                if self.input_shape.len() != 3 || self.input_shape[0] != channels[0] {
                    return bad(format!("cnn input shape {:?} must be [{}, H, W]", self.input_shape, channels[0]));
                }
            }
        }
        Ok(())
    }

    /// Ordered parameter names and shapes.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        match &self.architecture {
            Architecture::Mlp { widths } => {
                for (i, pair) in widths.windows(2).enumerate() {
                    out.push((format!("fc{i}.weight"), vec![pair[1], pair[0]]));
                    out.push((format!("fc{i}.bias"), vec![pair[1]]));
                    if i + 2 < widths.len() {
                        out.push((format!("bn{i}.gamma"), vec![pair[1]]));
                        out.push((format!("bn{i}.beta"), vec![pair[1]]));
                    }
                }
            }
            Architecture::Cnn { channels } => {
                for (i, pair) in channels.windows(2).enumerate() {
                    out.push((format!("conv{i}.weight"), vec![pair[1], pair[0], CONV_KERNEL, CONV_KERNEL]));
                    out.push((format!("conv{i}.bias"), vec![pair[1]]));
                    out.push((format!("bn{i}.gamma"), vec![pair[1]]));
                    out.push((format!("bn{i}.beta"), vec![pair[1]]));
                }
                let feat = channels.last().unwrap() * self.input_shape[1] * self.input_shape[2];
                out.push(("head.weight".into(), vec![self.num_classes, feat]));
                out.push(("head.bias".into(), vec![self.num_classes]));
            }
        }
        out
    }

    /// Batch-norm layer names and channel counts.
    pub fn bn_layout(&self) -> Vec<(String, usize)> {
        match &self.architecture {
            Architecture::Mlp { widths } => (0..widths.len() - 2).map(|i| (format!("bn{i}"), widths[i + 1])).collect(),
            Architecture::Cnn { channels } => (0..channels.len() - 1).map(|i| (format!("bn{i}"), channels[i + 1])).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Running statistics normalize and are never mutated.
    FrozenEval,
    /// Batch statistics normalize; running statistics follow by EMA.
    Train,
    /// Test-time adaptation of the statistics: same arithmetic as `Train`,
    /// used on models whose weights are not being optimized.
    TtaAdaptive,
}

impl BnMode {
    pub fn uses_batch_stats(self) -> bool {
        !matches!(self, BnMode::FrozenEval)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
}

impl BatchNormState {
    pub fn fresh(channels: usize, momentum: f64) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
        }
    }

    /// `m ← (1 − μ)·m + μ·batch` for both mean and variance.
    pub fn absorb(&mut self, stats: &BatchStats) {
        let mu = self.momentum;
        for (m, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *m = (1.0 - mu) * *m + mu * b;
        }
        for (v, b) in self.running_var.iter_mut().zip(&stats.var) {
            *v = ((1.0 - mu) * *v + mu * b).max(1e-12);
        }
    }
}

/// Parameters of a checkpoint placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Tape outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Var,
    /// Observed statistics per BN layer (empty in `FrozenEval`).
    pub batch_stats: Vec<(String, BatchStats)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: BTreeMap<String, Tensor>,
    pub bn: BTreeMap<String, BatchNormState>,
    pub provenance: String,
}

/// Deterministic fan-in-scaled uniform initialization; BN statistics at mean 0, variance 1.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Checkpoint> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    for (name, shape) in spec.parameter_layout() {
        let n: usize = shape.iter().product();
        let data = if name.ends_with(".gamma") {
            vec![1.0; n]
        } else if name.ends_with(".beta") {
            vec![0.0; n]
        } else {
            let fan_in: usize = if name.ends_with(".weight") {
                shape[1..].iter().product()
            } else {
                fan_in_for_bias(spec, &name)
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        params.insert(name, Tensor::new(shape, data)?);
    }
    let bn = spec
        .bn_layout()
        .into_iter()
        .map(|(name, c)| (name, BatchNormState::fresh(c, DEFAULT_BN_MOMENTUM)))
        .collect();
    Ok(Checkpoint {
        spec: spec.clone(),
        params,
        bn,
        provenance: format!("init seed={seed}"),
    })
}

fn fan_in_for_bias(spec: &ModelSpec, bias_name: &str) -> usize {
    let weight = bias_name.replace(".bias", ".weight");
    spec.parameter_layout()
        .into_iter()
        .find(|(n, _)| *n == weight)
        .map(|(_, s)| s[1..].iter().product())
        .unwrap_or(1)
}

/// Two independent deep copies sharing the pretrained weights.
pub fn fork_teacher_student(ckpt: &Checkpoint) -> (Checkpoint, Checkpoint) {
    let mut teacher = ckpt.clone();
    teacher.provenance = format!("{} | teacher", ckpt.provenance);
    let mut student = ckpt.clone();
    student.provenance = format!("{} | student", ckpt.provenance);
    (teacher, student)
}

impl Checkpoint {
    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Weights only (no BN statistics), in name order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params.values().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "flat parameter length");
        let mut off = 0;
        for t in self.params.values_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// Places every parameter on `tape`, as leaves if `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundParams> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.params {
            let v = if trainable {
                tape.leaf(t.clone())?
            } else {
                tape.constant(t.clone())?
            };
            vars.insert(name.clone(), v);
        }
        Ok(BoundParams { vars })
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != self.spec.input_shape.len() + 1 || shape[1..] != self.spec.input_shape[..] {
            return Err(crate::TensorError::ShapeMismatch {
                op: "forward",
                detail: format!("batch {shape:?} does not match input shape {:?}", self.spec.input_shape),
            }
            .into());
        }
        Ok(())
    }

    /// Records the network on `tape`. Running statistics are not touched;
    /// callers in `Train`/`TtaAdaptive` mode pass `Forward::batch_stats` to
    /// [`Checkpoint::absorb`].
    pub fn forward_on_tape(&self, tape: &mut Tape, params: &BoundParams, x: Var, mode: BnMode) -> Result<Forward> {
        self.check_input(tape.shape(x))?;
        let mut stats = Vec::new();
        let mut bn = |tape: &mut Tape, h: Var, i: usize| -> Result<Var> {
            let name = format!("bn{i}");
            let (g, b) = (params.get(&format!("{name}.gamma")), params.get(&format!("{name}.beta")));
            if mode.uses_batch_stats() {
                let (y, s) = tape.batch_norm_train(h, g, b, BN_EPS)?;
                stats.push((name, s));
                Ok(y)
            } else {
                let st = &self.bn[&name];
                Ok(tape.batch_norm_eval(h, g, b, &st.running_mean, &st.running_var, BN_EPS)?)
            }
        };
        let logits = match &self.spec.architecture {
            Architecture::Mlp { widths } => {
                let mut h = tape.flatten(x)?;
                let layers = widths.len() - 1;
                for i in 0..layers {
                    h = tape.affine(h, params.get(&format!("fc{i}.weight")), params.get(&format!("fc{i}.bias")))?;
                    if i + 1 < layers {
                        h = bn(tape, h, i)?;
                        h = tape.relu(h)?;
                    }
                }
                h
            }
            Architecture::Cnn { channels } => {
                let mut h = x;
                for i in 0..channels.len() - 1 {
                    h = tape.conv2d(
                        h,
                        params.get(&format!("conv{i}.weight")),
                        params.get(&format!("conv{i}.bias")),
                        CONV_KERNEL / 2,
                    )?;
                    h = bn(tape, h, i)?;
                    h = tape.relu(h)?;
                }
                let h = tape.flatten(h)?;
                tape.affine(h, params.get("head.weight"), params.get("head.bias"))?
            }
        };
        Ok(Forward {
            logits,
            batch_stats: stats,
        })
    }

    pub fn absorb(&mut self, stats: &[(String, BatchStats)]) {
        for (name, s) in stats {
            if let Some(st) = self.bn.get_mut(name) {
                st.absorb(s);
            }
        }
    }

    /// Logits for `batch`; statistics are updated in `Train`/`TtaAdaptive` mode.
    pub fn forward(&mut self, batch: &Tensor, mode: BnMode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false)?;
        let x = tape.constant(batch.clone())?;
        let out = self.forward_on_tape(&mut tape, &params, x, mode)?;
        if mode.uses_batch_stats() {
            self.absorb(&out.batch_stats);
        }
        Ok(tape.value(out.logits).clone())
    }

    /// Frozen-statistics logits; a pure function of weights and input.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false)?;
        let x = tape.constant(batch.clone())?;
        let out = self.forward_on_tape(&mut tape, &params, x, BnMode::FrozenEval)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Argmax class per row, ties going to the lowest index.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(batch)?))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new(BlockKind::Checkpoint);
        encode_spec(&mut e, &self.spec);
        e.str(&self.provenance);
        e.usize(self.params.len());
        for (name, t) in &self.params {
            e.str(name);
            e.tensor(t);
        }
        e.usize(self.bn.len());
        for (name, st) in &self.bn {
            e.str(name);
            e.f64(st.momentum);
            e.f64s(&st.running_mean);
            e.f64s(&st.running_var);
        }
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(bytes, BlockKind::Checkpoint)?;
        let spec = decode_spec(&mut d)?;
        spec.validate()?;
        let provenance = d.str()?;
        let mut params = BTreeMap::new();
        for _ in 0..d.usize()? {
            let name = d.str()?;
            params.insert(name, d.tensor()?);
        }
        let mut bn = BTreeMap::new();
        for _ in 0..d.usize()? {
            let name = d.str()?;
            let momentum = d.f64()?;
            let running_mean = d.f64s()?;
            let running_var = d.f64s()?;
            bn.insert(
                name,
                BatchNormState {
                    running_mean,
                    running_var,
                    momentum,
                },
            );
        }
        d.finish()?;
        let expected: Vec<_> = spec.parameter_layout();
        let found: Vec<_> = params.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
        let mut expected_sorted = expected.clone();
        expected_sorted.sort();
        if expected_sorted != found {
            return Err(Error::Format("parameter names/shapes do not match the model spec".into()));
        }
        let bn_expected: Vec<_> = spec.bn_layout();
        if bn.len() != bn_expected.len()
            || bn_expected
                .iter()
                .any(|(n, c)| bn.get(n).is_none_or(|s| s.running_mean.len() != *c || s.running_var.len() != *c))
        {
            return Err(Error::Format("batch-norm states do not match the model spec".into()));
        }
        Ok(Self {
            spec,
            params,
            bn,
            provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn encode_spec(e: &mut Encoder, spec: &ModelSpec) {
    match &spec.architecture {
        Architecture::Mlp { widths } => {
            e.u8(0);
            e.usizes(widths);
        }
        Architecture::Cnn { channels } => {
            e.u8(1);
            e.usizes(channels);
        }
    }
    e.usize(spec.num_classes);
    e.usizes(&spec.input_shape);
}

fn decode_spec(d: &mut Decoder<'_>) -> Result<ModelSpec> {
    let architecture = match d.u8()? {
        0 => Architecture::Mlp { widths: d.usizes()? },
        1 => Architecture::Cnn { channels: d.usizes()? },
        t => return Err(Error::Format(format!("unknown architecture tag {t}"))),
    };
    Ok(ModelSpec {
        architecture,
        num_classes: d.usize()?,
        input_shape: d.usizes()?,
    })
}

/// Row-wise argmax over `[N, K]`, lowest index on ties.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.row_len();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
