//! Experiment configuration: a flat, sectioned `key = value` document.
//!
//! ```text
//! # comment
//! [adaptation]
//! method = tgra
//! beta = 6
//! [threat]
//! epsilon = 8/255
//! ```
//!
//! A `#` after whitespace starts a comment anywhere on a line.
//! Every key has a documented default, so an empty document is a complete
//! config. Reals accept `a/b` fractions. Lists are comma separated. Unknown
//! sections or keys, duplicate keys, malformed values and invariant
//! violations are reported with the line that caused them.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::PathBuf;

use rtta_core::adaptation::{AdaptationConfig, LrSchedule, PretrainConfig, TeacherPolicy};
use rtta_core::attacks::{AttackInit, ThreatModel};
use rtta_core::corruptions::CorruptionSpec;
use rtta_core::data::{SplitSpec, SyntheticStyle, MAX_EXTENT, SYNTHETIC_CHANNELS};
use rtta_core::evaluation::{Attack, SweepAxis};
use rtta_core::exec::Execution;
use rtta_core::nn::ModelSpec;
use rtta_core::objectives::{Method, MethodConfig};
use rtta_core::verify::VerifyConfig;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigError {
    /// 1-based line in the document; 0 for command-line overrides.
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            write!(f, "override: {}", self.message)
        } else {
            write!(f, "line {}: {}", self.line, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchKind {
    Cnn,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackKind {
    Pgd,
    Square,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    pub classes: usize,
    pub samples_per_class: usize,
    pub extent: usize,
    pub amplitude_min: f64,
    pub amplitude_max: f64,
    pub texture_std: f64,
    pub tint: f64,
    pub cycles: f64,
    pub source_seed: u64,
    pub target_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionSection {
    pub severity: u8,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSection {
    pub adapt_fraction: f64,
    pub eval_fraction: f64,
    pub seed: u64,
    pub stratified: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub architecture: ArchKind,
    /// Conv channels (CNN) or hidden widths (MLP).
    pub hidden: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptationSection {
    pub method: Method,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub teacher_policy: TeacherPolicy,
    pub teacher_passes: usize,
    pub eval_subset: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThreatSection {
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub init_std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    pub attack: AttackKind,
    pub steps: usize,
    pub queries: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSection {
    pub axis: SweepAxis,
    pub methods: Vec<Method>,
    pub betas: Vec<f64>,
    pub severities: Vec<u8>,
    pub fractions: Vec<f64>,
    pub eval_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifySection {
    pub triples: usize,
    pub fd_triples: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct PathsSection {
    pub checkpoint: Option<PathBuf>,
    pub adapt_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub parallel: bool,
    pub data: DataSection,
    pub corruption: CorruptionSection,
    pub split: SplitSection,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub adaptation: AdaptationSection,
    pub threat: ThreatSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub verify: VerifySection,
    pub paths: PathsSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = ThreatModel::training();
        Self {
            seed: 0,
            parallel: true,
            data: DataSection {
                classes: 4,
                samples_per_class: 64,
                extent: 12,
                amplitude_min: 0.1,
                amplitude_max: 0.18,
                texture_std: 0.1,
                tint: 0.0,
                cycles: 1.5,
                source_seed: 1,
                target_seed: 2,
            },
            corruption: CorruptionSection { severity: 2, seed: 3 },
            split: SplitSection {
                adapt_fraction: 0.5,
                eval_fraction: 0.5,
                seed: 4,
                stratified: true,
            },
            model: ModelSection {
                architecture: ArchKind::Cnn,
                hidden: vec![8, 8],
            },
            pretrain: {
                let p = PretrainConfig::default();
                PretrainSection {
                    epochs: p.epochs,
                    batch_size: p.batch_size,
                    lr: p.schedule.initial_lr,
                    decay_epochs: p.schedule.decay_epochs,
                    decay_factor: p.schedule.decay_factor,
                    momentum: p.momentum,
                    weight_decay: p.weight_decay,
                }
            },
            adaptation: {
                let s = LrSchedule::fine_tuning();
                // Desk scale: the small CNN needs a tenth of the fine-tuning rate.
                AdaptationSection {
                    method: Method::Tgra,
                    beta: 6.0,
                    epochs: 30,
                    batch_size: 16,
                    lr: 1e-4,
                    decay_epochs: s.decay_epochs,
                    decay_factor: s.decay_factor,
                    momentum: 0.9,
                    weight_decay: 0.0,
                    teacher_policy: TeacherPolicy::default(),
                    teacher_passes: 5,
                    eval_subset: 512,
                }
            },
            threat: ThreatSection {
                epsilon: train.epsilon,
                alpha: train.alpha,
                steps: train.steps,
                init_std: match train.init {
                    AttackInit::Gaussian { std } => std,
                    _ => 0.0,
                },
            },
            eval: EvalSection {
                attack: AttackKind::Pgd,
                steps: ThreatModel::evaluation().steps,
                queries: 1000,
            },
            sweep: SweepSection {
                axis: SweepAxis::Beta,
                methods: vec![Method::Tgra, Method::TradesU],
                betas: vec![6.0, 8.0, 10.0, 12.0],
                severities: vec![0, 1, 2],
                fractions: vec![0.5, 0.7, 0.8, 0.9],
                eval_fraction: 0.1,
            },
            verify: VerifySection {
                triples: 100,
                fd_triples: 8,
            },
            paths: PathsSection::default(),
        }
    }
}

fn parse_real(v: &str) -> Result<f64, String> {
    let parsed = match v.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| format!("expected a real, got '{v}'"))?;
            let b: f64 = b.trim().parse().map_err(|_| format!("expected a real, got '{v}'"))?;
            a / b
        }
        None => v.parse().map_err(|_| format!("expected a real, got '{v}'"))?,
    };
    if parsed.is_finite() {
        Ok(parsed)
    } else {
        Err(format!("expected a finite real, got '{v}'"))
    }
}

fn parse_int<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("expected a nonnegative integer, got '{v}'"))
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got '{v}'")),
    }
}

fn parse_list<T>(v: &str, item: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| item(s.trim())).collect()
}

fn parse_method(v: &str) -> Result<Method, String> {
    Method::parse(v).ok_or_else(|| format!("unknown method '{v}' (pgd_at, trades, trades_u, tgra)"))
}

fn parse_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn real(v: f64) -> String {
    format!("{v:?}")
}

fn list<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(",")
}

fn path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

/// Every key in emission order.
pub const KEYS: &[&str] = &[
    "experiment.seed",
    "experiment.parallel",
    "data.classes",
    "data.samples_per_class",
    "data.extent",
    "data.amplitude_min",
    "data.amplitude_max",
    "data.texture_std",
    "data.tint",
    "data.cycles",
    "data.source_seed",
    "data.target_seed",
    "corruption.severity",
    "corruption.seed",
    "split.adapt_fraction",
    "split.eval_fraction",
    "split.seed",
    "split.stratified",
    "model.architecture",
    "model.hidden",
    "pretrain.epochs",
    "pretrain.batch_size",
    "pretrain.lr",
    "pretrain.decay_epochs",
    "pretrain.decay_factor",
    "pretrain.momentum",
    "pretrain.weight_decay",
    "adaptation.method",
    "adaptation.beta",
    "adaptation.epochs",
    "adaptation.batch_size",
    "adaptation.lr",
    "adaptation.decay_epochs",
    "adaptation.decay_factor",
    "adaptation.momentum",
    "adaptation.weight_decay",
    "adaptation.teacher_policy",
    "adaptation.teacher_passes",
    "adaptation.eval_subset",
    "threat.epsilon",
    "threat.alpha",
    "threat.steps",
    "threat.init_std",
    "eval.attack",
    "eval.steps",
    "eval.queries",
    "sweep.axis",
    "sweep.methods",
    "sweep.betas",
    "sweep.severities",
    "sweep.fractions",
    "sweep.eval_fraction",
    "verify.triples",
    "verify.fd_triples",
    "paths.checkpoint",
    "paths.adapt_data",
    "paths.eval_data",
];

impl ExperimentConfig {
    /// Assigns one `section.key`; the error names the problem but not the line.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        match key {
            "experiment.seed" => self.seed = parse_int(v)?,
            "experiment.parallel" => self.parallel = parse_bool(v)?,
            "data.classes" => self.data.classes = parse_int(v)?,
            "data.samples_per_class" => self.data.samples_per_class = parse_int(v)?,
            "data.extent" => self.data.extent = parse_int(v)?,
            "data.amplitude_min" => self.data.amplitude_min = parse_real(v)?,
            "data.amplitude_max" => self.data.amplitude_max = parse_real(v)?,
            "data.texture_std" => self.data.texture_std = parse_real(v)?,
            "data.tint" => self.data.tint = parse_real(v)?,
            "data.cycles" => self.data.cycles = parse_real(v)?,
            "data.source_seed" => self.data.source_seed = parse_int(v)?,
            "data.target_seed" => self.data.target_seed = parse_int(v)?,
            "corruption.severity" => self.corruption.severity = parse_int(v)?,
            "corruption.seed" => self.corruption.seed = parse_int(v)?,
            "split.adapt_fraction" => self.split.adapt_fraction = parse_real(v)?,
            "split.eval_fraction" => self.split.eval_fraction = parse_real(v)?,
            "split.seed" => self.split.seed = parse_int(v)?,
            "split.stratified" => self.split.stratified = parse_bool(v)?,
            "model.architecture" => {
                self.model.architecture = match v {
                    "cnn" => ArchKind::Cnn,
                    "mlp" => ArchKind::Mlp,
                    _ => return Err(format!("unknown architecture '{v}' (cnn, mlp)")),
                }
            }
            "model.hidden" => self.model.hidden = parse_list(v, parse_int)?,
            "pretrain.epochs" => self.pretrain.epochs = parse_int(v)?,
            "pretrain.batch_size" => self.pretrain.batch_size = parse_int(v)?,
            "pretrain.lr" => self.pretrain.lr = parse_real(v)?,
            "pretrain.decay_epochs" => self.pretrain.decay_epochs = parse_list(v, parse_int)?,
            "pretrain.decay_factor" => self.pretrain.decay_factor = parse_real(v)?,
            "pretrain.momentum" => self.pretrain.momentum = parse_real(v)?,
            "pretrain.weight_decay" => self.pretrain.weight_decay = parse_real(v)?,
            "adaptation.method" => self.adaptation.method = parse_method(v)?,
            "adaptation.beta" => self.adaptation.beta = parse_real(v)?,
            "adaptation.epochs" => self.adaptation.epochs = parse_int(v)?,
            "adaptation.batch_size" => self.adaptation.batch_size = parse_int(v)?,
            "adaptation.lr" => self.adaptation.lr = parse_real(v)?,
            "adaptation.decay_epochs" => self.adaptation.decay_epochs = parse_list(v, parse_int)?,
            "adaptation.decay_factor" => self.adaptation.decay_factor = parse_real(v)?,
            "adaptation.momentum" => self.adaptation.momentum = parse_real(v)?,
            "adaptation.weight_decay" => self.adaptation.weight_decay = parse_real(v)?,
            "adaptation.teacher_policy" => {
                self.adaptation.teacher_policy = TeacherPolicy::parse(v)
                    .ok_or_else(|| format!("unknown teacher policy '{v}' (frozen, bn_parallel, bn_before)"))?
            }
            "adaptation.teacher_passes" => self.adaptation.teacher_passes = parse_int(v)?,
            "adaptation.eval_subset" => self.adaptation.eval_subset = parse_int(v)?,
            "threat.epsilon" => self.threat.epsilon = parse_real(v)?,
            "threat.alpha" => self.threat.alpha = parse_real(v)?,
            "threat.steps" => self.threat.steps = parse_int(v)?,
            "threat.init_std" => self.threat.init_std = parse_real(v)?,
            "eval.attack" => {
                self.eval.attack = match v {
                    "pgd" => AttackKind::Pgd,
                    "square" => AttackKind::Square,
                    _ => return Err(format!("unknown attack '{v}' (pgd, square)")),
                }
            }
            "eval.steps" => self.eval.steps = parse_int(v)?,
            "eval.queries" => self.eval.queries = parse_int(v)?,
            "sweep.axis" => {
                self.sweep.axis =
                    SweepAxis::parse(v).ok_or_else(|| format!("unknown sweep axis '{v}' (beta, severity, split_fraction)"))?
            }
            "sweep.methods" => self.sweep.methods = parse_list(v, parse_method)?,
            "sweep.betas" => self.sweep.betas = parse_list(v, parse_real)?,
            "sweep.severities" => self.sweep.severities = parse_list(v, parse_int)?,
            "sweep.fractions" => self.sweep.fractions = parse_list(v, parse_real)?,
            "sweep.eval_fraction" => self.sweep.eval_fraction = parse_real(v)?,
            "verify.triples" => self.verify.triples = parse_int(v)?,
            "verify.fd_triples" => self.verify.fd_triples = parse_int(v)?,
            "paths.checkpoint" => self.paths.checkpoint = parse_path(v),
            "paths.adapt_data" => self.paths.adapt_data = parse_path(v),
            "paths.eval_data" => self.paths.eval_data = parse_path(v),
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "experiment.seed" => self.seed.to_string(),
            "experiment.parallel" => self.parallel.to_string(),
            "data.classes" => self.data.classes.to_string(),
            "data.samples_per_class" => self.data.samples_per_class.to_string(),
            "data.extent" => self.data.extent.to_string(),
            "data.amplitude_min" => real(self.data.amplitude_min),
            "data.amplitude_max" => real(self.data.amplitude_max),
            "data.texture_std" => real(self.data.texture_std),
            "data.tint" => real(self.data.tint),
            "data.cycles" => real(self.data.cycles),
            "data.source_seed" => self.data.source_seed.to_string(),
            "data.target_seed" => self.data.target_seed.to_string(),
            "corruption.severity" => self.corruption.severity.to_string(),
            "corruption.seed" => self.corruption.seed.to_string(),
            "split.adapt_fraction" => real(self.split.adapt_fraction),
            "split.eval_fraction" => real(self.split.eval_fraction),
            "split.seed" => self.split.seed.to_string(),
            "split.stratified" => self.split.stratified.to_string(),
            "model.architecture" => match self.model.architecture {
                ArchKind::Cnn => "cnn".into(),
                ArchKind::Mlp => "mlp".into(),
            },
            "model.hidden" => list(&self.model.hidden, usize::to_string),
            "pretrain.epochs" => self.pretrain.epochs.to_string(),
            "pretrain.batch_size" => self.pretrain.batch_size.to_string(),
            "pretrain.lr" => real(self.pretrain.lr),
            "pretrain.decay_epochs" => list(&self.pretrain.decay_epochs, usize::to_string),
            "pretrain.decay_factor" => real(self.pretrain.decay_factor),
            "pretrain.momentum" => real(self.pretrain.momentum),
            "pretrain.weight_decay" => real(self.pretrain.weight_decay),
            "adaptation.method" => self.adaptation.method.name().into(),
            "adaptation.beta" => real(self.adaptation.beta),
            "adaptation.epochs" => self.adaptation.epochs.to_string(),
            "adaptation.batch_size" => self.adaptation.batch_size.to_string(),
            "adaptation.lr" => real(self.adaptation.lr),
            "adaptation.decay_epochs" => list(&self.adaptation.decay_epochs, usize::to_string),
            "adaptation.decay_factor" => real(self.adaptation.decay_factor),
            "adaptation.momentum" => real(self.adaptation.momentum),
            "adaptation.weight_decay" => real(self.adaptation.weight_decay),
            "adaptation.teacher_policy" => self.adaptation.teacher_policy.name().into(),
            "adaptation.teacher_passes" => self.adaptation.teacher_passes.to_string(),
            "adaptation.eval_subset" => self.adaptation.eval_subset.to_string(),
            "threat.epsilon" => real(self.threat.epsilon),
            "threat.alpha" => real(self.threat.alpha),
            "threat.steps" => self.threat.steps.to_string(),
            "threat.init_std" => real(self.threat.init_std),
            "eval.attack" => match self.eval.attack {
                AttackKind::Pgd => "pgd".into(),
                AttackKind::Square => "square".into(),
            },
            "eval.steps" => self.eval.steps.to_string(),
            "eval.queries" => self.eval.queries.to_string(),
            "sweep.axis" => self.sweep.axis.name().into(),
            "sweep.methods" => list(&self.sweep.methods, |m| m.name().to_string()),
            "sweep.betas" => list(&self.sweep.betas, |b| real(*b)),
            "sweep.severities" => list(&self.sweep.severities, u8::to_string),
            "sweep.fractions" => list(&self.sweep.fractions, |f| real(*f)),
            "sweep.eval_fraction" => real(self.sweep.eval_fraction),
            "verify.triples" => self.verify.triples.to_string(),
            "verify.fd_triples" => self.verify.fd_triples.to_string(),
            "paths.checkpoint" => path(&self.paths.checkpoint),
            "paths.adapt_data" => path(&self.paths.adapt_data),
            "paths.eval_data" => path(&self.paths.eval_data),
            _ => unreachable!("KEYS lists every key"),
        }
    }

    /// Canonical text form; `parse(emit(c)) == c`.
    pub fn emit(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for key in KEYS {
            let (sec, name) = key.split_once('.').expect("dotted key");
            if sec != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{sec}]");
                section = sec;
            }
            let _ = writeln!(out, "{name} = {}", self.get(key));
        }
        out
    }

    /// Semantic checks; each failure names the offending key.
    pub fn check(&self) -> Vec<(&'static str, String)> {
        let mut bad = Vec::new();
        let mut need = |ok: bool, key: &'static str, msg: String| {
            if !ok {
                bad.push((key, msg));
            }
        };
        let d = &self.data;
        need(d.classes >= 2, "data.classes", format!("need at least 2 classes, got {}", d.classes));
        need(d.samples_per_class >= 1, "data.samples_per_class", "need at least one sample per class".into());
        need(
            (2..=MAX_EXTENT).contains(&d.extent),
            "data.extent",
            format!("extent must lie in 2..={MAX_EXTENT}, got {}", d.extent),
        );
        need(
            0.0 <= d.amplitude_min && d.amplitude_min <= d.amplitude_max && d.amplitude_max <= 0.5,
            "data.amplitude_max",
            "amplitudes must satisfy 0 <= min <= max <= 0.5".into(),
        );
        need(d.texture_std >= 0.0, "data.texture_std", "texture std must be nonnegative".into());
        need((0.0..1.0).contains(&d.tint), "data.tint", "tint must lie in [0, 1)".into());
        need(d.cycles > 0.0, "data.cycles", "cycles must be positive".into());
        need(
            self.corruption.severity <= 2,
            "corruption.severity",
            format!("severity must be 0, 1 or 2, got {}", self.corruption.severity),
        );
        let s = &self.split;
        need(
            s.adapt_fraction > 0.0 && s.eval_fraction > 0.0 && s.adapt_fraction + s.eval_fraction <= 1.0 + 1e-9,
            "split.eval_fraction",
            "adapt and eval fractions must be positive and sum to at most 1".into(),
        );
        need(
            !self.model.hidden.is_empty() && self.model.hidden.iter().all(|&h| h > 0),
            "model.hidden",
            "need at least one positive hidden size".into(),
        );
        let p = &self.pretrain;
        need(p.batch_size >= 2, "pretrain.batch_size", "batch size must be at least 2".into());
        need(p.lr > 0.0, "pretrain.lr", "learning rate must be positive".into());
        need(p.decay_factor > 0.0 && p.decay_factor < 1.0, "pretrain.decay_factor", "decay factor must lie in (0, 1)".into());
        need((0.0..1.0).contains(&p.momentum), "pretrain.momentum", "momentum must lie in [0, 1)".into());
        need(p.weight_decay >= 0.0, "pretrain.weight_decay", "weight decay must be nonnegative".into());
        need(p.decay_epochs.windows(2).all(|w| w[0] <= w[1]), "pretrain.decay_epochs", "decay epochs must be sorted".into());
        let a = &self.adaptation;
        need(a.beta >= 0.0, "adaptation.beta", format!("beta must be nonnegative, got {}", a.beta));
        need(a.epochs >= 1, "adaptation.epochs", "need at least one epoch".into());
        need(a.batch_size >= 2, "adaptation.batch_size", "batch size must be at least 2 for batch statistics".into());
        need(a.lr > 0.0, "adaptation.lr", "learning rate must be positive".into());
        need(
            a.decay_factor > 0.0 && a.decay_factor < 1.0,
            "adaptation.decay_factor",
            "decay factor must lie in (0, 1)".into(),
        );
        need(
            a.decay_epochs.windows(2).all(|w| w[0] <= w[1]),
            "adaptation.decay_epochs",
            "decay epochs must be sorted".into(),
        );
        need((0.0..1.0).contains(&a.momentum), "adaptation.momentum", "momentum must lie in [0, 1)".into());
        need(a.weight_decay >= 0.0, "adaptation.weight_decay", "weight decay must be nonnegative".into());
        need(a.eval_subset >= 1, "adaptation.eval_subset", "eval subset must be nonempty".into());
        let t = &self.threat;
        need(t.epsilon >= 0.0, "threat.epsilon", "epsilon must be nonnegative".into());
        need(
            t.epsilon == 0.0 || (t.alpha > 0.0 && t.alpha <= 2.0 * t.epsilon),
            "threat.alpha",
            format!("alpha must lie in (0, 2*epsilon], got {}", t.alpha),
        );
        need(t.init_std >= 0.0, "threat.init_std", "init std must be nonnegative".into());
        need(self.eval.steps >= 1, "eval.steps", "need at least one attack step".into());
        let w = &self.sweep;
        need(!w.methods.is_empty(), "sweep.methods", "need at least one method".into());
        need(w.betas.iter().all(|&b| b >= 0.0), "sweep.betas", "betas must be nonnegative".into());
        need(w.severities.iter().all(|&s| s <= 2), "sweep.severities", "severities must be 0, 1 or 2".into());
        need(
            w.eval_fraction > 0.0 && w.eval_fraction < 1.0,
            "sweep.eval_fraction",
            "eval fraction must lie in (0, 1)".into(),
        );
        need(
            w.fractions.iter().all(|&f| f > 0.0 && f <= 1.0 - w.eval_fraction + 1e-9),
            "sweep.fractions",
            "fractions must be positive and leave room for the eval fraction".into(),
        );
        need(self.verify.triples >= 1, "verify.triples", "need at least one triple".into());
        bad
    }

    pub fn execution(&self) -> Execution {
        if self.parallel {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }

    pub fn style(&self) -> SyntheticStyle {
        SyntheticStyle {
            amplitude: (self.data.amplitude_min, self.data.amplitude_max),
            texture_std: self.data.texture_std,
            tint: self.data.tint,
            cycles: self.data.cycles,
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        let e = self.data.extent;
        let input = [SYNTHETIC_CHANNELS, e, e];
        match self.model.architecture {
            ArchKind::Cnn => {
                let mut channels = vec![SYNTHETIC_CHANNELS];
                channels.extend_from_slice(&self.model.hidden);
                ModelSpec::cnn(&channels, self.data.classes, &input)
            }
            ArchKind::Mlp => {
                let mut widths = vec![SYNTHETIC_CHANNELS * e * e];
                widths.extend_from_slice(&self.model.hidden);
                widths.push(self.data.classes);
                ModelSpec::mlp(&widths, &input)
            }
        }
    }

    pub fn corruption_spec(&self) -> CorruptionSpec {
        CorruptionSpec::for_severity(self.corruption.severity, self.corruption.seed).expect("validated severity")
    }

    pub fn split_spec(&self) -> SplitSpec {
        let mut s = SplitSpec::adapt_eval(self.split.adapt_fraction, self.split.eval_fraction, self.split.seed);
        s.stratified = self.split.stratified;
        s
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            epochs: p.epochs,
            batch_size: p.batch_size,
            schedule: LrSchedule {
                initial_lr: p.lr,
                decay_epochs: p.decay_epochs.clone(),
                decay_factor: p.decay_factor,
            },
            momentum: p.momentum,
            weight_decay: p.weight_decay,
        }
    }

    pub fn train_threat(&self) -> ThreatModel {
        ThreatModel {
            epsilon: self.threat.epsilon,
            alpha: self.threat.alpha,
            steps: self.threat.steps,
            init: if self.threat.init_std > 0.0 {
                AttackInit::Gaussian {
                    std: self.threat.init_std,
                }
            } else {
                AttackInit::None
            },
            low: 0.0,
            high: 1.0,
        }
    }

    /// The evaluation attack: same ε and α as training, uniform start.
    pub fn eval_attack(&self) -> Attack {
        let threat = ThreatModel {
            steps: self.eval.steps,
            init: AttackInit::UniformBall,
            ..self.train_threat()
        };
        match self.eval.attack {
            AttackKind::Pgd => Attack::Pgd(threat),
            AttackKind::Square => Attack::Square {
                threat,
                queries: self.eval.queries,
            },
        }
    }

    pub fn adaptation_config(&self) -> AdaptationConfig {
        let a = &self.adaptation;
        AdaptationConfig {
            method: MethodConfig::new(a.method, a.beta).expect("validated beta"),
            threat: self.train_threat(),
            epochs: a.epochs,
            batch_size: a.batch_size,
            schedule: LrSchedule {
                initial_lr: a.lr,
                decay_epochs: a.decay_epochs.clone(),
                decay_factor: a.decay_factor,
            },
            momentum: a.momentum,
            weight_decay: a.weight_decay,
            teacher_policy: a.teacher_policy,
            teacher_passes: a.teacher_passes,
            eval_attack: self.eval_attack(),
            eval_subset: a.eval_subset,
            seed: self.seed,
            exec: self.execution(),
        }
    }

    pub fn verify_config(&self) -> VerifyConfig {
        VerifyConfig {
            triples: self.verify.triples,
            fd_triples: self.verify.fd_triples,
            epsilon: self.threat.epsilon,
            seed: self.seed,
            ..VerifyConfig::default()
        }
    }
}

/// Drops a trailing `# ...` that follows whitespace; a `#` inside a value
/// (for example in a path) is kept.
fn strip_inline_comment(v: &str) -> &str {
    let bytes = v.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'#' && i > 0 && bytes[i - 1].is_ascii_whitespace() {
            return &v[..i];
        }
    }
    v
}

/// Where each key was last assigned, for error reporting.
#[derive(Clone, Debug, Default)]
pub struct Provenance {
    lines: BTreeMap<String, usize>,
}

/// Parses and validates a document. Overrides `(key, value)` are applied
/// after the document, as if appended, and are reported as line 0.
pub fn parse_config_with(text: &str, overrides: &[(String, String)]) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = ExperimentConfig::default();
    let mut prov = Provenance::default();
    let mut section: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |message: String| ConfigError { line, message };
        let l = strip_inline_comment(raw).trim();
        if l.is_empty() || l.starts_with('#') || l.starts_with(';') {
            continue;
        }
        if let Some(rest) = l.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| err(format!("malformed section header '{l}'")))?.trim();
            if !KEYS.iter().any(|k| k.split_once('.').map(|(s, _)| s) == Some(name)) {
                return Err(err(format!("unknown section '{name}'")));
            }
            section = Some(name.to_string());
            continue;
        }
        let (k, v) = l.split_once('=').ok_or_else(|| err(format!("expected 'key = value', got '{l}'")))?;
        let sec = section.as_deref().ok_or_else(|| err("key outside of any section".into()))?;
        let key = format!("{sec}.{}", k.trim());
        if prov.lines.contains_key(&key) {
            return Err(err(format!("duplicate key '{key}'")));
        }
        cfg.set(&key, v).map_err(err)?;
        prov.lines.insert(key, line);
    }
    for (k, v) in overrides {
        cfg.set(k, v).map_err(|message| ConfigError { line: 0, message })?;
        prov.lines.insert(k.clone(), 0);
    }
    if let Some((key, message)) = cfg.check().into_iter().next() {
        let line = prov.lines.get(key).copied().unwrap_or(0);
        let message = format!("{key}: {message}");
        return Err(ConfigError { line, message });
    }
    Ok(cfg)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    parse_config_with(text, &[])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = parse_config("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.adaptation.beta, 6.0);
        assert_eq!(c.threat.epsilon, 8.0 / 255.0);
        assert_eq!(c.threat.alpha, 2.0 / 255.0);
        assert_eq!(c.threat.steps, 5);
        assert_eq!(c.eval.steps, 20);
        assert_eq!(c.adaptation.epochs, 30);
        assert_eq!(c.adaptation.decay_epochs, vec![10, 25, 30]);
        assert_eq!(c.sweep.betas, vec![6.0, 8.0, 10.0, 12.0]);
    }

    #[test]
    fn emit_round_trips() {
        let mut c = ExperimentConfig::default();
        c.adaptation.method = Method::TradesU;
        c.adaptation.beta = 12.0;
        c.paths.checkpoint = Some(PathBuf::from("runs/a/pretrained.ckpt"));
        c.sweep.betas = vec![2.0, 4.0, 6.0, 8.0, 10.0, 12.0];
        c.threat.epsilon = 4.0 / 255.0;
        let again = parse_config(&c.emit()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.emit(), c.emit());
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = parse_config("[adaptation]\nbeta = 6\nfoo = 1\n").unwrap_err();
        assert_eq!(e.line, 3);
        assert!(e.message.contains("unknown key"));
        let e = parse_config("\n[corruption]\nseverity = 5\n").unwrap_err();
        assert_eq!(e.line, 3);
        let e = parse_config("[nope]\n").unwrap_err();
        assert_eq!(e.line, 1);
        let e = parse_config("[threat]\nepsilon = abc\n").unwrap_err();
        assert_eq!(e.line, 2);
        let e = parse_config("beta = 6\n").unwrap_err();
        assert_eq!(e.line, 1);
        let e = parse_config("[adaptation]\nbeta = 6\nbeta = 7\n").unwrap_err();
        assert_eq!(e.line, 3);
    }

    #[test]
    fn inline_comments_are_ignored() {
        let c = parse_config("[adaptation]\nmethod = trades_u   # label-free\n[paths]\ncheckpoint = runs/a#1/m.ckpt\n").unwrap();
        assert_eq!(c.adaptation.method, Method::TradesU);
        assert_eq!(c.paths.checkpoint, Some(PathBuf::from("runs/a#1/m.ckpt")));
    }

    #[test]
    fn fractions_and_overrides() {
        let c = parse_config_with(
            "[threat]\nepsilon = 4/255\nalpha = 1/255\n",
            &[("adaptation.beta".into(), "12".into())],
        )
        .unwrap();
        assert_eq!(c.threat.epsilon, 4.0 / 255.0);
        assert_eq!(c.adaptation.beta, 12.0);
        let e = parse_config_with("", &[("adaptation.gamma".into(), "1".into())]).unwrap_err();
        assert_eq!(e.line, 0);
    }
}
