use std::fs;
use std::path::{Path, PathBuf};

use rtta_core::adaptation::DynamicsLog;
use rtta_core::codec::write_atomic;
use rtta_core::evaluation::{beta_sweep, dynamics_emit, report_rows, rows_to_jsonl, severity_sweep, split_sweep, write_report, SweepAxis};
use rtta_core::verify::verify_proposition;
use rtta_core::Error;
use serde_json::json;

use crate::config::{parse_config_with, ConfigError, ExperimentConfig};
use crate::pipeline;

pub const VERSION: &str = env!("RTTA_VERSION");

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Pretrain,
    Adapt,
    Eval,
    Sweep,
    Dynamics,
    VerifyProp,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Pretrain => "pretrain",
            Command::Adapt => "adapt",
            Command::Eval => "eval",
            Command::Sweep => "sweep",
            Command::Dynamics => "dynamics",
            Command::VerifyProp => "verify-prop",
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Runtime(Error),
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Verification(_) => 3,
        }
    }

    /// One-line JSON diagnostic for stderr.
    pub fn diagnostic(&self) -> String {
        let v = match self {
            CliError::Config(e) => json!({"error": "config", "line": e.line, "message": e.message}),
            CliError::Runtime(e) => json!({"error": "runtime", "message": e.to_string()}),
            CliError::Verification(m) => json!({"error": "verification", "message": m}),
        };
        v.to_string()
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Verification(m) => CliError::Verification(m),
            Error::InvalidConfig(message) => CliError::Config(ConfigError { line: 0, message }),
            e => CliError::Runtime(e),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Invocation {
    pub config: Option<PathBuf>,
    pub sets: Vec<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// `sweep` only: overrides `sweep.axis`.
    pub axis: Option<String>,
}

fn config_error(message: String) -> CliError {
    CliError::Config(ConfigError { line: 0, message })
}

/// Reads, overrides and validates the config for one invocation.
pub fn resolve_config(inv: &Invocation, cmd: Command) -> Result<ExperimentConfig, CliError> {
    let text = match &inv.config {
        Some(p) => fs::read_to_string(p).map_err(|e| config_error(format!("cannot read {}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut overrides = Vec::new();
    for s in &inv.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| config_error(format!("--set expects key=value, got '{s}'")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = inv.seed {
        overrides.push(("experiment.seed".into(), seed.to_string()));
    }
    if let Some(axis) = &inv.axis {
        if cmd != Command::Sweep {
            return Err(config_error("--axis only applies to sweep".into()));
        }
        overrides.push(("sweep.axis".into(), axis.clone()));
    }
    let cfg = parse_config_with(&text, &overrides)?;
    for (key, p) in [
        ("paths.checkpoint", &cfg.paths.checkpoint),
        ("paths.adapt_data", &cfg.paths.adapt_data),
        ("paths.eval_data", &cfg.paths.eval_data),
    ] {
        if let Some(p) = p {
            if !p.exists() {
                return Err(config_error(format!("{key}: {} does not exist", p.display())));
            }
        }
    }
    if cmd == Command::Eval && cfg.paths.checkpoint.is_none() {
        return Err(config_error("eval needs paths.checkpoint".into()));
    }
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    Ok(write_atomic(path, text.as_bytes())?)
}

/// Echoes the effective config and toolkit version into `out`.
fn prepare_out(out: &Path, cfg: &ExperimentConfig) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(Error::from)?;
    write_text(&out.join("config.cfg"), &cfg.emit())?;
    write_text(&out.join("VERSION"), &format!("{VERSION}\n"))
}

fn method_label(cfg: &ExperimentConfig) -> (&'static str, f64) {
    (cfg.adaptation.method.name(), cfg.adaptation.beta)
}

/// Runs one command; returns a JSON summary for stdout.
pub fn run(cmd: Command, inv: &Invocation) -> Result<serde_json::Value, CliError> {
    let cfg = resolve_config(inv, cmd)?;
    let out = inv.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(cmd.name()));
    prepare_out(&out, &cfg)?;
    match cmd {
        Command::Pretrain => pretrain(&cfg, &out),
        Command::Adapt => adapt(&cfg, &out),
        Command::Eval => eval(&cfg, &out),
        Command::Sweep => sweep(&cfg, &out),
        Command::Dynamics => dynamics(&cfg, &out),
        Command::VerifyProp => verify(&cfg, &out),
    }
}

fn pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<serde_json::Value, CliError> {
    let source = pipeline::source_dataset(cfg)?;
    let model = pipeline::pretrain(cfg)?;
    let path = out.join("pretrained.ckpt");
    model.save(&path)?;
    let source_acc = rtta_core::evaluation::clean_accuracy(&model, &source)?;
    Ok(json!({"command": "pretrain", "checkpoint": path, "source_clean_acc": source_acc}))
}

fn adapt(cfg: &ExperimentConfig, out: &Path) -> Result<serde_json::Value, CliError> {
    let (pre, fresh) = pipeline::pretrained(cfg)?;
    if fresh {
        pre.save(&out.join("pretrained.ckpt"))?;
    }
    let (adapt_set, eval_set) = pipeline::adapt_eval_sets(cfg)?;
    let outcome = pipeline::adapt(cfg, &pre, &adapt_set, &eval_set)?;
    let student = out.join("student.ckpt");
    outcome.student.save(&student)?;
    outcome.teacher.save(&out.join("teacher.ckpt"))?;
    dynamics_emit(&outcome.log, &out.join("dynamics"))?;
    let report = pipeline::score(cfg, &outcome.student, &eval_set)?;
    let (m, b) = method_label(cfg);
    write_report(&report_rows(m, b, &report), &out.join("report"))?;
    Ok(json!({
        "command": "adapt",
        "checkpoint": student,
        "epochs": outcome.log.records.len(),
        "diverged_at": outcome.log.diverged_at,
        "clean_acc": report.clean_acc,
        "robust_acc": report.robust_acc,
    }))
}

fn eval(cfg: &ExperimentConfig, out: &Path) -> Result<serde_json::Value, CliError> {
    let (model, _) = pipeline::pretrained(cfg)?;
    let (_, eval_set) = pipeline::adapt_eval_sets(cfg)?;
    let report = pipeline::score(cfg, &model, &eval_set)?;
    let (m, b) = method_label(cfg);
    write_report(&report_rows(m, b, &report), &out.join("report"))?;
    Ok(json!({"command": "eval", "clean_acc": report.clean_acc, "robust_acc": report.robust_acc, "n": report.n_samples}))
}

fn sweep(cfg: &ExperimentConfig, out: &Path) -> Result<serde_json::Value, CliError> {
    let (pre, fresh) = pipeline::pretrained(cfg)?;
    if fresh {
        pre.save(&out.join("pretrained.ckpt"))?;
    }
    let base = cfg.adaptation_config();
    let w = &cfg.sweep;
    let table = match w.axis {
        SweepAxis::Beta => {
            let (adapt_set, eval_set) = pipeline::adapt_eval_sets(cfg)?;
            beta_sweep(&pre, &adapt_set, &eval_set, &w.methods, &w.betas, &base)?
        }
        SweepAxis::Severity => severity_sweep(
            &pre,
            &pipeline::target_pool(cfg)?,
            &w.severities,
            &w.methods,
            cfg.adaptation.beta,
            &cfg.split_spec(),
            cfg.corruption.seed,
            &base,
        )?,
        SweepAxis::SplitFraction => split_sweep(
            &pre,
            &pipeline::target_domain(cfg)?,
            &w.fractions,
            w.eval_fraction,
            &w.methods,
            cfg.adaptation.beta,
            cfg.split.seed,
            &base,
        )?,
    };
    write_text(&out.join("sweep.csv"), &table.to_csv())?;
    write_text(&out.join("sweep.jsonl"), &rows_to_jsonl(&table.rows()))?;
    let cells = out.join("cells");
    for c in &table.cells {
        let stem = cells.join(format!("{}_{}_{:?}", c.method.name(), table.axis.name(), c.axis_value));
        dynamics_emit(&c.log, &stem)?;
    }
    let spreads: serde_json::Map<String, serde_json::Value> = w
        .methods
        .iter()
        .map(|&m| (m.name().to_string(), json!(table.clean_spread(m))))
        .collect();
    Ok(json!({"command": "sweep", "axis": table.axis.name(), "cells": table.cells.len(), "clean_spread": spreads}))
}

/// Lowest clean accuracy among the first `k` logged epochs.
pub fn early_min_clean(log: &DynamicsLog, k: usize) -> Option<f64> {
    log.records.iter().take(k).map(|r| r.clean_acc).reduce(f64::min)
}

fn dynamics(cfg: &ExperimentConfig, out: &Path) -> Result<serde_json::Value, CliError> {
    let (pre, fresh) = pipeline::pretrained(cfg)?;
    if fresh {
        pre.save(&out.join("pretrained.ckpt"))?;
    }
    let (adapt_set, eval_set) = pipeline::adapt_eval_sets(cfg)?;
    let mut summary = serde_json::Map::new();
    for &m in &cfg.sweep.methods {
        let mut c = cfg.clone();
        c.adaptation.method = m;
        let outcome = pipeline::adapt(&c, &pre, &adapt_set, &eval_set)?;
        dynamics_emit(&outcome.log, &out.join(format!("dynamics_{}", m.name())))?;
        summary.insert(
            m.name().to_string(),
            json!({"early_min_clean": early_min_clean(&outcome.log, 5), "diverged_at": outcome.log.diverged_at}),
        );
    }
    Ok(json!({"command": "dynamics", "beta": cfg.adaptation.beta, "methods": summary}))
}

fn verify(cfg: &ExperimentConfig, out: &Path) -> Result<serde_json::Value, CliError> {
    let report = verify_proposition(&cfg.verify_config())?;
    let body = serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(Error::Format(e.to_string())))?;
    write_text(&out.join("verify.json"), &body)?;
    if !report.passed() {
        return Err(CliError::Verification(report.failures.join("; ")));
    }
    Ok(json!({
        "command": "verify-prop",
        "passed": true,
        "triples": report.triples,
        "max_self_residual": report.max_self_residual,
        "max_teach_reference": report.max_teach_reference,
        "max_fd_rel_error": report.max_fd_rel_error,
    }))
}
