//! Clean and robust accuracy, report files, and sweep grids over β,
//! corruption severity and adaptation-set size.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adaptation::{run_adaptation, AdaptationConfig, DynamicsLog, TrainingData};
use crate::attacks::{pgd_attack, square_attack, AttackObjective, ThreatModel};
use crate::codec::write_atomic;
use crate::data::{make_target_domain, split_dataset, Dataset, Domain, SplitSpec};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::nn::{argmax_rows, Checkpoint};
use crate::objectives::{Method, MethodConfig};
use crate::rng::{derive_seed, stream};

/// Chunk size for batched clean inference.
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Attack {
    Pgd(ThreatModel),
    Square { threat: ThreatModel, queries: usize },
}

impl Attack {
    pub fn threat(&self) -> &ThreatModel {
        match self {
            Attack::Pgd(t) | Attack::Square { threat: t, .. } => t,
        }
    }

    /// `pgd20`, `square1000`, ...
    pub fn name(&self) -> String {
        match self {
            Attack::Pgd(t) => format!("pgd{}", t.steps),
            Attack::Square { queries, .. } => format!("square{queries}"),
        }
    }
}

/// Fraction of `eval_set` classified correctly with frozen statistics.
pub fn clean_accuracy(model: &Checkpoint, eval_set: &Dataset) -> Result<f64> {
    if eval_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let labels = eval_set.labels();
    let mut correct = 0usize;
    for start in (0..eval_set.len()).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(eval_set.len())).collect();
        let preds = argmax_rows(&model.logits(&eval_set.inputs().select_rows(&idx))?);
        correct += preds.iter().zip(&idx).filter(|&(&p, &i)| p == labels[i]).count();
    }
    Ok(correct as f64 / eval_set.len() as f64)
}

/// Fraction of samples still classified correctly after the attack. Each
/// sample is attacked alone with seed `derive_seed(seed, index)`, so the
/// result does not depend on scheduling.
pub fn robust_accuracy(model: &Checkpoint, eval_set: &Dataset, attack: &Attack, seed: u64, exec: Execution) -> Result<f64> {
    if eval_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let labels = eval_set.labels();
    let hits = exec.try_map(eval_set.len(), |i| -> Result<bool> {
        let x = eval_set.inputs().row(i);
        let y = [labels[i]];
        let s = derive_seed(seed, i as u64);
        let x_adv = match attack {
            Attack::Pgd(tm) => pgd_attack(model, &x, &AttackObjective::ce_true_label(&y), tm, s)?,
            Attack::Square { threat, queries } => square_attack(model, &x, &y, threat, *queries, s)?.x_adv,
        };
        Ok(model.predict(&x_adv)?[0] == y[0])
    })?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / eval_set.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub severity: u8,
    pub clean_acc: f64,
    /// Attack name to robust accuracy.
    pub robust_acc: BTreeMap<String, f64>,
    pub n_samples: usize,
    pub seed: u64,
}

pub fn evaluate(model: &Checkpoint, eval_set: &Dataset, attacks: &[Attack], seed: u64, exec: Execution) -> Result<EvalReport> {
    let severity = match eval_set.domain() {
        Domain::Source => 0,
        Domain::Target { severity } => severity,
    };
    let mut robust_acc = BTreeMap::new();
    for a in attacks {
        robust_acc.insert(a.name(), robust_accuracy(model, eval_set, a, seed, exec)?);
    }
    Ok(EvalReport {
        severity,
        clean_acc: clean_accuracy(model, eval_set)?,
        robust_acc,
        n_samples: eval_set.len(),
        seed,
    })
}

pub const REPORT_CSV_HEADER: &str = "method,beta,severity,clean_acc,attack,robust_acc,n,seed";

/// One line of a report file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub beta: f64,
    pub severity: u8,
    pub clean_acc: f64,
    pub attack: String,
    pub robust_acc: f64,
    pub n: usize,
    pub seed: u64,
}

/// One row per attack in `report`.
pub fn report_rows(method: &str, beta: f64, report: &EvalReport) -> Vec<ReportRow> {
    report
        .robust_acc
        .iter()
        .map(|(attack, &robust_acc)| ReportRow {
            method: method.to_string(),
            beta,
            severity: report.severity,
            clean_acc: report.clean_acc,
            attack: attack.clone(),
            robust_acc,
            n: report.n_samples,
            seed: report.seed,
        })
        .collect()
}

pub fn rows_to_csv(rows: &[ReportRow]) -> String {
    let mut out = format!("{REPORT_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:?},{},{:?},{},{:?},{},{}",
            r.method, r.beta, r.severity, r.clean_acc, r.attack, r.robust_acc, r.n, r.seed
        );
    }
    out
}

pub fn rows_from_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_CSV_HEADER) {
        return Err(Error::Format("unexpected report CSV header".into()));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let bad = || Error::Format(format!("line {}: malformed report row", i + 2));
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 8 {
                return Err(bad());
            }
            Ok(ReportRow {
                method: f[0].to_string(),
                beta: f[1].parse().map_err(|_| bad())?,
                severity: f[2].parse().map_err(|_| bad())?,
                clean_acc: f[3].parse().map_err(|_| bad())?,
                attack: f[4].to_string(),
                robust_acc: f[5].parse().map_err(|_| bad())?,
                n: f[6].parse().map_err(|_| bad())?,
                seed: f[7].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn rows_to_jsonl(rows: &[ReportRow]) -> String {
    rows.iter().map(|r| serde_json::to_string(r).expect("plain row") + "\n").collect()
}

/// Writes `<stem>.csv` and `<stem>.jsonl`.
pub fn write_report(rows: &[ReportRow], stem: &Path) -> Result<()> {
    write_atomic(&stem.with_extension("csv"), rows_to_csv(rows).as_bytes())?;
    write_atomic(&stem.with_extension("jsonl"), rows_to_jsonl(rows).as_bytes())
}

/// Writes a non-empty dynamics log as `<stem>.csv` and `<stem>.jsonl`.
pub fn dynamics_emit(log: &DynamicsLog, stem: &Path) -> Result<()> {
    if log.records.is_empty() {
        return Err(Error::InvalidConfig("refusing to write an empty dynamics log".into()));
    }
    log.write(stem)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Beta,
    Severity,
    SplitFraction,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Beta => "beta",
            SweepAxis::Severity => "severity",
            SweepAxis::SplitFraction => "split_fraction",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [SweepAxis::Beta, SweepAxis::Severity, SweepAxis::SplitFraction]
            .into_iter()
            .find(|a| a.name() == s)
    }
}

#[derive(Clone, Debug)]
pub struct SweepCell {
    pub axis_value: f64,
    pub method: Method,
    pub beta: f64,
    pub report: EvalReport,
    pub log: DynamicsLog,
    pub eval_checksum: u64,
}

#[derive(Clone, Debug)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    /// `max − min` of final clean accuracy across the cells of `method`.
    pub fn clean_spread(&self, method: Method) -> Option<f64> {
        let accs: Vec<f64> = self.cells.iter().filter(|c| c.method == method).map(|c| c.report.clean_acc).collect();
        if accs.is_empty() {
            return None;
        }
        let max = accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = accs.iter().cloned().fold(f64::INFINITY, f64::min);
        Some(max - min)
    }

    pub fn rows(&self) -> Vec<ReportRow> {
        self.cells
            .iter()
            .flat_map(|c| report_rows(c.method.name(), c.beta, &c.report))
            .collect()
    }

    /// Axis value per row, for tables whose axis is not β.
    pub fn to_csv(&self) -> String {
        let mut out = format!("sweep_{},{REPORT_CSV_HEADER}\n", self.axis.name());
        for c in &self.cells {
            for r in report_rows(c.method.name(), c.beta, &c.report) {
                let line = rows_to_csv(&[r]);
                let _ = writeln!(out, "{:?},{}", c.axis_value, line.lines().nth(1).unwrap_or_default());
            }
        }
        out
    }

    fn check_shared_eval(&self) -> Result<()> {
        match self.cells.first() {
            Some(first) if self.cells.iter().any(|c| c.eval_checksum != first.eval_checksum) => Err(
                Error::Verification(format!("{} sweep cells were scored on different eval sets", self.axis.name())),
            ),
            _ => Ok(()),
        }
    }
}

/// Runs one adaptation per job and scores the final student on its eval set.
fn run_cells(
    pretrained: &Checkpoint,
    jobs: &[(f64, MethodConfig, &Dataset, &Dataset)],
    base: &AdaptationConfig,
) -> Result<Vec<SweepCell>> {
    base.exec.try_map(jobs.len(), |j| {
        let (axis_value, method, target, eval_set) = jobs[j];
        let cfg = AdaptationConfig {
            method,
            ..base.clone()
        };
        let out = run_adaptation(pretrained, TrainingData::for_method(target, method.method), eval_set, &cfg)?;
        let seed = derive_seed(cfg.seed, stream::EVAL_ATTACK);
        let report = evaluate(&out.student, eval_set, &[cfg.eval_attack], seed, cfg.exec)?;
        Ok(SweepCell {
            axis_value,
            method: method.method,
            beta: method.beta,
            report,
            log: out.log,
            eval_checksum: eval_set.checksum(),
        })
    })
}

/// One full adaptation per (method, β) cell, all scored on `eval_set`.
pub fn beta_sweep(
    pretrained: &Checkpoint,
    target: &Dataset,
    eval_set: &Dataset,
    methods: &[Method],
    betas: &[f64],
    base: &AdaptationConfig,
) -> Result<SweepTable> {
    let mut jobs = Vec::new();
    for &m in methods {
        for &b in betas {
            jobs.push((b, MethodConfig::new(m, b)?, target, eval_set));
        }
    }
    let table = SweepTable {
        axis: SweepAxis::Beta,
        cells: run_cells(pretrained, &jobs, base)?,
    };
    table.check_shared_eval()?;
    Ok(table)
}

/// Corrupts `pool` at each severity and splits it with `split` (adaptation
/// part first, eval part second). The split depends only on labels and seed,
/// so every severity is scored on the same sample indices.
#[allow(clippy::too_many_arguments)]
pub fn severity_sweep(
    pretrained: &Checkpoint,
    pool: &Dataset,
    severities: &[u8],
    methods: &[Method],
    beta: f64,
    split: &SplitSpec,
    corruption_seed: u64,
    base: &AdaptationConfig,
) -> Result<SweepTable> {
    let mut domains = Vec::new();
    for &s in severities {
        let target = make_target_domain(pool, s, corruption_seed, base.exec)?;
        let mut parts = split_dataset(&target, split)?.into_iter();
        let adapt = parts.next().ok_or(Error::EmptyDataset)?;
        let eval = parts.next().ok_or_else(|| Error::InvalidConfig("split needs an eval part".into()))?;
        domains.push((s, adapt, eval));
    }
    let mut jobs = Vec::new();
    for (s, adapt, eval) in &domains {
        for &m in methods {
            jobs.push((*s as f64, MethodConfig::new(m, beta)?, adapt, eval));
        }
    }
    Ok(SweepTable {
        axis: SweepAxis::Severity,
        cells: run_cells(pretrained, &jobs, base)?,
    })
}

/// Holds out a fixed stratified eval share of `target`, then adapts on
/// `fraction` of the whole set for each fraction.
#[allow(clippy::too_many_arguments)]
pub fn split_sweep(
    pretrained: &Checkpoint,
    target: &Dataset,
    fractions: &[f64],
    eval_fraction: f64,
    methods: &[Method],
    beta: f64,
    split_seed: u64,
    base: &AdaptationConfig,
) -> Result<SweepTable> {
    let pool_fraction = 1.0 - eval_fraction;
    let outer = SplitSpec::adapt_eval(pool_fraction, eval_fraction, split_seed);
    let mut parts = split_dataset(target, &outer)?.into_iter();
    let (pool, eval) = (parts.next().ok_or(Error::EmptyDataset)?, parts.next().ok_or(Error::EmptyDataset)?);
    let mut adapt_sets = Vec::new();
    for &f in fractions {
        if !(f > 0.0 && f <= pool_fraction + 1e-9) {
            return Err(Error::InvalidConfig(format!(
                "adaptation fraction {f} exceeds the {pool_fraction} left after the eval hold-out"
            )));
        }
        let share = (f / pool_fraction).min(1.0);
        let adapt = if share >= 1.0 - 1e-9 {
            pool.clone()
        } else {
            let spec = SplitSpec {
                fractions: vec![share, 1.0 - share],
                seed: derive_seed(split_seed, 1),
                stratified: true,
            };
            split_dataset(&pool, &spec)?.swap_remove(0)
        };
        adapt_sets.push((f, adapt));
    }
    let mut jobs = Vec::new();
    for (f, adapt) in &adapt_sets {
        for &m in methods {
            jobs.push((*f, MethodConfig::new(m, beta)?, adapt, &eval));
        }
    }
    let table = SweepTable {
        axis: SweepAxis::SplitFraction,
        cells: run_cells(pretrained, &jobs, base)?,
    };
    table.check_shared_eval()?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use crate::nn::{build_model, ModelSpec};

    #[test]
    fn constant_predictor_scores_class_share() {
        let d = generate_synthetic(10, 3, 4, 0).unwrap();
        let spec = ModelSpec::mlp(&[48, 10], &[3, 4, 4]);
        let mut m = build_model(&spec, 0).unwrap();
        m.params.values_mut().for_each(|t| t.data_mut().fill(0.0));
        m.params.get_mut("fc0.bias").unwrap().data_mut()[0] = 1.0;
        assert!((clean_accuracy(&m, &d).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn zero_epsilon_robust_equals_clean() {
        let d = generate_synthetic(3, 4, 4, 1).unwrap();
        let m = build_model(&ModelSpec::cnn(&[3, 2], 3, &[3, 4, 4]), 2).unwrap();
        let tm = ThreatModel {
            epsilon: 0.0,
            ..ThreatModel::evaluation()
        };
        let clean = clean_accuracy(&m, &d).unwrap();
        for exec in [Execution::Sequential, Execution::Parallel] {
            assert_eq!(robust_accuracy(&m, &d, &Attack::Pgd(tm), 5, exec).unwrap(), clean);
        }
    }

    #[test]
    fn report_csv_round_trip() {
        let report = EvalReport {
            severity: 2,
            clean_acc: 0.75,
            robust_acc: BTreeMap::from([("pgd20".into(), 0.25), ("square100".into(), 0.5)]),
            n_samples: 8,
            seed: 3,
        };
        let rows = report_rows("tgra", 6.0, &report);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows_from_csv(&rows_to_csv(&rows)).unwrap(), rows);
        assert!(rows_to_csv(&rows).starts_with(REPORT_CSV_HEADER));
    }

    #[test]
    fn empty_sets_are_errors() {
        let d = generate_synthetic(2, 2, 4, 0).unwrap().subset(&[]);
        let m = build_model(&ModelSpec::mlp(&[48, 2], &[3, 4, 4]), 0).unwrap();
        assert!(matches!(clean_accuracy(&m, &d), Err(Error::EmptyDataset)));
    }
}
