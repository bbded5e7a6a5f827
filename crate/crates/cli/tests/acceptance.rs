//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::path::Path;
use std::process::Command as Process;
use std::time::Instant;

use rand::Rng;
use rtta::commands::early_min_clean;
use rtta::config::{parse_config, CorruptionSection, DataSection, ExperimentConfig, SplitSection};
use rtta::pipeline;
use rtta_core::attacks::{pgd_attack, square_attack, within_ball_box, AttackInit, AttackObjective, ThreatModel};
use rtta_core::audit::{audit_composite_losses, audit_primitives, AUDIT_TOLERANCE};
use rtta_core::corruptions::{apply_corruption, gaussian_noise, CorruptionSpec};
use rtta_core::data::Dataset;
use rtta_core::evaluation::clean_accuracy;
use rtta_core::nn::{build_model, Checkpoint};
use rtta_core::objectives::Method;
use rtta_core::rng::rng_for;
use rtta_core::verify::{verify_proposition, VerifyConfig};
use rtta_core::Tensor;

const SEEDS: u64 = 5;
const BETAS: [f64; 2] = [6.0, 12.0];
const RUNS: [Method; 2] = [Method::Tgra, Method::TradesU];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

/// The default desk experiment with every seed shifted by `s`.
fn seeded(s: u64) -> ExperimentConfig {
    let d = ExperimentConfig::default();
    ExperimentConfig {
        seed: s,
        data: DataSection {
            source_seed: 100 + s,
            target_seed: 200 + s,
            ..d.data
        },
        corruption: CorruptionSection { seed: 300 + s, ..d.corruption },
        split: SplitSection { seed: s, ..d.split },
        ..ExperimentConfig::default()
    }
}

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_rtta")
}

fn criterion_1() -> Verdict {
    let prim = audit_primitives(100, 2024).expect("primitive audit");
    let loss = audit_composite_losses(100, 2025).expect("loss audit");
    let worst = prim.iter().chain(&loss).max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    let all = prim.iter().chain(&loss).all(|l| l.passed() && l.cases >= 100);
    verdict(
        all,
        format!(
            "{} primitives and {} losses x 100 cases, worst {} at {:.2e} (tol {AUDIT_TOLERANCE:e})",
            prim.len(),
            loss.len(),
            worst.name,
            worst.max_rel_error
        ),
    )
}

fn criterion_2() -> Verdict {
    let report = verify_proposition(&VerifyConfig::default()).expect("verifier");
    let dir = tempfile::tempdir().unwrap();
    let status = Process::new(binary())
        .args(["verify-prop", "--out"])
        .arg(dir.path())
        .output()
        .expect("spawn rtta");
    let ok = report.passed()
        && report.triples >= 100
        && report.max_self_residual < 1e-6
        && report.max_teach_reference == 0.0
        && status.status.code() == Some(0);
    verdict(
        ok,
        format!(
            "{} triples, self residual {:.2e}, teacher reference side {:e}, verify-prop exit {:?}",
            report.triples,
            report.max_self_residual,
            report.max_teach_reference,
            status.status.code()
        ),
    )
}

fn criterion_3(pretrained: &Checkpoint, eval: &Dataset) -> Verdict {
    let shape = eval.image_shape().to_vec();
    let model = build_model(&pretrained.spec, 99).unwrap();
    let mut rng = rng_for(31, 0);
    let mut outside = 0;
    for case in 0..1000u64 {
        let n = rng.random_range(1..3);
        let mut full = vec![n];
        full.extend_from_slice(&shape);
        let len: usize = full.iter().product();
        let data = (0..len).map(|_| rng.random_range(-0.2f64..1.2).clamp(0.0, 1.0)).collect();
        let x = Tensor::new(full, data).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..eval.num_classes())).collect();
        let epsilon = if case % 10 == 0 { 0.0 } else { rng.random_range(1e-3..0.1) };
        let tm = ThreatModel {
            epsilon,
            alpha: if epsilon > 0.0 { rng.random_range(0.1..2.0) * epsilon } else { 0.01 },
            steps: rng.random_range(1..3),
            init: [AttackInit::None, AttackInit::UniformBall, AttackInit::Gaussian { std: 0.01 }][case as usize % 3],
            low: 0.0,
            high: 1.0,
        };
        let pgd = pgd_attack(&model, &x, &AttackObjective::ce_true_label(&labels), &tm, case).unwrap();
        let sq = square_attack(&model, &x, &labels, &tm, 8, case).unwrap();
        if !within_ball_box(&pgd, &x, &tm, 1e-12) || !within_ball_box(&sq.x_adv, &x, &tm, 1e-12) {
            outside += 1;
        }
    }
    let zero = ThreatModel {
        epsilon: 0.0,
        ..ThreatModel::evaluation()
    };
    let probe = eval.subset(&[0, 1, 2]);
    let obj = AttackObjective::ce_true_label(probe.labels());
    let identity = pgd_attack(pretrained, probe.inputs(), &obj, &zero, 0).unwrap() == *probe.inputs();
    let tm = ThreatModel {
        init: AttackInit::None,
        ..ThreatModel::evaluation()
    };
    let mut rose = 0;
    for t in 0..100u64 {
        let x = eval.subset(&[rng_for(t, 1).random_range(0..eval.len())]);
        let obj = AttackObjective::ce_true_label(x.labels());
        let adv = pgd_attack(pretrained, x.inputs(), &obj, &tm, t).unwrap();
        let before = obj.value_and_grad(pretrained, x.inputs()).unwrap().0;
        let after = obj.value_and_grad(pretrained, &adv).unwrap().0;
        rose += usize::from(after > before);
    }
    verdict(
        outside == 0 && identity && rose >= 95,
        format!("{outside}/1000 fuzz outputs outside ball and box, eps=0 identity {identity}, objective rose in {rose}/100"),
    )
}

fn criterion_4() -> Verdict {
    let s1 = CorruptionSpec::for_severity(1, 0).unwrap();
    let s2 = CorruptionSpec::for_severity(2, 0).unwrap();
    let table = s1.noise_sigma.to_bits() == 0.03f64.to_bits()
        && s2.noise_sigma.to_bits() == 0.06f64.to_bits()
        && (s1.blur_kernel, s2.blur_kernel) == (3, 5)
        && s1.jitter_strength.to_bits() == 0.1f64.to_bits()
        && s2.jitter_strength.to_bits() == 0.2f64.to_bits()
        && s1.hue == 0.0
        && s2.hue == 0.0;
    let img = Tensor::new(vec![3, 8, 8], (0..192).map(|i| (i % 13) as f64 / 12.0).collect()).unwrap();
    let identity = apply_corruption(&img, &CorruptionSpec::for_severity(0, 5).unwrap()).unwrap() == img;
    let gray = Tensor::new(vec![3, 64, 64], vec![0.5; 3 * 64 * 64]).unwrap();
    let mut worst = 0.0f64;
    for sigma in [0.03, 0.06] {
        let noisy = gaussian_noise(&gray, sigma, 17).unwrap();
        let d: Vec<f64> = noisy.data().iter().map(|v| v - 0.5).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt();
        worst = worst.max((sd / sigma - 1.0).abs());
    }
    verdict(
        table && identity && worst < 0.03,
        format!("severity table matches {table}, severity 0 identity {identity}, worst noise sigma deviation {:.2}%", 100.0 * worst),
    )
}

/// Everything criteria 5 to 8 need from one seed.
struct SeedRun {
    pre_clean: f64,
    pre_robust: f64,
    /// (method, beta) -> (final clean, early minimum clean)
    cells: Vec<(Method, f64, f64, f64)>,
    tgra6_robust: f64,
    tgra6_clean: f64,
    adapted_teacher_clean: f64,
}

fn run_seed(s: u64) -> SeedRun {
    let cfg = seeded(s);
    let (pre, _) = pipeline::pretrained(&cfg).expect("pretrain");
    let (adapt, eval) = pipeline::adapt_eval_sets(&cfg).expect("target data");
    let pre_report = pipeline::score(&cfg, &pre, &eval).expect("score pretrained");
    let mut run = SeedRun {
        pre_clean: pre_report.clean_acc,
        pre_robust: *pre_report.robust_acc.values().next().unwrap(),
        cells: Vec::new(),
        tgra6_robust: 0.0,
        tgra6_clean: 0.0,
        adapted_teacher_clean: 0.0,
    };
    for beta in BETAS {
        for method in RUNS {
            let mut c = cfg.clone();
            c.adaptation.method = method;
            c.adaptation.beta = beta;
            let out = pipeline::adapt(&c, &pre, &adapt, &eval).expect("adaptation");
            let clean = clean_accuracy(&out.student, &eval).unwrap();
            run.cells.push((method, beta, clean, early_min_clean(&out.log, 5).unwrap_or(f64::NAN)));
            if method == Method::Tgra && beta == 6.0 {
                let r = pipeline::score(&c, &out.student, &eval).unwrap();
                run.tgra6_clean = r.clean_acc;
                run.tgra6_robust = *r.robust_acc.values().next().unwrap();
                run.adapted_teacher_clean = clean_accuracy(&out.teacher, &eval).unwrap();
            }
        }
    }
    run
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn spread(run: &SeedRun, m: Method) -> f64 {
    let accs: Vec<f64> = run.cells.iter().filter(|c| c.0 == m).map(|c| c.2).collect();
    accs.iter().cloned().fold(f64::MIN, f64::max) - accs.iter().cloned().fold(f64::MAX, f64::min)
}

fn early(run: &SeedRun, m: Method, beta: Option<f64>) -> Vec<f64> {
    run.cells
        .iter()
        .filter(|c| c.0 == m && beta.is_none_or(|b| c.1 == b))
        .map(|c| c.3)
        .collect()
}

fn criterion_5(runs: &[SeedRun]) -> Verdict {
    let t = mean(runs.iter().map(|r| spread(r, Method::Tgra)));
    let u = mean(runs.iter().map(|r| spread(r, Method::TradesU)));
    verdict(t < u, format!("mean clean spread over beta 6 and 12: tgra {t:.3} vs trades_u {u:.3}"))
}

fn criterion_6(runs: &[SeedRun]) -> Verdict {
    let avg = |m, b| mean(runs.iter().flat_map(|r| early(r, m, b)));
    let (t, u) = (avg(Method::Tgra, None), avg(Method::TradesU, None));
    let per_beta: Vec<String> = BETAS
        .iter()
        .map(|&b| format!("beta {b}: {:.3} vs {:.3}", avg(Method::Tgra, Some(b)), avg(Method::TradesU, Some(b))))
        .collect();
    verdict(
        u < t,
        format!("mean min clean over epochs 1-5: tgra {t:.3} vs trades_u {u:.3} ({})", per_beta.join(", ")),
    )
}

fn criterion_7(runs: &[SeedRun]) -> Verdict {
    let pre_r = mean(runs.iter().map(|r| r.pre_robust));
    let pre_c = mean(runs.iter().map(|r| r.pre_clean));
    let rob = mean(runs.iter().map(|r| r.tgra6_robust));
    let clean = mean(runs.iter().map(|r| r.tgra6_clean));
    verdict(
        pre_r < 0.10 && rob > pre_r && (clean - pre_c).abs() <= 0.15,
        format!("pgd20 robust {pre_r:.3} -> {rob:.3}, clean {pre_c:.3} -> {clean:.3}"),
    )
}

fn criterion_8(runs: &[SeedRun]) -> Verdict {
    let frozen = mean(runs.iter().map(|r| r.pre_clean));
    let adapted = mean(runs.iter().map(|r| r.adapted_teacher_clean));
    verdict(adapted >= frozen, format!("teacher clean accuracy frozen {frozen:.3} vs bn-adapted {adapted:.3}"))
}

fn adapt_run(out: &Path) -> bool {
    Process::new(binary())
        .args([
            "adapt",
            "--seed",
            "7",
            "--set",
            "adaptation.epochs=3",
            "--set",
            "data.samples_per_class=16",
            "--set",
            "pretrain.epochs=4",
            "--out",
        ])
        .arg(out)
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn criterion_9() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ran = adapt_run(&a) && adapt_run(&b);
    let files = [
        "pretrained.ckpt",
        "student.ckpt",
        "teacher.ckpt",
        "dynamics.csv",
        "dynamics.jsonl",
        "report.csv",
        "report.jsonl",
        "config.cfg",
    ];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(a.join(f)).ok().is_none_or(|x| Some(x) != std::fs::read(b.join(f)).ok()))
        .collect();
    verdict(
        ran && differing.is_empty(),
        format!("two adapt runs completed {ran}, differing artifacts {differing:?}"),
    )
}

fn criterion_10(pretrained: &Checkpoint, eval: &Dataset) -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("m.ckpt");
    pretrained.save(&ck).unwrap();
    let ck_ok = Checkpoint::load(&ck).unwrap() == *pretrained && std::fs::read(&ck).unwrap() == pretrained.to_bytes();
    let ds = dir.path().join("eval.bin");
    eval.save(&ds).unwrap();
    let back = Dataset::load(&ds).unwrap();
    let ds_ok = back == *eval && back.to_bytes() == std::fs::read(&ds).unwrap();
    let mut cfg = seeded(3);
    cfg.adaptation.method = Method::TradesU;
    cfg.adaptation.beta = 12.0;
    cfg.threat.epsilon = 4.0 / 255.0;
    cfg.paths.checkpoint = Some(ck.clone());
    let cfg_ok = [ExperimentConfig::default(), cfg]
        .iter()
        .all(|c| parse_config(&c.emit()).as_ref() == Ok(c));
    verdict(
        ck_ok && ds_ok && cfg_ok,
        format!("checkpoint {ck_ok}, dataset {ds_ok}, config {cfg_ok}"),
    )
}

fn report(n: usize, name: &str, start: Instant, v: Verdict, failed: &mut Vec<usize>) {
    let tag = if v.pass { "PASS" } else { "FAIL" };
    println!("criterion {n:>2} [{tag}] {name}: {} ({:.1}s)", v.detail, start.elapsed().as_secs_f64());
    if !v.pass {
        failed.push(n);
    }
}

fn main() {
    // `cargo test -- --list` and similar probes pass flags; run only on a plain invocation.
    if std::env::args().skip(1).any(|a| a == "--list") {
        return;
    }
    let mut failed = Vec::new();
    let t = Instant::now();
    report(1, "autodiff soundness", t, criterion_1(), &mut failed);
    let t = Instant::now();
    report(2, "gradient decomposition", t, criterion_2(), &mut failed);

    let t = Instant::now();
    let base = seeded(0);
    let (pretrained, _) = pipeline::pretrained(&base).expect("pretrain");
    let (_, eval) = pipeline::adapt_eval_sets(&base).expect("target data");
    report(3, "attack contracts", t, criterion_3(&pretrained, &eval), &mut failed);
    let t = Instant::now();
    report(4, "corruption fidelity", t, criterion_4(), &mut failed);

    let t = Instant::now();
    let runs: Vec<SeedRun> = (0..SEEDS).map(run_seed).collect();
    println!("   ({} seeds x {} adaptation runs in {:.1}s)", SEEDS, BETAS.len() * RUNS.len(), t.elapsed().as_secs_f64());
    let t = Instant::now();
    report(5, "beta sensitivity", t, criterion_5(&runs), &mut failed);
    report(6, "early dynamics", t, criterion_6(&runs), &mut failed);
    report(7, "robustification", t, criterion_7(&runs), &mut failed);
    report(8, "teacher bn adaptation", t, criterion_8(&runs), &mut failed);
    let t = Instant::now();
    report(9, "determinism", t, criterion_9(), &mut failed);
    let t = Instant::now();
    report(10, "serialization", t, criterion_10(&pretrained, &eval), &mut failed);

    if failed.is_empty() {
        println!("acceptance: all 10 criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
