use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 10] = [
    "--set",
    "data.samples_per_class=8",
    "--set",
    "data.extent=6",
    "--set",
    "pretrain.epochs=2",
    "--set",
    "adaptation.epochs=2",
    "--set",
    "eval.steps=2",
];

fn rtta(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rtta"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("spawn rtta")
}

fn stderr_json(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().last().expect("a diagnostic line");
    serde_json::from_str(line).expect("diagnostic is JSON")
}

#[test]
fn config_errors_exit_1_with_a_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "[corruption]\n# comment\nseverity = 5\n").unwrap();
    let o = rtta(&["adapt", "--config", cfg.to_str().unwrap()], &dir.path().join("run"));
    assert_eq!(o.status.code(), Some(1));
    let diag = stderr_json(&o);
    assert_eq!(diag["error"], "config");
    assert_eq!(diag["line"], 3);

    let o = rtta(&["eval", "--set", "adaptation.gamma=1"], &dir.path().join("run"));
    assert_eq!(o.status.code(), Some(1));
    let o = rtta(&["adapt", "--set", "paths.checkpoint=/nonexistent/model.ckpt"], &dir.path().join("run"));
    assert_eq!(o.status.code(), Some(1));
    let o = rtta(&["bogus-command"], &dir.path().join("run"));
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn verify_prop_exits_0_and_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = rtta(&["verify-prop", "--set", "verify.triples=20"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("verify.json")).unwrap()).unwrap();
    assert!(report["max_self_residual"].as_f64().unwrap() < 1e-6);
    assert_eq!(report["max_teach_reference"].as_f64().unwrap(), 0.0);
    assert!(dir.path().join("VERSION").exists());
}

#[test]
fn adapted_checkpoint_is_accepted_by_eval() {
    let dir = tempfile::tempdir().unwrap();
    let pre = dir.path().join("pre");
    let o = rtta(&[&["pretrain"], &SMALL[..]].concat(), &pre);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = format!("paths.checkpoint={}", pre.join("pretrained.ckpt").display());

    let run = dir.path().join("adapt");
    let o = rtta(&[&["adapt", "--set", &ckpt], &SMALL[..]].concat(), &run);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["student.ckpt", "teacher.ckpt", "dynamics.csv", "dynamics.jsonl", "report.csv", "config.cfg", "VERSION"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    assert!(!run.join("pretrained.ckpt").exists());
    let echoed = fs::read_to_string(run.join("config.cfg")).unwrap();
    let parsed = rtta::parse_config(&echoed).unwrap();
    assert_eq!(parsed.adaptation.epochs, 2);

    let student = format!("paths.checkpoint={}", run.join("student.ckpt").display());
    let o = rtta(&[&["eval", "--set", &student], &SMALL[..]].concat(), &dir.path().join("eval"));
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("eval/report.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("tgra,6.0,2,"));
}

#[test]
fn beta_sweep_emits_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        &["sweep", "--axis", "beta", "--set", "sweep.betas=6,12", "--set", "sweep.methods=tgra,trades_u"],
        &SMALL[..],
    ]
    .concat();
    let o = rtta(&args, dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
    assert!(csv.starts_with("sweep_beta,method,beta,"));
    assert_eq!(fs::read_dir(dir.path().join("cells")).unwrap().count(), 8);
}

#[test]
fn axis_flag_is_rejected_outside_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_rtta"))
        .args(["adapt", "--axis", "beta"])
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}
