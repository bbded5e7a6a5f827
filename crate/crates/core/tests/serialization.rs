mod common;

use rtta_core::adaptation::{DynamicsLog, DynamicsRecord};
use rtta_core::data::Dataset;
use rtta_core::evaluation::{rows_from_csv, rows_to_csv, ReportRow};
use rtta_core::nn::Checkpoint;

#[test]
fn checkpoint_and_dataset_files_round_trip_bit_exactly() {
    let (model, adapt, _) = common::desk();
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("m.ckpt");
    model.save(&ck).unwrap();
    let back = Checkpoint::load(&ck).unwrap();
    assert_eq!(back, model);
    assert_eq!(back.to_bytes(), std::fs::read(&ck).unwrap());
    let ds = dir.path().join("d.bin");
    adapt.save(&ds).unwrap();
    let back = Dataset::load(&ds).unwrap();
    assert_eq!(back, adapt);
    assert_eq!(back.checksum(), adapt.checksum());
    assert_eq!(back.to_bytes(), std::fs::read(&ds).unwrap());
}

#[test]
fn corrupted_files_are_rejected() {
    let (model, _, _) = common::desk();
    let mut bytes = model.to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    bytes[0] ^= 0xff;
    assert!(Checkpoint::from_bytes(&bytes).is_err());
}

#[test]
fn text_artifacts_round_trip() {
    let log = DynamicsLog {
        records: (1..=3)
            .map(|e| DynamicsRecord {
                epoch: e,
                lr: 1e-3 / e as f64,
                loss_acc_term: 0.1 * e as f64,
                loss_rob_term: 1.0 / 3.0,
                clean_acc: 0.75,
                robust_acc: 0.125,
                teacher_clean_acc: 0.8,
            })
            .collect(),
        diverged_at: None,
    };
    assert_eq!(DynamicsLog::from_jsonl(&log.to_jsonl()).unwrap(), log);
    assert_eq!(DynamicsLog::from_csv(&log.to_csv()).unwrap(), log);
    let rows = vec![ReportRow {
        method: "tgra".into(),
        beta: 6.0,
        severity: 2,
        clean_acc: 0.1 + 0.2,
        attack: "pgd20".into(),
        robust_acc: 1.0 / 7.0,
        n: 64,
        seed: 3,
    }];
    assert_eq!(rows_from_csv(&rows_to_csv(&rows)).unwrap(), rows);
}
