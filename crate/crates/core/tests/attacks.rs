mod common;

use rand::Rng;
use rtta_core::attacks::{pgd_attack, square_attack, within_ball_box, AttackInit, AttackObjective, ThreatModel};
use rtta_core::nn::build_model;
use rtta_core::rng::rng_for;
use rtta_core::Tensor;

const SLACK: f64 = 1e-12;

fn random_threat(rng: &mut impl Rng) -> ThreatModel {
    let epsilon = if rng.random_bool(0.1) { 0.0 } else { rng.random_range(1e-3..0.1) };
    let init = match rng.random_range(0..3) {
        0 => AttackInit::None,
        1 => AttackInit::UniformBall,
        _ => AttackInit::Gaussian { std: 0.01 },
    };
    ThreatModel {
        epsilon,
        alpha: if epsilon > 0.0 { rng.random_range(0.1..2.0) * epsilon } else { 0.01 },
        steps: rng.random_range(1..4),
        init,
        low: 0.0,
        high: 1.0,
    }
}

#[test]
fn fuzzed_attacks_stay_in_ball_and_box() {
    let model = build_model(&common::spec(), 5).unwrap();
    let mut rng = rng_for(77, 0);
    for case in 0..300 {
        let n = rng.random_range(1..3);
        let len = n * 3 * common::EXTENT * common::EXTENT;
        // Push some pixels onto the box edges so the clamp matters.
        let data: Vec<f64> = (0..len).map(|_| rng.random_range(-0.2f64..1.2).clamp(0.0, 1.0)).collect();
        let x = Tensor::new(vec![n, 3, common::EXTENT, common::EXTENT], data).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let tm = random_threat(&mut rng);
        let obj = AttackObjective::ce_true_label(&labels);
        let adv = pgd_attack(&model, &x, &obj, &tm, case).unwrap();
        assert!(within_ball_box(&adv, &x, &tm, SLACK), "pgd case {case}");
        let sq = square_attack(&model, &x, &labels, &tm, rng.random_range(0..20), case).unwrap();
        assert!(within_ball_box(&sq.x_adv, &x, &tm, SLACK), "square case {case}");
    }
}

#[test]
fn zero_budget_pgd_is_identity() {
    let model = build_model(&common::spec(), 6).unwrap();
    let x = Tensor::new(vec![2, 3, 8, 8], (0..384).map(|i| (i % 17) as f64 / 17.0).collect()).unwrap();
    let tm = ThreatModel {
        epsilon: 0.0,
        ..ThreatModel::evaluation()
    };
    let adv = pgd_attack(&model, &x, &AttackObjective::ce_true_label(&[0, 1]), &tm, 3).unwrap();
    assert_eq!(adv, x);
}

#[test]
fn pgd_increases_the_loss_of_a_pretrained_model() {
    let (model, _, eval) = common::desk();
    let tm = ThreatModel {
        init: AttackInit::None,
        ..ThreatModel::evaluation()
    };
    let mut up = 0;
    for t in 0..100 {
        let i = t % eval.len();
        let x = eval.subset(&[i]);
        let obj = AttackObjective::ce_true_label(x.labels());
        let adv = pgd_attack(&model, x.inputs(), &obj, &tm, t as u64).unwrap();
        let (before, _) = obj.value_and_grad(&model, x.inputs()).unwrap();
        let (after, _) = obj.value_and_grad(&model, &adv).unwrap();
        up += usize::from(after > before);
    }
    assert!(up >= 95, "objective rose in only {up}/100 trials");
}
