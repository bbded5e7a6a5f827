use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rtta_core::attacks::ThreatModel;
use rtta_core::corruptions::{corrupt_batch, CorruptionSpec};
use rtta_core::data::generate_synthetic;
use rtta_core::evaluation::{robust_accuracy, Attack};
use rtta_core::exec::Execution;
use rtta_core::nn::{build_model, ModelSpec};

const STRATEGIES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn corruption(c: &mut Criterion) {
    let data = generate_synthetic(4, 16, 16, 0).unwrap();
    let spec = CorruptionSpec::for_severity(2, 0).unwrap();
    let mut g = c.benchmark_group("corrupt_batch");
    for (name, exec) in STRATEGIES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| corrupt_batch(data.inputs(), &spec, exec).unwrap())
        });
    }
    g.finish();
}

fn pgd_eval(c: &mut Criterion) {
    let data = generate_synthetic(4, 8, 8, 1).unwrap();
    let model = build_model(&ModelSpec::cnn(&[3, 4], 4, &[3, 8, 8]), 0).unwrap();
    let attack = Attack::Pgd(ThreatModel::evaluation());
    let mut g = c.benchmark_group("robust_accuracy");
    g.sample_size(10);
    for (name, exec) in STRATEGIES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| robust_accuracy(&model, &data, &attack, 0, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, corruption, pgd_eval);
criterion_main!(benches);
