use std::hint::black_box;

use cifsl_core::data::{generate_synthetic, SyntheticSpec};
use cifsl_core::learners::{AdaptationConfig, Learner, LearnerKind};
use cifsl_core::nn::{EncoderConfig, LossConfig};
use cifsl_core::rebalance::ros_plus;
use cifsl_core::seed;
use cifsl_core::tasks::{linear_shots, sample_task, step_shots, Distribution, ImbalanceSpec};
use criterion::{criterion_group, criterion_main, Criterion};

fn dataset() -> cifsl_core::MetaDataset {
    generate_synthetic(&SyntheticSpec {
        classes_per_split: (16, 8, 20),
        samples_per_class: 100,
        ..Default::default()
    })
    .unwrap()
}

fn tasks(c: &mut Criterion) {
    let ds = dataset();
    let random = ImbalanceSpec::new(5, Distribution::Random { k_min: 1, k_max: 9 });
    let mut g = c.benchmark_group("tasks");
    g.bench_function("linear_shots_20way", |b| {
        b.iter(|| linear_shots(black_box(1), 9, 20))
    });
    g.bench_function("step_shots_20way", |b| {
        b.iter(|| step_shots(black_box(1), 9, 20, 5))
    });
    let mut rng = seed::rng(0);
    g.bench_function("random_shots_5way", |b| {
        b.iter(|| random.support.shots(5, &mut rng).unwrap())
    });
    g.bench_function("sample_task_random_1_9", |b| {
        b.iter(|| sample_task(&ds.test, &random, &mut rng).unwrap())
    });
    let task = sample_task(&ds.test, &random, &mut rng).unwrap();
    g.bench_function("ros_plus", |b| {
        b.iter(|| ros_plus(&task, 0.1, &mut rng).unwrap())
    });
    g.finish();
}

fn adaptation(c: &mut Criterion) {
    let ds = dataset();
    let spec = ImbalanceSpec::new(5, Distribution::Linear { k_min: 1, k_max: 9 });
    let task = sample_task(&ds.test, &spec, &mut seed::rng(1)).unwrap();
    let enc = EncoderConfig::new(ds.feature_dim(), vec![32], 32);
    let learner = |kind| Learner::new(kind, AdaptationConfig::for_kind(kind), &enc, 24, 0).unwrap();
    let ce = LossConfig::ce();
    let mut g = c.benchmark_group("predict");
    for kind in [
        LearnerKind::Protonet,
        LearnerKind::Matching,
        LearnerKind::Relation,
        LearnerKind::Fomaml,
        LearnerKind::Protomaml,
        LearnerKind::Finetune,
    ] {
        let l = learner(kind);
        g.bench_function(kind.as_str(), |b| {
            b.iter(|| l.predict(black_box(&task), &ce, 3).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, tasks, adaptation);
criterion_main!(benches);
