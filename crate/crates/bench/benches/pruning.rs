use criterion::{black_box, criterion_group, criterion_main, Criterion};
use upop_core::engine::{train_dense, Phase, TrainConfig};
use upop_core::extraction::extract;
use upop_core::masking::{per_site_select, unified_select, Direction};
use upop_core::model::predict;
use upop_core::{MaskSet, Model, ModelConfig, SyntheticTask, TaskConfig};

fn setup() -> (ModelConfig, Model, upop_core::Dataset) {
    let cfg = ModelConfig::default();
    let model = Model::init(&cfg, 0).unwrap();
    let task = SyntheticTask::new(
        &TaskConfig {
            samples: 256,
            ..TaskConfig::default()
        },
        &cfg,
    )
    .unwrap();
    (cfg, model, task.generate())
}

fn scores(masks: &MaskSet) -> Vec<Vec<f64>> {
    masks
        .sites()
        .iter()
        .map(|s| (0..s.width).map(|j| ((s.id * 31 + j * 7) as f64).sin()).collect())
        .collect()
}

fn bench(c: &mut Criterion) {
    let (cfg, model, data) = setup();
    let batch = data.batch(&(0..32).collect::<Vec<_>>());
    let masks = MaskSet::ones(&cfg);

    c.bench_function("forward_batch32", |b| {
        b.iter(|| predict(black_box(&model), Some(&masks), &batch).unwrap())
    });

    let train: Vec<usize> = (0..256).collect();
    let one_step = TrainConfig {
        steps: 1,
        ..TrainConfig::default()
    };
    c.bench_function("train_step_batch32", |b| {
        b.iter_batched(
            || model.clone(),
            |mut m| train_dense(&mut m, &data, &train, &one_step, Phase::Pretrain).unwrap(),
            criterion::BatchSize::LargeInput,
        )
    });

    let s = scores(&masks);
    let k = masks.size() / 2;
    c.bench_function("unified_select_608", |b| {
        b.iter(|| unified_select(masks.sites(), black_box(&s), k, Direction::LargestFirst, 1).unwrap())
    });

    let decision = per_site_select(&s, 0.5, Direction::SmallestFirst).unwrap();
    c.bench_function("extract_half", |b| {
        b.iter(|| extract(black_box(&model), &masks, &decision).unwrap())
    });
}

criterion_group!(benches, bench);
criterion_main!(benches);
