use criterion::{criterion_group, criterion_main, Criterion};
use occtrack_bench::{model, patch, sequence};
use occtrack_core::backbone::extract_features;
use occtrack_core::data_io::{generate_dataset, DatasetConfig, SynthConfig};
use occtrack_core::localizer::{learn_filter, Filter};
use occtrack_core::predictor::{init_state, predict_next};
use occtrack_core::rng::substream;
use occtrack_core::tracker::{init, step, TrackerConfig};
use occtrack_core::trainer::{sample_clip, train_step, TrainConfig, TrainState};

fn features(c: &mut Criterion) {
    let m = model();
    let seq = sequence();
    let p = patch(&m, &seq);
    c.bench_function("backbone_forward", |b| b.iter(|| extract_features(&m.backbone, &p).unwrap()));
    let f = extract_features(&m.backbone, &p).unwrap();
    let s = init_state(&m.predictor, &f).unwrap();
    c.bench_function("convgru_step", |b| b.iter(|| predict_next(&m.predictor, &s, &f).unwrap()));
}

fn tracking(c: &mut Criterion) {
    let m = model();
    let seq = sequence();
    let cfg = TrackerConfig::default();
    let state = init(&m, &seq.frames[0], &seq.boxes[0], &cfg).unwrap();
    let loc = state.localizer;
    let zeros = Filter::zeros(m.config.backbone.channels.last().copied().unwrap(), loc.filter_size);
    c.bench_function("learn_filter_10", |b| {
        b.iter(|| learn_filter(&state.memory, &zeros, 10, loc.reg_lambda).unwrap())
    });
    c.bench_function("tracker_init", |b| {
        b.iter(|| init(&m, &seq.frames[0], &seq.boxes[0], &cfg).unwrap())
    });
    c.bench_function("tracker_step", |b| {
        b.iter_batched(
            || state.clone(),
            |mut s| step(&m, &cfg, &mut s, &seq.frames[1]).unwrap(),
            criterion::BatchSize::LargeInput,
        )
    });
}

fn training(c: &mut Criterion) {
    let m = model();
    let data = generate_dataset(
        &DatasetConfig {
            num_sequences: 4,
            sequence: SynthConfig {
                length: 20,
                ..SynthConfig::default()
            },
            ..DatasetConfig::default()
        },
        5,
    )
    .unwrap();
    let cfg = TrainConfig::default();
    let mut rng = substream(0, "bench.clips", 0);
    let clips: Vec<_> = (0..cfg.batch_size)
        .map(|_| sample_clip(&data, &cfg, &m.config.crop, &mut rng).unwrap())
        .collect();
    let state = TrainState::new(m, cfg.adam);
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("train_step", |b| {
        b.iter_batched(
            || (state.clone(), substream(0, "bench.step", 0)),
            |(mut s, mut r)| train_step(&mut s, &clips, &cfg, cfg.learning_rate, &mut r).unwrap(),
            criterion::BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, features, tracking, training);
criterion_main!(benches);
