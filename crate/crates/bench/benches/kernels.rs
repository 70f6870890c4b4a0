use agribench::diagnostics::{adf_test, stl_decompose};
use agribench::evaluation::dm_test;
use agribench::models::{
    predict_scaled, sarima_fit, train, BiLstm, BiLstmConfig, SearchConfig, TemporalEncoding, TrainConfig, Transformer,
    TransformerConfig,
};
use agribench::split::{fit_scaler, make_windows, temporal_split, WindowConfig, WindowSet};
use agribench_bench::{error_pair, seasonal_series};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

fn statistics(c: &mut Criterion) {
    let series = seasonal_series(1779);
    let (a, b) = error_pair(1050);
    c.bench_function("adf_1779", |bench| bench.iter(|| adf_test(black_box(&series)).unwrap()));
    c.bench_function("stl_1779_p365", |bench| bench.iter(|| stl_decompose(black_box(&series), 365).unwrap()));
    c.bench_function("dm_1050_h14", |bench| bench.iter(|| dm_test(black_box(&a), black_box(&b), 14).unwrap()));
}

fn sarima(c: &mut Criterion) {
    let series = seasonal_series(500);
    let cfg = SearchConfig { m: 7, ..SearchConfig::default() };
    let mut group = c.benchmark_group("sarima");
    group.sample_size(10);
    group.bench_function("stepwise_fit_500_m7", |bench| bench.iter(|| sarima_fit(black_box(&series), &cfg).unwrap()));
    group.finish();
}

fn windows(series: &[f64]) -> (WindowSet, WindowSet) {
    let split = temporal_split(series.len(), [0.8, 0.1, 0.1]).unwrap();
    let scaler = fit_scaler(&series[split.train.clone()]).unwrap();
    let scaled = scaler.transform_all(series);
    let cfg = WindowConfig { seq_len: 90, horizon: 14, stride: 1 };
    let train_set = make_windows(&scaled, split.train.start..split.train.start + 90 + 14 + 63, cfg).unwrap();
    let val_set = make_windows(&scaled, split.val, cfg).unwrap();
    (train_set, val_set)
}

fn neural(c: &mut Criterion) {
    let series = seasonal_series(1779);
    let (train_set, val_set) = windows(&series);
    let cfg = TrainConfig { max_epochs: 1, ..TrainConfig::default() };
    let mut group = c.benchmark_group("neural");
    group.sample_size(10);
    group.bench_function("bilstm_epoch_64", |bench| {
        bench.iter_batched(
            || BiLstm::new(BiLstmConfig::default(), 42).unwrap(),
            |mut m| train(&mut m, &train_set, &val_set, &cfg).unwrap(),
            BatchSize::LargeInput,
        )
    });
    for (name, enc) in [("transformer", TemporalEncoding::Sinusoidal), ("t2v_transformer", TemporalEncoding::Time2Vec)] {
        group.bench_function(format!("{name}_epoch_64"), |bench| {
            bench.iter_batched(
                || Transformer::new(TransformerConfig::new(enc, series.len()), 42).unwrap(),
                |mut m| train(&mut m, &train_set, &val_set, &cfg).unwrap(),
                BatchSize::LargeInput,
            )
        });
        let model = Transformer::new(TransformerConfig::new(enc, series.len()), 42).unwrap();
        group.bench_function(format!("{name}_predict_val"), |bench| {
            bench.iter(|| predict_scaled(&model, black_box(&val_set)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, statistics, sarima, neural);
criterion_main!(benches);
