use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use cyclespace::attack::{train_autoencoder, TrainConfig};
use cyclespace::csd::{detect, fit_bank, score, DetectOptions};
use cyclespace::estimation::{chi2_threshold, WlsEstimator};
use cyclespace::graph::{build_graph, minimum_cycle_basis};
use cyclespace::sim::{build_h, NoiseModel};
use cyclespace_bench::{fixture, measurements};

fn cycle_basis(c: &mut Criterion) {
    for name in ["case30", "case118"] {
        let g = build_graph(&fixture(name));
        c.bench_function(&format!("mcb/{name}"), |b| {
            b.iter(|| minimum_cycle_basis(black_box(&g), None).unwrap())
        });
    }
}

fn detectors(c: &mut Criterion) {
    let case = fixture("case30");
    let basis = minimum_cycle_basis(&build_graph(&case), None).unwrap();
    let z = measurements(&case, 1500);
    let train = z.columns(0, 900).into_owned();
    let test = z.columns(900, 600).into_owned();
    let bank = fit_bank(&train, &basis).unwrap();
    let labels: Vec<bool> = (0..600).map(|t| (200..400).contains(&t)).collect();

    c.bench_function("fit_bank/case30", |b| b.iter(|| fit_bank(black_box(&train), &basis).unwrap()));
    c.bench_function("score/case30_600", |b| b.iter(|| score(&bank, black_box(&test)).unwrap()));
    c.bench_function("detect/case30_600", |b| {
        b.iter(|| detect(&bank, black_box(&test), &labels, &DetectOptions::default()).unwrap())
    });

    let h = build_h(&case);
    let est = WlsEstimator::new(&h, &NoiseModel::homoscedastic(h.m(), 0.02).unwrap()).unwrap();
    c.bench_function("lnr/case30_600", |b| b.iter(|| est.lnr_series(black_box(&test))));
    c.bench_function("chi2_threshold/dof_100", |b| b.iter(|| chi2_threshold(black_box(100), 0.05).unwrap()));
}

fn autoencoder(c: &mut Criterion) {
    let case = fixture("case14");
    let z = measurements(&case, 900);
    let n_s = case.n_states();
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("autoencoder");
    group.sample_size(20);
    group.bench_function("epoch/case14_900", |b| {
        b.iter_batched(|| cfg.clone(), |cfg| train_autoencoder(&z, n_s, &cfg).unwrap(), BatchSize::SmallInput)
    });
    group.finish();
}

criterion_group!(benches, cycle_basis, detectors, autoencoder);
criterion_main!(benches);
