//! Sequential vs. parallel execution of the benchmark grid and the TDOA
//! front end, plus single-estimator timings.
//!
//! Without the `parallel` feature both variants run on one thread.

use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use multilat::bench::{run_benchmark_with, BenchmarkConfig};
use multilat::denoise::tdoa_average;
use multilat::estimators::{conic_ls, hyperbolic_ls, srd_ls, usrd_ls, HyperbolicOptions};
use multilat::geometry::{array_diameter, lab_scene, true_rd_full, DEFAULT_SOUND_SPEED};
use multilat::parallel::Execution;
use multilat::simulate::{synth_signals, RdNoiseModel, SignalModel};
use multilat::tdoa::{estimate_tdoa_matrix_with, FrameConfig, Vad};

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

const GRID: &str = r#"
seed = 1
trials = 8
features = ["vad-raw", "novad-raw", "vad-denoised", "novad-denoised"]
methods = ["conic", "conic-norm", "usrd-ls:max-energy", "usrd-ls:min-energy",
           "srd-ls:max-energy", "srd-ls:min-energy"]
[scene]
kind = "lab"
[subsets]
kind = "k-of-m"
k = 5
[[noise]]
kind = "gaussian"
sigma = 0.01
[[noise]]
kind = "gaussian"
sigma = 0.05
"#;

fn benchmark_grid(c: &mut Criterion) {
    let config = BenchmarkConfig::from_toml_str(GRID).unwrap();
    let mut group = c.benchmark_group("rd_grid");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run_benchmark_with(black_box(&config), mode).unwrap())
        });
    }
    group.finish();
}

fn tdoa_front_end(c: &mut Criterion) {
    let scene = lab_scene::scene(2, DEFAULT_SOUND_SPEED).unwrap();
    let signals = synth_signals(
        &scene,
        &SignalModel::white_noise(Some(20.0), 3),
        2.0,
        16_000.0,
    )
    .unwrap();
    let frame = FrameConfig::new(16_000.0);
    let diameter = array_diameter(scene.mics());
    let mut group = c.benchmark_group("tdoa_matrix");
    group.sample_size(20);
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                estimate_tdoa_matrix_with(
                    black_box(&signals),
                    &frame,
                    Vad::On,
                    Some(diameter),
                    DEFAULT_SOUND_SPEED,
                    mode,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

fn estimators(c: &mut Criterion) {
    let scene = lab_scene::scene(1, DEFAULT_SOUND_SPEED).unwrap();
    let rd = RdNoiseModel::gaussian(0.02, 5).perturb_matrix(&true_rd_full(&scene));
    let vector = rd.reference_vector(0).unwrap();
    let mics = scene.mics();
    let mut group = c.benchmark_group("estimators");
    group.measurement_time(Duration::from_secs(2));
    group.bench_function("usrd_ls", |b| b.iter(|| usrd_ls(black_box(&vector), mics)));
    group.bench_function("srd_ls", |b| b.iter(|| srd_ls(black_box(&vector), mics)));
    group.bench_function("conic_ls", |b| {
        b.iter(|| conic_ls(black_box(&rd), mics, true))
    });
    group.bench_function("hyperbolic_ls", |b| {
        b.iter(|| hyperbolic_ls(black_box(&vector), mics, &HyperbolicOptions::default()))
    });
    group.bench_function("tdoa_average", |b| b.iter(|| tdoa_average(black_box(&rd))));
    group.finish();
}

criterion_group!(benches, benchmark_grid, tdoa_front_end, estimators);
criterion_main!(benches);
