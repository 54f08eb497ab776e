//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

use std::time::{Duration, Instant};

use multilat::bench::{
    run_benchmark, run_benchmark_with, write_records, BenchmarkConfig, TrialRecord,
};
use multilat::denoise::tdoa_average;
use multilat::estimators::{conic_ls, hyperbolic_ls, srd_ls, usrd_ls, HyperbolicOptions};
use multilat::geometry::{
    lab_scene, select_reference, true_rd_full, GeometricReference, Point, RdMatrix,
    DEFAULT_SOUND_SPEED,
};
use multilat::parallel::{with_threads, Execution};
use multilat::simulate::{random_scene, rng_from_seed, SceneBounds};
use multilat::tdoa::GccPhat;
use multilat::Error;
use multilat_conformance::{group_medians, outcome, run, strict_median, Criterion, Outcome};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn bounds() -> SceneBounds {
    SceneBounds::new(Point::new(-3.0, -3.0, 0.0), Point::new(3.0, 3.0, 2.5)).unwrap()
}

fn exact_recovery() -> Outcome {
    let start = Instant::now();
    let mut rng = rng_from_seed(1001);
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for i in 0..1000 {
        let m = 5 + i % 4;
        let scene = random_scene(&mut rng, m, &bounds(), DEFAULT_SOUND_SPEED).unwrap();
        let rd = true_rd_full(&scene);
        let reference =
            select_reference(scene.mics(), GeometricReference::NearestBarycenter).unwrap();
        let vector = rd.reference_vector(reference).unwrap();
        let results = [
            ("usrd-ls", usrd_ls(&vector, scene.mics())),
            ("srd-ls", srd_ls(&vector, scene.mics())),
            ("conic", conic_ls(&rd, scene.mics(), false)),
            ("conic-norm", conic_ls(&rd, scene.mics(), true)),
            (
                "hyperbolic",
                hyperbolic_ls(&vector, scene.mics(), &HyperbolicOptions::default()),
            ),
        ];
        for (name, res) in results {
            let err = res.map_or(f64::INFINITY, |r| (r.position - scene.source()).norm());
            worst = worst.max(err);
            if err.is_nan() || err > 1e-6 {
                failures.push(format!("scene {i} {name}: {err:.3e}"));
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        failures.is_empty() && elapsed < Duration::from_secs(30),
        format!(
            "1000 scenes x 5 estimators, worst error {worst:.2e} m, {:.2} s{}",
            elapsed.as_secs_f64(),
            failures
                .first()
                .map_or(String::new(), |f| format!(", first failure {f}"))
        ),
    )
}

fn conic_minimality() -> Outcome {
    let mut rng = rng_from_seed(2002);
    let mut exact = 0;
    let mut refused = 0;
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let scene = random_scene(&mut rng, 4, &bounds(), DEFAULT_SOUND_SPEED).unwrap();
        let rd = true_rd_full(&scene);
        let err = conic_ls(&rd, scene.mics(), false)
            .map_or(f64::INFINITY, |r| (r.position - scene.source()).norm());
        worst = worst.max(err);
        exact += usize::from(err <= 1e-6);
        let vector = rd.reference_vector(0).unwrap();
        refused += usize::from(matches!(
            usrd_ls(&vector, scene.mics()),
            Err(Error::InsufficientMicrophones {
                needed: 5,
                got: 4,
                ..
            })
        ));
    }
    outcome(
        exact == 200 && refused == 200,
        format!("conic exact on {exact}/200 (worst {worst:.2e} m), usrd-ls refused {refused}/200"),
    )
}

fn srd_constraint() -> Outcome {
    let config = BenchmarkConfig::from_toml_str(
        r#"
        seed = 3003
        trials = 60
        features = ["vad-raw", "novad-raw", "vad-denoised", "novad-denoised"]
        methods = ["srd-ls:nearest-barycenter", "srd-ls:max-energy", "srd-ls:min-energy"]
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
        sigma = 0.1
        [[noise]]
        kind = "outlier-mixture"
        sigma = 0.05
        fraction = 0.1
        scale = 10.0
        "#,
    )
    .unwrap();
    let mut records = run_benchmark(&config).unwrap();
    let signal = BenchmarkConfig::from_toml_str(
        r#"
        seed = 3004
        trials = 3
        features = ["vad-raw", "novad-denoised"]
        methods = ["srd-ls:nearest-barycenter", "srd-ls:max-energy", "srd-ls:min-energy"]
        [scene]
        kind = "lab"
        [subsets]
        kind = "k-of-m"
        k = 5
        [[noise]]
        kind = "signal"
        snr_db = 10.0
        "#,
    )
    .unwrap();
    records.extend(run_benchmark(&signal).unwrap());
    let converged: Vec<_> = records.iter().filter(|r| r.status.is_success()).collect();
    let violations = converged
        .iter()
        .filter(|r| {
            let Some(s) = r.spherical else { return true };
            let norm_sq = s.local_position.norm_squared();
            !((s.range * s.range - norm_sq).abs() <= 1e-6 * (1.0 + norm_sq) && s.range >= -1e-9)
        })
        .count();
    outcome(
        violations == 0 && !converged.is_empty(),
        format!(
            "{} srd-ls trials, {} converged, {violations} constraint violations",
            records.len(),
            converged.len()
        ),
    )
}

fn robustness_ordering() -> Outcome {
    let config = BenchmarkConfig::from_toml_str(
        r#"
        seed = 4004
        trials = 500
        features = ["novad-raw"]
        methods = ["usrd-ls:nearest-barycenter", "srd-ls:nearest-barycenter"]
        [scene]
        kind = "lab"
        positions = [2]
        [[noise]]
        kind = "gaussian"
        sigma = 0.1
        "#,
    )
    .unwrap();
    let records = run_benchmark(&config).unwrap();
    let medians = group_medians(&records);
    let usrd = medians[&("usrd-ls:nearest-barycenter".to_string(), "0.1".to_string())];
    let srd = medians[&("srd-ls:nearest-barycenter".to_string(), "0.1".to_string())];
    outcome(
        srd <= usrd,
        format!("median srd-ls {srd:.4} m vs usrd-ls {usrd:.4} m over 500 trials"),
    )
}

fn redistribution() -> Outcome {
    let scene = lab_scene::scene(2, DEFAULT_SOUND_SPEED).unwrap();
    let clean = true_rd_full(&scene);
    let mut values = clean.values().clone();
    values[(1, 4)] += 0.2;
    values[(4, 1)] -= 0.2;
    let out = tdoa_average(&RdMatrix::new(values).unwrap());
    let changed = (0..8)
        .flat_map(|i| (i + 1..8).map(move |j| (i, j)))
        .filter(|&p| p != (1, 4))
        .filter(|&(i, j)| (out.get(i, j) - clean.get(i, j)).abs() > 1e-6)
        .count();
    outcome(
        changed >= 7,
        format!("{changed} of 27 clean entries changed by > 1e-6 m"),
    )
}

/// `G (GᵀG)⁺ Gᵀ x` with `G` the pairwise difference operator.
fn projection(rd: &RdMatrix) -> RdMatrix {
    let m = rd.mic_count();
    let pairs: Vec<(usize, usize)> = (0..m)
        .flat_map(|i| (i + 1..m).map(move |j| (i, j)))
        .collect();
    let mut g = DMatrix::zeros(pairs.len(), m);
    let mut x = DVector::zeros(pairs.len());
    for (row, &(i, j)) in pairs.iter().enumerate() {
        g[(row, i)] = -1.0;
        g[(row, j)] = 1.0;
        x[row] = rd.get(i, j);
    }
    let y = &g * (g.transpose() * &g).pseudo_inverse(1e-10).unwrap() * g.transpose() * x;
    let mut out = DMatrix::zeros(m, m);
    for (row, &(i, j)) in pairs.iter().enumerate() {
        out[(i, j)] = y[row];
        out[(j, i)] = -y[row];
    }
    RdMatrix::new(out).unwrap()
}

fn averaging_oracle() -> Outcome {
    let mut rng = rng_from_seed(6006);
    let mut worst_oracle = 0.0f64;
    let mut worst_idempotence = 0.0f64;
    for _ in 0..100 {
        let m = rng.random_range(3..=10);
        let rd = RdMatrix::from_upper(m, |_, _| rng.random_range(-5.0..5.0));
        let once = tdoa_average(&rd);
        worst_oracle = worst_oracle.max((once.values() - projection(&rd).values()).amax());
        worst_idempotence =
            worst_idempotence.max((tdoa_average(&once).values() - once.values()).amax());
    }
    outcome(
        worst_oracle <= 1e-12 && worst_idempotence <= 1e-12,
        format!("max |formula - projection| {worst_oracle:.1e}, max idempotence gap {worst_idempotence:.1e}"),
    )
}

fn gcc_delay_recovery() -> Outcome {
    let frame = 1024;
    let gcc = GccPhat::new(frame);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut rng = rng_from_seed(7007);
    let offset = 200;
    let window = multilat::tdoa::hann(frame);
    let take = |x: &[f64], start: usize| -> Vec<f64> {
        x[start..start + frame]
            .iter()
            .zip(&window)
            .map(|(v, w)| v * w)
            .collect()
    };
    let mut exact = 0;
    for shift in -100i64..=100 {
        let x: Vec<f64> = (0..frame + 2 * offset)
            .map(|_| normal.sample(&mut rng))
            .collect();
        // b[n] = a[n - shift]
        let a = take(&x, offset);
        let b = take(&x, (offset as i64 - shift) as usize);
        let lag = gcc.lag(&a, &b, 128, false).unwrap();
        exact += usize::from(lag == shift as f64);
    }
    let mut within = 0;
    for _ in 0..1000 {
        let shift = rng.random_range(-100i64..=100);
        let x: Vec<f64> = (0..frame + 2 * offset)
            .map(|_| normal.sample(&mut rng))
            .collect();
        // 10 dB per channel on unit-variance white noise
        let noise = Normal::new(0.0, 10f64.powf(-0.5)).unwrap();
        let mut noisy = |start: usize| -> Vec<f64> {
            x[start..start + frame]
                .iter()
                .zip(&window)
                .map(|(v, w)| (v + noise.sample(&mut rng)) * w)
                .collect()
        };
        let a = noisy(offset);
        let b = noisy((offset as i64 - shift) as usize);
        let lag = gcc.lag(&a, &b, 128, true).unwrap();
        within += usize::from((lag - shift as f64).abs() <= 1.0);
    }
    outcome(
        exact == 201 && within >= 950,
        format!("noiseless exact {exact}/201, 10 dB within one sample {within}/1000"),
    )
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let config = BenchmarkConfig::from_toml_str(
        r#"
        seed = 8008
        trials = 3
        features = ["vad-raw"]
        methods = ["srd-ls:nearest-barycenter"]
        [scene]
        kind = "lab"
        positions = [1, 2, 3]
        [subsets]
        kind = "k-of-m"
        k = 5
        [[noise]]
        kind = "signal"
        snr_db = 30.0
        "#,
    )
    .unwrap();
    let records = run_benchmark(&config).unwrap();
    let all: Vec<_> = records.iter().collect();
    let median = strict_median(&all);
    let failures = all.iter().filter(|r| !r.status.is_success()).count();
    let elapsed = start.elapsed();
    outcome(
        records.len() == 168 && median <= 0.1 && elapsed < Duration::from_secs(300),
        format!(
            "{} runs, median position error {median:.4} m, {failures} failures, {:.1} s",
            records.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn monotone_degradation() -> Outcome {
    let config = BenchmarkConfig::from_toml_str(
        r#"
        seed = 9009
        trials = 500
        features = ["novad-raw"]
        methods = ["usrd-ls:nearest-barycenter", "srd-ls:nearest-barycenter", "conic",
                   "conic-norm", "hyperbolic:nearest-barycenter"]
        [scene]
        kind = "lab"
        [[noise]]
        kind = "gaussian"
        sigma = 0.01
        [[noise]]
        kind = "gaussian"
        sigma = 0.05
        [[noise]]
        kind = "gaussian"
        sigma = 0.1
        "#,
    )
    .unwrap();
    let records = run_benchmark(&config).unwrap();
    let medians = group_medians(&records);
    let mut pass = true;
    let mut lines = Vec::new();
    for method in &config.methods {
        let m: Vec<f64> = ["0.01", "0.05", "0.1"]
            .iter()
            .map(|s| medians[&(method.to_string(), s.to_string())])
            .collect();
        pass &= m[0] < m[1] && m[1] < m[2];
        lines.push(format!("{method} {:.3}/{:.3}/{:.3}", m[0], m[1], m[2]));
    }
    outcome(
        pass,
        format!("medians (m) at 0.01/0.05/0.1: {}", lines.join(", ")),
    )
}

fn determinism() -> Outcome {
    let config = BenchmarkConfig::from_toml_str(
        r#"
        seed = 1010
        trials = 6
        features = ["vad-raw", "novad-denoised"]
        methods = ["conic-norm", "srd-ls:max-energy", "hyperbolic:min-energy", "usrd-ls:index:2"]
        [scene]
        kind = "random"
        count = 4
        mic_count = 7
        min = [-2.0, -2.0, 0.0]
        max = [2.0, 2.0, 2.5]
        [subsets]
        kind = "k-of-m"
        k = 5
        [[noise]]
        kind = "laplacian"
        sigma = 0.05
        [[noise]]
        kind = "signal"
        snr_db = 15.0
        duration_s = 0.5
        "#,
    )
    .unwrap();
    let csv = |records: Vec<TrialRecord>| {
        let mut buf = Vec::new();
        write_records(&mut buf, &records).unwrap();
        buf
    };
    let reference = csv(with_threads(1, || run_benchmark(&config).unwrap()));
    let runs = [
        csv(with_threads(4, || run_benchmark(&config).unwrap())),
        csv(with_threads(0, || run_benchmark(&config).unwrap())),
        csv(run_benchmark_with(&config, Execution::Sequential).unwrap()),
    ];
    let identical = runs.iter().filter(|r| **r == reference).count();
    outcome(
        identical == runs.len(),
        format!(
            "{} bytes of records; {identical}/{} reruns (4 threads, auto, sequential) byte-identical",
            reference.len(),
            runs.len()
        ),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("exact recovery", exact_recovery),
        ("conic minimality", conic_minimality),
        ("srd-ls constraint", srd_constraint),
        ("robustness ordering", robustness_ordering),
        ("denoising redistribution", redistribution),
        ("TDOA averaging oracle", averaging_oracle),
        ("GCC-PHAT delay recovery", gcc_delay_recovery),
        ("end-to-end pipeline", end_to_end),
        ("monotone degradation", monotone_degradation),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let failed = run(&criteria, &filter);
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
