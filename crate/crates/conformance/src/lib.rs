//! Reporting helpers for the acceptance suite in `tests/acceptance.rs`.
//!
//! Kept in its own package so the long-running suite builds and runs after
//! the unit and integration tests of the other crates.

use std::collections::HashMap;

use multilat::bench::TrialRecord;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

pub fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

pub type Criterion = (&'static str, fn() -> Outcome);

/// Runs the criteria whose names contain one of the `filter` words (all of
/// them when `filter` is empty), printing one line each. Returns the number
/// that failed.
pub fn run(criteria: &[Criterion], filter: &[String]) -> usize {
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let result = check();
        failed += usize::from(!result.pass);
        println!(
            "criterion {:>2} {:<26} {}  {}",
            i + 1,
            name,
            if result.pass { "PASS" } else { "FAIL" },
            result.detail
        );
    }
    failed
}

/// Median with failures counted as infinitely bad.
pub fn strict_median(records: &[&TrialRecord]) -> f64 {
    let mut errs: Vec<f64> = records
        .iter()
        .map(|r| {
            if r.status.is_success() && r.position_error_m.is_finite() {
                r.position_error_m
            } else {
                f64::INFINITY
            }
        })
        .collect();
    errs.sort_by(f64::total_cmp);
    let n = errs.len();
    if n % 2 == 1 {
        errs[n / 2]
    } else {
        0.5 * (errs[n / 2 - 1] + errs[n / 2])
    }
}

/// Strict medians keyed by `(method, noise level)`.
pub fn group_medians(records: &[TrialRecord]) -> HashMap<(String, String), f64> {
    let mut groups: HashMap<(String, String), Vec<&TrialRecord>> = HashMap::new();
    for r in records {
        groups
            .entry((r.method.to_string(), r.noise_level.clone()))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|(k, v)| (k, strict_median(&v)))
        .collect()
}
