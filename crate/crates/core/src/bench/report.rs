use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use super::config::Feature;
use super::run::{TrialRecord, TrialStatus};
use crate::error::{Error, Result};
use crate::pipeline::Method;

pub const RECORDS_HEADER: &str =
    "method,feature,subset,noise_level,trial,status,position_error_m,mean_abs_rd_error_m,wall_time_s";
pub const SUMMARY_HEADER: &str = "method,feature,noise_level,median_m,q1_m,q3_m,failure_rate,n";
pub const HISTOGRAM_HEADER: &str =
    "method,feature,rd_error_lo_m,rd_error_hi_m,position_error_lo_m,position_error_hi_m,count";

/// Formats like C's `%.9g`: nine significant digits, trailing zeros
/// trimmed, exponent form outside `1e-4 <= |x| < 1e9`.
pub fn format_g9(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() {
            "-0".into()
        } else {
            "0".into()
        };
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exponent) = sci.split_once('e').expect("exponent form");
    let exponent: i32 = exponent.parse().expect("integer exponent");
    if (-4..9).contains(&exponent) {
        let decimals = (8 - exponent).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    } else {
        let sign = if exponent < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa), exponent.abs())
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// All `k`-element subsets of `0..m` in lexicographic order.
pub fn enumerate_subsets(m: usize, k: usize) -> Vec<Vec<usize>> {
    if k > m {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut current: Vec<usize> = (0..k).collect();
    loop {
        out.push(current.clone());
        // Rightmost position that can still advance.
        let Some(i) = (0..k).rev().find(|&i| current[i] < m - k + i) else {
            return out;
        };
        current[i] += 1;
        for j in i + 1..k {
            current[j] = current[j - 1] + 1;
        }
    }
}

pub fn format_subset(subset: &[usize]) -> String {
    subset
        .iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join("-")
}

pub fn parse_subset(s: &str) -> Result<Vec<usize>> {
    s.split('-')
        .map(|p| {
            p.parse()
                .map_err(|_| Error::Parse(format!("invalid subset '{s}'")))
        })
        .collect()
}

fn parse_float(s: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::Parse(format!("invalid number '{s}'")))
}

pub fn write_records(out: &mut impl Write, records: &[TrialRecord]) -> Result<()> {
    writeln!(out, "{RECORDS_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.method,
            r.feature,
            format_subset(&r.subset),
            r.noise_level,
            r.trial,
            r.status,
            format_g9(r.position_error_m),
            format_g9(r.mean_abs_rd_error_m),
            format_g9(r.wall_time_s),
        )?;
    }
    Ok(())
}

fn check_header(line: Option<std::io::Result<String>>, expected: &str) -> Result<()> {
    match line {
        Some(Ok(h)) if h.trim_end() == expected => Ok(()),
        Some(Err(e)) => Err(e.into()),
        _ => Err(Error::Parse(format!("expected header '{expected}'"))),
    }
}

pub fn read_records(input: impl BufRead) -> Result<Vec<TrialRecord>> {
    let mut lines = input.lines();
    check_header(lines.next(), RECORDS_HEADER)?;
    let mut records = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let [method, feature, subset, noise_level, trial, status, pos, rd, wall] = fields[..]
        else {
            return Err(Error::Parse(format!(
                "record line {}: expected 9 fields, got {}",
                n + 2,
                fields.len()
            )));
        };
        records.push(TrialRecord {
            method: method.parse::<Method>()?,
            feature: feature.parse::<Feature>()?,
            subset: parse_subset(subset)?,
            noise_level: noise_level.to_string(),
            trial: trial
                .parse()
                .map_err(|_| Error::Parse(format!("invalid trial '{trial}'")))?,
            status: status.parse::<TrialStatus>()?,
            position_error_m: parse_float(pos)?,
            mean_abs_rd_error_m: parse_float(rd)?,
            wall_time_s: parse_float(wall)?,
            spherical: None,
        });
    }
    Ok(records)
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub feature: String,
    pub noise_level: String,
    pub median_m: f64,
    pub q1_m: f64,
    pub q3_m: f64,
    pub failure_rate: f64,
    pub n: usize,
}

/// Position-error statistics per (method, feature, noise level), sorted by
/// those keys. Quartiles cover successful trials; `n` counts all trials.
pub fn summarize(records: &[TrialRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, String, String), (Vec<f64>, usize)> = BTreeMap::new();
    for r in records {
        let entry = groups
            .entry((
                r.method.to_string(),
                r.feature.to_string(),
                r.noise_level.clone(),
            ))
            .or_default();
        entry.1 += 1;
        if r.status.is_success() && r.position_error_m.is_finite() {
            entry.0.push(r.position_error_m);
        }
    }
    groups
        .into_iter()
        .map(|((method, feature, noise_level), (mut errors, n))| {
            errors.sort_by(f64::total_cmp);
            SummaryRow {
                method,
                feature,
                noise_level,
                median_m: quantile_sorted(&errors, 0.5),
                q1_m: quantile_sorted(&errors, 0.25),
                q3_m: quantile_sorted(&errors, 0.75),
                failure_rate: (n - errors.len()) as f64 / n as f64,
                n,
            }
        })
        .collect()
}

pub fn write_summary(out: &mut impl Write, rows: &[SummaryRow]) -> Result<()> {
    writeln!(out, "{SUMMARY_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.method,
            r.feature,
            r.noise_level,
            format_g9(r.median_m),
            format_g9(r.q1_m),
            format_g9(r.q3_m),
            format_g9(r.failure_rate),
            r.n
        )?;
    }
    Ok(())
}

pub fn read_summary(input: impl BufRead) -> Result<Vec<SummaryRow>> {
    let mut lines = input.lines();
    check_header(lines.next(), SUMMARY_HEADER)?;
    let mut rows = Vec::new();
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let [method, feature, noise_level, median, q1, q3, failure, n] = fields[..] else {
            return Err(Error::Parse(format!("malformed summary line '{line}'")));
        };
        rows.push(SummaryRow {
            method: method.into(),
            feature: feature.into(),
            noise_level: noise_level.into(),
            median_m: parse_float(median)?,
            q1_m: parse_float(q1)?,
            q3_m: parse_float(q3)?,
            failure_rate: parse_float(failure)?,
            n: n.parse()
                .map_err(|_| Error::Parse(format!("invalid count '{n}'")))?,
        });
    }
    Ok(rows)
}

/// Joint histogram of mean RD error (x) against position error (y) for
/// successful trials, per (method, feature). The bin grid spans the data
/// range over all groups so groups are directly comparable.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram2d {
    pub x_edges: Vec<f64>,
    pub y_edges: Vec<f64>,
    /// `(method, feature)` to row-major `bins × bins` counts, x outer.
    pub counts: BTreeMap<(String, String), Vec<usize>>,
}

fn edges(values: impl Iterator<Item = f64> + Clone, bins: usize) -> Vec<f64> {
    let lo = values.clone().fold(f64::INFINITY, f64::min);
    let hi = values.fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        (lo, lo + 1.0)
    };
    (0..=bins)
        .map(|i| lo + (hi - lo) * i as f64 / bins as f64)
        .collect()
}

fn bin_of(edges: &[f64], v: f64) -> usize {
    let bins = edges.len() - 1;
    let (lo, hi) = (edges[0], edges[bins]);
    (((v - lo) / (hi - lo) * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

pub fn histogram(records: &[TrialRecord], bins: usize) -> Histogram2d {
    let bins = bins.max(1);
    let usable: Vec<&TrialRecord> = records
        .iter()
        .filter(|r| {
            r.status.is_success()
                && r.position_error_m.is_finite()
                && r.mean_abs_rd_error_m.is_finite()
        })
        .collect();
    let x_edges = edges(usable.iter().map(|r| r.mean_abs_rd_error_m), bins);
    let y_edges = edges(usable.iter().map(|r| r.position_error_m), bins);
    let mut counts: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
    for r in records {
        counts
            .entry((r.method.to_string(), r.feature.to_string()))
            .or_insert_with(|| vec![0; bins * bins]);
    }
    for r in usable {
        let cell =
            bin_of(&x_edges, r.mean_abs_rd_error_m) * bins + bin_of(&y_edges, r.position_error_m);
        counts
            .get_mut(&(r.method.to_string(), r.feature.to_string()))
            .expect("group created above")[cell] += 1;
    }
    Histogram2d {
        x_edges,
        y_edges,
        counts,
    }
}

pub fn write_histogram(out: &mut impl Write, hist: &Histogram2d) -> Result<()> {
    writeln!(out, "{HISTOGRAM_HEADER}")?;
    let bins = hist.x_edges.len() - 1;
    for ((method, feature), counts) in &hist.counts {
        for i in 0..bins {
            for j in 0..bins {
                writeln!(
                    out,
                    "{method},{feature},{},{},{},{},{}",
                    format_g9(hist.x_edges[i]),
                    format_g9(hist.x_edges[i + 1]),
                    format_g9(hist.y_edges[j]),
                    format_g9(hist.y_edges[j + 1]),
                    counts[i * bins + j]
                )?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Status;
    use crate::pipeline::RefPolicy;
    use proptest::prelude::*;

    #[test]
    fn g9_matches_printf() {
        let cases = [
            (0.0, "0"),
            (1.0, "1"),
            (-2.5, "-2.5"),
            (0.1, "0.1"),
            (1.0 / 3.0, "0.333333333"),
            (2.0 / 3.0, "0.666666667"),
            (123456789.0, "123456789"),
            (1234567890.0, "1.23456789e+09"),
            (0.0001, "0.0001"),
            (0.00001, "1e-05"),
            (1.5e-7, "1.5e-07"),
            (0.0023125, "0.0023125"),
            (999999999.5, "1e+09"),
            (9.9999999995e-5, "0.0001"),
            (f64::NAN, "nan"),
            (1e300, "1e+300"),
        ];
        for (x, s) in cases {
            assert_eq!(format_g9(x), s, "{x:e}");
        }
    }

    proptest! {
        #[test]
        fn g9_round_trips_to_nine_digits(x in -1e12f64..1e12) {
            let back: f64 = format_g9(x).parse().unwrap();
            prop_assert!((back - x).abs() <= 5e-9 * x.abs().max(f64::MIN_POSITIVE));
        }
    }

    #[test]
    fn subsets_enumerate_lexicographically() {
        assert_eq!(enumerate_subsets(8, 5).len(), 56);
        assert_eq!(enumerate_subsets(3, 3), vec![vec![0, 1, 2]]);
        assert_eq!(
            enumerate_subsets(4, 2),
            vec![
                vec![0, 1],
                vec![0, 2],
                vec![0, 3],
                vec![1, 2],
                vec![1, 3],
                vec![2, 3]
            ]
        );
        assert_eq!(enumerate_subsets(5, 1).len(), 5);
        let all = enumerate_subsets(8, 5);
        assert!(all.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(parse_subset(&format_subset(&all[17])).unwrap(), all[17]);
    }

    fn rec(err: f64, status: Status) -> TrialRecord {
        TrialRecord {
            method: Method::SrdLs(RefPolicy::NearestBarycenter),
            feature: Feature::ALL[0],
            subset: vec![0, 1, 2, 3, 4],
            noise_level: "0.1".into(),
            trial: 0,
            status: TrialStatus::Solver(status),
            position_error_m: err,
            mean_abs_rd_error_m: err / 10.0,
            wall_time_s: 0.0,
            spherical: None,
        }
    }

    #[test]
    fn quartile_convention() {
        let records: Vec<_> = [1.0, 2.0, 3.0, 4.0]
            .iter()
            .map(|&e| rec(e, Status::Converged))
            .collect();
        let s = summarize(&records);
        assert_eq!(s.len(), 1);
        assert_eq!((s[0].median_m, s[0].q1_m, s[0].q3_m), (2.5, 1.75, 3.25));
        let single = summarize(&records[..1]);
        assert_eq!(
            (single[0].median_m, single[0].q1_m, single[0].q3_m),
            (1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn failures_count_but_do_not_enter_quartiles() {
        let records = vec![
            rec(1.0, Status::ClosedForm),
            rec(50.0, Status::Degenerate),
            rec(f64::NAN, Status::MaxIterations),
            rec(3.0, Status::Converged),
        ];
        let s = &summarize(&records)[0];
        assert_eq!(s.n, 4);
        assert_eq!(s.failure_rate, 0.5);
        assert_eq!(s.median_m, 2.0);
    }

    proptest! {
        #[test]
        fn summary_ignores_record_order(errs in prop::collection::vec(0.0f64..5.0, 1..40), seed in any::<u64>()) {
            let records: Vec<_> = errs
                .iter()
                .enumerate()
                .map(|(i, &e)| {
                    let mut r = rec(e, if i % 7 == 3 { Status::Degenerate } else { Status::Converged });
                    r.feature = Feature::ALL[i % 2];
                    r
                })
                .collect();
            let mut shuffled = records.clone();
            let mut state = seed;
            for i in (1..shuffled.len()).rev() {
                state = crate::simulate::derive_seed(state, &[i as u64]);
                shuffled.swap(i, (state % (i as u64 + 1)) as usize);
            }
            prop_assert_eq!(summarize(&records), summarize(&shuffled));
        }
    }

    #[test]
    fn records_round_trip() {
        let mut a = rec(0.123456789123, Status::Converged);
        a.method = Method::Hyperbolic(RefPolicy::Index(2));
        let mut b = rec(f64::NAN, Status::Degenerate);
        b.status = TrialStatus::InvalidTdoa;
        b.feature = Feature::ALL[3];
        b.noise_level = "snr30".into();
        b.trial = 12;
        let mut buf = Vec::new();
        write_records(&mut buf, &[a.clone(), b.clone()]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(RECORDS_HEADER));
        assert!(!text.contains('\r'));
        let back = read_records(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].method, a.method);
        assert_eq!(back[0].position_error_m, 0.123456789);
        assert_eq!(back[1].status, TrialStatus::InvalidTdoa);
        assert!(back[1].position_error_m.is_nan());
        assert_eq!(back[1].noise_level, "snr30");
        let mut again = Vec::new();
        write_records(&mut again, &back).unwrap();
        assert_eq!(again, buf);
        assert!(read_records("bad header\n".as_bytes()).is_err());
    }

    #[test]
    fn summary_round_trip() {
        let rows = summarize(&[rec(1.0, Status::Converged), rec(2.0, Status::Converged)]);
        let mut buf = Vec::new();
        write_summary(&mut buf, &rows).unwrap();
        assert_eq!(read_summary(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn histogram_counts_every_success_once() {
        let records: Vec<_> = (0..100)
            .map(|i| {
                rec(
                    i as f64 * 0.01,
                    if i % 10 == 0 {
                        Status::Degenerate
                    } else {
                        Status::Converged
                    },
                )
            })
            .collect();
        let h = histogram(&records, 30);
        assert_eq!(h.x_edges.len(), 31);
        let counts = &h.counts[&(
            records[0].method.to_string(),
            records[0].feature.to_string(),
        )];
        assert_eq!(counts.iter().sum::<usize>(), 90);
        // x and y are proportional, so only diagonal bins are populated
        for i in 0..30 {
            for j in 0..30 {
                if i != j {
                    assert_eq!(counts[i * 30 + j], 0);
                }
            }
        }
        let mut buf = Vec::new();
        write_histogram(&mut buf, &h).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 900);
    }
}
