//! Monte Carlo benchmark harness: configuration, trial execution and
//! persistence of records, summaries and error histograms.

mod config;
mod report;
mod run;

pub use config::{
    BenchmarkConfig, Feature, FrameSpec, NoiseSpec, SceneSource, SubsetSpec, VadRuleSpec,
};
pub use report::{
    enumerate_subsets, format_g9, format_subset, histogram, parse_subset, quantile_sorted,
    read_records, read_summary, summarize, write_histogram, write_records, write_summary,
    Histogram2d, SummaryRow, HISTOGRAM_HEADER, RECORDS_HEADER, SUMMARY_HEADER,
};
pub use run::{run_benchmark, run_benchmark_with, TrialRecord, TrialStatus};
