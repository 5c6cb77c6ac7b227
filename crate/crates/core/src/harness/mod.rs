//! Experiment driver: configuration, seeded runs, CSV artifacts and
//! aggregated reports.

mod config;
mod data;
mod report;
mod run;

pub use config::{DataSpec, ExperimentConfig, Length, Method, RawConfig, Stage2, SyntheticSpec};
pub use data::{gen_data, load_data, synthesize, write_data, BenchmarkData, META_FILE, TEST_FILE, TRAIN_FILE};
pub use report::{collect_run_dirs, report, MethodSummary, Report, ReportRow, Stat};
pub use run::{
    metrics_csv, run, run_all, run_crt, run_dir, run_ensemble, run_one, thread_count, trace_csv, train_method,
    RunOutcome, CLASSIFIER_FILE, COSINE_CLASSIFIER_FILE, COSINE_METRICS_FILE, CRT_CLASSIFIER_FILE, CRT_FILE,
    DNET_FILE, ENSEMBLE_FILE, MANIFEST_FILE, METRICS_FILE, TRACE_FILE,
};
