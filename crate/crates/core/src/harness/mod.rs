//! Experiment driver: runs the incremental protocol end to end and the
//! comparison studies, and writes reports.

pub mod ablation;
pub mod bench;
pub mod config;
pub mod report;
pub mod run;

pub use ablation::{
    ablation_suite, probe, run_seeds, sensitivity_report, shift_cell, shift_variants, variant_cell, AblationReport,
    ClassifierCell, ModeCell, PetCell, RegimeCell, SensitivityDump, ShiftCell, PET_KINDS,
};
pub use bench::{default_sizes, format_bench, shift_bench, BenchRow, BenchSize};
pub use config::{AlignMode, DataConfig, ExperimentConfig, FewShot, Regime, ShiftConfig, ShiftEstimator, Source};
pub use report::{report_jsonl, write_json, write_report};
pub use run::{
    mean_std, prepare, run_experiment, run_id, run_prepared, run_trajectory, Confusion, ExperimentReport, Prepared, SeedRun,
    SessionRecord, ShiftDiagnostics, Timings, TrajectoryOptions, TrajectoryResult, Variant, VariantRun,
};
