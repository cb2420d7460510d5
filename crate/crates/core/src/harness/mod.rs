//! Experiment orchestration: configuration, datasets on disk, the
//! end-to-end pipeline, ablation grids and report emission.

mod config;
mod lab;
mod metrics;
mod report;
mod suites;
mod workspace;

pub use config::{ApfConfig, ExperimentConfig, NamedStyle, OracleConfig, SpgConfig, WorldConfig};
pub use lab::{evaluate_domain, Cell, CellKey, DomainEval, Frozen, GeneratorSet, Lab, BASELINE, SAGE};
pub use metrics::{miou, IouCounter, IouReport};
pub use report::{
    smoothed_head, smoothed_tail, AttentionReport, AttentionRow, ComparisonRow, ComparisonTable, DomainScore, MetricsReport,
};
pub use suites::{
    ablate_fusion, ablate_generators, ablate_init, attention_report, fusion_label, init_label, prepare, run_all, run_suite,
    summary_table, write_attention, write_table, write_timings, Suite,
};
pub use workspace::{Workspace, World, OUTPUT_ROOT_ENV};
