//! Baselines, the theory checks, bottleneck experiments and reporting.

mod baselines;
mod bottleneck;
mod experiment;
mod report;
mod theory;

pub use baselines::{run_cefi, run_edge_ensemble, run_input_sharing_fi, run_solo_baseline, train_edge_tails};
pub use bottleneck::{run_bottleneck_suite, BottleneckReport, BottleneckVariant, VariantOutcome};
pub use experiment::{
    build_devices, canonical_schemes, evaluate_cell, evaluate_devices, load_feature_files, load_task, prepare_data,
    pretrain_tails, run_experiment, run_grid, split_and_partition, train_cell, CommSummary, ExperimentConfig,
    ExperimentResult, LoadedTask, PreparedData, RuleAccuracy, TailConfig, TaskKind, TaskSpec, TrainedCell,
};
pub use report::{
    emit_report, emit_report_rows, hash_hex, mean_std, plot_points, read_csv, result_rows, summary_rows, PlotPoint, ReportPaths,
    ResultRow, SummaryRow, PLOT_COLUMNS, PLOT_FILE, RESULTS_FILE, RESULT_COLUMNS, SUMMARY_COLUMNS, SUMMARY_FILE,
};
pub use theory::{
    logit_deviation_along, verify_epsilon_bound, verify_fi_equivalence, EpsilonReport, EquivalenceReport,
    TheoryCheckConfig,
};
