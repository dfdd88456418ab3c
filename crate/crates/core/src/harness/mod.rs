//! Experiment orchestration: paired arm × seed runs, report aggregation, α sweeps,
//! offline release-rule replay and plot tables.

mod experiment;
mod plot;
mod replay;
mod report;
mod sweep;

pub use experiment::{
    find_metrics, parse_metrics, parse_run_id, read_metrics, run_dir, run_experiment, ArmSpec, ExperimentSpec, MetricsLog,
    RunSummary,
};
pub use plot::{emit_plot_data, first_crossings, MaturityEvents, PlotKind, PlotTable};
pub use replay::{
    monotonicity_violations, replay_release, replay_tsv, standard_variants, table_ordering_holds, ReleaseTrace, ReplayRow,
    RuleVariant, MAIN_RULE,
};
pub use report::{
    aggregate, audit_pairing, early_snapshot, mean_std, nearest_eval, ArmReport, EarlySnapshot, PairedDelta, RunReport,
    SeedResult, Stat, EARLY_PROGRESS,
};
pub use sweep::{alpha_arm, alpha_sweep, check_alpha_sweep, sweep_spec, AlphaPoint, AlphaSweep, SweepCheck, CONTROL_ARM, DISPLACEMENT_SLACK};
