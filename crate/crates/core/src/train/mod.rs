//! Optimization: schedule, per-group multipliers, the upper-Q/K release rule and the run loop.

mod adamw;
mod release;
mod run;
mod schedule;

pub use adamw::{adamw_step, GroupMultipliers, OptimizerState};
pub use release::{
    entropy_floor_penalty, group_multiplier, multipliers_at, InterventionConfig, InterventionMode, Phase, ReleaseState,
};
pub use run::{
    fnv1a, train_loop, DataConfig, MetricRecord, ProbeConfig, RunConfig, RunOutcome, RunStatus, StepRecord,
};
pub use schedule::{lr_at, ScheduleConfig};
