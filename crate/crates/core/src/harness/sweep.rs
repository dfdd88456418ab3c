use serde::{Deserialize, Serialize};

use super::experiment::{run_experiment, ArmSpec, ExperimentSpec, RunSummary};
use super::report::{early_snapshot, EarlySnapshot};
use crate::error::{config_err, Result};
use crate::train::InterventionConfig;

pub const CONTROL_ARM: &str = "control";

/// Slack on the displacement ratio over α.
pub const DISPLACEMENT_SLACK: f64 = 0.15;

pub fn alpha_arm(alpha: f64) -> String {
    format!("alpha{alpha}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCheck {
    pub name: String,
    pub seed: u64,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaPoint {
    pub alpha: f64,
    pub seed: u64,
    pub early: Option<EarlySnapshot>,
    pub final_loss: Option<f64>,
    /// Displacement over the control's at the first eval past warmup.
    pub displacement_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSweep {
    pub alphas: Vec<f64>,
    pub points: Vec<AlphaPoint>,
    pub checks: Vec<SweepCheck>,
    pub pass: bool,
}

/// The base experiment with its arms replaced by a mode-none control plus one adaptive arm per α.
pub fn sweep_spec(base: &ExperimentSpec, alphas: &[f64]) -> Result<ExperimentSpec> {
    if alphas.is_empty() || alphas.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
        return Err(config_err("alphas must be non-empty and lie in (0, 1]"));
    }
    let template = base.arms.iter().find(|a| a.intervention.mode == crate::train::InterventionMode::Adaptive);
    let mut arms = vec![ArmSpec { name: CONTROL_ARM.into(), intervention: InterventionConfig::control(), model: None }];
    for &alpha in alphas {
        let intervention = match template {
            Some(t) => InterventionConfig { alpha, ..t.intervention.clone() },
            None => InterventionConfig::adaptive(alpha),
        };
        arms.push(ArmSpec { name: alpha_arm(alpha), intervention, model: None });
    }
    let spec = ExperimentSpec { arms, ..base.clone() };
    spec.validate()?;
    Ok(spec)
}

/// Runs the sweep and checks its ordering properties.
pub fn alpha_sweep(base: &ExperimentSpec, alphas: &[f64], out_dir: Option<&std::path::Path>) -> Result<(AlphaSweep, Vec<RunSummary>)> {
    let spec = sweep_spec(base, alphas)?;
    let runs = run_experiment(&spec, out_dir)?;
    let warmup = (spec.schedule.warmup_frac * spec.schedule.total_steps as f64).ceil() as u64;
    Ok((check_alpha_sweep(&runs, alphas, warmup), runs))
}

fn same_trajectory(a: &RunSummary, b: &RunSummary) -> bool {
    a.records.len() == b.records.len()
        && a.records.iter().zip(&b.records).all(|(x, y)| {
            x.probe == y.probe && x.train_loss.map(f64::to_bits) == y.train_loss.map(f64::to_bits) && x.lr.to_bits() == y.lr.to_bits()
        })
}

/// Ordering checks per seed, with α taken in decreasing order.
pub fn check_alpha_sweep(runs: &[RunSummary], alphas: &[f64], warmup_steps: u64) -> AlphaSweep {
    let mut sorted = alphas.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut seeds: Vec<u64> = runs.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let find = |arm: &str, seed: u64| runs.iter().find(|r| r.arm == arm && r.seed == seed && r.is_complete());

    let mut points = vec![];
    let mut checks = vec![];
    let mut check = |name: &str, seed: u64, pass: bool, detail: String| {
        checks.push(SweepCheck { name: name.into(), seed, pass, detail });
    };
    for &seed in &seeds {
        let control = find(CONTROL_ARM, seed);
        let first_post_warmup = |r: &RunSummary| r.records.iter().find(|m| m.probe.step >= warmup_steps.max(1)).cloned();
        let ctrl_disp = control.and_then(first_post_warmup).and_then(|m| m.probe.qk_displacement);

        let mut snaps = vec![];
        for &alpha in &sorted {
            let run = find(&alpha_arm(alpha), seed);
            let early = run.and_then(|r| early_snapshot(&r.records));
            let disp = run.and_then(first_post_warmup).and_then(|m| m.probe.qk_displacement);
            let ratio = match (disp, ctrl_disp) {
                (Some(d), Some(c)) if c > 0.0 => Some(d / c),
                _ => None,
            };
            points.push(AlphaPoint { alpha, seed, early: early.clone(), final_loss: run.and_then(|r| r.records.last()).map(|m| m.probe.val_loss), displacement_ratio: ratio });
            snaps.push((alpha, early));
            if alpha < 1.0 {
                let pass = ratio.is_some_and(|r| r <= alpha + DISPLACEMENT_SLACK);
                check("displacement_ratio", seed, pass, format!("alpha {alpha}: ratio {ratio:?}"));
            }
        }

        let series = |f: fn(&EarlySnapshot) -> Option<f64>| -> Option<Vec<f64>> {
            snaps.iter().map(|(_, s)| s.as_ref().and_then(f)).collect()
        };
        let monotone = |v: &Option<Vec<f64>>, nonincreasing: bool| {
            v.as_ref().is_some_and(|v| v.windows(2).all(|w| if nonincreasing { w[1] <= w[0] } else { w[1] >= w[0] }))
        };
        let rms = series(|s| Some(s.upper_logit_rms));
        let disp = series(|s| s.qk_displacement);
        let ent = series(|s| Some(s.upper_entropy));
        check("upper_logit_rms_nonincreasing", seed, monotone(&rms, true), format!("{rms:?}"));
        check("qk_displacement_nonincreasing", seed, monotone(&disp, true), format!("{disp:?}"));
        check("upper_entropy_nondecreasing", seed, monotone(&ent, false), format!("{ent:?}"));

        if sorted.contains(&1.0) {
            let same = matches!((control, find(&alpha_arm(1.0), seed)), (Some(c), Some(a)) if same_trajectory(c, a));
            check("alpha_one_matches_control", seed, same, String::new());
        }
    }
    let pass = !checks.is_empty() && checks.iter().all(|c| c.pass);
    AlphaSweep { alphas: sorted, points, checks, pass }
}
