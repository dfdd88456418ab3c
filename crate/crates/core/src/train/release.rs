use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::model::ParamGroup;
use crate::tensor::{Tape, Var};
use crate::scalar::Scalar;

/// Slack for comparing eval progress against configured fractions.
const FRAC_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionMode {
    None,
    Adaptive,
    FixedRelease,
    GlobalScale,
    EntropyFloor,
}

fn d_alpha() -> f64 {
    0.25
}
fn d_thr() -> f64 {
    0.005
}
fn d_pat() -> u32 {
    3
}
fn d_min() -> f64 {
    0.03
}
fn d_force() -> f64 {
    0.12
}
fn d_ramp() -> f64 {
    0.01
}
fn d_h0() -> f64 {
    0.80
}
fn d_lam() -> f64 {
    0.10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionConfig {
    pub mode: InterventionMode,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_thr")]
    pub trigger_threshold: f64,
    #[serde(default = "d_pat")]
    pub patience: u32,
    #[serde(default = "d_min")]
    pub min_release_frac: f64,
    #[serde(default = "d_force")]
    pub force_release_frac: f64,
    #[serde(default = "d_ramp")]
    pub ramp_frac: f64,
    #[serde(default)]
    pub fixed_release_frac: Option<f64>,
    #[serde(default)]
    pub global_scale: Option<f64>,
    #[serde(default = "d_h0")]
    pub floor_h0: f64,
    #[serde(default = "d_lam")]
    pub floor_lambda: f64,
}

impl InterventionConfig {
    pub fn new(mode: InterventionMode) -> Self {
        Self {
            mode,
            alpha: d_alpha(),
            trigger_threshold: d_thr(),
            patience: d_pat(),
            min_release_frac: d_min(),
            force_release_frac: d_force(),
            ramp_frac: d_ramp(),
            fixed_release_frac: None,
            global_scale: None,
            floor_h0: d_h0(),
            floor_lambda: d_lam(),
        }
    }

    pub fn control() -> Self {
        Self::new(InterventionMode::None)
    }

    pub fn adaptive(alpha: f64) -> Self {
        Self { alpha, ..Self::new(InterventionMode::Adaptive) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(config_err(format!("alpha {} not in (0, 1]", self.alpha)));
        }
        if self.min_release_frac > self.force_release_frac {
            return Err(config_err("min_release_frac exceeds force_release_frac"));
        }
        if self.ramp_frac <= 0.0 {
            return Err(config_err("ramp_frac must be positive"));
        }
        if self.patience == 0 {
            return Err(config_err("patience must be at least 1"));
        }
        match self.mode {
            InterventionMode::FixedRelease if self.fixed_release_frac.is_none() => {
                Err(config_err("fixed_release mode needs fixed_release_frac"))
            }
            InterventionMode::GlobalScale if self.global_scale.is_none() => {
                Err(config_err("global_scale mode needs global_scale"))
            }
            _ => Ok(()),
        }
    }

    pub fn ramp_steps(&self, total_steps: u64) -> f64 {
        (self.ramp_frac * total_steps as f64).max(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Held,
    Ramping,
    Released,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReleaseState {
    pub phase: Phase,
    pub consecutive_hits: u32,
    pub release_step: Option<u64>,
    pub release_progress: Option<f64>,
    /// `(step, lower_copy)` per evaluation.
    pub history: Vec<(u64, f64)>,
    last_progress: Option<f64>,
}

impl Default for ReleaseState {
    fn default() -> Self {
        Self::new()
    }
}

impl ReleaseState {
    pub fn new() -> Self {
        Self { phase: Phase::Held, consecutive_hits: 0, release_step: None, release_progress: None, history: vec![], last_progress: None }
    }

    /// Feeds one evaluation. Returns true when this call triggered the release.
    pub fn update_release(&mut self, lower_copy: f64, progress: f64, cfg: &InterventionConfig, step: u64) -> Result<bool> {
        if let Some(last) = self.last_progress {
            if progress <= last {
                return Err(Error::Usage(format!("evaluation at progress {progress} follows {last}")));
            }
        }
        self.last_progress = Some(progress);
        self.history.push((step, lower_copy));
        if lower_copy >= cfg.trigger_threshold {
            self.consecutive_hits += 1;
        } else {
            self.consecutive_hits = 0;
        }
        if self.phase != Phase::Held {
            return Ok(false);
        }
        let reached = |frac: f64| progress >= frac - FRAC_EPS;
        let fire = match cfg.mode {
            InterventionMode::FixedRelease => cfg.fixed_release_frac.is_some_and(reached),
            _ => {
                (reached(cfg.min_release_frac) && self.consecutive_hits >= cfg.patience) || reached(cfg.force_release_frac)
            }
        };
        if fire {
            self.phase = Phase::Ramping;
            self.release_step = Some(step);
            self.release_progress = Some(progress);
        }
        Ok(fire)
    }

    /// Moves a finished ramp to `Released`.
    pub fn tick(&mut self, step: u64, cfg: &InterventionConfig, total_steps: u64) {
        if let (Phase::Ramping, Some(r)) = (self.phase, self.release_step) {
            if (step.saturating_sub(r)) as f64 >= cfg.ramp_steps(total_steps) {
                self.phase = Phase::Released;
            }
        }
    }

    /// Held-phase gate for the entropy-floor loss term.
    pub fn is_held(&self) -> bool {
        self.phase == Phase::Held
    }
}

/// Learning-rate multiplier of `group` at `step`.
pub fn group_multiplier(group: ParamGroup, step: u64, state: &ReleaseState, cfg: &InterventionConfig, total_steps: u64) -> f64 {
    match cfg.mode {
        InterventionMode::None | InterventionMode::EntropyFloor => 1.0,
        InterventionMode::GlobalScale => cfg.global_scale.unwrap_or(1.0),
        InterventionMode::Adaptive | InterventionMode::FixedRelease => {
            if group != ParamGroup::UpperQk {
                return 1.0;
            }
            match state.release_step {
                None => cfg.alpha,
                Some(r) => {
                    let t = (step.saturating_sub(r) as f64 / cfg.ramp_steps(total_steps)).min(1.0);
                    cfg.alpha + (1.0 - cfg.alpha) * t
                }
            }
        }
    }
}

pub fn multipliers_at(step: u64, state: &ReleaseState, cfg: &InterventionConfig, total_steps: u64) -> super::GroupMultipliers {
    super::GroupMultipliers::from_fn(|g| group_multiplier(g, step, state, cfg, total_steps))
}

/// `λ·max(0, h₀ − H)` recorded on the tape so it differentiates through `h_upper`.
pub fn entropy_floor_penalty<T: Scalar>(tape: &mut Tape<T>, h_upper: Var, cfg: &InterventionConfig) -> Result<Var> {
    let gap = tape.affine(h_upper, -1.0, cfg.floor_h0)?;
    let hinge = tape.relu(gap)?;
    tape.scale(hinge, cfg.floor_lambda)
}
