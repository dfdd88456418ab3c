use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

fn d_warmup() -> f64 {
    0.02
}
fn d_floor() -> f64 {
    0.10
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.95
}
fn d_wd() -> f64 {
    0.1
}
fn d_eps() -> f64 {
    1e-8
}

/// Warmup-cosine learning rate plus the AdamW constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub total_steps: u64,
    #[serde(default = "d_warmup")]
    pub warmup_frac: f64,
    #[serde(default = "d_floor")]
    pub floor_frac: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    /// Decay every tensor, including norms, biases and embeddings.
    #[serde(default)]
    pub decay_all: bool,
}

impl ScheduleConfig {
    pub fn new(peak_lr: f64, total_steps: u64) -> Self {
        Self {
            peak_lr,
            total_steps,
            warmup_frac: d_warmup(),
            floor_frac: d_floor(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            weight_decay: d_wd(),
            eps: d_eps(),
            decay_all: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return Err(config_err(format!("warmup_frac {} not in (0, 1)", self.warmup_frac)));
        }
        if !(0.0..=1.0).contains(&self.floor_frac) {
            return Err(config_err(format!("floor_frac {} not in [0, 1]", self.floor_frac)));
        }
        if self.total_steps == 0 || self.peak_lr.is_nan() || self.peak_lr < 0.0 {
            return Err(config_err("total_steps must be positive and peak_lr nonnegative"));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> f64 {
        self.warmup_frac * self.total_steps as f64
    }
}

/// Linear warmup to the peak, then cosine down to `floor_frac·peak` at `total_steps`.
pub fn lr_at(step: u64, s: &ScheduleConfig) -> f64 {
    let w = s.warmup_steps();
    let t = step.min(s.total_steps) as f64;
    if t < w {
        return s.peak_lr * t / w;
    }
    let span = s.total_steps as f64 - w;
    let p = if span > 0.0 { (t - w) / span } else { 1.0 };
    let floor = s.floor_frac * s.peak_lr;
    floor + (s.peak_lr - floor) * 0.5 * (1.0 + (PI * p).cos())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn apex_end_and_midpoint() {
        let s = ScheduleConfig::new(2.5e-4, 1000);
        assert_eq!(lr_at(20, &s), 2.5e-4);
        assert!((lr_at(1000, &s) - 0.1 * 2.5e-4).abs() < 1e-18);
        assert!((lr_at(510, &s) - 0.55 * 2.5e-4).abs() < 1e-15);
        assert_eq!(lr_at(0, &s), 0.0);
        assert_eq!(lr_at(10, &s), 1.25e-4);
    }

    #[test]
    fn rejects_bad_fractions() {
        let mut s = ScheduleConfig::new(1.0, 10);
        s.warmup_frac = 0.0;
        assert!(s.validate().is_err());
        s.warmup_frac = 0.02;
        s.floor_frac = 1.5;
        assert!(s.validate().is_err());
    }

    proptest! {
        #[test]
        fn continuous_and_monotone_after_warmup(total in 100u64..5000, peak in 1e-5f64..1e-2, floor in 0.0f64..1.0) {
            let s = ScheduleConfig { floor_frac: floor, ..ScheduleConfig::new(peak, total) };
            let w = s.warmup_steps();
            let left = peak * (w - 1e-9) / w;
            prop_assert!((left - peak).abs() < 1e-9 * peak.max(1.0));
            let start = w.ceil() as u64;
            let mut prev = lr_at(start, &s);
            for t in start + 1..=total {
                let cur = lr_at(t, &s);
                prop_assert!(cur <= prev + 1e-18);
                prev = cur;
            }
        }
    }
}
