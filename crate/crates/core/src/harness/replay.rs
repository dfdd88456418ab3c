use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::{InterventionConfig, InterventionMode, MetricRecord, ReleaseState};

/// Logged lower-copy scores of one run, in evaluation order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReleaseTrace {
    pub source_run_id: Option<String>,
    /// `(progress, lower_copy)`.
    pub points: Vec<(f64, f64)>,
}

impl ReleaseTrace {
    pub fn new(source_run_id: Option<String>, points: Vec<(f64, f64)>) -> Result<Self> {
        let t = Self { source_run_id, points };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.iter().any(|&(p, v)| !p.is_finite() || !v.is_finite()) {
            return Err(Error::Data("release trace has non-finite entries".into()));
        }
        if self.points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Data("release trace progress must be strictly increasing".into()));
        }
        Ok(())
    }

    /// The evaluations a live run feeds to the rule: every eval after initialization.
    pub fn from_records(records: &[MetricRecord]) -> Result<Self> {
        let points = records.iter().filter(|r| r.progress > 0.0).map(|r| (r.progress, r.probe.lower_copy)).collect();
        Self::new(records.first().map(|r| r.run_id.clone()), points)
    }

    /// Two whitespace-separated columns, progress then score. `#` lines and a non-numeric header are ignored.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut points = vec![];
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split_whitespace().collect();
            let parsed = (cols.len() == 2).then(|| Some((cols[0].parse::<f64>().ok()?, cols[1].parse::<f64>().ok()?))).flatten();
            match parsed {
                Some(p) => points.push(p),
                None if i == 0 => {}
                None => return Err(Error::Format(format!("trace line {}: {line:?}", i + 1))),
            }
        }
        Self::new(None, points)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleVariant {
    pub label: String,
    pub rule: InterventionConfig,
}

impl RuleVariant {
    pub fn new(label: &str, threshold: f64, patience: u32, min: f64, force: f64) -> Self {
        let rule = InterventionConfig {
            trigger_threshold: threshold,
            patience,
            min_release_frac: min,
            force_release_frac: force,
            ..InterventionConfig::new(InterventionMode::Adaptive)
        };
        Self { label: label.into(), rule }
    }

    pub fn fixed(label: &str, frac: f64) -> Self {
        let rule = InterventionConfig { fixed_release_frac: Some(frac), ..InterventionConfig::new(InterventionMode::FixedRelease) };
        Self { label: label.into(), rule }
    }
}

pub const MAIN_RULE: &str = "main";

/// Main rule and its nearby threshold, patience and window variants.
pub fn standard_variants() -> Vec<RuleVariant> {
    vec![
        RuleVariant::new(MAIN_RULE, 0.005, 3, 0.03, 0.12),
        RuleVariant::new("lower_threshold", 0.003, 3, 0.03, 0.12),
        RuleVariant::new("higher_threshold", 0.007, 3, 0.03, 0.12),
        RuleVariant::new("no_patience", 0.005, 1, 0.03, 0.12),
        RuleVariant::new("stricter_patience", 0.005, 5, 0.03, 0.12),
        RuleVariant::new("shorter_window", 0.005, 3, 0.03, 0.08),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRow {
    pub rule: String,
    pub threshold: f64,
    pub patience: u32,
    pub window: (f64, f64),
    pub release: Option<f64>,
    /// Released by the window end or a fixed checkpoint rather than by persistence.
    pub forced: bool,
}

/// Runs the release rule of every variant over `trace`.
pub fn replay_release(trace: &ReleaseTrace, variants: &[RuleVariant]) -> Result<Vec<ReplayRow>> {
    trace.validate()?;
    variants
        .iter()
        .map(|v| {
            v.rule.validate()?;
            let mut s = ReleaseState::new();
            let mut forced = false;
            for (i, &(p, score)) in trace.points.iter().enumerate() {
                if s.update_release(score, p, &v.rule, i as u64 + 1)? {
                    forced = v.rule.mode == InterventionMode::FixedRelease || s.consecutive_hits < v.rule.patience;
                    break;
                }
            }
            Ok(ReplayRow {
                rule: v.label.clone(),
                threshold: v.rule.trigger_threshold,
                patience: v.rule.patience,
                window: match (v.rule.mode, v.rule.fixed_release_frac) {
                    (InterventionMode::FixedRelease, Some(f)) => (f, f),
                    _ => (v.rule.min_release_frac, v.rule.force_release_frac),
                },
                release: s.release_progress,
                forced,
            })
        })
        .collect()
}

fn later_or_equal(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (_, None) => a.is_none(),
        (None, Some(_)) => true,
        (Some(a), Some(b)) => a >= b,
    }
}

/// Rows with the main rule's window and a stricter threshold or patience that release before it.
pub fn monotonicity_violations(rows: &[ReplayRow]) -> Vec<String> {
    let Some(main) = rows.iter().find(|r| r.rule == MAIN_RULE) else { return vec![] };
    rows.iter()
        .filter(|r| r.window == main.window && r.threshold >= main.threshold && r.patience >= main.patience)
        .filter(|r| !later_or_equal(r.release, main.release))
        .map(|r| r.rule.clone())
        .collect()
}

/// `no_patience ≤ main ≤ {higher_threshold, stricter_patience}` over whichever of those rows are present.
pub fn table_ordering_holds(rows: &[ReplayRow]) -> bool {
    let get = |l: &str| rows.iter().find(|r| r.rule == l).map(|r| r.release);
    let Some(main) = get(MAIN_RULE) else { return false };
    get("no_patience").is_none_or(|np| later_or_equal(main, np))
        && ["higher_threshold", "stricter_patience"].iter().all(|l| get(l).is_none_or(|x| later_or_equal(x, main)))
}

pub fn replay_tsv(rows: &[ReplayRow]) -> String {
    let mut s = String::from("rule\tthreshold\tpatience\twindow\trelease\tforced\n");
    for r in rows {
        let rel = r.release.map_or("none".to_string(), |p| format!("{:.2}%", 100.0 * p));
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{:.0}-{:.0}%\t{}\t{}",
            r.rule,
            r.threshold,
            r.patience,
            100.0 * r.window.0,
            100.0 * r.window.1,
            rel,
            r.forced
        );
    }
    s
}
