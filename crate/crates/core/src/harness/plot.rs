use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::experiment::parse_metrics;
use crate::error::Error;
use crate::train::MetricRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    EntropyCurve,
    LogitCurve,
    AblationCurve,
    MaturityEvents,
}

impl FromStr for PlotKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "entropy_curve" => Ok(Self::EntropyCurve),
            "logit_curve" => Ok(Self::LogitCurve),
            "ablation_curve" => Ok(Self::AblationCurve),
            "maturity_events" => Ok(Self::MaturityEvents),
            _ => Err(Error::Usage(format!("unknown plot kind {s:?}"))),
        }
    }
}

/// First post-initialization evals where lower routing and upper sharpness mature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaturityEvents {
    pub lower_copy: Option<f64>,
    pub upper_sharp: Option<f64>,
}

pub fn first_crossings(records: &[MetricRecord], threshold: f64, sharpness: f64) -> MaturityEvents {
    let after_init = || records.iter().filter(|r| r.progress > 0.0);
    MaturityEvents {
        lower_copy: after_init().find(|r| r.probe.lower_copy >= threshold).map(|r| r.progress),
        upper_sharp: after_init().find(|r| r.probe.upper_entropy <= sharpness).map(|r| r.progress),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotTable {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
    pub skipped: usize,
}

impl PlotTable {
    pub fn to_tsv(&self) -> String {
        let mut s = self.header.join("\t");
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{}", r.join("\t"));
        }
        s
    }
}

fn num(v: Option<f64>) -> String {
    v.map_or("NA".into(), |v| v.to_string())
}

/// Tidy table of one metric over every log. Unparseable lines are skipped and counted.
pub fn emit_plot_data(logs: &[&str], kind: PlotKind, threshold: f64, sharpness: f64) -> PlotTable {
    let mut skipped = 0;
    let mut rows = vec![];
    for text in logs {
        let log = parse_metrics(text);
        skipped += log.skipped;
        if kind == PlotKind::MaturityEvents {
            let Some(first) = log.records.first() else { continue };
            let ev = first_crossings(&log.records, threshold, sharpness);
            for (name, p) in [("lower_copy", ev.lower_copy), ("upper_sharp", ev.upper_sharp)] {
                rows.push(vec![first.arm.clone(), first.seed.to_string(), name.into(), num(p)]);
            }
            continue;
        }
        for r in &log.records {
            let v = match kind {
                PlotKind::EntropyCurve => r.probe.upper_entropy,
                PlotKind::LogitCurve => r.probe.upper_logit_rms,
                _ => r.probe.ablation_ppl_delta,
            };
            rows.push(vec![r.progress.to_string(), r.arm.clone(), r.seed.to_string(), num(Some(v))]);
        }
    }
    let header = match kind {
        PlotKind::MaturityEvents => vec!["arm", "seed", "event", "progress"],
        _ => vec!["progress", "arm", "seed", "value"],
    };
    PlotTable { header, rows, skipped }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probes::ProbeRecord;
    use crate::train::Phase;

    fn line(progress: f64, copy: f64, ent: f64) -> String {
        let r = MetricRecord {
            run_id: "iv/seed3/stream0000000000000001".into(),
            arm: "iv".into(),
            seed: 3,
            progress,
            train_loss: None,
            lr: 0.0,
            multipliers: Default::default(),
            phase: Phase::Held,
            release_step: None,
            probe: ProbeRecord { lower_copy: copy, upper_entropy: ent, ..Default::default() },
        };
        serde_json::to_string(&r).unwrap()
    }

    #[test]
    fn empty_log_gives_header_only() {
        let t = emit_plot_data(&[""], PlotKind::EntropyCurve, 0.005, 0.8);
        assert_eq!(t.to_tsv(), "progress\tarm\tseed\tvalue\n");
        assert_eq!(t.skipped, 0);
        assert!(emit_plot_data(&[], PlotKind::MaturityEvents, 0.005, 0.8).rows.is_empty());
    }

    #[test]
    fn single_eval_single_row() {
        let t = emit_plot_data(&[&line(0.01, 0.0, 0.9)], PlotKind::EntropyCurve, 0.005, 0.8);
        assert_eq!(t.rows, vec![vec!["0.01".to_string(), "iv".into(), "3".into(), "0.9".into()]]);
    }

    #[test]
    fn crossings_match_hand_inspection() {
        // The init eval already exceeds both thresholds and must not count.
        let evals = [
            (0.0, 0.02, 0.5),
            (0.01, 0.001, 0.99),
            (0.02, 0.004, 0.97),
            (0.03, 0.006, 0.95),
            (0.04, 0.003, 0.90),
            (0.05, 0.007, 0.85),
            (0.06, 0.008, 0.81),
            (0.07, 0.009, 0.80),
            (0.08, 0.010, 0.75),
        ];
        let mut text: Vec<String> = evals.iter().map(|&(p, c, e)| line(p, c, e)).collect();
        text.insert(4, "{\"truncated".into());
        let text = text.join("\n");
        let t = emit_plot_data(&[&text], PlotKind::MaturityEvents, 0.005, 0.8);
        assert_eq!(t.skipped, 1);
        assert_eq!(t.rows[0], vec!["iv".to_string(), "3".into(), "lower_copy".into(), "0.03".into()]);
        assert_eq!(t.rows[1], vec!["iv".to_string(), "3".into(), "upper_sharp".into(), "0.07".into()]);
        let never = emit_plot_data(&[&text], PlotKind::MaturityEvents, 0.5, 0.1);
        assert_eq!(never.rows[0][3], "NA");
        assert_eq!(emit_plot_data(&[&text], PlotKind::LogitCurve, 0.0, 0.0).rows.len(), 9);
    }
}
