use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::experiment::{parse_run_id, RunSummary};
use crate::error::{Error, Result};
use crate::probes::tokens_to_target;
use crate::train::MetricRecord;

/// Progress of the "early" probe readout.
pub const EARLY_PROGRESS: f64 = 0.03;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlySnapshot {
    pub progress: f64,
    pub step: u64,
    pub upper_entropy: f64,
    pub upper_logit_rms: f64,
    pub qk_displacement: Option<f64>,
    pub ablation_ppl_delta: f64,
    pub lower_copy: f64,
    pub val_loss: f64,
}

impl EarlySnapshot {
    fn of(r: &MetricRecord) -> Self {
        Self {
            progress: r.progress,
            step: r.probe.step,
            upper_entropy: r.probe.upper_entropy,
            upper_logit_rms: r.probe.upper_logit_rms,
            qk_displacement: r.probe.qk_displacement,
            ablation_ppl_delta: r.probe.ablation_ppl_delta,
            lower_copy: r.probe.lower_copy,
            val_loss: r.probe.val_loss,
        }
    }
}

/// Eval nearest to `target` progress, ignoring the step-0 eval. Ties go to the earlier eval.
pub fn nearest_eval(records: &[MetricRecord], target: f64) -> Option<&MetricRecord> {
    records
        .iter()
        .filter(|r| r.progress > 0.0)
        .min_by(|a, b| (a.progress - target).abs().total_cmp(&(b.progress - target).abs()))
}

pub fn early_snapshot(records: &[MetricRecord]) -> Option<EarlySnapshot> {
    nearest_eval(records, EARLY_PROGRESS).map(EarlySnapshot::of)
}

/// Sample mean and standard deviation (n−1). `std` is `None` below two values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub n: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

pub fn mean_std(values: &[f64]) -> Stat {
    let n = values.len();
    if n == 0 {
        return Stat { n, mean: None, std: None };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = (n > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
    Stat { n, mean: Some(mean), std }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub run_id: String,
    pub complete: bool,
    pub final_loss: Option<f64>,
    pub final_ppl: Option<f64>,
    pub tokens_to_target: Option<f64>,
    pub early: Option<EarlySnapshot>,
    pub release_step: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: String,
    pub seeds: Vec<SeedResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDelta {
    pub arm: String,
    pub metric: String,
    pub seeds: Vec<u64>,
    /// `arm − control` per paired seed.
    pub deltas: Vec<f64>,
    pub stat: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub control: String,
    pub target_loss: Option<f64>,
    pub arms: Vec<ArmReport>,
    pub paired: Vec<PairedDelta>,
    /// `(arm, seed)` pairs dropped because either side failed or is missing.
    pub incomplete: Vec<(String, u64)>,
}

impl RunReport {
    pub fn arm(&self, name: &str) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.arm == name)
    }

    pub fn delta(&self, arm: &str, metric: &str) -> Option<&PairedDelta> {
        self.paired.iter().find(|d| d.arm == arm && d.metric == metric)
    }

    /// Tab-separated paired-delta table.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("arm\tmetric\tn\tmean\tstd\n");
        let f = |v: Option<f64>| v.map_or("NA".to_string(), |v| format!("{v:.6}"));
        for d in &self.paired {
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", d.arm, d.metric, d.stat.n, f(d.stat.mean), f(d.stat.std));
        }
        s
    }
}

/// Every run id must encode its own arm, seed and stream, and runs sharing a seed must share a stream.
pub fn audit_pairing(runs: &[RunSummary]) -> Result<()> {
    let mut streams: BTreeMap<u64, (u64, &str)> = BTreeMap::new();
    let mut seen = std::collections::BTreeSet::new();
    for r in runs {
        let (arm, seed, stream) = parse_run_id(&r.run_id)?;
        if arm != r.arm || seed != r.seed || stream != r.stream_id {
            return Err(Error::Usage(format!("run id {} disagrees with ({}, seed {}, stream {:016x})", r.run_id, r.arm, r.seed, r.stream_id)));
        }
        if !seen.insert((r.arm.as_str(), r.seed)) {
            return Err(Error::Usage(format!("duplicate run for arm {} seed {}", r.arm, r.seed)));
        }
        match streams.get(&r.seed) {
            Some(&(s, other)) if s != r.stream_id => {
                return Err(Error::Usage(format!("seed {} has different batch streams in {} and {}", r.seed, other, r.run_id)))
            }
            Some(_) => {}
            None => {
                streams.insert(r.seed, (r.stream_id, &r.run_id));
            }
        }
    }
    Ok(())
}

fn final_loss(r: &RunSummary) -> Option<f64> {
    r.records.last().map(|m| m.probe.val_loss)
}

/// Aggregates finished runs against `control`. Fails on any pairing violation.
pub fn aggregate(runs: &[RunSummary], control: &str) -> Result<RunReport> {
    audit_pairing(runs)?;
    let mut by_arm: BTreeMap<&str, Vec<&RunSummary>> = BTreeMap::new();
    for r in runs {
        by_arm.entry(r.arm.as_str()).or_default().push(r);
    }
    let ctrl = by_arm.get(control).ok_or_else(|| Error::Usage(format!("no runs for control arm {control}")))?;
    let ctrl_finals: Vec<f64> = ctrl.iter().filter(|r| r.is_complete()).filter_map(|r| final_loss(r)).collect();
    let target_loss = mean_std(&ctrl_finals).mean;

    // Keep arm order as first seen.
    let mut order: Vec<&str> = vec![];
    for r in runs {
        if !order.contains(&r.arm.as_str()) {
            order.push(&r.arm);
        }
    }

    let mut arms = vec![];
    for &arm in &order {
        let mut seeds: Vec<SeedResult> = by_arm[arm]
            .iter()
            .map(|r| {
                let complete = r.is_complete();
                let fl = final_loss(r).filter(|_| complete);
                let curve: Vec<(f64, f64)> = r.records.iter().map(|m| (m.probe.tokens as f64, m.probe.val_loss)).collect();
                SeedResult {
                    seed: r.seed,
                    run_id: r.run_id.clone(),
                    complete,
                    final_loss: fl,
                    final_ppl: fl.map(f64::exp),
                    tokens_to_target: target_loss.filter(|_| complete).and_then(|t| tokens_to_target(&curve, t)),
                    early: early_snapshot(&r.records),
                    release_step: r.records.last().and_then(|m| m.release_step),
                }
            })
            .collect();
        seeds.sort_by_key(|s| s.seed);
        arms.push(ArmReport { arm: arm.to_string(), seeds });
    }

    let ctrl_report = arms.iter().find(|a| a.arm == control).expect("control present").clone();
    let mut paired = vec![];
    let mut incomplete = vec![];
    for a in arms.iter().filter(|a| a.arm != control) {
        let mut rows: Vec<(u64, &SeedResult, &SeedResult)> = vec![];
        for s in &a.seeds {
            match ctrl_report.seeds.iter().find(|c| c.seed == s.seed) {
                Some(c) if c.complete && s.complete => rows.push((s.seed, s, c)),
                _ => incomplete.push((a.arm.clone(), s.seed)),
            }
        }
        for c in &ctrl_report.seeds {
            if !a.seeds.iter().any(|s| s.seed == c.seed) {
                incomplete.push((a.arm.clone(), c.seed));
            }
        }
        let metrics: [(&str, fn(&SeedResult) -> Option<f64>); 3] =
            [("final_loss", |s| s.final_loss), ("final_ppl", |s| s.final_ppl), ("tokens_to_target", |s| s.tokens_to_target)];
        for (name, get) in metrics {
            let (seeds, deltas): (Vec<u64>, Vec<f64>) =
                rows.iter().filter_map(|&(seed, s, c)| Some((seed, get(s)? - get(c)?))).unzip();
            let stat = mean_std(&deltas);
            paired.push(PairedDelta { arm: a.arm.clone(), metric: name.into(), seeds, deltas, stat });
        }
    }
    Ok(RunReport { control: control.to_string(), target_loss, arms, paired, incomplete })
}
