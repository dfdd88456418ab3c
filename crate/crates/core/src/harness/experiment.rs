use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::model::ModelConfig;
use crate::par;
use crate::train::{train_loop, DataConfig, InterventionConfig, MetricRecord, ProbeConfig, RunConfig, RunStatus, ScheduleConfig};

/// One arm of an experiment. `model` overrides the shared architecture for component sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSpec {
    pub name: String,
    pub intervention: InterventionConfig,
    #[serde(default)]
    pub model: Option<ModelConfig>,
}

fn one() -> f64 {
    1.0
}

/// Arms × seeds over shared data, schedule and probes. Serialized as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub arms: Vec<ArmSpec>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub probes: ProbeConfig,
    #[serde(default = "one")]
    pub stop_frac: f64,
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Self = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.arms.is_empty() || self.seeds.is_empty() {
            return Err(config_err("experiment needs at least one arm and one seed"));
        }
        let mut names: Vec<&str> = self.arms.iter().map(|a| a.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(config_err("arm names must be unique"));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            return Err(config_err("seeds must be unique"));
        }
        if names.iter().any(|n| n.contains('/')) {
            return Err(config_err("arm names may not contain '/'"));
        }
        for cfg in self.run_configs() {
            cfg.validate()?;
        }
        Ok(())
    }

    pub fn arm(&self, name: &str) -> Option<&ArmSpec> {
        self.arms.iter().find(|a| a.name == name)
    }

    /// Every arm × seed run, arm-major.
    pub fn run_configs(&self) -> Vec<RunConfig> {
        self.arms
            .iter()
            .flat_map(|arm| {
                self.seeds.iter().map(move |&seed| RunConfig {
                    name: arm.name.clone(),
                    seed,
                    stop_frac: self.stop_frac,
                    model: arm.model.clone().unwrap_or_else(|| self.model.clone()),
                    data: self.data.clone(),
                    schedule: self.schedule.clone(),
                    intervention: arm.intervention.clone(),
                    probes: self.probes.clone(),
                })
            })
            .collect()
    }
}

/// What the harness keeps of a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub arm: String,
    pub seed: u64,
    pub run_id: String,
    pub stream_id: u64,
    pub status: RunStatus,
    pub records: Vec<MetricRecord>,
}

impl RunSummary {
    pub fn is_complete(&self) -> bool {
        !matches!(self.status, RunStatus::Failed { .. })
    }
}

/// `(arm, seed, stream)` from a `"{arm}/seed{seed}/stream{hex}"` run id.
pub fn parse_run_id(run_id: &str) -> Result<(String, u64, u64)> {
    let bad = || Error::Format(format!("malformed run id {run_id:?}"));
    let mut parts = run_id.rsplitn(3, '/');
    let stream = parts.next().and_then(|s| s.strip_prefix("stream")).ok_or_else(bad)?;
    let seed = parts.next().and_then(|s| s.strip_prefix("seed")).ok_or_else(bad)?;
    let arm = parts.next().ok_or_else(bad)?;
    let stream = u64::from_str_radix(stream, 16).map_err(|_| bad())?;
    let seed = seed.parse().map_err(|_| bad())?;
    Ok((arm.to_string(), seed, stream))
}

/// Parsed metrics log: evaluation records, failure marker, and the count of unreadable lines.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<MetricRecord>,
    pub failed: Option<(u64, String)>,
    pub skipped: usize,
}

#[derive(Deserialize)]
struct FailureEvent {
    event: String,
    step: u64,
    reason: String,
}

pub fn parse_metrics(text: &str) -> MetricsLog {
    let mut log = MetricsLog { records: vec![], failed: None, skipped: 0 };
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        if let Ok(rec) = serde_json::from_str::<MetricRecord>(line) {
            log.records.push(rec);
        } else if let Ok(ev) = serde_json::from_str::<FailureEvent>(line) {
            if ev.event == "failed" {
                log.failed = Some((ev.step, ev.reason));
            } else {
                log.skipped += 1;
            }
        } else {
            log.skipped += 1;
        }
    }
    log
}

pub fn read_metrics(path: &Path) -> Result<MetricsLog> {
    let f = fs::File::open(path)?;
    let mut text = String::new();
    for line in BufReader::new(f).lines() {
        text.push_str(&line?);
        text.push('\n');
    }
    Ok(parse_metrics(&text))
}

impl MetricsLog {
    /// Rebuilds a run summary; `None` for an empty log.
    pub fn summary(&self) -> Result<Option<RunSummary>> {
        let Some(first) = self.records.first() else { return Ok(None) };
        let (_, _, stream_id) = parse_run_id(&first.run_id)?;
        let status = match &self.failed {
            Some((step, reason)) => RunStatus::Failed { step: *step, reason: reason.clone() },
            None if self.records.last().is_some_and(|r| r.progress < 1.0) => {
                RunStatus::Stopped { step: self.records.last().map_or(0, |r| r.probe.step) }
            }
            None => RunStatus::Completed,
        };
        Ok(Some(RunSummary {
            arm: first.arm.clone(),
            seed: first.seed,
            run_id: first.run_id.clone(),
            stream_id,
            status,
            records: self.records.clone(),
        }))
    }
}

/// Every `metrics.jsonl` under `root`, in path order.
pub fn find_metrics(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n == "metrics.jsonl") {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Output directory of one run.
pub fn run_dir(root: &Path, arm: &str, seed: u64) -> PathBuf {
    root.join(arm).join(format!("seed{seed}"))
}

/// Trains every arm × seed. A diverged run is kept with `Failed` status; other errors abort.
pub fn run_experiment(spec: &ExperimentSpec, out_dir: Option<&Path>) -> Result<Vec<RunSummary>> {
    spec.validate()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("experiment.toml"), spec.to_toml()?)?;
    }
    let shard = spec.data.load()?;
    let results = par::map(spec.run_configs(), |cfg| {
        let dir = out_dir.map(|d| run_dir(d, &cfg.name, cfg.seed));
        let out = train_loop::<f32>(&cfg, &shard, dir.as_deref())?;
        Ok(RunSummary {
            arm: cfg.name.clone(),
            seed: cfg.seed,
            run_id: out.run_id,
            stream_id: out.stream_id,
            status: out.status,
            records: out.records,
        })
    });
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_ids_round_trip() {
        let (arm, seed, stream) = parse_run_id("alpha0.25/seed7/stream00000000deadbeef").unwrap();
        assert_eq!((arm.as_str(), seed, stream), ("alpha0.25", 7, 0xdead_beef));
        assert!(parse_run_id("arm/seedX/stream00").is_err());
        assert!(parse_run_id("stream00").is_err());
    }

    #[test]
    fn malformed_lines_are_counted() {
        let log = parse_metrics("not json\n{\"event\":\"failed\",\"step\":4,\"reason\":\"nan\",\"run_id\":\"a\"}\n{}\n\n");
        assert_eq!(log.skipped, 2);
        assert_eq!(log.failed, Some((4, "nan".into())));
        assert!(log.summary().unwrap().is_none());
    }
}
