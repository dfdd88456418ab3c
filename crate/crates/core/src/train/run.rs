use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{adamw_step, lr_at, multipliers_at, entropy_floor_penalty};
use super::{InterventionConfig, InterventionMode, OptimizerState, Phase, ReleaseState, ScheduleConfig};
use crate::data::{BatchStream, PackedBatch, Split, SyntheticCorpusSpec, TokenShard, DEFAULT_VAL_FRAC};
use crate::error::{config_err, Error, Result};
use crate::model::{checkpoint, DecoderModel, ModelConfig, ParamGroup};
use crate::probes::{probe_model, ProbeContext, ProbeRecord};
use crate::scalar::Scalar;
use crate::tensor::Tape;

fn d_val_frac() -> f64 {
    DEFAULT_VAL_FRAC
}
fn one_usize() -> usize {
    1
}
fn d_eval_every() -> f64 {
    0.005
}
fn d_sharpness() -> f64 {
    0.80
}
fn one() -> f64 {
    1.0
}

/// Token source and batch geometry. Exactly one of `shard` or `synthetic` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub shard: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticCorpusSpec>,
    pub batch: usize,
    #[serde(default = "d_val_frac")]
    pub val_frac: f64,
    /// Validation batches per evaluation; the first also feeds the mechanism probes.
    #[serde(default = "one_usize")]
    pub eval_batches: usize,
}

impl DataConfig {
    pub fn load(&self) -> Result<TokenShard> {
        match (&self.shard, &self.synthetic) {
            (Some(p), None) => crate::data::load_shard(p),
            (None, Some(s)) => crate::data::synth_copy_corpus(s),
            _ => Err(config_err("data needs exactly one of `shard` or `synthetic`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "d_eval_every")]
    pub eval_every_frac: f64,
    #[serde(default)]
    pub projector_k: Option<usize>,
    #[serde(default)]
    pub checkpoint_fracs: Vec<f64>,
    /// Upper-entropy level counted as "sharp" for maturity events.
    #[serde(default = "d_sharpness")]
    pub sharpness: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { eval_every_frac: d_eval_every(), projector_k: None, checkpoint_fracs: vec![], sharpness: d_sharpness() }
    }
}

/// One training run. Serialized as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    /// Stop after this fraction of `total_steps`; the schedule still spans the full run.
    #[serde(default = "one")]
    pub stop_frac: f64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub intervention: InterventionConfig,
    #[serde(default)]
    pub probes: ProbeConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        self.intervention.validate()?;
        if !(self.stop_frac > 0.0 && self.stop_frac <= 1.0) {
            return Err(config_err(format!("stop_frac {} not in (0, 1]", self.stop_frac)));
        }
        if !(self.probes.eval_every_frac > 0.0 && self.probes.eval_every_frac <= 1.0) {
            return Err(config_err("eval_every_frac must be in (0, 1]"));
        }
        if self.data.batch == 0 || self.data.eval_batches == 0 {
            return Err(config_err("batch and eval_batches must be positive"));
        }
        Ok(())
    }

    pub fn eval_every(&self) -> u64 {
        ((self.probes.eval_every_frac * self.schedule.total_steps as f64).round() as u64).max(1)
    }

    pub fn tokens_per_step(&self) -> u64 {
        (self.data.batch * self.model.seq_len) as u64
    }
}

/// 64-bit FNV-1a, used to fingerprint shards and streams.
pub fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Identity of the batch sequence a run consumes.
fn stream_id(shard: &TokenShard, cfg: &RunConfig) -> u64 {
    let head = [cfg.seed, cfg.data.batch as u64, cfg.model.seq_len as u64, cfg.data.val_frac.to_bits(), shard.vocab() as u64];
    let toks = shard.tokens().iter().flat_map(|t| t.to_le_bytes());
    fnv1a(head.iter().flat_map(|v| v.to_le_bytes()).chain(toks))
}

/// One metrics-log line, written at every evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub run_id: String,
    pub arm: String,
    pub seed: u64,
    pub progress: f64,
    /// Mean training loss over the steps since the previous evaluation.
    pub train_loss: Option<f64>,
    pub lr: f64,
    pub multipliers: BTreeMap<String, f64>,
    pub phase: Phase,
    pub release_step: Option<u64>,
    #[serde(flatten)]
    pub probe: ProbeRecord,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub upper_qk_multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Stopped { step: u64 },
    Failed { step: u64, reason: String },
}

#[derive(Debug, Clone)]
pub struct RunOutcome<T> {
    pub run_id: String,
    pub stream_id: u64,
    pub status: RunStatus,
    pub records: Vec<MetricRecord>,
    pub steps: Vec<StepRecord>,
    pub release: ReleaseState,
    pub model: DecoderModel<T>,
}

struct Log {
    file: Option<BufWriter<File>>,
}

impl Log {
    fn write<S: Serialize>(&mut self, rec: &S) -> Result<()> {
        if let Some(f) = self.file.as_mut() {
            serde_json::to_writer(&mut *f, rec)?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        Ok(())
    }
}

fn is_non_finite(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. })
}

/// Forward, loss (with the entropy-floor term while held), backward and AdamW for one batch.
fn train_step<T: Scalar>(
    model: &mut DecoderModel<T>,
    opt: &mut OptimizerState<T>,
    b: &PackedBatch,
    cfg: &RunConfig,
    release: &ReleaseState,
    step: u64,
) -> Result<(f64, f64, f64)> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true)?;
    let out = model.view().forward(&mut tape, &vars, &b.inputs, cfg.data.batch)?;
    let ce = tape.cross_entropy(out.logits, &b.targets)?;
    let ce_value = tape.value(ce).item().f64();
    let iv = &cfg.intervention;
    let mut loss = ce;
    if iv.mode == InterventionMode::EntropyFloor && release.is_held() {
        let upper = cfg.model.upper_start()..cfg.model.n_layers;
        let count = upper.len();
        let mut acc = None;
        for l in upper {
            let h = tape.normalized_entropy_mean(out.layers[l].attn)?;
            acc = Some(match acc {
                None => h,
                Some(a) => tape.add(a, h)?,
            });
        }
        if let Some(a) = acc {
            let h_upper = tape.scale(a, 1.0 / count as f64)?;
            let pen = entropy_floor_penalty(&mut tape, h_upper, iv)?;
            loss = tape.add(ce, pen)?;
        }
    }
    if !ce_value.is_finite() {
        return Err(Error::NonFinite { op: "loss", detail: format!("step {step}") });
    }
    let grads = tape.backward(loss)?;
    let gl: Vec<Option<&[T]>> = vars.iter().map(|&v| grads.get(v)).collect();
    let total = cfg.schedule.total_steps;
    let lr = lr_at(step, &cfg.schedule);
    let mult = multipliers_at(step, release, iv, total);
    adamw_step(&mut model.params, &gl, opt, lr, &mult, &cfg.schedule)?;
    Ok((ce_value, lr, mult.get(ParamGroup::UpperQk)))
}

/// Runs one configuration against `shard`, optionally writing `metrics.jsonl`
/// and checkpoints under `out_dir`.
pub fn train_loop<T: Scalar>(cfg: &RunConfig, shard: &TokenShard, out_dir: Option<&Path>) -> Result<RunOutcome<T>> {
    cfg.validate()?;
    if shard.vocab() > cfg.model.vocab {
        return Err(config_err(format!("shard vocab {} exceeds model vocab {}", shard.vocab(), cfg.model.vocab)));
    }
    let (batch, n) = (cfg.data.batch, cfg.model.seq_len);
    let total = cfg.schedule.total_steps;
    let sid = stream_id(shard, cfg);
    let run_id = format!("{}/seed{}/stream{:016x}", cfg.name, cfg.seed, sid);
    let mut log = Log { file: None };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
        log.file = Some(BufWriter::new(File::create(dir.join("metrics.jsonl"))?));
    }

    let mut model = DecoderModel::<T>::build(&cfg.model, cfg.seed)?;
    let mut opt = OptimizerState::new(&model.params);
    let mut train = BatchStream::new(shard, batch, n, cfg.seed, Split::Train, cfg.data.val_frac)?;
    let mut val = BatchStream::new(shard, batch, n, cfg.seed, Split::Val, cfg.data.val_frac)?;
    let eval_set: Vec<PackedBatch> = (0..cfg.data.eval_batches).map(|_| val.next_batch()).collect();
    let mut ctx = ProbeContext::new(&model, cfg.probes.projector_k);
    let mut release = ReleaseState::new();
    let mut records = Vec::new();
    let mut steps = Vec::new();

    let eval_every = cfg.eval_every();
    let stop = ((cfg.stop_frac * total as f64).ceil() as u64).clamp(1, total);
    let mut ckpt_steps: Vec<u64> =
        cfg.probes.checkpoint_fracs.iter().map(|f| ((f * total as f64).ceil() as u64).clamp(1, total)).collect();
    ckpt_steps.sort_unstable();
    ckpt_steps.dedup();

    let mut evaluate = |model: &DecoderModel<T>, step: u64, loss_acc: &mut (f64, u32), release: &mut ReleaseState| -> Result<MetricRecord> {
        let tokens = step * cfg.tokens_per_step();
        let probe = probe_model(model, &eval_set, batch, &mut ctx, step, tokens)?;
        let progress = step as f64 / total as f64;
        if step > 0 {
            release.update_release(probe.lower_copy, progress, &cfg.intervention, step)?;
        }
        let mult = multipliers_at(step + 1, release, &cfg.intervention, total);
        let rec = MetricRecord {
            run_id: run_id.clone(),
            arm: cfg.name.clone(),
            seed: cfg.seed,
            progress,
            train_loss: (loss_acc.1 > 0).then(|| loss_acc.0 / loss_acc.1 as f64),
            lr: lr_at(step, &cfg.schedule),
            multipliers: mult.to_map(),
            phase: release.phase,
            release_step: release.release_step,
            probe,
        };
        *loss_acc = (0.0, 0);
        Ok(rec)
    };

    let mut acc = (0.0, 0u32);
    let first = evaluate(&model, 0, &mut acc, &mut release)?;
    log.write(&first)?;
    records.push(first);
    let mut status = RunStatus::Completed;
    for step in 1..=stop {
        let b = train.next_batch();
        let snapshot = model.params.iter().map(|p| p.value.clone()).collect::<Vec<_>>();
        match train_step(&mut model, &mut opt, &b, cfg, &release, step) {
            Ok((loss, lr, up)) => {
                acc.0 += loss;
                acc.1 += 1;
                steps.push(StepRecord { step, loss, lr, upper_qk_multiplier: up });
            }
            Err(e) if is_non_finite(&e) => {
                for (p, v) in model.params.iter_mut().zip(snapshot) {
                    p.value = v;
                }
                if let Some(dir) = out_dir {
                    checkpoint::save(&model, dir.join("last_good.ckpt"))?;
                }
                status = RunStatus::Failed { step, reason: e.to_string() };
                log.write(&serde_json::json!({ "run_id": run_id, "event": "failed", "step": step, "reason": e.to_string() }))?;
                break;
            }
            Err(e) => return Err(e),
        }
        release.tick(step, &cfg.intervention, total);
        if step % eval_every == 0 || step == stop {
            let rec = evaluate(&model, step, &mut acc, &mut release)?;
            log.write(&rec)?;
            records.push(rec);
        }
        if ckpt_steps.binary_search(&step).is_ok() {
            if let Some(dir) = out_dir {
                checkpoint::save(&model, dir.join(format!("ckpt_{step:08}.bin")))?;
            }
        }
    }
    if status == RunStatus::Completed && stop < total {
        status = RunStatus::Stopped { step: stop };
    }
    Ok(RunOutcome { run_id, stream_id: sid, status, records, steps, release, model })
}
