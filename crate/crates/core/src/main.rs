use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use qkschedule::data::{load_shard, synth_copy_corpus, write_shard, BatchStream, PackedBatch, Split, SyntheticCorpusSpec, DEFAULT_VAL_FRAC};
use qkschedule::harness::{
    aggregate, alpha_sweep, emit_plot_data, find_metrics, monotonicity_violations, read_metrics, replay_release,
    replay_tsv, run_experiment, standard_variants, table_ordering_holds, ExperimentSpec, PlotKind, ReleaseTrace,
    RuleVariant, RunSummary, CONTROL_ARM,
};
use qkschedule::model::checkpoint;
use qkschedule::probes::{probe_model, ProbeContext};
use qkschedule::theory::{run_suite, Suite};
use qkschedule::train::{train_loop, InterventionMode, RunConfig};
use qkschedule::{Error, Result};

#[derive(Parser)]
#[command(name = "qkschedule", version, about = "Upper-layer Q/K learning-rate scheduling experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one run config or every arm × seed of an experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reference arm for paired deltas; defaults to the first mode-none arm.
        #[arg(long)]
        control: Option<String>,
    },
    /// Replay release-rule variants over a logged lower-copy trace.
    ReplayRelease {
        /// metrics.jsonl, or a two-column progress/score table.
        #[arg(long)]
        log: PathBuf,
        /// Extra fixed-release checkpoints, as fractions.
        #[arg(long, value_delimiter = ',')]
        fixed: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep the early upper-Q/K multiplier against a mode-none control.
    AlphaSweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,0.5,0.25")]
        alphas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Randomized checks of the bounds and constants.
    Theory {
        #[arg(long)]
        suite: Suite,
        #[arg(long)]
        cases: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Probe a checkpoint on validation batches of a shard.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        shard: PathBuf,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 1)]
        eval_batches: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_VAL_FRAC)]
        val_frac: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic copy corpus shard.
    GenCorpus {
        #[arg(long, default_value_t = 512)]
        vocab: usize,
        #[arg(long, default_value_t = 20_000_000)]
        length: usize,
        #[arg(long, default_value_t = 0.3)]
        repeat_rate: f64,
        #[arg(long, default_value_t = 64)]
        window: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate every metrics log under a directory into paired deltas.
    Report {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value = CONTROL_ARM)]
        control: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tidy tables for plotting.
    PlotData {
        #[arg(long)]
        kind: PlotKind,
        /// Metrics logs, or directories searched for them.
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.005)]
        threshold: f64,
        #[arg(long, default_value_t = 0.80)]
        sharpness: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Whether every assertion the command checks held.
type Verdict = bool;

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn status_line(s: &RunSummary) -> String {
    let last = s.records.last();
    format!(
        "{}\t{:?}\tval_loss {}\trelease_step {:?}",
        s.run_id,
        s.status,
        last.map_or("NA".into(), |m| format!("{:.4}", m.probe.val_loss)),
        last.and_then(|m| m.release_step)
    )
}

fn paired_report(runs: &[RunSummary], control: &str, out: &Path) -> Result<Verdict> {
    match aggregate(runs, control) {
        Ok(rep) => {
            fs::write(out.join("report.json"), serde_json::to_string_pretty(&rep)?)?;
            let tsv = rep.to_tsv();
            fs::write(out.join("report.tsv"), &tsv)?;
            print!("{tsv}");
            for (arm, seed) in &rep.incomplete {
                eprintln!("incomplete pair: {arm} seed {seed}");
            }
            Ok(true)
        }
        Err(Error::Usage(msg)) => {
            eprintln!("pairing audit failed: {msg}");
            Ok(false)
        }
        Err(e) => Err(e),
    }
}

fn cmd_run(config: &Path, out: &Path, control: Option<String>) -> Result<Verdict> {
    let text = fs::read_to_string(config)?;
    if let Ok(cfg) = RunConfig::from_toml(&text) {
        let shard = cfg.data.load()?;
        let o = train_loop::<f32>(&cfg, &shard, Some(out))?;
        let s = RunSummary { arm: cfg.name, seed: cfg.seed, run_id: o.run_id, stream_id: o.stream_id, status: o.status, records: o.records };
        println!("{}", status_line(&s));
        return Ok(true);
    }
    let spec = ExperimentSpec::from_toml(&text)?;
    let control = control
        .or_else(|| spec.arms.iter().find(|a| a.intervention.mode == InterventionMode::None).map(|a| a.name.clone()))
        .unwrap_or_else(|| spec.arms[0].name.clone());
    let runs = run_experiment(&spec, Some(out))?;
    for r in &runs {
        eprintln!("{}", status_line(r));
    }
    paired_report(&runs, &control, out)
}

fn cmd_replay(log: &Path, fixed: &[f64], out: Option<&Path>) -> Result<Verdict> {
    let trace = if log.extension().is_some_and(|e| e == "jsonl") {
        let m = read_metrics(log)?;
        if m.skipped > 0 {
            eprintln!("skipped {} malformed lines", m.skipped);
        }
        ReleaseTrace::from_records(&m.records)?
    } else {
        ReleaseTrace::from_tsv(&fs::read_to_string(log)?)?
    };
    let mut variants = standard_variants();
    variants.extend(fixed.iter().map(|&f| RuleVariant::fixed(&format!("fixed_{:.0}pct", 100.0 * f), f)));
    let rows = replay_release(&trace, &variants)?;
    emit(out, &replay_tsv(&rows))?;
    let bad = monotonicity_violations(&rows);
    if !bad.is_empty() {
        eprintln!("release monotonicity violated by: {}", bad.join(", "));
    }
    let ordered = table_ordering_holds(&rows);
    if !ordered {
        eprintln!("release ordering violated");
    }
    Ok(bad.is_empty() && ordered)
}

fn cmd_sweep(config: &Path, alphas: &[f64], out: &Path) -> Result<Verdict> {
    let spec = ExperimentSpec::from_toml(&fs::read_to_string(config)?)?;
    let (sweep, runs) = alpha_sweep(&spec, alphas, Some(out))?;
    fs::write(out.join("sweep.json"), serde_json::to_string_pretty(&sweep)?)?;
    for c in &sweep.checks {
        println!("{}\tseed {}\t{}\t{}", if c.pass { "PASS" } else { "FAIL" }, c.seed, c.name, c.detail);
    }
    let paired = paired_report(&runs, CONTROL_ARM, out)?;
    Ok(sweep.pass && paired)
}

fn cmd_theory(suite: Suite, cases: Option<usize>, seed: u64, out: Option<&Path>) -> Result<Verdict> {
    let rep = run_suite(suite, cases.unwrap_or(suite.default_cases()), seed)?;
    let mut text = String::new();
    for r in &rep.records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    text.push_str(&serde_json::to_string(&rep.summary)?);
    text.push('\n');
    match out {
        Some(_) => {
            emit(out, &text)?;
            println!("{}", serde_json::to_string(&rep.summary)?);
        }
        None => print!("{text}"),
    }
    eprintln!("{} {}: {} cases, {} failures", suite, if rep.pass { "PASS" } else { "FAIL" }, rep.cases, rep.failures);
    Ok(rep.pass)
}

fn cmd_probe(ckpt: &Path, shard: &Path, batch: usize, eval_batches: usize, seed: u64, val_frac: f64, out: Option<&Path>) -> Result<Verdict> {
    let model = checkpoint::load::<f32>(ckpt)?;
    let shard = load_shard(shard)?;
    let mut val = BatchStream::new(&shard, batch, model.config.seq_len, seed, Split::Val, val_frac)?;
    let batches: Vec<PackedBatch> = (0..eval_batches.max(1)).map(|_| val.next_batch()).collect();
    let mut ctx = ProbeContext::new(&model, None);
    let rec = probe_model(&model, &batches, batch, &mut ctx, 0, 0)?;
    emit(out, &format!("{}\n", serde_json::to_string(&rec)?))?;
    Ok(true)
}

fn cmd_report(dir: &Path, control: &str, out: Option<&Path>) -> Result<Verdict> {
    let mut runs = vec![];
    for p in find_metrics(dir)? {
        let log = read_metrics(&p)?;
        if log.skipped > 0 {
            eprintln!("{}: skipped {} malformed lines", p.display(), log.skipped);
        }
        runs.extend(log.summary()?);
    }
    match aggregate(&runs, control) {
        Ok(rep) => {
            emit(out, &serde_json::to_string_pretty(&rep)?)?;
            if out.is_some() {
                print!("{}", rep.to_tsv());
            }
            Ok(true)
        }
        Err(Error::Usage(msg)) => {
            eprintln!("pairing audit failed: {msg}");
            Ok(false)
        }
        Err(e) => Err(e),
    }
}

fn cmd_plot(kind: PlotKind, logs: &[PathBuf], threshold: f64, sharpness: f64, out: Option<&Path>) -> Result<Verdict> {
    let mut paths = vec![];
    for p in logs {
        if p.is_dir() {
            paths.extend(find_metrics(p)?);
        } else {
            paths.push(p.clone());
        }
    }
    let texts = paths.iter().map(fs::read_to_string).collect::<std::io::Result<Vec<_>>>()?;
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let table = emit_plot_data(&refs, kind, threshold, sharpness);
    if table.skipped > 0 {
        eprintln!("skipped {} malformed lines", table.skipped);
    }
    emit(out, &table.to_tsv())?;
    Ok(true)
}

fn dispatch(cmd: Cmd) -> Result<Verdict> {
    match cmd {
        Cmd::Run { config, out, control } => cmd_run(&config, &out, control),
        Cmd::ReplayRelease { log, fixed, out } => cmd_replay(&log, &fixed, out.as_deref()),
        Cmd::AlphaSweep { config, alphas, out } => cmd_sweep(&config, &alphas, &out),
        Cmd::Theory { suite, cases, seed, out } => cmd_theory(suite, cases, seed, out.as_deref()),
        Cmd::Probe { checkpoint, shard, batch, eval_batches, seed, val_frac, out } => {
            cmd_probe(&checkpoint, &shard, batch, eval_batches, seed, val_frac, out.as_deref())
        }
        Cmd::GenCorpus { vocab, length, repeat_rate, window, seed, out } => {
            let shard = synth_copy_corpus(&SyntheticCorpusSpec { vocab, length, repeat_rate, window, seed })?;
            write_shard(&shard, &out)?;
            eprintln!("wrote {} tokens to {}", shard.len(), out.display());
            Ok(true)
        }
        Cmd::Report { dir, control, out } => cmd_report(&dir, &control, out.as_deref()),
        Cmd::PlotData { kind, logs, threshold, sharpness, out } => cmd_plot(kind, &logs, threshold, sharpness, out.as_deref()),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
