use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::bilinear::{alpha_scaling_check, check_theorem1, suppression_composition, AdjointFamily, CaseDims, CaseNorms, TheoryCase};
use super::entropy::{sample_logit_rows, verify_entropy_lemma};
use super::gated::{
    residual_contraction_rhobar, rho0_analytic, rho0_monte_carlo, Activation, GatedEnergyCase, GEGLU_REFERENCE, REFERENCE_NU,
    SWIGLU_REFERENCE,
};
use crate::error::{config_err, Error, Result};
use crate::par::Exec;

pub const NU_SWEEP: [f64; 3] = [0.1, REFERENCE_NU, 1.0];
pub const DEFAULT_ALPHA: f64 = 0.25;
pub const DEFAULT_LAMBDA_BAR: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Theorem1,
    Alpha,
    Rho0,
    Contraction,
    Entropy,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Theorem1, Suite::Alpha, Suite::Rho0, Suite::Contraction, Suite::Entropy];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Theorem1 => "theorem1",
            Suite::Alpha => "alpha",
            Suite::Rho0 => "rho0",
            Suite::Contraction => "contraction",
            Suite::Entropy => "entropy",
        }
    }

    /// Case count used when none is given.
    pub fn default_cases(self) -> usize {
        match self {
            Suite::Theorem1 => 1000,
            Suite::Alpha => 100,
            Suite::Rho0 => 1_000_000,
            Suite::Contraction => 200,
            Suite::Entropy => 100_000,
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| config_err(format!("unknown suite {s:?}; expected one of theorem1, alpha, rho0, contraction, entropy")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub cases: usize,
    pub seed: u64,
    pub failures: usize,
    pub pass: bool,
    pub records: Vec<Value>,
    pub summary: Value,
}

/// Per-case generator: same `(seed, index)` always yields the same case.
pub fn case_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn family_for(index: usize) -> AdjointFamily {
    if index % 2 == 0 {
        AdjointFamily::SoftmaxAdjoint
    } else {
        AdjointFamily::Random
    }
}

/// The `index`-th randomized case; every tenth has its residual rows scaled by 10.
pub fn theory_case(seed: u64, index: usize) -> TheoryCase {
    let mut rng = case_rng(seed, index);
    let mut case = TheoryCase::random(CaseDims::default(), family_for(index), &mut rng);
    if index % 10 == 9 {
        case.x *= 10.0;
    }
    case
}

fn to_value<S: Serialize>(v: &S) -> Result<Value> {
    Ok(serde_json::to_value(v)?)
}

fn finish(suite: Suite, cases: usize, seed: u64, records: Vec<Value>, passes: &[bool], summary: Value) -> SuiteReport {
    let failures = passes.iter().filter(|p| !**p).count();
    SuiteReport { suite, cases, seed, failures, pass: failures == 0, records, summary }
}

/// Runs one verification suite with `cases` items (samples for `rho0`, rows for `entropy`).
pub fn run_suite(suite: Suite, cases: usize, seed: u64) -> Result<SuiteReport> {
    run_suite_on(suite, cases, seed, Exec::Parallel)
}

pub fn run_suite_on(suite: Suite, cases: usize, seed: u64, exec: Exec) -> Result<SuiteReport> {
    match suite {
        Suite::Theorem1 => theorem1_suite(cases, seed, exec),
        Suite::Alpha => alpha_suite(cases, seed, exec),
        Suite::Rho0 => rho0_suite(cases, seed),
        Suite::Contraction => contraction_suite(cases, seed, exec),
        Suite::Entropy => entropy_suite(cases, seed),
    }
}

fn theorem1_suite(cases: usize, seed: u64, exec: Exec) -> Result<SuiteReport> {
    let reports = exec.map((0..cases).collect(), |i| check_theorem1(&theory_case(seed, i), DEFAULT_LAMBDA_BAR));
    let reports = reports.into_iter().collect::<Result<Vec<_>>>()?;
    let passes: Vec<bool> = reports.iter().map(|r| r.pass).collect();
    let worst = reports
        .iter()
        .filter(|r| r.bound_first_order > 0.0)
        .map(|r| r.lhs_first_order / r.bound_first_order)
        .fold(0.0, f64::max);
    let localized = reports.iter().filter(|r| r.pass_localized.is_some()).count();
    let records = reports.iter().map(to_value).collect::<Result<Vec<_>>>()?;
    let summary = json!({ "max_first_order_ratio": worst, "localized_checked": localized, "lambda_bar": DEFAULT_LAMBDA_BAR });
    Ok(finish(Suite::Theorem1, cases, seed, records, &passes, summary))
}

fn alpha_suite(cases: usize, seed: u64, exec: Exec) -> Result<SuiteReport> {
    let reports = exec.map((0..cases).collect(), |i| {
        let mut rng = case_rng(seed, i);
        let case = TheoryCase::random(CaseDims::default(), family_for(i), &mut rng);
        let eta = 10f64.powf(rng.gen_range(-3.0..=-2.0));
        alpha_scaling_check(&case, DEFAULT_ALPHA, eta)
    });
    let reports = reports.into_iter().collect::<Result<Vec<_>>>()?;
    let passes: Vec<bool> = reports.iter().map(|r| r.pass).collect();
    let ratios: Vec<f64> = reports.iter().filter_map(|r| r.halving_ratio).collect();
    let (lo, hi) = ratios.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &r| (a.min(r), b.max(r)));
    let lin = reports.iter().map(|r| r.first_order_linearity).fold(0.0, f64::max);
    let records = reports.iter().map(to_value).collect::<Result<Vec<_>>>()?;
    let summary = json!({ "alpha": DEFAULT_ALPHA, "min_halving_ratio": lo, "max_halving_ratio": hi, "max_linearity_error": lin });
    Ok(finish(Suite::Alpha, cases, seed, records, &passes, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rho0Record {
    pub nu: f64,
    pub psi: Activation,
    pub analytic: f64,
    pub monte_carlo: f64,
    pub stderr: f64,
    pub samples: usize,
    pub within_3se: bool,
    pub relative_gap: f64,
    /// Set only at the reference ν.
    pub reference: Option<f64>,
    pub pass: bool,
}

pub fn rho0_record(nu: f64, psi: Activation, samples: usize, seed: u64) -> Result<Rho0Record> {
    let case = GatedEnergyCase { samples, ..GatedEnergyCase::matched(psi, nu) };
    let analytic = rho0_analytic(&case)?;
    let mc = rho0_monte_carlo(&case, seed)?;
    let gap = (mc.value - analytic).abs();
    let within_3se = gap < 3.0 * mc.stderr;
    let relative_gap = gap / analytic;
    let reference = (nu == REFERENCE_NU).then(|| match psi {
        Activation::Silu => SWIGLU_REFERENCE,
        _ => GEGLU_REFERENCE,
    });
    let ref_ok = reference.map_or(true, |r| (analytic - r).abs() <= 0.010);
    let pct_ok = samples < 1_000_000 || relative_gap <= 0.01;
    Ok(Rho0Record {
        nu,
        psi,
        analytic,
        monte_carlo: mc.value,
        stderr: mc.stderr,
        samples,
        within_3se,
        relative_gap,
        reference,
        pass: within_3se && ref_ok && pct_ok,
    })
}

fn rho0_suite(samples: usize, seed: u64) -> Result<SuiteReport> {
    let samples = samples.max(10_000);
    let mut records = Vec::new();
    let mut passes = Vec::new();
    for (i, &nu) in NU_SWEEP.iter().enumerate() {
        for (j, psi) in [Activation::Gelu, Activation::Silu].into_iter().enumerate() {
            let rec = rho0_record(nu, psi, samples, seed.wrapping_add((2 * i + j) as u64))?;
            passes.push(rec.pass);
            records.push(to_value(&rec)?);
        }
    }
    let summary = json!({ "samples": samples, "nu_sweep": NU_SWEEP });
    Ok(finish(Suite::Rho0, samples, seed, records, &passes, summary))
}

fn contraction_suite(cases: usize, seed: u64, exec: Exec) -> Result<SuiteReport> {
    let mut records = Vec::new();
    let mut passes = Vec::new();
    for prior in [0.0, 0.5, 1.0, 4.0] {
        for a in [0.0, 0.25, 1.0, 3.0] {
            for rho0 in [0.216, 0.256, 1.0] {
                if prior + a == 0.0 {
                    continue;
                }
                let rb = residual_contraction_rhobar(prior, a, rho0)?;
                let ok = (rb < 1.0) == (a > 0.0 && rho0 < 1.0);
                passes.push(ok);
                records.push(json!({ "kind": "rhobar", "prior": prior, "a": a, "rho0": rho0, "rhobar": rb, "pass": ok }));
            }
        }
    }
    let reports = exec.map((0..cases).collect(), |i| {
        let mut rng = case_rng(seed, i);
        let case = TheoryCase::random(CaseDims::default(), family_for(i), &mut rng);
        let rhobar: f64 = rng.gen_range(0.05..=1.0);
        let gated = case.with_immature_energy_scaled(rhobar);
        let lambda_bar = [CaseNorms::of(&case).locality(), CaseNorms::of(&gated).locality()]
            .iter()
            .flat_map(|(q, k)| [*q, *k])
            .flatten()
            .fold(0.0, f64::max);
        suppression_composition(&case, rhobar, lambda_bar)
    });
    let mut worst: f64 = 0.0;
    for rep in reports {
        let rep = rep?;
        worst = worst.max(rep.scaling_error);
        passes.push(rep.pass);
        let mut v = to_value(&rep)?;
        v["kind"] = json!("suppression");
        records.push(v);
    }
    let summary = json!({ "max_scaling_error": worst });
    Ok(finish(Suite::Contraction, cases, seed, records, &passes, summary))
}

fn entropy_suite(rows: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = case_rng(seed, 0);
    let sampled = sample_logit_rows(rows, 64, &mut rng);
    let rep = verify_entropy_lemma(&sampled)?;
    let rec = to_value(&rep)?;
    Ok(finish(Suite::Entropy, rows, seed, vec![rec.clone()], &[rep.pass], rec))
}
