use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::par::Exec;
use crate::tensor::{gelu_scalar, silu_scalar};

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Reference values at `m = 3840`, `r = 2560`, `ν = 0.384`, `τ_g = τ_s`.
pub const GEGLU_REFERENCE: f64 = 0.256;
pub const SWIGLU_REFERENCE: f64 = 0.216;
pub const REFERENCE_NU: f64 = 0.384;

const QUAD_REL_TOL: f64 = 1e-8;
const QUAD_PANELS: usize = 64;
const QUAD_MAX_DEPTH: u32 = 40;
const MC_CHUNK: usize = 1 << 14;
/// Rank of the output projector in the Monte-Carlo estimate.
const MC_OUT_RANK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Silu,
    /// The constant 1.
    One,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu_scalar(x),
            Activation::Silu => silu_scalar(x),
            Activation::One => 1.0,
        }
    }
}

/// Single-branch width `m` with activation `φ` against a gated width `r` with gate `ψ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatedEnergyCase {
    pub d_in: usize,
    pub m: usize,
    pub r: usize,
    /// Input-weight std; the input norm is set so that `σ²‖x‖² = ν`.
    pub sigma: f64,
    pub nu: f64,
    pub tau_s: f64,
    pub tau_g: f64,
    pub phi: Activation,
    pub psi: Activation,
    pub samples: usize,
}

impl GatedEnergyCase {
    /// `m = 3840`, `r = 2560`, `τ_g = τ_s`, GELU single branch.
    pub fn matched(psi: Activation, nu: f64) -> Self {
        Self {
            d_in: 16,
            m: 3840,
            r: 2560,
            sigma: 0.02,
            nu,
            tau_s: 0.02,
            tau_g: 0.02,
            phi: Activation::Gelu,
            psi,
            samples: 1_000_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.d_in == 0 {
            return Err(config_err("m and d_in must be positive"));
        }
        if !(self.nu > 0.0 && self.sigma > 0.0 && self.tau_s > 0.0 && self.tau_g >= 0.0) {
            return Err(config_err("nu, sigma, tau_s must be positive and tau_g non-negative"));
        }
        Ok(())
    }
}

fn simpson(f: &impl Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
    let m = 0.5 * (a + b);
    let fm = f(m);
    ((b - a) / 6.0 * (fa + 4.0 * fm + fb), m, fm)
}

#[allow(clippy::too_many_arguments)]
fn adaptive(f: &impl Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64, whole: f64, m: f64, fm: f64, tol: f64, depth: u32) -> Result<f64> {
    let (left, lm, flm) = simpson(f, a, fa, m, fm);
    let (right, rm, frm) = simpson(f, m, fm, b, fb);
    let delta = left + right - whole;
    if delta.abs() <= 15.0 * tol {
        return Ok(left + right + delta / 15.0);
    }
    if depth == 0 {
        return Err(Error::Numerical(format!("quadrature did not converge on [{a}, {b}]")));
    }
    Ok(adaptive(f, a, fa, m, fm, left, lm, flm, tol / 2.0, depth - 1)?
        + adaptive(f, m, fm, b, fb, right, rm, frm, tol / 2.0, depth - 1)?)
}

/// `E f(G)` for `G ~ N(0, ν)`, adaptive Simpson on `±12√ν`.
pub fn gaussian_expectation(f: impl Fn(f64) -> f64, nu: f64) -> Result<f64> {
    let sd = nu.sqrt();
    let g = |x: f64| f(x) * (-x * x / (2.0 * nu)).exp() / (sd * (2.0 * PI).sqrt());
    let (lo, hi) = (-12.0 * sd, 12.0 * sd);
    let h = (hi - lo) / QUAD_PANELS as f64;
    let panels: Vec<(f64, f64)> = (0..QUAD_PANELS).map(|i| (lo + i as f64 * h, lo + (i + 1) as f64 * h)).collect();
    let coarse: Vec<_> = panels
        .iter()
        .map(|&(a, b)| {
            let (fa, fb) = (g(a), g(b));
            let (s, m, fm) = simpson(&g, a, fa, b, fb);
            (a, fa, b, fb, s, m, fm)
        })
        .collect();
    let scale = coarse.iter().map(|c| c.4.abs()).sum::<f64>().max(f64::MIN_POSITIVE);
    let tol = QUAD_REL_TOL * scale / QUAD_PANELS as f64;
    let mut total = 0.0;
    for (a, fa, b, fb, s, m, fm) in coarse {
        total += adaptive(&g, a, fa, b, fb, s, m, fm, tol, QUAD_MAX_DEPTH)?;
    }
    Ok(total)
}

/// `(τ_g²/τ_s²)(r/m)·ν·Eψ(G_ν)² / Eφ(G_ν)²` by quadrature.
pub fn rho0_analytic(case: &GatedEnergyCase) -> Result<f64> {
    case.validate()?;
    if case.r == 0 {
        return Ok(0.0);
    }
    let e_phi = gaussian_expectation(|x| case.phi.apply(x).powi(2), case.nu)?;
    let e_psi = gaussian_expectation(|x| case.psi.apply(x).powi(2), case.nu)?;
    if e_phi <= 0.0 {
        return Err(Error::Numerical("single-branch energy is zero".into()));
    }
    Ok((case.tau_g / case.tau_s).powi(2) * (case.r as f64 / case.m as f64) * case.nu * e_psi / e_phi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub value: f64,
    pub stderr: f64,
    pub samples: usize,
}

#[derive(Default, Clone, Copy)]
struct Moments {
    n: f64,
    s: f64,
    s2: f64,
}

impl Moments {
    fn push(&mut self, v: f64) {
        self.n += 1.0;
        self.s += v;
        self.s2 += v * v;
    }
    fn merge(self, o: Moments) -> Moments {
        Moments { n: self.n + o.n, s: self.s + o.s, s2: self.s2 + o.s2 }
    }
    fn mean(&self) -> f64 {
        self.s / self.n
    }
    /// Standard error of the mean.
    fn se(&self) -> f64 {
        let var = (self.s2 - self.s * self.s / self.n) / (self.n - 1.0);
        (var.max(0.0) / self.n).sqrt()
    }
}

/// Per-unit output energy through a rank-`MC_OUT_RANK` projector of an `N(0, τ²)` output column.
fn projected_energy(tau: f64, rng: &mut ChaCha8Rng) -> f64 {
    tau * tau * (0..MC_OUT_RANK).map(|_| normal(rng)).map(|z: f64| z * z).sum::<f64>()
}

fn dot_with_gaussian(x: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> f64 {
    x.iter().map(|xi| xi * sigma * normal(rng)).sum()
}

/// Empirical `E‖P_out F_gate(x)‖² / E‖P_out F_single(x)‖²` from Gaussian weights.
///
/// Each sample draws one hidden unit of each FFN: input rows, gate and up rows, and an
/// output column. Units are independent, so the layer energy is width times the unit mean.
pub fn rho0_monte_carlo(case: &GatedEnergyCase, seed: u64) -> Result<McEstimate> {
    rho0_monte_carlo_on(case, seed, Exec::Parallel)
}

/// [`rho0_monte_carlo`] on an explicit execution path; both paths give identical results.
pub fn rho0_monte_carlo_on(case: &GatedEnergyCase, seed: u64, exec: Exec) -> Result<McEstimate> {
    case.validate()?;
    if case.samples < 10_000 {
        return Err(config_err(format!("{} samples; at least 10^4 required", case.samples)));
    }
    if case.r == 0 {
        return Ok(McEstimate { value: 0.0, stderr: 0.0, samples: case.samples });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..case.d_in).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let target = case.nu.sqrt() / case.sigma;
    x.iter_mut().for_each(|v| *v *= target / norm);

    let chunks: Vec<(u64, usize)> = (0..case.samples.div_ceil(MC_CHUNK))
        .map(|c| (c as u64, MC_CHUNK.min(case.samples - c * MC_CHUNK)))
        .collect();
    let parts = exec.map(chunks, |(c, len)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c + 1);
        let (mut single, mut gate) = (Moments::default(), Moments::default());
        for _ in 0..len {
            let a = dot_with_gaussian(&x, case.sigma, &mut rng);
            single.push(case.phi.apply(a).powi(2) * projected_energy(case.tau_s, &mut rng));
            let b = dot_with_gaussian(&x, case.sigma, &mut rng);
            let c = dot_with_gaussian(&x, case.sigma, &mut rng);
            gate.push((case.psi.apply(b) * c).powi(2) * projected_energy(case.tau_g, &mut rng));
        }
        (single, gate)
    });
    let (single, gate) = parts.into_iter().fold((Moments::default(), Moments::default()), |(s, g), (ps, pg)| (s.merge(ps), g.merge(pg)));
    let (ms, mg) = (single.mean(), gate.mean());
    if ms <= 0.0 {
        return Err(Error::Numerical("single-branch energy is zero".into()));
    }
    let value = case.r as f64 * mg / (case.m as f64 * ms);
    let rel = ((gate.se() / mg).powi(2) + (single.se() / ms).powi(2)).sqrt();
    Ok(McEstimate { value, stderr: value * rel, samples: case.samples })
}

/// `ρ̄ = (prior + ρ₀·A) / (prior + A)`.
pub fn residual_contraction_rhobar(prior_energy: f64, a: f64, rho0: f64) -> Result<f64> {
    if !(prior_energy >= 0.0 && a >= 0.0 && rho0.is_finite()) {
        return Err(config_err(format!("invalid energies: prior {prior_energy}, A {a}, rho0 {rho0}")));
    }
    let den = prior_energy + a;
    if den == 0.0 {
        return Err(config_err("prior + A = 0 leaves the contraction undefined"));
    }
    Ok((prior_energy + rho0 * a) / den)
}
