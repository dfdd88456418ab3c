use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Absolute slack on every bound comparison.
pub const BOUND_SLACK: f64 = 1e-9;

/// How the logit adjoint `E` is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjointFamily {
    /// Row `i` is `p ⊙ (g − ⟨p, g⟩)` for a causal softmax row `p` and random `g`.
    SoftmaxAdjoint,
    /// Dense standard normal entries.
    Random,
}

/// Largest dims drawn by [`TheoryCase::random`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseDims {
    pub max_n: usize,
    pub max_d: usize,
    pub max_dk: usize,
}

impl Default for CaseDims {
    fn default() -> Self {
        Self { max_n: 16, max_d: 32, max_dk: 16 }
    }
}

/// One step of the upper Q/K bilinear form, with everything the bounds need.
#[derive(Debug, Clone)]
pub struct TheoryCase {
    pub x: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub w_q: DMatrix<f64>,
    pub w_k: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub eta_q: f64,
    pub eta_k: f64,
    pub family: AdjointFamily,
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * normal(rng))
}

/// Orthogonal projector onto a random `k`-dimensional subspace of `R^d`.
pub fn random_projector(d: usize, k: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    if k == 0 {
        return DMatrix::zeros(d, d);
    }
    let q = gaussian(d, k, 1.0, rng).qr().q();
    let p = &q * q.transpose();
    (&p + p.transpose()) * 0.5
}

fn softmax_adjoint(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(n, n);
    for i in 0..n {
        let scale = 3.0 * rng.gen::<f64>();
        let z: Vec<f64> = (0..=i).map(|_| scale * normal(rng)).collect();
        let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = w.iter().sum();
        let g: Vec<f64> = (0..=i).map(|_| normal(rng)).collect();
        let mean: f64 = w.iter().zip(&g).map(|(a, b)| a / s * b).sum();
        for j in 0..=i {
            e[(i, j)] = w[j] / s * (g[j] - mean);
        }
    }
    e
}

fn op_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

impl TheoryCase {
    /// Draws dims, weights, a projector of random rank, and log-uniform steps in `[1e-4, 1e-2]`.
    pub fn random(dims: CaseDims, family: AdjointFamily, rng: &mut impl Rng) -> Self {
        let n = rng.gen_range(2..=dims.max_n.max(2));
        let d = rng.gen_range(2..=dims.max_d.max(2));
        let dk = rng.gen_range(1..=dims.max_dk.max(1));
        let k = rng.gen_range(1..=d);
        let x = gaussian(n, d, 1.0, rng);
        let e = match family {
            AdjointFamily::SoftmaxAdjoint => softmax_adjoint(n, rng),
            AdjointFamily::Random => gaussian(n, n, 1.0 / n as f64, rng),
        };
        let w_scale = 1.0 / (d as f64).sqrt();
        let w_q = gaussian(d, dk, w_scale, rng);
        let w_k = gaussian(d, dk, w_scale, rng);
        let p = random_projector(d, k, rng);
        let mut eta = || 10f64.powf(rng.gen_range(-4.0..=-2.0));
        let (eta_q, eta_k) = (eta(), eta());
        Self { x, e, w_q, w_k, p, eta_q, eta_k, family }
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }
    pub fn d(&self) -> usize {
        self.x.ncols()
    }
    pub fn dk(&self) -> usize {
        self.w_q.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d, dk) = (self.n(), self.d(), self.dk());
        if self.e.shape() != (n, n) || self.w_q.shape() != (d, dk) || self.w_k.shape() != (d, dk) || self.p.shape() != (d, d) {
            return Err(config_err("theory case shapes disagree"));
        }
        let finite = [&self.x, &self.e, &self.w_q, &self.w_k, &self.p].iter().all(|m| m.iter().all(|v| v.is_finite()));
        if !finite || !self.eta_q.is_finite() || !self.eta_k.is_finite() {
            return Err(config_err("theory case has non-finite entries"));
        }
        let asym = (&self.p - self.p.transpose()).amax();
        let idem = (&self.p * &self.p - &self.p).amax();
        if asym > 1e-10 || idem > 1e-10 {
            return Err(config_err(format!("P is not an orthogonal projector (asym {asym:.2e}, idem {idem:.2e})")));
        }
        Ok(())
    }

    /// `X_P = X P`.
    pub fn x_p(&self) -> DMatrix<f64> {
        &self.x * &self.p
    }

    /// `(G_Q, G_K)` for `Z = X W_Q W_Kᵀ Xᵀ / √d_k` with logit adjoint `E`.
    pub fn gradients(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let s = (self.dk() as f64).sqrt();
        let xtex = self.x.transpose() * &self.e * &self.x;
        let g_q = &xtex * &self.w_k / s;
        let g_k = xtex.transpose() * &self.w_q / s;
        (g_q, g_k)
    }

    fn project(&self, db: &DMatrix<f64>) -> DMatrix<f64> {
        let xp = self.x_p();
        &xp * &self.p * db * &self.p * xp.transpose() / (self.dk() as f64).sqrt()
    }

    /// Same case with both step sizes replaced.
    pub fn with_steps(&self, eta_q: f64, eta_k: f64) -> Self {
        Self { eta_q, eta_k, ..self.clone() }
    }

    /// Same case with residual rows `X(I − P) + √ρ̄·X P`.
    pub fn with_immature_energy_scaled(&self, rhobar: f64) -> Self {
        if rhobar == 1.0 {
            return self.clone();
        }
        let xp = self.x_p();
        let x = &self.x - &xp + xp * rhobar.sqrt();
        Self { x, ..self.clone() }
    }
}

/// Immature-block logit change after one explicit step of `W_Q`, `W_K`.
pub fn delta_zp_exact(case: &TheoryCase) -> DMatrix<f64> {
    let (g_q, g_k) = case.gradients();
    let wq_plus = &case.w_q - g_q * case.eta_q;
    let wk_plus = &case.w_k - g_k * case.eta_k;
    let db = wq_plus * wk_plus.transpose() - &case.w_q * case.w_k.transpose();
    case.project(&db)
}

/// Linear-in-η part of [`delta_zp_exact`].
pub fn delta_zp_first_order(case: &TheoryCase) -> DMatrix<f64> {
    let (g_q, g_k) = case.gradients();
    let db = -(g_q * case.w_k.transpose()) * case.eta_q - (&case.w_q * g_k.transpose()) * case.eta_k;
    case.project(&db)
}

/// Norms shared by the bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseNorms {
    pub xp_op: f64,
    pub xp_fro: f64,
    pub e_op: f64,
    pub wq_op: f64,
    pub wk_op: f64,
    /// `‖X W_K W_Kᵀ P‖_F`.
    pub k_channel: f64,
    /// `‖X W_Q W_Qᵀ P‖_F`.
    pub q_channel: f64,
    pub xwk_fro: f64,
    pub xwq_fro: f64,
}

impl CaseNorms {
    pub fn of(case: &TheoryCase) -> Self {
        let xp = case.x_p();
        let wkwk = &case.w_k * case.w_k.transpose();
        let wqwq = &case.w_q * case.w_q.transpose();
        Self {
            xp_op: op_norm(&xp),
            xp_fro: xp.norm(),
            e_op: op_norm(&case.e),
            wq_op: op_norm(&case.w_q),
            wk_op: op_norm(&case.w_k),
            k_channel: (&case.x * wkwk * &case.p).norm(),
            q_channel: (&case.x * wqwq * &case.p).norm(),
            xwk_fro: (&case.x * &case.w_k).norm(),
            xwq_fro: (&case.x * &case.w_q).norm(),
        }
    }

    /// Measured `λ_Q`, `λ_K`; `None` when `X_P` or a weight vanishes.
    pub fn locality(&self) -> (Option<f64>, Option<f64>) {
        let ratio = |num: f64, w: f64| {
            let den = self.xp_fro * w * w;
            (den > 0.0).then(|| num / den)
        };
        (ratio(self.q_channel, self.wq_op), ratio(self.k_channel, self.wk_op))
    }

    /// `(‖E‖_op / d_k)(λ_K ‖W_K‖² + λ_Q ‖W_Q‖²)`.
    pub fn c_t(&self, lambda_q: f64, lambda_k: f64, dk: usize) -> f64 {
        self.e_op / dk as f64 * (lambda_k * self.wk_op.powi(2) + lambda_q * self.wq_op.powi(2))
    }
}

/// `(first-order bound, R₂ bound)`.
pub fn pathwise_bound(case: &TheoryCase) -> (f64, f64) {
    let nm = CaseNorms::of(case);
    bounds_from(&nm, case)
}

fn bounds_from(nm: &CaseNorms, case: &TheoryCase) -> (f64, f64) {
    let dk = case.dk() as f64;
    let first = nm.xp_op.powi(2) * nm.xp_fro * nm.e_op / dk * (case.eta_q * nm.k_channel + case.eta_k * nm.q_channel);
    let r2 = case.eta_q * case.eta_k * nm.xp_op.powi(2) * nm.xp_fro.powi(2) * nm.e_op.powi(2) * nm.xwk_fro * nm.xwq_fro
        / dk.powf(1.5);
    (first, r2)
}

/// First-order part of the localized bound at locality constants `(λ_Q, λ_K)`.
pub fn localized_bound(case: &TheoryCase, lambda_q: f64, lambda_k: f64) -> f64 {
    let nm = CaseNorms::of(case);
    localized_from(&nm, case, lambda_q, lambda_k)
}

fn localized_from(nm: &CaseNorms, case: &TheoryCase, lambda_q: f64, lambda_k: f64) -> f64 {
    nm.xp_op.powi(2) * nm.xp_fro.powi(2) * nm.e_op / case.dk() as f64
        * (case.eta_q * lambda_k * nm.wk_op.powi(2) + case.eta_k * lambda_q * nm.wq_op.powi(2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub n: usize,
    pub d: usize,
    pub dk: usize,
    pub rank: usize,
    pub family: AdjointFamily,
    pub eta_q: f64,
    pub eta_k: f64,
    pub lhs_first_order: f64,
    pub lhs_exact: f64,
    /// `‖exact − first-order‖_F`.
    pub remainder: f64,
    pub bound_first_order: f64,
    pub bound_r2: f64,
    pub lambda_q: Option<f64>,
    pub lambda_k: Option<f64>,
    pub lambda_bar: f64,
    pub c_t_measured: Option<f64>,
    pub c_t_supplied: f64,
    /// Localized first-order bound at `λ̄`, plus `R₂`.
    pub bound_localized: f64,
    pub pass_first_order: bool,
    pub pass_remainder: bool,
    /// Asserted only when both measured ratios are at most `λ̄`.
    pub pass_localized: Option<bool>,
    pub pass: bool,
}

/// Evaluates both sides of the pathwise bound, the remainder bound and the localized form.
pub fn check_theorem1(case: &TheoryCase, lambda_bar: f64) -> Result<TheoryReport> {
    case.validate()?;
    let nm = CaseNorms::of(case);
    let first = delta_zp_first_order(case);
    let exact = delta_zp_exact(case);
    let (bound_first_order, bound_r2) = bounds_from(&nm, case);
    let (lambda_q, lambda_k) = nm.locality();
    let dk = case.dk();
    let c_t_measured = lambda_q.zip(lambda_k).map(|(q, k)| nm.c_t(q, k, dk));
    let bound_localized = localized_from(&nm, case, lambda_bar, lambda_bar) + bound_r2;
    let lhs_first_order = first.norm();
    let lhs_exact = exact.norm();
    let remainder = (&exact - &first).norm();
    let pass_first_order = lhs_first_order <= bound_first_order + BOUND_SLACK;
    let pass_remainder = remainder <= bound_r2 + BOUND_SLACK;
    let applicable = match (lambda_q, lambda_k) {
        (Some(q), Some(k)) => q <= lambda_bar && k <= lambda_bar,
        // X_P = 0 or a zero weight: every side vanishes.
        _ => true,
    };
    let pass_localized = applicable.then(|| lhs_exact <= bound_localized + BOUND_SLACK);
    let pass = pass_first_order && pass_remainder && pass_localized.unwrap_or(true);
    Ok(TheoryReport {
        n: case.n(),
        d: case.d(),
        dk,
        rank: case.p.trace().round() as usize,
        family: case.family,
        eta_q: case.eta_q,
        eta_k: case.eta_k,
        lhs_first_order,
        lhs_exact,
        remainder,
        bound_first_order,
        bound_r2,
        lambda_q,
        lambda_k,
        lambda_bar,
        c_t_measured,
        c_t_supplied: nm.c_t(lambda_bar, lambda_bar, dk),
        bound_localized,
        pass_first_order,
        pass_remainder,
        pass_localized,
        pass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaScaling {
    pub alpha: f64,
    pub eta_base: f64,
    /// `‖F(αη) − α F(η)‖ / ‖α F(η)‖` for the first-order term `F`.
    pub first_order_linearity: f64,
    /// `‖ΔZ_P^{(α)} − α ΔZ_P^{(1)}‖_F` at `eta_base`.
    pub residual: f64,
    /// Same at `eta_base / 2`.
    pub residual_half: f64,
    /// `residual / residual_half`; `None` when both vanish.
    pub halving_ratio: Option<f64>,
    /// `residual / ‖ΔZ_P^{(1)}‖_F`.
    pub relative_residual: f64,
    pub pass: bool,
}

fn alpha_residual(case: &TheoryCase, alpha: f64, eta: f64) -> (f64, f64) {
    let full = delta_zp_exact(&case.with_steps(eta, eta));
    let scaled = delta_zp_exact(&case.with_steps(alpha * eta, alpha * eta));
    ((scaled - &full * alpha).norm(), full.norm())
}

/// Compares the α-scaled step with α times the full step at `η` and `η/2`.
pub fn alpha_scaling_check(case: &TheoryCase, alpha: f64, eta_base: f64) -> Result<AlphaScaling> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(config_err(format!("alpha {alpha} not in (0, 1]")));
    }
    case.validate()?;
    let f1 = delta_zp_first_order(&case.with_steps(eta_base, eta_base));
    let fa = delta_zp_first_order(&case.with_steps(alpha * eta_base, alpha * eta_base));
    let scale = (&f1 * alpha).norm();
    let first_order_linearity = if scale > 0.0 { (&fa - &f1 * alpha).norm() / scale } else { fa.norm() };
    let (residual, full) = alpha_residual(case, alpha, eta_base);
    let (residual_half, _) = alpha_residual(case, alpha, eta_base / 2.0);
    let halving_ratio = (residual_half > 0.0).then(|| residual / residual_half);
    let ratio_ok = match halving_ratio {
        Some(r) => (3.5..=4.5).contains(&r),
        None => residual == 0.0,
    };
    Ok(AlphaScaling {
        alpha,
        eta_base,
        first_order_linearity,
        residual,
        residual_half,
        halving_ratio,
        relative_residual: if full > 0.0 { residual / full } else { 0.0 },
        pass: ratio_ok && first_order_linearity <= 1e-12,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuppressionReport {
    pub rhobar: f64,
    pub lambda_bar: f64,
    pub bound_single: f64,
    pub bound_gate: f64,
    /// `|bound_gate / bound_single − ρ̄²| / ρ̄²`.
    pub scaling_error: f64,
    pub exact_single: f64,
    pub exact_gate: f64,
    pub r2_gate: f64,
    /// `exact_gate ≤ ρ̄²·bound_single + R₂(gate)` when the gated case satisfies locality at `λ̄`.
    pub pass_exact: Option<bool>,
    pub pass: bool,
}

/// Rescales the immature residual amplitude by `√ρ̄` and compares the localized bounds.
pub fn suppression_composition(case: &TheoryCase, rhobar: f64, lambda_bar: f64) -> Result<SuppressionReport> {
    if !(rhobar > 0.0 && rhobar <= 1.0) {
        return Err(config_err(format!("rhobar {rhobar} not in (0, 1]")));
    }
    case.validate()?;
    let gated = case.with_immature_energy_scaled(rhobar);
    let nm_single = CaseNorms::of(case);
    let nm_gate = CaseNorms::of(&gated);
    let bound_single = localized_from(&nm_single, case, lambda_bar, lambda_bar);
    let bound_gate = localized_from(&nm_gate, &gated, lambda_bar, lambda_bar);
    let target = rhobar * rhobar;
    let scaling_error = if bound_single > 0.0 { (bound_gate / bound_single - target).abs() / target } else { bound_gate };
    let (_, r2_gate) = bounds_from(&nm_gate, &gated);
    let exact_gate = delta_zp_exact(&gated).norm();
    let within = |l: Option<f64>| l.map_or(true, |v| v <= lambda_bar);
    let (lq, lk) = nm_gate.locality();
    let pass_exact = (within(lq) && within(lk)).then(|| exact_gate <= target * bound_single + r2_gate + BOUND_SLACK);
    Ok(SuppressionReport {
        rhobar,
        lambda_bar,
        bound_single,
        bound_gate,
        scaling_error,
        exact_single: delta_zp_exact(case).norm(),
        exact_gate,
        r2_gate,
        pass_exact,
        pass: scaling_error <= 1e-10 && pass_exact.unwrap_or(true),
    })
}
