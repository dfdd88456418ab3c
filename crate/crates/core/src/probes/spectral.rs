use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const POWER_TOL: f64 = 1e-8;
const POWER_CAP: usize = 1000;

pub const PROJECTOR_METHOD: &str = "checkpoint_diff_top_right_singular";

/// Top singular value estimate from power iteration on a Gram operator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerResult {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `apply` maps `v ↦ AᵀA v` on `dim`-vectors.
fn power_gram(dim: usize, apply: impl Fn(&[f64]) -> Vec<f64>) -> PowerResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    let mut lambda = 0.0;
    for it in 1..=POWER_CAP {
        let w = apply(&v);
        lambda = v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let wn = norm(&w);
        if wn == 0.0 {
            return PowerResult { value: 0.0, iterations: it, converged: true };
        }
        let resid = w.iter().zip(&v).map(|(a, b)| (a - lambda * b).powi(2)).sum::<f64>().sqrt();
        if resid <= POWER_TOL * lambda.abs() {
            return PowerResult { value: lambda.max(0.0).sqrt(), iterations: it, converged: true };
        }
        v = w.into_iter().map(|x| x / wn).collect();
    }
    PowerResult { value: lambda.max(0.0).sqrt(), iterations: POWER_CAP, converged: false }
}

/// `y = A x` for row-major `A` of shape `rows×cols`.
fn mv(a: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    (0..rows).map(|i| a[i * cols..(i + 1) * cols].iter().zip(x).map(|(p, q)| p * q).sum()).collect()
}

/// `y = Aᵀ x`.
fn mtv(a: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; cols];
    for i in 0..rows {
        for j in 0..cols {
            y[j] += a[i * cols + j] * x[i];
        }
    }
    y
}

/// Largest singular value of a row-major `rows×cols` matrix.
pub fn operator_norm(a: &[f64], rows: usize, cols: usize) -> PowerResult {
    power_gram(cols, |v| mtv(a, rows, cols, &mv(a, rows, cols, v)))
}

/// Largest singular value of `W_Q W_Kᵀ` for `d×dk` factors, without forming the product.
pub fn qk_bilinear_top_sv(w_q: &[f64], w_k: &[f64], d: usize, dk: usize) -> PowerResult {
    // M = Q Kᵀ, MᵀM v = K Qᵀ Q Kᵀ v
    power_gram(d, |v| {
        let t = mtv(w_k, d, dk, v);
        let u = mv(w_q, d, dk, &t);
        let s = mtv(w_q, d, dk, &u);
        mv(w_k, d, dk, &s)
    })
}

/// Orthonormal basis of residual directions that moved between two checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImmatureProjector {
    /// Row-major `d×k`.
    pub basis: Vec<f64>,
    pub d: usize,
    pub k: usize,
    pub method: String,
    pub source_steps: (u64, u64),
    /// Set when the difference had rank below the requested `k`.
    pub requested_k: Option<usize>,
}

impl ImmatureProjector {
    pub fn from_basis(d: usize, k: usize, basis: Vec<f64>, method: impl Into<String>) -> Result<Self> {
        if basis.len() != d * k {
            return Err(Error::Config(format!("basis has {} entries, expected {d}×{k}", basis.len())));
        }
        Ok(Self { basis, d, k, method: method.into(), source_steps: (0, 0), requested_k: None })
    }

    /// Dense `d×d` projector `U Uᵀ`.
    pub fn matrix(&self) -> Vec<f64> {
        let (d, k) = (self.d, self.k);
        let mut p = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                p[i * d + j] = (0..k).map(|c| self.basis[i * k + c] * self.basis[j * k + c]).sum();
            }
        }
        p
    }

    /// `X U` for row-major `X` of shape `rows×d`.
    pub fn coords(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let (d, k) = (self.d, self.k);
        let mut out = vec![0.0; rows * k];
        for r in 0..rows {
            for i in 0..d {
                let xv = x[r * d + i];
                for c in 0..k {
                    out[r * k + c] += xv * self.basis[i * k + c];
                }
            }
        }
        out
    }
}

/// Top-`k` right singular subspace of `D = X_b − X_a` (row-major `rows×d`).
pub fn estimate_projector(x_a: &[f64], x_b: &[f64], rows: usize, d: usize, k: usize, steps: (u64, u64)) -> Result<ImmatureProjector> {
    if x_a.len() != rows * d || x_b.len() != rows * d {
        return Err(Error::Config("capture shapes do not match rows×d".into()));
    }
    if k == 0 {
        return Err(Error::Config("projector rank must be positive".into()));
    }
    let diff = DMatrix::from_fn(rows, d, |r, c| x_b[r * d + c] - x_a[r * d + c]);
    let gram = diff.transpose() * &diff;
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]];
    let rank = if top > 0.0 { order.iter().filter(|&&i| eig.eigenvalues[i] > top * 1e-12 * d as f64).count() } else { 0 };
    if rank == 0 {
        return Err(Error::Numerical("checkpoint difference is zero; no immature directions".into()));
    }
    let kk = k.min(rank);
    let mut basis = vec![0.0; d * kk];
    for (c, &col) in order.iter().take(kk).enumerate() {
        for i in 0..d {
            basis[i * kk + c] = eig.eigenvectors[(i, col)];
        }
    }
    Ok(ImmatureProjector {
        basis,
        d,
        k: kk,
        method: PROJECTOR_METHOD.into(),
        source_steps: steps,
        requested_k: (kk < k).then_some(k),
    })
}

/// Immature-channel locality of the Q and K quadratic forms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Locality {
    pub lambda_q: f64,
    pub lambda_k: f64,
    /// `‖X_P‖_F² / ‖X‖_F²`
    pub rp_fraction: f64,
}

/// `λ_S = ‖X W_S W_Sᵀ P‖_F / (‖X P‖_F ‖W_S‖_op²)`; `None` when `‖X P‖_F = 0`.
pub fn locality_ratios(x: &[f64], rows: usize, w_q: &[f64], w_k: &[f64], dk: usize, proj: &ImmatureProjector) -> Option<Locality> {
    let d = proj.d;
    if proj.k == 0 {
        return None;
    }
    let xp = norm(&proj.coords(x, rows));
    if xp == 0.0 {
        return None;
    }
    let x_norm = norm(x);
    let lam = |w: &[f64]| {
        // X W Wᵀ U: rows×k, and ‖·P‖_F = ‖·U‖_F
        let mut xw = vec![0.0; rows * dk];
        for r in 0..rows {
            for i in 0..d {
                let xv = x[r * d + i];
                for c in 0..dk {
                    xw[r * dk + c] += xv * w[i * dk + c];
                }
            }
        }
        let mut wtu = vec![0.0; dk * proj.k];
        for c in 0..dk {
            for i in 0..d {
                for j in 0..proj.k {
                    wtu[c * proj.k + j] += w[i * dk + c] * proj.basis[i * proj.k + j];
                }
            }
        }
        let mut out = vec![0.0; rows * proj.k];
        for r in 0..rows {
            for c in 0..dk {
                let a = xw[r * dk + c];
                for j in 0..proj.k {
                    out[r * proj.k + j] += a * wtu[c * proj.k + j];
                }
            }
        }
        let op = operator_norm(w, d, dk).value;
        norm(&out) / (xp * op * op)
    };
    Some(Locality { lambda_q: lam(w_q), lambda_k: lam(w_k), rp_fraction: (xp * xp) / (x_norm * x_norm) })
}
