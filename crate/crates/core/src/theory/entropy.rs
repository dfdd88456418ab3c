use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Concentration levels checked for every sampled row.
pub const EPS_GRID: [f64; 8] = [0.5, 0.3, 0.1, 0.05, 0.01, 1e-3, 1e-4, 1e-6];

/// One attention row with its key count and concentration slack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyRangeCase {
    pub n: usize,
    pub eps: f64,
    pub logits: Vec<f64>,
}

/// `log((N − 1)(1 − ε) / ε)`: the smallest logit range compatible with `p_max ≥ 1 − ε`.
pub fn entropy_range_bound(n: usize, eps: f64) -> Result<f64> {
    if n < 2 || !(eps > 0.0 && eps < 1.0) {
        return Err(config_err(format!("need N >= 2 and 0 < eps < 1, got N={n}, eps={eps}")));
    }
    Ok(((n - 1) as f64 * (1.0 - eps) / eps).ln())
}

fn softmax_max(z: &[f64]) -> f64 {
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    1.0 / z.iter().map(|v| (v - mx).exp()).sum::<f64>()
}

fn range(z: &[f64]) -> f64 {
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mn = z.iter().cloned().fold(f64::INFINITY, f64::min);
    mx - mn
}

impl EntropyRangeCase {
    /// `None` when the row is not `ε`-concentrated; otherwise whether the range meets the bound.
    pub fn holds(&self) -> Result<Option<bool>> {
        if self.logits.len() != self.n {
            return Err(config_err("row length differs from N"));
        }
        let bound = entropy_range_bound(self.n, self.eps)?;
        if softmax_max(&self.logits) < 1.0 - self.eps {
            return Ok(None);
        }
        Ok(Some(range(&self.logits) >= bound - 1e-12))
    }
}

/// Logit rows with `N` uniform in `2..=max_n` and log-uniform temperature, so that many rows are peaked.
pub fn sample_logit_rows(count: usize, max_n: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            let n = rng.gen_range(2..=max_n.max(2));
            let scale = 10f64.powf(rng.gen_range(-1.0..=1.5));
            let mut z: Vec<f64> = (0..n).map(|_| scale * normal(rng)).collect();
            if rng.gen_bool(0.5) {
                // Boost one key to reach the strongly concentrated regime.
                let j = rng.gen_range(0..n);
                z[j] += rng.gen_range(0.0..25.0);
            }
            z
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyLemmaReport {
    pub rows: usize,
    /// `(row, ε)` pairs with `p_max ≥ 1 − ε`.
    pub checked: usize,
    pub violations: usize,
    /// Smallest `range − bound` over checked pairs.
    pub min_margin: Option<f64>,
    pub pass: bool,
}

/// Checks every row against every `ε` in [`EPS_GRID`].
pub fn verify_entropy_lemma(rows: &[Vec<f64>]) -> Result<EntropyLemmaReport> {
    let (mut checked, mut violations) = (0, 0);
    let mut min_margin: Option<f64> = None;
    for z in rows {
        let pmax = softmax_max(z);
        let rg = range(z);
        for &eps in &EPS_GRID {
            if pmax < 1.0 - eps {
                continue;
            }
            let margin = rg - entropy_range_bound(z.len(), eps)?;
            checked += 1;
            if margin < -1e-12 {
                violations += 1;
            }
            min_margin = Some(min_margin.map_or(margin, |m| m.min(margin)));
        }
    }
    Ok(EntropyLemmaReport { rows: rows.len(), checked, violations, min_margin, pass: violations == 0 })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn bound_arithmetic() {
        assert_eq!(entropy_range_bound(2, 0.5).unwrap(), 0.0);
        assert!((entropy_range_bound(2, 0.1).unwrap() - 9f64.ln()).abs() < 1e-15);
        assert!(entropy_range_bound(1, 0.1).is_err());
        assert!(entropy_range_bound(4, 1.0).is_err());
    }

    #[test]
    fn equal_off_peak_rows_are_tight() {
        // One logit at c, the rest at 0: p_max = e^c / (e^c + N − 1).
        let (n, c) = (5usize, 3.0f64);
        let mut z = vec![0.0; n];
        z[0] = c;
        let pmax = softmax_max(&z);
        let eps = 1.0 - pmax;
        assert!((entropy_range_bound(n, eps).unwrap() - c).abs() < 1e-12);
    }

    #[test]
    fn brute_force_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows = sample_logit_rows(5000, 64, &mut rng);
        let rep = verify_entropy_lemma(&rows).unwrap();
        assert!(rep.pass);
        assert!(rep.checked > 1000, "{rep:?}");
    }

    #[test]
    fn case_reports_unconcentrated_rows() {
        let case = EntropyRangeCase { n: 3, eps: 0.1, logits: vec![0.0, 0.0, 0.0] };
        assert_eq!(case.holds().unwrap(), None);
        let peaked = EntropyRangeCase { n: 3, eps: 0.1, logits: vec![10.0, 0.0, 0.0] };
        assert_eq!(peaked.holds().unwrap(), Some(true));
    }
}
