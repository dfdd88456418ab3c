use crate::model::ForwardCaptures;
use crate::scalar::Scalar;

/// Lower-half copy routing readout plus the number of positions it averages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CopyScore {
    pub score: f64,
    /// Repeated-token positions per head and layer that entered the mean.
    pub valid: usize,
}

/// Mean attention mass on the nearest previous occurrence of each repeated token.
/// `tokens` is the packed `[batch·seq]` input the captures were taken on.
pub fn lower_copy_score<T: Scalar>(caps: &ForwardCaptures<T>, tokens: &[usize], layers: &[usize]) -> CopyScore {
    let (b, n, h) = (caps.batch, caps.seq, caps.heads);
    let mut targets = Vec::new();
    for s in 0..b {
        let row = &tokens[s * n..(s + 1) * n];
        for i in 1..n {
            if let Some(j) = (0..i).rev().find(|&j| row[j] == row[i]) {
                targets.push((s, i, j));
            }
        }
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for &l in layers {
        let Some(a) = caps.layer(l).and_then(|c| c.attention.as_ref()) else { continue };
        let a = a.data();
        for &(s, i, j) in &targets {
            for head in 0..h {
                total += a[((s * h + head) * n + i) * n + j].f64();
            }
        }
        count += targets.len() * h;
    }
    if count == 0 {
        return CopyScore { score: 0.0, valid: 0 };
    }
    CopyScore { score: total / count as f64, valid: targets.len() }
}

/// Normalized entropy of each causal row `i ≥ 1` of a `[groups, n, n]` tensor.
pub fn attention_entropy_rows<T: Scalar>(p: &[T], n: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for g in p.chunks(n * n) {
        for i in 1..n {
            let h: f64 = g[i * n..i * n + i + 1]
                .iter()
                .map(|v| v.f64())
                .filter(|&v| v > 0.0)
                .map(|v| -v * v.ln())
                .sum();
            out.push(h / ((i + 1) as f64).ln());
        }
    }
    out
}

/// Mean normalized attention entropy over rows, heads and the given layers.
pub fn attention_entropy<T: Scalar>(caps: &ForwardCaptures<T>, layers: &[usize]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for &l in layers {
        if let Some(a) = caps.layer(l).and_then(|c| c.attention.as_ref()) {
            let rows = attention_entropy_rows(a.data(), caps.seq);
            count += rows.len();
            sum += rows.iter().sum::<f64>();
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// RMS of pre-softmax logits over causal entries, heads and layers.
pub fn logit_rms<T: Scalar>(caps: &ForwardCaptures<T>, layers: &[usize]) -> f64 {
    let n = caps.seq;
    let mut sq = 0.0;
    let mut count = 0usize;
    for &l in layers {
        if let Some(z) = caps.layer(l).and_then(|c| c.logits.as_ref()) {
            for g in z.data().chunks(n * n) {
                for i in 0..n {
                    sq += g[i * n..i * n + i + 1].iter().map(|v| v.f64() * v.f64()).sum::<f64>();
                    count += i + 1;
                }
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        (sq / count as f64).sqrt()
    }
}

pub fn logit_ratio(upper_rms: f64, lower_rms: f64) -> Option<f64> {
    (lower_rms > 0.0).then(|| upper_rms / lower_rms)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::LayerCapture;
    use crate::tensor::Tensor;

    fn caps(batch: usize, seq: usize, heads: usize, attn: Vec<Tensor<f64>>, logits: Vec<Tensor<f64>>) -> ForwardCaptures<f64> {
        let layers = attn
            .into_iter()
            .zip(logits)
            .map(|(a, z)| Some(LayerCapture { attention: Some(a), logits: Some(z), input: None, ffn_input: None, ffn_write: None }))
            .collect();
        ForwardCaptures { batch, seq, heads, layers, output_logits: Tensor::zeros([1]) }
    }

    fn random_causal(groups: usize, n: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let mut d = vec![0.0; groups * n * n];
        for g in 0..groups {
            for i in 0..n {
                let row: Vec<f64> = (0..=i).map(|_| rng.gen_range(0.01..1.0)).collect();
                let s: f64 = row.iter().sum();
                for j in 0..=i {
                    d[(g * n + i) * n + j] = row[j] / s;
                }
            }
        }
        Tensor::new([groups, n, n], d).unwrap()
    }

    fn uniform(groups: usize, n: usize) -> Tensor<f64> {
        Tensor::from_fn([groups, n, n], |idx| {
            let (i, j) = ((idx / n) % n, idx % n);
            if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 }
        })
    }

    #[test]
    fn distinct_tokens_give_no_valid_positions() {
        let c = caps(1, 5, 2, vec![uniform(2, 5)], vec![Tensor::zeros([2, 5, 5])]);
        assert_eq!(lower_copy_score(&c, &[0, 1, 2, 3, 4], &[0]), CopyScore { score: 0.0, valid: 0 });
    }

    #[test]
    fn full_mass_on_nearest_duplicate_scores_one() {
        let toks = [3, 1, 3, 1, 3, 7];
        let n = 6;
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            let j = (0..i).rev().find(|&j| toks[j] == toks[i]).unwrap_or(i);
            a[i * n + j] = 1.0;
        }
        let c = caps(1, n, 1, vec![Tensor::new([1, n, n], a).unwrap()], vec![Tensor::zeros([1, n, n])]);
        let s = lower_copy_score(&c, &toks, &[0]);
        assert_eq!(s.score, 1.0);
        assert_eq!(s.valid, 3);
    }

    #[test]
    fn copy_score_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let (b, n, h) = (2, 9, 3);
            let toks: Vec<usize> = (0..b * n).map(|_| rng.gen_range(0..4)).collect();
            let attn: Vec<_> = (0..2).map(|_| random_causal(b * h, n, &mut rng)).collect();
            let c = caps(b, n, h, attn.clone(), vec![Tensor::zeros([b * h, n, n]); 2]);
            let got = lower_copy_score(&c, &toks, &[0, 1]);
            let (mut tot, mut cnt) = (0.0, 0);
            for a in &attn {
                for s in 0..b {
                    for head in 0..h {
                        for i in 0..n {
                            let mut j = i;
                            while j > 0 {
                                j -= 1;
                                if toks[s * n + j] == toks[s * n + i] {
                                    tot += a.data()[(s * h + head) * n * n + i * n + j];
                                    cnt += 1;
                                    break;
                                }
                            }
                        }
                    }
                }
            }
            assert!((got.score - tot / cnt as f64).abs() < 1e-9);
            assert!((0.0..=1.0).contains(&got.score));
        }
    }

    #[test]
    fn entropy_extremes() {
        let c = caps(1, 6, 2, vec![uniform(2, 6)], vec![Tensor::zeros([2, 6, 6])]);
        assert_eq!(attention_entropy(&c, &[0]), 1.0);
        let onehot = Tensor::from_fn([2, 6, 6], |idx| if idx % 6 == 0 { 1.0 } else { 0.0 });
        let c = caps(1, 6, 2, vec![onehot], vec![Tensor::zeros([2, 6, 6])]);
        assert_eq!(attention_entropy(&c, &[0]), 0.0);
    }

    #[test]
    fn entropy_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (g, n) = (4, 7);
        let a = random_causal(g, n, &mut rng);
        let c = caps(2, n, 2, vec![a.clone()], vec![Tensor::zeros([g, n, n])]);
        let mut tot = 0.0;
        for gi in 0..g {
            for i in 1..n {
                let mut h = 0.0;
                for j in 0..=i {
                    let p = a.data()[gi * n * n + i * n + j];
                    h -= p * p.ln();
                }
                tot += h / ((i + 1) as f64).ln();
            }
        }
        let got = attention_entropy(&c, &[0]);
        assert!((got - tot / (g * (n - 1)) as f64).abs() < 1e-9);
        assert!(got > 0.0 && got < 1.0);
    }

    #[test]
    fn logit_rms_cases() {
        let n = 5;
        let c = caps(1, n, 1, vec![uniform(1, n)], vec![Tensor::zeros([1, n, n])]);
        assert_eq!(logit_rms(&c, &[0]), 0.0);
        assert_eq!(logit_ratio(1.0, 0.0), None);
        // masked entries hold junk that must be ignored
        let z = Tensor::from_fn([1, n, n], |idx| if idx % n <= idx / n { -2.5 } else { 99.0 });
        let c = caps(1, n, 1, vec![uniform(1, n)], vec![z]);
        assert!((logit_rms(&c, &[0]) - 2.5).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Tensor::from_fn([3, n, n], |_| rng.gen_range(-3.0..3.0));
        let c = caps(1, n, 3, vec![uniform(3, n)], vec![z.clone()]);
        let (mut s, mut k) = (0.0, 0.0);
        for g in 0..3 {
            for i in 0..n {
                for j in 0..=i {
                    s += z.data()[g * n * n + i * n + j].powi(2);
                    k += 1.0;
                }
            }
        }
        assert!((logit_rms(&c, &[0]) - (s / k).sqrt()).abs() < 1e-9);
    }
}
