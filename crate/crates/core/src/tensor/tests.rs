use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_inputs, finite_diff_check};
use super::*;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn identity_and_zero_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let b = randn(&[3, 3], &mut rng);
    let eye = Tensor::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    let mut t = Tape::new();
    let (e, bv) = (t.constant(eye).unwrap(), t.constant(b.clone()).unwrap());
    let c = t.matmul(e, bv).unwrap();
    assert_eq!(t.value(c).data(), b.data());
    let z = t.constant(Tensor::zeros([3, 2])).unwrap();
    let c = t.matmul(bv, z).unwrap();
    assert!(t.value(c).data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_shape_mismatch_is_a_config_error() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Tensor::zeros([2, 3])).unwrap();
    let b = t.constant(Tensor::zeros([2, 3])).unwrap();
    assert!(matches!(t.matmul(a, b), Err(crate::Error::Config(_))));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let a = randn(&[4, 5], &mut rng);
        let b = randn(&[5, 3], &mut rng);
        let w = randn(&[4, 3], &mut rng);
        let errs = check_inputs(
            |t: &mut Tape<f64>, v: &[Var]| {
                let c = t.matmul(v[0], v[1])?;
                let c = t.mul(c, v[2])?;
                t.sum(c)
            },
            &[a, b, w],
            1e-5,
        )
        .unwrap();
        assert!(errs.iter().all(|&e| e < 1e-6), "{errs:?}");
    }
}

#[test]
fn causal_softmax_uniform_and_stable() {
    let mut t = Tape::<f64>::new();
    let z = t.constant(Tensor::zeros([1, 4, 4])).unwrap();
    let p = t.causal_softmax(z).unwrap();
    let pv = t.value(p).data().to_vec();
    for i in 0..4 {
        for j in 0..4 {
            let want = if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 };
            assert!((pv[i * 4 + j] - want).abs() < 1e-15);
        }
    }
    let z = t.constant(Tensor::new([1, 2, 2], vec![0.0, 0.0, 1e6, 0.0]).unwrap()).unwrap();
    let p = t.causal_softmax(z).unwrap();
    let pv = t.value(p).data();
    assert!((pv[2] - 1.0).abs() < 1e-12 && pv[3] < 1e-12);
}

#[test]
fn causal_softmax_jacobian_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let z = randn(&[2, 4, 4], &mut rng);
        let w = randn(&[2, 4, 4], &mut rng);
        let errs = check_inputs(
            |t: &mut Tape<f64>, v: &[Var]| {
                let p = t.causal_softmax(v[0])?;
                let p = t.mul(p, v[1])?;
                t.sum(p)
            },
            &[z, w],
            1e-5,
        )
        .unwrap();
        assert!(errs[0] < 1e-6, "{errs:?}");
    }
}

#[test]
fn masked_entries_get_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z = randn(&[1, 3, 3], &mut rng);
    let mut t = Tape::new();
    let zv = t.leaf(z, true).unwrap();
    let p = t.causal_softmax(zv).unwrap();
    let w = t.constant(randn(&[1, 3, 3], &mut rng)).unwrap();
    let s = t.mul(p, w).unwrap();
    let s = t.sum(s).unwrap();
    let g = t.backward(s).unwrap();
    let g = g.get(zv).unwrap();
    for i in 0..3 {
        for j in i + 1..3 {
            assert_eq!(g[i * 3 + j], 0.0);
        }
    }
}

#[test]
fn normalization_identities() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::from_fn([1, 4], |_| 2.5)).unwrap();
    let g = t.constant(Tensor::from_fn([4], |_| 1.0)).unwrap();
    let b = t.constant(Tensor::zeros([4])).unwrap();
    let y = t.normalize(x, NormKind::LayerNorm, g, Some(b), 1e-5).unwrap();
    assert!(t.value(y).data().iter().all(|v| v.abs() < 1e-12));
    let unit = t.constant(Tensor::new([1, 4], vec![1.0, -1.0, 1.0, -1.0]).unwrap()).unwrap();
    let y = t.normalize(unit, NormKind::RmsNorm, g, None, 0.0 + 1e-300).unwrap();
    assert_eq!(t.value(y).data(), &[1.0, -1.0, 1.0, -1.0]);
}

#[test]
fn normalization_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for kind in [NormKind::LayerNorm, NormKind::RmsNorm] {
        for _ in 0..10 {
            let x = randn(&[3, 6], &mut rng);
            let g = randn(&[6], &mut rng);
            let b = randn(&[6], &mut rng);
            let w = randn(&[3, 6], &mut rng);
            let errs = check_inputs(
                |t: &mut Tape<f64>, v: &[Var]| {
                    let bias = (kind == NormKind::LayerNorm).then_some(v[2]);
                    let y = t.normalize(v[0], kind, v[1], bias, 1e-5)?;
                    let y = t.mul(y, v[3])?;
                    t.sum(y)
                },
                &[x, g, b, w],
                1e-5,
            )
            .unwrap();
            assert!(errs[0] < 1e-5 && errs[1] < 1e-5, "{kind:?} {errs:?}");
            if kind == NormKind::LayerNorm {
                assert!(errs[2] < 1e-5);
            }
        }
    }
}

#[test]
fn activation_values() {
    assert_eq!(gelu_scalar(0.0f64), 0.0);
    assert_eq!(silu_scalar(0.0f64), 0.0);
    assert!((gelu_scalar(10.0f64) - 10.0).abs() < 1e-6);
}

#[test]
fn activation_gradients_match_finite_differences() {
    let x = Tensor::new([4], vec![-2.0, -0.5, 0.3, 4.0]).unwrap();
    let e = finite_diff_check(|t: &mut Tape<f64>, v| { let y = t.gelu(v)?; t.sum(y) }, &x, 1e-5).unwrap();
    assert!(e < 1e-6, "gelu {e}");
    let e = finite_diff_check(|t: &mut Tape<f64>, v| { let y = t.silu(v)?; t.sum(y) }, &x, 1e-5).unwrap();
    assert!(e < 1e-6, "silu {e}");
}

#[test]
fn rope_position_zero_is_identity_and_norm_is_preserved() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = randn(&[3, 7, 8], &mut rng);
    let mut t = Tape::new();
    let xv = t.constant(x.clone()).unwrap();
    let y = t.rope(xv, 10_000.0).unwrap();
    let y = t.value(y).data();
    for g in 0..3 {
        let base = g * 7 * 8;
        assert_eq!(&y[base..base + 8], &x.data()[base..base + 8]);
        for pos in 0..7 {
            let o = base + pos * 8;
            let n0: f64 = x.data()[o..o + 8].iter().map(|v| v * v).sum();
            let n1: f64 = y[o..o + 8].iter().map(|v| v * v).sum();
            assert!((n0.sqrt() - n1.sqrt()).abs() < 1e-6);
        }
    }
}

#[test]
fn rope_matches_complex_rotation_oracle() {
    let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.77).sin()).collect();
    let x = Tensor::new([1, 4, 4], x).unwrap();
    let mut t = Tape::new();
    let xv = t.constant(x.clone()).unwrap();
    let y = t.rope(xv, 10_000.0).unwrap();
    let y = t.value(y).data();
    let pos = 3.0f64;
    for j in 0..2 {
        let theta = pos * 10_000f64.powf(-((2 * j) as f64) / 4.0);
        // (a + ib) · e^{iθ}
        let (a, b) = (x.data()[12 + 2 * j], x.data()[12 + 2 * j + 1]);
        let (re, im) = (a * theta.cos() - b * theta.sin(), a * theta.sin() + b * theta.cos());
        assert!((y[12 + 2 * j] - re).abs() < 1e-6);
        assert!((y[12 + 2 * j + 1] - im).abs() < 1e-6);
    }
    let mut t = Tape::<f64>::new();
    let odd = t.constant(Tensor::zeros([1, 2, 3])).unwrap();
    assert!(matches!(t.rope(odd, 10_000.0), Err(crate::Error::Config(_))));
}

#[test]
fn rope_and_attention_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..10 {
        let q = randn(&[2, 4, 4], &mut rng);
        let k = randn(&[2, 4, 4], &mut rng);
        let v = randn(&[2, 4, 4], &mut rng);
        let w = randn(&[2, 4, 4], &mut rng);
        let errs = check_inputs(
            |t: &mut Tape<f64>, x: &[Var]| {
                let q = t.rope(x[0], 100.0)?;
                let k = t.rope(x[1], 100.0)?;
                let z = t.attention_scores(q, k, 0.5)?;
                let p = t.causal_softmax(z)?;
                let o = t.attention_apply(p, x[2])?;
                let o = t.mul(o, x[3])?;
                t.sum(o)
            },
            &[q, k, v, w],
            1e-5,
        )
        .unwrap();
        assert!(errs[..3].iter().all(|&e| e < 1e-6), "{errs:?}");
    }
}

#[test]
fn head_split_merge_and_embedding_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = randn(&[6, 4], &mut rng);
    let w = randn(&[4, 3, 2], &mut rng);
    let errs = check_inputs(
        |t: &mut Tape<f64>, v: &[Var]| {
            let s = t.split_heads(v[0], 2, 2)?;
            let s = t.mul(s, v[1])?;
            let m = t.merge_heads(s, 2)?;
            let m = t.mul(m, m)?;
            t.sum(m)
        },
        &[x, w],
        1e-5,
    )
    .unwrap();
    assert!(errs[0] < 1e-6, "{errs:?}");
    let table = randn(&[5, 3], &mut rng);
    let e = finite_diff_check(
        |t: &mut Tape<f64>, v| {
            let e = t.embedding(v, &[4, 1, 4, 0])?;
            let e = t.mul(e, e)?;
            t.sum(e)
        },
        &table,
        1e-5,
    )
    .unwrap();
    assert!(e < 1e-6);
}

#[test]
fn cross_entropy_values() {
    let mut t = Tape::<f64>::new();
    let l = t.constant(Tensor::zeros([1, 7])).unwrap();
    let loss = t.cross_entropy(l, &[3]).unwrap();
    assert!((t.value(loss).item() - 7f64.ln()).abs() < 1e-15);
    let mut z = vec![0.0; 5];
    z[2] = 30.0;
    let l = t.constant(Tensor::new([1, 5], z).unwrap()).unwrap();
    let loss = t.cross_entropy(l, &[2]).unwrap();
    assert!(t.value(loss).item() < 1e-9);
    let l = t.constant(Tensor::zeros([1, 5])).unwrap();
    assert!(matches!(t.cross_entropy(l, &[5]), Err(crate::Error::Data(_))));
}

#[test]
fn cross_entropy_matches_log_sum_exp_oracle_and_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let logits = randn(&[3, 7], &mut rng);
    let targets = [6usize, 0, 3];
    let mut t = Tape::new();
    let lv = t.constant(logits.clone()).unwrap();
    let loss = t.cross_entropy(lv, &targets).unwrap();
    let want: f64 = logits
        .data()
        .chunks(7)
        .zip(targets)
        .map(|(row, tg)| row.iter().map(|v| v.exp()).sum::<f64>().ln() - row[tg])
        .sum::<f64>()
        / 3.0;
    assert!((t.value(loss).item() - want).abs() < 1e-9);
    let e = finite_diff_check(|t: &mut Tape<f64>, v| t.cross_entropy(v, &targets), &logits, 1e-5).unwrap();
    assert!(e < 1e-6);
}

#[test]
fn backward_basics() {
    let x = Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap();
    let mut t = Tape::new();
    let xv = t.leaf(x.clone(), true).unwrap();
    let s = t.sum(xv).unwrap();
    assert_eq!(t.backward(s).unwrap().get(xv).unwrap(), &[1.0, 1.0, 1.0]);
    let sq = t.mul(xv, xv).unwrap();
    let s2 = t.sum(sq).unwrap();
    assert_eq!(t.backward(s2).unwrap().get(xv).unwrap(), &[2.0, -4.0, 1.0]);
    // foreign variable
    let mut other = Tape::<f64>::new();
    let y = other.leaf(x, true).unwrap();
    let s3 = other.sum(y).unwrap();
    assert!(matches!(t.backward(s3), Err(crate::Error::Usage(_))));
}

#[test]
fn non_finite_forward_aborts() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::new([2], vec![1e308, 1e308]).unwrap()).unwrap();
    let y = t.add(x, x);
    assert!(matches!(y, Err(crate::Error::NonFinite { .. })));
}

#[test]
fn entropy_mean_gradient_and_extremes() {
    let mut t = Tape::<f64>::new();
    let z = t.constant(Tensor::zeros([2, 5, 5])).unwrap();
    let p = t.causal_softmax(z).unwrap();
    let h = t.normalized_entropy_mean(p).unwrap();
    assert!((t.value(h).item() - 1.0).abs() < 1e-15);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let zz = randn(&[2, 5, 5], &mut rng);
    let e = finite_diff_check(
        |t: &mut Tape<f64>, v| {
            let p = t.causal_softmax(v)?;
            t.normalized_entropy_mean(p)
        },
        &zz,
        1e-5,
    )
    .unwrap();
    assert!(e < 1e-6, "{e}");
}

#[test]
fn finite_difference_oracle_sanity() {
    let x = Tensor::new([3], vec![0.3, -1.2, 2.0]).unwrap();
    let lin = finite_diff_check(|t: &mut Tape<f64>, v| { let y = t.scale(v, 3.0)?; t.sum(y) }, &x, 1e-4).unwrap();
    assert!(lin < 1e-10, "{lin}");
    let quad = finite_diff_check(|t: &mut Tape<f64>, v| { let y = t.mul(v, v)?; t.sum(y) }, &x, 1e-4).unwrap();
    assert!(quad < 1e-6, "{quad}");
}

#[test]
fn single_precision_ops_pass_loose_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a: Tensor<f32> = randn(&[3, 4], &mut rng).cast();
    let b: Tensor<f32> = randn(&[4, 2], &mut rng).cast();
    let errs = check_inputs(
        |t: &mut Tape<f32>, v: &[Var]| {
            let c = t.matmul(v[0], v[1])?;
            let c = t.gelu(c)?;
            t.sum(c)
        },
        &[a, b],
        1e-2,
    )
    .unwrap();
    assert!(errs.iter().all(|&e| e < 1e-3), "{errs:?}");
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 36)) {
        let mut t = Tape::<f64>::new();
        let z = t.constant(Tensor::new([1, 6, 6], vals).unwrap()).unwrap();
        let p = t.causal_softmax(z).unwrap();
        for (i, row) in t.value(p).data().chunks(6).enumerate() {
            let s: f64 = row[..=i].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(row[i + 1..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rope_is_an_isometry(vals in proptest::collection::vec(-5.0f64..5.0, 40), base in 2.0f64..1e5) {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new([1, 5, 8], vals.clone()).unwrap()).unwrap();
        let y = t.rope(x, base).unwrap();
        for (a, b) in vals.chunks(8).zip(t.value(y).data().chunks(8)) {
            let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((na - nb).abs() < 1e-6);
        }
    }
}
