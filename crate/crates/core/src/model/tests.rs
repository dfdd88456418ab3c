use super::*;
use crate::tensor::gradcheck::check_inputs;
use crate::tensor::NormKind;

pub(crate) fn tiny(norm: NormKind, bias: bool, ffn: FfnKind) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        width: 8,
        n_heads: 2,
        seq_len: 6,
        vocab: 17,
        norm_kind: norm,
        use_bias: bias,
        ffn_kind: ffn,
        ffn_width: 12,
        tie_embeddings: true,
        use_rope: true,
        rope_base: 10_000.0,
        init_std: 0.3,
        norm_eps: 1e-5,
    }
}

pub(crate) fn randomize_biases(model: &mut DecoderModel<f64>) {
    for (i, p) in model.params.iter_mut().enumerate() {
        if p.value.shape().len() == 1 {
            for (j, v) in p.value.data_mut().iter_mut().enumerate() {
                *v += 0.1 * ((i * 31 + j * 7) as f64).sin();
            }
        }
    }
}

#[test]
fn build_is_deterministic_in_seed() {
    let cfg = tiny(NormKind::LayerNorm, true, FfnKind::SingleGelu);
    let a = DecoderModel::<f32>::build(&cfg, 7).unwrap();
    let b = DecoderModel::<f32>::build(&cfg, 7).unwrap();
    let c = DecoderModel::<f32>::build(&cfg, 8).unwrap();
    for (pa, pb) in a.params.iter().zip(&b.params) {
        assert_eq!(pa.value.data(), pb.value.data());
    }
    assert_ne!(a.param(a.tok_emb).data(), c.param(c.tok_emb).data());
}

#[test]
fn upper_group_is_exactly_upper_half_query_and_key() {
    let mut cfg = tiny(NormKind::LayerNorm, true, FfnKind::SingleGelu);
    cfg.n_layers = 4;
    let m = DecoderModel::<f32>::build(&cfg, 0).unwrap();
    let names: Vec<&str> = m.group_members(ParamGroup::UpperQk).iter().map(|&i| m.params[i].name.as_str()).collect();
    assert_eq!(names, ["layers.002.attn.w_q", "layers.002.attn.w_k", "layers.003.attn.w_q", "layers.003.attn.w_k"]);
    cfg.n_layers = 5;
    assert_eq!(cfg.upper_start(), 3);
}

#[test]
fn every_parameter_is_in_one_group() {
    let m = DecoderModel::<f32>::build(&tiny(NormKind::RmsNorm, false, FfnKind::Swiglu), 0).unwrap();
    let total: usize = ParamGroup::ALL.iter().map(|&g| m.group_members(g).len()).sum();
    assert_eq!(total, m.params.len());
}

#[test]
fn matched_gate_has_equal_ffn_weight_count() {
    let mut single = ModelConfig::gpt(2, 128, 4, 16, 32);
    single.ffn_width = 384;
    let gated = single.with_matched_gate(FfnKind::Swiglu).unwrap();
    assert_eq!(gated.ffn_width, 256);
    assert_eq!(single.ffn_weight_params(), 98_304);
    assert_eq!(gated.ffn_weight_params(), 98_304);
    let a = DecoderModel::<f32>::build(&single, 0).unwrap();
    let b = DecoderModel::<f32>::build(&gated, 0).unwrap();
    assert_eq!(a.ffn_weight_count(0), b.ffn_weight_count(0));
}

#[test]
fn invalid_configs_name_the_violation() {
    let mut cfg = tiny(NormKind::LayerNorm, true, FfnKind::SingleGelu);
    cfg.n_heads = 3;
    let err = DecoderModel::<f32>::build(&cfg, 0).unwrap_err().to_string();
    assert!(err.contains("divisible"), "{err}");
    cfg.n_heads = 4; // head_dim 2 is fine
    assert!(cfg.validate().is_ok());
    cfg.width = 12;
    cfg.n_heads = 4; // head_dim 3, odd
    assert!(cfg.validate().unwrap_err().to_string().contains("even"));
}

fn rand_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Tensor::from_fn(shape.to_vec(), |_| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        scale * (((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0)
    })
}

#[test]
fn attention_logits_zero_input_gives_zero() {
    let x = Tensor::<f64>::zeros([3, 4]);
    let w = rand_tensor(&[4, 4], 1, 1.0);
    let z = attention_logits(&x, &w, &w, 2, Some(10_000.0)).unwrap();
    assert!(z.data().iter().all(|&v| v == 0.0));
}

#[test]
fn attention_logits_without_rope_is_the_bilinear_form() {
    let x = Tensor::new([2, 2], vec![1.0, 2.0, -0.5, 0.25]).unwrap();
    let wq = Tensor::new([2, 2], vec![0.3, -1.0, 0.7, 0.2]).unwrap();
    let wk = Tensor::new([2, 2], vec![-0.4, 0.9, 1.1, 0.5]).unwrap();
    let z = attention_logits(&x, &wq, &wk, 1, None).unwrap();
    // oracle: (X Wq)(X Wk)^T / sqrt(2) via explicit products
    let mm = |a: &[f64], b: &[f64]| -> [f64; 4] {
        [a[0] * b[0] + a[1] * b[2], a[0] * b[1] + a[1] * b[3], a[2] * b[0] + a[3] * b[2], a[2] * b[1] + a[3] * b[3]]
    };
    let q = mm(x.data(), wq.data());
    let k = mm(x.data(), wk.data());
    let kt = [k[0], k[2], k[1], k[3]];
    let want = mm(&q, &kt).map(|v| v / 2f64.sqrt());
    for (a, b) in z.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn attention_logits_are_quadratic_in_input_and_linear_in_weights() {
    let x = rand_tensor(&[5, 6], 2, 1.0);
    let wq = rand_tensor(&[6, 6], 3, 1.0);
    let wk = rand_tensor(&[6, 6], 4, 1.0);
    let z = attention_logits(&x, &wq, &wk, 3, None).unwrap();
    let x3 = Tensor::new([5, 6], x.data().iter().map(|v| 3.0 * v).collect()).unwrap();
    let z3 = attention_logits(&x3, &wq, &wk, 3, None).unwrap();
    for (a, b) in z.data().iter().zip(z3.data()) {
        assert!((9.0 * a - b).abs() < 1e-12 * (1.0 + b.abs()));
    }
    let wq2 = Tensor::new([6, 6], wq.data().iter().map(|v| -2.0 * v).collect()).unwrap();
    let zq = attention_logits(&x, &wq2, &wk, 3, None).unwrap();
    for (a, b) in z.data().iter().zip(zq.data()) {
        assert!((-2.0 * a - b).abs() < 1e-12 * (1.0 + b.abs()));
    }
}

#[test]
fn gated_write_vanishes_when_gate_weights_are_zero() {
    let x = rand_tensor(&[4, 6], 5, 2.0);
    let up = rand_tensor(&[6, 9], 6, 1.0);
    let out = rand_tensor(&[9, 6], 7, 1.0);
    for kind in [FfnKind::Swiglu, FfnKind::Geglu] {
        let w = ffn_forward(&x, kind, &[Tensor::zeros([6, 9]), up.clone(), out.clone()]).unwrap();
        assert!(w.data().iter().all(|&v| v == 0.0));
    }
    let w = ffn_forward(&x, FfnKind::SingleGelu, &[up.clone(), Tensor::zeros([9, 6])]).unwrap();
    assert!(w.data().iter().all(|&v| v == 0.0));
    let w = ffn_forward(&x, FfnKind::Swiglu, &[up.clone(), up.clone(), Tensor::zeros([9, 6])]).unwrap();
    assert!(w.data().iter().all(|&v| v == 0.0));
}

fn gelu_ref(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()))
}

#[test]
fn single_branch_write_matches_two_matmul_oracle() {
    let x = rand_tensor(&[3, 4], 8, 1.5);
    let wi = rand_tensor(&[4, 5], 9, 1.0);
    let wo = rand_tensor(&[5, 4], 10, 1.0);
    let got = ffn_forward(&x, FfnKind::SingleGelu, &[wi.clone(), wo.clone()]).unwrap();
    for r in 0..3 {
        let h: Vec<f64> = (0..5).map(|j| gelu_ref((0..4).map(|c| x.data()[r * 4 + c] * wi.data()[c * 5 + j]).sum())).collect();
        for o in 0..4 {
            let want: f64 = (0..5).map(|j| h[j] * wo.data()[j * 4 + o]).sum();
            assert!((got.data()[r * 4 + o] - want).abs() < 1e-9);
        }
    }
}

#[test]
fn zero_blocks_pass_embeddings_through_the_residual() {
    let cfg = tiny(NormKind::LayerNorm, true, FfnKind::SingleGelu);
    let mut m = DecoderModel::<f64>::build(&cfg, 3).unwrap();
    for p in m.params.iter_mut() {
        if p.name.starts_with("layers.") && !p.name.contains("norm") {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let tokens = [1usize, 5, 9, 2];
    let caps = m.view().run(&tokens, 1, &CaptureRequest::none()).unwrap();
    let d = cfg.width;
    let emb = m.param(m.tok_emb).data();
    for (r, &t) in tokens.iter().enumerate() {
        let row = &emb[t * d..(t + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let hn: Vec<f64> = row.iter().map(|v| (v - mean) / (var + cfg.norm_eps).sqrt()).collect();
        for vtok in 0..cfg.vocab {
            let want: f64 = (0..d).map(|c| hn[c] * emb[vtok * d + c]).sum();
            let got = caps.output_logits.data()[r * cfg.vocab + vtok];
            assert!((got - want).abs() < 1e-12);
        }
    }
}

#[test]
fn captured_attention_rows_sum_to_one() {
    let cfg = tiny(NormKind::RmsNorm, false, FfnKind::Geglu);
    let m = DecoderModel::<f32>::build(&cfg, 1).unwrap();
    let tokens: Vec<usize> = (0..12).map(|i| (i * 5) % 17).collect();
    let caps = m.view().run(&tokens, 2, &CaptureRequest::all()).unwrap();
    for l in 0..cfg.n_layers {
        let a = caps.layer(l).unwrap().attention.as_ref().unwrap();
        for (ri, row) in a.data().chunks(6).enumerate() {
            let i = ri % 6;
            let s: f32 = row[..=i].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row[i + 1..].iter().all(|&v| v == 0.0));
        }
    }
}

/// Fully unrolled one-head forward used as an independent oracle. With
/// `ablate_upper`, upper-half scores are zero as if Q and K were zeroed.
pub(crate) fn unrolled_logits(m: &DecoderModel<f64>, tokens: &[usize], ablate_upper: bool) -> Vec<f64> {
    let c = &m.config;
    assert_eq!(c.n_heads, 1);
    let (d, n, v) = (c.width, tokens.len(), c.vocab);
    let p = |name: &str| m.param(m.find(name).unwrap()).data().to_vec();
    let ln = |x: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
        let mean = x.iter().sum::<f64>() / d as f64;
        let var = x.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / d as f64;
        (0..d).map(|j| (x[j] - mean) / (var + c.norm_eps).sqrt() * g[j] + b[j]).collect()
    };
    let lin = |x: &[f64], w: &[f64], b: &[f64], out: usize| -> Vec<f64> {
        (0..out).map(|o| (0..x.len()).map(|i| x[i] * w[i * out + o]).sum::<f64>() + b[o]).collect()
    };
    let rot = |u: &[f64], pos: usize| -> Vec<f64> {
        let mut o = u.to_vec();
        for j in 0..d / 2 {
            let th = pos as f64 * c.rope_base.powf(-2.0 * j as f64 / d as f64);
            o[2 * j] = u[2 * j] * th.cos() - u[2 * j + 1] * th.sin();
            o[2 * j + 1] = u[2 * j] * th.sin() + u[2 * j + 1] * th.cos();
        }
        o
    };
    let emb = p("tok_emb");
    let mut h: Vec<Vec<f64>> = tokens.iter().map(|&t| emb[t * d..(t + 1) * d].to_vec()).collect();
    for l in 0..c.n_layers {
        let nm = |s: &str| format!("layers.{l:03}.{s}");
        let x: Vec<Vec<f64>> = h.iter().map(|r| ln(r, &p(&nm("norm1.gain")), &p(&nm("norm1.bias")))).collect();
        let q: Vec<Vec<f64>> = (0..n).map(|i| rot(&lin(&x[i], &p(&nm("attn.w_q")), &p(&nm("attn.b_q")), d), i)).collect();
        let k: Vec<Vec<f64>> = (0..n).map(|i| rot(&lin(&x[i], &p(&nm("attn.w_k")), &p(&nm("attn.b_k")), d), i)).collect();
        let val: Vec<Vec<f64>> = (0..n).map(|i| lin(&x[i], &p(&nm("attn.w_v")), &p(&nm("attn.b_v")), d)).collect();
        let zeroed = ablate_upper && c.is_upper(l);
        let mut adds = Vec::new();
        for i in 0..n {
            let s: Vec<f64> = (0..=i)
                .map(|j| if zeroed { 0.0 } else { (0..d).map(|e| q[i][e] * k[j][e]).sum::<f64>() / (d as f64).sqrt() })
                .collect();
            let mx = s.iter().cloned().fold(f64::MIN, f64::max);
            let w: Vec<f64> = s.iter().map(|e| (e - mx).exp()).collect();
            let tot: f64 = w.iter().sum();
            let o: Vec<f64> = (0..d).map(|e| (0..=i).map(|j| w[j] / tot * val[j][e]).sum()).collect();
            adds.push(lin(&o, &p(&nm("attn.w_o")), &p(&nm("attn.b_o")), d));
        }
        for (hi, a) in h.iter_mut().zip(adds) {
            hi.iter_mut().zip(a).for_each(|(hv, av)| *hv += av);
        }
        let hid = c.ffn_width;
        for hi in h.iter_mut() {
            let x2 = ln(hi, &p(&nm("norm2.gain")), &p(&nm("norm2.bias")));
            let mid: Vec<f64> = lin(&x2, &p(&nm("ffn.w_in")), &p(&nm("ffn.b_in")), hid).into_iter().map(gelu_ref).collect();
            let f = lin(&mid, &p(&nm("ffn.w_out")), &p(&nm("ffn.b_out")), d);
            hi.iter_mut().zip(f).for_each(|(hv, fv)| *hv += fv);
        }
    }
    let mut logits = Vec::new();
    for hi in &h {
        let hf = ln(hi, &p("final_norm.gain"), &p("final_norm.bias"));
        for t in 0..v {
            logits.push((0..d).map(|e| hf[e] * emb[t * d + e]).sum());
        }
    }
    logits
}

#[test]
fn one_layer_forward_matches_unrolled_oracle() {
    let cfg = ModelConfig {
        n_layers: 1,
        width: 4,
        n_heads: 1,
        seq_len: 3,
        vocab: 7,
        ffn_width: 6,
        init_std: 0.5,
        ..tiny(NormKind::LayerNorm, true, FfnKind::SingleGelu)
    };
    let mut m = DecoderModel::<f64>::build(&cfg, 11).unwrap();
    randomize_biases(&mut m);
    let tokens = [3usize, 0, 6];
    let caps = m.view().run(&tokens, 1, &CaptureRequest::none()).unwrap();
    let want = unrolled_logits(&m, &tokens, false);
    for (a, b) in caps.output_logits.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-7, "{a} vs {b}");
    }
}

#[test]
fn ablation_modes_agree_and_leave_lower_layers_untouched() {
    let cfg = ModelConfig { n_layers: 4, ..tiny(NormKind::LayerNorm, true, FfnKind::SingleGelu) };
    let m = DecoderModel::<f32>::build(&cfg, 5).unwrap();
    let tokens: Vec<usize> = (0..12).map(|i| (i * 7 + 3) % 17).collect();
    let base = m.view().run(&tokens, 2, &CaptureRequest::all()).unwrap();
    let runs: Vec<_> = [AblationMode::ZeroQ, AblationMode::ZeroK, AblationMode::ZeroBoth]
        .iter()
        .map(|&mode| m.ablate_upper_qk(mode).run(&tokens, 2, &CaptureRequest::all()).unwrap())
        .collect();
    for r in &runs[1..] {
        assert_eq!(r.output_logits.data(), runs[0].output_logits.data());
    }
    for r in &runs {
        for l in 0..cfg.upper_start() {
            assert_eq!(
                r.layer(l).unwrap().attention.as_ref().unwrap().data(),
                base.layer(l).unwrap().attention.as_ref().unwrap().data()
            );
        }
        for l in cfg.upper_start()..cfg.n_layers {
            let a = r.layer(l).unwrap().attention.as_ref().unwrap();
            for (ri, row) in a.data().chunks(6).enumerate() {
                let i = ri % 6;
                for &pv in &row[..=i] {
                    assert!((pv - 1.0 / (i + 1) as f32).abs() < 1e-7);
                }
            }
        }
    }
    let inputs = &tokens[..12];
    let targets: Vec<usize> = inputs.iter().map(|t| (t + 1) % 17).collect();
    let losses: Vec<f64> = [AblationMode::ZeroQ, AblationMode::ZeroK, AblationMode::ZeroBoth]
        .iter()
        .map(|&mode| m.ablate_upper_qk(mode).loss(inputs, &targets, 2).unwrap())
        .collect();
    assert_eq!(losses[0], losses[1]);
    assert_eq!(losses[1], losses[2]);
}

#[test]
fn checkpoint_round_trips_and_rejects_bad_magic() {
    let cfg = tiny(NormKind::RmsNorm, false, FfnKind::Swiglu);
    let m = DecoderModel::<f32>::build(&cfg, 9).unwrap();
    let bytes = checkpoint::encode(&m).unwrap();
    let back: DecoderModel<f32> = checkpoint::decode(&bytes).unwrap();
    assert_eq!(back.config, m.config);
    for p in &m.params {
        assert_eq!(back.param(back.find(&p.name).unwrap()).data(), p.value.data());
    }
    assert_eq!(checkpoint::encode(&back).unwrap(), bytes);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(checkpoint::decode::<f32>(&bad), Err(crate::Error::Format(_))));
    assert!(matches!(checkpoint::decode::<f32>(&bytes[..bytes.len() - 3]), Err(crate::Error::Format(_))));
}

/// Relative errors of every parameter gradient of the full decoder loss.
pub(crate) fn decoder_gradcheck(cfg: &ModelConfig, seed: u64) -> Vec<(String, f64)> {
    let mut model = DecoderModel::<f64>::build(cfg, seed).unwrap();
    randomize_biases(&mut model);
    let batch = 2;
    let n = cfg.seq_len;
    let inputs: Vec<usize> = (0..batch * n).map(|i| (i * 7 + 3) % cfg.vocab).collect();
    let targets: Vec<usize> = (0..batch * n).map(|i| (i * 5 + 1) % cfg.vocab).collect();
    let tensors: Vec<Tensor<f64>> = model.params.iter().map(|p| p.value.clone()).collect();
    let view_model = model.clone();
    let f = move |tape: &mut Tape<f64>, vars: &[Var]| {
        let out = view_model.view().forward(tape, vars, &inputs, batch)?;
        tape.cross_entropy(out.logits, &targets)
    };
    let errs = check_inputs(f, &tensors, 1e-5).unwrap();
    model.params.iter().map(|p| p.name.clone()).zip(errs).collect()
}

#[test]
fn full_decoder_gradients_match_finite_differences() {
    for (norm, bias, ffn) in [
        (NormKind::LayerNorm, true, FfnKind::SingleGelu),
        (NormKind::RmsNorm, false, FfnKind::Swiglu),
        (NormKind::LayerNorm, false, FfnKind::Geglu),
    ] {
        let cfg = tiny(norm, bias, ffn);
        for (name, err) in decoder_gradcheck(&cfg, 4) {
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}
