use serde::{Deserialize, Serialize};

use super::{DecoderModel, FfnKind, FfnParams};
use crate::error::{config_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Which upper-half activations an ablation view zeroes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    ZeroQ,
    ZeroK,
    ZeroBoth,
}

/// Read-only forward access to a model, optionally with upper Q/K ablated.
#[derive(Clone, Copy)]
pub struct ModelView<'a, T> {
    pub model: &'a DecoderModel<T>,
    pub ablation: Option<AblationMode>,
}

/// Tape handles for the probe-relevant intermediates of one block.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    /// Normalized residual entering attention, `[B·n, d]`.
    pub input: Var,
    /// Pre-softmax logits, `[B·H, n, n]`.
    pub logits: Var,
    /// Causal attention probabilities, `[B·H, n, n]`.
    pub attn: Var,
    /// Normalized residual entering the FFN, `[B·n, d]`.
    pub ffn_input: Var,
    /// FFN residual write before the add, `[B·n, d]`.
    pub ffn_write: Var,
}

pub struct Outputs {
    /// `[B·n, V]`
    pub logits: Var,
    pub layers: Vec<LayerVars>,
}

/// Which intermediates to copy out of a forward pass.
#[derive(Debug, Clone, Default)]
pub struct CaptureRequest {
    /// `None` captures every layer.
    pub layers: Option<Vec<usize>>,
    pub attention: bool,
    pub logits: bool,
    pub input: bool,
    pub ffn_write: bool,
}

impl CaptureRequest {
    pub fn all() -> Self {
        Self { layers: None, attention: true, logits: true, input: true, ffn_write: true }
    }

    pub fn none() -> Self {
        Self::default()
    }

    fn wants(&self, layer: usize) -> bool {
        self.layers.as_ref().map_or(true, |ls| ls.contains(&layer))
    }
}

#[derive(Debug, Clone, Default)]
pub struct LayerCapture<T> {
    pub attention: Option<Tensor<T>>,
    pub logits: Option<Tensor<T>>,
    pub input: Option<Tensor<T>>,
    /// Captured together with `ffn_write`.
    pub ffn_input: Option<Tensor<T>>,
    pub ffn_write: Option<Tensor<T>>,
}

/// Copied-out intermediates of one forward pass over `batch` sequences.
#[derive(Debug, Clone)]
pub struct ForwardCaptures<T> {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub layers: Vec<Option<LayerCapture<T>>>,
    pub output_logits: Tensor<T>,
}

impl<T: Scalar> ForwardCaptures<T> {
    pub fn collect(tape: &Tape<T>, out: &Outputs, req: &CaptureRequest, batch: usize, seq: usize, heads: usize) -> Self {
        let layers = out
            .layers
            .iter()
            .enumerate()
            .map(|(l, lv)| {
                req.wants(l).then(|| LayerCapture {
                    attention: req.attention.then(|| tape.value(lv.attn).clone()),
                    logits: req.logits.then(|| tape.value(lv.logits).clone()),
                    input: req.input.then(|| tape.value(lv.input).clone()),
                    ffn_input: req.ffn_write.then(|| tape.value(lv.ffn_input).clone()),
                    ffn_write: req.ffn_write.then(|| tape.value(lv.ffn_write).clone()),
                })
            })
            .collect();
        Self { batch, seq, heads, layers, output_logits: tape.value(out.logits).clone() }
    }

    pub fn layer(&self, l: usize) -> Option<&LayerCapture<T>> {
        self.layers.get(l).and_then(Option::as_ref)
    }
}

fn bias_add<T: Scalar>(tape: &mut Tape<T>, x: Var, b: Option<usize>, vars: &[Var]) -> Result<Var> {
    match b {
        Some(b) => tape.add_bias(x, vars[b]),
        None => Ok(x),
    }
}

/// FFN residual write on a tape. `mats` are `[w_in, w_out]` or `[w_gate, w_up, w_out]`.
pub(crate) fn ffn_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    kind: FfnKind,
    mats: &[Var],
    biases: &[Option<Var>],
) -> Result<Var> {
    let with_bias = |tape: &mut Tape<T>, v: Var, b: Option<Var>| match b {
        Some(b) => tape.add_bias(v, b),
        None => Ok(v),
    };
    let b = |i: usize| biases.get(i).copied().flatten();
    match kind {
        FfnKind::SingleGelu => {
            let h = tape.matmul(x, mats[0])?;
            let h = with_bias(tape, h, b(0))?;
            let h = tape.gelu(h)?;
            let o = tape.matmul(h, mats[1])?;
            with_bias(tape, o, b(1))
        }
        FfnKind::Swiglu | FfnKind::Geglu => {
            let g = tape.matmul(x, mats[0])?;
            let g = with_bias(tape, g, b(0))?;
            let g = if kind == FfnKind::Swiglu { tape.silu(g)? } else { tape.gelu(g)? };
            let u = tape.matmul(x, mats[1])?;
            let u = with_bias(tape, u, b(1))?;
            let h = tape.mul(g, u)?;
            let o = tape.matmul(h, mats[2])?;
            with_bias(tape, o, b(2))
        }
    }
}

/// Residual write of a bias-free FFN for `x: [n×d]`.
pub fn ffn_forward<T: Scalar>(x: &Tensor<T>, kind: FfnKind, mats: &[Tensor<T>]) -> Result<Tensor<T>> {
    let want = if kind.is_gated() { 3 } else { 2 };
    if mats.len() != want {
        return Err(config_err(format!("{kind:?} takes {want} weight matrices, got {}", mats.len())));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone())?;
    let mv = mats.iter().map(|m| tape.constant(m.clone())).collect::<Result<Vec<_>>>()?;
    let out = ffn_on_tape(&mut tape, xv, kind, &mv, &[])?;
    Ok(tape.value(out).clone())
}

/// Per-head pre-softmax logits `Z = RoPE(X W_Q) RoPE(X W_K)ᵀ / √d_k` for a single sequence.
///
/// `w_q`, `w_k` are head-concatenated `d × (H·d_k)`; `rope_base = None` disables
/// rotation so that `Z = X W_Q W_Kᵀ Xᵀ / √d_k` per head.
pub fn attention_logits<T: Scalar>(
    x: &Tensor<T>,
    w_q: &Tensor<T>,
    w_k: &Tensor<T>,
    n_heads: usize,
    rope_base: Option<f64>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone())?;
    let qv = tape.constant(w_q.clone())?;
    let kv = tape.constant(w_k.clone())?;
    let q = tape.matmul(xv, qv)?;
    let k = tape.matmul(xv, kv)?;
    let hd = tape.shape(q)[1] / n_heads;
    let mut q = tape.split_heads(q, 1, n_heads)?;
    let mut k = tape.split_heads(k, 1, n_heads)?;
    if let Some(base) = rope_base {
        q = tape.rope(q, base)?;
        k = tape.rope(k, base)?;
    }
    let z = tape.attention_scores(q, k, 1.0 / (hd as f64).sqrt())?;
    Ok(tape.value(z).clone())
}

impl<'a, T: Scalar> ModelView<'a, T> {
    /// Records the full forward pass for `batch` packed sequences.
    pub fn forward(&self, tape: &mut Tape<T>, vars: &[Var], tokens: &[usize], batch: usize) -> Result<Outputs> {
        let m = self.model;
        let c = &m.config;
        if batch == 0 || tokens.len() % batch != 0 {
            return Err(Error::Data(format!("{} tokens do not split into {batch} sequences", tokens.len())));
        }
        let seq = tokens.len() / batch;
        if seq > c.seq_len {
            return Err(Error::Data(format!("sequence length {seq} exceeds configured {}", c.seq_len)));
        }
        if vars.len() != m.params.len() {
            return Err(Error::Usage("parameter bindings do not match the model".into()));
        }
        let (d, heads) = (c.width, c.n_heads);
        let hd = c.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut h = tape.embedding(vars[m.tok_emb], tokens)?;
        let mut layers = Vec::with_capacity(c.n_layers);
        for (l, lp) in m.layers.iter().enumerate() {
            let x = tape.normalize(h, c.norm_kind, vars[lp.norm1_gain], lp.norm1_bias.map(|i| vars[i]), c.norm_eps)?;
            let ablate = if c.is_upper(l) { self.ablation } else { None };
            let zero_q = matches!(ablate, Some(AblationMode::ZeroQ | AblationMode::ZeroBoth));
            let zero_k = matches!(ablate, Some(AblationMode::ZeroK | AblationMode::ZeroBoth));
            let rows = tokens.len();
            let q = if zero_q {
                tape.constant(Tensor::zeros([rows, d]))?
            } else {
                let q = tape.matmul(x, vars[lp.w_q])?;
                bias_add(tape, q, lp.b_q, vars)?
            };
            let k = if zero_k {
                tape.constant(Tensor::zeros([rows, d]))?
            } else {
                let k = tape.matmul(x, vars[lp.w_k])?;
                bias_add(tape, k, lp.b_k, vars)?
            };
            let v = tape.matmul(x, vars[lp.w_v])?;
            let v = bias_add(tape, v, lp.b_v, vars)?;
            let mut qh = tape.split_heads(q, batch, heads)?;
            let mut kh = tape.split_heads(k, batch, heads)?;
            let vh = tape.split_heads(v, batch, heads)?;
            if c.use_rope {
                qh = tape.rope(qh, c.rope_base)?;
                kh = tape.rope(kh, c.rope_base)?;
            }
            let z = tape.attention_scores(qh, kh, scale)?;
            let p = tape.causal_softmax(z)?;
            let o = tape.attention_apply(p, vh)?;
            let o = tape.merge_heads(o, batch)?;
            let a = tape.matmul(o, vars[lp.w_o])?;
            let a = bias_add(tape, a, lp.b_o, vars)?;
            h = tape.add(h, a)?;
            let x2 = tape.normalize(h, c.norm_kind, vars[lp.norm2_gain], lp.norm2_bias.map(|i| vars[i]), c.norm_eps)?;
            let f = match &lp.ffn {
                FfnParams::Single { w_in, b_in, w_out, b_out } => ffn_on_tape(
                    tape,
                    x2,
                    c.ffn_kind,
                    &[vars[*w_in], vars[*w_out]],
                    &[b_in.map(|i| vars[i]), b_out.map(|i| vars[i])],
                )?,
                FfnParams::Gated { w_gate, b_gate, w_up, b_up, w_out, b_out } => ffn_on_tape(
                    tape,
                    x2,
                    c.ffn_kind,
                    &[vars[*w_gate], vars[*w_up], vars[*w_out]],
                    &[b_gate.map(|i| vars[i]), b_up.map(|i| vars[i]), b_out.map(|i| vars[i])],
                )?,
            };
            h = tape.add(h, f)?;
            layers.push(LayerVars { input: x, logits: z, attn: p, ffn_input: x2, ffn_write: f });
        }
        let hf = tape.normalize(h, c.norm_kind, vars[m.final_gain], m.final_bias.map(|i| vars[i]), c.norm_eps)?;
        let head = m.lm_head.unwrap_or(m.tok_emb);
        let logits = tape.matmul_nt(hf, vars[head])?;
        Ok(Outputs { logits, layers })
    }

    /// Gradient-free forward pass returning the requested captures.
    pub fn run(&self, tokens: &[usize], batch: usize, req: &CaptureRequest) -> Result<ForwardCaptures<T>> {
        let mut tape = Tape::new();
        let vars = self.model.bind(&mut tape, false)?;
        let out = self.forward(&mut tape, &vars, tokens, batch)?;
        let seq = tokens.len() / batch;
        Ok(ForwardCaptures::collect(&tape, &out, req, batch, seq, self.model.config.n_heads))
    }

    /// Mean next-token loss without gradients.
    pub fn loss(&self, inputs: &[usize], targets: &[usize], batch: usize) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.model.bind(&mut tape, false)?;
        let out = self.forward(&mut tape, &vars, inputs, batch)?;
        let loss = tape.cross_entropy(out.logits, targets)?;
        Ok(tape.value(loss).item().f64())
    }
}
