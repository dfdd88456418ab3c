//! Pre-norm causal decoder family with probe captures and Q/K ablation views.

pub mod checkpoint;
mod config;
mod forward;

pub use config::{FfnKind, ModelConfig};
pub use forward::{
    attention_logits, ffn_forward, AblationMode, CaptureRequest, ForwardCaptures, LayerCapture, LayerVars,
    ModelView, Outputs,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{NormKind, Tape, Tensor, Var};

/// Optimizer parameter group. Every trainable tensor belongs to exactly one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    UpperQk,
    LowerQk,
    ValuesOut,
    Ffn,
    Norms,
    Embeddings,
    Other,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::UpperQk,
        ParamGroup::LowerQk,
        ParamGroup::ValuesOut,
        ParamGroup::Ffn,
        ParamGroup::Norms,
        ParamGroup::Embeddings,
        ParamGroup::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::UpperQk => "upper_qk",
            ParamGroup::LowerQk => "lower_qk",
            ParamGroup::ValuesOut => "values_out",
            ParamGroup::Ffn => "ffn",
            ParamGroup::Norms => "norms",
            ParamGroup::Embeddings => "embeddings",
            ParamGroup::Other => "other",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub group: ParamGroup,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Indices into [`DecoderModel::params`] for one block.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub norm1_gain: usize,
    pub norm1_bias: Option<usize>,
    pub w_q: usize,
    pub w_k: usize,
    pub w_v: usize,
    pub w_o: usize,
    pub b_q: Option<usize>,
    pub b_k: Option<usize>,
    pub b_v: Option<usize>,
    pub b_o: Option<usize>,
    pub norm2_gain: usize,
    pub norm2_bias: Option<usize>,
    pub ffn: FfnParams,
}

#[derive(Debug, Clone)]
pub enum FfnParams {
    Single { w_in: usize, b_in: Option<usize>, w_out: usize, b_out: Option<usize> },
    Gated {
        w_gate: usize,
        b_gate: Option<usize>,
        w_up: usize,
        b_up: Option<usize>,
        w_out: usize,
        b_out: Option<usize>,
    },
}

/// A decoder's parameters plus the index structure that wires them.
#[derive(Debug, Clone)]
pub struct DecoderModel<T> {
    pub config: ModelConfig,
    pub params: Vec<Param<T>>,
    pub layers: Vec<LayerParams>,
    pub tok_emb: usize,
    pub lm_head: Option<usize>,
    pub final_gain: usize,
    pub final_bias: Option<usize>,
}

struct Builder<T> {
    params: Vec<Param<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<T> {
    fn add(&mut self, name: String, value: Tensor<T>, group: ParamGroup, decay: bool) -> usize {
        self.params.push(Param { name, value, group, decay });
        self.params.len() - 1
    }

    fn gaussian(&mut self, name: String, shape: [usize; 2], std: f64, group: ParamGroup) -> usize {
        let dist = Normal::new(0.0, std).expect("positive std");
        let t = Tensor::from_fn(shape, |_| T::of(dist.sample(&mut self.rng)));
        self.add(name, t, group, true)
    }

    fn fill(&mut self, name: String, d: usize, v: f64, group: ParamGroup) -> usize {
        self.add(name, Tensor::from_fn([d], |_| T::of(v)), group, false)
    }

    fn bias(&mut self, on: bool, name: String, d: usize, group: ParamGroup) -> Option<usize> {
        on.then(|| self.fill(name, d, 0.0, group))
    }
}

impl<T: Scalar> DecoderModel<T> {
    /// Gaussian init with std `σ` for embeddings and input projections and
    /// `σ/√(2L)` for the attention and FFN output projections; zero biases,
    /// unit norm gains.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let (d, l) = (c.width, c.n_layers);
        let std = c.init_std;
        let out_std = std / (2.0 * l as f64).sqrt();
        let mut b = Builder { params: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) };
        let layer_norm = c.norm_kind == NormKind::LayerNorm;
        let norm_bias = layer_norm && c.use_bias;

        let tok_emb = b.gaussian("tok_emb".into(), [c.vocab, d], std, ParamGroup::Embeddings);
        b.params[tok_emb].decay = false;
        let mut layers = Vec::with_capacity(l);
        for i in 0..l {
            let p = |s: &str| format!("layers.{i:03}.{s}");
            let qk = if c.is_upper(i) { ParamGroup::UpperQk } else { ParamGroup::LowerQk };
            let norm1_gain = b.fill(p("norm1.gain"), d, 1.0, ParamGroup::Norms);
            let norm1_bias = b.bias(norm_bias, p("norm1.bias"), d, ParamGroup::Norms);
            let w_q = b.gaussian(p("attn.w_q"), [d, d], std, qk);
            let w_k = b.gaussian(p("attn.w_k"), [d, d], std, qk);
            let w_v = b.gaussian(p("attn.w_v"), [d, d], std, ParamGroup::ValuesOut);
            let w_o = b.gaussian(p("attn.w_o"), [d, d], out_std, ParamGroup::ValuesOut);
            let b_q = b.bias(c.use_bias, p("attn.b_q"), d, ParamGroup::Other);
            let b_k = b.bias(c.use_bias, p("attn.b_k"), d, ParamGroup::Other);
            let b_v = b.bias(c.use_bias, p("attn.b_v"), d, ParamGroup::ValuesOut);
            let b_o = b.bias(c.use_bias, p("attn.b_o"), d, ParamGroup::ValuesOut);
            let norm2_gain = b.fill(p("norm2.gain"), d, 1.0, ParamGroup::Norms);
            let norm2_bias = b.bias(norm_bias, p("norm2.bias"), d, ParamGroup::Norms);
            let h = c.ffn_width;
            let ffn = match c.ffn_kind {
                FfnKind::SingleGelu => FfnParams::Single {
                    w_in: b.gaussian(p("ffn.w_in"), [d, h], std, ParamGroup::Ffn),
                    b_in: b.bias(c.use_bias, p("ffn.b_in"), h, ParamGroup::Ffn),
                    w_out: b.gaussian(p("ffn.w_out"), [h, d], out_std, ParamGroup::Ffn),
                    b_out: b.bias(c.use_bias, p("ffn.b_out"), d, ParamGroup::Ffn),
                },
                FfnKind::Swiglu | FfnKind::Geglu => FfnParams::Gated {
                    w_gate: b.gaussian(p("ffn.w_gate"), [d, h], std, ParamGroup::Ffn),
                    b_gate: b.bias(c.use_bias, p("ffn.b_gate"), h, ParamGroup::Ffn),
                    w_up: b.gaussian(p("ffn.w_up"), [d, h], std, ParamGroup::Ffn),
                    b_up: b.bias(c.use_bias, p("ffn.b_up"), h, ParamGroup::Ffn),
                    w_out: b.gaussian(p("ffn.w_out"), [h, d], out_std, ParamGroup::Ffn),
                    b_out: b.bias(c.use_bias, p("ffn.b_out"), d, ParamGroup::Ffn),
                },
            };
            layers.push(LayerParams {
                norm1_gain,
                norm1_bias,
                w_q,
                w_k,
                w_v,
                w_o,
                b_q,
                b_k,
                b_v,
                b_o,
                norm2_gain,
                norm2_bias,
                ffn,
            });
        }
        let final_gain = b.fill("final_norm.gain".into(), d, 1.0, ParamGroup::Norms);
        let final_bias = b.bias(norm_bias, "final_norm.bias".into(), d, ParamGroup::Norms);
        let lm_head = (!c.tie_embeddings).then(|| b.gaussian("lm_head".into(), [c.vocab, d], std, ParamGroup::Embeddings));
        if let Some(h) = lm_head {
            b.params[h].decay = false;
        }
        for p in b.params.iter_mut().filter(|p| p.value.shape().len() == 1) {
            p.decay = false;
        }
        Ok(Self { config: c.clone(), params: b.params, layers, tok_emb, lm_head, final_gain, final_bias })
    }

    /// Reassembles a model from named tensors (e.g. a checkpoint).
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut model = Self::build(config, 0)?;
        if named.len() != model.params.len() {
            return Err(config_err(format!(
                "expected {} parameters, found {}",
                model.params.len(),
                named.len()
            )));
        }
        for (name, t) in named {
            let slot = model
                .params
                .iter_mut()
                .find(|p| p.name == name)
                .ok_or_else(|| config_err(format!("unknown parameter {name}")))?;
            if slot.value.shape() != t.shape() {
                return Err(config_err(format!(
                    "parameter {name} has shape {:?}, config needs {:?}",
                    t.shape(),
                    slot.value.shape()
                )));
            }
            slot.value = t;
        }
        Ok(model)
    }

    pub fn param(&self, idx: usize) -> &Tensor<T> {
        &self.params[idx].value
    }

    pub fn param_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.params[idx].value
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn group_members(&self, group: ParamGroup) -> Vec<usize> {
        (0..self.params.len()).filter(|&i| self.params[i].group == group).collect()
    }

    /// FFN weight-matrix parameter count actually instantiated in one block.
    pub fn ffn_weight_count(&self, layer: usize) -> usize {
        match &self.layers[layer].ffn {
            FfnParams::Single { w_in, w_out, .. } => self.param(*w_in).numel() + self.param(*w_out).numel(),
            FfnParams::Gated { w_gate, w_up, w_out, .. } => {
                self.param(*w_gate).numel() + self.param(*w_up).numel() + self.param(*w_out).numel()
            }
        }
    }

    /// Head-concatenated bilinear form `W_Q W_Kᵀ` of one layer as a `d×d` row-major matrix.
    pub fn qk_bilinear(&self, layer: usize) -> Vec<f64> {
        let d = self.config.width;
        let q: Vec<f64> = self.param(self.layers[layer].w_q).data().iter().map(|v| v.f64()).collect();
        let k: Vec<f64> = self.param(self.layers[layer].w_k).data().iter().map(|v| v.f64()).collect();
        let mut b = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                b[i * d + j] = (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum();
            }
        }
        b
    }

    pub fn cast<U: Scalar>(&self) -> DecoderModel<U> {
        DecoderModel {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), group: p.group, decay: p.decay })
                .collect(),
            layers: self.layers.clone(),
            tok_emb: self.tok_emb,
            lm_head: self.lm_head,
            final_gain: self.final_gain,
            final_bias: self.final_bias,
        }
    }

    /// Records every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Result<Vec<Var>> {
        self.params.iter().map(|p| tape.leaf(p.value.clone(), requires_grad)).collect()
    }

    pub fn view(&self) -> ModelView<'_, T> {
        ModelView { model: self, ablation: None }
    }

    /// Evaluation-time view with upper-half Q and/or K activations zeroed.
    pub fn ablate_upper_qk(&self, mode: AblationMode) -> ModelView<'_, T> {
        ModelView { model: self, ablation: Some(mode) }
    }
}

#[cfg(test)]
pub(crate) mod tests;
