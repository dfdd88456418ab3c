use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::tensor::NormKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnKind {
    /// `W_out φ(W_in x)` with GELU.
    SingleGelu,
    /// `W_out [silu(W_gate x) ⊙ W_up x]`.
    Swiglu,
    /// `W_out [gelu(W_gate x) ⊙ W_up x]`.
    Geglu,
}

impl FfnKind {
    pub fn is_gated(self) -> bool {
        !matches!(self, FfnKind::SingleGelu)
    }
}

fn default_rope_base() -> f64 {
    10_000.0
}
fn default_init_std() -> f64 {
    0.02
}
fn default_norm_eps() -> f64 {
    1e-5
}
fn yes() -> bool {
    true
}

/// Architecture of a pre-norm causal decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub width: usize,
    pub n_heads: usize,
    pub seq_len: usize,
    pub vocab: usize,
    pub norm_kind: NormKind,
    pub use_bias: bool,
    pub ffn_kind: FfnKind,
    /// Hidden width `m` (single branch) or `r` (gated).
    pub ffn_width: usize,
    #[serde(default = "yes")]
    pub tie_embeddings: bool,
    #[serde(default = "yes")]
    pub use_rope: bool,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

impl ModelConfig {
    /// GPT-style block: LayerNorm, biases, GELU FFN of width `4d`.
    pub fn gpt(n_layers: usize, width: usize, n_heads: usize, seq_len: usize, vocab: usize) -> Self {
        Self {
            n_layers,
            width,
            n_heads,
            seq_len,
            vocab,
            norm_kind: NormKind::LayerNorm,
            use_bias: true,
            ffn_kind: FfnKind::SingleGelu,
            ffn_width: 4 * width,
            tie_embeddings: true,
            use_rope: true,
            rope_base: default_rope_base(),
            init_std: default_init_std(),
            norm_eps: default_norm_eps(),
        }
    }

    /// Same config with a gated FFN at the matched width `r = 2m/3`.
    pub fn with_matched_gate(&self, kind: FfnKind) -> Result<Self> {
        if !kind.is_gated() || self.ffn_kind.is_gated() {
            return Err(config_err("matched gating maps a single-branch FFN to a gated one"));
        }
        if self.ffn_width % 3 != 0 {
            return Err(config_err(format!("ffn width {} is not divisible by 3", self.ffn_width)));
        }
        Ok(Self { ffn_kind: kind, ffn_width: 2 * self.ffn_width / 3, ..self.clone() })
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.n_heads
    }

    /// First layer index of the upper half, `⌈L/2⌉`.
    pub fn upper_start(&self) -> usize {
        self.n_layers.div_ceil(2)
    }

    pub fn is_upper(&self, layer: usize) -> bool {
        layer >= self.upper_start()
    }

    /// FFN weight-matrix parameter count per layer (biases excluded).
    pub fn ffn_weight_params(&self) -> usize {
        let mats = if self.ffn_kind.is_gated() { 3 } else { 2 };
        mats * self.width * self.ffn_width
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("width", self.width),
            ("n_heads", self.n_heads),
            ("seq_len", self.seq_len),
            ("vocab", self.vocab),
            ("ffn_width", self.ffn_width),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(config_err(format!("{name} must be positive")));
        }
        if self.width % self.n_heads != 0 {
            return Err(config_err(format!(
                "width {} is not divisible by n_heads {}",
                self.width, self.n_heads
            )));
        }
        if self.use_rope && self.head_dim() % 2 != 0 {
            return Err(config_err(format!("head_dim {} must be even for RoPE", self.head_dim())));
        }
        if !(self.init_std > 0.0) || !(self.norm_eps > 0.0) || !(self.rope_base > 1.0) {
            return Err(config_err("init_std and norm_eps must be positive, rope_base > 1"));
        }
        Ok(())
    }
}
