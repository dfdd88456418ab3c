use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TokenShard;
use crate::error::{config_err, Result};

/// Generator for a stream where recent tokens recur at a tunable rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticCorpusSpec {
    pub vocab: usize,
    pub length: usize,
    pub repeat_rate: f64,
    pub window: usize,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self { vocab: 512, length: 20_000_000, repeat_rate: 0.3, window: 64, seed: 0 }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.repeat_rate) {
            return Err(config_err(format!("repeat_rate {} not in [0, 1]", self.repeat_rate)));
        }
        if self.vocab == 0 || self.vocab > u32::MAX as usize || self.window == 0 {
            return Err(config_err("vocab and window must be positive"));
        }
        Ok(())
    }
}

pub fn synth_copy_corpus(spec: &SyntheticCorpusSpec) -> Result<TokenShard> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut toks: Vec<u32> = Vec::with_capacity(spec.length);
    for i in 0..spec.length {
        let t = if i > 0 && rng.gen::<f64>() < spec.repeat_rate {
            let back = rng.gen_range(1..=spec.window.min(i));
            toks[i - back]
        } else {
            rng.gen_range(0..spec.vocab as u32)
        };
        toks.push(t);
    }
    TokenShard::new(spec.vocab as u32, toks)
}

/// Average number of earlier tokens within `window` equal to the current one,
/// over positions that have a full window behind them.
pub fn mean_window_matches(tokens: &[u32], window: usize) -> f64 {
    if tokens.len() <= window {
        return 0.0;
    }
    let mut hits = 0u64;
    for i in window..tokens.len() {
        hits += tokens[i - window..i].iter().filter(|&&t| t == tokens[i]).count() as u64;
    }
    hits as f64 / (tokens.len() - window) as f64
}
