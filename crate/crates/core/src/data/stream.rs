use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TokenShard;
use crate::error::{config_err, Result};

pub const DEFAULT_VAL_FRAC: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// `batch` rows of `n` input ids with next-token targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBatch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub tokens_consumed: u64,
}

/// Endless stream of shuffled, non-overlapping windows over one split.
/// Each epoch visits every window once in a fresh seed-derived order.
#[derive(Debug)]
pub struct BatchStream<'a> {
    shard: &'a TokenShard,
    batch: usize,
    n: usize,
    seed: u64,
    region: (usize, usize),
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    consumed: u64,
}

pub fn batch_stream(shard: &TokenShard, batch: usize, n: usize, seed: u64, split: Split) -> Result<BatchStream<'_>> {
    BatchStream::new(shard, batch, n, seed, split, DEFAULT_VAL_FRAC)
}

impl<'a> BatchStream<'a> {
    pub fn new(shard: &'a TokenShard, batch: usize, n: usize, seed: u64, split: Split, val_frac: f64) -> Result<Self> {
        if batch == 0 || n == 0 {
            return Err(config_err("batch and sequence length must be positive"));
        }
        if !(0.0..1.0).contains(&val_frac) {
            return Err(config_err(format!("val_frac {val_frac} not in [0, 1)")));
        }
        let len = shard.len();
        let cut = len - (len as f64 * val_frac).round() as usize;
        let region = match split {
            Split::Train => (0, cut),
            Split::Val => (cut, len),
        };
        let windows = (region.1 - region.0).saturating_sub(1) / n;
        if windows < batch {
            return Err(config_err(format!(
                "{split:?} split has {} tokens, need at least {} for batch {batch} × window {}",
                region.1 - region.0,
                batch * n + 1,
                n + 1
            )));
        }
        let mut s = Self { shard, batch, n, seed, region, order: (0..windows).collect(), cursor: 0, epoch: 0, consumed: 0 };
        s.shuffle();
        Ok(s)
    }

    fn shuffle(&mut self) {
        self.order.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ self.epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        self.order.shuffle(&mut rng);
    }

    /// Number of full batches before the window order is reshuffled.
    pub fn batches_per_epoch(&self) -> usize {
        self.order.len() / self.batch
    }

    pub fn tokens_consumed(&self) -> u64 {
        self.consumed
    }

    /// Start offsets (absolute) of the windows in the current epoch order.
    pub fn window_starts(&self) -> Vec<usize> {
        self.order.iter().map(|w| self.region.0 + w * self.n).collect()
    }

    pub fn next_batch(&mut self) -> PackedBatch {
        if self.cursor + self.batch > self.order.len() {
            self.epoch += 1;
            self.cursor = 0;
            self.shuffle();
        }
        let toks = self.shard.tokens();
        let mut inputs = Vec::with_capacity(self.batch * self.n);
        let mut targets = Vec::with_capacity(self.batch * self.n);
        for &w in &self.order[self.cursor..self.cursor + self.batch] {
            let start = self.region.0 + w * self.n;
            let win = &toks[start..start + self.n + 1];
            inputs.extend(win[..self.n].iter().map(|&t| t as usize));
            targets.extend(win[1..].iter().map(|&t| t as usize));
        }
        self.cursor += self.batch;
        self.consumed += (self.batch * self.n) as u64;
        PackedBatch { inputs, targets, tokens_consumed: self.consumed }
    }
}

impl Iterator for BatchStream<'_> {
    type Item = PackedBatch;

    fn next(&mut self) -> Option<PackedBatch> {
        Some(self.next_batch())
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use proptest::prelude::*;

    use super::*;

    fn shard(len: usize) -> TokenShard {
        TokenShard::new(1 << 20, (0..len as u32).collect()).unwrap()
    }

    #[test]
    fn same_seed_same_batches() {
        let s = shard(10_000);
        let a: Vec<_> = batch_stream(&s, 4, 16, 9, Split::Train).unwrap().take(300).collect();
        let b: Vec<_> = batch_stream(&s, 4, 16, 9, Split::Train).unwrap().take(300).collect();
        assert_eq!(a, b);
        let c: Vec<_> = batch_stream(&s, 4, 16, 10, Split::Train).unwrap().take(300).collect();
        assert_ne!(a, c);
    }

    #[test]
    fn train_and_val_disjoint() {
        let s = shard(20_000);
        let cover = |split| {
            let st = batch_stream(&s, 2, 32, 1, split).unwrap();
            st.window_starts().into_iter().flat_map(|o| o..o + 33).collect::<HashSet<_>>()
        };
        let (tr, va) = (cover(Split::Train), cover(Split::Val));
        assert!(tr.is_disjoint(&va));
        assert!(va.iter().all(|&i| i >= 19_600));
    }

    #[test]
    fn token_accounting_is_exact() {
        let s = shard(5_000);
        let mut st = batch_stream(&s, 3, 10, 0, Split::Train).unwrap();
        for k in 1..=500u64 {
            assert_eq!(st.next_batch().tokens_consumed, k * 30);
        }
    }

    #[test]
    fn windows_in_one_epoch_do_not_overlap() {
        let s = shard(3_000);
        let st = batch_stream(&s, 2, 16, 4, Split::Train).unwrap();
        let mut starts = st.window_starts();
        starts.sort_unstable();
        assert!(starts.windows(2).all(|w| w[1] - w[0] == 16));
    }

    #[test]
    fn too_small_is_config_error() {
        let s = shard(100);
        assert!(matches!(batch_stream(&s, 4, 32, 0, Split::Train), Err(crate::Error::Config(_))));
        assert!(matches!(batch_stream(&s, 1, 8, 0, Split::Val), Err(crate::Error::Config(_))));
    }

    proptest! {
        #[test]
        fn targets_are_stream_successors(seed in 0u64..1000, batch in 1usize..5, n in 1usize..20) {
            let toks: Vec<u32> = (0..4000u32).map(|i| (i * 7919) % 1000).collect();
            let s = TokenShard::new(1000, toks.clone()).unwrap();
            let mut st = batch_stream(&s, batch, n, seed, Split::Train).unwrap();
            for _ in 0..5 {
                let b = st.next_batch();
                for r in 0..batch {
                    let row = &b.inputs[r * n..(r + 1) * n];
                    let start = toks.windows(n).position(|w| w.iter().zip(row).all(|(&a, &b)| a as usize == b)).unwrap();
                    for i in 0..n {
                        prop_assert_eq!(b.targets[r * n + i], toks[start + i + 1] as usize);
                    }
                }
            }
        }
    }
}
