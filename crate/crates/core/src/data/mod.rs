//! Token shards, packed batch streams and the synthetic copy corpus.

mod shard;
mod stream;
mod synth;

pub use shard::{load_shard, write_shard, TokenShard};
pub use stream::{batch_stream, BatchStream, PackedBatch, Split, DEFAULT_VAL_FRAC};
pub use synth::{mean_window_matches, synth_copy_corpus, SyntheticCorpusSpec};
