use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TOKSHARD";
const VERSION: u32 = 1;
const HEADER: usize = 8 + 4 + 4 + 8;

/// Flat token stream with a declared vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenShard {
    vocab: u32,
    tokens: Vec<u32>,
}

impl TokenShard {
    pub fn new(vocab: u32, tokens: Vec<u32>) -> Result<Self> {
        if vocab == 0 {
            return Err(Error::Config("vocab must be positive".into()));
        }
        if let Some((i, &t)) = tokens.iter().enumerate().find(|(_, &t)| t >= vocab) {
            return Err(Error::Data(format!("token {t} at offset {i} is outside vocab {vocab}")));
        }
        Ok(Self { vocab, tokens })
    }

    pub fn vocab(&self) -> usize {
        self.vocab as usize
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER + 4 * self.tokens.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.vocab.to_le_bytes());
        out.extend_from_slice(&(self.tokens.len() as u64).to_le_bytes());
        for t in &self.tokens {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER {
            return Err(Error::Format(format!("shard header truncated ({} bytes)", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Format("bad shard magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(8);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported shard version {version}")));
        }
        let vocab = u32_at(12);
        let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let payload = &bytes[HEADER..];
        if payload.len() != count.checked_mul(4).unwrap_or(usize::MAX) {
            return Err(Error::Format(format!(
                "header declares {count} tokens but payload holds {} bytes",
                payload.len()
            )));
        }
        let tokens = payload.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        Self::new(vocab, tokens)
    }
}

pub fn load_shard(path: impl AsRef<Path>) -> Result<TokenShard> {
    TokenShard::from_bytes(&fs::read(path)?)
}

pub fn write_shard(shard: &TokenShard, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, shard.to_bytes())?;
    Ok(())
}
