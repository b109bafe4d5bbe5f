//! Byte-level tokenizer, corpus splits and seeded sampling.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Beginning-of-sequence marker, the only special token.
pub const BOS: u32 = 256;
pub const NEWLINE: u32 = 10;
pub const VOCAB_SIZE: usize = 257;
pub const DEFAULT_SPLIT: f64 = 0.9;

/// Public-domain text bundled for out-of-the-box runs.
pub const BUNDLED_TEXT: &str = include_str!("../data/alice29.txt");
pub const BUNDLED_NAME: &str = "bundled:alice29.txt";

pub fn tokenize(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Bytes for `ids`; BOS is dropped.
pub fn detokenize_bytes(ids: &[u32]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        match id {
            0..=255 => out.push(id as u8),
            BOS => {}
            _ => return Err(Error::TokenOutOfRange { id, vocab: VOCAB_SIZE }),
        }
    }
    Ok(out)
}

/// Text for `ids`. Byte runs that are not valid UTF-8 are replaced with
/// U+FFFD; ids produced by [`tokenize`] always round-trip exactly.
pub fn detokenize(ids: &[u32]) -> Result<String> {
    let bytes = detokenize_bytes(ids)?;
    Ok(match String::from_utf8(bytes) {
        Ok(s) => s,
        Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
    })
}

/// Renders tokens for reports: BOS as `<bos>`, other bytes escaped.
pub fn describe(ids: &[u32]) -> String {
    let mut s = String::new();
    for &id in ids {
        if id == BOS {
            s.push_str("<bos>");
        } else if id < 256 {
            s.extend(std::ascii::escape_default(id as u8).map(char::from));
        } else {
            s.push_str(&format!("<{id}>"));
        }
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    HeldOut,
}

/// Tokenized text split into a leading training part and a trailing
/// held-out part.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<u32>,
    pub held_out: Vec<u32>,
    pub source: PathBuf,
    pub split_fraction: f64,
}

impl Corpus {
    pub fn from_text(text: &str, split_fraction: f64, source: impl Into<PathBuf>) -> Result<Self> {
        if !(split_fraction > 0.0 && split_fraction < 1.0) {
            return Err(Error::Config(format!(
                "split fraction must be in (0, 1), got {split_fraction}"
            )));
        }
        let tokens = tokenize(text);
        let cut = (tokens.len() as f64 * split_fraction).round() as usize;
        if cut == 0 || cut >= tokens.len() {
            return Err(Error::CorpusTooShort {
                len: tokens.len(),
                needed: 2,
            });
        }
        Ok(Self {
            held_out: tokens[cut..].to_vec(),
            train: tokens[..cut].to_vec(),
            source: source.into(),
            split_fraction,
        })
    }

    pub fn load(path: &Path, split_fraction: f64) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text, split_fraction, path)
    }

    pub fn bundled() -> Self {
        Self::from_text(BUNDLED_TEXT, DEFAULT_SPLIT, BUNDLED_NAME).expect("bundled corpus is valid")
    }

    pub fn split(&self, which: Split) -> &[u32] {
        match which {
            Split::Train => &self.train,
            Split::HeldOut => &self.held_out,
        }
    }

    /// The `index`-th sample of `n` tokens for `seed`; see [`sample_sequence`].
    pub fn sample(&self, which: Split, n: usize, seed: u64, index: u64) -> Result<Vec<u32>> {
        sample_sequence(self.split(which), n, seed, index)
    }

    /// Up to `count` consecutive non-overlapping windows of `n` tokens from
    /// the start of a split.
    pub fn windows(&self, which: Split, n: usize, count: usize) -> Result<Vec<Vec<u32>>> {
        let s = self.split(which);
        if n == 0 || s.len() < n {
            return Err(Error::CorpusTooShort { len: s.len(), needed: n });
        }
        Ok(s.chunks_exact(n).take(count).map(<[u32]>::to_vec).collect())
    }
}

/// A window of `n` tokens at a uniformly drawn offset. Each `(seed, index)`
/// pair owns an independent random stream, so draws do not depend on how
/// many other samples were taken before.
pub fn sample_sequence(tokens: &[u32], n: usize, seed: u64, index: u64) -> Result<Vec<u32>> {
    if n == 0 || tokens.len() < n {
        return Err(Error::CorpusTooShort {
            len: tokens.len(),
            needed: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let start = rng.random_range(0..=tokens.len() - n);
    Ok(tokens[start..start + n].to_vec())
}

/// Entropy in nats of the token frequency distribution.
pub fn unigram_entropy(tokens: &[u32]) -> f64 {
    let mut counts = vec![0usize; VOCAB_SIZE];
    for &t in tokens {
        counts[(t as usize).min(VOCAB_SIZE - 1)] += 1;
    }
    let n = tokens.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}
