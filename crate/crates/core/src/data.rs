//! Byte-level corpus handling: tokenization, the train/test split, fixed
//! length windows and the shuffled batch stream.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::rng;

/// 256 byte values plus one padding id.
pub const BYTE_VOCAB: usize = 257;
pub const PAD_ID: usize = 256;
pub const CACHE_MAGIC: &[u8; 8] = b"ILRTOKS1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("test fraction must lie in (0, 0.5), got {0}")]
    BadFraction(f64),
    #[error("corpus of {len} tokens is shorter than 2·(T+1) = {need}")]
    TooShort { len: usize, need: usize },
    #[error("{what} split has {len} tokens, fewer than one window of {need}")]
    NoWindow { what: &'static str, len: usize, need: usize },
    #[error("batch has {inputs} inputs and {targets} targets for sequence length {seq_len}")]
    BadBatch { inputs: usize, targets: usize, seq_len: usize },
    #[error("token cache: {0}")]
    Cache(String),
    #[error("no corpus files given")]
    NoFiles,
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

pub fn tokenize_bytes(text: &[u8]) -> Vec<usize> {
    text.iter().map(|&b| b as usize).collect()
}

/// Inverse of [`tokenize_bytes`]; the padding id has no byte and is skipped.
pub fn detokenize(ids: &[usize]) -> Vec<u8> {
    ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect()
}

/// Token stream split into a train prefix and a contiguous test tail.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub tokens: Vec<usize>,
    pub sources: Vec<PathBuf>,
    /// First test token; `tokens[..train_end]` is train.
    pub train_end: usize,
}

impl Corpus {
    pub fn train(&self) -> &[usize] {
        &self.tokens[..self.train_end]
    }

    pub fn test(&self) -> &[usize] {
        &self.tokens[self.train_end..]
    }

    /// Reads and concatenates `paths`, then splits. A path ending in
    /// `.toks` is read as a token cache instead of raw text.
    pub fn from_files(paths: &[PathBuf], test_fraction: f64, seq_len: usize) -> Result<Self> {
        if paths.is_empty() {
            return Err(DataError::NoFiles);
        }
        let mut tokens = Vec::new();
        for p in paths {
            if p.extension().is_some_and(|e| e == "toks") {
                tokens.extend(read_cache(p)?);
            } else {
                let bytes = std::fs::read(p).map_err(|source| DataError::Io {
                    path: p.display().to_string(),
                    source,
                })?;
                tokens.extend(tokenize_bytes(&bytes));
            }
        }
        let mut c = split(tokens, test_fraction, seq_len)?;
        c.sources = paths.to_vec();
        Ok(c)
    }
}

/// The last `⌊N·test_fraction⌋` tokens become the test split.
pub fn split(tokens: Vec<usize>, test_fraction: f64, seq_len: usize) -> Result<Corpus> {
    if !(test_fraction > 0.0 && test_fraction < 0.5) {
        return Err(DataError::BadFraction(test_fraction));
    }
    let need = 2 * (seq_len + 1);
    if tokens.len() < need {
        return Err(DataError::TooShort {
            len: tokens.len(),
            need,
        });
    }
    let n_test = (tokens.len() as f64 * test_fraction).floor() as usize;
    Ok(Corpus {
        train_end: tokens.len() - n_test,
        tokens,
        sources: Vec::new(),
    })
}

/// `B` rows of `T` inputs and their next-token targets, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub seq_len: usize,
}

impl Batch {
    pub fn new(inputs: Vec<usize>, targets: Vec<usize>, seq_len: usize) -> Result<Self> {
        if seq_len == 0 || inputs.is_empty() || inputs.len() != targets.len() || inputs.len() % seq_len != 0 {
            return Err(DataError::BadBatch {
                inputs: inputs.len(),
                targets: targets.len(),
                seq_len,
            });
        }
        Ok(Self {
            inputs,
            targets,
            seq_len,
        })
    }

    /// Batch built from whole windows of `T+1` tokens.
    pub fn from_windows<'a>(windows: impl IntoIterator<Item = &'a [usize]>, seq_len: usize) -> Result<Self> {
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for w in windows {
            debug_assert_eq!(w.len(), seq_len + 1);
            inputs.extend_from_slice(&w[..seq_len]);
            targets.extend_from_slice(&w[1..]);
        }
        Self::new(inputs, targets, seq_len)
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.len() / self.seq_len
    }
}

/// Non-overlapping windows of `T+1` tokens; a trailing partial window is dropped.
pub fn windows(tokens: &[usize], seq_len: usize) -> impl Iterator<Item = &[usize]> {
    tokens.chunks_exact(seq_len + 1)
}

/// Endless stream of training batches. Windows are visited in a seeded
/// random order, reshuffled every epoch; a batch may straddle two epochs.
pub struct BatchStream<'a> {
    tokens: &'a [usize],
    seq_len: usize,
    batch_size: usize,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
    rng: ChaCha8Rng,
}

impl<'a> BatchStream<'a> {
    pub fn new(tokens: &'a [usize], batch_size: usize, seq_len: usize, seed: u64) -> Result<Self> {
        let n = tokens.len() / (seq_len + 1);
        if n == 0 || batch_size == 0 {
            return Err(DataError::NoWindow {
                what: "train",
                len: tokens.len(),
                need: seq_len + 1,
            });
        }
        let mut s = Self {
            tokens,
            seq_len,
            batch_size,
            order: (0..n).collect(),
            cursor: 0,
            epoch: 0,
            rng: rng::stream(seed, rng::BATCH_ORDER),
        };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    pub fn n_windows(&self) -> usize {
        self.order.len()
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn next_batch(&mut self) -> Batch {
        let w = self.seq_len + 1;
        let mut picked = Vec::with_capacity(self.batch_size);
        while picked.len() < self.batch_size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
                self.epoch += 1;
            }
            let i = self.order[self.cursor];
            picked.push(&self.tokens[i * w..(i + 1) * w]);
            self.cursor += 1;
        }
        Batch::from_windows(picked, self.seq_len).expect("whole windows")
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        Some(self.next_batch())
    }
}

pub fn encode_cache(tokens: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + 2 * tokens.len());
    out.extend_from_slice(CACHE_MAGIC);
    for &t in tokens {
        let v = u16::try_from(t).map_err(|_| DataError::Cache(format!("token {t} does not fit 16 bits")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_cache(bytes: &[u8]) -> Result<Vec<usize>> {
    let body = bytes
        .strip_prefix(CACHE_MAGIC.as_slice())
        .ok_or_else(|| DataError::Cache("bad magic".into()))?;
    if body.len() % 2 != 0 {
        return Err(DataError::Cache("odd payload length".into()));
    }
    Ok(body
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
        .collect())
}

pub fn write_cache(path: &Path, tokens: &[usize]) -> Result<()> {
    std::fs::write(path, encode_cache(tokens)?).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_cache(path: &Path) -> Result<Vec<usize>> {
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_cache(&bytes)
}

const WORDS: &[&str] = &[
    "the", "of", "and", "to", "a", "in", "is", "that", "for", "it", "as", "was", "with", "be", "by", "on", "not",
    "he", "this", "are", "or", "his", "from", "at", "which", "but", "have", "an", "had", "they", "you", "were",
    "their", "one", "all", "we", "can", "her", "has", "there", "been", "if", "more", "when", "will", "would", "who",
    "so", "no", "river", "light", "water", "small", "people", "school", "garden", "number", "system", "morning",
    "village", "teacher", "student", "question", "energy", "history", "window", "mountain", "reading", "simple",
    "early", "between", "through", "because", "although", "children", "machine", "language", "evening", "problem",
    "answer", "library", "winter", "summer", "ocean", "forest", "market", "letter", "careful", "quickly", "slowly",
    "bright", "ancient", "modern", "measure", "travel", "discover", "remember", "explain", "describe", "follow",
];

/// Deterministic English-like filler text of exactly `n_bytes` bytes, used
/// when no real corpus is at hand. Word frequencies fall off roughly as 1/rank.
pub fn synthetic_text(n_bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = rng::stream(seed, "synthetic-text");
    let weights: Vec<f64> = (0..WORDS.len()).map(|r| 1.0 / (r as f64 + 1.5)).collect();
    let total: f64 = weights.iter().sum();
    let mut out = Vec::with_capacity(n_bytes + 32);
    let mut sentence_start = true;
    while out.len() < n_bytes {
        let n_words = rng.gen_range(5..16);
        for i in 0..n_words {
            let mut u = rng.gen::<f64>() * total;
            let mut w = WORDS.len() - 1;
            for (j, wt) in weights.iter().enumerate() {
                if u < *wt {
                    w = j;
                    break;
                }
                u -= wt;
            }
            let word = WORDS[w].as_bytes();
            if sentence_start {
                out.push(word[0].to_ascii_uppercase());
                out.extend_from_slice(&word[1..]);
                sentence_start = false;
            } else {
                out.extend_from_slice(word);
            }
            if i + 1 < n_words {
                out.push(if rng.gen_bool(0.06) { b',' } else { b' ' });
                if out.last() == Some(&b',') {
                    out.push(b' ');
                }
            }
        }
        out.extend_from_slice(if rng.gen_bool(0.1) { b"?" } else { b"." });
        out.push(if rng.gen_bool(0.15) { b'\n' } else { b' ' });
        sentence_start = true;
    }
    out.truncate(n_bytes);
    out
}
