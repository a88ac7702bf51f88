//! Token files, a seeded synthetic corpus, and shifted-label batches.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{Labels, IGNORE_INDEX};
use crate::error::{Error, Result};

/// Weight of the uniform component mixed into every transition row.
pub const UNIFORM_MIX: f64 = 0.1;
/// Distinct successors per state in the sparse component.
pub const SUCCESSORS: usize = 8;

/// Order-1 Markov chain: each state moves to one of a few favoured
/// successors, or with probability [`UNIFORM_MIX`] to a uniform token.
#[derive(Debug, Clone)]
pub struct MarkovChain {
    vocab: usize,
    successors: Vec<Vec<(u32, f64)>>,
}

impl MarkovChain {
    pub fn new(seed: u64, vocab: usize) -> Result<MarkovChain> {
        if vocab < 2 {
            return Err(Error::Data(format!(
                "vocabulary must have at least 2 tokens, got {vocab}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = SUCCESSORS.min(vocab);
        let successors = (0..vocab)
            .map(|_| {
                let ids = rand::seq::index::sample(&mut rng, vocab, k);
                let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
                let total: f64 = raw.iter().sum();
                ids.iter().zip(raw).map(|(id, w)| (id as u32, w / total)).collect()
            })
            .collect();
        Ok(MarkovChain { vocab, successors })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    /// Dense transition probabilities out of `state`.
    pub fn transition_row(&self, state: usize) -> Vec<f64> {
        let mut row = vec![UNIFORM_MIX / self.vocab as f64; self.vocab];
        for &(id, w) in &self.successors[state] {
            row[id as usize] += (1.0 - UNIFORM_MIX) * w;
        }
        row
    }

    fn step(&self, state: usize, rng: &mut ChaCha8Rng) -> u32 {
        if rng.random_bool(UNIFORM_MIX) {
            return rng.random_range(0..self.vocab as u32);
        }
        let mut u: f64 = rng.random();
        let succ = &self.successors[state];
        for &(id, w) in succ {
            if u < w {
                return id;
            }
            u -= w;
        }
        succ.last().expect("at least one successor").0
    }

    pub fn sample(&self, seed: u64, length: usize) -> Vec<u32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
        let mut out = Vec::with_capacity(length);
        let mut state = rng.random_range(0..self.vocab);
        for _ in 0..length {
            let t = self.step(state, &mut rng);
            out.push(t);
            state = t as usize;
        }
        out
    }
}

/// Deterministic token stream from the seeded chain.
pub fn synth_tokens(seed: u64, vocab: usize, length: usize) -> Result<Vec<u32>> {
    Ok(MarkovChain::new(seed, vocab)?.sample(seed, length))
}

/// Writes a synthetic corpus as a token file and returns it loaded.
pub fn synth_corpus(seed: u64, vocab: usize, length: usize, path: impl AsRef<Path>) -> Result<TokenFile> {
    let tokens = synth_tokens(seed, vocab, length)?;
    write_token_file(&path, &tokens)?;
    Ok(TokenFile {
        path: path.as_ref().to_path_buf(),
        tokens,
    })
}

pub fn write_token_file(path: impl AsRef<Path>, tokens: &[u32]) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = tokens.iter().flat_map(|t| t.to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Little-endian u32 token ids, no header.
#[derive(Debug, Clone)]
pub struct TokenFile {
    pub path: PathBuf,
    pub tokens: Vec<u32>,
}

impl TokenFile {
    pub fn open(path: impl AsRef<Path>, vocab: usize) -> Result<TokenFile> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Data(format!(
                "{}: size {} is not a multiple of 4",
                path.display(),
                bytes.len()
            )));
        }
        let tokens: Vec<u32> = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some((i, &t)) = tokens.iter().enumerate().find(|(_, &t)| t as usize >= vocab) {
            return Err(Error::Data(format!(
                "{}: token {t} at index {i} is outside vocabulary {vocab}",
                path.display()
            )));
        }
        Ok(TokenFile {
            path: path.to_path_buf(),
            tokens,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `batch × seq` ids, row-major.
    pub tokens: Vec<u32>,
    pub labels: Labels,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    /// Labels are each sequence shifted left by one, the final position of
    /// every sequence ignored.
    pub fn from_tokens(tokens: Vec<u32>, batch: usize, seq: usize, vocab: usize) -> Result<Batch> {
        if tokens.len() != batch * seq || seq == 0 {
            return Err(Error::Data(format!(
                "{} tokens do not form {batch} sequences of {seq}",
                tokens.len()
            )));
        }
        let ids = tokens
            .chunks(seq)
            .flat_map(|s| s[1..].iter().map(|&t| t as i64).chain(std::iter::once(IGNORE_INDEX)))
            .collect();
        Ok(Batch {
            labels: Labels::new(ids, vocab)?,
            tokens,
            batch,
            seq,
        })
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }
}

/// The `batch × seq` window starting at `cursor` and the cursor after it.
pub fn next_batch(file: &TokenFile, cursor: usize, batch: usize, seq: usize, vocab: usize) -> Result<(Batch, usize)> {
    let needed = batch * seq;
    if cursor + needed > file.tokens.len() {
        return Err(Error::EndOfData {
            cursor,
            needed,
            available: file.tokens.len(),
        });
    }
    let tokens = file.tokens[cursor..cursor + needed].to_vec();
    Ok((Batch::from_tokens(tokens, batch, seq, vocab)?, cursor + needed))
}
