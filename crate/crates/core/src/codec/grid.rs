use crate::error::{Error, Result};

/// Sentinel for a masked grid entry.
pub const MASK: u32 = u32::MAX;

/// K codebooks by L time steps of token indices, row-major by codebook.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    codebooks: usize,
    len: usize,
    vocab: u32,
    tokens: Vec<u32>,
    pub hop: usize,
    pub sample_rate: u32,
}

impl TokenGrid {
    pub fn new(codebooks: usize, len: usize, vocab: u32, tokens: Vec<u32>, hop: usize, sample_rate: u32) -> Result<Self> {
        if codebooks == 0 || len == 0 {
            return Err(Error::Shape(format!("grid {codebooks}x{len} must be non-empty")));
        }
        if tokens.len() != codebooks * len {
            return Err(Error::Shape(format!("{} tokens for a {codebooks}x{len} grid", tokens.len())));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t != MASK && t >= vocab) {
            return Err(Error::InvalidArgument(format!("token {bad} outside vocabulary of {vocab}")));
        }
        Ok(Self { codebooks, len, vocab, tokens, hop, sample_rate })
    }

    /// A grid with every entry masked.
    pub fn masked(codebooks: usize, len: usize, vocab: u32, hop: usize, sample_rate: u32) -> Result<Self> {
        Self::new(codebooks, len, vocab, vec![MASK; codebooks * len], hop, sample_rate)
    }

    pub fn codebooks(&self) -> usize {
        self.codebooks
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn vocab(&self) -> u32 {
        self.vocab
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn get(&self, k: usize, t: usize) -> u32 {
        self.tokens[k * self.len + t]
    }

    /// Set an entry; `token` must be in the vocabulary or [`MASK`].
    pub fn set(&mut self, k: usize, t: usize, token: u32) {
        debug_assert!(token == MASK || token < self.vocab);
        self.tokens[k * self.len + t] = token;
    }

    pub fn is_masked(&self, k: usize, t: usize) -> bool {
        self.get(k, t) == MASK
    }

    pub fn mask_count(&self) -> usize {
        self.tokens.iter().filter(|&&t| t == MASK).count()
    }

    pub fn has_mask(&self) -> bool {
        self.tokens.contains(&MASK)
    }

    pub fn mask_column(&mut self, t: usize) {
        for k in 0..self.codebooks {
            self.set(k, t, MASK);
        }
    }

    pub fn column(&self, t: usize) -> Vec<u32> {
        (0..self.codebooks).map(|k| self.get(k, t)).collect()
    }

    /// Samples represented by the grid (`L * hop`).
    pub fn num_samples(&self) -> usize {
        self.len * self.hop
    }

    pub fn duration(&self) -> f64 {
        self.num_samples() as f64 / self.sample_rate as f64
    }

    /// Keep columns `start..end`.
    pub fn slice_columns(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len {
            return Err(Error::InvalidArgument(format!("column range {start}..{end} outside 0..{}", self.len)));
        }
        let tokens = (0..self.codebooks)
            .flat_map(|k| (start..end).map(move |t| (k, t)))
            .map(|(k, t)| self.get(k, t))
            .collect();
        Self::new(self.codebooks, end - start, self.vocab, tokens, self.hop, self.sample_rate)
    }
}
