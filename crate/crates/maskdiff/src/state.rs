//! Partially revealed token sequences.
//!
//! A [`TokenState`] is a length-L sequence where each position either carries
//! a committed token index or is still masked. Reverse samplers only ever move
//! positions from masked to revealed, so "revealed" and "frozen" coincide.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenState {
    tokens: Vec<Option<usize>>,
}

impl TokenState {
    /// All positions masked.
    pub fn all_masked(len: usize) -> Self {
        TokenState { tokens: vec![None; len] }
    }

    /// Fully revealed state holding `tokens` verbatim.
    pub fn from_tokens(tokens: &[usize]) -> Self {
        TokenState { tokens: tokens.iter().map(|&t| Some(t)).collect() }
    }

    pub fn from_options(tokens: Vec<Option<usize>>) -> Self {
        TokenState { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, l: usize) -> Option<usize> {
        self.tokens[l]
    }

    pub fn is_masked(&self, l: usize) -> bool {
        self.tokens[l].is_none()
    }

    pub fn masked_count(&self) -> usize {
        self.tokens.iter().filter(|t| t.is_none()).count()
    }

    pub fn revealed_count(&self) -> usize {
        self.len() - self.masked_count()
    }

    pub fn masked_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.tokens
            .iter()
            .enumerate()
            .filter_map(|(l, t)| t.is_none().then_some(l))
    }

    pub fn iter(&self) -> impl Iterator<Item = Option<usize>> + '_ {
        self.tokens.iter().copied()
    }

    /// Commit `token` at a currently masked position.
    pub fn reveal(&mut self, l: usize, token: usize) -> Result<()> {
        if l >= self.len() {
            return Err(Error::OutOfRange(format!("position {l} out of range")));
        }
        if self.tokens[l].is_some() {
            return Err(Error::InvariantViolation(format!(
                "position {l} is already revealed and must not be overwritten"
            )));
        }
        self.tokens[l] = Some(token);
        Ok(())
    }

    /// The committed sequence, or an error while anything is still masked.
    pub fn fully_revealed(&self) -> Result<Vec<usize>> {
        self.tokens
            .iter()
            .enumerate()
            .map(|(l, t)| {
                t.ok_or_else(|| Error::invalid(format!("position {l} is still masked")))
            })
            .collect()
    }

    /// Check every committed token lies in 0..vocab.
    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        for (l, t) in self.tokens.iter().enumerate() {
            if let Some(tok) = t {
                if *tok >= vocab {
                    return Err(Error::OutOfRange(format!(
                        "token {tok} at position {l} exceeds vocabulary of {vocab}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Stable 64-bit fingerprint of the state (FNV-1a over the token stream).
    /// Used to derive deterministic per-state randomness in tests and audits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x100000001b3);
        };
        for t in &self.tokens {
            match t {
                None => mix(u64::MAX),
                Some(tok) => mix(*tok as u64),
            }
        }
        h
    }
}
