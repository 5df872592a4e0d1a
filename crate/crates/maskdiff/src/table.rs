//! Per-position categorical tables.
//!
//! Predictions over a vocabulary of K tokens for each of L sequence positions
//! travel either as validated probabilities ([`ProbTable`], rows sum to one)
//! or as raw scores ([`LogitTable`], arbitrary finite reals). Keeping the two
//! as distinct types makes it impossible to feed unnormalized scores where
//! probabilities are required.

use crate::error::{Error, Result};

/// Probabilities smaller than this are floored before taking a log. The floor
/// is applied inside log computations only; stored tables keep exact zeros.
pub const PROB_FLOOR: f64 = 1e-30;

/// ln(max(p, floor)): finite even at p = 0, exact for ordinary probabilities.
pub fn ln_floored(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// Tolerance for row-sum validation.
const ROW_SUM_TOL: f64 = 1e-9;

/// Row-stochastic L x K table: `row(l)[k]` is the probability of token k at
/// position l.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbTable {
    len: usize,
    vocab: usize,
    data: Vec<f64>,
}

impl ProbTable {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("probability table needs at least one row"));
        }
        let vocab = rows[0].len();
        if vocab == 0 {
            return Err(Error::invalid("probability table needs at least one column"));
        }
        let len = rows.len();
        let mut data = Vec::with_capacity(len * vocab);
        for (l, row) in rows.into_iter().enumerate() {
            if row.len() != vocab {
                return Err(Error::invalid(format!(
                    "row {l} has {} entries, expected {vocab}",
                    row.len()
                )));
            }
            let mut sum = 0.0;
            for (k, &p) in row.iter().enumerate() {
                if !p.is_finite() || p < 0.0 {
                    return Err(Error::invalid(format!(
                        "row {l} column {k} holds {p}, expected a probability"
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::invalid(format!(
                    "row {l} sums to {sum}, expected 1 within {ROW_SUM_TOL}"
                )));
            }
            data.extend_from_slice(&row);
        }
        Ok(ProbTable { len, vocab, data })
    }

    /// Uniform table: every row is 1/K.
    pub fn uniform(len: usize, vocab: usize) -> Result<Self> {
        if len == 0 || vocab == 0 {
            return Err(Error::invalid("table dimensions must be positive"));
        }
        let p = 1.0 / vocab as f64;
        Ok(ProbTable { len, vocab, data: vec![p; len * vocab] })
    }

    /// Point-mass rows at the given tokens.
    pub fn one_hot(tokens: &[usize], vocab: usize) -> Result<Self> {
        let mut rows = Vec::with_capacity(tokens.len());
        for &t in tokens {
            if t >= vocab {
                return Err(Error::OutOfRange(format!(
                    "token {t} exceeds vocabulary of {vocab}"
                )));
            }
            let mut row = vec![0.0; vocab];
            row[t] = 1.0;
            rows.push(row);
        }
        ProbTable::from_rows(rows)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn row(&self, l: usize) -> &[f64] {
        &self.data[l * self.vocab..(l + 1) * self.vocab]
    }

    pub fn get(&self, l: usize, k: usize) -> f64 {
        self.data[l * self.vocab + k]
    }

    /// Floored elementwise log of every row.
    pub fn to_logits(&self) -> LogitTable {
        LogitTable {
            len: self.len,
            vocab: self.vocab,
            data: self.data.iter().map(|&p| ln_floored(p)).collect(),
        }
    }
}

/// Unnormalized per-position scores; `softmax` turns them into probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitTable {
    len: usize,
    vocab: usize,
    data: Vec<f64>,
}

impl LogitTable {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(Error::invalid("logit table needs at least one row and column"));
        }
        let vocab = rows[0].len();
        let len = rows.len();
        let mut data = Vec::with_capacity(len * vocab);
        for (l, row) in rows.into_iter().enumerate() {
            if row.len() != vocab {
                return Err(Error::invalid(format!(
                    "row {l} has {} entries, expected {vocab}",
                    row.len()
                )));
            }
            if let Some(k) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("row {l} column {k} is not finite")));
            }
            data.extend_from_slice(&row);
        }
        Ok(LogitTable { len, vocab, data })
    }

    pub fn zeros(len: usize, vocab: usize) -> Result<Self> {
        if len == 0 || vocab == 0 {
            return Err(Error::invalid("table dimensions must be positive"));
        }
        Ok(LogitTable { len, vocab, data: vec![0.0; len * vocab] })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn row(&self, l: usize) -> &[f64] {
        &self.data[l * self.vocab..(l + 1) * self.vocab]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Row-wise softmax with the usual max-shift for numerical stability.
    pub fn softmax(&self) -> ProbTable {
        let mut data = Vec::with_capacity(self.data.len());
        for l in 0..self.len {
            let row = self.row(l);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
            let sum: f64 = exps.iter().sum();
            data.extend(exps.into_iter().map(|e| e / sum));
        }
        ProbTable { len: self.len, vocab: self.vocab, data }
    }
}
