//! Token codebooks: discrete embedding tables with a quantizer.
//!
//! The workhorse is [`Codebook`], a binary codebook whose K = 2^d entries are
//! the corners of the d-dimensional hypercube {-1, +1}^d. Quantization is
//! componentwise sign thresholding (strictly positive -> +1, else -1), which
//! is equivalent to nearest-neighbor search over the corner set but runs in
//! O(d) instead of O(K * d). The token index packs the sign pattern into bits:
//! bit i is set iff component i quantized to +1.
//!
//! [`DenseCodebook`] holds an arbitrary entry table and quantizes by explicit
//! nearest-neighbor search. It exists for small vocabularies that are not a
//! power of two (the brute-force test instances use K = 3) and doubles as the
//! independent oracle for the sign shortcut.

use crate::error::{Error, Result};

/// Largest supported embedding dimension for the binary codebook; keeps the
/// dense entry table (2^d * d doubles) comfortably in memory.
pub const MAX_BINARY_DIM: usize = 16;

/// An embedding table over K tokens together with a quantizer mapping an
/// arbitrary vector to the index of a codebook entry.
pub trait Quantizer {
    /// Embedding dimension d.
    fn dim(&self) -> usize;
    /// Vocabulary size K.
    fn size(&self) -> usize;
    /// Embedding vector of token `j`. Panics on out-of-range `j`; use
    /// bounds-checked wrappers where the index is untrusted.
    fn entry(&self, j: usize) -> &[f64];
    /// Index of the codebook entry the vector `e` quantizes to.
    fn quantize(&self, e: &[f64]) -> Result<usize>;
}

/// Binary codebook: entries are all sign patterns in {-1, +1}^d.
#[derive(Debug, Clone)]
pub struct Codebook {
    dim: usize,
    /// Row-major K x d entry table; row j is the sign pattern of index j.
    entries: Vec<f64>,
}

impl Codebook {
    /// Build the full entry table for dimension `dim` (1..=16).
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || dim > MAX_BINARY_DIM {
            return Err(Error::OutOfRange(format!(
                "codebook dimension must be in 1..={MAX_BINARY_DIM}, got {dim}"
            )));
        }
        let size = 1usize << dim;
        let mut entries = vec![0.0; size * dim];
        for j in 0..size {
            for i in 0..dim {
                entries[j * dim + i] = if (j >> i) & 1 == 1 { 1.0 } else { -1.0 };
            }
        }
        Ok(Codebook { dim, entries })
    }

    /// Componentwise sign quantization: strictly positive components map to
    /// +1, everything else (including exact zero) to -1.
    pub fn lfq_quantize(&self, e: &[f64]) -> Result<Vec<f64>> {
        self.check_vector(e)?;
        Ok(e.iter().map(|&v| if v > 0.0 { 1.0 } else { -1.0 }).collect())
    }

    /// Pack a sign vector into its token index: bit i set iff b[i] == +1.
    pub fn embedding_to_index(&self, b: &[f64]) -> Result<usize> {
        self.check_vector(b)?;
        let mut j = 0usize;
        for (i, &v) in b.iter().enumerate() {
            if v == 1.0 {
                j |= 1 << i;
            } else if v != -1.0 {
                return Err(Error::invalid(format!(
                    "component {i} is {v}, expected exactly -1 or +1"
                )));
            }
        }
        Ok(j)
    }

    /// Unpack token index `j` into its sign vector.
    pub fn index_to_embedding(&self, j: usize) -> Result<Vec<f64>> {
        if j >= self.size() {
            return Err(Error::OutOfRange(format!(
                "token index {j} out of range for vocabulary of {}",
                self.size()
            )));
        }
        Ok(self.entry(j).to_vec())
    }

    /// Quantize and return the token index in one step.
    pub fn quantize_to_index(&self, e: &[f64]) -> Result<usize> {
        let mut j = 0usize;
        self.check_vector(e)?;
        for (i, &v) in e.iter().enumerate() {
            if v > 0.0 {
                j |= 1 << i;
            }
        }
        Ok(j)
    }

    fn check_vector(&self, e: &[f64]) -> Result<()> {
        if e.len() != self.dim {
            return Err(Error::invalid(format!(
                "expected a vector of length {}, got {}",
                self.dim,
                e.len()
            )));
        }
        if let Some(i) = e.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite component at {i}")));
        }
        Ok(())
    }
}

impl Quantizer for Codebook {
    fn dim(&self) -> usize {
        self.dim
    }

    fn size(&self) -> usize {
        1usize << self.dim
    }

    fn entry(&self, j: usize) -> &[f64] {
        &self.entries[j * self.dim..(j + 1) * self.dim]
    }

    fn quantize(&self, e: &[f64]) -> Result<usize> {
        self.quantize_to_index(e)
    }
}

/// Explicit entry table quantized by exhaustive nearest-neighbor search.
/// Ties in squared distance break toward the lowest index.
#[derive(Debug, Clone)]
pub struct DenseCodebook {
    dim: usize,
    size: usize,
    entries: Vec<f64>,
}

impl DenseCodebook {
    /// Build from `size` rows of length `dim`, row-major.
    pub fn new(dim: usize, entries: Vec<Vec<f64>>) -> Result<Self> {
        if dim == 0 || entries.is_empty() {
            return Err(Error::invalid("dense codebook needs dim >= 1 and at least one entry"));
        }
        let size = entries.len();
        let mut flat = Vec::with_capacity(size * dim);
        for (j, row) in entries.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::invalid(format!(
                    "entry {j} has length {}, expected {dim}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("entry {j} has a non-finite component")));
            }
            flat.extend_from_slice(row);
        }
        Ok(DenseCodebook { dim, size, entries: flat })
    }

    /// The corner set of a binary codebook as an explicit table: used to
    /// cross-check the sign shortcut against true nearest-neighbor search.
    pub fn from_binary(cb: &Codebook) -> Self {
        DenseCodebook {
            dim: cb.dim(),
            size: cb.size(),
            entries: cb.entries.clone(),
        }
    }
}

impl Quantizer for DenseCodebook {
    fn dim(&self) -> usize {
        self.dim
    }

    fn size(&self) -> usize {
        self.size
    }

    fn entry(&self, j: usize) -> &[f64] {
        &self.entries[j * self.dim..(j + 1) * self.dim]
    }

    fn quantize(&self, e: &[f64]) -> Result<usize> {
        if e.len() != self.dim {
            return Err(Error::invalid(format!(
                "expected a vector of length {}, got {}",
                self.dim,
                e.len()
            )));
        }
        if let Some(i) = e.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite component at {i}")));
        }
        let mut best = 0usize;
        let mut best_d2 = f64::INFINITY;
        for j in 0..self.size {
            let d2: f64 = self
                .entry(j)
                .iter()
                .zip(e)
                .map(|(c, v)| (c - v) * (c - v))
                .sum();
            // Strict inequality keeps the lowest index on exact ties.
            if d2 < best_d2 {
                best_d2 = d2;
                best = j;
            }
        }
        Ok(best)
    }
}
