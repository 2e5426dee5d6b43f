//! Fast Walsh-Hadamard transform.
//!
//! `H_1 = [1]`, `H_{2n} = [[H_n, H_n], [H_n, -H_n]]`. The fast transform
//! computes `H v` with `log2(d)` butterfly stages in place, so it costs
//! `O(d log d)` time and no scratch memory. With `normalize` the result is
//! scaled by `d^{-1/2}`, which makes `H` orthonormal and self-inverse.
//!
//! Stages are run block-wise: all stages whose butterflies stay inside a
//! cache-sized block are finished for that block before moving on, and the
//! remaining long-stride stages sweep the whole vector. The arithmetic is
//! identical to the textbook stage order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FwhtError {
    #[error("Walsh-Hadamard length must be a power of two, got {0}")]
    NotPowerOfTwo(usize),
    #[error("buffer of length {len} is not a whole number of rows of length {dim}")]
    RaggedRows { len: usize, dim: usize },
}

/// A Hadamard dimension `d = 2^k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct HadamardDim(usize);

impl HadamardDim {
    pub fn new(d: usize) -> Result<Self, FwhtError> {
        if d.is_power_of_two() {
            Ok(Self(d))
        } else {
            Err(FwhtError::NotPowerOfTwo(d))
        }
    }

    /// Smallest power of two that is `>= n` (and at least 1).
    pub fn covering(n: usize) -> Self {
        Self(n.max(1).next_power_of_two())
    }

    pub fn get(self) -> usize {
        self.0
    }

    pub fn log2(self) -> u32 {
        self.0.trailing_zeros()
    }
}

impl TryFrom<usize> for HadamardDim {
    type Error = FwhtError;
    fn try_from(d: usize) -> Result<Self, FwhtError> {
        Self::new(d)
    }
}

impl From<HadamardDim> for usize {
    fn from(d: HadamardDim) -> usize {
        d.0
    }
}

// 1024 doubles = 8 KiB, comfortably inside L1.
const BLOCK: usize = 1024;

/// In-place `v <- H v` (optionally orthonormal).
pub fn fwht_inplace(v: &mut [f64], normalize: bool) -> Result<(), FwhtError> {
    let d = v.len();
    if !d.is_power_of_two() {
        return Err(FwhtError::NotPowerOfTwo(d));
    }
    transform(v);
    if normalize && d > 1 {
        let s = 1.0 / (d as f64).sqrt();
        v.iter_mut().for_each(|x| *x *= s);
    }
    Ok(())
}

/// Applies the transform to every length-`dim` row of a contiguous buffer.
pub fn fwht_rows(buf: &mut [f64], dim: usize, normalize: bool) -> Result<(), FwhtError> {
    if !dim.is_power_of_two() {
        return Err(FwhtError::NotPowerOfTwo(dim));
    }
    if !buf.len().is_multiple_of(dim) {
        return Err(FwhtError::RaggedRows { len: buf.len(), dim });
    }
    for row in buf.chunks_exact_mut(dim) {
        fwht_inplace(row, normalize)?;
    }
    Ok(())
}

fn transform(v: &mut [f64]) {
    let d = v.len();
    let inner = d.min(BLOCK);
    for block in v.chunks_exact_mut(inner) {
        stages(block, 1, inner);
    }
    stages(v, inner, d);
}

/// Butterfly stages with half-widths `h` in `[from, to)`.
fn stages(v: &mut [f64], from: usize, to: usize) {
    let mut h = from;
    while h < to {
        for pair in v.chunks_exact_mut(2 * h) {
            let (lo, hi) = pair.split_at_mut(h);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (x, y) = (*a, *b);
                *a = x + y;
                *b = x - y;
            }
        }
        h *= 2;
    }
}

/// Dense unnormalized `H_d` built directly from the block recursion.
/// Test oracle only: `O(d^2)` memory.
pub fn naive_hadamard(d: HadamardDim) -> Tensor {
    let mut h = vec![vec![1.0]];
    while h.len() < d.get() {
        let n = h.len();
        let mut next = vec![vec![0.0; 2 * n]; 2 * n];
        for i in 0..n {
            for j in 0..n {
                let v = h[i][j];
                next[i][j] = v;
                next[i][j + n] = v;
                next[i + n][j] = v;
                next[i + n][j + n] = -v;
            }
        }
        h = next;
    }
    Tensor::from_rows(&h).expect("square by construction")
}
