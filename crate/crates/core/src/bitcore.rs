//! Bit-packed storage of ±1 values and the XNOR/popcount kernel.
//!
//! Encoding: `+1 ↦ 1`, `-1 ↦ 0`. Rows are padded to whole `u64` words and the
//! padding bits are kept at zero by every constructor and mutator, so word-wise
//! popcounts only need a final masked word.

use thiserror::Error;

pub const WORD_BITS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BitError {
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("value {value} at index {index} is not a sign (+1 or -1)")]
    NotASign { index: usize, value: i64 },
    #[error("shape mismatch: {left_rows}x{left_cols} vs {right_rows}x{right_cols}")]
    ShapeMismatch {
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("bit width mismatch: {left} vs {right}")]
    WidthMismatch { left: usize, right: usize },
    #[error("padding bits set in row {row}")]
    DirtyPadding { row: usize },
}

#[inline]
pub fn words_for(bits: usize) -> usize {
    bits.div_ceil(WORD_BITS)
}

/// Mask selecting the logical bits of the last word of a row of `bits` bits.
#[inline]
pub fn tail_mask(bits: usize) -> u64 {
    match bits % WORD_BITS {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

/// Row-major matrix of packed sign bits.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    stride: usize,
    words: Vec<u64>,
}

impl BitMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        let stride = words_for(cols);
        Self {
            rows,
            cols,
            stride,
            words: vec![0; rows * stride],
        }
    }

    /// Every logical bit set (all +1).
    pub fn ones(rows: usize, cols: usize) -> Self {
        let mut m = Self::zeros(rows, cols);
        if m.stride > 0 {
            let tail = tail_mask(cols);
            for row in m.words.chunks_mut(m.stride) {
                row.fill(u64::MAX);
                row[row.len() - 1] = tail;
            }
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                if f(r, c) {
                    m.words[r * m.stride + c / WORD_BITS] |= 1u64 << (c % WORD_BITS);
                }
            }
        }
        m
    }

    /// Wraps raw row-major words; rejects storage with set padding bits.
    pub fn from_words(rows: usize, cols: usize, words: Vec<u64>) -> Result<Self, BitError> {
        let stride = words_for(cols);
        if words.len() != rows * stride {
            return Err(BitError::LengthMismatch {
                expected: rows * stride,
                got: words.len(),
            });
        }
        let m = Self {
            rows,
            cols,
            stride,
            words,
        };
        if stride > 0 {
            let tail = tail_mask(cols);
            for r in 0..rows {
                if m.words[r * stride + stride - 1] & !tail != 0 {
                    return Err(BitError::DirtyPadding { row: r });
                }
            }
        }
        Ok(m)
    }

    /// Packs a row-major sequence of ±1 values.
    pub fn pack_signs(values: &[i8], rows: usize, cols: usize) -> Result<Self, BitError> {
        if values.len() != rows * cols {
            return Err(BitError::LengthMismatch {
                expected: rows * cols,
                got: values.len(),
            });
        }
        if let Some((index, &v)) = values.iter().enumerate().find(|(_, &v)| v != 1 && v != -1) {
            return Err(BitError::NotASign {
                index,
                value: v as i64,
            });
        }
        Ok(Self::from_fn(rows, cols, |r, c| values[r * cols + c] == 1))
    }

    pub fn unpack_signs(&self) -> Vec<i8> {
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.push(self.sign(r, c));
            }
        }
        out
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Words per row.
    #[inline]
    pub fn stride(&self) -> usize {
        self.stride
    }

    #[inline]
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        debug_assert!(r < self.rows && c < self.cols);
        self.words[r * self.stride + c / WORD_BITS] >> (c % WORD_BITS) & 1 == 1
    }

    #[inline]
    pub fn sign(&self, r: usize, c: usize) -> i8 {
        if self.get(r, c) {
            1
        } else {
            -1
        }
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, bit: bool) {
        assert!(r < self.rows && c < self.cols, "bit index out of range");
        let w = &mut self.words[r * self.stride + c / WORD_BITS];
        let m = 1u64 << (c % WORD_BITS);
        if bit {
            *w |= m;
        } else {
            *w &= !m;
        }
    }

    #[inline]
    pub fn flip(&mut self, r: usize, c: usize) {
        assert!(r < self.rows && c < self.cols, "bit index out of range");
        self.words[r * self.stride + c / WORD_BITS] ^= 1u64 << (c % WORD_BITS);
    }

    #[inline]
    pub fn row(&self, r: usize) -> BitRow<'_> {
        BitRow {
            words: &self.words[r * self.stride..(r + 1) * self.stride],
            nbits: self.cols,
        }
    }

    pub fn count_ones(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn same_shape(&self, other: &BitMatrix) -> Result<(), BitError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(BitError::ShapeMismatch {
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        Ok(())
    }

    pub fn hamming(&self, other: &BitMatrix) -> Result<u64, BitError> {
        self.same_shape(other)?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones() as u64)
            .sum())
    }

    pub(crate) fn words_mut(&mut self) -> &mut [u64] {
        &mut self.words
    }
}

/// Borrowed view of one packed row with its logical bit count.
#[derive(Clone, Copy, Debug)]
pub struct BitRow<'a> {
    pub words: &'a [u64],
    pub nbits: usize,
}

impl<'a> BitRow<'a> {
    pub fn new(words: &'a [u64], nbits: usize) -> Self {
        debug_assert_eq!(words.len(), words_for(nbits));
        Self { words, nbits }
    }
}

/// `2 * popcount(xnor(w, x)) - nbits`, i.e. the ±1 dot product of two rows.
pub fn xnor_popcount_dot(w: BitRow<'_>, x: BitRow<'_>) -> Result<i64, BitError> {
    if w.nbits != x.nbits {
        return Err(BitError::WidthMismatch {
            left: w.nbits,
            right: x.nbits,
        });
    }
    Ok(dot_words(w.words, x.words, w.nbits))
}

/// Unchecked kernel behind [`xnor_popcount_dot`]; both slices must hold
/// `words_for(nbits)` words.
#[inline]
pub fn dot_words(w: &[u64], x: &[u64], nbits: usize) -> i64 {
    if nbits == 0 {
        return 0;
    }
    let last = w.len() - 1;
    let mut agree = 0u32;
    for i in 0..last {
        agree += (!(w[i] ^ x[i])).count_ones();
    }
    agree += (!(w[last] ^ x[last]) & tail_mask(nbits)).count_ones();
    2 * agree as i64 - nbits as i64
}

/// ±1 dot product restricted to the positions set in `valid`; positions
/// outside contribute zero (zero padding).
#[inline]
pub fn masked_dot_words(w: &[u64], x: &[u64], valid: &[u64]) -> i64 {
    let mut agree = 0u32;
    let mut n = 0u32;
    for ((a, b), v) in w.iter().zip(x).zip(valid) {
        agree += (!(a ^ b) & v).count_ones();
        n += v.count_ones();
    }
    2 * agree as i64 - n as i64
}

/// Σ_j w_j · b_j for sign weights `w` and a {0,1} plane `b`.
#[inline]
pub fn sign_plane_sum(w: &[u64], plane: &[u64]) -> i64 {
    let mut pos = 0u32;
    let mut all = 0u32;
    for (a, b) in w.iter().zip(plane) {
        pos += (a & b).count_ones();
        all += b.count_ones();
    }
    2 * pos as i64 - all as i64
}

/// Positions to flip in a [`BitMatrix`] of the same shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitMask(BitMatrix);

impl BitMask {
    pub fn none(rows: usize, cols: usize) -> Self {
        Self(BitMatrix::zeros(rows, cols))
    }

    pub fn all(rows: usize, cols: usize) -> Self {
        Self(BitMatrix::ones(rows, cols))
    }

    pub fn from_matrix(bits: BitMatrix) -> Self {
        Self(bits)
    }

    pub fn bits(&self) -> &BitMatrix {
        &self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows
    }

    pub fn cols(&self) -> usize {
        self.0.cols
    }

    pub fn count(&self) -> u64 {
        self.0.count_ones()
    }

    pub(crate) fn bits_mut(&mut self) -> &mut BitMatrix {
        &mut self.0
    }
}

/// Flips every bit of `m` selected by `mask`.
pub fn apply_mask_xor(m: &BitMatrix, mask: &BitMask) -> Result<BitMatrix, BitError> {
    let mut out = m.clone();
    apply_mask_xor_in_place(&mut out, mask)?;
    Ok(out)
}

pub fn apply_mask_xor_in_place(m: &mut BitMatrix, mask: &BitMask) -> Result<(), BitError> {
    m.same_shape(&mask.0)?;
    for (w, k) in m.words.iter_mut().zip(&mask.0.words) {
        *w ^= k;
    }
    Ok(())
}
