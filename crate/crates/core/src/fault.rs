//! Transient, symmetric, independent per-bit read errors.
//!
//! A read of a stored weight matrix returns the matrix XOR a freshly sampled
//! flip mask; the stored bits are never modified. Every mask is a pure
//! function of a [`StreamId`], which is derived from the run seed and the
//! coordinates of the read (trial or epoch, layer, sample or batch).

use crate::bitcore::{apply_mask_xor, BitError, BitMask, BitMatrix, WORD_BITS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FaultError {
    #[error("bit error probability {0} outside [0, 1]")]
    InvalidProbability(f64),
    #[error(transparent)]
    Bits(#[from] BitError),
}

/// Which stored bits the error model corrupts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FaultScope {
    /// Binary weight bits only.
    #[default]
    Weights,
    /// Binary weight bits and the binary input activations of every
    /// non-first layer. Integer first-layer inputs are never flipped.
    WeightsAndActivations,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultConfig {
    p: f64,
    pub seed: u64,
    pub scope: FaultScope,
}

impl FaultConfig {
    pub fn new(p: f64, seed: u64) -> Result<Self, FaultError> {
        check_probability(p)?;
        Ok(Self {
            p,
            seed,
            scope: FaultScope::Weights,
        })
    }

    pub fn with_scope(mut self, scope: FaultScope) -> Self {
        self.scope = scope;
        self
    }

    pub fn p(&self) -> f64 {
        self.p
    }
}

fn check_probability(p: f64) -> Result<(), FaultError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(FaultError::InvalidProbability(p))
    }
}

/// Read-site domains, kept apart so inference and training never share streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Inference = 0x1,
    Training = 0x2,
    Activation = 0x3,
    Shuffle = 0x4,
    Init = 0x5,
    Harness = 0x6,
}

/// Identifier of one independent random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamId(pub u64);

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl StreamId {
    /// `hash(seed, domain, round, layer, index)` where `round` is the trial
    /// (inference) or epoch (training) and `index` the sample or batch.
    pub fn derive(seed: u64, domain: Domain, round: u64, layer: u64, index: u64) -> Self {
        let mut h = splitmix64(seed);
        for part in [domain as u64, round, layer, index] {
            h = splitmix64(h ^ part);
        }
        StreamId(h)
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

/// Samples a mask whose logical bits are independently set with probability `p`.
pub fn sample_flip_mask<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    p: f64,
    rng: &mut R,
) -> Result<BitMask, FaultError> {
    check_probability(p)?;
    let mut mask = BitMask::none(rows, cols);
    let total = rows * cols;
    if p == 0.0 || total == 0 {
        return Ok(mask);
    }
    if p == 1.0 {
        return Ok(BitMask::all(rows, cols));
    }
    let bits = mask.bits_mut();
    let stride = bits.stride();
    let words = bits.words_mut();
    let mut set = |linear: usize| {
        let (r, c) = (linear / cols, linear % cols);
        words[r * stride + c / WORD_BITS] |= 1u64 << (c % WORD_BITS);
    };
    if p < 0.25 {
        // skip over runs of unflipped bits
        let gaps = Geometric::new(p).expect("p checked");
        let mut pos = 0usize;
        loop {
            let gap = gaps.sample(rng);
            pos = match usize::try_from(gap).ok().and_then(|g| pos.checked_add(g)) {
                Some(v) if v < total => v,
                _ => break,
            };
            set(pos);
            pos += 1;
        }
    } else {
        for linear in 0..total {
            if rng.gen_bool(p) {
                set(linear);
            }
        }
    }
    Ok(mask)
}

pub fn sample_flip_mask_for(
    shape: &BitMatrix,
    p: f64,
    stream: StreamId,
) -> Result<BitMask, FaultError> {
    sample_flip_mask(shape.rows(), shape.cols(), p, &mut stream.rng())
}

/// One transient read of `weights` through the error model.
pub fn corrupted_read(
    weights: &BitMatrix,
    cfg: &FaultConfig,
    stream: StreamId,
) -> Result<BitMatrix, FaultError> {
    if cfg.p == 0.0 {
        return Ok(weights.clone());
    }
    let mask = sample_flip_mask_for(weights, cfg.p, stream)?;
    Ok(apply_mask_xor(weights, &mask)?)
}
