//! Two's-complement storage of quantized weight codes and the bit-flip
//! primitive.
//!
//! Bit vectors are always ordered most-significant-bit first:
//! `bits[0]` is `b_{n_q-1}` (the sign bit, weighted `-2^(n_q-1)`), and
//! `bits[n_q-1]` is `b_0`. A [`BitAddress`] names a bit by its position
//! `i` in that sense, so `bit == n_q - 1` is the MSB.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 16;

pub fn check_width(n_q: u32) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&n_q) {
        Ok(())
    } else {
        Err(Error::BitWidth(n_q))
    }
}

/// Inclusive signed range `[-2^(n_q-1), 2^(n_q-1)-1]`.
pub fn code_range(n_q: u32) -> (i32, i32) {
    let half = 1i32 << (n_q - 1);
    (-half, half - 1)
}

/// Place value of bit `i`: `-2^(n_q-1)` for the MSB, `2^i` otherwise.
pub fn bit_coefficient(i: u32, n_q: u32) -> f64 {
    if i == n_q - 1 {
        -((1u64 << i) as f64)
    } else {
        (1u64 << i) as f64
    }
}

pub fn encode(code: i32, n_q: u32) -> Result<Vec<bool>> {
    check_width(n_q)?;
    let (lo, hi) = code_range(n_q);
    if code < lo || code > hi {
        return Err(Error::CodeOutOfRange {
            code: code as i64,
            n_q,
        });
    }
    let raw = code as u32;
    Ok((0..n_q).rev().map(|i| (raw >> i) & 1 == 1).collect())
}

/// Evaluates `-2^(n-1) b_{n-1} + sum 2^i b_i` over an MSB-first vector.
pub fn decode(bits: &[bool]) -> i32 {
    let n = bits.len() as u32;
    bits.iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(pos, _)| {
            let i = n - 1 - pos as u32;
            if i == n - 1 {
                -(1i32 << i)
            } else {
                1i32 << i
            }
        })
        .sum()
}

/// Value of bit `i` of an in-range code.
#[inline]
pub fn code_bit(code: i32, i: u32) -> bool {
    (code as u32 >> i) & 1 == 1
}

/// Toggles bit `i` of an `n_q`-bit code and re-reads it as signed.
#[inline]
pub fn flip_code_bit(code: i32, i: u32, n_q: u32) -> i32 {
    let mask = if n_q == 32 {
        u32::MAX
    } else {
        (1u32 << n_q) - 1
    };
    let raw = (code as u32 ^ (1u32 << i)) & mask;
    let shift = 32 - n_q;
    ((raw << shift) as i32) >> shift
}

/// `dL/db_i = dL/dw * delta_w * coefficient(i)`, MSB first.
pub fn bit_gradients(weight_grad: f64, delta_w: f64, n_q: u32) -> Vec<f64> {
    (0..n_q)
        .rev()
        .map(|i| weight_grad * delta_w * bit_coefficient(i, n_q))
        .collect()
}

/// Sign of a bit gradient. Zero maps to `Pos`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sign {
    Pos,
    Neg,
}

impl Sign {
    pub fn of(grad: f64) -> Self {
        if grad < 0.0 {
            Sign::Neg
        } else {
            Sign::Pos
        }
    }

    /// `sign/2 + 0.5`: 1 for `Pos`, 0 for `Neg`.
    fn as_bit(self) -> bool {
        matches!(self, Sign::Pos)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlipMask(pub Vec<bool>);

impl FlipMask {
    pub fn is_empty(&self) -> bool {
        !self.0.iter().any(|&m| m)
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&m| m).count()
    }
}

/// Whether the attack flip of a single bit changes it.
#[inline]
pub fn flip_is_effective(bit: bool, sign: Sign) -> bool {
    bit ^ sign.as_bit()
}

/// Masked flip: `m = b xor s`, `b' = b xor m`, with `s` the sign bit of the
/// gradient. Bits already at their ascent value stay put.
pub fn bfa_flip(bits: &[bool], signs: &[Sign]) -> (Vec<bool>, FlipMask) {
    assert_eq!(bits.len(), signs.len(), "one sign per bit");
    let mask: Vec<bool> = bits
        .iter()
        .zip(signs)
        .map(|(&b, &s)| flip_is_effective(b, s))
        .collect();
    let flipped = bits.iter().zip(&mask).map(|(&b, &m)| b ^ m).collect();
    (flipped, FlipMask(mask))
}

/// Coordinate of one stored bit: weighted-layer index, flat weight offset,
/// and bit position (`n_q - 1` is the MSB).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BitAddress {
    pub layer: usize,
    pub weight: usize,
    pub bit: u32,
}

impl fmt::Display for BitAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.layer, self.weight, self.bit)
    }
}

impl std::str::FromStr for BitAddress {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::Config(format!("bad bit address {s:?}"));
        if parts.len() != 3 {
            return Err(bad());
        }
        Ok(Self {
            layer: parts[0].parse().map_err(|_| bad())?,
            weight: parts[1].parse().map_err(|_| bad())?,
            bit: parts[2].parse().map_err(|_| bad())?,
        })
    }
}

/// Packed two's-complement bits of one layer, MSB first within each weight:
/// bit `i` of weight `k` lives at flat offset `k * n_q + (n_q - 1 - i)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitPlane {
    n_q: u32,
    num_weights: usize,
    words: Vec<u64>,
}

impl BitPlane {
    pub fn from_codes(codes: &[i32], n_q: u32) -> Result<Self> {
        check_width(n_q)?;
        let total = codes.len() * n_q as usize;
        let mut plane = Self {
            n_q,
            num_weights: codes.len(),
            words: vec![0; total.div_ceil(64)],
        };
        for (k, &c) in codes.iter().enumerate() {
            for (pos, b) in encode(c, n_q)?.into_iter().enumerate() {
                if b {
                    let off = k * n_q as usize + pos;
                    plane.words[off / 64] |= 1 << (off % 64);
                }
            }
        }
        Ok(plane)
    }

    pub fn n_q(&self) -> u32 {
        self.n_q
    }

    pub fn num_weights(&self) -> usize {
        self.num_weights
    }

    pub fn bit_count(&self) -> usize {
        self.num_weights * self.n_q as usize
    }

    #[inline]
    pub fn offset(&self, weight: usize, bit: u32) -> usize {
        weight * self.n_q as usize + (self.n_q - 1 - bit) as usize
    }

    pub fn get(&self, weight: usize, bit: u32) -> bool {
        let off = self.offset(weight, bit);
        self.words[off / 64] >> (off % 64) & 1 == 1
    }

    pub fn flip(&mut self, weight: usize, bit: u32) {
        let off = self.offset(weight, bit);
        self.words[off / 64] ^= 1 << (off % 64);
    }

    /// MSB-first bits of one weight.
    pub fn weight_bits(&self, weight: usize) -> Vec<bool> {
        (0..self.n_q).rev().map(|i| self.get(weight, i)).collect()
    }

    pub fn codes(&self) -> Vec<i32> {
        (0..self.num_weights)
            .map(|k| decode(&self.weight_bits(k)))
            .collect()
    }

    pub fn hamming(&self, other: &BitPlane) -> Result<u64> {
        if self.n_q != other.n_q || self.num_weights != other.num_weights {
            return Err(Error::Topology(format!(
                "bit planes {}x{} vs {}x{}",
                self.num_weights, self.n_q, other.num_weights, other.n_q
            )));
        }
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones() as u64)
            .sum())
    }

    pub fn update_digest(&self, hasher: &mut Sha256) {
        hasher.update(self.n_q.to_le_bytes());
        hasher.update((self.num_weights as u64).to_le_bytes());
        for w in &self.words {
            hasher.update(w.to_le_bytes());
        }
    }
}
