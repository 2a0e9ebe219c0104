//! Seeded binary Toeplitz hashing over GF(2).
//!
//! An `m x n` Toeplitz matrix is fixed by `n + m - 1` seed bits `s`, with
//! entry `(i, j) = s[i - j + n - 1]`. Reversing the seed turns row `i` into
//! the contiguous window `u[m-1-i .. m-1-i+n]`, so each output bit is the
//! parity of a shifted word-wise AND.

use rand::Rng;

use super::{DistillError, KeyMaterial, Stage};
use crate::rng::stream;
use crate::sim::Bits;

pub const VERIFY_TAG_BITS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToeplitzHash {
    seed_bits: Bits,
    input_len: usize,
    output_len: usize,
}

impl ToeplitzHash {
    pub fn from_seed(input_len: usize, output_len: usize, seed: u64) -> Self {
        let len = (input_len + output_len).saturating_sub(1);
        let mut rng = stream(seed, "toeplitz");
        let words: Vec<u64> = (0..len.div_ceil(64)).map(|_| rng.random()).collect();
        let mut seed_bits = Bits::from_vec(words);
        seed_bits.truncate(len);
        ToeplitzHash {
            seed_bits,
            input_len,
            output_len,
        }
    }

    /// The `n x n` identity: only the main-diagonal seed bit is set.
    pub fn identity(n: usize) -> Self {
        let mut seed_bits = Bits::repeat(false, (2 * n).saturating_sub(1));
        if n > 0 {
            seed_bits.set(n - 1, true);
        }
        ToeplitzHash {
            seed_bits,
            input_len: n,
            output_len: n,
        }
    }

    pub fn entry(&self, row: usize, col: usize) -> bool {
        self.seed_bits[row + self.input_len - 1 - col]
    }

    pub fn output_len(&self) -> usize {
        self.output_len
    }

    pub fn apply(&self, input: &Bits) -> Bits {
        assert_eq!(input.len(), self.input_len, "input length does not match matrix");
        let n = self.input_len;
        let m = self.output_len;
        if m == 0 || n == 0 {
            return Bits::repeat(false, m);
        }
        let key_words = packed_words(input);
        let mut reversed = self.seed_bits.clone();
        reversed.reverse();
        let mut window = packed_words(&reversed);
        window.extend([0, 0]);

        let mut out = Bits::with_capacity(m);
        for i in 0..m {
            let offset = m - 1 - i;
            let (word, shift) = (offset / 64, offset % 64);
            let mut acc = 0u64;
            for (w, k) in key_words.iter().enumerate() {
                let lo = window[word + w];
                let row = if shift == 0 {
                    lo
                } else {
                    (lo >> shift) | (window[word + w + 1] << (64 - shift))
                };
                acc ^= row & k;
            }
            out.push(acc.count_ones() & 1 == 1);
        }
        out
    }
}

/// Words of `bits` with unused high bits of the last word cleared.
fn packed_words(bits: &Bits) -> Vec<u64> {
    let mut words = bits.as_raw_slice().to_vec();
    words.truncate(bits.len().div_ceil(64));
    let tail = bits.len() % 64;
    if tail != 0 {
        if let Some(last) = words.last_mut() {
            *last &= (1u64 << tail) - 1;
        }
    }
    words
}

/// 64-bit Toeplitz hash of a key; two distinct keys of equal length collide
/// with probability 2^-64 over the seed.
pub fn verification_tag(key: &Bits, seed: u64) -> u64 {
    let tag = ToeplitzHash::from_seed(key.len(), VERIFY_TAG_BITS, seed).apply(key);
    tag.iter()
        .by_vals()
        .enumerate()
        .fold(0u64, |acc, (i, b)| acc | (u64::from(b) << i))
}

/// Compares hash tags of both keys and charges the disclosed tag to each.
pub fn verify(a: &mut KeyMaterial, b: &mut KeyMaterial, seed: u64) -> bool {
    a.leakage_bits += VERIFY_TAG_BITS as u64;
    b.leakage_bits += VERIFY_TAG_BITS as u64;
    a.len() == b.len() && verification_tag(&a.bits, seed) == verification_tag(&b.bits, seed)
}

/// Compresses a reconciled key to `m` bits with a seeded Toeplitz matrix.
pub fn privacy_amplify(key: &KeyMaterial, m: u64, seed: u64) -> Result<KeyMaterial, DistillError> {
    if key.stage != Stage::Reconciled {
        return Err(DistillError::WrongStage {
            expected: Stage::Reconciled,
            found: key.stage,
        });
    }
    let out_len = usize::try_from(m)
        .ok()
        .filter(|&m| m <= key.len())
        .ok_or(DistillError::OutputTooLong {
            requested: m,
            available: key.len(),
        })?;
    let bits = ToeplitzHash::from_seed(key.len(), out_len, seed).apply(&key.bits);
    Ok(KeyMaterial {
        bits,
        stage: Stage::Final,
        leakage_bits: key.leakage_bits,
        session_id: key.session_id,
    })
}
