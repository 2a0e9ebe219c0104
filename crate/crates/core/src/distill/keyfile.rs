//! Key files: an 8-byte little-endian bit count, then the bits packed
//! LSB-first into bytes.

use super::DistillError;
use crate::sim::Bits;

pub fn write_key(bits: &Bits) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + bits.len().div_ceil(8));
    out.extend_from_slice(&(bits.len() as u64).to_le_bytes());
    out.resize(8 + bits.len().div_ceil(8), 0);
    for (i, b) in bits.iter().by_vals().enumerate() {
        out[8 + i / 8] |= u8::from(b) << (i % 8);
    }
    out
}

pub fn read_key(bytes: &[u8]) -> Result<Bits, DistillError> {
    let bad = |m: String| DistillError::KeyFile(m);
    if bytes.len() < 8 {
        return Err(bad(format!("truncated header ({} bytes)", bytes.len())));
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let body = &bytes[8..];
    let n = usize::try_from(len).map_err(|_| bad(format!("length {len} too large")))?;
    if body.len() != n.div_ceil(8) {
        return Err(bad(format!("{n} bits need {} bytes, found {}", n.div_ceil(8), body.len())));
    }
    Ok((0..n).map(|i| body[i / 8] >> (i % 8) & 1 == 1).collect())
}
