//! Little-endian 32-bit blobs shared by the checkpoint and dataset
//! containers.

use crate::error::{Error, Result};

pub(crate) fn encode_f32(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values
        .into_iter()
        .flat_map(|v| (v as f32).to_le_bytes())
        .collect()
}

pub(crate) fn encode_i32(values: impl IntoIterator<Item = i32>) -> Vec<u8> {
    values.into_iter().flat_map(i32::to_le_bytes).collect()
}

fn words(bytes: &[u8], what: &str) -> Result<usize> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::CorruptContainer(format!(
            "{what} blob has {} bytes, not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes.len() / 4)
}

/// Reads `len` values starting at element `offset`.
pub(crate) fn decode_f32(bytes: &[u8], offset: usize, len: usize, what: &str) -> Result<Vec<f64>> {
    let n = words(bytes, what)?;
    check_range(n, offset, len, what)?;
    Ok(bytes[offset * 4..(offset + len) * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub(crate) fn decode_i32(bytes: &[u8], offset: usize, len: usize, what: &str) -> Result<Vec<i32>> {
    let n = words(bytes, what)?;
    check_range(n, offset, len, what)?;
    Ok(bytes[offset * 4..(offset + len) * 4]
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn check_range(n: usize, offset: usize, len: usize, what: &str) -> Result<()> {
    match offset.checked_add(len) {
        Some(end) if end <= n => Ok(()),
        _ => Err(Error::CorruptContainer(format!(
            "{what}: range {offset}+{len} exceeds blob of {n} values"
        ))),
    }
}

/// Rounds to the nearest value representable in the blob format.
pub fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}
