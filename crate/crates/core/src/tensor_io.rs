//! Raw tensor interchange.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size        | content                              |
//! |--------|-------------|--------------------------------------|
//! | 0      | 8           | magic `b"CPTNSR01"`                  |
//! | 8      | 4           | rank `r` (u32)                       |
//! | 12     | 4·r         | dims, outermost first (u32 each)     |
//! | 12+4r  | 4·Πdims     | values, row-major, IEEE-754 float32  |
//!
//! Images are rank 3 `[H, W, C]`; style states and logits travel flat (rank 1).

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 8] = b"CPTNSR01";

/// Encodes `values` with the given shape. Values are narrowed to f32.
pub fn encode_tensor(shape: &[usize], values: &[f64]) -> Result<Vec<u8>> {
    let count: usize = shape.iter().product();
    if count != values.len() {
        return Err(Error::Encode(format!(
            "shape {shape:?} holds {count} values but {} were given",
            values.len()
        )));
    }
    let mut out = Vec::with_capacity(12 + 4 * shape.len() + 4 * count);
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::Encode(format!("dimension {d} too large")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Decodes one tensor from the front of `bytes`, returning it and the number of bytes consumed.
pub fn decode_tensor_prefix(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>, usize)> {
    let err = |reason: &str| Error::Decode {
        layer: None,
        reason: reason.to_string(),
    };
    if bytes.len() < 12 {
        return Err(err("tensor header truncated"));
    }
    if &bytes[..8] != TENSOR_MAGIC {
        return Err(err("bad tensor magic"));
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let dims_end = 12 + 4 * rank;
    if bytes.len() < dims_end {
        return Err(err("tensor dims truncated"));
    }
    let shape: Vec<usize> = bytes[12..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| err("tensor element count overflows"))?;
    let end = dims_end + 4 * count;
    if bytes.len() < end {
        return Err(err("tensor payload truncated"));
    }
    let values = bytes[dims_end..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((shape, values, end))
}

/// Decodes a buffer holding exactly one tensor.
pub fn decode_tensor(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    let (shape, values, used) = decode_tensor_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::Decode {
            layer: None,
            reason: format!("{} trailing bytes after tensor", bytes.len() - used),
        });
    }
    Ok((shape, values))
}

/// Decodes a concatenation of tensors.
pub fn decode_tensor_list(mut bytes: &[u8]) -> Result<Vec<(Vec<usize>, Vec<f32>)>> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let (shape, values, used) = decode_tensor_prefix(bytes)?;
        out.push((shape, values));
        bytes = &bytes[used..];
    }
    Ok(out)
}
