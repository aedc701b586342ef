use super::symmetric::code_range;
use crate::error::{Error, Result};

/// Codes are offset to unsigned (`+2^(k-1)`) and written as one little-endian
/// bit stream, LSB first within each byte; the last byte is zero-padded.
pub const LAYOUT_LSB_STREAM: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBlob {
    pub bytes: Vec<u8>,
    pub bits: u8,
    pub len: usize,
    pub layout: u8,
}

impl PackedBlob {
    pub fn expected_bytes(len: usize, bits: u8) -> usize {
        (len * bits as usize).div_ceil(8)
    }
}

pub fn pack_codes(codes: &[i8], bits: u8) -> Result<PackedBlob> {
    if !(2..=8).contains(&bits) {
        return Err(Error::config(format!("unsupported bit width {bits}")));
    }
    let (lo, hi) = code_range(bits);
    let mut bytes = vec![0u8; PackedBlob::expected_bytes(codes.len(), bits)];
    for (i, &c) in codes.iter().enumerate() {
        let c = c as i32;
        if c < lo || c > hi {
            return Err(Error::config(format!("code {c} outside [{lo}, {hi}]")));
        }
        let u = (c - lo) as u32;
        let bit = i * bits as usize;
        let (byte, shift) = (bit / 8, bit % 8);
        let wide = u << shift;
        bytes[byte] |= wide as u8;
        if shift + bits as usize > 8 {
            bytes[byte + 1] |= (wide >> 8) as u8;
        }
    }
    Ok(PackedBlob {
        bytes,
        bits,
        len: codes.len(),
        layout: LAYOUT_LSB_STREAM,
    })
}

pub fn unpack_codes(blob: &PackedBlob) -> Result<Vec<i8>> {
    if blob.layout != LAYOUT_LSB_STREAM {
        return Err(Error::corrupt("packed codes", format!("unknown layout {}", blob.layout)));
    }
    if !(2..=8).contains(&blob.bits) {
        return Err(Error::corrupt("packed codes", format!("bit width {}", blob.bits)));
    }
    let expected = PackedBlob::expected_bytes(blob.len, blob.bits);
    if blob.bytes.len() != expected {
        return Err(Error::corrupt(
            "packed codes",
            format!("{} bytes for {} {}-bit codes, expected {expected}", blob.bytes.len(), blob.len, blob.bits),
        ));
    }
    let used = blob.len * blob.bits as usize;
    if used % 8 != 0 && blob.bytes[expected - 1] >> (used % 8) != 0 {
        return Err(Error::corrupt("packed codes", "non-zero padding bits"));
    }
    let (lo, _) = code_range(blob.bits);
    let mask = (1u32 << blob.bits) - 1;
    let mut out = Vec::with_capacity(blob.len);
    for i in 0..blob.len {
        let bit = i * blob.bits as usize;
        let (byte, shift) = (bit / 8, bit % 8);
        let mut word = blob.bytes[byte] as u32;
        if byte + 1 < blob.bytes.len() {
            word |= (blob.bytes[byte + 1] as u32) << 8;
        }
        let u = (word >> shift) & mask;
        out.push((u as i32 + lo) as i8);
    }
    Ok(out)
}
