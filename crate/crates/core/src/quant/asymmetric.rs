use crate::error::{Error, Result};

/// Asymmetric min-max quantization: `2^k` levels spanning `[min(x), max(x)]`.
///
/// Returns `(codes, scale, zero_point)` with `x_hat = scale * code + zero_point`.
/// A constant input gets `scale = 0`, all codes 0 and `zero_point` equal to
/// the constant.
pub fn quantize_asymmetric(x: &[f32], bits: u8) -> Result<(Vec<u8>, f32, f32)> {
    if x.is_empty() {
        return Err(Error::data("cannot quantize an empty array"));
    }
    if !(1..=8).contains(&bits) {
        return Err(Error::config(format!("unsupported bit width {bits}")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("quantize_asymmetric", "non-finite input"));
    }
    let (lo, hi) = x
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let levels = ((1u32 << bits) - 1) as f32;
    let scale = (hi - lo) / levels;
    if scale == 0.0 {
        return Ok((vec![0; x.len()], 0.0, lo));
    }
    let codes = x
        .iter()
        .map(|&v| ((v - lo) / scale).round().clamp(0.0, levels) as u8)
        .collect();
    Ok((codes, scale, lo))
}

pub fn dequantize_asymmetric(codes: &[u8], scale: f32, zero_point: f32) -> Vec<f32> {
    codes.iter().map(|&c| scale * c as f32 + zero_point).collect()
}

pub fn fake_quant_asymmetric(x: &[f32], bits: u8) -> Result<Vec<f32>> {
    let (codes, s, z) = quantize_asymmetric(x, bits)?;
    Ok(dequantize_asymmetric(&codes, s, z))
}

/// Row-wise grouped asymmetric fake quantization of a `rows × cols` matrix.
pub fn fake_quant_asymmetric_grouped(m: &[f32], rows: usize, cols: usize, bits: u8, group_size: usize) -> Result<Vec<f32>> {
    if group_size == 0 {
        return Err(Error::config("group_size must be positive"));
    }
    if m.len() != rows * cols {
        return Err(Error::config(format!("matrix has {} elements, expected {rows}x{cols}", m.len())));
    }
    let mut out = Vec::with_capacity(m.len());
    for r in 0..rows {
        for chunk in m[r * cols..(r + 1) * cols].chunks(group_size) {
            out.extend(fake_quant_asymmetric(chunk, bits)?);
        }
    }
    Ok(out)
}
