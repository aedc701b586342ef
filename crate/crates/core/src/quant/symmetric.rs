use super::round_half_away;
use crate::error::{Error, Result};

/// Inclusive code range `[-2^(k-1), 2^(k-1) - 1]`.
pub fn code_range(bits: u8) -> (i32, i32) {
    let half = 1i32 << (bits - 1);
    (-half, half - 1)
}

fn check_input(x: &[f32], bits: u8, eps: f64) -> Result<()> {
    if x.is_empty() {
        return Err(Error::data("cannot quantize an empty array"));
    }
    if !(2..=8).contains(&bits) {
        return Err(Error::config(format!("unsupported bit width {bits}")));
    }
    if !(eps > 0.0 && eps < 0.5) {
        return Err(Error::config(format!("clip epsilon must be in (0, 0.5), got {eps}")));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::numeric("quantize_symmetric", format!("non-finite input at {i}")));
    }
    Ok(())
}

/// `max|x| / 2^(k-1)`; zero for an all-zero input.
pub fn symmetric_scale(x: &[f32], bits: u8) -> f32 {
    let m = x.iter().fold(0.0f32, |a, v| a.max(v.abs()));
    m / (1u32 << (bits - 1)) as f32
}

/// Quantizes against a given scale. A zero scale maps everything to code 0.
pub fn quantize_with_scale(x: &[f32], scale: f32, bits: u8, eps: f64) -> Result<Vec<i8>> {
    check_input(x, bits, eps)?;
    if scale == 0.0 {
        return Ok(vec![0; x.len()]);
    }
    let half = (1u32 << (bits - 1)) as f32;
    let lo = -half + eps as f32;
    let hi = half - eps as f32;
    Ok(x.iter()
        .map(|&v| round_half_away((v / scale).clamp(lo, hi) - 0.5) as i8)
        .collect())
}

/// Full-range symmetric MinMax quantization of one group.
pub fn quantize_symmetric(x: &[f32], bits: u8, eps: f64) -> Result<(Vec<i8>, f32)> {
    check_input(x, bits, eps)?;
    let s = symmetric_scale(x, bits);
    Ok((quantize_with_scale(x, s, bits, eps)?, s))
}

/// `S * (code + 0.5)`; fails on codes outside the `bits` range.
pub fn dequantize(codes: &[i8], scale: f32, bits: u8) -> Result<Vec<f32>> {
    let (lo, hi) = code_range(bits);
    if let Some(c) = codes.iter().find(|&&c| (c as i32) < lo || (c as i32) > hi) {
        return Err(Error::corrupt("codes", format!("code {c} outside [{lo}, {hi}] for {bits}-bit")));
    }
    Ok(codes.iter().map(|&c| scale * (c as f32 + 0.5)).collect())
}

/// `dequantize(quantize_symmetric(x))`.
pub fn fake_quant(x: &[f32], bits: u8, eps: f64) -> Result<Vec<f32>> {
    let (codes, s) = quantize_symmetric(x, bits, eps)?;
    dequantize(&codes, s, bits)
}

/// Quantize-dequantize on a fixed grid.
pub fn fake_quant_with_scale(x: &[f32], scale: f32, bits: u8, eps: f64) -> Result<Vec<f32>> {
    let codes = quantize_with_scale(x, scale, bits, eps)?;
    dequantize(&codes, scale, bits)
}
