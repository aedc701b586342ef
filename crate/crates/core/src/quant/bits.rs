use super::QuantConfig;
use crate::error::{Error, Result};

/// Effective storage bits per parameter of a `rows × cols` matrix:
///
/// * `k` bits per code,
/// * one 16-bit scale per group: `16 / B`,
/// * cherry values stored at 16 instead of `k` bits: `fraction * (16 - k)`,
/// * one 16-bit index per cherry column,
/// * with the scale trick, one 16-bit scale per column: `16 / rows`.
pub fn avg_bits(config: &QuantConfig, rows: usize, cols: usize) -> Result<f64> {
    config.validate()?;
    if rows == 0 || cols == 0 {
        return Err(Error::config(format!("invalid shape {rows}x{cols}")));
    }
    let k = config.bits as f64;
    let n = (rows * cols) as f64;
    let mut bits = k + 16.0 / config.group_size as f64;
    bits += config.cherry_fraction * (16.0 - k);
    bits += 16.0 * config.cherry_count(cols) as f64 / n;
    if config.scale_trick {
        bits += 16.0 / rows as f64;
    }
    Ok(bits)
}
