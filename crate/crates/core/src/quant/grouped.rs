use super::symmetric::{dequantize, quantize_symmetric};
use crate::error::{Error, Result};

/// Row-major matrix quantized in contiguous row groups, one scale per group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedQuant {
    pub codes: Vec<i8>,
    /// Scale of group `g` of row `r` at `r * groups_per_row + g`.
    pub scales: Vec<f32>,
    pub bits: u8,
    pub group_size: usize,
    pub rows: usize,
    pub cols: usize,
}

impl GroupedQuant {
    pub fn groups_per_row(&self) -> usize {
        self.cols.div_ceil(self.group_size)
    }

    pub fn dequantize(&self) -> Result<Vec<f32>> {
        let gpr = self.groups_per_row();
        if self.scales.len() != gpr * self.rows || self.codes.len() != self.rows * self.cols {
            return Err(Error::corrupt(
                "grouped quant",
                format!(
                    "{} scales / {} codes for {}x{} with group {}",
                    self.scales.len(),
                    self.codes.len(),
                    self.rows,
                    self.cols,
                    self.group_size
                ),
            ));
        }
        let mut out = Vec::with_capacity(self.codes.len());
        for r in 0..self.rows {
            let row = &self.codes[r * self.cols..(r + 1) * self.cols];
            for (g, chunk) in row.chunks(self.group_size).enumerate() {
                out.extend(dequantize(chunk, self.scales[r * gpr + g], self.bits)?);
            }
        }
        Ok(out)
    }
}

/// Splits each row into groups of `group_size` consecutive elements (the last
/// group may be shorter) and quantizes each group independently.
pub fn quantize_grouped(m: &[f32], rows: usize, cols: usize, bits: u8, group_size: usize, eps: f64) -> Result<GroupedQuant> {
    if group_size == 0 {
        return Err(Error::config("group_size must be positive"));
    }
    if rows == 0 || cols == 0 || m.is_empty() {
        return Err(Error::data("cannot quantize an empty matrix"));
    }
    if m.len() != rows * cols {
        return Err(Error::config(format!("matrix has {} elements, expected {rows}x{cols}", m.len())));
    }
    let mut codes = Vec::with_capacity(m.len());
    let mut scales = Vec::with_capacity(rows * cols.div_ceil(group_size));
    for r in 0..rows {
        for chunk in m[r * cols..(r + 1) * cols].chunks(group_size) {
            let (c, s) = quantize_symmetric(chunk, bits, eps)?;
            codes.extend(c);
            scales.push(s);
        }
    }
    Ok(GroupedQuant {
        codes,
        scales,
        bits,
        group_size,
        rows,
        cols,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{fake_quant, symmetric_scale};

    #[test]
    fn two_by_four_with_pairs() {
        let m = [1.0f32, -0.5, 0.25, 0.125, -2.0, 1.0, 0.0, 0.0];
        let q = quantize_grouped(&m, 2, 4, 3, 2, 0.01).unwrap();
        assert_eq!(q.scales.len(), 4);
        // scalar oracle per group: max|.| / 4
        assert_eq!(q.scales, vec![0.25, 0.0625, 0.5, 0.0]);
        let y = q.dequantize().unwrap();
        let mut expected = Vec::new();
        for pair in m.chunks(2) {
            expected.extend(fake_quant(pair, 3, 0.01).unwrap());
        }
        assert_eq!(y, expected);
    }

    #[test]
    fn full_row_group_is_per_row_quantization() {
        let m: Vec<f32> = (0..12).map(|i| ((i * 7 % 5) as f32 - 2.0) * 0.3).collect();
        let q = quantize_grouped(&m, 3, 4, 3, 4, 0.01).unwrap();
        for r in 0..3 {
            let row = &m[r * 4..(r + 1) * 4];
            assert_eq!(q.scales[r], symmetric_scale(row, 3));
            assert_eq!(&q.dequantize().unwrap()[r * 4..(r + 1) * 4], fake_quant(row, 3, 0.01).unwrap().as_slice());
        }
    }

    #[test]
    fn unit_groups_land_on_their_own_extreme() {
        let m = [0.8f32, -0.3, 1.7, -2.2, 0.05, 0.0];
        for bits in 2..=4u8 {
            let q = quantize_grouped(&m, 2, 3, bits, 1, 0.01).unwrap();
            let y = q.dequantize().unwrap();
            let half = (1 << (bits - 1)) as f32;
            for (a, b) in m.iter().zip(&y) {
                assert!((a - b).abs() <= 0.5 * a.abs() / half + 1e-7);
            }
        }
    }

    #[test]
    fn partial_final_group_gets_its_own_scale() {
        let m = [1.0f32, 1.0, 1.0, 8.0, 0.5];
        let q = quantize_grouped(&m, 1, 5, 3, 2, 0.01).unwrap();
        assert_eq!(q.groups_per_row(), 3);
        assert_eq!(q.scales, vec![0.25, 2.0, 0.125]);
        assert!(quantize_grouped(&m, 1, 5, 3, 0, 0.01).is_err());
    }
}
