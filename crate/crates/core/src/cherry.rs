//! Cherry column selection and mixed-precision matrices.
//!
//! A [`MixedMatrix`] keeps a handful of whole columns (the cherries) as 16-bit
//! floats and group-quantizes the remaining columns after compacting them, so
//! groups never straddle a cherry column. Column indices are stored as `u16`.

use half::f16;

use crate::error::{Error, Result};
use crate::impact::ImpactMap;
use crate::quant::{code_range, quantize_with_scale, symmetric_scale, GroupedQuant, QuantConfig};

/// Mean impact of each column over all rows.
pub fn column_scores(values: &[f32], rows: usize, cols: usize) -> Result<Vec<f64>> {
    if rows == 0 || cols == 0 || values.len() != rows * cols {
        return Err(Error::config(format!("{} values for a {rows}x{cols} matrix", values.len())));
    }
    let mut sums = vec![0.0f64; cols];
    for r in 0..rows {
        for (s, &v) in sums.iter_mut().zip(&values[r * cols..(r + 1) * cols]) {
            *s += v as f64;
        }
    }
    Ok(sums.into_iter().map(|s| s / rows as f64).collect())
}

/// The `k` highest-scoring columns, returned in ascending index order. Ties
/// go to the lower column index, so the selection for `k` is always a subset
/// of the selection for `k + 1`.
pub fn top_columns(scores: &[f64], k: usize) -> Vec<u16> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut picked: Vec<u16> = order.into_iter().take(k).map(|c| c as u16).collect();
    picked.sort_unstable();
    picked
}

/// Top `max(1, round(cols * fraction))` columns by mean impact.
pub fn select_cherry_columns(impact: &ImpactMap, fraction: f64) -> Result<Vec<u16>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!("cherry fraction must be in (0, 1), got {fraction}")));
    }
    let k = ((impact.cols as f64 * fraction).round() as usize).max(1);
    select_k_columns(impact, k)
}

/// Top `k` columns by mean impact; `k` must leave at least one normal column.
pub fn select_k_columns(impact: &ImpactMap, k: usize) -> Result<Vec<u16>> {
    if k >= impact.cols {
        return Err(Error::config(format!(
            "{k} cherry columns leave nothing to quantize in {} ({} columns)",
            impact.name, impact.cols
        )));
    }
    let scores = column_scores(&impact.values, impact.rows, impact.cols)?;
    Ok(top_columns(&scores, k))
}

/// Mixed-precision weight matrix (`rows × cols`, row-major when expanded).
#[derive(Debug, Clone, PartialEq)]
pub struct MixedMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Strictly increasing column indices of the 16-bit columns.
    pub cherry_indices: Vec<u16>,
    /// `rows × cherry_indices.len()`, row-major.
    pub cherry_values: Vec<f16>,
    /// Group quantization of the compacted `rows × (cols - cherries)` normal
    /// submatrix. Its scales are always representable in 16 bits.
    pub normal: GroupedQuant,
    /// Per-column factors `s` of `Q(w * s) / s`, one per column of the full
    /// matrix (entries for cherry columns are unused).
    pub trick_scales: Option<Vec<f16>>,
}

fn f16_round(x: f32) -> f32 {
    f16::from_f32(x).to_f32()
}

/// Normal column indices, in order.
fn normal_columns(cols: usize, cherries: &[u16]) -> Vec<usize> {
    let mut it = cherries.iter().peekable();
    (0..cols)
        .filter(|&c| {
            if it.peek().is_some_and(|&&i| i as usize == c) {
                it.next();
                false
            } else {
                true
            }
        })
        .collect()
}

fn check_indices(indices: &[u16], cols: usize, what: &str) -> Result<()> {
    for w in indices.windows(2) {
        if w[0] >= w[1] {
            let detail = if w[0] == w[1] {
                format!("duplicate cherry column {}", w[0])
            } else {
                format!("cherry columns not sorted ({} before {})", w[0], w[1])
            };
            return Err(if what == "config" {
                Error::config(detail)
            } else {
                Error::corrupt(what, detail)
            });
        }
    }
    if let Some(&bad) = indices.iter().find(|&&i| i as usize >= cols) {
        let detail = format!("cherry column {bad} out of range for {cols} columns");
        return Err(if what == "config" {
            Error::config(detail)
        } else {
            Error::corrupt(what, detail)
        });
    }
    if indices.len() >= cols {
        return Err(Error::config(format!("{} cherry columns leave no normal column", indices.len())));
    }
    Ok(())
}

fn rounded_trick(trick: Option<&[f32]>, cols: usize) -> Result<Option<Vec<f16>>> {
    let Some(s) = trick else { return Ok(None) };
    if s.len() != cols {
        return Err(Error::config(format!("{} trick scales for {cols} columns", s.len())));
    }
    let r: Vec<f16> = s.iter().map(|&v| f16::from_f32(v)).collect();
    if let Some(j) = r.iter().position(|v| !(v.to_f32() > 0.0 && v.is_finite())) {
        return Err(Error::config(format!("trick scale of column {j} is not a positive 16-bit value: {}", s[j])));
    }
    Ok(Some(r))
}

/// Compacted normal submatrix, multiplied by the trick scales when present.
fn gather_normal(w: &[f32], rows: usize, cols: usize, normal: &[usize], trick: Option<&[f16]>) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows * normal.len());
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        match trick {
            Some(s) => out.extend(normal.iter().map(|&c| row[c] * s[c].to_f32())),
            None => out.extend(normal.iter().map(|&c| row[c])),
        }
    }
    out
}

fn check_matrix(w: &[f32], rows: usize, cols: usize) -> Result<()> {
    if rows == 0 || cols == 0 || w.len() != rows * cols {
        return Err(Error::config(format!("{} weights for a {rows}x{cols} matrix", w.len())));
    }
    if let Some(i) = w.iter().position(|v| !v.is_finite()) {
        return Err(Error::numeric("split_weights", format!("non-finite weight at {i}")));
    }
    Ok(())
}

/// Splits `w` into 16-bit cherry columns and a group-quantized remainder.
///
/// Group scales are rounded to 16-bit floats before the codes are computed,
/// so the stored scales and codes are mutually consistent.
pub fn split_weights(
    w: &[f32],
    rows: usize,
    cols: usize,
    cherry_indices: &[u16],
    config: &QuantConfig,
    trick_scales: Option<&[f32]>,
) -> Result<MixedMatrix> {
    config.validate()?;
    check_matrix(w, rows, cols)?;
    check_indices(cherry_indices, cols, "config")?;
    let trick = rounded_trick(trick_scales, cols)?;
    let normal_cols = normal_columns(cols, cherry_indices);
    let m = gather_normal(w, rows, cols, &normal_cols, trick.as_deref());
    let nc = normal_cols.len();
    let (bits, b) = (config.bits, config.group_size);
    let mut codes = Vec::with_capacity(m.len());
    let mut scales = Vec::with_capacity(rows * nc.div_ceil(b));
    for r in 0..rows {
        for chunk in m[r * nc..(r + 1) * nc].chunks(b) {
            let s = f16_round(symmetric_scale(chunk, bits));
            codes.extend(quantize_with_scale(chunk, s, bits, config.clip_eps)?);
            scales.push(s);
        }
    }
    Ok(MixedMatrix {
        rows,
        cols,
        cherry_indices: cherry_indices.to_vec(),
        cherry_values: gather_cherries(w, rows, cols, cherry_indices),
        normal: GroupedQuant {
            codes,
            scales,
            bits,
            group_size: b,
            rows,
            cols: nc,
        },
        trick_scales: trick,
    })
}

fn gather_cherries(w: &[f32], rows: usize, cols: usize, idx: &[u16]) -> Vec<f16> {
    let mut out = Vec::with_capacity(rows * idx.len());
    for r in 0..rows {
        out.extend(idx.iter().map(|&c| f16::from_f32(w[r * cols + c as usize])));
    }
    out
}

impl MixedMatrix {
    pub fn normal_cols(&self) -> usize {
        self.cols - self.cherry_indices.len()
    }

    fn validate(&self) -> Result<()> {
        check_indices(&self.cherry_indices, self.cols, "cherry indices")?;
        let n = self.cherry_indices.len();
        if self.cherry_values.len() != self.rows * n {
            return Err(Error::corrupt(
                "cherry values",
                format!("{} values for {} rows x {n} columns", self.cherry_values.len(), self.rows),
            ));
        }
        if self.normal.rows != self.rows || self.normal.cols != self.normal_cols() {
            return Err(Error::corrupt(
                "normal codes",
                format!(
                    "normal block {}x{} inside a {}x{} matrix with {n} cherries",
                    self.normal.rows, self.normal.cols, self.rows, self.cols
                ),
            ));
        }
        if let Some(s) = &self.trick_scales {
            if s.len() != self.cols || s.iter().any(|v| !(v.to_f32() > 0.0 && v.is_finite())) {
                return Err(Error::corrupt("trick scales", "expected one positive scale per column"));
            }
        }
        Ok(())
    }

    /// Expands to a dense `rows × cols` matrix: dequantized normal columns
    /// (divided by their trick scale, if any) with the cherry columns
    /// scattered back in unchanged.
    pub fn reconstruct(&self) -> Result<Vec<f32>> {
        self.validate()?;
        let normal = self.normal.dequantize()?;
        let ncols = normal_columns(self.cols, &self.cherry_indices);
        let nc = ncols.len();
        let k = self.cherry_indices.len();
        let mut out = vec![0.0f32; self.rows * self.cols];
        for r in 0..self.rows {
            let row = &mut out[r * self.cols..(r + 1) * self.cols];
            let src = &normal[r * nc..(r + 1) * nc];
            match &self.trick_scales {
                Some(s) => {
                    for (&c, &v) in ncols.iter().zip(src) {
                        row[c] = v / s[c].to_f32();
                    }
                }
                None => {
                    for (&c, &v) in ncols.iter().zip(src) {
                        row[c] = v;
                    }
                }
            }
            for (j, &c) in self.cherry_indices.iter().enumerate() {
                row[c as usize] = self.cherry_values[r * k + j].to_f32();
            }
        }
        Ok(out)
    }

    /// Re-encodes `w` on this matrix's fixed grid: same cherry columns, same
    /// group scales and trick scales; only codes and cherry values change.
    pub fn requantize(&self, w: &[f32], clip_eps: f64) -> Result<MixedMatrix> {
        self.validate()?;
        check_matrix(w, self.rows, self.cols)?;
        let ncols = normal_columns(self.cols, &self.cherry_indices);
        let m = gather_normal(w, self.rows, self.cols, &ncols, self.trick_scales.as_deref());
        let nc = ncols.len();
        let gpr = self.normal.groups_per_row();
        let b = self.normal.group_size;
        let mut codes = Vec::with_capacity(m.len());
        for r in 0..self.rows {
            for (g, chunk) in m[r * nc..(r + 1) * nc].chunks(b).enumerate() {
                codes.extend(quantize_with_scale(chunk, self.normal.scales[r * gpr + g], self.normal.bits, clip_eps)?);
            }
        }
        Ok(MixedMatrix {
            cherry_values: gather_cherries(w, self.rows, self.cols, &self.cherry_indices),
            normal: GroupedQuant {
                codes,
                ..self.normal.clone()
            },
            ..self.clone()
        })
    }

    /// Exact storage cost in bits: codes, 16-bit group scales, 16-bit cherry
    /// values and indices, and 16-bit trick scales when present.
    pub fn storage_bits(&self) -> u64 {
        let k = self.cherry_indices.len() as u64;
        let rows = self.rows as u64;
        let mut bits = self.normal.codes.len() as u64 * self.normal.bits as u64;
        bits += 16 * self.normal.scales.len() as u64;
        bits += 16 * rows * k + 16 * k;
        if let Some(s) = &self.trick_scales {
            bits += 16 * s.len() as u64;
        }
        bits
    }

    pub fn bits_per_parameter(&self) -> f64 {
        self.storage_bits() as f64 / (self.rows * self.cols) as f64
    }
}

/// Values seen by a mixed-precision forward pass during training.
#[derive(Debug, Clone)]
pub struct MixedForward {
    /// Cherry columns at their full-precision latent value, normal columns
    /// fake-quantized exactly as they would be stored.
    pub values: Vec<f32>,
    /// `false` where a normal weight sits in the clip zone, i.e.
    /// `|w * s / S| > 2^(k-1) - eps` (used by the clipped straight-through
    /// variant). With MinMax scales only group extremes can land there.
    pub in_range: Vec<bool>,
}

/// `C ∪ Quant(N)` for one weight matrix.
pub fn mixed_forward(
    w: &[f32],
    rows: usize,
    cols: usize,
    cherry_indices: &[u16],
    config: &QuantConfig,
    trick_scales: Option<&[f32]>,
) -> Result<MixedForward> {
    let m = split_weights(w, rows, cols, cherry_indices, config, trick_scales)?;
    let mut values = m.reconstruct()?;
    let mut in_range = vec![true; w.len()];
    let ncols = normal_columns(cols, cherry_indices);
    let gpr = m.normal.groups_per_row();
    let limit = code_range(config.bits).1 as f32 + 1.0 - config.clip_eps as f32;
    for r in 0..rows {
        for (j, &c) in ncols.iter().enumerate() {
            let s = m.normal.scales[r * gpr + j / m.normal.group_size];
            let t = m.trick_scales.as_ref().map_or(1.0, |t| t[c].to_f32());
            let u = w[r * cols + c] * t;
            in_range[r * cols + c] = s == 0.0 || (u / s).abs() <= limit;
        }
        for &c in cherry_indices {
            values[r * cols + c as usize] = w[r * cols + c as usize];
        }
    }
    Ok(MixedForward { values, in_range })
}
