//! INT4 quantization schemes and neuron-bundle byte accounting.
//!
//! Three schemes are compared:
//! - `PerChannel`: one symmetric fp16 scale per matrix row.
//! - `Group32`: one (scale, min) fp16 pair per 32 consecutive weights in
//!   a row; codes are unsigned 4-bit offsets from the group minimum.
//! - `Mixed`: per-row symmetric INT4 with the largest-magnitude fraction
//!   of each row preserved as INT8 outliers under a separate scale.
//!
//! Packed binary layout (documented for fixture diffs): rows are
//! serialized in order; within a row each group contributes its code
//! nibbles little-endian (element `2k` in the low nibble of byte `k`)
//! followed by the fp16 scale and fp16 min, both little-endian. Signed
//! codes are stored as the low 4 bits of their two's complement.

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Dtype;

pub const GROUP_SIZE: usize = 32;
/// Flash read granularity; bundle strides are aligned to this.
pub const ALIGN_BYTES: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    PerChannel,
    Group32,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outlier {
    pub row: u32,
    pub col: u32,
    pub value: i8,
    /// fp16 bits of the per-row outlier scale.
    pub scale: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    pub scheme: Scheme,
    pub rows: usize,
    pub cols: usize,
    /// 4-bit codes, two per byte, row-major.
    pub packed: Vec<u8>,
    /// fp16 bits: one per row (`PerChannel`, `Mixed`) or one per group
    /// (`Group32`).
    pub scales: Vec<u16>,
    /// fp16 bits of per-group minima (`Group32` only).
    pub mins: Vec<u16>,
    /// `Mixed` only; positions here carry a zero INT4 code.
    pub outliers: Vec<Outlier>,
}

fn row_bytes(cols: usize) -> usize {
    cols.div_ceil(2)
}

fn pack_code(packed: &mut [u8], idx: usize, code: i8) {
    let nibble = (code as u8) & 0x0f;
    if idx % 2 == 0 {
        packed[idx / 2] = (packed[idx / 2] & 0xf0) | nibble;
    } else {
        packed[idx / 2] = (packed[idx / 2] & 0x0f) | (nibble << 4);
    }
}

fn unpack_code(packed: &[u8], idx: usize) -> i8 {
    let nibble = if idx % 2 == 0 { packed[idx / 2] & 0x0f } else { packed[idx / 2] >> 4 };
    // Sign-extend the 4-bit value.
    ((nibble << 4) as i8) >> 4
}

fn unpack_unsigned(packed: &[u8], idx: usize) -> u8 {
    if idx % 2 == 0 {
        packed[idx / 2] & 0x0f
    } else {
        packed[idx / 2] >> 4
    }
}

/// fp16-rounds `v`, bumping to the next representable value in
/// `direction` when rounding moved against it. Keeps stored scales large
/// enough (and minima small enough) that the per-element error bound
/// survives fp16 storage.
fn f16_round_directed(v: f32, up: bool) -> u16 {
    let h = f16::from_f32(v);
    let back = h.to_f32();
    if (up && back < v) || (!up && back > v) {
        let bits = h.to_bits();
        // Step one ulp away from zero or toward negative infinity as
        // needed; f16 bit patterns are monotone within a sign.
        let stepped = if up == (back >= 0.0) { bits + 1 } else { bits - 1 };
        f16::from_bits(stepped).to_bits()
    } else {
        h.to_bits()
    }
}

pub fn quantize(
    data: &[f32],
    rows: usize,
    cols: usize,
    scheme: Scheme,
    outlier_fraction: Option<f64>,
) -> Result<QuantizedMatrix> {
    if rows == 0 || cols == 0 || data.len() != rows * cols {
        return Err(Error::constraint(format!(
            "matrix shape {rows}x{cols} does not match {} elements or is empty",
            data.len()
        )));
    }
    match scheme {
        Scheme::Mixed => {
            let f = outlier_fraction.ok_or_else(|| {
                Error::constraint("mixed scheme requires outlier_fraction".to_string())
            })?;
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::constraint("outlier_fraction outside [0,1]".to_string()));
            }
            quantize_mixed(data, rows, cols, f)
        }
        Scheme::PerChannel => {
            if outlier_fraction.is_some() {
                return Err(Error::constraint(
                    "outlier_fraction only applies to the mixed scheme".to_string(),
                ));
            }
            quantize_per_channel(data, rows, cols)
        }
        Scheme::Group32 => {
            if outlier_fraction.is_some() {
                return Err(Error::constraint(
                    "outlier_fraction only applies to the mixed scheme".to_string(),
                ));
            }
            quantize_group32(data, rows, cols)
        }
    }
}

fn symmetric_row_codes(
    row: &[f32],
    skip: impl Fn(usize) -> bool,
) -> (u16, Vec<i8>) {
    let max_abs = row
        .iter()
        .enumerate()
        .filter(|(c, _)| !skip(*c))
        .map(|(_, v)| v.abs())
        .fold(0.0f32, f32::max);
    let scale_bits = f16_round_directed(max_abs / 7.0, true);
    let scale = f16::from_bits(scale_bits).to_f32();
    let codes = row
        .iter()
        .enumerate()
        .map(|(c, &v)| {
            if skip(c) || scale == 0.0 {
                0i8
            } else {
                (v / scale).round_ties_even().clamp(-7.0, 7.0) as i8
            }
        })
        .collect();
    (scale_bits, codes)
}

fn quantize_per_channel(data: &[f32], rows: usize, cols: usize) -> Result<QuantizedMatrix> {
    let mut packed = vec![0u8; rows * row_bytes(cols)];
    let mut scales = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        let (scale_bits, codes) = symmetric_row_codes(row, |_| false);
        scales.push(scale_bits);
        let base = r * row_bytes(cols);
        for (c, &code) in codes.iter().enumerate() {
            pack_code(&mut packed[base..], c, code);
        }
    }
    Ok(QuantizedMatrix {
        scheme: Scheme::PerChannel,
        rows,
        cols,
        packed,
        scales,
        mins: Vec::new(),
        outliers: Vec::new(),
    })
}

fn quantize_group32(data: &[f32], rows: usize, cols: usize) -> Result<QuantizedMatrix> {
    let groups_per_row = cols.div_ceil(GROUP_SIZE);
    let mut packed = vec![0u8; rows * row_bytes(cols)];
    let mut scales = Vec::with_capacity(rows * groups_per_row);
    let mut mins = Vec::with_capacity(rows * groups_per_row);
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        let base = r * row_bytes(cols);
        for g in 0..groups_per_row {
            let lo = g * GROUP_SIZE;
            let hi = (lo + GROUP_SIZE).min(cols);
            let group = &row[lo..hi];
            let min = group.iter().copied().fold(f32::MAX, f32::min);
            let max = group.iter().copied().fold(f32::MIN, f32::max);
            let min_bits = f16_round_directed(min, false);
            let min16 = f16::from_bits(min_bits).to_f32();
            let scale_bits = f16_round_directed((max - min16) / 15.0, true);
            let scale = f16::from_bits(scale_bits).to_f32();
            scales.push(scale_bits);
            mins.push(min_bits);
            for (k, &v) in group.iter().enumerate() {
                let code = if scale == 0.0 {
                    0u8
                } else {
                    ((v - min16) / scale).round_ties_even().clamp(0.0, 15.0) as u8
                };
                pack_code(&mut packed[base..], lo + k, code as i8);
            }
        }
    }
    Ok(QuantizedMatrix {
        scheme: Scheme::Group32,
        rows,
        cols,
        packed,
        scales,
        mins,
        outliers: Vec::new(),
    })
}

fn quantize_mixed(data: &[f32], rows: usize, cols: usize, f: f64) -> Result<QuantizedMatrix> {
    let per_row = if f == 0.0 { 0 } else { ((f * cols as f64).round() as usize).max(1).min(cols) };
    let mut packed = vec![0u8; rows * row_bytes(cols)];
    let mut scales = Vec::with_capacity(rows);
    let mut outliers = Vec::new();
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        // Largest-magnitude columns of this row become outliers.
        let mut order: Vec<usize> = (0..cols).collect();
        order.sort_by(|&a, &b| {
            row[b].abs().partial_cmp(&row[a].abs()).unwrap().then(a.cmp(&b))
        });
        let mut is_outlier = vec![false; cols];
        for &c in order.iter().take(per_row) {
            is_outlier[c] = true;
        }
        let (scale_bits, codes) = symmetric_row_codes(row, |c| is_outlier[c]);
        scales.push(scale_bits);
        let base = r * row_bytes(cols);
        for (c, &code) in codes.iter().enumerate() {
            pack_code(&mut packed[base..], c, code);
        }
        let out_max = order
            .iter()
            .take(per_row)
            .map(|&c| row[c].abs())
            .fold(0.0f32, f32::max);
        let out_scale_bits = f16_round_directed(out_max / 127.0, true);
        let out_scale = f16::from_bits(out_scale_bits).to_f32();
        let mut row_outliers: Vec<Outlier> = order
            .iter()
            .take(per_row)
            .map(|&c| Outlier {
                row: r as u32,
                col: c as u32,
                value: if out_scale == 0.0 {
                    0
                } else {
                    (row[c] / out_scale).round_ties_even().clamp(-127.0, 127.0) as i8
                },
                scale: out_scale_bits,
            })
            .collect();
        row_outliers.sort_by_key(|o| o.col);
        outliers.extend(row_outliers);
    }
    Ok(QuantizedMatrix {
        scheme: Scheme::Mixed,
        rows,
        cols,
        packed,
        scales,
        mins: Vec::new(),
        outliers,
    })
}

pub fn dequantize(q: &QuantizedMatrix) -> Vec<f32> {
    let mut out = vec![0.0f32; q.rows * q.cols];
    match q.scheme {
        Scheme::PerChannel | Scheme::Mixed => {
            for r in 0..q.rows {
                let scale = f16::from_bits(q.scales[r]).to_f32();
                let base = r * row_bytes(q.cols);
                for c in 0..q.cols {
                    out[r * q.cols + c] =
                        unpack_code(&q.packed[base..], c) as f32 * scale;
                }
            }
            for o in &q.outliers {
                out[o.row as usize * q.cols + o.col as usize] =
                    o.value as f32 * f16::from_bits(o.scale).to_f32();
            }
        }
        Scheme::Group32 => {
            let groups_per_row = q.cols.div_ceil(GROUP_SIZE);
            for r in 0..q.rows {
                let base = r * row_bytes(q.cols);
                for c in 0..q.cols {
                    let g = r * groups_per_row + c / GROUP_SIZE;
                    let scale = f16::from_bits(q.scales[g]).to_f32();
                    let min = f16::from_bits(q.mins[g]).to_f32();
                    out[r * q.cols + c] =
                        min + unpack_unsigned(&q.packed[base..], c) as f32 * scale;
                }
            }
        }
    }
    out
}

/// Serializes the matrix in the documented packed layout. For `Group32`
/// each group contributes its code nibbles followed by its 4-byte
/// (scale, min) record, so serialized length matches [`bundle_bytes`]
/// accounting.
pub fn to_bytes(q: &QuantizedMatrix) -> Vec<u8> {
    let mut out = Vec::new();
    match q.scheme {
        Scheme::Group32 => {
            let groups_per_row = q.cols.div_ceil(GROUP_SIZE);
            for r in 0..q.rows {
                let base = r * row_bytes(q.cols);
                for g in 0..groups_per_row {
                    let lo_byte = g * GROUP_SIZE / 2;
                    let hi_byte = ((g + 1) * GROUP_SIZE).min(q.cols).div_ceil(2);
                    out.extend_from_slice(&q.packed[base + lo_byte..base + hi_byte]);
                    out.extend_from_slice(&q.scales[r * groups_per_row + g].to_le_bytes());
                    out.extend_from_slice(&q.mins[r * groups_per_row + g].to_le_bytes());
                }
            }
        }
        Scheme::PerChannel | Scheme::Mixed => {
            for r in 0..q.rows {
                let base = r * row_bytes(q.cols);
                out.extend_from_slice(&q.packed[base..base + row_bytes(q.cols)]);
                out.extend_from_slice(&q.scales[r].to_le_bytes());
            }
            for o in &q.outliers {
                out.extend_from_slice(&o.row.to_le_bytes());
                out.extend_from_slice(&o.col.to_le_bytes());
                out.push(o.value as u8);
                out.extend_from_slice(&o.scale.to_le_bytes());
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BundleBytes {
    /// Bytes of one matrix's slice of the bundle (row of Gate/Up or
    /// column of Down).
    pub per_matrix: u64,
    /// Gate + Up + Down slice bytes.
    pub bundle: u64,
    /// Bundle size rounded up to the flash read granularity.
    pub aligned: u64,
}

/// Per-neuron bundle byte accounting for the on-flash layout.
pub fn bundle_bytes(d_model: usize, dtype: Dtype) -> Result<BundleBytes> {
    let per_matrix = match dtype {
        Dtype::Fp16 => 2 * d_model as u64,
        Dtype::Int4Group => {
            let codes = d_model.div_ceil(2) as u64;
            let groups = d_model.div_ceil(GROUP_SIZE) as u64;
            codes + 4 * groups
        }
        other => {
            return Err(Error::constraint(format!(
                "bundle accounting is defined for fp16 and int4-group, got {other:?}"
            )))
        }
    };
    let bundle = 3 * per_matrix;
    let aligned = bundle.div_ceil(ALIGN_BYTES) * ALIGN_BYTES;
    Ok(BundleBytes { per_matrix, bundle, aligned })
}
