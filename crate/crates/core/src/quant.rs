//! Blockwise absmax quantization (INT8 and NF4) for frozen base weights.
//!
//! Groups run over the column-major element order. Each group stores one
//! scale, its absmax (NF4) or absmax/127 (INT8).

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const DEFAULT_GROUP_SIZE: usize = 256;

const MAGIC: &[u8; 4] = b"DQT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantFormat {
    Int8,
    Nf4,
}

impl QuantFormat {
    pub fn name(self) -> &'static str {
        match self {
            QuantFormat::Int8 => "int8",
            QuantFormat::Nf4 => "nf4",
        }
    }

    pub fn bits(self) -> usize {
        match self {
            QuantFormat::Int8 => 8,
            QuantFormat::Nf4 => 4,
        }
    }
}

/// How a frozen base is stored. `Identity` keeps full precision but still
/// goes through the quantized-base code paths.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case", deny_unknown_fields)]
pub enum Quantizer {
    #[default]
    Identity,
    Int8 {
        #[serde(default = "default_group")]
        group_size: usize,
    },
    Nf4 {
        #[serde(default = "default_group")]
        group_size: usize,
    },
}

fn default_group() -> usize {
    DEFAULT_GROUP_SIZE
}

/// A weight as held by a quantized base.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum StoredWeight {
    Raw(Matrix),
    Quantized(QuantizedTensor),
}

impl StoredWeight {
    pub fn dequantize(&self) -> Result<Matrix> {
        match self {
            StoredWeight::Raw(m) => Ok(m.clone()),
            StoredWeight::Quantized(q) => q.dequantize(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            StoredWeight::Raw(m) => m.shape(),
            StoredWeight::Quantized(q) => q.shape(),
        }
    }
}

impl Quantizer {
    pub fn store(&self, m: &Matrix) -> Result<StoredWeight> {
        Ok(match *self {
            Quantizer::Identity => StoredWeight::Raw(m.clone()),
            Quantizer::Int8 { group_size } => StoredWeight::Quantized(quantize_int8(m, group_size)?),
            Quantizer::Nf4 { group_size } => StoredWeight::Quantized(quantize_nf4(m, group_size)?),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Quantizer::Identity => "identity",
            Quantizer::Int8 { .. } => "int8",
            Quantizer::Nf4 { .. } => "nf4",
        }
    }
}

/// The 16 NF4 levels, ascending, built from standard normal quantiles:
/// 8 positive levels at quantiles evenly spaced from `offset` down to one
/// half, 7 negative ones likewise, plus an exact zero, all divided by the
/// largest so the endpoints are ±1. `offset = 1 - (1/32 + 1/30)/2` keeps the
/// outermost quantile finite.
pub fn nf4_codebook() -> &'static [f64; 16] {
    static BOOK: OnceLock<[f64; 16]> = OnceLock::new();
    BOOK.get_or_init(|| {
        let normal = Normal::standard();
        let offset = 1.0 - 0.5 * (1.0 / 32.0 + 1.0 / 30.0);
        let quantiles = |count: usize| -> Vec<f64> {
            // linspace(offset, 0.5, count + 1) without the final 0.5
            (0..count)
                .map(|i| offset + (0.5 - offset) * i as f64 / count as f64)
                .map(|p| normal.inverse_cdf(p))
                .collect()
        };
        let mut levels: Vec<f64> = quantiles(8);
        levels.extend(quantiles(7).into_iter().map(|x| -x));
        levels.push(0.0);
        let max = levels.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut book = [0.0; 16];
        for (b, v) in book.iter_mut().zip(&levels) {
            *b = v / max;
        }
        book.sort_by(|a, b| a.partial_cmp(b).expect("finite levels"));
        book
    })
}

/// Largest gap between adjacent NF4 levels.
pub fn nf4_max_gap() -> f64 {
    nf4_codebook().windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
}

fn nearest_nf4(x: f64) -> u8 {
    let book = nf4_codebook();
    let mut code = 0;
    for i in 1..16 {
        // ties go to the lower level
        if x > 0.5 * (book[i - 1] + book[i]) {
            code = i;
        }
    }
    code as u8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub format: QuantFormat,
    pub rows: usize,
    pub cols: usize,
    pub group_size: usize,
    pub scales: Vec<f64>,
    /// One code per element. INT8 codes are two's-complement bytes; NF4
    /// codes are indices `0..16`, packed only when serialized.
    pub codes: Vec<u8>,
}

fn check_group(group: usize) -> Result<()> {
    if group == 0 {
        return Err(Error::Config("quantization group size must be >= 1".into()));
    }
    Ok(())
}

fn absmax(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

/// Symmetric INT8: `scale = absmax / 127`, codes rounded half away from zero
/// and clamped to `[-127, 127]`.
pub fn quantize_int8(m: &Matrix, group: usize) -> Result<QuantizedTensor> {
    check_group(group)?;
    let mut scales = Vec::new();
    let mut codes = Vec::with_capacity(m.len());
    for chunk in m.as_slice().chunks(group) {
        let scale = absmax(chunk) / 127.0;
        scales.push(scale);
        for &x in chunk {
            let q = if scale == 0.0 {
                0.0
            } else {
                (x / scale).round().clamp(-127.0, 127.0)
            };
            codes.push(q as i8 as u8);
        }
    }
    Ok(QuantizedTensor {
        format: QuantFormat::Int8,
        rows: m.rows(),
        cols: m.cols(),
        group_size: group,
        scales,
        codes,
    })
}

/// NF4: each group is divided by its absmax and snapped to the nearest
/// codebook level.
pub fn quantize_nf4(m: &Matrix, group: usize) -> Result<QuantizedTensor> {
    check_group(group)?;
    let mut scales = Vec::new();
    let mut codes = Vec::with_capacity(m.len());
    for chunk in m.as_slice().chunks(group) {
        let scale = absmax(chunk);
        scales.push(scale);
        for &x in chunk {
            let normalized = if scale == 0.0 { 0.0 } else { x / scale };
            codes.push(nearest_nf4(normalized));
        }
    }
    Ok(QuantizedTensor {
        format: QuantFormat::Nf4,
        rows: m.rows(),
        cols: m.cols(),
        group_size: group,
        scales,
        codes,
    })
}

impl QuantizedTensor {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn num_groups(&self) -> usize {
        self.scales.len()
    }

    pub fn dequantize(&self) -> Result<Matrix> {
        let mut data = Vec::with_capacity(self.codes.len());
        for (g, chunk) in self.codes.chunks(self.group_size).enumerate() {
            let scale = self.scales[g];
            for &c in chunk {
                data.push(self.decode(c)? * scale);
            }
        }
        Matrix::from_col_major(self.rows, self.cols, data)
    }

    fn decode(&self, c: u8) -> Result<f64> {
        match self.format {
            QuantFormat::Int8 => {
                let v = c as i8;
                if v == i8::MIN {
                    return Err(Error::CorruptCode {
                        code: v as i32,
                        format: "int8",
                    });
                }
                Ok(v as f64)
            }
            QuantFormat::Nf4 => nf4_codebook().get(c as usize).copied().ok_or(Error::CorruptCode {
                code: c as i32,
                format: "nf4",
            }),
        }
    }

    /// Worst-case per-element round-trip error for group `g`.
    pub fn error_bound(&self, g: usize) -> f64 {
        match self.format {
            QuantFormat::Int8 => self.scales[g] / 2.0,
            QuantFormat::Nf4 => self.scales[g] * nf4_max_gap() / 2.0,
        }
    }

    /// Bytes of codes plus scales at the given scale width.
    pub fn storage_bytes(&self, scale_bytes: usize) -> usize {
        (self.codes.len() * self.format.bits()).div_ceil(8) + self.scales.len() * scale_bytes
    }

    /// Little-endian layout: magic, format byte, group size (u32), rows and
    /// cols (u64), scale count (u64), scales (f64), then codes. NF4 codes are
    /// packed two per byte, low nibble first.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(match self.format {
            QuantFormat::Int8 => 0,
            QuantFormat::Nf4 => 1,
        });
        out.extend_from_slice(&(self.group_size as u32).to_le_bytes());
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.cols as u64).to_le_bytes());
        out.extend_from_slice(&(self.scales.len() as u64).to_le_bytes());
        for s in &self.scales {
            out.extend_from_slice(&s.to_le_bytes());
        }
        match self.format {
            QuantFormat::Int8 => out.extend_from_slice(&self.codes),
            QuantFormat::Nf4 => {
                for pair in self.codes.chunks(2) {
                    let lo = pair[0] & 0x0F;
                    let hi = pair.get(1).map_or(0, |c| c & 0x0F);
                    out.push(lo | (hi << 4));
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |what: &str| Error::Checkpoint(format!("quantized tensor: {what}"));
        let mut r = Reader { bytes, at: 0 };
        if r.take(4).ok_or_else(|| bad("truncated header"))? != MAGIC {
            return Err(bad("bad magic"));
        }
        let format = match r.take(1).ok_or_else(|| bad("truncated header"))?[0] {
            0 => QuantFormat::Int8,
            1 => QuantFormat::Nf4,
            f => return Err(bad(&format!("unknown format byte {f}"))),
        };
        let group_size = u32::from_le_bytes(r.array().ok_or_else(|| bad("truncated header"))?) as usize;
        let rows = u64::from_le_bytes(r.array().ok_or_else(|| bad("truncated header"))?) as usize;
        let cols = u64::from_le_bytes(r.array().ok_or_else(|| bad("truncated header"))?) as usize;
        let n_scales = u64::from_le_bytes(r.array().ok_or_else(|| bad("truncated header"))?) as usize;
        let n = rows * cols;
        if group_size == 0 || n_scales != n.div_ceil(group_size) {
            return Err(bad("scale count does not match shape and group size"));
        }
        let scales = (0..n_scales)
            .map(|_| r.array().map(f64::from_le_bytes))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| bad("truncated scales"))?;
        let codes = match format {
            QuantFormat::Int8 => r.take(n).ok_or_else(|| bad("truncated codes"))?.to_vec(),
            QuantFormat::Nf4 => {
                let packed = r.take(n.div_ceil(2)).ok_or_else(|| bad("truncated codes"))?;
                let mut codes = Vec::with_capacity(n);
                for b in packed {
                    codes.push(b & 0x0F);
                    codes.push(b >> 4);
                }
                codes.truncate(n);
                codes
            }
        };
        if r.at != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(QuantizedTensor {
            format,
            rows,
            cols,
            group_size,
            scales,
            codes,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.at..self.at + n)?;
        self.at += n;
        Some(s)
    }

    fn array<const N: usize>(&mut self) -> Option<[u8; N]> {
        self.take(N).map(|s| s.try_into().expect("length checked"))
    }
}
