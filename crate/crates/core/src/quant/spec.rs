use std::fmt;

use serde::{Deserialize, Serialize};

use super::QuantError;

/// Bits used for a raw half-precision scale.
pub const HALF_BITS: u32 = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    /// Round to nearest, ties to even.
    #[default]
    NearestEven,
    /// The literal floor bracket.
    Floor,
}

/// Bit-widths and group sizes for one or two levels of group-wise quantization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u8,
    pub group_size: usize,
    /// Bit-width of the quantized first-level scales; `None` stores them as f16.
    #[serde(default)]
    pub scale_bits: Option<u8>,
    #[serde(default)]
    pub scale_group_size: Option<usize>,
    #[serde(default)]
    pub rounding: Rounding,
    /// Storage width of each integer zero-point; defaults to `bits`.
    #[serde(default)]
    pub zero_point_bits: Option<u8>,
}

impl QuantSpec {
    /// Single-level spec with f16 scales.
    pub fn single(bits: u8, group_size: usize) -> Self {
        Self {
            bits,
            group_size,
            scale_bits: None,
            scale_group_size: None,
            rounding: Rounding::NearestEven,
            zero_point_bits: None,
        }
    }

    /// Two-level spec: first-level scales are themselves group-quantized.
    pub fn bilevel(bits: u8, group_size: usize, scale_bits: u8, scale_group_size: usize) -> Self {
        Self {
            scale_bits: Some(scale_bits),
            scale_group_size: Some(scale_group_size),
            ..Self::single(bits, group_size)
        }
    }

    pub fn with_zero_point_bits(mut self, bits: u8) -> Self {
        self.zero_point_bits = Some(bits);
        self
    }

    pub fn with_rounding(mut self, rounding: Rounding) -> Self {
        self.rounding = rounding;
        self
    }

    pub fn is_bilevel(&self) -> bool {
        self.scale_bits.is_some()
    }

    pub fn zero_point_storage_bits(&self) -> u8 {
        self.zero_point_bits.unwrap_or(self.bits)
    }

    pub fn max_code(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    pub fn validate(&self) -> Result<(), QuantError> {
        let bad = |m: String| Err(QuantError::InvalidSpec(m));
        if ![2, 3, 4, 8].contains(&self.bits) {
            return bad(format!(
                "bits must be one of 2, 3, 4, 8 (got {})",
                self.bits
            ));
        }
        if self.group_size == 0 {
            return bad("group_size must be positive".into());
        }
        match (self.scale_bits, self.scale_group_size) {
            (None, None) => {}
            (Some(sb), Some(sg)) => {
                if !(4..=8).contains(&sb) {
                    return bad(format!("scale_bits must be in 4..=8 (got {sb})"));
                }
                if sg == 0 {
                    return bad("scale_group_size must be positive".into());
                }
            }
            _ => return bad("scale_bits and scale_group_size must be set together".into()),
        }
        let zp = self.zero_point_storage_bits();
        if zp < self.bits || zp > 16 {
            return bad(format!(
                "zero_point_bits must be in {}..=16 (got {zp})",
                self.bits
            ));
        }
        Ok(())
    }

    /// Expected bits per stored weight, metadata included, for rows that
    /// split evenly into groups.
    pub fn average_bitwidth(&self) -> f64 {
        let b = self.bits as f64;
        let g = self.group_size as f64;
        let zp = self.zero_point_storage_bits() as f64;
        match (self.scale_bits, self.scale_group_size) {
            (Some(sb), Some(sg)) => {
                let sb = sb as f64;
                b + zp / g + sb / g + (HALF_BITS as f64 + sb) / (g * sg as f64)
            }
            _ => b + zp / g + HALF_BITS as f64 / g,
        }
    }

    pub fn groups_per_row(&self, cols: usize) -> usize {
        cols.div_ceil(self.group_size)
    }

    /// Exact payload size in bits of a `rows x cols` tensor, before byte padding.
    pub fn payload_bits(&self, rows: usize, cols: usize) -> u64 {
        let groups = (rows * self.groups_per_row(cols)) as u64;
        let codes = (rows * cols) as u64 * self.bits as u64;
        let zps = groups * self.zero_point_storage_bits() as u64;
        let scales = match (self.scale_bits, self.scale_group_size) {
            (Some(sb), Some(sg)) => {
                let second = groups.div_ceil(sg as u64);
                groups * sb as u64 + second * (HALF_BITS as u64 + sb as u64)
            }
            _ => groups * HALF_BITS as u64,
        };
        codes + zps + scales
    }

    pub fn payload_bytes(&self, rows: usize, cols: usize) -> usize {
        self.payload_bits(rows, cols).div_ceil(8) as usize
    }
}

/// Free-function form of [`QuantSpec::average_bitwidth`].
pub fn average_bitwidth(spec: &QuantSpec) -> f64 {
    spec.average_bitwidth()
}

impl fmt::Display for QuantSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "w{}g{}", self.bits, self.group_size)?;
        if let (Some(sb), Some(sg)) = (self.scale_bits, self.scale_group_size) {
            write!(f, "g{sg}s{sb}")?;
        }
        Ok(())
    }
}
