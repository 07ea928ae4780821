use half::f16;

use super::{QuantError, Rounding};

/// Scale floor for all-zero groups.
pub const DEGENERATE_EPS: f32 = 1e-8;

/// Affine parameters of one quantization group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupParams {
    pub scale: f32,
    pub zero_point: u32,
}

pub(crate) fn max_code(bits: u8) -> u32 {
    (1u32 << bits) - 1
}

/// Group extrema, widened so that zero is always representable.
///
/// With the zero-point clamped to `[0, 2^b - 1]`, a range that excludes zero
/// could not be covered by the grid; widening it keeps every value within
/// half a step of a grid point.
pub(crate) fn zero_inclusive_range(group: &[f32]) -> Result<(f32, f32), QuantError> {
    if group.is_empty() {
        return Err(QuantError::EmptyGroup);
    }
    let mut lo = 0.0f32;
    let mut hi = 0.0f32;
    for &w in group {
        if !w.is_finite() {
            return Err(QuantError::NonFinite);
        }
        lo = lo.min(w);
        hi = hi.max(w);
    }
    Ok((lo, hi))
}

#[inline]
fn round_with(x: f64, rounding: Rounding) -> f64 {
    match rounding {
        Rounding::NearestEven => x.round_ties_even(),
        Rounding::Floor => x.floor(),
    }
}

/// Zero-point for a group whose (zero-inclusive) minimum is `lo`.
pub(crate) fn zero_point_for(lo: f32, scale: f32, bits: u8) -> u32 {
    let z = (-(lo as f64) / scale as f64).round_ties_even();
    z.clamp(0.0, max_code(bits) as f64) as u32
}

/// `s = (x_max - x_min) / (2^b - 1)`, `z = clamp(round(-x_min / s), 0, 2^b - 1)`.
///
/// An all-zero group falls back to `s = eps / (2^b - 1)`, `z = 0`; any other
/// constant group `c` uses `s = |c|` with `z = 1` for negative `c`, else `0`.
pub fn compute_group_params(group: &[f32], bits: u8) -> Result<GroupParams, QuantError> {
    let (lo, hi) = zero_inclusive_range(group)?;
    let levels = max_code(bits) as f64;
    let scale = if hi == lo {
        (DEGENERATE_EPS as f64 / levels) as f32
    } else {
        ((hi as f64 - lo as f64) / levels) as f32
    };
    let params = GroupParams {
        scale,
        zero_point: zero_point_for(lo, scale, bits),
    };
    match constant_value(group) {
        Some(c) if c != 0.0 => Ok(constant_params(c)),
        _ => Ok(params),
    }
}

fn constant_value(group: &[f32]) -> Option<f32> {
    let c = group[0];
    group.iter().all(|&w| w == c).then_some(c)
}

/// A constant nonzero group uses a unit step of `|c|`, so `c` sits one code
/// away from the zero-point and reconstructs bit-exactly.
fn constant_params(c: f32) -> GroupParams {
    GroupParams {
        scale: c.abs(),
        zero_point: u32::from(c < 0.0),
    }
}

#[inline]
pub(crate) fn quantize_value(w: f32, p: GroupParams, bits: u8, rounding: Rounding) -> u32 {
    let q = round_with(w as f64 / p.scale as f64, rounding) + p.zero_point as f64;
    q.clamp(0.0, max_code(bits) as f64) as u32
}

#[inline]
pub(crate) fn dequantize_value(q: u32, p: GroupParams) -> f32 {
    ((q as f64 - p.zero_point as f64) * p.scale as f64) as f32
}

/// `q_i = clamp(round(w_i / s) + z, 0, 2^b - 1)`.
pub fn quantize_group(
    group: &[f32],
    params: GroupParams,
    bits: u8,
    rounding: Rounding,
) -> Vec<u32> {
    group
        .iter()
        .map(|&w| quantize_value(w, params, bits, rounding))
        .collect()
}

/// `(q_i - z) * s`.
pub fn dequantize_group(codes: &[u32], params: GroupParams) -> Vec<f32> {
    codes.iter().map(|&q| dequantize_value(q, params)).collect()
}

/// Smallest f16 that is `>= x` for positive finite `x`.
pub(crate) fn f16_ceil(x: f32) -> Result<f16, QuantError> {
    let mut h = f16::from_f32(x);
    if h.to_f32() < x {
        h = f16::from_bits(h.to_bits() + 1);
    }
    if !h.is_finite() {
        return Err(QuantError::ScaleOverflow { value: x });
    }
    Ok(h)
}

/// Second-level quantization of a first-level scale vector.
#[derive(Clone, Debug, PartialEq)]
pub struct BilevelScales {
    pub scale_bits: u8,
    pub scale_group_size: usize,
    /// One `scale_bits`-wide code per first-level scale.
    pub codes: Vec<u32>,
    /// One entry per second-level group; every `scale` is exactly an f16 value.
    pub second: Vec<GroupParams>,
}

impl BilevelScales {
    /// Reconstructed first-level scales `(q - z) * s2`.
    pub fn reconstruct(&self) -> Vec<f32> {
        self.codes
            .iter()
            .enumerate()
            .map(|(i, &q)| dequantize_value(q, self.second[i / self.scale_group_size]))
            .collect()
    }
}

/// Group-quantizes the scale vector itself with `scale_bits` over groups of
/// `scale_group_size`.
///
/// Second-level scales are rounded up to f16 and codes are rounded up, so
/// every reconstructed scale satisfies `s_i <= s_hat_i < s_i + s2`. A
/// first-level grid built on `s_hat_i` therefore still spans its group.
pub fn bilevel_quantize_scales(
    scales: &[f32],
    scale_bits: u8,
    scale_group_size: usize,
) -> Result<BilevelScales, QuantError> {
    if scale_group_size == 0 {
        return Err(QuantError::InvalidSpec(
            "scale_group_size must be positive".into(),
        ));
    }
    if let Some((index, &value)) = scales
        .iter()
        .enumerate()
        .find(|(_, s)| !(s.is_finite() && **s > 0.0))
    {
        return Err(QuantError::NonPositiveScale { index, value });
    }
    let top = max_code(scale_bits);
    let mut codes = Vec::with_capacity(scales.len());
    let mut second = Vec::with_capacity(scales.len().div_ceil(scale_group_size));
    for chunk in scales.chunks(scale_group_size) {
        let exact = compute_group_params(chunk, scale_bits)?;
        let scale = f16_ceil(exact.scale)?.to_f32();
        // all-positive inputs make the zero-inclusive minimum exactly 0
        let params = GroupParams {
            scale,
            zero_point: 0,
        };
        for &s in chunk {
            let q = (s as f64 / scale as f64).ceil().clamp(1.0, top as f64) as u32;
            codes.push(q + params.zero_point);
        }
        second.push(params);
    }
    Ok(BilevelScales {
        scale_bits,
        scale_group_size,
        codes,
        second,
    })
}
