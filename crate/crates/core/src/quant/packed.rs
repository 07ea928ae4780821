use half::f16;

use super::bits::{BitReader, BitWriter};
use super::group::{
    bilevel_quantize_scales, compute_group_params, dequantize_value, f16_ceil, max_code,
    quantize_value, zero_inclusive_range, zero_point_for, BilevelScales, GroupParams,
};
use super::{QuantError, QuantSpec, HALF_BITS};
use crate::autodiff::Tensor;
use crate::calibration::ClipRange;

/// How first-level scales are stored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ScaleStorage {
    /// One f16 bit pattern per group.
    Half(Vec<u16>),
    /// `scale_bits`-wide codes per group plus one f16 scale and integer
    /// zero-point per second-level group.
    Bilevel {
        codes: Vec<u16>,
        second_scales: Vec<u16>,
        second_zero_points: Vec<u16>,
    },
}

/// Unpacked quantized representation of a `rows x cols` weight matrix.
///
/// Groups run along each row; a row of `cols` weights holds
/// `ceil(cols / group_size)` groups, the last one possibly short.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedTensor {
    pub rows: usize,
    pub cols: usize,
    pub spec: QuantSpec,
    pub codes: Vec<u16>,
    pub zero_points: Vec<u16>,
    pub scales: ScaleStorage,
}

fn check_matrix(w: &Tensor) -> Result<(usize, usize), QuantError> {
    w.dims2().ok_or_else(|| QuantError::NotMatrix {
        shape: w.shape().to_vec(),
    })
}

/// Column span of group `g` within a row.
pub(crate) fn group_span(g: usize, group_size: usize, cols: usize) -> std::ops::Range<usize> {
    g * group_size..((g + 1) * group_size).min(cols)
}

impl QuantizedTensor {
    /// Group-wise quantization of `w`, clipped to `clip` first when given.
    pub fn quantize(
        w: &Tensor,
        spec: &QuantSpec,
        clip: Option<&ClipRange>,
    ) -> Result<Self, QuantError> {
        spec.validate()?;
        let (rows, cols) = check_matrix(w)?;
        let clipped: Vec<f32> = match clip {
            Some(c) => w.data().iter().map(|x| x.clamp(c.alpha, c.beta)).collect(),
            None => w.data().to_vec(),
        };
        let gpr = spec.groups_per_row(cols);
        let mut exact = Vec::with_capacity(rows * gpr);
        let mut lows = Vec::with_capacity(rows * gpr);
        for r in 0..rows {
            let row = &clipped[r * cols..(r + 1) * cols];
            for g in 0..gpr {
                let group = &row[group_span(g, spec.group_size, cols)];
                exact.push(compute_group_params(group, spec.bits)?.scale);
                lows.push(zero_inclusive_range(group)?.0);
            }
        }

        let (scales, recon) = match (spec.scale_bits, spec.scale_group_size) {
            (Some(sb), Some(sg)) => {
                let b = bilevel_quantize_scales(&exact, sb, sg)?;
                let recon = b.reconstruct();
                (bilevel_storage(&b)?, recon)
            }
            _ => {
                let half: Vec<f16> = exact
                    .iter()
                    .map(|&s| f16_ceil(s))
                    .collect::<Result<_, _>>()?;
                let recon = half.iter().map(|h| h.to_f32()).collect();
                (
                    ScaleStorage::Half(half.iter().map(|h| h.to_bits()).collect()),
                    recon,
                )
            }
        };

        let zero_points: Vec<u16> = lows
            .iter()
            .zip(&recon)
            .map(|(&lo, &s)| zero_point_for(lo, s, spec.bits) as u16)
            .collect();

        let mut codes = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for g in 0..gpr {
                let gi = r * gpr + g;
                let p = GroupParams {
                    scale: recon[gi],
                    zero_point: zero_points[gi] as u32,
                };
                for c in group_span(g, spec.group_size, cols) {
                    codes.push(
                        quantize_value(clipped[r * cols + c], p, spec.bits, spec.rounding) as u16,
                    );
                }
            }
        }
        Ok(Self {
            rows,
            cols,
            spec: *spec,
            codes,
            zero_points,
            scales,
        })
    }

    pub fn groups_per_row(&self) -> usize {
        self.spec.groups_per_row(self.cols)
    }

    pub fn group_count(&self) -> usize {
        self.rows * self.groups_per_row()
    }

    /// Group index of element `(r, c)`.
    pub fn group_of(&self, r: usize, c: usize) -> usize {
        r * self.groups_per_row() + c / self.spec.group_size
    }

    /// First-level scales as seen by dequantization.
    pub fn reconstructed_scales(&self) -> Vec<f32> {
        match &self.scales {
            ScaleStorage::Half(bits) => bits.iter().map(|&b| f16::from_bits(b).to_f32()).collect(),
            ScaleStorage::Bilevel {
                codes,
                second_scales,
                second_zero_points,
            } => {
                let sg = self.spec.scale_group_size.unwrap_or(1);
                codes
                    .iter()
                    .enumerate()
                    .map(|(i, &q)| {
                        let p = GroupParams {
                            scale: f16::from_bits(second_scales[i / sg]).to_f32(),
                            zero_point: second_zero_points[i / sg] as u32,
                        };
                        dequantize_value(q as u32, p)
                    })
                    .collect()
            }
        }
    }

    pub fn group_params(&self) -> Vec<GroupParams> {
        self.reconstructed_scales()
            .into_iter()
            .zip(&self.zero_points)
            .map(|(scale, &z)| GroupParams {
                scale,
                zero_point: z as u32,
            })
            .collect()
    }

    pub fn dequantize(&self) -> Tensor {
        let params = self.group_params();
        let gpr = self.groups_per_row();
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                let p = params[r * gpr + c / self.spec.group_size];
                out.push(dequantize_value(self.codes[r * self.cols + c] as u32, p));
            }
        }
        Tensor::new(vec![self.rows, self.cols], out).expect("dequantize shape")
    }

    /// Codes of `w` under this tensor's stored scales and zero-points.
    pub fn requantize(&self, w: &Tensor) -> Result<Vec<u16>, QuantError> {
        let (rows, cols) = check_matrix(w)?;
        if (rows, cols) != (self.rows, self.cols) {
            return Err(QuantError::NotMatrix {
                shape: w.shape().to_vec(),
            });
        }
        let params = self.group_params();
        Ok(w.data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let p = params[self.group_of(i / cols, i % cols)];
                quantize_value(x, p, self.spec.bits, self.spec.rounding) as u16
            })
            .collect())
    }

    /// Replaces the codes, keeping scales and zero-points.
    pub fn with_codes(mut self, codes: Vec<u16>) -> Result<Self, QuantError> {
        let top = self.spec.max_code();
        if codes.len() != self.codes.len() || codes.iter().any(|&q| q as u32 > top) {
            return Err(QuantError::InvalidSpec(format!(
                "expected {} codes within [0, {top}]",
                self.codes.len()
            )));
        }
        self.codes = codes;
        Ok(self)
    }

    /// Serializes into the bit-exact payload layout:
    /// codes (`bits` each, row-major), then zero-points, then scales (f16 per
    /// group, or scale codes followed by `(f16 scale, zero-point)` per
    /// second-level group). One LSB-first bitstream, zero-padded to a byte.
    pub fn pack(&self, name: impl Into<String>) -> PackedTensor {
        let spec = &self.spec;
        let mut w = BitWriter::with_capacity_bits(spec.payload_bits(self.rows, self.cols));
        for &q in &self.codes {
            w.write(q as u32, spec.bits as u32);
        }
        let zp_bits = spec.zero_point_storage_bits() as u32;
        for &z in &self.zero_points {
            w.write(z as u32, zp_bits);
        }
        match &self.scales {
            ScaleStorage::Half(bits) => bits.iter().for_each(|&b| w.write(b as u32, HALF_BITS)),
            ScaleStorage::Bilevel {
                codes,
                second_scales,
                second_zero_points,
            } => {
                let sb = spec.scale_bits.unwrap_or(8) as u32;
                codes.iter().for_each(|&q| w.write(q as u32, sb));
                for (&s, &z) in second_scales.iter().zip(second_zero_points) {
                    w.write(s as u32, HALF_BITS);
                    w.write(z as u32, sb);
                }
            }
        }
        debug_assert_eq!(w.bit_len(), spec.payload_bits(self.rows, self.cols));
        PackedTensor {
            name: name.into(),
            shape: vec![self.rows, self.cols],
            spec: *spec,
            payload: w.finish(),
        }
    }
}

fn bilevel_storage(b: &BilevelScales) -> Result<ScaleStorage, QuantError> {
    Ok(ScaleStorage::Bilevel {
        codes: b.codes.iter().map(|&q| q as u16).collect(),
        second_scales: b
            .second
            .iter()
            .map(|p| f16_ceil(p.scale).map(|h| h.to_bits()))
            .collect::<Result<_, _>>()?,
        second_zero_points: b.second.iter().map(|p| p.zero_point as u16).collect(),
    })
}

/// Serialized quantized weight tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub spec: QuantSpec,
    pub payload: Vec<u8>,
}

impl PackedTensor {
    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    /// Stored bits per weight, padding included.
    pub fn bits_per_weight(&self) -> f64 {
        match self.element_count() {
            0 => 0.0,
            n => self.payload.len() as f64 * 8.0 / n as f64,
        }
    }

    pub fn unpack(&self) -> Result<QuantizedTensor, QuantError> {
        self.spec.validate()?;
        let (rows, cols) = match self.shape.as_slice() {
            [r, c] => (*r, *c),
            _ => {
                return Err(QuantError::NotMatrix {
                    shape: self.shape.clone(),
                })
            }
        };
        let spec = &self.spec;
        let expected = spec.payload_bytes(rows, cols);
        if self.payload.len() != expected {
            return Err(QuantError::Truncated {
                offset: self.payload.len().min(expected),
                expected,
                actual: self.payload.len(),
            });
        }
        let corrupt = |offset: usize, reason: String| QuantError::Corrupt { offset, reason };
        let mut r = BitReader::new(&self.payload);
        let take = |r: &mut BitReader, width: u32| {
            r.read(width).ok_or(QuantError::Truncated {
                offset: r.byte_offset(),
                expected,
                actual: self.payload.len(),
            })
        };

        let mut codes = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            codes.push(take(&mut r, spec.bits as u32)? as u16);
        }
        let groups = rows * spec.groups_per_row(cols);
        let top = max_code(spec.bits);
        let mut zero_points = Vec::with_capacity(groups);
        for _ in 0..groups {
            let at = r.byte_offset();
            let z = take(&mut r, spec.zero_point_storage_bits() as u32)?;
            if z > top {
                return Err(corrupt(at, format!("zero-point {z} exceeds {top}")));
            }
            zero_points.push(z as u16);
        }
        let valid_scale = |bits: u32| {
            let v = f16::from_bits(bits as u16);
            v.is_finite() && v.to_f32() > 0.0
        };
        let scales = match (spec.scale_bits, spec.scale_group_size) {
            (Some(sb), Some(sg)) => {
                let mut scodes = Vec::with_capacity(groups);
                for _ in 0..groups {
                    scodes.push(take(&mut r, sb as u32)? as u16);
                }
                let second = groups.div_ceil(sg);
                let mut second_scales = Vec::with_capacity(second);
                let mut second_zero_points = Vec::with_capacity(second);
                for _ in 0..second {
                    let at = r.byte_offset();
                    let s = take(&mut r, HALF_BITS)?;
                    if !valid_scale(s) {
                        return Err(corrupt(
                            at,
                            format!("second-level scale {s:#06x} is not positive"),
                        ));
                    }
                    second_scales.push(s as u16);
                    second_zero_points.push(take(&mut r, sb as u32)? as u16);
                }
                for (i, &q) in scodes.iter().enumerate() {
                    if q <= second_zero_points[i / sg] {
                        return Err(corrupt(
                            self.payload.len(),
                            format!(
                                "scale code {q} of group {i} reconstructs a non-positive scale"
                            ),
                        ));
                    }
                }
                ScaleStorage::Bilevel {
                    codes: scodes,
                    second_scales,
                    second_zero_points,
                }
            }
            _ => {
                let mut half = Vec::with_capacity(groups);
                for _ in 0..groups {
                    let at = r.byte_offset();
                    let s = take(&mut r, HALF_BITS)?;
                    if !valid_scale(s) {
                        return Err(corrupt(at, format!("scale {s:#06x} is not positive")));
                    }
                    half.push(s as u16);
                }
                ScaleStorage::Half(half)
            }
        };
        if !r.rest_is_zero() {
            return Err(corrupt(r.byte_offset(), "non-zero padding bits".into()));
        }
        Ok(QuantizedTensor {
            rows,
            cols,
            spec: *spec,
            codes,
            zero_points,
            scales,
        })
    }
}

/// Quantizes and packs a 2-d weight tensor.
pub fn quantize_tensor(
    name: &str,
    w: &Tensor,
    spec: &QuantSpec,
    clip: Option<&ClipRange>,
) -> Result<PackedTensor, QuantError> {
    Ok(QuantizedTensor::quantize(w, spec, clip)?.pack(name))
}

pub fn unpack_tensor(p: &PackedTensor) -> Result<QuantizedTensor, QuantError> {
    p.unpack()
}
