//! Group-wise weight quantization.
//!
//! Each row of a `d_out x d_in` weight is split into contiguous groups of
//! `group_size` along the input dimension. A group stores `bits`-wide codes, an
//! integer zero-point and a scale. Scales are kept as f16, or, in bilevel mode,
//! group-quantized a second time into `scale_bits`-wide codes with one f16 scale
//! and one zero-point per `scale_group_size` scales.
//!
//! Packed payloads are a single little-endian, LSB-first bitstream; see
//! [`QuantizedTensor::pack`] for the field order.

mod bits;
mod fake;
mod group;
mod packed;
mod spec;

pub use fake::{fake_quantize, fake_quantize_values, ste_mask};
pub use group::{
    bilevel_quantize_scales, compute_group_params, dequantize_group, quantize_group, BilevelScales,
    GroupParams, DEGENERATE_EPS,
};
pub use packed::{quantize_tensor, unpack_tensor, PackedTensor, QuantizedTensor, ScaleStorage};
pub use spec::{average_bitwidth, QuantSpec, Rounding, HALF_BITS};

use crate::autodiff::AutodiffError;

#[derive(Debug, thiserror::Error)]
pub enum QuantError {
    #[error("invalid quantization spec: {0}")]
    InvalidSpec(String),
    #[error("cannot quantize an empty group")]
    EmptyGroup,
    #[error("weights contain non-finite values")]
    NonFinite,
    #[error("expected a 2-d weight tensor, got shape {shape:?}")]
    NotMatrix { shape: Vec<usize> },
    #[error("scale {index} is {value}; scales must be positive")]
    NonPositiveScale { index: usize, value: f32 },
    #[error("scale {value} overflows half precision")]
    ScaleOverflow { value: f32 },
    #[error("payload truncated at byte {offset}: expected {expected} bytes, found {actual}")]
    Truncated {
        offset: usize,
        expected: usize,
        actual: usize,
    },
    #[error("corrupt payload at byte {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}
