//! Offline calibration run before quantization-aware training.
//!
//! [`search_asymmetric_clip`] picks per-layer clip bounds `(alpha, beta)` that
//! minimize the quantized layer's output error on captured inputs, and
//! [`adaround_block`] learns per-weight up/down rounding decisions for a
//! block against the same objective.

mod adaround;
mod clip;

pub use adaround::{adaround_block, block_mse, AdaRoundConfig, AdaRoundOutcome, RoundingMask};
pub use clip::{clip_fractions, clip_objective, search_asymmetric_clip, ClipCandidate, ClipSearch};

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tensor};
use crate::data::Batch;
use crate::model::{ModelError, ToyVlm};
use crate::quant::QuantError;

#[derive(Debug, thiserror::Error)]
pub enum CalibrationError {
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("clip grid needs at least 2 steps, got {0}")]
    GridTooSmall(usize),
    #[error("layer {layer} has constant or non-finite weights; nothing to clip")]
    DegenerateWeights { layer: String },
    #[error(
        "layer {layer}: weight input dim {weight_in} does not match activation dim {input_dim}"
    )]
    DimMismatch {
        layer: String,
        weight_in: usize,
        input_dim: usize,
    },
    #[error("adaptive rounding needs at least one iteration")]
    NoIterations,
    #[error("non-finite reconstruction loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("unknown layer {name:?}; available layers: {}", available.join(", "))]
    UnknownLayer {
        name: String,
        available: Vec<String>,
    },
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Layer-wise asymmetric clipping bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRange {
    pub layer_name: String,
    pub alpha: f32,
    pub beta: f32,
}

impl ClipRange {
    pub fn new(layer_name: impl Into<String>, alpha: f32, beta: f32) -> Self {
        Self {
            layer_name: layer_name.into(),
            alpha,
            beta,
        }
    }
}

/// Activations observed at one layer's input, stacked into `[samples, d_in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSet {
    pub layer_name: String,
    inputs: Tensor,
}

impl CalibrationSet {
    /// Stacks per-sample input vectors (each of shape `[d]` or `[1, d]`).
    pub fn new(layer_name: impl Into<String>, inputs: &[Tensor]) -> Result<Self, CalibrationError> {
        let first = inputs.first().ok_or(CalibrationError::EmptyCalibration)?;
        let d = first.numel();
        let layer_name = layer_name.into();
        let mut data = Vec::with_capacity(d * inputs.len());
        for t in inputs {
            if t.numel() != d {
                return Err(CalibrationError::DimMismatch {
                    layer: layer_name,
                    weight_in: d,
                    input_dim: t.numel(),
                });
            }
            data.extend_from_slice(t.data());
        }
        let inputs = Tensor::new(vec![inputs.len(), d], data)?;
        Ok(Self { layer_name, inputs })
    }

    /// Wraps an already stacked `[samples, d_in]` matrix.
    pub fn from_matrix(
        layer_name: impl Into<String>,
        inputs: Tensor,
    ) -> Result<Self, CalibrationError> {
        if inputs.dims2().is_none() {
            return Err(AutodiffError::InvalidShape {
                shape: inputs.shape().to_vec(),
                len: inputs.numel(),
            }
            .into());
        }
        Ok(Self {
            layer_name: layer_name.into(),
            inputs,
        })
    }

    pub fn sample_count(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn matrix(&self) -> &Tensor {
        &self.inputs
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        self.inputs.row(i)
    }
}

/// Runs `samples` through `model` and records the inputs seen by `layer_name`.
pub fn capture_activations(
    model: &ToyVlm,
    layer_name: &str,
    samples: &Batch,
) -> Result<CalibrationSet, CalibrationError> {
    if !model.layer_names().contains(&layer_name) {
        return Err(CalibrationError::UnknownLayer {
            name: layer_name.to_string(),
            available: model.layer_names().iter().map(|s| s.to_string()).collect(),
        });
    }
    if samples.is_empty() {
        return Err(CalibrationError::EmptyCalibration);
    }
    let inputs = model.layer_input(layer_name, samples)?;
    CalibrationSet::from_matrix(layer_name, inputs)
}
