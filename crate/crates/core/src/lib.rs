//! Staged low-bit weight quantization for a toy vision-language model.
//!
//! The crate is layered bottom-up:
//!
//! - [`autodiff`]: tape-based reverse-mode AD and an Adam-style optimizer.
//! - [`quant`]: group-wise and bilevel weight codecs, fake quantization, packing.
//! - [`calibration`]: layer-wise asymmetric clip search and adaptive rounding.
//! - [`distill`]: mixed forward/reverse KL distillation and the combined loss.
//! - [`model`], [`data`]: the two-tower toy model and its synthetic task.
//! - [`trainer`]: the three-stage pipeline, the joint baseline and gradient monitor.
//! - [`container`], [`config`]: on-disk model container and run configuration.

pub mod autodiff;
pub mod calibration;
pub mod config;
pub mod container;
pub mod data;
pub mod distill;
pub mod model;
pub mod quant;
pub mod trainer;
