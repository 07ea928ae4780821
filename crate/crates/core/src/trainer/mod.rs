//! Staged quantization pipeline and the joint-QAT baseline.
//!
//! Staged mode runs three stages on a copy of a full-precision model:
//!
//! 1. calibrate and freeze the vision encoder (clip search + adaptive rounding),
//! 2. warm up the projector alone against the full-precision teacher,
//! 3. fake-quantized QAT of the language head together with the projector.
//!
//! Joint mode fake-quantizes both towers from the first step instead.

mod plan;
mod report;
mod stages;

pub use plan::{
    default_spec, PlanMode, StageConfig, StageKind, StagePlan, DEFAULT_QAT_STEPS,
    DEFAULT_WARMUP_FRACTION, DEFAULT_WARMUP_STEPS,
};
pub use report::{
    gradient_monitor, series_mean, LayerCalibration, StageSummary, StepRecord, TrainReport,
};
pub use stages::{
    calibrate_language, data_subset, joint_qat, rtn_quantize, stage1_quantize_vision,
    stage2_warmup_projector, stage3_qat_language, train_loop, LoopSettings, PipelineState,
};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, OptimizerState, Tape};
use crate::calibration::CalibrationError;
use crate::container::Container;
use crate::data::{Batch, DataError, SyntheticTask};
use crate::distill::{cross_entropy_var, DistillError};
use crate::model::{ModelConfig, ModelError, Module, ToyVlm};
use crate::quant::QuantError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid stage plan: {0}")]
    InvalidPlan(String),
    #[error("stage out of order: {0}")]
    OutOfOrder(String),
    #[error("missing clip ranges for {}; run language calibration before stage 3", layers.join(", "))]
    MissingClips { layers: Vec<String> },
    #[error("non-finite loss in stage {stage} at step {step}")]
    NonFiniteLoss { stage: usize, step: usize },
    #[error("calibrating {layer}: {source}")]
    Calibration {
        layer: String,
        #[source]
        source: CalibrationError,
    },
    #[error("stage {index} ({kind:?}) failed: {source}")]
    Stage {
        index: usize,
        kind: StageKind,
        #[source]
        source: Box<TrainError>,
    },
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Full-precision training of the teacher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 32,
            learning_rate: 1e-3,
        }
    }
}

/// Trains a fresh full-precision model with cross-entropy.
pub fn pretrain(
    model_cfg: &ModelConfig,
    train: &Batch,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<ToyVlm, TrainError> {
    let mut model = ToyVlm::new(model_cfg.clone(), seed);
    if train.is_empty() || cfg.steps == 0 {
        return Ok(model);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5052_4554);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut pos = order.len();
    let mut opt = OptimizerState::new(cfg.learning_rate);
    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size {
            if pos == order.len() {
                order.shuffle(&mut rng);
                pos = 0;
            }
            idx.push(order[pos]);
            pos += 1;
        }
        let batch = train.select(&idx);
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &batch, &Module::ALL)?;
        let loss = cross_entropy_var(&mut tape, fwd.logits, &batch.labels)?;
        if !tape.scalar(loss).is_finite() {
            return Err(TrainError::NonFiniteLoss { stage: 0, step });
        }
        let grads = tape.backward(loss)?;
        model.accumulate_grads(&fwd, &grads)?;
        let mut params = model.trainable_params_mut(&Module::ALL);
        opt.step(&mut params)?;
    }
    Ok(model)
}

/// Quantized model, its container and the training report of one run.
#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub model: ToyVlm,
    pub container: Container,
    pub report: TrainReport,
}

fn in_stage<T>(index: usize, kind: StageKind, r: Result<T, TrainError>) -> Result<T, TrainError> {
    r.map_err(|source| TrainError::Stage {
        index,
        kind,
        source: Box::new(source),
    })
}

/// Runs `plan` on a copy of `teacher`, which stays untouched.
pub fn run_pipeline(
    plan: &StagePlan,
    task: &SyntheticTask,
    teacher: &ToyVlm,
    seed: u64,
) -> Result<PipelineOutcome, TrainError> {
    plan.validate()?;
    let mut state = PipelineState::new(teacher);
    state.report.teacher_accuracy = teacher.accuracy(&task.eval)?;
    let calib = task.train.head(plan.calibration_samples);

    for (index, stage) in plan.stages.iter().enumerate() {
        let started = Instant::now();
        let first_step = state.next_step;
        let settings = LoopSettings {
            stage: index,
            kind: stage.kind,
            steps: stage.steps,
            batch_size: plan.batch_size,
            learning_rate: plan.learning_rate,
            distill: stage.distill.clone(),
            seed: seed.wrapping_mul(1_000_003).wrapping_add(index as u64 + 1),
        };
        let (calibration, gamma) = match stage.kind {
            StageKind::CalibrateVision => {
                let r = stage1_quantize_vision(
                    &mut state,
                    &calib,
                    &plan.vision_spec,
                    plan.clip_grid_steps,
                    &plan.adaround,
                );
                (in_stage(index, stage.kind, r)?, None)
            }
            StageKind::WarmupProjector => {
                let r = stage2_warmup_projector(
                    &mut state,
                    &task.train,
                    stage.data_fraction,
                    &settings,
                );
                (Vec::new(), in_stage(index, stage.kind, r)?)
            }
            StageKind::QatLanguage => {
                let clips = calibrate_language(
                    &mut state,
                    &calib,
                    &plan.language_spec,
                    plan.clip_grid_steps,
                );
                let clips = in_stage(index, stage.kind, clips)?;
                let train = data_subset(&task.train, stage.data_fraction);
                let r = stage3_qat_language(&mut state, &train, &plan.language_spec, &settings);
                (clips, in_stage(index, stage.kind, r)?)
            }
            StageKind::JointQat => {
                let train = data_subset(&task.train, stage.data_fraction);
                let r = joint_qat(
                    &mut state,
                    &train,
                    &calib,
                    &plan.vision_spec,
                    &plan.language_spec,
                    plan.clip_grid_steps,
                    &settings,
                );
                in_stage(index, stage.kind, r)?
            }
        };
        let s = StageSummary {
            index,
            kind: stage.kind,
            steps: state.next_step - first_step,
            wall_time_s: started.elapsed().as_secs_f64(),
            eval_accuracy: state.student.accuracy(&task.eval)?,
            gamma,
            calibration,
        };
        state.report.stages.push(s);
    }

    let model = state.student;
    let mut report = state.report;
    report.final_accuracy = model.accuracy(&task.eval)?;
    for m in [Module::Vision, Module::Language] {
        let spec = if m == Module::Vision {
            plan.vision_spec
        } else {
            plan.language_spec
        };
        report.average_bitwidth.insert(m, spec.average_bitwidth());
    }
    let container = Container::from_model(&model);
    Ok(PipelineOutcome {
        model,
        container,
        report,
    })
}
