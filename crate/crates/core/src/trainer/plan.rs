use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::calibration::AdaRoundConfig;
use crate::distill::DistillConfig;
use crate::model::Module;
use crate::quant::QuantSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    CalibrateVision,
    WarmupProjector,
    QatLanguage,
    JointQat,
}

impl StageKind {
    /// Modules each stage kind updates.
    pub fn trainable(self) -> Vec<Module> {
        match self {
            StageKind::CalibrateVision => vec![],
            StageKind::WarmupProjector => vec![Module::Projector],
            StageKind::QatLanguage => vec![Module::Projector, Module::Language],
            StageKind::JointQat => Module::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    Staged,
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub kind: StageKind,
    pub trainable: Vec<Module>,
    pub frozen: Vec<Module>,
    /// Leading fraction of the training set this stage draws batches from.
    pub data_fraction: f64,
    pub steps: usize,
    pub distill: DistillConfig,
}

impl StageConfig {
    pub fn new(kind: StageKind, data_fraction: f64, steps: usize) -> Self {
        let trainable = kind.trainable();
        let frozen = Module::ALL
            .into_iter()
            .filter(|m| !trainable.contains(m))
            .collect();
        Self {
            kind,
            trainable,
            frozen,
            data_fraction,
            steps,
            distill: DistillConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub mode: PlanMode,
    pub stages: Vec<StageConfig>,
    pub vision_spec: QuantSpec,
    pub language_spec: QuantSpec,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub calibration_samples: usize,
    pub clip_grid_steps: usize,
    pub adaround: AdaRoundConfig,
}

pub const DEFAULT_WARMUP_STEPS: usize = 500;
pub const DEFAULT_QAT_STEPS: usize = 2000;
pub const DEFAULT_WARMUP_FRACTION: f64 = 0.1;

/// Two-bit weights in groups of 16 with 8-bit scale codes shared over 16 groups.
pub fn default_spec() -> QuantSpec {
    QuantSpec::bilevel(2, 16, 8, 16)
}

impl StagePlan {
    /// Calibrate vision, warm up the projector, then QAT the language head.
    pub fn staged(spec: QuantSpec) -> Self {
        Self {
            mode: PlanMode::Staged,
            stages: vec![
                StageConfig::new(StageKind::CalibrateVision, 1.0, 0),
                StageConfig::new(
                    StageKind::WarmupProjector,
                    DEFAULT_WARMUP_FRACTION,
                    DEFAULT_WARMUP_STEPS,
                ),
                StageConfig::new(StageKind::QatLanguage, 1.0, DEFAULT_QAT_STEPS),
            ],
            vision_spec: spec,
            language_spec: spec,
            batch_size: 32,
            learning_rate: 1e-3,
            calibration_samples: 128,
            clip_grid_steps: 11,
            adaround: AdaRoundConfig::default(),
        }
    }

    /// Single stage quantizing both towers from step 0, with the staged
    /// plan's combined training budget.
    pub fn joint(spec: QuantSpec) -> Self {
        Self {
            mode: PlanMode::Joint,
            stages: vec![StageConfig::new(
                StageKind::JointQat,
                1.0,
                DEFAULT_WARMUP_STEPS + DEFAULT_QAT_STEPS,
            )],
            ..Self::staged(spec)
        }
    }

    pub fn for_mode(mode: PlanMode, spec: QuantSpec) -> Self {
        match mode {
            PlanMode::Staged => Self::staged(spec),
            PlanMode::Joint => Self::joint(spec),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidPlan(m));
        self.vision_spec.validate()?;
        self.language_spec.validate()?;
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning rate {} must be positive",
                self.learning_rate
            ));
        }
        if self.calibration_samples == 0 {
            return bad("calibration_samples must be positive".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            s.distill.validate()?;
            if !(0.0..=1.0).contains(&s.data_fraction) {
                return bad(format!(
                    "stage {i}: data fraction {} outside [0, 1]",
                    s.data_fraction
                ));
            }
            if s.trainable.iter().any(|m| s.frozen.contains(m)) {
                return bad(format!("stage {i}: a module is both trainable and frozen"));
            }
        }
        let kinds: Vec<StageKind> = self.stages.iter().map(|s| s.kind).collect();
        match self.mode {
            PlanMode::Staged => {
                let expect = [
                    StageKind::CalibrateVision,
                    StageKind::WarmupProjector,
                    StageKind::QatLanguage,
                ];
                if kinds != expect {
                    return bad(format!(
                        "staged mode runs {expect:?} in order, got {kinds:?}"
                    ));
                }
                let s2 = &self.stages[1];
                if s2.trainable != [Module::Projector] {
                    return bad("stage 2 trains the projector only".into());
                }
                if self.stages[2].trainable.contains(&Module::Vision) {
                    return bad("stage 3 keeps the vision encoder frozen".into());
                }
            }
            PlanMode::Joint => {
                if kinds != [StageKind::JointQat] {
                    return bad(format!(
                        "joint mode runs a single JointQat stage, got {kinds:?}"
                    ));
                }
            }
        }
        Ok(())
    }
}
