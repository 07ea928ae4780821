use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::StageKind;
use crate::model::Module;

/// One optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Global step index across all stages.
    pub step: usize,
    pub stage: usize,
    pub kind: StageKind,
    pub total_loss: f64,
    pub distill_loss: f64,
    pub ce_loss: f64,
    pub learning_rate: f32,
    pub gamma: f64,
    /// Mean absolute gradient per module; 0 for frozen modules.
    pub grad_mean_abs: BTreeMap<Module, f64>,
}

/// Calibration outcome of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCalibration {
    pub layer: String,
    pub alpha: f32,
    pub beta: f32,
    pub clip_objective: f64,
    pub unclipped_objective: f64,
    /// Block reconstruction MSE after adaptive rounding, when it ran.
    pub block_mse: Option<f64>,
    /// Block MSE of plain nearest rounding without clipping.
    pub rtn_block_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub index: usize,
    pub kind: StageKind,
    pub steps: usize,
    pub wall_time_s: f64,
    pub eval_accuracy: f64,
    pub gamma: Option<f64>,
    pub calibration: Vec<LayerCalibration>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub stages: Vec<StageSummary>,
    pub teacher_accuracy: f64,
    pub final_accuracy: f64,
    pub average_bitwidth: BTreeMap<Module, f64>,
    pub container_path: Option<String>,
    pub container_bytes: Option<u64>,
}

impl TrainReport {
    /// Writes one JSON object per step.
    pub fn write_steps_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for s in &self.steps {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Every field except the per-step records.
    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "stages": self.stages,
            "teacher_accuracy": self.teacher_accuracy,
            "final_accuracy": self.final_accuracy,
            "average_bitwidth": self.average_bitwidth,
            "container_path": self.container_path,
            "container_bytes": self.container_bytes,
            "logged_steps": self.steps.len(),
        })
    }
}

/// Mean absolute gradient per module at each logged step.
pub fn gradient_monitor(report: &TrainReport) -> BTreeMap<Module, Vec<f64>> {
    let mut out: BTreeMap<Module, Vec<f64>> =
        Module::ALL.iter().map(|&m| (m, Vec::new())).collect();
    for s in &report.steps {
        for m in Module::ALL {
            out.get_mut(&m)
                .expect("all modules present")
                .push(s.grad_mean_abs.get(&m).copied().unwrap_or(0.0));
        }
    }
    out
}

/// Series mean, 0 for an empty series.
pub fn series_mean(series: &[f64]) -> f64 {
    if series.is_empty() {
        0.0
    } else {
        series.iter().sum::<f64>() / series.len() as f64
    }
}
