use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{LayerCalibration, StageKind, StepRecord, TrainError, TrainReport};
use crate::autodiff::{OptimizerState, Tape};
use crate::calibration::{
    adaround_block, block_mse, capture_activations, search_asymmetric_clip, AdaRoundConfig,
    ClipRange,
};
use crate::data::Batch;
use crate::distill::{
    cross_entropy_var, distill_loss_var, estimate_gamma, total_loss_var, DistillConfig,
};
use crate::model::{LayerQuant, Module, ToyVlm};
use crate::quant::{fake_quantize_values, QuantSpec, QuantizedTensor};

/// Student, frozen teacher and the progress flags stage ordering relies on.
#[derive(Clone, Debug)]
pub struct PipelineState {
    pub student: ToyVlm,
    pub teacher: ToyVlm,
    pub vision_quantized: bool,
    pub language_clips: Option<BTreeMap<String, ClipRange>>,
    /// Next global step index.
    pub next_step: usize,
    pub report: TrainReport,
}

impl PipelineState {
    pub fn new(full_precision: &ToyVlm) -> Self {
        Self {
            student: full_precision.clone(),
            teacher: full_precision.clone(),
            vision_quantized: false,
            language_clips: None,
            next_step: 0,
            report: TrainReport::default(),
        }
    }
}

/// Stage-local training settings.
#[derive(Clone, Debug)]
pub struct LoopSettings {
    pub stage: usize,
    pub kind: StageKind,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub distill: DistillConfig,
    pub seed: u64,
}

const VISION_LAYERS: [&str; 2] = ["vision.fc1", "vision.fc2"];
const LANGUAGE_LAYERS: [&str; 2] = ["language.fc1", "language.fc2"];

/// Epoch-shuffled index stream over `0..n`.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            pos: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            let take = (k - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

/// Leading `fraction` of `train`, rounded down.
pub fn data_subset(train: &Batch, fraction: f64) -> Batch {
    train.head((train.len() as f64 * fraction).floor() as usize)
}

/// The batches `gamma` is estimated on: the first `steps` batches of the
/// stage's own sample stream.
fn gamma_batches(data: &Batch, steps: usize, batch_size: usize, seed: u64) -> Vec<Batch> {
    let mut sampler = Sampler::new(data.len(), seed);
    (0..steps)
        .map(|_| data.select(&sampler.next(batch_size)))
        .collect()
}

/// Trains `trainable` for `settings.steps` steps on `lambda * KL-mix + zeta * CE`
/// against the frozen teacher, appending one record per step.
pub fn train_loop(
    state: &mut PipelineState,
    data: &Batch,
    trainable: &[Module],
    settings: &LoopSettings,
) -> Result<Option<f64>, TrainError> {
    if settings.steps == 0 || data.is_empty() {
        return Ok(None);
    }
    let cfg = &settings.distill;
    let gamma = match cfg.gamma {
        Some(g) => g,
        None => {
            let batches = gamma_batches(
                data,
                cfg.gamma_estimation_steps.max(1),
                settings.batch_size,
                settings.seed,
            );
            estimate_gamma(&state.teacher, &batches)?
        }
    };
    let mut sampler = Sampler::new(data.len(), settings.seed);
    let mut opt = OptimizerState::new(settings.learning_rate);
    for _ in 0..settings.steps {
        let batch = data.select(&sampler.next(settings.batch_size));
        let teacher_logits = state.teacher.logits(&batch)?;
        let mut tape = Tape::new();
        let fwd = state.student.forward(&mut tape, &batch, trainable)?;
        let d = distill_loss_var(&mut tape, fwd.logits, &teacher_logits, gamma)?;
        let c = cross_entropy_var(&mut tape, fwd.logits, &batch.labels)?;
        let total = total_loss_var(&mut tape, d, c, cfg)?;
        let grads = tape.backward(total)?;
        state.student.accumulate_grads(&fwd, &grads)?;

        let record = StepRecord {
            step: state.next_step,
            stage: settings.stage,
            kind: settings.kind,
            total_loss: tape.scalar(total) as f64,
            distill_loss: tape.scalar(d) as f64,
            ce_loss: tape.scalar(c) as f64,
            learning_rate: settings.learning_rate,
            gamma,
            grad_mean_abs: Module::ALL
                .iter()
                .map(|&m| (m, state.student.mean_abs_grad(m)))
                .collect(),
        };
        if !record.total_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                stage: settings.stage,
                step: state.next_step,
            });
        }
        let mut params = state.student.trainable_params_mut(trainable);
        opt.step(&mut params)?;
        state.student.clear_grads();
        state.report.steps.push(record);
        state.next_step += 1;
    }
    Ok(Some(gamma))
}

fn calib_error(
    layer: &str,
) -> impl FnOnce(crate::calibration::CalibrationError) -> TrainError + '_ {
    move |source| TrainError::Calibration {
        layer: layer.to_string(),
        source,
    }
}

/// Clip search for `layer` on its inputs captured from `model`.
fn calibrate_clip(
    model: &ToyVlm,
    layer: &str,
    calib: &Batch,
    spec: &QuantSpec,
    grid_steps: usize,
) -> Result<
    (
        crate::calibration::CalibrationSet,
        crate::calibration::ClipSearch,
    ),
    TrainError,
> {
    let set = capture_activations(model, layer, calib).map_err(calib_error(layer))?;
    let w = &model.layer(layer)?.weight.tensor;
    let search = search_asymmetric_clip(w, &set, spec, grid_steps).map_err(calib_error(layer))?;
    Ok((set, search))
}

/// Stage 1: clip search plus adaptive rounding for every vision layer on
/// inputs captured from the full-precision model; the layers are then frozen.
pub fn stage1_quantize_vision(
    state: &mut PipelineState,
    calib: &Batch,
    spec: &QuantSpec,
    grid_steps: usize,
    adaround: &AdaRoundConfig,
) -> Result<Vec<LayerCalibration>, TrainError> {
    if state.vision_quantized
        || state
            .student
            .module_layers(Module::Vision)
            .iter()
            .any(|l| l.quant != LayerQuant::Float)
    {
        return Err(TrainError::OutOfOrder(
            "stage 1 expects a full-precision vision encoder".into(),
        ));
    }
    let mut records = Vec::new();
    for layer in VISION_LAYERS {
        let (set, search) = calibrate_clip(&state.teacher, layer, calib, spec, grid_steps)?;
        let w = state.teacher.layer(layer)?.weight.tensor.clone();
        let out = adaround_block(&w, &set, spec, Some(&search.range), adaround)
            .map_err(calib_error(layer))?;
        let rtn = fake_quantize_values(&w, spec, None)?;
        records.push(LayerCalibration {
            layer: layer.to_string(),
            alpha: search.range.alpha,
            beta: search.range.beta,
            clip_objective: search.objective,
            unclipped_objective: search.unclipped_objective,
            block_mse: Some(out.mse),
            rtn_block_mse: block_mse(&w, &rtn, &set),
        });
        state.student.fix_layer(layer, out.quantized)?;
    }
    state.vision_quantized = true;
    Ok(records)
}

/// Stage 2: trains the projector alone on the leading `fraction` of `train`.
pub fn stage2_warmup_projector(
    state: &mut PipelineState,
    train: &Batch,
    fraction: f64,
    settings: &LoopSettings,
) -> Result<Option<f64>, TrainError> {
    if !state.vision_quantized {
        return Err(TrainError::OutOfOrder(
            "stage 2 requires the vision encoder to be quantized by stage 1 first".into(),
        ));
    }
    let subset = data_subset(train, fraction);
    train_loop(state, &subset, &[Module::Projector], settings)
}

/// Clip search for the language layers on activations of the current student.
pub fn calibrate_language(
    state: &mut PipelineState,
    calib: &Batch,
    spec: &QuantSpec,
    grid_steps: usize,
) -> Result<Vec<LayerCalibration>, TrainError> {
    let mut clips = BTreeMap::new();
    let mut records = Vec::new();
    for layer in LANGUAGE_LAYERS {
        let (set, search) = calibrate_clip(&state.student, layer, calib, spec, grid_steps)?;
        let w = &state.student.layer(layer)?.weight.tensor;
        let rtn = fake_quantize_values(w, spec, None)?;
        records.push(LayerCalibration {
            layer: layer.to_string(),
            alpha: search.range.alpha,
            beta: search.range.beta,
            clip_objective: search.objective,
            unclipped_objective: search.unclipped_objective,
            block_mse: None,
            rtn_block_mse: block_mse(w, &rtn, &set),
        });
        clips.insert(layer.to_string(), search.range);
    }
    state.language_clips = Some(clips);
    Ok(records)
}

/// Stage 3: fake-quantized QAT of the language head together with the
/// projector; the language layers are frozen at their final quantization.
pub fn stage3_qat_language(
    state: &mut PipelineState,
    train: &Batch,
    spec: &QuantSpec,
    settings: &LoopSettings,
) -> Result<Option<f64>, TrainError> {
    if !state.vision_quantized {
        return Err(TrainError::OutOfOrder(
            "stage 3 requires the vision encoder to be quantized by stage 1 first".into(),
        ));
    }
    let clips = state
        .language_clips
        .clone()
        .ok_or_else(|| TrainError::MissingClips {
            layers: LANGUAGE_LAYERS.iter().map(|s| s.to_string()).collect(),
        })?;
    for layer in LANGUAGE_LAYERS {
        let clip = clips
            .get(layer)
            .cloned()
            .ok_or_else(|| TrainError::MissingClips {
                layers: vec![layer.to_string()],
            })?;
        state.student.set_quant(
            layer,
            LayerQuant::FakeQuant {
                spec: *spec,
                clip: Some(clip),
            },
        )?;
    }
    let gamma = train_loop(
        state,
        train,
        &[Module::Projector, Module::Language],
        settings,
    )?;
    state.student.finalize_fake_quant()?;
    Ok(gamma)
}

/// Joint baseline: both towers fake-quantized from step 0 with clips searched
/// on full-precision activations, all modules trained together.
pub fn joint_qat(
    state: &mut PipelineState,
    train: &Batch,
    calib: &Batch,
    vision_spec: &QuantSpec,
    language_spec: &QuantSpec,
    grid_steps: usize,
    settings: &LoopSettings,
) -> Result<(Vec<LayerCalibration>, Option<f64>), TrainError> {
    let mut records = Vec::new();
    for (layer, spec) in VISION_LAYERS
        .iter()
        .map(|l| (*l, vision_spec))
        .chain(LANGUAGE_LAYERS.iter().map(|l| (*l, language_spec)))
    {
        let (set, search) = calibrate_clip(&state.teacher, layer, calib, spec, grid_steps)?;
        let w = &state.teacher.layer(layer)?.weight.tensor;
        let rtn = fake_quantize_values(w, spec, None)?;
        records.push(LayerCalibration {
            layer: layer.to_string(),
            alpha: search.range.alpha,
            beta: search.range.beta,
            clip_objective: search.objective,
            unclipped_objective: search.unclipped_objective,
            block_mse: None,
            rtn_block_mse: block_mse(w, &rtn, &set),
        });
        state.student.set_quant(
            layer,
            LayerQuant::FakeQuant {
                spec: *spec,
                clip: Some(search.range),
            },
        )?;
    }
    let gamma = train_loop(state, train, &Module::ALL, settings)?;
    state.student.finalize_fake_quant()?;
    state.vision_quantized = true;
    Ok((records, gamma))
}

/// Round-to-nearest baseline: every vision and language layer quantized with
/// no clipping, calibration or training.
pub fn rtn_quantize(model: &ToyVlm, spec: &QuantSpec) -> Result<ToyVlm, TrainError> {
    let mut out = model.clone();
    for layer in VISION_LAYERS.iter().chain(LANGUAGE_LAYERS.iter()) {
        let q = QuantizedTensor::quantize(&model.layer(layer)?.weight.tensor, spec, None)?;
        out.fix_layer(layer, q)?;
    }
    Ok(out)
}
