//! Two-tower toy vision-language classifier.
//!
//! ```text
//! image [64] -> vision.fc1 -> relu -> vision.fc2 -> projector --+
//!                                                               concat -> language.fc1 -> relu -> language.fc2 -> logits
//! token -> language.embed ---------------------------------------+
//! ```
//!
//! Linear weights are stored `[d_out, d_in]` and applied as `x W^T + b`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Gradients, Param, Tape, Tensor, Var};
use crate::calibration::ClipRange;
use crate::data::Batch;
use crate::quant::{fake_quantize, QuantError, QuantSpec, QuantizedTensor};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("unknown layer {0:?}")]
    UnknownLayer(String),
    #[error("batch does not fit the model: {0}")]
    BadBatch(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Module {
    Vision,
    Projector,
    Language,
}

impl Module {
    pub const ALL: [Module; 3] = [Module::Vision, Module::Projector, Module::Language];

    pub fn name(self) -> &'static str {
        match self {
            Module::Vision => "vision",
            Module::Projector => "projector",
            Module::Language => "language",
        }
    }

    pub fn of_layer(layer: &str) -> Module {
        if layer.starts_with("vision") {
            Module::Vision
        } else if layer.starts_with("projector") {
            Module::Projector
        } else {
            Module::Language
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_dim: usize,
    pub vision_hidden: usize,
    pub vision_out: usize,
    pub projector_out: usize,
    pub tokens: usize,
    pub token_dim: usize,
    pub language_hidden: usize,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_dim: 64,
            vision_hidden: 128,
            vision_out: 32,
            projector_out: 32,
            tokens: 8,
            token_dim: 8,
            language_hidden: 16,
            classes: 16,
        }
    }
}

/// How a linear layer's weight enters the forward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerQuant {
    Float,
    /// Quantize-dequantize on every forward pass with a straight-through gradient.
    FakeQuant {
        spec: QuantSpec,
        clip: Option<ClipRange>,
    },
    /// Frozen quantized weight; the float weight holds its dequantized values.
    Fixed(QuantizedTensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub weight: Param,
    pub bias: Param,
    pub quant: LayerQuant,
}

impl Linear {
    fn new(name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / d_in as f32).sqrt();
        let w = (0..d_in * d_out)
            .map(|_| std * rng.sample::<f32, _>(StandardNormal))
            .collect();
        Self {
            name: name.to_string(),
            weight: Param::new(
                format!("{name}.weight"),
                Tensor::new(vec![d_out, d_in], w).expect("weight shape"),
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(vec![d_out])),
            quant: LayerQuant::Float,
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.tensor.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.tensor.shape()[0]
    }

    /// Weight as used by inference: fake-quantized values for `FakeQuant`.
    pub fn effective_weight(&self) -> Result<Tensor, QuantError> {
        match &self.quant {
            LayerQuant::FakeQuant { spec, clip } => {
                crate::quant::fake_quantize_values(&self.weight.tensor, spec, clip.as_ref())
            }
            _ => Ok(self.weight.tensor.clone()),
        }
    }
}

/// Records of one forward pass.
pub struct Forward {
    pub logits: Var,
    /// Input matrix of every linear layer, keyed by layer name.
    pub layer_inputs: BTreeMap<String, Var>,
    params: Vec<(String, Var)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyVlm {
    pub config: ModelConfig,
    pub vision_fc1: Linear,
    pub vision_fc2: Linear,
    pub projector: Linear,
    pub embed: Param,
    pub language_fc1: Linear,
    pub language_fc2: Linear,
}

pub const LAYER_NAMES: [&str; 5] = [
    "vision.fc1",
    "vision.fc2",
    "projector",
    "language.fc1",
    "language.fc2",
];

impl ToyVlm {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let vision_fc1 = Linear::new("vision.fc1", c.image_dim, c.vision_hidden, &mut rng);
        let vision_fc2 = Linear::new("vision.fc2", c.vision_hidden, c.vision_out, &mut rng);
        let projector = Linear::new("projector", c.vision_out, c.projector_out, &mut rng);
        let emb = (0..c.tokens * c.token_dim)
            .map(|_| rng.sample::<f32, _>(StandardNormal))
            .collect();
        let embed = Param::new(
            "language.embed",
            Tensor::new(vec![c.tokens, c.token_dim], emb).expect("embedding shape"),
        );
        let language_fc1 = Linear::new(
            "language.fc1",
            c.projector_out + c.token_dim,
            c.language_hidden,
            &mut rng,
        );
        let language_fc2 = Linear::new("language.fc2", c.language_hidden, c.classes, &mut rng);
        Self {
            config,
            vision_fc1,
            vision_fc2,
            projector,
            embed,
            language_fc1,
            language_fc2,
        }
    }

    pub fn layer_names(&self) -> &'static [&'static str] {
        &LAYER_NAMES
    }

    pub fn layers(&self) -> [&Linear; 5] {
        [
            &self.vision_fc1,
            &self.vision_fc2,
            &self.projector,
            &self.language_fc1,
            &self.language_fc2,
        ]
    }

    fn layers_mut(&mut self) -> [&mut Linear; 5] {
        [
            &mut self.vision_fc1,
            &mut self.vision_fc2,
            &mut self.projector,
            &mut self.language_fc1,
            &mut self.language_fc2,
        ]
    }

    pub fn layer(&self, name: &str) -> Result<&Linear, ModelError> {
        self.layers()
            .into_iter()
            .find(|l| l.name == name)
            .ok_or_else(|| ModelError::UnknownLayer(name.to_string()))
    }

    pub fn layer_mut(&mut self, name: &str) -> Result<&mut Linear, ModelError> {
        self.layers_mut()
            .into_iter()
            .find(|l| l.name == name)
            .ok_or_else(|| ModelError::UnknownLayer(name.to_string()))
    }

    /// Quantizable linear layers of `module`.
    pub fn module_layers(&self, module: Module) -> Vec<&Linear> {
        self.layers()
            .into_iter()
            .filter(|l| Module::of_layer(&l.name) == module)
            .collect()
    }

    pub fn params(&self, module: Module) -> Vec<&Param> {
        let mut out: Vec<&Param> = Vec::new();
        for l in self.module_layers(module) {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        if module == Module::Language {
            out.push(&self.embed);
        }
        out
    }

    pub fn params_mut(&mut self, module: Module) -> Vec<&mut Param> {
        self.collect_params_mut(&[module], false)
    }

    /// Params of `modules` that can receive gradients: those of fixed
    /// quantized layers are excluded.
    pub fn trainable_params_mut(&mut self, modules: &[Module]) -> Vec<&mut Param> {
        self.collect_params_mut(modules, true)
    }

    fn collect_params_mut(&mut self, modules: &[Module], skip_fixed: bool) -> Vec<&mut Param> {
        let Self {
            vision_fc1,
            vision_fc2,
            projector,
            embed,
            language_fc1,
            language_fc2,
            ..
        } = self;
        let want = |m: Module| modules.contains(&m);
        let mut layers: Vec<&mut Linear> = Vec::new();
        if want(Module::Vision) {
            layers.push(vision_fc1);
            layers.push(vision_fc2);
        }
        if want(Module::Projector) {
            layers.push(projector);
        }
        if want(Module::Language) {
            layers.push(language_fc1);
            layers.push(language_fc2);
        }
        let mut out: Vec<&mut Param> = Vec::new();
        for l in layers {
            if skip_fixed && matches!(l.quant, LayerQuant::Fixed(_)) {
                continue;
            }
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        if want(Module::Language) {
            out.push(embed);
        }
        out
    }

    pub fn all_params(&self) -> Vec<&Param> {
        Module::ALL.iter().flat_map(|&m| self.params(m)).collect()
    }

    fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        if self.embed.name == name {
            return Some(&mut self.embed);
        }
        self.layers_mut().into_iter().find_map(|l| {
            if l.weight.name == name {
                Some(&mut l.weight)
            } else if l.bias.name == name {
                Some(&mut l.bias)
            } else {
                None
            }
        })
    }

    /// CRC over the values of every parameter in `module`.
    pub fn module_checksum(&self, module: Module) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for p in self.params(module) {
            h.update(p.name.as_bytes());
            h.update(&p.tensor.checksum().to_le_bytes());
        }
        h.finalize()
    }

    pub fn parameter_count(&self, module: Module) -> usize {
        self.params(module).iter().map(|p| p.tensor.numel()).sum()
    }

    fn check_batch(&self, batch: &Batch) -> Result<(), ModelError> {
        if batch.images.dims2().map(|(_, d)| d) != Some(self.config.image_dim) {
            return Err(ModelError::BadBatch(format!(
                "images have shape {:?}, expected [n, {}]",
                batch.images.shape(),
                self.config.image_dim
            )));
        }
        if let Some(&t) = batch.tokens.iter().find(|&&t| t >= self.config.tokens) {
            return Err(ModelError::BadBatch(format!(
                "token {t} outside vocabulary of {}",
                self.config.tokens
            )));
        }
        Ok(())
    }

    fn record_param(
        &self,
        tape: &mut Tape,
        p: &Param,
        trainable: bool,
        params: &mut Vec<(String, Var)>,
    ) -> Var {
        if trainable {
            let v = tape.leaf(&p.tensor.clone().with_grad());
            params.push((p.name.clone(), v));
            v
        } else {
            tape.constant(&p.tensor)
        }
    }

    fn linear(
        &self,
        tape: &mut Tape,
        layer: &Linear,
        x: Var,
        trainable: &[Module],
        fwd: &mut Forward,
    ) -> Result<Var, ModelError> {
        fwd.layer_inputs.insert(layer.name.clone(), x);
        let train = trainable.contains(&Module::of_layer(&layer.name))
            && !matches!(layer.quant, LayerQuant::Fixed(_));
        let w = self.record_param(tape, &layer.weight, train, &mut fwd.params);
        let w = match &layer.quant {
            LayerQuant::FakeQuant { spec, clip } => fake_quantize(tape, w, spec, clip.as_ref())?,
            _ => w,
        };
        let b = self.record_param(tape, &layer.bias, train, &mut fwd.params);
        let wt = tape.transpose(w)?;
        let y = tape.matmul(x, wt)?;
        Ok(tape.add(y, b)?)
    }

    /// Records the forward pass; parameters of `trainable` modules become
    /// gradient-carrying leaves, everything else is constant.
    pub fn forward(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        trainable: &[Module],
    ) -> Result<Forward, ModelError> {
        self.check_batch(batch)?;
        let x = tape.constant(&batch.images);
        let mut fwd = Forward {
            logits: x,
            layer_inputs: BTreeMap::new(),
            params: Vec::new(),
        };
        let h = self.linear(tape, &self.vision_fc1, x, trainable, &mut fwd)?;
        let h = tape.relu(h);
        let v = self.linear(tape, &self.vision_fc2, h, trainable, &mut fwd)?;
        let p = self.linear(tape, &self.projector, v, trainable, &mut fwd)?;

        let mut onehot = vec![0.0f32; batch.len() * self.config.tokens];
        for (i, &t) in batch.tokens.iter().enumerate() {
            onehot[i * self.config.tokens + t] = 1.0;
        }
        let onehot = tape.constant(&Tensor::new(vec![batch.len(), self.config.tokens], onehot)?);
        let train_lang = trainable.contains(&Module::Language);
        let emb = self.record_param(tape, &self.embed, train_lang, &mut fwd.params);
        let e = tape.matmul(onehot, emb)?;

        let joined = tape.concat(&[p, e])?;
        let h = self.linear(tape, &self.language_fc1, joined, trainable, &mut fwd)?;
        let h = tape.relu(h);
        fwd.logits = self.linear(tape, &self.language_fc2, h, trainable, &mut fwd)?;
        Ok(fwd)
    }

    /// Inference logits `[n, classes]`.
    pub fn logits(&self, batch: &Batch) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, batch, &[])?;
        Ok(tape.value(fwd.logits).clone())
    }

    /// Input matrix seen by `layer` on `batch`.
    pub fn layer_input(&self, layer: &str, batch: &Batch) -> Result<Tensor, ModelError> {
        self.layer(layer)?;
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, batch, &[])?;
        Ok(tape.value(fwd.layer_inputs[layer]).clone())
    }

    /// Top-1 accuracy over `data`, evaluated in chunks.
    pub fn accuracy(&self, data: &Batch) -> Result<f64, ModelError> {
        if data.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0usize;
        let mut offset = 0usize;
        for chunk in data.chunks(256) {
            let logits = self.logits(&chunk)?;
            for i in 0..chunk.len() {
                let row = logits.row(i);
                let pred = row
                    .iter()
                    .enumerate()
                    .fold(
                        (0, f32::NEG_INFINITY),
                        |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc },
                    )
                    .0;
                correct += usize::from(pred == data.labels[offset + i]);
            }
            offset += chunk.len();
        }
        Ok(correct as f64 / data.len() as f64)
    }

    /// Accumulates the gradients recorded by `fwd` into the model's params.
    pub fn accumulate_grads(&mut self, fwd: &Forward, grads: &Gradients) -> Result<(), ModelError> {
        for (name, var) in &fwd.params {
            if let Some(g) = grads.get(*var) {
                let p = self
                    .param_mut(name)
                    .ok_or_else(|| ModelError::UnknownLayer(name.clone()))?;
                p.tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Mean absolute gradient currently held by `module`'s params, 0 if none.
    pub fn mean_abs_grad(&self, module: Module) -> f64 {
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for p in self.params(module) {
            if let Some(g) = p.tensor.grad() {
                sum += g.iter().map(|x| x.abs() as f64).sum::<f64>();
                n += g.len();
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    pub fn clear_grads(&mut self) {
        for m in Module::ALL {
            for p in self.params_mut(m) {
                p.tensor.clear_grad();
            }
        }
    }

    pub fn set_quant(&mut self, layer: &str, quant: LayerQuant) -> Result<(), ModelError> {
        self.layer_mut(layer)?.quant = quant;
        Ok(())
    }

    /// Freezes `layer` at `q`; its float weight is replaced by `dequantize(q)`.
    pub fn fix_layer(&mut self, layer: &str, q: QuantizedTensor) -> Result<(), ModelError> {
        let l = self.layer_mut(layer)?;
        let deq = q.dequantize();
        if deq.shape() != l.weight.tensor.shape() {
            return Err(ModelError::BadBatch(format!(
                "quantized shape {:?} does not match layer {layer} weight {:?}",
                deq.shape(),
                l.weight.tensor.shape()
            )));
        }
        l.weight.tensor = deq;
        l.quant = LayerQuant::Fixed(q);
        Ok(())
    }

    /// Replaces every `FakeQuant` layer by the quantization of its current weight.
    pub fn finalize_fake_quant(&mut self) -> Result<(), ModelError> {
        for name in LAYER_NAMES {
            if let LayerQuant::FakeQuant { spec, clip } = &self.layer(name)?.quant {
                let q = QuantizedTensor::quantize(
                    &self.layer(name)?.weight.tensor,
                    spec,
                    clip.as_ref(),
                )?;
                self.fix_layer(name, q)?;
            }
        }
        Ok(())
    }

    /// True when every linear layer of `module` holds a fixed quantized weight.
    pub fn is_quantized(&self, module: Module) -> bool {
        self.module_layers(module)
            .iter()
            .all(|l| matches!(l.quant, LayerQuant::Fixed(_)))
    }
}
