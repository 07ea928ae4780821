use std::collections::BTreeMap;

use super::{AutodiffError, Param};

/// Adam-style optimizer with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    first: Vec<f32>,
    second: Vec<f32>,
}

impl OptimizerState {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn with_weight_decay(mut self, wd: f32) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every param and clears their grads.
    ///
    /// All params must carry a gradient; nothing is updated otherwise.
    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<(), AutodiffError> {
        for p in params.iter() {
            if p.tensor.grad().is_none() {
                return Err(AutodiffError::MissingGrad {
                    name: p.name.clone(),
                });
            }
            if let Some(m) = self.moments.get(&p.name) {
                if m.first.len() != p.tensor.numel() {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "optimizer_step",
                        detail: format!(
                            "moment buffer for {} has {} entries, parameter has {}",
                            p.name,
                            m.first.len(),
                            p.tensor.numel()
                        ),
                    });
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - (self.beta1 as f64).powi(t);
        let bc2 = 1.0 - (self.beta2 as f64).powi(t);
        for p in params.iter_mut() {
            let n = p.tensor.numel();
            let m = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| Moments {
                    first: vec![0.0; n],
                    second: vec![0.0; n],
                });
            let grad = p.tensor.grad().expect("checked above").to_vec();
            let data = p.tensor.data_mut();
            for i in 0..n {
                let g = grad[i];
                m.first[i] = self.beta1 * m.first[i] + (1.0 - self.beta1) * g;
                m.second[i] = self.beta2 * m.second[i] + (1.0 - self.beta2) * g * g;
                let mhat = m.first[i] as f64 / bc1;
                let vhat = m.second[i] as f64 / bc2;
                let update = mhat / (vhat.sqrt() + self.eps as f64);
                let decayed = data[i] as f64 * (1.0 - self.lr as f64 * self.weight_decay as f64);
                data[i] = (decayed - self.lr as f64 * update) as f32;
            }
            p.tensor.clear_grad();
        }
        Ok(())
    }
}

/// Free-function form of [`OptimizerState::step`].
pub fn optimizer_step(
    params: &mut [&mut Param],
    state: &mut OptimizerState,
) -> Result<(), AutodiffError> {
    state.step(params)
}
