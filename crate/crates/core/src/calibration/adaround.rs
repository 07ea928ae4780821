//! Adaptive rounding: each weight chooses between the grid point below and
//! the one above it, `w_hat = s * (floor + h - z)`, with `h` driven by a
//! rectified sigmoid of a free variable and pushed to `{0, 1}` by an annealed
//! regularizer `sum 1 - |2h - 1|^beta`.

use serde::{Deserialize, Serialize};

use super::clip::{gram, output_error};
use super::{CalibrationError, CalibrationSet, ClipRange};
use crate::autodiff::{OptimizerState, Param, Tensor};
use crate::quant::{QuantSpec, QuantizedTensor};

const ZETA: f64 = 1.1;
const GAMMA: f64 = -0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaRoundConfig {
    pub iterations: usize,
    pub learning_rate: f32,
    pub reg_weight_start: f64,
    pub reg_weight_end: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Hardened candidates are scored every this many iterations.
    pub eval_every: usize,
}

impl Default for AdaRoundConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            learning_rate: 1e-2,
            reg_weight_start: 0.01,
            reg_weight_end: 10.0,
            beta_start: 20.0,
            beta_end: 2.0,
            eval_every: 10,
        }
    }
}

impl AdaRoundConfig {
    pub fn with_iterations(mut self, iterations: usize) -> Self {
        self.iterations = iterations;
        self
    }

    /// Geometric interpolation from the start to the end values.
    fn schedule(&self, iteration: usize) -> (f64, f64) {
        let t = if self.iterations <= 1 {
            1.0
        } else {
            iteration as f64 / (self.iterations - 1) as f64
        };
        let geo = |a: f64, b: f64| a * (b / a).powf(t);
        (
            geo(self.reg_weight_start, self.reg_weight_end),
            geo(self.beta_start, self.beta_end),
        )
    }
}

/// Per-weight rounding variables and the regularizer state they were left in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundingMask {
    values: Vec<f32>,
    pub reg_weight: f64,
    pub beta: f64,
}

impl RoundingMask {
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn is_hard(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Rounds every variable to 0 or 1.
    pub fn harden(&mut self) {
        for v in &mut self.values {
            *v = if *v >= 0.5 { 1.0 } else { 0.0 };
        }
    }

    pub fn rounds_up(&self, i: usize) -> bool {
        self.values[i] >= 0.5
    }
}

#[derive(Clone, Debug)]
pub struct AdaRoundOutcome {
    pub mask: RoundingMask,
    pub quantized: QuantizedTensor,
    /// Block output MSE of the hardened mask.
    pub mse: f64,
    /// Block output MSE under nearest rounding with the same grid.
    pub nearest_mse: f64,
}

/// Mean squared block output error `mean ||(W_hat - W) x||^2 / d_out`.
pub fn block_mse(w: &Tensor, w_hat: &Tensor, calib: &CalibrationSet) -> f64 {
    let rows = w.shape()[0];
    let denom = (calib.sample_count() * rows).max(1) as f64;
    output_error(w, w_hat, &gram(calib.matrix())) / denom
}

/// Per-element grid geometry: the floor code and continuous target.
struct Grid {
    lower: Vec<u16>,
    target_frac: Vec<f64>,
    scale: Vec<f64>,
    zero: Vec<f64>,
}

fn grid_for(base: &QuantizedTensor, w: &Tensor, clip: Option<&ClipRange>) -> Grid {
    let params = base.group_params();
    let top = base.spec.max_code() as f64;
    let n = base.rows * base.cols;
    let mut g = Grid {
        lower: Vec::with_capacity(n),
        target_frac: Vec::with_capacity(n),
        scale: Vec::with_capacity(n),
        zero: Vec::with_capacity(n),
    };
    for i in 0..n {
        let (r, c) = (i / base.cols, i % base.cols);
        let p = params[base.group_of(r, c)];
        let x = match clip {
            Some(cl) => w.data()[i].clamp(cl.alpha, cl.beta),
            None => w.data()[i],
        };
        let t = x as f64 / p.scale as f64 + p.zero_point as f64;
        let lower = t.floor().clamp(0.0, top - 1.0);
        g.lower.push(lower as u16);
        g.target_frac.push((t - lower).clamp(0.0, 1.0));
        g.scale.push(p.scale as f64);
        g.zero.push(p.zero_point as f64);
    }
    g
}

fn rectified_sigmoid(v: f64) -> f64 {
    (1.0 / (1.0 + (-v).exp()) * (ZETA - GAMMA) + GAMMA).clamp(0.0, 1.0)
}

fn inverse_rectified_sigmoid(h: f64) -> f64 {
    let p = ((h - GAMMA) / (ZETA - GAMMA)).clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

fn hard_codes(grid: &Grid, up: impl Fn(usize) -> bool) -> Vec<u16> {
    grid.lower
        .iter()
        .enumerate()
        .map(|(i, &l)| l + u16::from(up(i)))
        .collect()
}

/// Learns up/down rounding for `w` on the grid of `QuantizedTensor::quantize(w, spec, clip)`.
///
/// The hardened mask with the lowest block MSE seen during optimization is
/// returned; nearest rounding is always among the candidates.
pub fn adaround_block(
    w: &Tensor,
    calib: &CalibrationSet,
    spec: &QuantSpec,
    clip: Option<&ClipRange>,
    cfg: &AdaRoundConfig,
) -> Result<AdaRoundOutcome, CalibrationError> {
    if cfg.iterations == 0 {
        return Err(CalibrationError::NoIterations);
    }
    if calib.sample_count() == 0 {
        return Err(CalibrationError::EmptyCalibration);
    }
    let base = QuantizedTensor::quantize(w, spec, clip)?;
    if base.cols != calib.dim() {
        return Err(CalibrationError::DimMismatch {
            layer: calib.layer_name.clone(),
            weight_in: base.cols,
            input_dim: calib.dim(),
        });
    }
    let (rows, cols) = (base.rows, base.cols);
    let n = rows * cols;
    let grid = grid_for(&base, w, clip);
    let g = gram(calib.matrix());
    let denom = (calib.sample_count() * rows).max(1) as f64;
    let wd: Vec<f64> = w.data().iter().map(|&x| x as f64).collect();

    let score = |codes: &[u16]| -> f64 {
        let q = base
            .clone()
            .with_codes(codes.to_vec())
            .expect("codes in range");
        output_error(w, &q.dequantize(), &g) / denom
    };

    let nearest_codes = base.codes.clone();
    let nearest_mse = score(&nearest_codes);
    let mut best_codes = nearest_codes;
    let mut best_mse = nearest_mse;

    let init: Vec<f32> = grid
        .target_frac
        .iter()
        .map(|&f| inverse_rectified_sigmoid(f) as f32)
        .collect();
    let mut v = Param::new("adaround.v", Tensor::new(vec![n], init)?);
    let mut opt = OptimizerState::new(cfg.learning_rate);
    let mut h = vec![0.0f64; n];
    let mut diff = vec![0.0f64; n];
    let mut grad = vec![0.0f32; n];
    let (mut reg_weight, mut beta) = cfg.schedule(0);

    for it in 0..cfg.iterations {
        (reg_weight, beta) = cfg.schedule(it);
        for i in 0..n {
            h[i] = rectified_sigmoid(v.tensor.data()[i] as f64);
            let w_hat = grid.scale[i] * (grid.lower[i] as f64 + h[i] - grid.zero[i]);
            diff[i] = w_hat - wd[i];
        }
        let mut mse = 0.0;
        let mut reg = 0.0;
        for r in 0..rows {
            let d = &diff[r * cols..(r + 1) * cols];
            for a in 0..cols {
                let gd: f64 = g[a * cols..(a + 1) * cols]
                    .iter()
                    .zip(d)
                    .map(|(x, y)| x * y)
                    .sum();
                mse += d[a] * gd;
                let i = r * cols + a;
                let u = 2.0 * h[i] - 1.0;
                reg += 1.0 - u.abs().powf(beta);
                let d_mse = 2.0 * gd / denom;
                let d_reg = -beta * u.abs().powf(beta - 1.0) * u.signum() * 2.0 / n as f64;
                let x = v.tensor.data()[i] as f64;
                let sig = 1.0 / (1.0 + (-x).exp());
                let raw = sig * (ZETA - GAMMA) + GAMMA;
                let dh_dv = if raw > 0.0 && raw < 1.0 {
                    sig * (1.0 - sig) * (ZETA - GAMMA)
                } else {
                    0.0
                };
                grad[i] = ((d_mse * grid.scale[i] + reg_weight * d_reg) * dh_dv) as f32;
            }
        }
        let loss = mse / denom + reg_weight * reg / n as f64;
        if !loss.is_finite() || grad.iter().any(|x| !x.is_finite()) {
            return Err(CalibrationError::NonFiniteLoss { iteration: it });
        }
        v.tensor.accumulate_grad(&grad)?;
        opt.step(&mut [&mut v])?;

        if (it + 1) % cfg.eval_every.max(1) == 0 || it + 1 == cfg.iterations {
            let codes = hard_codes(&grid, |i| {
                rectified_sigmoid(v.tensor.data()[i] as f64) >= 0.5
            });
            let m = score(&codes);
            if m < best_mse {
                best_mse = m;
                best_codes = codes;
            }
        }
    }

    let values = best_codes
        .iter()
        .zip(&grid.lower)
        .map(|(&q, &l)| if q > l { 1.0 } else { 0.0 })
        .collect();
    debug_assert!(best_codes
        .iter()
        .zip(&base.codes)
        .all(|(&a, &b)| a.abs_diff(b) <= 1));
    let quantized = base.with_codes(best_codes)?;
    Ok(AdaRoundOutcome {
        mask: RoundingMask {
            values,
            reg_weight,
            beta,
        },
        quantized,
        mse: best_mse,
        nearest_mse,
    })
}
