use serde::{Deserialize, Serialize};

use super::{CalibrationError, CalibrationSet, ClipRange};
use crate::autodiff::Tensor;
use crate::quant::{fake_quantize_values, QuantSpec};

/// One evaluated cell of the clip grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipCandidate {
    pub alpha_fraction: f64,
    pub beta_fraction: f64,
    pub alpha: f32,
    pub beta: f32,
    pub objective: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipSearch {
    pub range: ClipRange,
    pub objective: f64,
    /// Objective of the full `(min W, max W)` cell.
    pub unclipped_objective: f64,
    pub grid: Vec<ClipCandidate>,
}

/// `steps` evenly spaced fractions from 0.5 to 1.0 inclusive.
pub fn clip_fractions(steps: usize) -> Vec<f64> {
    match steps {
        0 => vec![],
        1 => vec![1.0],
        n => (0..n)
            .map(|k| 0.5 + 0.5 * k as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Input second-moment matrix `X^T X` in f64.
pub(crate) fn gram(x: &Tensor) -> Vec<f64> {
    let (n, d) = x.dims2().expect("calibration matrix is 2-d");
    let mut g = vec![0.0f64; d * d];
    for s in 0..n {
        let row = &x.data()[s * d..(s + 1) * d];
        for i in 0..d {
            let xi = row[i] as f64;
            if xi == 0.0 {
                continue;
            }
            for j in 0..d {
                g[i * d + j] += xi * row[j] as f64;
            }
        }
    }
    g
}

/// `sum_x ||W_hat x - W x||^2` expressed through the Gram matrix.
pub(crate) fn output_error(w: &Tensor, w_hat: &Tensor, gram: &[f64]) -> f64 {
    let (rows, cols) = w.dims2().expect("weight is 2-d");
    let mut total = 0.0;
    let mut d = vec![0.0f64; cols];
    for r in 0..rows {
        let row = r * cols..(r + 1) * cols;
        for (dc, (&h, &x)) in d
            .iter_mut()
            .zip(w_hat.data()[row.clone()].iter().zip(&w.data()[row]))
        {
            *dc = h as f64 - x as f64;
        }
        for i in 0..cols {
            if d[i] == 0.0 {
                continue;
            }
            let gi = &gram[i * cols..(i + 1) * cols];
            total += d[i] * gi.iter().zip(&d).map(|(g, dj)| g * dj).sum::<f64>();
        }
    }
    total
}

fn check_dims(w: &Tensor, calib: &CalibrationSet) -> Result<(), CalibrationError> {
    let (_, cols) = w.dims2().ok_or_else(|| CalibrationError::DimMismatch {
        layer: calib.layer_name.clone(),
        weight_in: 0,
        input_dim: calib.dim(),
    })?;
    if cols != calib.dim() {
        return Err(CalibrationError::DimMismatch {
            layer: calib.layer_name.clone(),
            weight_in: cols,
            input_dim: calib.dim(),
        });
    }
    Ok(())
}

/// Squared output error of the quantized (and optionally clipped) layer over
/// the calibration inputs.
pub fn clip_objective(
    w: &Tensor,
    calib: &CalibrationSet,
    spec: &QuantSpec,
    clip: Option<&ClipRange>,
) -> Result<f64, CalibrationError> {
    check_dims(w, calib)?;
    let g = gram(calib.matrix());
    let w_hat = fake_quantize_values(w, spec, clip)?;
    Ok(output_error(w, &w_hat, &g))
}

/// Grid search for per-layer clip bounds minimizing the quantized layer's
/// output error on `calib`.
///
/// Candidates are `alpha = fa * min(W)`, `beta = fb * max(W)` for fractions
/// `fa, fb` in [`clip_fractions`]. Exact ties go to the wider range.
pub fn search_asymmetric_clip(
    w: &Tensor,
    calib: &CalibrationSet,
    spec: &QuantSpec,
    grid_steps: usize,
) -> Result<ClipSearch, CalibrationError> {
    if calib.sample_count() == 0 {
        return Err(CalibrationError::EmptyCalibration);
    }
    if grid_steps < 2 {
        return Err(CalibrationError::GridTooSmall(grid_steps));
    }
    spec.validate()?;
    check_dims(w, calib)?;
    let lo = w.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = w.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
        return Err(CalibrationError::DegenerateWeights {
            layer: calib.layer_name.clone(),
        });
    }
    // only a bound on the far side of zero is shrunk
    let scale_bound = |bound: f32, f: f64, toward_neg: bool| -> f32 {
        let shrinks = if toward_neg { bound < 0.0 } else { bound > 0.0 };
        if shrinks {
            (bound as f64 * f) as f32
        } else {
            bound
        }
    };

    let g = gram(calib.matrix());
    let fractions = clip_fractions(grid_steps);
    let mut grid = Vec::with_capacity(fractions.len() * fractions.len());
    let mut best: Option<usize> = None;
    let mut unclipped = f64::NAN;
    // widest candidates first
    for &fa in fractions.iter().rev() {
        for &fb in fractions.iter().rev() {
            let alpha = scale_bound(lo, fa, true);
            let beta = scale_bound(hi, fb, false);
            if alpha >= beta {
                continue;
            }
            let clip = ClipRange::new(calib.layer_name.clone(), alpha, beta);
            let w_hat = fake_quantize_values(w, spec, Some(&clip))?;
            let objective = output_error(w, &w_hat, &g);
            if fa == 1.0 && fb == 1.0 {
                unclipped = objective;
            }
            grid.push(ClipCandidate {
                alpha_fraction: fa,
                beta_fraction: fb,
                alpha,
                beta,
                objective,
            });
            let idx = grid.len() - 1;
            best = match best {
                None => Some(idx),
                Some(b) => {
                    let (cur, new) = (&grid[b], &grid[idx]);
                    let wider = (new.beta - new.alpha) > (cur.beta - cur.alpha);
                    if new.objective < cur.objective || (new.objective == cur.objective && wider) {
                        Some(idx)
                    } else {
                        Some(b)
                    }
                }
            };
        }
    }
    let b = &grid[best.expect("full-range candidate always evaluated")];
    Ok(ClipSearch {
        range: ClipRange::new(calib.layer_name.clone(), b.alpha, b.beta),
        objective: b.objective,
        unclipped_objective: unclipped,
        grid,
    })
}
