//! Self-distillation losses.
//!
//! `L_distill = gamma * KL(P_s || P_t) + (1 - gamma) * KL(P_t || P_s)` mixes the
//! reverse and forward divergences by the teacher's confidence `gamma`, and
//! `L_total = lambda * L_distill + zeta * CE`.
//!
//! Both distributions are floored at [`SMOOTHING_EPS`] and renormalized before
//! the divergence so that a near one-hot teacher keeps the reverse term finite.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::data::Batch;
use crate::model::{ModelError, ToyVlm};

pub const SMOOTHING_EPS: f32 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum DistillError {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("gamma {0} outside [0, 1]")]
    GammaOutOfRange(f64),
    #[error("gamma estimation needs at least one non-empty batch")]
    EmptyBatches,
    #[error("target {target} at row {row} outside {classes} classes")]
    TargetOutOfRange {
        row: usize,
        target: usize,
        classes: usize,
    },
    #[error("non-finite {what} loss")]
    NonFinite { what: &'static str },
    #[error("invalid distillation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    /// Fixed mixing weight; estimated from the teacher when `None`.
    pub gamma: Option<f64>,
    pub lambda: f64,
    pub zeta: f64,
    pub gamma_estimation_steps: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            gamma: None,
            lambda: 1.0,
            zeta: 1.0,
            gamma_estimation_steps: 100,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        if let Some(g) = self.gamma {
            check_gamma(g)?;
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite())
            || !(self.zeta >= 0.0 && self.zeta.is_finite())
        {
            return Err(DistillError::InvalidConfig(format!(
                "lambda {} and zeta {} must be finite and >= 0",
                self.lambda, self.zeta
            )));
        }
        Ok(())
    }
}

fn check_gamma(g: f64) -> Result<(), DistillError> {
    if (0.0..=1.0).contains(&g) {
        Ok(())
    } else {
        Err(DistillError::GammaOutOfRange(g))
    }
}

/// Teacher and student logits of identical shape `[batch, classes]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitsPair {
    pub teacher: Tensor,
    pub student: Tensor,
}

impl LogitsPair {
    pub fn new(teacher: Tensor, student: Tensor) -> Result<Self, DistillError> {
        if teacher.shape() != student.shape() || teacher.dims2().is_none() {
            return Err(DistillError::ShapeMismatch {
                left: teacher.shape().to_vec(),
                right: student.shape().to_vec(),
            });
        }
        Ok(Self { teacher, student })
    }
}

/// Row-wise softmax with max subtraction, in f64.
pub fn softmax_rows(logits: &Tensor) -> Vec<Vec<f64>> {
    let (rows, _) = logits.dims2().expect("logits are 2-d");
    (0..rows)
        .map(|r| {
            let row = logits.row(r);
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let e: Vec<f64> = row.iter().map(|&x| (x as f64 - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|x| x / s).collect()
        })
        .collect()
}

fn smooth(p: &[f64]) -> Vec<f64> {
    let eps = SMOOTHING_EPS as f64;
    let floored: Vec<f64> = p.iter().map(|&x| x.max(eps)).collect();
    let s: f64 = floored.iter().sum();
    floored.into_iter().map(|x| x / s).collect()
}

fn kl_rows(p: &[Vec<f64>], q: &[Vec<f64>]) -> f64 {
    let total: f64 = p
        .iter()
        .zip(q)
        .map(|(pr, qr)| {
            pr.iter()
                .zip(qr)
                .filter(|(&pk, _)| pk > 0.0)
                .map(|(&pk, &qk)| pk * (pk.ln() - qk.ln()))
                .sum::<f64>()
        })
        .sum();
    total / p.len().max(1) as f64
}

/// `mean_rows sum_k P_k (log P_k - log Q_k)` for row-stochastic `P`, `Q`.
pub fn kl_divergence(p: &Tensor, q: &Tensor) -> Result<f64, DistillError> {
    if p.shape() != q.shape() || p.dims2().is_none() {
        return Err(DistillError::ShapeMismatch {
            left: p.shape().to_vec(),
            right: q.shape().to_vec(),
        });
    }
    let rows = |t: &Tensor| -> Vec<Vec<f64>> {
        (0..t.shape()[0])
            .map(|r| t.row(r).iter().map(|&x| x as f64).collect())
            .collect()
    };
    Ok(kl_rows(&rows(p), &rows(q)))
}

/// The two divergences `(KL(P_s || P_t), KL(P_t || P_s))` on smoothed softmaxes.
pub fn divergences(pair: &LogitsPair) -> (f64, f64) {
    let t: Vec<Vec<f64>> = softmax_rows(&pair.teacher)
        .iter()
        .map(|r| smooth(r))
        .collect();
    let s: Vec<Vec<f64>> = softmax_rows(&pair.student)
        .iter()
        .map(|r| smooth(r))
        .collect();
    (kl_rows(&s, &t), kl_rows(&t, &s))
}

/// `gamma * KL(P_s || P_t) + (1 - gamma) * KL(P_t || P_s)`.
pub fn distill_loss(pair: &LogitsPair, gamma: f64) -> Result<f64, DistillError> {
    check_gamma(gamma)?;
    let (reverse, forward) = divergences(pair);
    Ok(gamma * reverse + (1.0 - gamma) * forward)
}

fn check_targets(classes: usize, targets: &[usize]) -> Result<(), DistillError> {
    match targets.iter().enumerate().find(|(_, &t)| t >= classes) {
        Some((row, &target)) => Err(DistillError::TargetOutOfRange {
            row,
            target,
            classes,
        }),
        None => Ok(()),
    }
}

/// Mean negative log-softmax probability of each row's target class.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64, DistillError> {
    let (rows, classes) = logits.dims2().ok_or_else(|| DistillError::ShapeMismatch {
        left: logits.shape().to_vec(),
        right: vec![targets.len()],
    })?;
    if rows != targets.len() {
        return Err(DistillError::ShapeMismatch {
            left: logits.shape().to_vec(),
            right: vec![targets.len()],
        });
    }
    check_targets(classes, targets)?;
    let probs = softmax_rows(logits);
    let total: f64 = probs.iter().zip(targets).map(|(p, &t)| -p[t].ln()).sum();
    Ok(total / rows.max(1) as f64)
}

/// `lambda * distill + zeta * ce`.
pub fn total_loss(distill: f64, ce: f64, cfg: &DistillConfig) -> Result<f64, DistillError> {
    if !distill.is_finite() {
        return Err(DistillError::NonFinite {
            what: "distillation",
        });
    }
    if !ce.is_finite() {
        return Err(DistillError::NonFinite {
            what: "cross-entropy",
        });
    }
    Ok(cfg.lambda * distill + cfg.zeta * ce)
}

fn onehot(rows: usize, classes: usize, targets: &[usize]) -> Tensor {
    let mut data = vec![0.0f32; rows * classes];
    for (r, &t) in targets.iter().enumerate() {
        data[r * classes + t] = 1.0;
    }
    Tensor::new(vec![rows, classes], data).expect("one-hot shape")
}

/// Taped cross-entropy of `logits` against `targets`.
pub fn cross_entropy_var(
    tape: &mut Tape,
    logits: Var,
    targets: &[usize],
) -> Result<Var, DistillError> {
    let shape = tape.value(logits).shape().to_vec();
    let (rows, classes) =
        tape.value(logits)
            .dims2()
            .ok_or_else(|| DistillError::ShapeMismatch {
                left: shape.clone(),
                right: vec![targets.len()],
            })?;
    if rows != targets.len() {
        return Err(DistillError::ShapeMismatch {
            left: shape,
            right: vec![targets.len()],
        });
    }
    check_targets(classes, targets)?;
    let ls = tape.log_softmax(logits);
    let mask = tape.constant(&onehot(rows, classes, targets));
    let picked = tape.mul(ls, mask)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0 / rows as f32))
}

/// Taped smoothed softmax of `logits`.
fn smoothed_softmax_var(tape: &mut Tape, logits: Var) -> Result<Var, DistillError> {
    let p = tape.softmax(logits);
    let p = tape.clamp_min(p, SMOOTHING_EPS);
    let z = tape.sum_rows(p);
    Ok(tape.div(p, z)?)
}

/// Taped distillation loss; the teacher logits enter as a constant.
pub fn distill_loss_var(
    tape: &mut Tape,
    student_logits: Var,
    teacher_logits: &Tensor,
    gamma: f64,
) -> Result<Var, DistillError> {
    check_gamma(gamma)?;
    let shape = tape.value(student_logits).shape().to_vec();
    if shape != teacher_logits.shape() {
        return Err(DistillError::ShapeMismatch {
            left: teacher_logits.shape().to_vec(),
            right: shape,
        });
    }
    let rows = shape[0].max(1) as f32;
    let t: Vec<f32> = softmax_rows(teacher_logits)
        .iter()
        .flat_map(|r| smooth(r))
        .map(|x| x as f32)
        .collect();
    let log_t: Vec<f32> = t.iter().map(|x| x.ln()).collect();
    let t = tape.constant(&Tensor::new(shape.clone(), t)?);
    let log_t = tape.constant(&Tensor::new(shape, log_t)?);

    let s = smoothed_softmax_var(tape, student_logits)?;
    let log_s = tape.log(s);
    let rev_diff = tape.sub(log_s, log_t)?;
    let rev = tape.mul(s, rev_diff)?;
    let rev = tape.sum(rev);
    let fwd_diff = tape.sub(log_t, log_s)?;
    let fwd = tape.mul(t, fwd_diff)?;
    let fwd = tape.sum(fwd);
    let rev = tape.scale(rev, gamma as f32 / rows);
    let fwd = tape.scale(fwd, (1.0 - gamma) as f32 / rows);
    Ok(tape.add(rev, fwd)?)
}

/// Taped `lambda * distill + zeta * ce`.
pub fn total_loss_var(
    tape: &mut Tape,
    distill: Var,
    ce: Var,
    cfg: &DistillConfig,
) -> Result<Var, DistillError> {
    let (d, c) = (tape.scalar(distill), tape.scalar(ce));
    total_loss(d as f64, c as f64, cfg)?;
    let d = tape.scale(distill, cfg.lambda as f32);
    let c = tape.scale(ce, cfg.zeta as f32);
    Ok(tape.add(d, c)?)
}

/// Source of teacher logits for gamma estimation.
pub trait Teacher {
    fn teacher_logits(&self, batch: &Batch) -> Result<Tensor, DistillError>;
}

impl Teacher for ToyVlm {
    fn teacher_logits(&self, batch: &Batch) -> Result<Tensor, DistillError> {
        Ok(self.logits(batch)?)
    }
}

/// Mean teacher probability on the correct class over all samples of `batches`.
pub fn estimate_gamma<T: Teacher + ?Sized>(
    teacher: &T,
    batches: &[Batch],
) -> Result<f64, DistillError> {
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for b in batches {
        if b.is_empty() {
            continue;
        }
        let logits = teacher.teacher_logits(b)?;
        let (rows, classes) = logits.dims2().unwrap_or((0, 0));
        if rows != b.len() {
            return Err(DistillError::ShapeMismatch {
                left: logits.shape().to_vec(),
                right: vec![b.len()],
            });
        }
        check_targets(classes, &b.labels)?;
        for (p, &y) in softmax_rows(&logits).iter().zip(&b.labels) {
            sum += p[y];
            n += 1;
        }
    }
    if n == 0 {
        return Err(DistillError::EmptyBatches);
    }
    Ok((sum / n as f64).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: Vec<Vec<f32>>) -> Tensor {
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn kl_examples() {
        let p = t(vec![vec![1.0, 0.0]]);
        let q = t(vec![vec![0.5, 0.5]]);
        assert!((kl_divergence(&p, &q).unwrap() - 2f64.ln()).abs() < 1e-9);
        assert_eq!(kl_divergence(&q, &q).unwrap(), 0.0);
        assert!(kl_divergence(&p, &t(vec![vec![1.0, 0.0, 0.0]])).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let ce = cross_entropy(&t(vec![vec![2.0, 1.0]]), &[0]).unwrap();
        assert!((ce - 0.3133).abs() < 1e-4);
        let uniform = cross_entropy(&Tensor::zeros(vec![3, 5]), &[0, 2, 4]).unwrap();
        assert!((uniform - 5f64.ln()).abs() < 1e-9);
        assert!(cross_entropy(&t(vec![vec![30.0, 0.0]]), &[0]).unwrap() < 1e-9);
        assert!(matches!(
            cross_entropy(&t(vec![vec![0.0, 0.0]]), &[2]),
            Err(DistillError::TargetOutOfRange { target: 2, .. })
        ));
    }

    #[test]
    fn distill_endpoints_and_example() {
        let hard = LogitsPair::new(t(vec![vec![0.0, -1e9]]), Tensor::zeros(vec![1, 2])).unwrap();
        let (reverse, forward) = divergences(&hard);
        assert!((forward - 2f64.ln()).abs() < 1e-6);
        let half = distill_loss(&hard, 0.5).unwrap();
        assert!((half - (0.5 * reverse + 0.5 * 2f64.ln())).abs() < 1e-6);
        assert_eq!(distill_loss(&hard, 1.0).unwrap(), reverse);
        let same =
            LogitsPair::new(t(vec![vec![0.3, -1.0, 2.0]]), t(vec![vec![0.3, -1.0, 2.0]])).unwrap();
        assert_eq!(distill_loss(&same, 0.3).unwrap(), 0.0);
        assert!(matches!(
            distill_loss(&same, 1.5),
            Err(DistillError::GammaOutOfRange(_))
        ));
    }

    #[test]
    fn taped_losses_match_values() {
        let s = t(vec![vec![0.5, -0.2, 1.0], vec![-1.0, 0.0, 2.0]]);
        let te = t(vec![vec![1.5, 0.2, -1.0], vec![0.0, 0.3, 0.1]]);
        let pair = LogitsPair::new(te.clone(), s.clone()).unwrap();
        let mut tape = Tape::new();
        let sv = tape.leaf(&s.clone().with_grad());
        let d = distill_loss_var(&mut tape, sv, &te, 0.3).unwrap();
        let c = cross_entropy_var(&mut tape, sv, &[2, 0]).unwrap();
        let tot = total_loss_var(&mut tape, d, c, &DistillConfig::default()).unwrap();
        let dv = distill_loss(&pair, 0.3).unwrap();
        let cv = cross_entropy(&s, &[2, 0]).unwrap();
        assert!((tape.scalar(d) as f64 - dv).abs() < 1e-5);
        assert!((tape.scalar(c) as f64 - cv).abs() < 1e-5);
        assert!((tape.scalar(tot) as f64 - (dv + cv)).abs() < 1e-5);
    }

    #[test]
    fn total_loss_arithmetic() {
        let cfg = DistillConfig::default();
        assert!((total_loss(0.2, 0.3, &cfg).unwrap() - 0.5).abs() < 1e-12);
        let pure = DistillConfig {
            zeta: 0.0,
            ..cfg.clone()
        };
        assert_eq!(total_loss(0.2, 0.3, &pure).unwrap(), 0.2);
        assert!(total_loss(f64::NAN, 0.3, &cfg).is_err());
    }

    struct Fixed(Vec<Vec<f32>>);

    impl Teacher for Fixed {
        fn teacher_logits(&self, batch: &Batch) -> Result<Tensor, DistillError> {
            Ok(Tensor::from_rows(&self.0[..batch.len()]).unwrap())
        }
    }

    fn labels(ls: Vec<usize>) -> Batch {
        Batch {
            images: Tensor::zeros(vec![ls.len(), 1]),
            tokens: vec![0; ls.len()],
            patterns: vec![0; ls.len()],
            labels: ls,
        }
    }

    #[test]
    fn gamma_examples() {
        let confident = Fixed(vec![vec![0.0, -1e9], vec![-1e9, 0.0]]);
        assert_eq!(
            estimate_gamma(&confident, &[labels(vec![0, 1])]).unwrap(),
            1.0
        );
        let uniform = Fixed(vec![vec![0.0; 4]; 2]);
        assert!((estimate_gamma(&uniform, &[labels(vec![3, 1])]).unwrap() - 0.25).abs() < 1e-12);
        let l = |p: f64| vec![0.0, (p / (1.0 - p)).ln() as f32];
        let mixed = Fixed(vec![l(0.9), l(0.5), l(0.1)]);
        let g = estimate_gamma(&mixed, &[labels(vec![1, 1, 1])]).unwrap();
        assert!((g - 0.5).abs() < 1e-6);
        assert!(matches!(
            estimate_gamma(&mixed, &[]),
            Err(DistillError::EmptyBatches)
        ));
    }
}
