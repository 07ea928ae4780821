//! Synthetic multimodal classification task.
//!
//! Each sample pairs a noisy 8x8 "image" drawn from one of `patterns`
//! prototypes with a discrete token. The label is a fixed function of the
//! (pattern, token) pair, so neither tower alone can solve the task.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{classes} classes exceed the {combos} available pattern x token combinations")]
    TooManyClasses { classes: usize, combos: usize },
    #[error("invalid task configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub patterns: usize,
    pub tokens: usize,
    pub classes: usize,
    pub image_side: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise_std: f32,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            patterns: 8,
            tokens: 8,
            classes: 16,
            image_side: 8,
            train_samples: 4096,
            eval_samples: 1024,
            noise_std: 1.0,
        }
    }
}

impl TaskConfig {
    pub fn image_dim(&self) -> usize {
        self.image_side * self.image_side
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.patterns == 0 || self.tokens == 0 || self.classes == 0 || self.image_side == 0 {
            return Err(DataError::Invalid(
                "patterns, tokens, classes and image_side must be positive".into(),
            ));
        }
        let combos = self.patterns * self.tokens;
        if self.classes > combos {
            return Err(DataError::TooManyClasses {
                classes: self.classes,
                combos,
            });
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(DataError::Invalid(format!(
                "noise_std {} must be >= 0",
                self.noise_std
            )));
        }
        Ok(())
    }
}

/// A set of samples: images `[n, side*side]`, tokens and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
    /// Prototype index each image was drawn from.
    pub patterns: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_dim(&self) -> usize {
        self.images.shape()[1]
    }

    /// Samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Batch {
        let d = self.image_dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.images.row(i));
        }
        Batch {
            images: Tensor::new(vec![indices.len(), d], data).expect("batch shape"),
            tokens: indices.iter().map(|&i| self.tokens[i]).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            patterns: indices.iter().map(|&i| self.patterns[i]).collect(),
        }
    }

    /// The first `n` samples (or all of them if fewer).
    pub fn head(&self, n: usize) -> Batch {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// Consecutive chunks of at most `size` samples.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = Batch> + '_ {
        let size = size.max(1);
        (0..self.len()).step_by(size).map(move |s| {
            let idx: Vec<usize> = (s..(s + size).min(self.len())).collect();
            self.select(&idx)
        })
    }
}

/// Train and eval splits plus the task's ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub config: TaskConfig,
    pub prototypes: Vec<Vec<f32>>,
    /// `label_table[pattern * tokens + token]`.
    pub label_table: Vec<usize>,
    pub train: Batch,
    pub eval: Batch,
}

impl SyntheticTask {
    pub fn label_of(&self, pattern: usize, token: usize) -> usize {
        self.label_table[pattern * self.config.tokens + token]
    }
}

fn draw(
    cfg: &TaskConfig,
    prototypes: &[Vec<f32>],
    table: &[usize],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Batch {
    let d = cfg.image_dim();
    let mut images = Vec::with_capacity(n * d);
    let mut tokens = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut patterns = Vec::with_capacity(n);
    for _ in 0..n {
        let p = rng.random_range(0..cfg.patterns);
        let t = rng.random_range(0..cfg.tokens);
        for &px in &prototypes[p] {
            images.push(px + cfg.noise_std * rng.sample::<f32, _>(StandardNormal));
        }
        tokens.push(t);
        labels.push(table[p * cfg.tokens + t]);
        patterns.push(p);
    }
    Batch {
        images: Tensor::new(vec![n, d], images).expect("image shape"),
        tokens,
        labels,
        patterns,
    }
}

/// Deterministic synthetic dataset for `seed`.
///
/// Labels come from a seeded shuffle of all pattern x token combinations
/// taken modulo `classes`, so every class covers the same number of
/// combinations up to one.
pub fn generate_dataset(cfg: &TaskConfig, seed: u64) -> Result<SyntheticTask, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.image_dim();
    let prototypes: Vec<Vec<f32>> = (0..cfg.patterns)
        .map(|_| {
            (0..d)
                .map(|_| rng.sample::<f32, _>(StandardNormal))
                .collect()
        })
        .collect();
    let combos = cfg.patterns * cfg.tokens;
    let mut order: Vec<usize> = (0..combos).collect();
    order.shuffle(&mut rng);
    let mut label_table = vec![0; combos];
    for (rank, &combo) in order.iter().enumerate() {
        label_table[combo] = rank % cfg.classes;
    }
    let mut train_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7472_6169_6e00);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6576_616c_0000);
    let train = draw(
        cfg,
        &prototypes,
        &label_table,
        cfg.train_samples,
        &mut train_rng,
    );
    let eval = draw(
        cfg,
        &prototypes,
        &label_table,
        cfg.eval_samples,
        &mut eval_rng,
    );
    Ok(SyntheticTask {
        config: cfg.clone(),
        prototypes,
        label_table,
        train,
        eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let cfg = TaskConfig {
            train_samples: 64,
            eval_samples: 16,
            ..TaskConfig::default()
        };
        assert_eq!(
            generate_dataset(&cfg, 3).unwrap(),
            generate_dataset(&cfg, 3).unwrap()
        );
        assert_ne!(
            generate_dataset(&cfg, 3).unwrap().train,
            generate_dataset(&cfg, 4).unwrap().train
        );
    }

    #[test]
    fn labels_are_a_function_of_pattern_and_token() {
        let task = generate_dataset(&TaskConfig::default(), 42).unwrap();
        for b in [&task.train, &task.eval] {
            for i in 0..b.len() {
                assert_eq!(b.labels[i], task.label_of(b.patterns[i], b.tokens[i]));
            }
        }
    }

    #[test]
    fn class_histogram_is_roughly_uniform() {
        let task = generate_dataset(&TaskConfig::default(), 42).unwrap();
        let mut counts = vec![0usize; 16];
        for &l in &task.train.labels {
            counts[l] += 1;
        }
        let mean = task.train.len() as f64 / 16.0;
        for c in counts {
            assert!((c as f64 - mean).abs() <= 0.3 * mean, "{c} vs {mean}");
        }
    }

    #[test]
    fn too_many_classes() {
        let cfg = TaskConfig {
            patterns: 2,
            tokens: 3,
            classes: 7,
            ..TaskConfig::default()
        };
        assert!(matches!(
            generate_dataset(&cfg, 0),
            Err(DataError::TooManyClasses {
                classes: 7,
                combos: 6
            })
        ));
    }

    #[test]
    fn select_and_chunks() {
        let cfg = TaskConfig {
            train_samples: 10,
            eval_samples: 1,
            ..TaskConfig::default()
        };
        let t = generate_dataset(&cfg, 1).unwrap();
        let s = t.train.select(&[3, 1]);
        assert_eq!(s.labels, vec![t.train.labels[3], t.train.labels[1]]);
        assert_eq!(s.images.row(0), t.train.images.row(3));
        let sizes: Vec<usize> = t.train.chunks(4).map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }
}
