use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::numerics::{Matrix, Rng};
use crate::{Error, Result};

/// Gaussian-mixture classification task standing in for exported image
/// features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskConfig {
    pub num_classes: usize,
    pub input_dim: usize,
    /// Norm of every class mean.
    pub separation: f32,
    pub stddev: f32,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            input_dim: 64,
            separation: 4.0,
            stddev: 1.0,
            train_per_class: 500,
            test_per_class: 100,
            seed: 0,
        }
    }
}

impl SyntheticTaskConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_classes < 2 {
            problems.push("num_classes must be at least 2".to_string());
        }
        if self.input_dim == 0 {
            problems.push("input_dim must be positive".to_string());
        }
        if !(self.separation.is_finite() && self.separation > 0.0) {
            problems.push(format!("separation must be positive, got {}", self.separation));
        }
        if !(self.stddev.is_finite() && self.stddev >= 0.0) {
            problems.push(format!("stddev must be non-negative, got {}", self.stddev));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            problems.push("per-class sample counts must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub train: Dataset,
    pub test: Dataset,
    /// One row per class.
    pub class_means: Matrix,
}

/// Draws class means uniformly on the sphere of radius `separation`, then
/// exactly balanced train and test samples around them. Train ids are
/// `0..n_train`, test ids follow.
pub fn synth_generate(cfg: &SyntheticTaskConfig) -> Result<SyntheticTask> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let mut mean_rng = root.derive(0);
    let mut means = Vec::with_capacity(cfg.num_classes * cfg.input_dim);
    for _ in 0..cfg.num_classes {
        let v: Vec<f64> = (0..cfg.input_dim).map(|_| mean_rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        means.extend(v.iter().map(|x| (x / norm * f64::from(cfg.separation)) as f32));
    }
    let class_means = Matrix::from_vec(cfg.num_classes, cfg.input_dim, means)?;

    let split = |per_class: usize, first_id: u32, rng: &mut Rng| -> Result<Dataset> {
        let n = per_class * cfg.num_classes;
        let mut labels: Vec<u32> = (0..n).map(|i| (i % cfg.num_classes) as u32).collect();
        rng.shuffle(&mut labels);
        let mut data = Vec::with_capacity(n * cfg.input_dim);
        for &l in &labels {
            let mean = class_means.row(l as usize);
            data.extend(mean.iter().map(|&m| m + cfg.stddev * rng.normal() as f32));
        }
        let ids = (0..n as u32).map(|i| first_id + i).collect();
        Dataset::new(ids, Matrix::from_vec(n, cfg.input_dim, data)?, Some(labels), cfg.num_classes)
    };
    let train = split(cfg.train_per_class, 0, &mut root.derive(1))?;
    let test = split(cfg.test_per_class, train.len() as u32, &mut root.derive(2))?;
    Ok(SyntheticTask { train, test, class_means })
}
