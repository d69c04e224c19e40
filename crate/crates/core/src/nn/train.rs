use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, Mode, Stack};
use crate::numerics::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    /// epochs without validation improvement before stopping
    pub patience: usize,
    /// tail of the shuffled index order held out for validation
    pub validation_fraction: f64,
}

impl Default for EarlyStopping {
    fn default() -> Self {
        Self { patience: 5, validation_fraction: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLoopConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stopping: Option<EarlyStopping>,
    pub seed: u64,
}

impl TrainLoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::config("batch_size and max_epochs must be positive"));
        }
        if let Some(es) = self.early_stopping {
            if es.patience == 0 {
                return Err(Error::config("early-stopping patience must be at least 1"));
            }
            if !(es.validation_fraction > 0.0 && es.validation_fraction < 1.0) {
                return Err(Error::config(format!(
                    "validation_fraction {} must lie in (0, 1)",
                    es.validation_fraction
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitReport {
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl FitReport {
    pub fn epochs_run(&self) -> usize {
        self.train_losses.len()
    }
}

/// Mini-batch training of `stack` on the rows of `inputs`.
///
/// `loss` receives the stack output for a batch and the row indices that
/// produced it, and returns the batch loss with its gradient w.r.t. the
/// output. With early stopping the final parameters are those of the best
/// validation epoch. The last partial batch is kept.
pub fn fit<F>(
    stack: &mut Stack,
    optimizer: &mut Adam,
    inputs: &Matrix,
    cfg: &TrainLoopConfig,
    mut loss: F,
) -> Result<FitReport>
where
    F: FnMut(&Matrix, &[usize]) -> Result<(f64, Matrix)>,
{
    cfg.validate()?;
    let n = inputs.rows();
    if n == 0 {
        return Err(Error::InvalidBatch("training on an empty dataset".into()));
    }
    let rng = Rng::new(cfg.seed);
    let order = rng.derive(0).permutation(n);
    let (train_idx, val_idx) = match cfg.early_stopping {
        Some(es) => {
            let n_val = ((n as f64) * es.validation_fraction).floor() as usize;
            let n_val = n_val.min(n - 1);
            let split = n - n_val;
            (order[..split].to_vec(), order[split..].to_vec())
        }
        None => (order, Vec::new()),
    };
    let val_inputs = inputs.select_rows(&val_idx);

    let mut report = FitReport::default();
    let mut best: Option<(f64, Vec<(String, Matrix)>)> = None;
    let mut bad_epochs = 0;

    for epoch in 0..cfg.max_epochs {
        let progress = epoch as f64 / cfg.max_epochs as f64;
        let mut epoch_idx = train_idx.clone();
        rng.derive(1 + epoch as u64).shuffle(&mut epoch_idx);

        let mut total = 0.0;
        for batch in epoch_idx.chunks(cfg.batch_size) {
            let x = inputs.select_rows(batch);
            let out = stack.forward(&x, Mode::Train)?;
            let (value, grad) = loss(&out, batch)?;
            stack.backward(&grad)?;
            optimizer.step(stack, progress);
            total += value * batch.len() as f64;
        }
        report.train_losses.push(total / epoch_idx.len() as f64);

        if let Some(es) = cfg.early_stopping.filter(|_| !val_idx.is_empty()) {
            let out = stack.predict(&val_inputs)?;
            let (val, _) = loss(&out, &val_idx)?;
            report.val_losses.push(val);
            let improved = best.as_ref().is_none_or(|(b, _)| val < *b);
            if improved {
                best = Some((val, stack.snapshot()));
                report.best_epoch = Some(epoch);
                bad_epochs = 0;
            } else {
                bad_epochs += 1;
                if bad_epochs >= es.patience {
                    report.stopped_early = true;
                    break;
                }
            }
        }
    }
    if let Some((_, params)) = best {
        stack.restore(&params)?;
    }
    Ok(report)
}
