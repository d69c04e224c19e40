use super::FederationConfig;
use crate::datakit::Dataset;
use crate::losses::distill_loss;
use crate::model_zoo::DeviceState;
use crate::nn::{fit, Adam, FitReport, TrainLoopConfig};
use crate::numerics::{derive_seed, Matrix};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CoReport {
    /// Mean per-sample distillation loss over the training set, eval mode.
    pub loss_before: f64,
    pub loss_after: f64,
    pub fit: FitReport,
}

/// Distils the device's own model into its CO layer on the shared set.
/// Entirely local: the function has no network to send on.
pub fn train_co_local(
    device: &mut DeviceState,
    shared: &Dataset,
    cfg: &FederationConfig,
) -> Result<CoReport> {
    let features = device.features(shared.as_batch())?;
    let embeddings = device.embed(&features)?;
    train_co(device, &embeddings, &features, cfg)
}

/// CO training on explicit consensus embeddings; the teacher is always the
/// device's tail on its own `features`, computed once in eval mode.
pub fn train_co(
    device: &mut DeviceState,
    embeddings: &Matrix,
    features: &Matrix,
    cfg: &FederationConfig,
) -> Result<CoReport> {
    if embeddings.rows() != features.rows() {
        return Err(Error::shape("one embedding per teacher feature row"));
    }
    device.freeze_for_co_training();
    let teacher = device.solo_predict(features)?;
    let n = embeddings.rows() as f64;
    let mean_loss = |d: &DeviceState| -> Result<f64> {
        Ok(distill_loss(&d.co_predict(embeddings)?, &teacher, &cfg.distill)?.value / n)
    };
    let loss_before = mean_loss(device)?;

    let loop_cfg = TrainLoopConfig {
        batch_size: cfg.co_batch,
        max_epochs: cfg.co_epochs,
        early_stopping: None,
        seed: derive_seed(cfg.seed, 0xC0_0000 + device.device_id as u64),
    };
    let mut opt = Adam::new(cfg.adam);
    let fit = fit(&mut device.co.stack, &mut opt, embeddings, &loop_cfg, |out, idx| {
        let l = distill_loss(out, &teacher.select_rows(idx), &cfg.distill)?;
        Ok((l.value, l.grad))
    })?;
    Ok(CoReport { loss_before, loss_after: mean_loss(device)?, fit })
}

/// Restricts the shared set to samples whose true class the device has seen.
/// Uses oracle labels, so only evaluation harnesses may call it.
pub fn exclude_ood_for_co(seen_labels: &[u32], shared: &Dataset, oracle_labels: &[u32]) -> Result<Dataset> {
    if oracle_labels.len() != shared.len() {
        return Err(Error::shape("one oracle label per shared sample"));
    }
    let keep: Vec<usize> = (0..shared.len()).filter(|&i| seen_labels.contains(&oracle_labels[i])).collect();
    if keep.is_empty() {
        return Err(Error::config("no shared sample belongs to a class this device has seen"));
    }
    Ok(shared.select(&keep))
}
