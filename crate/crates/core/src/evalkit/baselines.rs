use super::experiment::ExperimentConfig;
use crate::datakit::Dataset;
use crate::ensemble::{accuracy, apply_batch, EnsembleRule};
use crate::federation::{federated_infer, Network};
use crate::model_zoo::{DeviceState, HeadSource, TailNet};
use crate::numerics::derive_seed;
use crate::{Error, Result};

fn argmax_accuracy(logits: &crate::numerics::Matrix, labels: &[u32]) -> f64 {
    let hits = logits.argmax_rows().iter().zip(labels).filter(|(p, &l)| **p == l as usize).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Accuracy of each device's own model on `test`.
pub fn run_solo_baseline(devices: &[DeviceState], test: &Dataset) -> Result<Vec<f64>> {
    let labels = test.labels()?;
    devices
        .iter()
        .map(|d| Ok(argmax_accuracy(&d.solo_predict(&d.features(test.as_batch())?)?, labels)))
        .collect()
}

/// Every device runs its full local model on the same input; the outputs
/// are combined under `rule`.
pub fn run_input_sharing_fi(devices: &[DeviceState], test: &Dataset, rule: EnsembleRule) -> Result<f64> {
    let labels = test.labels()?;
    let logits = devices
        .iter()
        .map(|d| d.solo_predict(&d.features(test.as_batch())?))
        .collect::<Result<Vec<_>>>()?;
    Ok(accuracy(&apply_batch(rule, &logits, Some(labels))?, labels))
}

/// Tails trained on each device's local data over one common head.
pub fn train_edge_tails(cfg: &ExperimentConfig, head: &HeadSource, locals: &[Dataset]) -> Result<Vec<TailNet>> {
    let num_classes = locals.first().map(Dataset::num_classes).ok_or_else(|| Error::invalid("no devices"))?;
    locals
        .iter()
        .enumerate()
        .map(|(k, local)| {
            let seed = derive_seed(cfg.seed, 0xED6E_0000 + k as u64);
            let mut d = DeviceState::new(k, head.clone(), num_classes, cfg.arch, seed);
            d.pretrain_tail(local, &cfg.tail.loop_config(derive_seed(seed, 1)), cfg.tail.adam)?;
            Ok(d.tail)
        })
        .collect()
}

/// Ensemble of tails over one shared head's features.
pub fn run_edge_ensemble(head: &HeadSource, tails: &[TailNet], test: &Dataset, rule: EnsembleRule) -> Result<f64> {
    let labels = test.labels()?;
    let features = head.extract(test.as_batch())?;
    let logits = tails.iter().map(|t| t.predict(&features)).collect::<Result<Vec<_>>>()?;
    Ok(accuracy(&apply_batch(rule, &logits, Some(labels))?, labels))
}

/// CE-FI accuracy with each device in turn as the origin of every test
/// input, plus the inference bytes spent per sample.
pub fn run_cefi(devices: &[DeviceState], test: &Dataset, rule: EnsembleRule, net: &mut Network) -> Result<(Vec<f64>, u64)> {
    let labels = test.labels()?;
    let mut per_origin = Vec::with_capacity(devices.len());
    let mut per_sample = 0;
    for origin in 0..devices.len() {
        let out = federated_infer(origin, test.as_batch(), devices, rule, Some(labels), net)?;
        per_sample = out.bytes / test.len().max(1) as u64;
        per_origin.push(accuracy(&out.decisions, labels));
    }
    Ok((per_origin, per_sample))
}
