use super::network::{Message, MessageKind, Network, Phase};
use crate::ensemble::{apply_batch, Decision, EnsembleRule};
use crate::model_zoo::{DeviceState, InputBatch};
use crate::numerics::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOutcome {
    pub decisions: Vec<Decision>,
    /// Logits from every device, indexed by device id.
    pub logits: Vec<Matrix>,
    pub bytes: u64,
}

/// The origin device embeds its own inputs, shares the embeddings with every
/// peer, collects their CO logits and combines them with its own under
/// `rule`. `labels` is only consulted by the oracle rule.
///
/// With a single device there is nobody to ask; the device's own model
/// answers and nothing is sent.
pub fn federated_infer(
    origin: usize,
    batch: InputBatch<'_>,
    devices: &[DeviceState],
    rule: EnsembleRule,
    labels: Option<&[u32]>,
    net: &mut Network,
) -> Result<InferenceOutcome> {
    let device = devices.get(origin).ok_or_else(|| Error::invalid(format!("no device {origin}")))?;
    let features = device.features(batch)?;
    if devices.len() == 1 {
        let logits = vec![device.solo_predict(&features)?];
        let decisions = apply_batch(rule, &logits, labels)?;
        return Ok(InferenceOutcome { decisions, logits, bytes: 0 });
    }
    let z = device.embed(&features)?;
    infer_from_embedding(origin, &z, devices, rule, labels, net)
}

/// The exchange part of [`federated_infer`], starting from consensus
/// embeddings already held by the origin.
pub fn infer_from_embedding(
    origin: usize,
    z: &Matrix,
    devices: &[DeviceState],
    rule: EnsembleRule,
    labels: Option<&[u32]>,
    net: &mut Network,
) -> Result<InferenceOutcome> {
    if origin >= devices.len() {
        return Err(Error::invalid(format!("no device {origin}")));
    }
    let before = net.meter.inference;
    let mut logits = Vec::with_capacity(devices.len());
    for (k, peer) in devices.iter().enumerate() {
        if k == origin {
            logits.push(peer.co_predict(z)?);
            continue;
        }
        net.send(Phase::Inference, Message::new(MessageKind::EmbedShare, 0, origin, k, z.clone())?);
        let shared = net.receive(k, MessageKind::EmbedShare, origin)?.into_payload();
        let answer = peer.co_predict(&shared)?;
        net.send(Phase::Inference, Message::new(MessageKind::LogitsReturn, 0, k, origin, answer)?);
        logits.push(net.receive(origin, MessageKind::LogitsReturn, k)?.into_payload());
    }
    let decisions = apply_batch(rule, &logits, labels)?;
    Ok(InferenceOutcome { decisions, logits, bytes: net.meter.inference - before })
}

/// Mean consensus embedding over all devices for each input in `batch`,
/// the idealised stand-in for every device's own embedding.
pub fn idealize_consensus(devices: &[DeviceState], batch: InputBatch<'_>) -> Result<Matrix> {
    let embeddings = devices
        .iter()
        .map(|d| d.embed(&d.features(batch)?))
        .collect::<Result<Vec<_>>>()?;
    Matrix::mean_of(&embeddings.iter().collect::<Vec<_>>())
}
