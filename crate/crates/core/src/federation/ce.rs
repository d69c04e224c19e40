use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Mutex;

use super::network::{Message, MessageKind, Network, Phase, TraceRecord};
use super::{Execution, FederationConfig};
use crate::datakit::Dataset;
use crate::losses::consensus_loss;
use crate::model_zoo::DeviceState;
use crate::nn::{Adam, Mode};
use crate::numerics::{Matrix, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundReport {
    pub round: u64,
    pub aggregator: usize,
    pub loss: f64,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CeReport {
    /// Sample-weighted mean consensus loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub rounds: u64,
    pub aborted_rounds: u64,
    pub stopped_early: bool,
}

/// Shuffled mini-batches over `n` shared samples. A trailing batch of one
/// sample has no negatives, so it is folded into the batch before it.
pub fn batch_schedule(n: usize, batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let order = rng.permutation(n);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

/// Trains every device's CE layer on the shared set until the epoch budget
/// runs out or the loss plateaus. Heads and tails are not touched.
pub fn train_ce(
    devices: &mut [DeviceState],
    shared: &Dataset,
    cfg: &FederationConfig,
    net: &mut Network,
) -> Result<CeReport> {
    cfg.validate(devices.len())?;
    if shared.len() < 2 {
        return Err(Error::InvalidBatch("consensus training needs at least 2 shared samples".into()));
    }
    // heads are frozen, so each device extracts its shared features once
    let features = devices.iter().map(|d| d.features(shared.as_batch())).collect::<Result<Vec<_>>>()?;
    for d in devices.iter_mut() {
        d.freeze_for_ce_training();
    }
    let mut optimizers: Vec<Adam> = devices.iter().map(|_| Adam::new(cfg.adam)).collect();
    let shuffle = Rng::new(cfg.seed).derive(0xCE);

    let mut report = CeReport::default();
    let mut round = 0u64;
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for epoch in 0..cfg.ce_max_epochs {
        let progress = epoch as f64 / cfg.ce_max_epochs as f64;
        net.begin_ce_epoch();
        let mut total = 0.0;
        for batch in batch_schedule(shared.len(), cfg.ce_batch, &mut shuffle.derive(epoch as u64)) {
            let batch_features: Vec<Matrix> = features.iter().map(|f| f.select_rows(&batch)).collect();
            let mut attempt = 0;
            let outcome = loop {
                let aggregator = cfg.aggregator.aggregator(round, devices.len());
                let result =
                    train_ce_round(devices, &mut optimizers, &batch_features, round, aggregator, progress, cfg, net);
                round += 1;
                attempt += 1;
                match result {
                    Err(Error::RoundAborted { .. }) if attempt < cfg.max_round_attempts => {
                        report.aborted_rounds += 1;
                    }
                    other => break other?,
                }
            };
            total += outcome.loss * batch.len() as f64;
        }
        let loss = total / shared.len() as f64;
        report.epoch_losses.push(loss);
        if loss < best - cfg.ce_plateau_tol {
            best = loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.ce_plateau_patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    report.rounds = round;
    Ok(report)
}

/// One CE round on a shared batch: every device embeds its own features,
/// non-aggregators send `EmbedUp`, the aggregator evaluates the consensus
/// loss and answers with `GradDown`, and every device updates its CE layer.
///
/// If a device goes silent the round is abandoned before any parameter
/// changes and `RoundAborted` is returned.
#[allow(clippy::too_many_arguments)]
pub fn train_ce_round(
    devices: &mut [DeviceState],
    optimizers: &mut [Adam],
    batch_features: &[Matrix],
    round: u64,
    aggregator: usize,
    progress: f64,
    cfg: &FederationConfig,
    net: &mut Network,
) -> Result<RoundReport> {
    let k = devices.len();
    if optimizers.len() != k || batch_features.len() != k {
        return Err(Error::invalid("one optimizer and one feature batch per device"));
    }
    if aggregator >= k {
        return Err(Error::invalid(format!("aggregator {aggregator} out of range")));
    }
    let dropped = cfg.faults.iter().find(|f| f.round == round).map(|f| f.device);
    let start = net.trace.len();
    let loss = match cfg.execution {
        Execution::SingleThreaded => {
            sequential_round(devices, optimizers, batch_features, round, aggregator, dropped, progress, cfg, net)
        }
        Execution::ThreadPerDevice => {
            threaded_round(devices, optimizers, batch_features, round, aggregator, dropped, progress, cfg, net)
        }
    }?;
    let bytes = net.trace[start..].iter().map(|r| r.bytes).sum();
    Ok(RoundReport { round, aggregator, loss, bytes })
}

fn local_update(device: &mut DeviceState, opt: &mut Adam, grad: &Matrix, progress: f64) -> Result<()> {
    device.ce.stack.backward(grad)?;
    opt.step(&mut device.ce.stack, progress);
    Ok(())
}

fn aborted(round: u64, device: usize) -> Error {
    Error::RoundAborted { round, reason: format!("device {device} stopped responding") }
}

#[allow(clippy::too_many_arguments)]
fn sequential_round(
    devices: &mut [DeviceState],
    optimizers: &mut [Adam],
    batch_features: &[Matrix],
    round: u64,
    agg: usize,
    dropped: Option<usize>,
    progress: f64,
    cfg: &FederationConfig,
    net: &mut Network,
) -> Result<f64> {
    let k = devices.len();
    let mut own = Vec::with_capacity(k);
    for (d, f) in devices.iter_mut().zip(batch_features) {
        own.push(d.ce.forward(f, Mode::Train)?);
    }
    let start = net.trace.len();
    for (i, z) in own.iter().enumerate() {
        if i != agg && Some(i) != dropped {
            net.send(Phase::CeTraining, Message::new(MessageKind::EmbedUp, round, i, agg, z.clone())?);
        }
    }
    if let Some(d) = dropped {
        let sent = net.trace[start..].to_vec();
        net.mark_aborted(&sent);
        net.drain(agg);
        return Err(aborted(round, d));
    }

    let embeddings = own
        .into_iter()
        .enumerate()
        .map(|(i, z)| if i == agg { Ok(z) } else { Ok(net.receive(agg, MessageKind::EmbedUp, i)?.into_payload()) })
        .collect::<Result<Vec<_>>>()?;
    let out = consensus_loss(&embeddings, &cfg.contrastive)?;
    let mut grads: Vec<Option<Matrix>> = out.grads.into_iter().map(Some).collect();
    for (i, g) in grads.iter_mut().enumerate() {
        if i != agg {
            let g = g.take().expect("gradient per device");
            net.send(Phase::CeTraining, Message::new(MessageKind::GradDown, round, agg, i, g)?);
        }
    }
    for (i, (d, opt)) in devices.iter_mut().zip(optimizers.iter_mut()).enumerate() {
        let grad = match grads[i].take() {
            Some(g) => g,
            None => net.receive(i, MessageKind::GradDown, agg)?.into_payload(),
        };
        local_update(d, opt, &grad, progress)?;
    }
    Ok(out.loss)
}

enum Envelope {
    Msg(Message),
    /// Stand-in for the aggregator noticing a silent peer.
    Silent,
    Abort,
}

enum Outcome {
    Updated,
    Aggregated(f64),
    Aborted,
}

struct Actor<'a> {
    id: usize,
    agg: usize,
    round: u64,
    silent: bool,
    progress: f64,
    cfg: &'a FederationConfig,
    inbox: Receiver<Envelope>,
    peers: Vec<Sender<Envelope>>,
    log: &'a Mutex<Vec<TraceRecord>>,
}

impl Actor<'_> {
    fn post(&self, msg: Message) {
        self.log.lock().expect("trace log poisoned").push(msg.record(Phase::CeTraining));
        // a closed inbox means the peer already failed; its error surfaces on join
        let _ = self.peers[msg.receiver()].send(Envelope::Msg(msg));
    }

    fn abort_all(&self) {
        for (j, tx) in self.peers.iter().enumerate() {
            if j != self.id {
                let _ = tx.send(Envelope::Abort);
            }
        }
    }

    fn run(self, device: &mut DeviceState, opt: &mut Adam, features: &Matrix) -> Result<Outcome> {
        let z = device.ce.forward(features, Mode::Train);
        if self.id != self.agg {
            let z = match z {
                Ok(z) if !self.silent => z,
                other => {
                    let _ = self.peers[self.agg].send(Envelope::Silent);
                    return other.map(|_| Outcome::Aborted);
                }
            };
            self.post(Message::new(MessageKind::EmbedUp, self.round, self.id, self.agg, z)?);
            return match self.inbox.recv() {
                Ok(Envelope::Msg(m)) if m.kind() == MessageKind::GradDown => {
                    local_update(device, opt, m.payload(), self.progress)?;
                    Ok(Outcome::Updated)
                }
                Ok(Envelope::Abort) => Ok(Outcome::Aborted),
                _ => Err(Error::Protocol(format!("device {} expected a gradient", self.id))),
            };
        }

        let k = self.peers.len();
        let mut slots: Vec<Option<Matrix>> = vec![None; k];
        let mut abort = self.silent;
        for _ in 0..k - 1 {
            match self.inbox.recv() {
                Ok(Envelope::Msg(m)) if m.kind() == MessageKind::EmbedUp => {
                    let sender = m.sender();
                    slots[sender] = Some(m.into_payload());
                }
                _ => abort = true,
            }
        }
        let z = match z {
            Ok(z) if !abort => z,
            other => {
                self.abort_all();
                return other.map(|_| Outcome::Aborted);
            }
        };
        slots[self.agg] = Some(z);
        let embeddings: Vec<Matrix> = slots.into_iter().map(|s| s.expect("all embeddings arrived")).collect();
        let out = match consensus_loss(&embeddings, &self.cfg.contrastive) {
            Ok(out) => out,
            Err(e) => {
                self.abort_all();
                return Err(e);
            }
        };
        let mut own_grad = None;
        for (j, g) in out.grads.into_iter().enumerate() {
            if j == self.agg {
                own_grad = Some(g);
            } else {
                self.post(Message::new(MessageKind::GradDown, self.round, self.agg, j, g)?);
            }
        }
        local_update(device, opt, &own_grad.expect("aggregator gradient"), self.progress)?;
        Ok(Outcome::Aggregated(out.loss))
    }
}

#[allow(clippy::too_many_arguments)]
fn threaded_round(
    devices: &mut [DeviceState],
    optimizers: &mut [Adam],
    batch_features: &[Matrix],
    round: u64,
    agg: usize,
    dropped: Option<usize>,
    progress: f64,
    cfg: &FederationConfig,
    net: &mut Network,
) -> Result<f64> {
    let k = devices.len();
    let (senders, receivers): (Vec<_>, Vec<_>) = (0..k).map(|_| channel::<Envelope>()).unzip();
    let log = Mutex::new(Vec::new());

    let outcomes: Vec<Result<Outcome>> = std::thread::scope(|s| {
        let handles: Vec<_> = devices
            .iter_mut()
            .zip(optimizers.iter_mut())
            .zip(batch_features)
            .zip(receivers)
            .enumerate()
            .map(|(id, (((device, opt), features), inbox))| {
                let actor = Actor {
                    id,
                    agg,
                    round,
                    silent: dropped == Some(id),
                    progress,
                    cfg,
                    inbox,
                    peers: senders.clone(),
                    log: &log,
                };
                s.spawn(move || actor.run(device, opt, features))
            })
            .collect();
        drop(senders);
        handles.into_iter().map(|h| h.join().expect("device thread panicked")).collect()
    });

    // canonical order, identical to the sequential schedule
    let mut records = log.into_inner().expect("trace log poisoned");
    records.sort_by_key(|r| (r.kind, r.sender, r.receiver));
    let mut loss = None;
    let mut was_aborted = false;
    let mut first_error = None;
    for outcome in outcomes {
        match outcome {
            Ok(Outcome::Aggregated(l)) => loss = Some(l),
            Ok(Outcome::Aborted) => was_aborted = true,
            Ok(Outcome::Updated) => {}
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    let aborted_round = was_aborted || first_error.is_some();
    for r in records {
        net.account(Phase::CeTraining, r, aborted_round);
    }
    if let Some(e) = first_error {
        return Err(e);
    }
    match (loss, dropped) {
        (Some(l), None) if !was_aborted => Ok(l),
        (_, d) => Err(aborted(round, d.unwrap_or(agg))),
    }
}
