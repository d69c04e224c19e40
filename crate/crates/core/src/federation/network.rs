use std::collections::VecDeque;
use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::numerics::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MessageKind {
    /// Consensus embeddings of a shared batch, device → aggregator.
    EmbedUp,
    /// Embedding-level gradient of the consensus loss, aggregator → device.
    GradDown,
    /// Consensus embedding of an inference input, origin → peer.
    EmbedShare,
    /// Peer's CO logits for a shared embedding, peer → origin.
    LogitsReturn,
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    CeTraining,
    CoTraining,
    Inference,
}

/// An immutable payload in flight. Payloads are only ever embeddings,
/// embedding gradients or logits; there is no variant for inputs or
/// parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    kind: MessageKind,
    round: u64,
    sender: usize,
    receiver: usize,
    payload: Matrix,
}

impl Message {
    pub fn new(kind: MessageKind, round: u64, sender: usize, receiver: usize, payload: Matrix) -> Result<Self> {
        if sender == receiver {
            return Err(Error::Protocol(format!("device {sender} messaging itself")));
        }
        Ok(Self { kind, round, sender, receiver, payload })
    }

    pub fn kind(&self) -> MessageKind {
        self.kind
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn sender(&self) -> usize {
        self.sender
    }

    pub fn receiver(&self) -> usize {
        self.receiver
    }

    pub fn payload(&self) -> &Matrix {
        &self.payload
    }

    pub fn into_payload(self) -> Matrix {
        self.payload
    }

    /// Payload floats × 4; no framing.
    pub fn byte_size(&self) -> u64 {
        self.payload.payload_bytes()
    }

    pub fn record(&self, phase: Phase) -> TraceRecord {
        TraceRecord {
            phase,
            round: self.round,
            kind: self.kind,
            sender: self.sender,
            receiver: self.receiver,
            bytes: self.byte_size(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRecord {
    pub phase: Phase,
    pub round: u64,
    pub kind: MessageKind,
    pub sender: usize,
    pub receiver: usize,
    pub bytes: u64,
}

impl TraceRecord {
    pub fn line(&self) -> String {
        format!(
            "round={} kind={} sender={} receiver={} bytes={}",
            self.round, self.kind, self.sender, self.receiver, self.bytes
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommMeter {
    pub ce_training: u64,
    /// Always zero: CO training never leaves the device.
    pub co_training: u64,
    pub inference: u64,
    /// Bytes sent in CE rounds that were later aborted.
    pub ce_aborted: u64,
    pub ce_per_epoch: Vec<u64>,
}

impl CommMeter {
    pub fn total(&self) -> u64 {
        self.ce_training + self.co_training + self.inference + self.ce_aborted
    }
}

/// In-memory transport shared by all devices of one federation.
#[derive(Debug, Default)]
pub struct Network {
    pub meter: CommMeter,
    pub trace: Vec<TraceRecord>,
    inboxes: Vec<VecDeque<Message>>,
}

impl Network {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn begin_ce_epoch(&mut self) {
        self.meter.ce_per_epoch.push(0);
    }

    /// Meters a message that was delivered outside this network's queues.
    pub(crate) fn account(&mut self, phase: Phase, record: TraceRecord, aborted: bool) {
        match phase {
            Phase::CeTraining if aborted => self.meter.ce_aborted += record.bytes,
            Phase::CeTraining => {
                self.meter.ce_training += record.bytes;
                if let Some(e) = self.meter.ce_per_epoch.last_mut() {
                    *e += record.bytes;
                }
            }
            Phase::CoTraining => self.meter.co_training += record.bytes,
            Phase::Inference => self.meter.inference += record.bytes,
        }
        self.trace.push(record);
    }

    pub fn send(&mut self, phase: Phase, msg: Message) {
        self.account(phase, msg.record(phase), false);
        let r = msg.receiver;
        if self.inboxes.len() <= r {
            self.inboxes.resize_with(r + 1, VecDeque::new);
        }
        self.inboxes[r].push_back(msg);
    }

    /// Oldest pending message for `receiver` of the given kind from `sender`.
    pub fn receive(&mut self, receiver: usize, kind: MessageKind, sender: usize) -> Result<Message> {
        let inbox = self.inboxes.get_mut(receiver);
        let pos = inbox
            .as_ref()
            .and_then(|q| q.iter().position(|m| m.kind == kind && m.sender == sender));
        match (inbox, pos) {
            (Some(q), Some(p)) => Ok(q.remove(p).expect("position is in range")),
            _ => Err(Error::Protocol(format!("device {receiver} has no {kind} from {sender}"))),
        }
    }

    /// Reclassifies the last `n` trace records' CE bytes as aborted.
    pub(crate) fn mark_aborted(&mut self, records: &[TraceRecord]) {
        for r in records {
            self.meter.ce_training -= r.bytes;
            if let Some(e) = self.meter.ce_per_epoch.last_mut() {
                *e -= r.bytes;
            }
            self.meter.ce_aborted += r.bytes;
        }
    }

    pub(crate) fn drain(&mut self, receiver: usize) {
        if let Some(q) = self.inboxes.get_mut(receiver) {
            q.clear();
        }
    }

    pub fn trace_lines(&self) -> impl Iterator<Item = String> + '_ {
        self.trace.iter().map(TraceRecord::line)
    }

    pub fn write_trace(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for line in self.trace_lines() {
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
