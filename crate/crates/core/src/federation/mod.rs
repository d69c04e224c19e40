//! The protocol among devices: CE training rounds through a temporary
//! aggregator, local CO distillation, and the inference exchange, all over a
//! simulated network that meters every payload byte.

mod ce;
mod co;
mod infer;
mod network;

use serde::{Deserialize, Serialize};

use crate::losses::{ContrastiveConfig, DistillConfig};
use crate::nn::AdamConfig;
use crate::{Error, Result};

pub use ce::{batch_schedule, train_ce, train_ce_round, CeReport, RoundReport};
pub use co::{exclude_ood_for_co, train_co, train_co_local, CoReport};
pub use infer::{federated_infer, idealize_consensus, infer_from_embedding, InferenceOutcome};
pub use network::{CommMeter, Message, MessageKind, Network, Phase, TraceRecord};

/// Serialised as `"round-robin"` or `"fixed-<device>"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AggregatorPolicy {
    Fixed(usize),
    RoundRobin,
}

impl AggregatorPolicy {
    pub fn aggregator(&self, round: u64, num_devices: usize) -> usize {
        match *self {
            AggregatorPolicy::Fixed(id) => id,
            AggregatorPolicy::RoundRobin => (round % num_devices as u64) as usize,
        }
    }
}

impl TryFrom<String> for AggregatorPolicy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        if s == "round-robin" {
            return Ok(AggregatorPolicy::RoundRobin);
        }
        s.strip_prefix("fixed-")
            .and_then(|d| d.parse().ok())
            .map(AggregatorPolicy::Fixed)
            .ok_or_else(|| Error::config(format!("unknown aggregator policy '{s}'")))
    }
}

impl From<AggregatorPolicy> for String {
    fn from(p: AggregatorPolicy) -> String {
        match p {
            AggregatorPolicy::RoundRobin => "round-robin".into(),
            AggregatorPolicy::Fixed(d) => format!("fixed-{d}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Execution {
    /// Devices run one after another on the caller's thread.
    SingleThreaded,
    /// One OS thread per device per round, synchronised by message receipt.
    ThreadPerDevice,
}

/// A device that goes silent in the given (attempt-numbered) round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fault {
    pub round: u64,
    pub device: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub aggregator: AggregatorPolicy,
    pub ce_max_epochs: usize,
    pub ce_batch: usize,
    /// An epoch counts as an improvement only if it lowers the best loss by this much.
    pub ce_plateau_tol: f64,
    pub ce_plateau_patience: usize,
    pub co_epochs: usize,
    pub co_batch: usize,
    pub contrastive: ContrastiveConfig,
    pub distill: DistillConfig,
    pub adam: AdamConfig,
    pub execution: Execution,
    /// Attempts per round before an abort becomes fatal.
    pub max_round_attempts: usize,
    pub faults: Vec<Fault>,
    pub seed: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            aggregator: AggregatorPolicy::RoundRobin,
            ce_max_epochs: 100,
            ce_batch: 512,
            ce_plateau_tol: 1e-4,
            ce_plateau_patience: 10,
            co_epochs: 20,
            co_batch: 64,
            contrastive: ContrastiveConfig::default(),
            distill: DistillConfig::default(),
            adam: AdamConfig::default(),
            execution: Execution::SingleThreaded,
            max_round_attempts: 3,
            faults: Vec::new(),
            seed: 0,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self, num_devices: usize) -> Result<()> {
        let mut problems = Vec::new();
        if num_devices < 2 {
            problems.push(format!("federation needs at least 2 devices, got {num_devices}"));
        }
        if let AggregatorPolicy::Fixed(id) = self.aggregator {
            if id >= num_devices {
                problems.push(format!("fixed aggregator {id} is not one of {num_devices} devices"));
            }
        }
        if self.ce_max_epochs == 0 || self.co_epochs == 0 {
            problems.push("epoch counts must be positive".into());
        }
        if self.ce_batch < 2 {
            problems.push("ce batch must hold at least 2 samples".into());
        }
        if self.co_batch == 0 {
            problems.push("co batch must be positive".into());
        }
        if self.ce_plateau_patience == 0 || !(self.ce_plateau_tol >= 0.0) {
            problems.push("ce plateau patience must be positive and tolerance non-negative".into());
        }
        if self.max_round_attempts == 0 {
            problems.push("max_round_attempts must be positive".into());
        }
        for r in [self.contrastive.validate(), self.distill.validate()] {
            if let Err(e) = r {
                problems.push(e.to_string());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }
}
