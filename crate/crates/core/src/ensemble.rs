//! Rules for turning K devices' logits into one label.
//!
//! Every argmax breaks ties towards the lowest index: the lowest class for
//! label votes, the lowest device for selection rules.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::numerics::{derive_seed, log_sum_exp, mix64, softmax_slice, Matrix, Rng};
use crate::{Error, Result};

/// Probabilities below this are clamped inside the entropy logarithm.
pub const ENTROPY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnsembleRule {
    HardVote,
    SoftVote,
    LogitsAvg,
    MaxSoftmax,
    MinEntropy,
    MinEnergy,
    Random(u64),
    Oracle,
}

impl EnsembleRule {
    pub const PRACTICAL: [EnsembleRule; 6] = [
        EnsembleRule::HardVote,
        EnsembleRule::SoftVote,
        EnsembleRule::LogitsAvg,
        EnsembleRule::MaxSoftmax,
        EnsembleRule::MinEntropy,
        EnsembleRule::MinEnergy,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            EnsembleRule::HardVote => "hard_vote",
            EnsembleRule::SoftVote => "soft_vote",
            EnsembleRule::LogitsAvg => "logits_avg",
            EnsembleRule::MaxSoftmax => "max_softmax",
            EnsembleRule::MinEntropy => "min_entropy",
            EnsembleRule::MinEnergy => "min_energy",
            EnsembleRule::Random(_) => "random",
            EnsembleRule::Oracle => "oracle",
        }
    }

    /// True when adding a constant to any one device's logits never changes the label.
    pub fn is_shift_invariant(&self) -> bool {
        !matches!(self, EnsembleRule::MinEnergy | EnsembleRule::Random(_) | EnsembleRule::Oracle)
    }
}

impl fmt::Display for EnsembleRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `random` parses with seed 0; callers rebind it with the run seed.
impl FromStr for EnsembleRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "hard_vote" => EnsembleRule::HardVote,
            "soft_vote" => EnsembleRule::SoftVote,
            "logits_avg" => EnsembleRule::LogitsAvg,
            "max_softmax" => EnsembleRule::MaxSoftmax,
            "min_entropy" => EnsembleRule::MinEntropy,
            "min_energy" => EnsembleRule::MinEnergy,
            "random" => EnsembleRule::Random(0),
            "oracle" => EnsembleRule::Oracle,
            other => return Err(Error::config(format!("unknown ensemble rule '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decision {
    pub label: usize,
    /// Device whose prediction was taken, for selection rules.
    pub selected: Option<usize>,
}

/// `E(m) = −log Σ exp m`.
pub fn energy(logits: &[f32]) -> Result<f64> {
    Ok(-log_sum_exp(logits)?)
}

/// Natural-log entropy of `softmax(m)`.
pub fn entropy(logits: &[f32]) -> Result<f64> {
    let p = probabilities(logits)?;
    Ok(-p.iter().map(|&q| q * q.max(ENTROPY_FLOOR).ln()).sum::<f64>())
}

fn probabilities(logits: &[f32]) -> Result<Vec<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite logit"));
    }
    Ok(softmax_slice(&logits.iter().map(|&v| f64::from(v)).collect::<Vec<_>>()))
}

fn argmax_f64(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn argmin_f64(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

fn argmax_f32(values: &[f32]) -> usize {
    crate::numerics::argmax(values)
}

fn select(logits: &[&[f32]], device: usize) -> Decision {
    Decision { label: argmax_f32(logits[device]), selected: Some(device) }
}

fn logits_fingerprint(logits: &[&[f32]]) -> u64 {
    logits.iter().flat_map(|m| m.iter()).fold(0x243F_6A88_85A3_08D3, |h, v| mix64(h ^ u64::from(v.to_bits())))
}

/// Applies `rule` to one sample's per-device logits.
pub fn apply(rule: EnsembleRule, logits: &[&[f32]], true_label: Option<usize>) -> Result<Decision> {
    let Some(first) = logits.first() else {
        return Err(Error::invalid("ensemble over zero devices"));
    };
    let classes = first.len();
    if classes == 0 || logits.iter().any(|m| m.len() != classes) {
        return Err(Error::shape("every device must return the same number of logits"));
    }
    let k = logits.len();
    let mean_of = |rows: Vec<Vec<f64>>| -> Vec<f64> {
        (0..classes).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / k as f64).collect()
    };

    Ok(match rule {
        EnsembleRule::HardVote => {
            let mut votes = vec![0.0; classes];
            for m in logits {
                votes[argmax_f32(m)] += 1.0;
            }
            Decision { label: argmax_f64(&votes), selected: None }
        }
        EnsembleRule::SoftVote => {
            let probs = logits.iter().map(|m| probabilities(m)).collect::<Result<Vec<_>>>()?;
            Decision { label: argmax_f64(&mean_of(probs)), selected: None }
        }
        EnsembleRule::LogitsAvg => {
            let rows = logits.iter().map(|m| m.iter().map(|&v| f64::from(v)).collect()).collect();
            Decision { label: argmax_f64(&mean_of(rows)), selected: None }
        }
        EnsembleRule::MaxSoftmax => {
            let conf = logits
                .iter()
                .map(|m| Ok(probabilities(m)?.into_iter().fold(f64::NEG_INFINITY, f64::max)))
                .collect::<Result<Vec<_>>>()?;
            select(logits, argmax_f64(&conf))
        }
        EnsembleRule::MinEntropy => {
            let h = logits.iter().map(|m| entropy(m)).collect::<Result<Vec<_>>>()?;
            select(logits, argmin_f64(&h))
        }
        EnsembleRule::MinEnergy => {
            let e = logits.iter().map(|m| energy(m)).collect::<Result<Vec<_>>>()?;
            select(logits, argmin_f64(&e))
        }
        EnsembleRule::Random(seed) => {
            let mut rng = Rng::new(derive_seed(seed, logits_fingerprint(logits)));
            select(logits, rng.below(k))
        }
        EnsembleRule::Oracle => {
            let truth = true_label.ok_or(Error::MissingOracleLabel)?;
            match logits.iter().position(|m| argmax_f32(m) == truth) {
                Some(device) => select(logits, device),
                None => apply(EnsembleRule::MinEnergy, logits, None)?,
            }
        }
    })
}

/// Row-wise [`apply`] over `K` logit matrices of equal shape.
pub fn apply_batch(rule: EnsembleRule, per_device: &[Matrix], labels: Option<&[u32]>) -> Result<Vec<Decision>> {
    let Some(first) = per_device.first() else {
        return Err(Error::invalid("ensemble over zero devices"));
    };
    if per_device.iter().any(|m| m.shape() != first.shape()) {
        return Err(Error::shape("per-device logit matrices differ in shape"));
    }
    if labels.is_some_and(|l| l.len() != first.rows()) {
        return Err(Error::shape("label count differs from sample count"));
    }
    (0..first.rows())
        .map(|x| {
            let rows: Vec<&[f32]> = per_device.iter().map(|m| m.row(x)).collect();
            apply(rule, &rows, labels.map(|l| l[x] as usize))
        })
        .collect()
}

pub fn accuracy(decisions: &[Decision], labels: &[u32]) -> f64 {
    if decisions.is_empty() {
        return 0.0;
    }
    let hits = decisions.iter().zip(labels).filter(|(d, &l)| d.label == l as usize).count();
    hits as f64 / decisions.len() as f64
}
