use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::datakit::Dataset;
use crate::ensemble::{apply_batch, EnsembleRule};
use crate::federation::{idealize_consensus, Message, MessageKind, Network, Phase};
use crate::model_zoo::{COLayer, DeviceState};
use crate::numerics::{spectral_norm, Matrix, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquivalenceReport {
    pub rule: EnsembleRule,
    pub matches: usize,
    pub total: usize,
}

impl EquivalenceReport {
    pub fn fraction(&self) -> f64 {
        self.matches as f64 / self.total.max(1) as f64
    }
}

/// A CO layer in the ideal setting: it answers every canonical embedding
/// with its own device's tail logits for that sample plus a constant shift.
/// Being a table, it can only be queried with embeddings it was built for.
struct IdealCo {
    answers: HashMap<Vec<u32>, Vec<f32>>,
    num_classes: usize,
}

impl IdealCo {
    fn new(canonical: &Matrix, tail_logits: &Matrix, shifts: &[f32]) -> Result<Self> {
        let mut answers = HashMap::with_capacity(canonical.rows());
        for (x, z) in canonical.iter_rows().enumerate() {
            let logits = tail_logits.row(x).iter().map(|&m| m + shifts[x]).collect();
            if answers.insert(key(z), logits).is_some() {
                return Err(Error::invalid(format!("canonical embedding of sample {x} is not unique")));
            }
        }
        Ok(Self { answers, num_classes: tail_logits.cols() })
    }

    fn predict(&self, z: &Matrix) -> Result<Matrix> {
        let mut data = Vec::with_capacity(z.rows() * self.num_classes);
        for row in z.iter_rows() {
            let answer = self
                .answers
                .get(&key(row))
                .ok_or_else(|| Error::invalid("ideal CO queried off its canonical embeddings"))?;
            data.extend_from_slice(answer);
        }
        Matrix::from_vec(z.rows(), self.num_classes, data)
    }
}

fn key(row: &[f32]) -> Vec<u32> {
    row.iter().map(|v| v.to_bits()).collect()
}

/// Builds the ideal CE + CO setting on `test` and measures how often CE-FI
/// picks the same label as input-sharing FI, per rule.
///
/// Every device's embedding is replaced by the canonical mean embedding;
/// each CO returns its own tail's logits shifted by `c_{k,x}`, drawn
/// uniformly from `[-shift_scale, shift_scale]` (all zero when the scale is
/// zero). Every device takes a turn as the origin; a sample matches only if
/// it matches for all origins.
pub fn verify_fi_equivalence(
    devices: &[DeviceState],
    test: &Dataset,
    rules: &[EnsembleRule],
    shift_scale: f32,
    seed: u64,
) -> Result<Vec<EquivalenceReport>> {
    let labels = test.labels()?;
    let canonical = idealize_consensus(devices, test.as_batch())?;
    let solo = devices
        .iter()
        .map(|d| d.solo_predict(&d.features(test.as_batch())?))
        .collect::<Result<Vec<_>>>()?;
    let rng = Rng::new(seed);
    let ideal = solo
        .iter()
        .enumerate()
        .map(|(k, logits)| {
            let mut r = rng.derive(k as u64);
            let shifts: Vec<f32> = (0..test.len()).map(|_| r.uniform(-shift_scale, shift_scale)).collect();
            IdealCo::new(&canonical, logits, &shifts)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut net = Network::new();
    let mut reports = Vec::with_capacity(rules.len());
    for &rule in rules {
        let reference = apply_batch(rule, &solo, Some(labels))?;
        let mut agree = vec![true; test.len()];
        for origin in 0..devices.len() {
            let mut answers = Vec::with_capacity(devices.len());
            for (k, co) in ideal.iter().enumerate() {
                if k == origin {
                    answers.push(co.predict(&canonical)?);
                    continue;
                }
                net.send(Phase::Inference, Message::new(MessageKind::EmbedShare, 0, origin, k, canonical.clone())?);
                let z = net.receive(k, MessageKind::EmbedShare, origin)?.into_payload();
                net.send(Phase::Inference, Message::new(MessageKind::LogitsReturn, 0, k, origin, co.predict(&z)?)?);
                answers.push(net.receive(origin, MessageKind::LogitsReturn, k)?.into_payload());
            }
            let decisions = apply_batch(rule, &answers, Some(labels))?;
            for (x, (d, r)) in decisions.iter().zip(&reference).enumerate() {
                agree[x] &= d.label == r.label;
            }
        }
        let matches = agree.iter().filter(|&&a| a).count();
        reports.push(EquivalenceReport { rule, matches, total: test.len() });
    }
    Ok(reports)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryCheckConfig {
    /// Perturbation radius.
    pub epsilon: f64,
    /// Lipschitz constant assumed for the softmax.
    pub lambda: f64,
    pub num_perturbations: usize,
}

impl Default for TheoryCheckConfig {
    fn default() -> Self {
        Self { epsilon: 0.05, lambda: 1.0, num_perturbations: 1000 }
    }
}

impl TheoryCheckConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.lambda > 0.0) || self.num_perturbations == 0 {
            return Err(Error::config("lambda and num_perturbations must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpsilonReport {
    /// `σmax(W2)·σmax(W1)`.
    pub lipschitz: f64,
    /// `L·λ·ε`.
    pub bound: f64,
    pub max_logit_deviation: f64,
    pub max_prob_deviation: f64,
    /// Perturbations with `‖Δp‖₂ > L·λ·ε`.
    pub violations: usize,
    /// Perturbations whose unperturbed top-2 probability gap exceeds `2Lλε`.
    pub margin_cases: usize,
    /// Argmax changes among the margin cases.
    pub margin_flips: usize,
    pub samples: usize,
}

/// Two-layer CO in eval mode, evaluated in f64 straight from the weights.
struct CoForm {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    d: usize,
    h: usize,
    c: usize,
}

impl CoForm {
    fn new(co: &COLayer) -> Self {
        let widen = |m: &Matrix| m.data().iter().map(|&v| f64::from(v)).collect::<Vec<_>>();
        let (first, second) = (co.first(), co.second());
        Self {
            w1: widen(&first.weight),
            b1: widen(&first.bias),
            w2: widen(&second.weight),
            b2: widen(&second.bias),
            d: first.in_dim(),
            h: first.out_dim(),
            c: second.out_dim(),
        }
    }

    fn logits(&self, z: &[f64]) -> Vec<f64> {
        let mut hidden = self.b1.clone();
        for (i, &zi) in z.iter().enumerate() {
            for (hj, w) in hidden.iter_mut().zip(&self.w1[i * self.h..(i + 1) * self.h]) {
                *hj += zi * w;
            }
        }
        let mut out = self.b2.clone();
        for (j, &hj) in hidden.iter().enumerate() {
            let a = hj.max(0.0);
            if a != 0.0 {
                for (o, w) in out.iter_mut().zip(&self.w2[j * self.c..(j + 1) * self.c]) {
                    *o += a * w;
                }
            }
        }
        out
    }
}

fn softmax64(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&m| (m - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn argmax64(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Samples perturbations `δ` with `‖δ‖ ≤ ε` around the rows of `z` (cycling
/// through them) and checks the probability-deviation bound and the margin
/// condition for the CO layer's eval-mode map.
pub fn verify_epsilon_bound(co: &COLayer, z: &Matrix, cfg: &TheoryCheckConfig, seed: u64) -> Result<EpsilonReport> {
    cfg.validate()?;
    if z.rows() == 0 || z.cols() != co.embed_dim() {
        return Err(Error::shape(format!("need embeddings of width {}", co.embed_dim())));
    }
    let s1 = spectral_norm(&co.first().weight, 10_000, 1e-13)?;
    let s2 = spectral_norm(&co.second().weight, 10_000, 1e-13)?;
    let lipschitz = s1.value * s2.value;
    let bound = lipschitz * cfg.lambda * cfg.epsilon;
    let form = CoForm::new(co);
    let mut report = EpsilonReport { lipschitz, bound, samples: cfg.num_perturbations, ..Default::default() };
    let mut rng = Rng::new(seed);

    let bases: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = z
        .iter_rows()
        .map(|row| {
            let z0: Vec<f64> = row.iter().map(|&v| f64::from(v)).collect();
            let m0 = form.logits(&z0);
            let p0 = softmax64(&m0);
            (z0, m0, p0)
        })
        .collect();
    for i in 0..cfg.num_perturbations {
        let (z0, m0, p0) = &bases[i % bases.len()];
        let mut dir: Vec<f64> = (0..form.d).map(|_| rng.normal()).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        let radius = cfg.epsilon * rng.unit_f64();
        dir.iter_mut().for_each(|x| *x *= radius / norm);
        let zp: Vec<f64> = z0.iter().zip(&dir).map(|(a, b)| a + b).collect();
        let m1 = form.logits(&zp);
        let p1 = softmax64(&m1);

        let dm = distance(&m1, m0);
        let dp = distance(&p1, p0);
        report.max_logit_deviation = report.max_logit_deviation.max(dm);
        report.max_prob_deviation = report.max_prob_deviation.max(dp);
        if dp > bound {
            report.violations += 1;
        }
        let top = argmax64(p0);
        let runner_up = p0
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != top)
            .map(|(_, &p)| p)
            .fold(f64::NEG_INFINITY, f64::max);
        if form.c > 1 && p0[top] - runner_up > 2.0 * bound {
            report.margin_cases += 1;
            if argmax64(&p1) != top {
                report.margin_flips += 1;
            }
        }
    }
    Ok(report)
}

/// Deviation of the eval-mode logits in the direction `direction` scaled to
/// length `epsilon`, in f64.
pub fn logit_deviation_along(co: &COLayer, z: &[f32], direction: &[f32], epsilon: f64) -> Result<f64> {
    if z.len() != co.embed_dim() || direction.len() != z.len() {
        return Err(Error::shape("embedding and direction must match the CO width"));
    }
    let form = CoForm::new(co);
    let z0: Vec<f64> = z.iter().map(|&v| f64::from(v)).collect();
    let norm = direction.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::DegenerateVector("zero perturbation direction".into()));
    }
    let zp: Vec<f64> = z0.iter().zip(direction).map(|(a, &d)| a + f64::from(d) * epsilon / norm).collect();
    Ok(distance(&form.logits(&zp), &form.logits(&z0)))
}
