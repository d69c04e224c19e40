//! Per-device architectures: frozen heads, tail classifiers, consensus
//! embedding (CE) layers and cooperative output (CO) layers.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::datakit::{Container, Dataset};
use crate::error::{Error, Result};
use crate::losses::cross_entropy;
use crate::nn::{fit, Adam, AdamConfig, Dropout, FitReport, Layer, LayerNorm, Linear, Mode, Relu, Residual, Stack, TrainLoopConfig};
use crate::numerics::{Matrix, Rng};

pub const EMBED_DIM: usize = 256;
pub const TAIL_HIDDEN: usize = 1024;
pub const TAIL_DROPOUT: f32 = 0.3;
pub const CO_DROPOUT: f32 = 0.3;
pub const CE_DROPOUT: f32 = 0.1;
pub const CO_HIDDEN: usize = 256;
pub const SYNTHETIC_HEAD_DIM: usize = 128;

/// A batch of samples as seen by a head: ids, plus raw inputs when the task
/// provides them.
#[derive(Debug, Clone, Copy)]
pub struct InputBatch<'a> {
    pub ids: &'a [u32],
    pub raw: Option<&'a Matrix>,
}

/// Frozen feature extractor of one device.
#[derive(Debug, Clone)]
pub enum HeadSource {
    /// Features exported ahead of time, looked up by sample id.
    FileBacked { feature_dim: usize, rows: HashMap<u32, usize>, features: Matrix },
    /// Frozen random `linear + ReLU` projection of the raw input.
    SyntheticProjection { projection: Linear },
}

impl HeadSource {
    pub fn synthetic(input_dim: usize, feature_dim: usize, seed: u64) -> Self {
        let projection = Linear::new(input_dim, feature_dim, &mut Rng::new(seed));
        HeadSource::SyntheticProjection { projection }
    }

    pub fn file_backed(ids: &[u32], features: Matrix) -> Result<Self> {
        if ids.len() != features.rows() {
            return Err(Error::shape(format!(
                "{} ids for {} feature rows",
                ids.len(),
                features.rows()
            )));
        }
        let mut rows = HashMap::with_capacity(ids.len());
        for (row, &id) in ids.iter().enumerate() {
            if rows.insert(id, row).is_some() {
                return Err(Error::invalid(format!("duplicate sample id {id} in head features")));
            }
        }
        Ok(HeadSource::FileBacked { feature_dim: features.cols(), rows, features })
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            HeadSource::FileBacked { feature_dim, .. } => *feature_dim,
            HeadSource::SyntheticProjection { projection } => projection.out_dim(),
        }
    }

    pub fn needs_raw_input(&self) -> bool {
        matches!(self, HeadSource::SyntheticProjection { .. })
    }

    /// Intermediate features `z` for the batch; a pure function of the ids
    /// (file-backed) or raw inputs (synthetic).
    pub fn extract(&self, batch: InputBatch<'_>) -> Result<Matrix> {
        match self {
            HeadSource::FileBacked { rows, features, .. } => {
                let idx = batch
                    .ids
                    .iter()
                    .map(|id| {
                        rows.get(id).copied().ok_or_else(|| {
                            Error::invalid(format!("sample id {id} missing from head features"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(features.select_rows(&idx))
            }
            HeadSource::SyntheticProjection { projection } => {
                let raw = batch
                    .raw
                    .ok_or_else(|| Error::invalid("synthetic head needs raw inputs"))?;
                if raw.rows() != batch.ids.len() {
                    return Err(Error::shape("raw input rows differ from id count"));
                }
                if raw.cols() != projection.in_dim() {
                    return Err(Error::shape(format!(
                        "synthetic head expects {} input features, got {}",
                        projection.in_dim(),
                        raw.cols()
                    )));
                }
                Ok(projection.predict(raw)?.map(|v| v.max(0.0)))
            }
        }
    }
}

fn check_input_dim(x: &Matrix, expected: usize, what: &str) -> Result<()> {
    if x.cols() != expected {
        return Err(Error::shape(format!("{what} expects dim {expected}, got {}", x.cols())));
    }
    Ok(())
}

/// `Linear(in, 1024) → ReLU → Dropout(0.3) → Linear(1024, C)`.
#[derive(Debug, Clone)]
pub struct TailNet {
    pub stack: Stack,
    in_dim: usize,
    num_classes: usize,
}

impl TailNet {
    pub fn new(in_dim: usize, num_classes: usize, hidden: usize, rng: &mut Rng) -> Self {
        let dropout_seed = rng.next_u64();
        let stack = Stack::new(vec![
            Layer::Linear(Linear::new(in_dim, hidden, rng)),
            Layer::Relu(Relu::default()),
            Layer::Dropout(Dropout::new(TAIL_DROPOUT, dropout_seed)),
            Layer::Linear(Linear::new(hidden, num_classes, rng)),
        ]);
        Self { stack, in_dim, num_classes }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn predict(&self, features: &Matrix) -> Result<Matrix> {
        check_input_dim(features, self.in_dim, "tail")?;
        self.stack.predict(features)
    }
}

/// Consensus-embedding layer:
/// `LayerNorm(proj(x) + Drop(ReLU(FC2(Drop(ReLU(FC1(x)))))))`, where `proj`
/// is a linear map to the embedding width, or the identity when the input
/// already has that width.
#[derive(Debug, Clone)]
pub struct CELayer {
    pub stack: Stack,
    in_dim: usize,
}

impl CELayer {
    pub fn new(in_dim: usize, rng: &mut Rng) -> Self {
        Self::with_dims(in_dim, EMBED_DIM, CE_DROPOUT, rng)
    }

    pub fn with_dims(in_dim: usize, embed_dim: usize, dropout: f32, rng: &mut Rng) -> Self {
        let proj = (in_dim != embed_dim).then(|| Linear::new(in_dim, embed_dim, rng));
        let (s1, s2) = (rng.next_u64(), rng.next_u64());
        let branch = Stack::new(vec![
            Layer::Linear(Linear::new(in_dim, embed_dim, rng)),
            Layer::Relu(Relu::default()),
            Layer::Dropout(Dropout::new(dropout, s1)),
            Layer::Linear(Linear::new(embed_dim, embed_dim, rng)),
            Layer::Relu(Relu::default()),
            Layer::Dropout(Dropout::new(dropout, s2)),
        ]);
        let stack = Stack::new(vec![
            Layer::Residual(Box::new(Residual { proj, branch })),
            Layer::LayerNorm(LayerNorm::new(embed_dim)),
        ]);
        Self { stack, in_dim }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn embed_dim(&self) -> usize {
        match self.stack.layers().last() {
            Some(Layer::LayerNorm(ln)) => ln.dim(),
            _ => unreachable!("CE stack ends in layernorm"),
        }
    }

    pub fn predict(&self, features: &Matrix) -> Result<Matrix> {
        check_input_dim(features, self.in_dim, "CE layer")?;
        self.stack.predict(features)
    }

    pub fn forward(&mut self, features: &Matrix, mode: Mode) -> Result<Matrix> {
        check_input_dim(features, self.in_dim, "CE layer")?;
        self.stack.forward(features, mode)
    }
}

/// Cooperative-output layer `Linear(256, H) → ReLU → Dropout(0.3) → Linear(H, C)`;
/// in eval mode this is exactly `W2·ReLU(W1 z + b1) + b2`.
#[derive(Debug, Clone)]
pub struct COLayer {
    pub stack: Stack,
    num_classes: usize,
}

impl COLayer {
    pub fn new(embed_dim: usize, hidden: usize, num_classes: usize, rng: &mut Rng) -> Self {
        let dropout_seed = rng.next_u64();
        let stack = Stack::new(vec![
            Layer::Linear(Linear::new(embed_dim, hidden, rng)),
            Layer::Relu(Relu::default()),
            Layer::Dropout(Dropout::new(CO_DROPOUT, dropout_seed)),
            Layer::Linear(Linear::new(hidden, num_classes, rng)),
        ]);
        Self { stack, num_classes }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn embed_dim(&self) -> usize {
        self.first().in_dim()
    }

    /// First linear map `W1, b1`.
    pub fn first(&self) -> &Linear {
        match &self.stack.layers()[0] {
            Layer::Linear(l) => l,
            _ => unreachable!("CO stack starts with a linear layer"),
        }
    }

    /// Second linear map `W2, b2`.
    pub fn second(&self) -> &Linear {
        match &self.stack.layers()[3] {
            Layer::Linear(l) => l,
            _ => unreachable!("CO stack ends with a linear layer"),
        }
    }

    pub fn first_mut(&mut self) -> &mut Linear {
        match &mut self.stack.layers_mut()[0] {
            Layer::Linear(l) => l,
            _ => unreachable!("CO stack starts with a linear layer"),
        }
    }

    pub fn second_mut(&mut self) -> &mut Linear {
        match &mut self.stack.layers_mut()[3] {
            Layer::Linear(l) => l,
            _ => unreachable!("CO stack ends with a linear layer"),
        }
    }

    pub fn predict(&self, z: &Matrix) -> Result<Matrix> {
        check_input_dim(z, self.embed_dim(), "CO layer")?;
        self.stack.predict(z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub embed_dim: usize,
    pub tail_hidden: usize,
    pub co_hidden: usize,
    pub ce_dropout: f32,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self { embed_dim: EMBED_DIM, tail_hidden: TAIL_HIDDEN, co_hidden: CO_HIDDEN, ce_dropout: CE_DROPOUT }
    }
}

/// Everything one device owns. The head is always frozen; training stages
/// toggle the other freeze flags.
#[derive(Debug, Clone)]
pub struct DeviceState {
    pub device_id: usize,
    pub head: HeadSource,
    pub tail: TailNet,
    pub ce: CELayer,
    pub co: COLayer,
}

impl DeviceState {
    pub fn new(device_id: usize, head: HeadSource, num_classes: usize, arch: ArchConfig, seed: u64) -> Self {
        let root = Rng::new(seed);
        let feature_dim = head.feature_dim();
        let tail = TailNet::new(feature_dim, num_classes, arch.tail_hidden, &mut root.derive(1));
        let ce = CELayer::with_dims(feature_dim, arch.embed_dim, arch.ce_dropout, &mut root.derive(2));
        let co = COLayer::new(arch.embed_dim, arch.co_hidden, num_classes, &mut root.derive(3));
        Self { device_id, head, tail, ce, co }
    }

    pub fn num_classes(&self) -> usize {
        self.tail.num_classes()
    }

    pub fn embed_dim(&self) -> usize {
        self.ce.embed_dim()
    }

    pub fn features(&self, batch: InputBatch<'_>) -> Result<Matrix> {
        self.head.extract(batch)
    }

    /// Consensus embeddings `z' = F(z)` for intermediate features `z` (eval mode).
    pub fn embed(&self, features: &Matrix) -> Result<Matrix> {
        self.ce.predict(features)
    }

    /// Student logits `m' = G(z')` (eval mode).
    pub fn co_predict(&self, z: &Matrix) -> Result<Matrix> {
        self.co.predict(z)
    }

    /// Logits of the device's own model `m = tail(z)` (eval mode).
    pub fn solo_predict(&self, features: &Matrix) -> Result<Matrix> {
        self.tail.predict(features)
    }

    pub fn freeze_for_ce_training(&mut self) {
        self.tail.stack.set_frozen(true);
        self.ce.stack.set_frozen(false);
    }

    pub fn freeze_for_co_training(&mut self) {
        self.tail.stack.set_frozen(true);
        self.ce.stack.set_frozen(true);
        self.co.stack.set_frozen(false);
    }

    /// Supervised training of the tail on the device's local labelled data,
    /// standing in for the pretrained model the device arrives with.
    pub fn pretrain_tail(&mut self, local: &Dataset, loop_cfg: &TrainLoopConfig, adam: AdamConfig) -> Result<FitReport> {
        let labels = local.labels()?;
        let features = self.features(local.as_batch())?;
        self.tail.stack.set_frozen(false);
        let mut opt = Adam::new(adam);
        let report = fit(&mut self.tail.stack, &mut opt, &features, loop_cfg, |out, idx| {
            let batch_labels: Vec<u32> = idx.iter().map(|&i| labels[i]).collect();
            let l = cross_entropy(out, &batch_labels)?;
            Ok((l.value, l.grad))
        });
        self.tail.stack.set_frozen(true);
        report
    }

    /// Appends every trainable tensor (and a synthetic head's projection) to
    /// `out` under `device{id}.<part>.<param>` names.
    pub fn write_sections(&mut self, out: &mut Container) {
        let prefix = format!("device{}", self.device_id);
        if let HeadSource::SyntheticProjection { projection } = &self.head {
            out.push_matrix(format!("{prefix}.head.weight"), projection.weight.clone());
            out.push_matrix(format!("{prefix}.head.bias"), projection.bias.clone());
        }
        for (part, stack) in [("tail", &mut self.tail.stack), ("ce", &mut self.ce.stack), ("co", &mut self.co.stack)] {
            for (name, value) in stack.snapshot() {
                out.push_matrix(format!("{prefix}.{part}.{name}"), value);
            }
        }
    }

    /// Restores the parts present in `saved`; parts with no sections keep
    /// their current values. A partially present part is an error.
    pub fn restore_sections(&mut self, saved: &Container) -> Result<()> {
        let prefix = format!("device{}", self.device_id);
        if let HeadSource::SyntheticProjection { projection } = &mut self.head {
            let w = format!("{prefix}.head.weight");
            if saved.has(&w) {
                *projection = Linear::from_parts(
                    saved.matrix(&w)?.clone(),
                    saved.matrix(&format!("{prefix}.head.bias"))?.clone(),
                )?;
            }
        }
        for (part, stack) in [("tail", &mut self.tail.stack), ("ce", &mut self.ce.stack), ("co", &mut self.co.stack)] {
            let names: Vec<String> = stack.snapshot().into_iter().map(|(n, _)| n).collect();
            let present = names.iter().filter(|n| saved.has(&format!("{prefix}.{part}.{n}"))).count();
            if present == 0 {
                continue;
            }
            let values = names
                .into_iter()
                .map(|n| Ok((n.clone(), saved.matrix(&format!("{prefix}.{part}.{n}"))?.clone())))
                .collect::<Result<Vec<_>>>()?;
            stack.restore(&values)?;
        }
        Ok(())
    }
}
