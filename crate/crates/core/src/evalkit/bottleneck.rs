use super::experiment::TrainedCell;
use crate::ensemble::{accuracy, EnsembleRule};
use crate::federation::{exclude_ood_for_co, idealize_consensus, infer_from_embedding, train_co, Network};
use crate::model_zoo::DeviceState;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BottleneckVariant {
    /// CO trained and queried on the mean embedding over all devices.
    ConsensusUnification,
    /// CO trained only on shared samples of classes the device has seen.
    OodExclusion,
    Both,
}

impl BottleneckVariant {
    pub const ALL: [BottleneckVariant; 3] =
        [BottleneckVariant::ConsensusUnification, BottleneckVariant::OodExclusion, BottleneckVariant::Both];

    pub fn name(&self) -> &'static str {
        match self {
            BottleneckVariant::ConsensusUnification => "consensus_unification",
            BottleneckVariant::OodExclusion => "ood_exclusion",
            BottleneckVariant::Both => "both",
        }
    }

    fn unifies(&self) -> bool {
        matches!(self, BottleneckVariant::ConsensusUnification | BottleneckVariant::Both)
    }

    fn excludes_ood(&self) -> bool {
        matches!(self, BottleneckVariant::OodExclusion | BottleneckVariant::Both)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantOutcome {
    pub variant: BottleneckVariant,
    pub accuracy: Vec<f64>,
    /// `accuracy − baseline`, per origin device.
    pub delta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BottleneckReport {
    pub rule: EnsembleRule,
    /// Baseline CE-FI accuracy per origin device.
    pub baseline: Vec<f64>,
    pub variants: Vec<VariantOutcome>,
}

impl BottleneckReport {
    pub fn variant(&self, v: BottleneckVariant) -> &VariantOutcome {
        self.variants.iter().find(|o| o.variant == v).expect("every variant is run")
    }
}

/// Retrains the CO layers of a trained cell from their initial state under
/// each idealised variant and compares per-device CE-FI accuracy with the
/// cell as trained. Uses the oracle labels of the shared set, so it is an
/// evaluation-only tool.
pub fn run_bottleneck_suite(cell: &TrainedCell, rule: EnsembleRule) -> Result<BottleneckReport> {
    let test = &cell.data.test;
    let labels = test.labels()?;
    let shared = &cell.data.split.shared;
    let cfg = &cell.config.federation;
    let k = cell.devices.len();

    let evaluate = |devices: &[DeviceState], unified: bool| -> Result<Vec<f64>> {
        let mut net = Network::new();
        let canonical = if unified { Some(idealize_consensus(devices, test.as_batch())?) } else { None };
        (0..k)
            .map(|origin| {
                let z = match &canonical {
                    Some(z) => z.clone(),
                    None => {
                        let d = &devices[origin];
                        d.embed(&d.features(test.as_batch())?)?
                    }
                };
                let out = infer_from_embedding(origin, &z, devices, rule, Some(labels), &mut net)?;
                Ok(accuracy(&out.decisions, labels))
            })
            .collect()
    };
    let baseline = evaluate(&cell.devices, false)?;

    let mut variants = Vec::with_capacity(3);
    for variant in BottleneckVariant::ALL {
        let mut devices = cell.devices.clone();
        for (d, local) in devices.iter_mut().enumerate() {
            local.co = cell.initial_co[d].clone();
        }
        for (d, local) in cell.data.locals.iter().enumerate() {
            let train_set = if variant.excludes_ood() {
                exclude_ood_for_co(&local.label_set()?, shared, &cell.data.split.shared_oracle_labels)?
            } else {
                shared.clone()
            };
            let embeddings = if variant.unifies() {
                idealize_consensus(&devices, train_set.as_batch())?
            } else {
                devices[d].embed(&devices[d].features(train_set.as_batch())?)?
            };
            let features = devices[d].features(train_set.as_batch())?;
            train_co(&mut devices[d], &embeddings, &features, cfg)?;
        }
        let accuracy = evaluate(&devices, variant.unifies())?;
        let delta = accuracy.iter().zip(&baseline).map(|(a, b)| a - b).collect();
        variants.push(VariantOutcome { variant, accuracy, delta });
    }
    Ok(BottleneckReport { rule, baseline, variants })
}
