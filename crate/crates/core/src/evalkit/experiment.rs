use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::baselines::{run_cefi, run_edge_ensemble, run_input_sharing_fi, run_solo_baseline, train_edge_tails};
use crate::datakit::{
    holdout_shared, partition, read_features, synth_generate, Dataset, PartitionScheme, SharedSplit,
    SyntheticTaskConfig,
};
use crate::ensemble::EnsembleRule;
use crate::federation::{train_ce, train_co_local, CeReport, CoReport, Execution, FederationConfig, Network};
use crate::model_zoo::{ArchConfig, COLayer, DeviceState, HeadSource, SYNTHETIC_HEAD_DIM};
use crate::nn::{AdamConfig, EarlyStopping, FitReport, TrainLoopConfig};
use crate::numerics::{derive_seed, Matrix, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Synthetic,
    FeatureFiles,
}

/// Where samples and device heads come from. Synthetic tasks give every
/// device a frozen random projection of the shared raw input; feature files
/// give each device its own exported features for the same sample ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub synthetic: SyntheticTaskConfig,
    /// One CEFI feature file per device, all over the same labelled ids.
    pub feature_files: Vec<String>,
    /// Fraction of feature-file samples held out for testing.
    pub test_fraction: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Synthetic,
            synthetic: SyntheticTaskConfig { separation: 6.0, stddev: 1.0, ..Default::default() },
            feature_files: Vec::new(),
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub adam: AdamConfig,
}

impl Default for TailConfig {
    fn default() -> Self {
        let es = EarlyStopping::default();
        Self {
            batch_size: 64,
            max_epochs: 30,
            patience: es.patience,
            validation_fraction: es.validation_fraction,
            adam: AdamConfig::default(),
        }
    }
}

impl TailConfig {
    pub fn loop_config(&self, seed: u64) -> TrainLoopConfig {
        TrainLoopConfig {
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            early_stopping: Some(EarlyStopping {
                patience: self.patience,
                validation_fraction: self.validation_fraction,
            }),
            seed,
        }
    }
}

/// One experiment cell: a task, a partition of it over `num_devices`
/// devices, and every training hyperparameter. `seed` drives all
/// randomness; the seeds inside the nested configs are overwritten from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub scheme: PartitionScheme,
    pub num_devices: usize,
    pub head_dim: usize,
    pub shared_fraction: f64,
    pub arch: ArchConfig,
    pub tail: TailConfig,
    pub federation: FederationConfig,
    pub edge_ensemble: bool,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskSpec::default(),
            scheme: PartitionScheme::Disjoint,
            num_devices: 3,
            head_dim: SYNTHETIC_HEAD_DIM,
            shared_fraction: 0.2,
            arch: ArchConfig::default(),
            tail: TailConfig::default(),
            federation: FederationConfig { ce_max_epochs: 30, ..Default::default() },
            edge_ensemble: true,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.seed = seed;
        cfg.task.synthetic.seed = seed;
        cfg.federation.seed = seed;
        cfg
    }

    pub fn with_scheme(&self, scheme: PartitionScheme) -> Self {
        Self { scheme, ..self.clone() }
    }

    /// First 8 bytes (little endian) of the SHA-256 of the canonical JSON
    /// serialisation. The execution mode is left out: threaded and
    /// sequential runs produce the same bytes.
    pub fn hash(&self) -> u64 {
        let mut canonical = self.clone();
        canonical.federation.execution = Execution::SingleThreaded;
        let json = serde_json::to_vec(&canonical).expect("config serialises");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }

    /// Every problem at once, joined into a single `InvalidConfig`.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut check = |r: Result<()>| {
            if let Err(e) = r {
                problems.push(match e {
                    Error::InvalidConfig(m) => m,
                    other => other.to_string(),
                });
            }
        };
        match self.task.kind {
            TaskKind::Synthetic => check(self.task.synthetic.validate()),
            TaskKind::FeatureFiles => {
                if self.task.feature_files.len() != self.num_devices {
                    check(Err(Error::config(format!(
                        "task.feature_files lists {} files for {} devices",
                        self.task.feature_files.len(),
                        self.num_devices
                    ))));
                }
                if !(self.task.test_fraction > 0.0 && self.task.test_fraction < 1.0) {
                    check(Err(Error::config("task.test_fraction must lie in (0, 1)")));
                }
            }
        }
        if self.head_dim == 0 {
            check(Err(Error::config("head_dim must be positive")));
        }
        if !(self.shared_fraction > 0.0 && self.shared_fraction < 1.0) {
            check(Err(Error::config("shared_fraction must lie in (0, 1)")));
        }
        if self.arch.embed_dim == 0 || self.arch.tail_hidden == 0 || self.arch.co_hidden == 0 {
            check(Err(Error::config("arch dimensions must be positive")));
        }
        if !(0.0..1.0).contains(&self.arch.ce_dropout) {
            check(Err(Error::config("arch.ce_dropout must lie in [0, 1)")));
        }
        check(self.tail.loop_config(0).validate());
        if let PartitionScheme::Dirichlet(a) = self.scheme {
            if !(a > 0.0 && a.is_finite()) {
                check(Err(Error::config(format!("dirichlet alpha must be positive, got {a}"))));
            }
        } else if self.num_devices != 3 {
            check(Err(Error::config("manual partition schemes need exactly 3 devices")));
        }
        check(self.federation.validate(self.num_devices));
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }

    fn stage_seed(&self, label: u64) -> u64 {
        derive_seed(self.seed, label)
    }
}

/// Samples of one cell after splitting: each device's labelled local data,
/// the unlabelled shared set, and the test set.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub locals: Vec<Dataset>,
    pub split: SharedSplit,
    pub test: Dataset,
    /// Per-device features of every sample, for feature-file tasks.
    pub file_heads: Option<Vec<HeadSource>>,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let task = load_task(cfg)?;
    let (split, locals) = split_and_partition(cfg, &task.train)?;
    Ok(PreparedData { locals, split, test: task.test, file_heads: task.file_heads })
}

/// Train and test samples of a cell, before any splitting.
#[derive(Debug, Clone)]
pub struct LoadedTask {
    pub train: Dataset,
    pub test: Dataset,
    pub file_heads: Option<Vec<HeadSource>>,
}

pub fn load_task(cfg: &ExperimentConfig) -> Result<LoadedTask> {
    cfg.validate()?;
    match cfg.task.kind {
        TaskKind::Synthetic => {
            let task = synth_generate(&cfg.task.synthetic)?;
            Ok(LoadedTask { train: task.train, test: task.test, file_heads: None })
        }
        TaskKind::FeatureFiles => {
            let (all, heads) = load_feature_files(&cfg.task.feature_files)?;
            let perm = Rng::new(cfg.stage_seed(0x7E57)).permutation(all.len());
            let n_test = ((all.len() as f64) * cfg.task.test_fraction).round() as usize;
            let mut test_idx = perm[..n_test].to_vec();
            let mut train_idx = perm[n_test..].to_vec();
            test_idx.sort_unstable();
            train_idx.sort_unstable();
            Ok(LoadedTask { train: all.select(&train_idx), test: all.select(&test_idx), file_heads: Some(heads) })
        }
    }
}

/// Holds out the shared set and partitions the rest over the devices.
pub fn split_and_partition(cfg: &ExperimentConfig, train: &Dataset) -> Result<(SharedSplit, Vec<Dataset>)> {
    let split = holdout_shared(train, cfg.shared_fraction, cfg.stage_seed(0x5A4E))?;
    let locals = partition(&split.local_pool, cfg.scheme, cfg.num_devices, cfg.stage_seed(0x9A47))?;
    Ok((split, locals))
}

/// Reads one feature file per device and checks that they cover the same
/// labelled samples in the same order.
pub fn load_feature_files(paths: &[String]) -> Result<(Dataset, Vec<HeadSource>)> {
    let mut dataset = None;
    let mut heads = Vec::with_capacity(paths.len());
    for path in paths {
        let file = read_features(path)?;
        let labels = file
            .labels
            .clone()
            .ok_or_else(|| Error::config(format!("feature file {path} carries no labels")))?;
        match &dataset {
            None => {
                let num_classes = labels.iter().max().map_or(0, |&m| m as usize + 1);
                let ds = Dataset::new(file.ids.clone(), Matrix::zeros(file.ids.len(), 0), Some(labels), num_classes)?;
                dataset = Some(ds);
            }
            Some(ds) => {
                if ds.ids() != file.ids.as_slice() || ds.labels()? != labels.as_slice() {
                    return Err(Error::config(format!(
                        "feature file {path} does not cover the same labelled samples as {}",
                        paths[0]
                    )));
                }
            }
        }
        heads.push(HeadSource::file_backed(&file.ids, file.features)?);
    }
    let dataset = dataset.ok_or_else(|| Error::config("no feature files given"))?;
    Ok((dataset, heads))
}

/// Fresh, untrained devices with their frozen heads.
pub fn build_devices(cfg: &ExperimentConfig, data: &PreparedData) -> Result<Vec<DeviceState>> {
    let num_classes = data.test.num_classes();
    (0..cfg.num_devices)
        .map(|k| {
            let head = match &data.file_heads {
                Some(heads) => heads[k].clone(),
                None => HeadSource::synthetic(
                    cfg.task.synthetic.input_dim,
                    cfg.head_dim,
                    cfg.stage_seed(0x4EAD_0000 + k as u64),
                ),
            };
            Ok(DeviceState::new(k, head, num_classes, cfg.arch, cfg.stage_seed(0xDE71_0000 + k as u64)))
        })
        .collect()
}

pub fn pretrain_tails(cfg: &ExperimentConfig, devices: &mut [DeviceState], locals: &[Dataset]) -> Result<Vec<FitReport>> {
    if devices.len() != locals.len() {
        return Err(Error::shape("one local dataset per device"));
    }
    devices
        .iter_mut()
        .zip(locals)
        .map(|(d, local)| {
            let seed = cfg.stage_seed(0x7A11_0000 + d.device_id as u64);
            d.pretrain_tail(local, &cfg.tail.loop_config(seed), cfg.tail.adam)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuleAccuracy {
    pub rule: EnsembleRule,
    /// Accuracy with each device acting as the origin.
    pub per_origin: Vec<f64>,
}

impl RuleAccuracy {
    pub fn mean(&self) -> f64 {
        mean(&self.per_origin)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommSummary {
    pub ce_bytes_total: u64,
    pub ce_bytes_per_epoch: u64,
    pub ce_epochs: usize,
    pub co_bytes: u64,
    pub inference_bytes_per_sample: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub config_hash: u64,
    pub scheme: PartitionScheme,
    pub seed: u64,
    pub solo: Vec<f64>,
    pub cefi: Vec<RuleAccuracy>,
    /// CE-FI with the oracle rule, per origin.
    pub oracle: Vec<f64>,
    pub input_sharing: f64,
    pub edge_ensemble: Option<f64>,
    pub comm: CommSummary,
}

impl ExperimentResult {
    pub fn rule(&self, rule: EnsembleRule) -> Option<&RuleAccuracy> {
        self.cefi.iter().find(|r| r.rule == rule)
    }

    pub fn mean_solo(&self) -> f64 {
        mean(&self.solo)
    }
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// A fully trained cell with everything needed to evaluate or inspect it.
#[derive(Debug)]
pub struct TrainedCell {
    pub config: ExperimentConfig,
    pub data: PreparedData,
    pub devices: Vec<DeviceState>,
    pub tail_reports: Vec<FitReport>,
    pub ce_report: CeReport,
    /// CO layers as they were before CO training, for retraining variants.
    pub initial_co: Vec<COLayer>,
    pub co_reports: Vec<CoReport>,
    pub network: Network,
}

/// Data, tails, CE, CO — every training stage of one cell.
pub fn train_cell(cfg: &ExperimentConfig) -> Result<TrainedCell> {
    let data = prepare_data(cfg)?;
    let mut devices = build_devices(cfg, &data)?;
    let tail_reports = pretrain_tails(cfg, &mut devices, &data.locals)?;
    let mut network = Network::new();
    let ce_report = train_ce(&mut devices, &data.split.shared, &cfg.federation, &mut network)?;
    let initial_co = devices.iter().map(|d| d.co.clone()).collect();
    let co_reports = devices
        .iter_mut()
        .map(|d| train_co_local(d, &data.split.shared, &cfg.federation))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainedCell { config: cfg.clone(), data, devices, tail_reports, ce_report, initial_co, co_reports, network })
}

/// Evaluates a trained cell on its test set under every rule in `rules`
/// (the oracle is always evaluated as well).
pub fn evaluate_cell(cell: &mut TrainedCell, rules: &[EnsembleRule]) -> Result<ExperimentResult> {
    evaluate_devices(&cell.config, &cell.data, &cell.devices, rules, &mut cell.network)
}

/// [`evaluate_cell`] from parts. CE traffic is read from `network`'s meter,
/// inference traffic is added to it.
pub fn evaluate_devices(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    devices: &[DeviceState],
    rules: &[EnsembleRule],
    network: &mut Network,
) -> Result<ExperimentResult> {
    let test = &data.test;
    let solo = run_solo_baseline(devices, test)?;
    let input_sharing = run_input_sharing_fi(devices, test, EnsembleRule::SoftVote)?;
    let edge_ensemble = if cfg.edge_ensemble {
        let head = devices[0].head.clone();
        let tails = train_edge_tails(cfg, &head, &data.locals)?;
        Some(run_edge_ensemble(&head, &tails, test, EnsembleRule::SoftVote)?)
    } else {
        None
    };
    let mut cefi = Vec::with_capacity(rules.len());
    let mut inference_bytes_per_sample = 0;
    for &rule in rules.iter().filter(|&&r| r != EnsembleRule::Oracle) {
        let (per_origin, bytes) = run_cefi(devices, test, rule, network)?;
        inference_bytes_per_sample = bytes;
        cefi.push(RuleAccuracy { rule, per_origin });
    }
    let (oracle, bytes) = run_cefi(devices, test, EnsembleRule::Oracle, network)?;
    inference_bytes_per_sample = inference_bytes_per_sample.max(bytes);
    let meter = &network.meter;
    let comm = CommSummary {
        ce_bytes_total: meter.ce_training,
        ce_bytes_per_epoch: meter.ce_per_epoch.first().copied().unwrap_or(0),
        ce_epochs: meter.ce_per_epoch.len(),
        co_bytes: meter.co_training,
        inference_bytes_per_sample,
    };
    Ok(ExperimentResult {
        config_hash: cfg.hash(),
        scheme: cfg.scheme,
        seed: cfg.seed,
        solo,
        cefi,
        oracle,
        input_sharing,
        edge_ensemble,
        comm,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig, rules: &[EnsembleRule]) -> Result<ExperimentResult> {
    let mut cell = train_cell(cfg)?;
    evaluate_cell(&mut cell, rules)
}

/// The canonical desk-scale grid: all four manual schemes and Dirichlet
/// α ∈ {0.1, 0.5}.
pub fn canonical_schemes() -> Vec<PartitionScheme> {
    vec![
        PartitionScheme::Mild,
        PartitionScheme::Moderate,
        PartitionScheme::Skewed,
        PartitionScheme::Disjoint,
        PartitionScheme::Dirichlet(0.1),
        PartitionScheme::Dirichlet(0.5),
    ]
}

/// Runs every (scheme, seed) cell of a grid. Cells are independent and
/// each is deterministic, so the result does not depend on execution order.
pub fn run_grid(
    base: &ExperimentConfig,
    schemes: &[PartitionScheme],
    seeds: &[u64],
    rules: &[EnsembleRule],
) -> Result<Vec<ExperimentResult>> {
    let mut out = Vec::with_capacity(schemes.len() * seeds.len());
    for &scheme in schemes {
        for &seed in seeds {
            out.push(run_experiment(&base.with_scheme(scheme).with_seed(seed), rules)?);
        }
    }
    Ok(out)
}
