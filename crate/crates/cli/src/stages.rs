//! Pipeline stages. Each stage reads the artifacts of earlier stages from
//! the output directory, refuses ones written under a different config
//! hash, and writes its own artifacts deterministically.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use cefi::datakit::{read_container_checked, write_container, Container, Dataset, SharedSplit};
use cefi::evalkit::{
    build_devices, emit_report_rows, evaluate_devices, hash_hex, load_feature_files, load_task, pretrain_tails,
    read_csv, result_rows, split_and_partition, verify_epsilon_bound, verify_fi_equivalence, PreparedData,
    ResultRow, TaskKind, RESULTS_FILE,
};
use cefi::federation::{federated_infer, train_ce, train_co_local, CommMeter, Network};
use cefi::model_zoo::DeviceState;
use cefi::numerics::{derive_seed, Matrix};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;

pub const DATA: &str = "data.cefi";
pub const PARTITION: &str = "partition.cefi";
pub const TAILS: &str = "tails.cefi";
pub const CE: &str = "ce.cefi";
pub const CE_REPORT: &str = "ce_report.json";
pub const CE_TRACE: &str = "ce_trace.txt";
pub const CO: &str = "co.cefi";
pub const CO_REPORT: &str = "co_report.json";
pub const TAILS_REPORT: &str = "tails_report.json";
pub const PREDICTIONS: &str = "predictions.cefi";
pub const INFER_TRACE: &str = "infer_trace.txt";
pub const THEORY: &str = "theory.csv";

type StageResult<T = ()> = Result<T, CliError>;

pub struct Stage<'a> {
    pub cfg: &'a RunConfig,
    pub out: &'a Path,
    hash: u64,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(cefi::Error::Io { path: path.to_path_buf(), source: e })
}

#[derive(Debug, Serialize, Deserialize)]
struct CeReportFile {
    config_hash: String,
    epoch_losses: Vec<f64>,
    rounds: u64,
    aborted_rounds: u64,
    stopped_early: bool,
    ce_bytes: u64,
    ce_aborted_bytes: u64,
    ce_bytes_per_epoch: Vec<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FitSummary {
    device: usize,
    epochs: usize,
    first_loss: f64,
    last_loss: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct FitReportFile {
    config_hash: String,
    devices: Vec<FitSummary>,
}

#[derive(Debug, Serialize)]
struct TheoryRow {
    config_hash: String,
    check: &'static str,
    subject: String,
    value: f64,
    bound: Option<f64>,
    violations: Option<usize>,
    passed: Option<bool>,
}

impl<'a> Stage<'a> {
    pub fn new(cfg: &'a RunConfig, out: &'a Path) -> StageResult<Self> {
        std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
        Ok(Self { cfg, out, hash: cfg.hash() })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn require(&self, name: &str, producer: &str) -> StageResult<Container> {
        let path = self.path(name);
        if !path.exists() {
            return Err(CliError::StageDependency { path, reason: format!("run `{producer}` first") });
        }
        Ok(read_container_checked(&path, self.hash)?)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> StageResult {
        let path = self.path(name);
        let mut text = serde_json::to_string_pretty(value).expect("reports serialise");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| io_err(&path, e))
    }

    fn require_json<T: for<'de> Deserialize<'de>>(&self, name: &str, producer: &str) -> StageResult<T> {
        let path = self.path(name);
        let text = std::fs::read_to_string(&path)
            .map_err(|_| CliError::StageDependency { path: path.clone(), reason: format!("run `{producer}` first") })?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Runtime(cefi::Error::InvalidInput(format!("{}: {e}", path.display()))))?;
        let found = value.get("config_hash").and_then(|h| h.as_str()).unwrap_or_default();
        if found != hash_hex(self.hash) {
            return Err(CliError::StageDependency {
                path,
                reason: format!("written by config {found}, this run is {}", hash_hex(self.hash)),
            });
        }
        serde_json::from_value(value)
            .map_err(|e| CliError::Runtime(cefi::Error::InvalidInput(format!("{}: {e}", path.display()))))
    }

    fn write_trace(&self, name: &str, net: &Network) -> StageResult {
        let path = self.path(name);
        let mut text = format!("# config_hash={}\n", hash_hex(self.hash));
        for line in net.trace_lines() {
            text.push_str(&line);
            text.push('\n');
        }
        let mut f = std::fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| io_err(&path, e))
    }

    fn write_devices(&self, name: &str, devices: &mut [DeviceState]) -> StageResult {
        let mut c = Container::new(self.hash);
        for d in devices.iter_mut() {
            d.write_sections(&mut c);
        }
        Ok(write_container(self.path(name), &c)?)
    }

    fn load_datasets(&self) -> StageResult<(Dataset, Dataset)> {
        let c = self.require(DATA, "synth-data")?;
        let num_classes = c.u32s("num_classes")?[0] as usize;
        let load = |split: &str| -> StageResult<Dataset> {
            Ok(Dataset::new(
                c.u32s(&format!("{split}.ids"))?.to_vec(),
                c.matrix(&format!("{split}.inputs"))?.clone(),
                Some(c.u32s(&format!("{split}.labels"))?.to_vec()),
                num_classes,
            )?)
        };
        Ok((load("train")?, load("test")?))
    }

    fn prepared(&self) -> StageResult<PreparedData> {
        let (train, test) = self.load_datasets()?;
        let part = self.require(PARTITION, "partition")?;
        let row_of: HashMap<u32, usize> = train.ids().iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let rows = |name: &str| -> StageResult<Vec<usize>> {
            part.u32s(name)?
                .iter()
                .map(|id| {
                    row_of.get(id).copied().ok_or_else(|| {
                        CliError::Runtime(cefi::Error::InvalidInput(format!("{name} names unknown sample {id}")))
                    })
                })
                .collect()
        };
        let shared_rows = rows("shared.ids")?;
        let shared_labelled = train.select(&shared_rows);
        let in_shared: std::collections::HashSet<usize> = shared_rows.iter().copied().collect();
        let local_rows: Vec<usize> = (0..train.len()).filter(|i| !in_shared.contains(i)).collect();
        let split = SharedSplit {
            local_pool: train.select(&local_rows),
            shared_oracle_labels: shared_labelled.labels()?.to_vec(),
            shared: shared_labelled.without_labels(),
        };
        let locals = (0..self.cfg.experiment.num_devices)
            .map(|k| Ok(train.select(&rows(&format!("device{k}.ids"))?)))
            .collect::<StageResult<Vec<_>>>()?;
        let file_heads = match self.cfg.experiment.task.kind {
            TaskKind::Synthetic => None,
            TaskKind::FeatureFiles => Some(load_feature_files(&self.cfg.experiment.task.feature_files)?.1),
        };
        Ok(PreparedData { locals, split, test, file_heads })
    }

    fn devices(&self, data: &PreparedData, checkpoint: &str, producer: &str) -> StageResult<Vec<DeviceState>> {
        let saved = self.require(checkpoint, producer)?;
        let mut devices = build_devices(&self.cfg.experiment, data)?;
        for d in devices.iter_mut() {
            d.restore_sections(&saved)?;
        }
        Ok(devices)
    }

    pub fn synth_data(&self) -> StageResult {
        let task = load_task(&self.cfg.experiment)?;
        let mut c = Container::new(self.hash);
        c.push_u32("num_classes", vec![task.test.num_classes() as u32]);
        for (name, ds) in [("train", &task.train), ("test", &task.test)] {
            c.push_u32(format!("{name}.ids"), ds.ids().to_vec());
            c.push_matrix(format!("{name}.inputs"), ds.inputs().clone());
            c.push_u32(format!("{name}.labels"), ds.labels()?.to_vec());
        }
        write_container(self.path(DATA), &c)?;
        println!("synth-data: {} train / {} test samples", task.train.len(), task.test.len());
        Ok(())
    }

    pub fn partition(&self) -> StageResult {
        let (train, _) = self.load_datasets()?;
        let (split, locals) = split_and_partition(&self.cfg.experiment, &train)?;
        let mut c = Container::new(self.hash);
        c.push_u32("shared.ids", split.shared.ids().to_vec());
        for (k, local) in locals.iter().enumerate() {
            c.push_u32(format!("device{k}.ids"), local.ids().to_vec());
            println!("partition: device {k} holds {} samples, classes {:?}", local.len(), local.label_set()?);
        }
        write_container(self.path(PARTITION), &c)?;
        println!("partition: {} shared samples", split.shared.len());
        Ok(())
    }

    pub fn pretrain_tails(&self) -> StageResult {
        let data = self.prepared()?;
        let mut devices = build_devices(&self.cfg.experiment, &data)?;
        let reports = pretrain_tails(&self.cfg.experiment, &mut devices, &data.locals)?;
        self.write_devices(TAILS, &mut devices)?;
        let summary = FitReportFile {
            config_hash: hash_hex(self.hash),
            devices: reports
                .iter()
                .enumerate()
                .map(|(k, r)| FitSummary {
                    device: k,
                    epochs: r.epochs_run(),
                    first_loss: r.train_losses.first().copied().unwrap_or(f64::NAN),
                    last_loss: r.train_losses.last().copied().unwrap_or(f64::NAN),
                })
                .collect(),
        };
        self.write_json(TAILS_REPORT, &summary)?;
        println!("pretrain-tails: {} devices trained", devices.len());
        Ok(())
    }

    pub fn train_ce(&self) -> StageResult {
        let data = self.prepared()?;
        let mut devices = self.devices(&data, TAILS, "pretrain-tails")?;
        let mut net = Network::new();
        let report = train_ce(&mut devices, &data.split.shared, &self.cfg.experiment.federation, &mut net)?;
        self.write_devices(CE, &mut devices)?;
        self.write_trace(CE_TRACE, &net)?;
        let file = CeReportFile {
            config_hash: hash_hex(self.hash),
            epoch_losses: report.epoch_losses.clone(),
            rounds: report.rounds,
            aborted_rounds: report.aborted_rounds,
            stopped_early: report.stopped_early,
            ce_bytes: net.meter.ce_training,
            ce_aborted_bytes: net.meter.ce_aborted,
            ce_bytes_per_epoch: net.meter.ce_per_epoch.clone(),
        };
        self.write_json(CE_REPORT, &file)?;
        println!(
            "train-ce: {} epochs, loss {:.4} -> {:.4}, {} bytes",
            report.epoch_losses.len(),
            report.epoch_losses.first().copied().unwrap_or(f64::NAN),
            report.epoch_losses.last().copied().unwrap_or(f64::NAN),
            net.meter.ce_training
        );
        Ok(())
    }

    pub fn train_co(&self) -> StageResult {
        let data = self.prepared()?;
        let mut devices = self.devices(&data, CE, "train-ce")?;
        let mut summaries = Vec::with_capacity(devices.len());
        for d in devices.iter_mut() {
            let r = train_co_local(d, &data.split.shared, &self.cfg.experiment.federation)?;
            summaries.push(FitSummary {
                device: d.device_id,
                epochs: r.fit.epochs_run(),
                first_loss: r.loss_before,
                last_loss: r.loss_after,
            });
        }
        self.write_devices(CO, &mut devices)?;
        self.write_json(CO_REPORT, &FitReportFile { config_hash: hash_hex(self.hash), devices: summaries })?;
        println!("train-co: {} CO layers distilled", devices.len());
        Ok(())
    }

    fn ce_network(&self) -> StageResult<Network> {
        let ce: CeReportFile = self.require_json(CE_REPORT, "train-ce")?;
        let mut net = Network::new();
        net.meter = CommMeter {
            ce_training: ce.ce_bytes,
            ce_aborted: ce.ce_aborted_bytes,
            ce_per_epoch: ce.ce_bytes_per_epoch,
            ..Default::default()
        };
        Ok(net)
    }

    pub fn infer(&self) -> StageResult {
        let data = self.prepared()?;
        let devices = self.devices(&data, CO, "train-co")?;
        let labels = data.test.labels()?;
        let mut net = Network::new();
        let mut c = Container::new(self.hash);
        c.push_u32("test.ids", data.test.ids().to_vec());
        for &rule in &self.cfg.rules {
            for origin in 0..devices.len() {
                let out = federated_infer(origin, data.test.as_batch(), &devices, rule, Some(labels), &mut net)?;
                let predicted: Vec<u32> = out.decisions.iter().map(|d| d.label as u32).collect();
                let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
                println!(
                    "infer: rule={} origin={origin} accuracy={:.4} bytes/sample={}",
                    rule.name(),
                    hits as f64 / labels.len().max(1) as f64,
                    out.bytes / labels.len().max(1) as u64
                );
                c.push_u32(format!("{}.origin{origin}", rule.name()), predicted);
            }
        }
        write_container(self.path(PREDICTIONS), &c)?;
        self.write_trace(INFER_TRACE, &net)
    }

    pub fn evaluate(&self) -> StageResult {
        let data = self.prepared()?;
        let devices = self.devices(&data, CO, "train-co")?;
        let mut net = self.ce_network()?;
        let result = evaluate_devices(&self.cfg.experiment, &data, &devices, &self.cfg.rules, &mut net)?;
        let paths = emit_report_rows(&result_rows(std::slice::from_ref(&result)), self.hash, self.out)?;
        println!("evaluate: solo {:?}", result.solo);
        for r in &result.cefi {
            println!("evaluate: cefi {} per origin {:?}", r.rule.name(), r.per_origin);
        }
        println!("evaluate: wrote {}", paths.results.display());
        Ok(())
    }

    pub fn theory_check(&self) -> StageResult {
        let data = self.prepared()?;
        let devices = self.devices(&data, CO, "train-co")?;
        let hash = hash_hex(self.hash);
        let mut rows = Vec::new();
        let seed = derive_seed(self.cfg.experiment.seed, 0x7E0);
        for r in verify_fi_equivalence(&devices, &data.test, &self.cfg.rules, self.cfg.theory_shift_scale, seed)? {
            let invariant = r.rule.is_shift_invariant();
            rows.push(TheoryRow {
                config_hash: hash.clone(),
                check: "fi_equivalence",
                subject: r.rule.name().to_string(),
                value: r.fraction(),
                bound: None,
                violations: Some(r.total - r.matches),
                passed: invariant.then_some(r.matches == r.total),
            });
        }
        for d in &devices {
            let z: Matrix = d.embed(&d.features(data.test.as_batch())?)?;
            let e = verify_epsilon_bound(&d.co, &z, &self.cfg.theory, derive_seed(seed, d.device_id as u64))?;
            rows.push(TheoryRow {
                config_hash: hash.clone(),
                check: "epsilon_bound",
                subject: format!("device{}", d.device_id),
                value: e.max_prob_deviation,
                bound: Some(e.bound),
                violations: Some(e.violations + e.margin_flips),
                passed: Some(e.violations == 0 && e.margin_flips == 0),
            });
        }
        let path = self.path(THEORY);
        let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Runtime(cefi::Error::InvalidInput(e.to_string())))?;
        for row in &rows {
            w.serialize(row).map_err(|e| CliError::Runtime(cefi::Error::InvalidInput(e.to_string())))?;
        }
        w.flush().map_err(|e| io_err(&path, e))?;
        for row in &rows {
            println!(
                "theory-check: {} {} value={} passed={}",
                row.check,
                row.subject,
                row.value,
                row.passed.map_or("n/a".to_string(), |p| p.to_string())
            );
        }
        if rows.iter().any(|r| r.passed == Some(false)) {
            return Err(CliError::Runtime(cefi::Error::InvalidInput("a theory check failed; see theory.csv".into())));
        }
        Ok(())
    }

    /// Rebuilds the summary and plot data from `results.csv`, merging in
    /// the results of any `extra` run directories.
    pub fn report(&self, extra: &[PathBuf]) -> StageResult {
        let own = self.path(RESULTS_FILE);
        if !own.exists() {
            return Err(CliError::StageDependency { path: own, reason: "run `evaluate` first".into() });
        }
        let mut rows: Vec<ResultRow> = read_csv(&own)?;
        if let Some(bad) = rows.iter().find(|r| r.config_hash != hash_hex(self.hash)) {
            return Err(CliError::StageDependency {
                path: own,
                reason: format!("written by config {}, this run is {}", bad.config_hash, hash_hex(self.hash)),
            });
        }
        for dir in extra {
            let path = dir.join(RESULTS_FILE);
            if !path.exists() {
                return Err(CliError::StageDependency { path, reason: "not an evaluated run directory".into() });
            }
            rows.extend(read_csv::<ResultRow>(&path)?);
        }
        let paths = emit_report_rows(&rows, self.hash, self.out)?;
        println!("report: {} rows -> {}", rows.len(), paths.summary.display());
        Ok(())
    }

    pub fn run_all(&self) -> StageResult {
        self.synth_data()?;
        self.partition()?;
        self.pretrain_tails()?;
        self.train_ce()?;
        self.train_co()?;
        self.infer()?;
        self.evaluate()?;
        self.theory_check()
    }
}
