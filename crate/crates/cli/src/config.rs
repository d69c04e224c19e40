//! Flat dotted-key JSON configuration.
//!
//! Every leaf of the experiment configuration is addressable by its dotted
//! path (`federation.ce_max_epochs`, `task.synthetic.separation`, ...).
//! Keys outside the experiment itself: `rules` and `theory.*`.

use std::collections::BTreeMap;
use std::path::Path;

use cefi::ensemble::EnsembleRule;
use cefi::evalkit::{ExperimentConfig, TheoryCheckConfig};
use serde_json::{Map, Value};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub rules: Vec<EnsembleRule>,
    pub theory: TheoryCheckConfig,
    /// Shift range of the ideal CO layers in the equivalence check.
    pub theory_shift_scale: f32,
}

impl RunConfig {
    /// Identifies the artifacts of a run. Covers the experiment (seed
    /// included) but not the evaluation rules or theory-check settings,
    /// which only affect leaf outputs.
    pub fn hash(&self) -> u64 {
        self.experiment.hash()
    }
}

fn flatten(prefix: &str, value: &Value, out: &mut BTreeMap<String, Value>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, value) in flat {
        let mut node = &mut root;
        let mut parts = key.split('.').peekable();
        while let Some(part) = parts.next() {
            if parts.peek().is_none() {
                node.insert(part.to_string(), value.clone());
            } else {
                node = node
                    .entry(part.to_string())
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("prefix of a leaf is an object");
            }
        }
    }
    Value::Object(root)
}

fn same_kind(default: &Value, given: &Value) -> bool {
    match (default, given) {
        (Value::Number(d), Value::Number(g)) => {
            if d.is_f64() {
                true
            } else if d.is_u64() {
                g.is_u64()
            } else {
                g.is_i64()
            }
        }
        (Value::String(_), Value::String(_))
        | (Value::Bool(_), Value::Bool(_))
        | (Value::Array(_), Value::Array(_)) => true,
        _ => false,
    }
}

fn kind_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(n) if n.is_u64() => "a non-negative integer",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "a list",
        Value::Object(_) => "an object",
    }
}

/// Parses a config document. Every problem found is reported in one error.
pub fn parse(text: &str, seed_override: Option<u64>, rule_override: &[String]) -> Result<RunConfig, CliError> {
    let doc: Value = serde_json::from_str(text).map_err(|e| CliError::Config(vec![format!("not valid JSON: {e}")]))?;
    let Value::Object(given) = doc else {
        return Err(CliError::Config(vec!["config must be a JSON object of dotted keys".into()]));
    };

    let mut defaults = BTreeMap::new();
    flatten("", &serde_json::to_value(ExperimentConfig::default()).expect("config serialises"), &mut defaults);
    let theory_defaults = TheoryCheckConfig::default();

    let mut problems = Vec::new();
    let mut experiment = defaults.clone();
    let mut theory = theory_defaults;
    let mut shift_scale = 1.0f32;
    let mut rules: Option<Vec<String>> = None;

    for (key, value) in &given {
        if key == "rules" {
            match value.as_array().map(|a| a.iter().map(|v| v.as_str().map(str::to_string)).collect::<Option<Vec<_>>>()) {
                Some(Some(list)) => rules = Some(list),
                _ => problems.push("rules: expected a list of rule names".to_string()),
            }
            continue;
        }
        if let Some(field) = key.strip_prefix("theory.") {
            let number = value.as_f64();
            match (field, number) {
                ("epsilon", Some(v)) => theory.epsilon = v,
                ("lambda", Some(v)) => theory.lambda = v,
                ("shift_scale", Some(v)) => shift_scale = v as f32,
                ("num_perturbations", _) if value.is_u64() => {
                    theory.num_perturbations = value.as_u64().expect("checked") as usize
                }
                ("epsilon" | "lambda" | "shift_scale" | "num_perturbations", _) => {
                    problems.push(format!("{key}: expected a number, got {}", kind_name(value)))
                }
                _ => problems.push(format!("{key}: unknown key")),
            }
            continue;
        }
        let Some(default) = defaults.get(key) else {
            problems.push(format!("{key}: unknown key"));
            continue;
        };
        if !same_kind(default, value) {
            problems.push(format!("{key}: expected {}, got {}", kind_name(default), kind_name(value)));
            continue;
        }
        // checked on its own so that one bad value does not hide another
        let mut single = defaults.clone();
        single.insert(key.clone(), value.clone());
        if let Err(e) = serde_json::from_value::<ExperimentConfig>(unflatten(&single)) {
            problems.push(format!("{key}: {e}"));
            continue;
        }
        experiment.insert(key.clone(), value.clone());
    }

    if let Some(seed) = seed_override {
        experiment.insert("seed".into(), Value::from(seed));
    }
    // only well-typed overrides made it into `experiment`, so this parses
    let cfg: ExperimentConfig = serde_json::from_value(unflatten(&experiment))
        .map_err(|e| CliError::Config(vec![e.to_string()]))?;
    let experiment = cfg.with_seed(cfg.seed);
    match experiment.validate() {
        Ok(()) => {}
        Err(cefi::Error::InvalidConfig(m)) => problems.extend(m.split("; ").map(str::to_string)),
        Err(other) => problems.push(other.to_string()),
    }
    if let Err(e) = theory.validate() {
        problems.push(format!("theory: {e}"));
    }

    let names: Vec<String> = if rule_override.is_empty() {
        rules.unwrap_or_else(|| EnsembleRule::PRACTICAL.iter().map(|r| r.name().to_string()).collect())
    } else {
        rule_override.to_vec()
    };
    let seed = experiment.seed;
    let mut parsed = Vec::new();
    for name in &names {
        match name.parse::<EnsembleRule>() {
            Ok(EnsembleRule::Random(_)) => parsed.push(EnsembleRule::Random(seed)),
            Ok(rule) if !parsed.contains(&rule) => parsed.push(rule),
            Ok(_) => {}
            Err(_) => problems.push(format!("rule: unknown ensemble rule '{name}'")),
        }
    }

    if !problems.is_empty() {
        return Err(CliError::Config(problems));
    }
    Ok(RunConfig {
        experiment,
        rules: parsed,
        theory,
        theory_shift_scale: shift_scale,
    })
}

pub fn load(path: Option<&Path>, seed_override: Option<u64>, rule_override: &[String]) -> Result<RunConfig, CliError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| CliError::Config(vec![format!("cannot read config {}: {e}", p.display())]))?,
        None => "{}".to_string(),
    };
    parse(&text, seed_override, rule_override)
}

/// Every settable key with its default, one `key = value` per line.
pub fn describe_defaults() -> String {
    let mut flat = BTreeMap::new();
    flatten("", &serde_json::to_value(ExperimentConfig::default()).expect("config serialises"), &mut flat);
    let t = TheoryCheckConfig::default();
    flat.insert("theory.epsilon".into(), Value::from(t.epsilon));
    flat.insert("theory.lambda".into(), Value::from(t.lambda));
    flat.insert("theory.num_perturbations".into(), Value::from(t.num_perturbations));
    flat.insert("theory.shift_scale".into(), Value::from(1.0));
    let rules: Vec<Value> = EnsembleRule::PRACTICAL.iter().map(|r| Value::from(r.name())).collect();
    flat.insert("rules".into(), Value::Array(rules));
    flat.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}
