//! Run configuration: a sectioned TOML file, `--section.key value` flags and
//! `LIMO_SECTION__KEY` environment overrides, applied in that order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::bench::AffinityMode;
use crate::error::{LimoError, Result};
use crate::oracles::Direction;
use crate::predictor::{InputMode, PredictorConfig};
use crate::refine::FilterPolicy;
use crate::vae::{VaeDims, VaeTrainConfig};

pub const ENV_PREFIX: &str = "LIMO_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Size of the generated corpus.
    pub synthetic_count: usize,
    pub synthetic_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorSection {
    pub dataset_size: usize,
    pub mode: InputMode,
    pub heldout_fraction: f64,
    /// Oracles to train a predictor for.
    pub properties: Vec<String>,
    pub width: usize,
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
    pub seed: u64,
}

impl PredictorSection {
    pub fn train_config(&self) -> PredictorConfig {
        PredictorConfig {
            width: self.width,
            epochs: self.epochs,
            lr: self.lr,
            batch: self.batch,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeSection {
    pub steps: usize,
    pub lr: f32,
    pub restarts: usize,
    pub seed: u64,
    /// Property driven by the `optimize` command.
    pub property: String,
    pub direction: Direction,
    /// Per-property weights for multi-objective runs.
    pub weights: BTreeMap<String, f64>,
    pub mask_weight: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    /// `"mock-affinity"` or `"external"`.
    pub affinity: String,
    /// Name under which external scores are cached and predicted.
    pub name: String,
    pub command: Vec<String>,
    pub direction: Direction,
    pub timeout_secs: f64,
    pub in_flight: usize,
    pub cache: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    /// Directory for all command outputs.
    pub work: PathBuf,
    /// Explicit inputs; empty means the latest output recorded in `work`.
    pub corpus: PathBuf,
    pub vae: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub random_count: usize,
    pub top_k: usize,
    pub target_property: String,
    pub target_lo: f64,
    pub target_hi: f64,
    pub similarity_starts: usize,
    pub similarity_deltas: Vec<f64>,
    pub substructure_starts: usize,
    pub substructure_positions: Vec<usize>,
    pub substructure_property: String,
    pub affinity_mode: AffinityMode,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: VaeDims,
    pub train: VaeTrainConfig,
    pub data: DataSection,
    pub predictor: PredictorSection,
    pub optimize: OptimizeSection,
    pub filter: FilterPolicy,
    pub oracle: OracleSection,
    pub paths: PathsSection,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let pred = PredictorConfig::default();
        RunConfig {
            model: VaeDims::desk(),
            train: VaeTrainConfig {
                epochs: 10,
                lr: 1e-3,
                ..VaeTrainConfig::default()
            },
            data: DataSection {
                synthetic_count: 20_000,
                synthetic_seed: 1,
            },
            predictor: PredictorSection {
                dataset_size: 5_000,
                mode: InputMode::Decoded,
                heldout_fraction: 0.1,
                properties: ["plogp", "logp", "qed", "sa", "mock-affinity"]
                    .map(String::from)
                    .to_vec(),
                width: pred.width,
                epochs: pred.epochs,
                lr: pred.lr,
                batch: pred.batch,
                seed: pred.seed,
            },
            optimize: OptimizeSection {
                steps: 1_000,
                lr: 0.1,
                restarts: 200,
                seed: 0,
                property: "plogp".into(),
                direction: Direction::Maximize,
                weights: BTreeMap::from([
                    ("affinity".into(), 1.0),
                    ("qed".into(), 5.0),
                    ("sa".into(), 0.5),
                ]),
                mask_weight: crate::optimize::DEFAULT_MASK_WEIGHT,
            },
            filter: FilterPolicy::default(),
            oracle: OracleSection {
                affinity: "mock-affinity".into(),
                name: "affinity".into(),
                command: Vec::new(),
                direction: Direction::Minimize,
                timeout_secs: 30.0,
                in_flight: 8,
                cache: true,
            },
            paths: PathsSection {
                work: PathBuf::from("limo-work"),
                corpus: PathBuf::new(),
                vae: PathBuf::new(),
            },
            bench: BenchSection {
                random_count: 10_000,
                top_k: 3,
                target_property: "logp".into(),
                target_lo: -2.5,
                target_hi: -2.0,
                similarity_starts: 50,
                similarity_deltas: vec![0.0, 0.2, 0.4, 0.6],
                substructure_starts: 100,
                substructure_positions: (0..8).collect(),
                substructure_property: "logp".into(),
                affinity_mode: AffinityMode::Multi,
                temperature: crate::oracles::thermo::DEFAULT_TEMPERATURE,
            },
        }
    }
}

fn config_error(msg: impl Into<String>) -> LimoError {
    LimoError::InvalidInput(msg.into())
}

/// Reads a flag or environment value as a TOML literal, falling back to a
/// bare string.
fn parse_literal(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key v"),
        Err(_) => Value::String(raw.to_string()),
    }
}

impl RunConfig {
    /// Parses file text over the defaults, with overrides `(section.key, raw
    /// value)` applied on top.
    pub fn from_toml_with(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let file: Table = text
            .parse()
            .map_err(|e| config_error(format!("config: {e}")))?;
        let reference = Table::try_from(RunConfig::default()).expect("default config serializes");
        let mut table = reference.clone();
        for (section, body) in &file {
            let Some(known) = reference.get(section) else {
                return Err(config_error(format!("unknown config key: {section}")));
            };
            let (Some(body), Some(known)) = (body.as_table(), known.as_table()) else {
                return Err(config_error(format!(
                    "config key {section} must be a section"
                )));
            };
            if let Some(key) = body.keys().find(|k| !known.contains_key(*k)) {
                return Err(config_error(format!("unknown config key: {section}.{key}")));
            }
            let slot = table[section].as_table_mut().expect("section table");
            for (key, value) in body {
                slot.insert(key.clone(), value.clone());
            }
        }
        for (path, raw) in overrides {
            let Some((section, key)) = path.split_once('.') else {
                return Err(config_error(format!("unknown config key: {path}")));
            };
            if !reference
                .get(section)
                .and_then(Value::as_table)
                .is_some_and(|t| t.contains_key(key))
            {
                return Err(config_error(format!("unknown config key: {path}")));
            }
            let slot = table[section].as_table_mut().expect("section table");
            let value = match (parse_literal(raw), reference[section].get(key)) {
                (Value::Integer(i), Some(Value::Float(_))) => Value::Float(i as f64),
                (v, _) => v,
            };
            slot.insert(key.to_string(), value);
        }
        let config: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_error(format!("config: {}", e.message())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    /// Loads `path` (or defaults when `None`), then flags, then environment.
    pub fn load(path: Option<&Path>, flags: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| config_error(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        // Later entries win: environment first, then flags.
        let mut overrides = env_overrides(std::env::vars());
        overrides.extend_from_slice(flags);
        Self::from_toml_with(&text, &overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let positive = [
            ("train.epochs", self.train.epochs),
            ("train.batch", self.train.batch),
            ("predictor.dataset_size", self.predictor.dataset_size),
            ("predictor.batch", self.predictor.batch),
            ("optimize.restarts", self.optimize.restarts),
            ("oracle.in_flight", self.oracle.in_flight),
            ("bench.top_k", self.bench.top_k),
        ];
        if let Some((key, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(config_error(format!("config key {key} must be positive")));
        }
        if !(0.0..1.0).contains(&self.predictor.heldout_fraction) {
            return Err(config_error(
                "config key predictor.heldout_fraction must lie in [0, 1)",
            ));
        }
        if !(self.oracle.timeout_secs > 0.0) {
            return Err(config_error(
                "config key oracle.timeout_secs must be positive",
            ));
        }
        if !matches!(self.oracle.affinity.as_str(), "mock-affinity" | "external") {
            return Err(config_error(format!(
                "config key oracle.affinity must be mock-affinity or external, got {}",
                self.oracle.affinity
            )));
        }
        if self.oracle.affinity == "external" && self.oracle.command.is_empty() {
            return Err(config_error("config key oracle.command is empty"));
        }
        if self.bench.target_lo >= self.bench.target_hi {
            return Err(config_error(
                "config keys bench.target_lo/target_hi give an empty range",
            ));
        }
        if let Some(&p) = self
            .bench
            .substructure_positions
            .iter()
            .find(|&&p| p >= self.model.n)
        {
            return Err(config_error(format!(
                "config key bench.substructure_positions: {p} ≥ n"
            )));
        }
        Ok(())
    }
}

/// `LIMO_SECTION__KEY=value` pairs, as `(section.key, value)`.
pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            let (section, key) = rest.split_once("__")?;
            Some((
                format!("{}.{}", section.to_lowercase(), key.to_lowercase()),
                v,
            ))
        })
        .collect();
    out.sort();
    out
}

/// Splits `--section.key value` (or `--section.key=value`) pairs out of `args`.
pub fn split_config_flags(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut flags = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg
            .strip_prefix("--")
            .filter(|b| b.split('=').next().is_some_and(|k| k.contains('.')))
        else {
            rest.push(arg);
            continue;
        };
        match body.split_once('=') {
            Some((k, v)) => flags.push((k.to_string(), v.to_string())),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| config_error(format!("flag --{body} needs a value")))?;
                flags.push((body.to_string(), v));
            }
        }
    }
    Ok((rest, flags))
}
