//! Run configuration: one TOML file with dotted `--set` overrides.

use std::path::{Path, PathBuf};

use d3t_core::augment::AugmentPolicy;
use d3t_core::backbone::NetworkConfig;
use d3t_core::inversion::{InitStrategy, InversionSchedule, PerceptualExtractor, PrecomputeOptions};
use d3t_core::losses::LossWeights;
use d3t_core::trainer::TransferConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub augment: AugmentPolicy,
    pub r1_gamma: f64,
    pub r1_every: usize,
    pub seed: u64,
    pub snapshot_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        let t = TransferConfig::default();
        Self {
            total_steps: 2000,
            batch_size: t.batch_size,
            lr_g: t.lr_g,
            lr_d: t.lr_d,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            augment: t.augment,
            r1_gamma: t.r1_gamma,
            r1_every: t.r1_every,
            seed: t.seed,
            snapshot_every: 500,
        }
    }
}

impl PretrainConfig {
    pub fn as_transfer(&self) -> TransferConfig {
        TransferConfig {
            weights: LossWeights::zero(),
            batch_size: self.batch_size,
            lr_g: self.lr_g,
            lr_d: self.lr_d,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            total_steps: self.total_steps,
            augment: self.augment.clone(),
            r1_gamma: self.r1_gamma,
            r1_every: self.r1_every,
            seed: self.seed,
            snapshot_every: self.snapshot_every,
            ..TransferConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionConfig {
    pub iterations: usize,
    pub lr_init: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub lambda1: f64,
    pub init: InitStrategy,
    pub seed: u64,
    /// Images optimized together.
    pub chunk: usize,
}

impl Default for InversionConfig {
    fn default() -> Self {
        let s = InversionSchedule::default();
        Self {
            iterations: s.iterations,
            lr_init: s.lr_init,
            lr_decay_factor: s.lr_decay_factor,
            lr_decay_every: s.lr_decay_every,
            lambda1: s.lambda1,
            init: InitStrategy::MappedNoise,
            seed: 0,
            chunk: 16,
        }
    }
}

impl InversionConfig {
    pub fn schedule(&self) -> InversionSchedule {
        InversionSchedule {
            iterations: self.iterations,
            lr_init: self.lr_init,
            lr_decay_factor: self.lr_decay_factor,
            lr_decay_every: self.lr_decay_every,
            lambda1: self.lambda1,
        }
    }

    pub fn options(&self, cache_root: Option<PathBuf>) -> PrecomputeOptions {
        PrecomputeOptions {
            init: self.init,
            seed: self.seed,
            chunk: self.chunk,
            cache_root,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub n_fake: usize,
    pub fid_seed: u64,
    /// Score every emitted transfer snapshot.
    pub eval_snapshots: bool,
    pub extractor_widths: Vec<usize>,
    pub extractor_seed: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            n_fake: 500,
            fid_seed: 12_345,
            eval_snapshots: true,
            extractor_widths: PerceptualExtractor::DEFAULT_WIDTHS.to_vec(),
            extractor_seed: PerceptualExtractor::DEFAULT_SEED,
        }
    }
}

impl MetricsConfig {
    pub fn extractor(&self) -> Result<PerceptualExtractor, CliError> {
        Ok(PerceptualExtractor::frozen_random(&self.extractor_widths, self.extractor_seed)?)
    }
}

/// Paths have no defaults; an empty string means "not given".
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: String,
    pub target: String,
    pub source_checkpoint: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub pretrain: PretrainConfig,
    pub transfer: TransferConfig,
    pub inversion: InversionConfig,
    pub metrics: MetricsConfig,
    pub data: DataConfig,
}

impl RunConfig {
    /// Parse a TOML document, apply `key=value` overrides, and validate.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::config(format!("config is not valid TOML: {e}"), Vec::new()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let unknown = unknown_keys(&table);
        if !unknown.is_empty() {
            return Err(CliError::config(format!("unknown config keys: {}", unknown.join(", ")), unknown));
        }
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config(format!("bad config value: {e}"), Vec::new()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| CliError::config(format!("cannot read config {}: {e}", p.display()), Vec::new()))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    /// Every section validated; failures name their keys.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut bad = Vec::new();
        let mut msgs = Vec::new();
        let mut check = |key: &str, r: d3t_core::Result<()>| {
            if let Err(e) = r {
                bad.push(key.to_string());
                msgs.push(e.to_string());
            }
        };
        check("network", self.network.validate());
        check("pretrain", self.pretrain.as_transfer().validate());
        check("transfer", self.transfer.validate());
        check("inversion", self.inversion.schedule().validate());
        if self.inversion.chunk == 0 {
            bad.push("inversion.chunk".into());
            msgs.push("inversion.chunk must be >= 1".into());
        }
        if self.metrics.n_fake < 2 {
            bad.push("metrics.n_fake".into());
            msgs.push("metrics.n_fake must be >= 2".into());
        }
        if let Err(e) = self.metrics.extractor() {
            bad.push("metrics.extractor_widths".into());
            msgs.push(e.to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(CliError::config(msgs.join("; "), bad))
        }
    }

    /// Fully resolved config as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// A data path, or a config error naming the key.
    pub fn require_path(&self, key: &str) -> Result<PathBuf, CliError> {
        let v = match key {
            "data.source" => &self.data.source,
            "data.target" => &self.data.target,
            "data.source_checkpoint" => &self.data.source_checkpoint,
            _ => unreachable!("unknown data key {key}"),
        };
        if v.is_empty() {
            return Err(CliError::config(format!("{key} is required"), vec![key.to_string()]));
        }
        let p = PathBuf::from(v);
        if !p.exists() {
            return Err(CliError::config(format!("{key}: {} does not exist", p.display()), vec![key.to_string()]));
        }
        Ok(p)
    }
}

fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Set `a.b.c=value` in the document, creating tables on the way.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override `{spec}` is not key=value"), vec![spec.to_string()]))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(format!("override key `{key}` is malformed"), vec![key.to_string()]));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(CliError::config(format!("`{key}`: {p} is not a section"), vec![key.to_string()])),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Dotted paths of every key absent from the schema.
pub fn unknown_keys(doc: &Table) -> Vec<String> {
    let schema = match Value::try_from(RunConfig::default()).expect("default config serializes") {
        Value::Table(t) => t,
        _ => unreachable!("config is a table"),
    };
    let mut out = Vec::new();
    walk(doc, &schema, "", &mut out);
    out
}

fn walk(doc: &Table, schema: &Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in doc {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (schema.get(k), v) {
            (None, _) => out.push(path),
            (Some(Value::Table(s)), Value::Table(d)) => walk(d, s, &path, out),
            _ => {}
        }
    }
}
