use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tbn::backbone::BackboneConfig;
use tbn::data::Naming;
use tbn::eval::{FeatureMode, Normalization, Protocol, RerankParams};
use tbn::head::PartitionTreeConfig;
use tbn::losses::LossConfig;
use tbn::model::ModelConfig;
use tbn::trainer::TrainConfig;
use toml::{Table, Value};

use crate::CliError;

/// The whole run description. Every field defaults to the full-size
/// ResNet-50 setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub backbone: BackboneConfig,
    pub head: PartitionTreeConfig,
    pub loss: LossConfig,
    pub trainer: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/tbn"),
            backbone: BackboneConfig::default(),
            head: PartitionTreeConfig::default(),
            loss: LossConfig::default(),
            trainer: TrainConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory holding `bounding_box_train/`, `query/` and `bounding_box_test/`.
    pub root: PathBuf,
    pub naming: Naming,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data/market1501"),
            naming: Naming::MarketStyle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub feature_modes: Vec<FeatureMode>,
    pub protocol: Protocol,
    pub normalization: Normalization,
    pub rerank: bool,
    pub rerank_params: RerankParams,
    /// Gallery entries per query in the ranking dump.
    pub top_n: usize,
    pub batch_size: usize,
    /// Evaluate the trained model(s) at the end of `train`.
    pub after_training: bool,
    pub save_embeddings: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            feature_modes: vec![FeatureMode::Joint],
            protocol: Protocol::SingleQuery,
            normalization: Normalization::BlockwiseL2,
            rerank: false,
            rerank_params: RerankParams::default(),
            top_n: 10,
            batch_size: 64,
            after_training: false,
            save_embeddings: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.feature_modes.is_empty() {
            return Err(CliError::Validation("eval.feature_modes must not be empty".into()));
        }
        if self.top_n == 0 || self.batch_size == 0 {
            return Err(CliError::Validation("eval.top_n and eval.batch_size must be >= 1".into()));
        }
        let p = &self.rerank_params;
        if p.k2 < 1 || p.k2 >= p.k1 || !(0.0..=1.0).contains(&p.lambda) {
            return Err(CliError::Validation(format!(
                "eval.rerank_params needs k1 > k2 >= 1 and lambda in [0, 1], got k1={} k2={} lambda={}",
                p.k1, p.k2, p.lambda
            )));
        }
        Ok(())
    }
}

impl RunConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            head: self.head.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model().validate()?;
        self.loss.validate()?;
        self.trainer.validate()?;
        if self.loss.num_identities != self.head.num_identities {
            return Err(CliError::Validation(format!(
                "loss.num_identities = {} but head.num_identities = {}",
                self.loss.num_identities, self.head.num_identities
            )));
        }
        if self.loss.num_leaves != self.head.num_leaves() {
            return Err(CliError::Validation(format!(
                "loss.num_leaves = {} but the head has {} leaves",
                self.loss.num_leaves,
                self.head.num_leaves()
            )));
        }
        self.eval.validate()
    }

    /// Defaults, then the file (if any), then each `key.path=value` override.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => read_table(p)?,
            None => Table::new(),
        };
        apply_overrides(&mut table, overrides)?;
        Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Validation(format!("config: {}", e.message())))
    }

    /// The resolved document, with mode-dependent trainer defaults spelled out.
    pub fn to_resolved_toml(&self) -> Result<String, CliError> {
        let resolved = RunConfig {
            trainer: self.trainer.resolved(),
            ..self.clone()
        };
        toml::to_string(&resolved).map_err(|e| CliError::Runtime(format!("cannot serialize config: {e}")))
    }
}

pub fn read_table(path: &Path) -> Result<Table, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
    text.parse::<Table>()
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

/// Applies `a.b.c=value` assignments. Values are parsed as TOML and fall
/// back to plain strings.
pub fn apply_overrides(table: &mut Table, overrides: &[String]) -> Result<(), CliError> {
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("override `{item}` is not key=value")))?;
        let path: Vec<&str> = key.trim().split('.').collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(CliError::Validation(format!("override `{item}` has an empty key segment")));
        }
        let value = parse_value(raw.trim());
        let (last, parents) = path.split_last().expect("split yields at least one segment");
        let mut cursor = &mut *table;
        for seg in parents {
            let entry = cursor
                .entry(seg.to_string())
                .or_insert_with(|| Value::Table(Table::new()));
            cursor = entry
                .as_table_mut()
                .ok_or_else(|| CliError::Validation(format!("override `{item}`: `{seg}` is not a section")))?;
        }
        cursor.insert(last.to_string(), value);
    }
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}
