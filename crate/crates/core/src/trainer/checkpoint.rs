use std::collections::BTreeMap;
use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TbnModel};
use crate::params::{load_archive, save_archive};

const PARAM_PREFIX: &str = "param.";
const MOMENTUM_PREFIX: &str = "momentum.";
const FORMAT_VERSION: u32 = 1;

/// Mean loss terms over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub total: f64,
    pub local_ce: f64,
    pub global_ce: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kl: Option<f64>,
}

impl EpochSummary {
    /// Local plus global cross-entropy.
    pub fn supervised(&self) -> f64 {
        self.local_ce + self.global_ce
    }
}

/// Model parameters and optimizer state after `epoch` completed epochs.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    /// All variables, batch-norm running statistics included.
    pub params: BTreeMap<String, Tensor>,
    /// Momentum buffers by parameter name.
    pub momentum: BTreeMap<String, Tensor>,
    pub epoch: usize,
    pub config_hash: String,
    pub loss_history: Vec<EpochSummary>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    format: u32,
    epoch: usize,
    config_hash: String,
    model_config: ModelConfig,
    loss_history: Vec<EpochSummary>,
}

impl Checkpoint {
    /// Captures the current state of `model` with the given optimizer state.
    pub fn capture(
        model: &TbnModel,
        momentum: &BTreeMap<String, Tensor>,
        epoch: usize,
        loss_history: Vec<EpochSummary>,
    ) -> Result<Self> {
        Ok(Self {
            model_config: model.config().clone(),
            params: model.store().snapshot()?,
            momentum: momentum
                .iter()
                .map(|(k, v)| Ok((k.clone(), v.copy()?)))
                .collect::<Result<_>>()?,
            epoch,
            config_hash: model.config().architecture_hash(),
            loss_history,
        })
    }

    /// Rebuilds a model with this checkpoint's architecture and parameters.
    pub fn build_model(&self, dtype: candle_core::DType, device: &candle_core::Device) -> Result<TbnModel> {
        let mut config = self.model_config.clone();
        config.backbone.pretrained_weights_path = None;
        let model = TbnModel::new(&config, 0, dtype, device)?;
        self.restore_into(&model)?;
        Ok(model)
    }

    /// Copies the parameters into `model` after checking architectures match.
    pub fn restore_into(&self, model: &TbnModel) -> Result<()> {
        let expected = model.config().architecture_hash();
        if expected != self.config_hash {
            return Err(Error::Checkpoint(format!(
                "checkpoint architecture {} does not match model architecture {}",
                short(&self.config_hash),
                short(&expected)
            )));
        }
        let vars = model.store().vars();
        if let Some(name) = vars.keys().find(|k| !self.params.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("missing parameter `{name}`")));
        }
        if let Some(name) = self.params.keys().find(|k| !vars.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unexpected parameter `{name}`")));
        }
        for (name, value) in &self.params {
            if vars[name].dims() != value.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, model expects {:?}",
                    value.dims(),
                    vars[name].dims()
                )));
            }
        }
        model.store().assign_all(&self.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = BTreeMap::new();
        for (name, t) in &self.params {
            tensors.insert(format!("{PARAM_PREFIX}{name}"), t.clone());
        }
        for (name, t) in &self.momentum {
            tensors.insert(format!("{MOMENTUM_PREFIX}{name}"), t.clone());
        }
        let meta = Metadata {
            format: FORMAT_VERSION,
            epoch: self.epoch,
            config_hash: self.config_hash.clone(),
            model_config: self.model_config.clone(),
            loss_history: self.loss_history.clone(),
        };
        save_archive(path, &tensors, Some(&serde_json::to_string(&meta)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let archive = load_archive(path)?;
        let text = archive
            .metadata
            .ok_or_else(|| Error::Checkpoint(format!("{} has no checkpoint metadata", path.display())))?;
        let meta: Metadata = serde_json::from_str(&text)?;
        if meta.format != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint format {}", meta.format)));
        }
        if meta.model_config.architecture_hash() != meta.config_hash {
            return Err(Error::Checkpoint(format!(
                "{}: stored config hash does not match its model config",
                path.display()
            )));
        }
        let mut params = BTreeMap::new();
        let mut momentum = BTreeMap::new();
        for (name, t) in archive.tensors {
            if let Some(rest) = name.strip_prefix(PARAM_PREFIX) {
                params.insert(rest.to_string(), t);
            } else if let Some(rest) = name.strip_prefix(MOMENTUM_PREFIX) {
                momentum.insert(rest.to_string(), t);
            } else {
                return Err(Error::Checkpoint(format!("unexpected tensor `{name}`")));
            }
        }
        Ok(Self {
            model_config: meta.model_config,
            params,
            momentum,
            epoch: meta.epoch,
            config_hash: meta.config_hash,
            loss_history: meta.loss_history,
        })
    }
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    checkpoint.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
