//! Backbone plus tree-branch head sharing one parameter store.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{build_backbone, Backbone, BackboneConfig, BACKBONE_PREFIX};
use crate::error::Result;
use crate::head::{BranchOutputs, PartitionTreeConfig, TbnHead};
use crate::params::ParamStore;

/// Architecture description: everything needed to rebuild a model's
/// parameter layout.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: PartitionTreeConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.head.validate(self.backbone.output_shape())
    }

    /// Hex digest identifying the parameter layout. Pretrained-weight paths
    /// and pixel statistics do not change the layout and are left out.
    pub fn architecture_hash(&self) -> String {
        let b = &self.backbone;
        let layout = serde_json::json!({
            "variant": b.variant,
            "input": [b.input_height, b.input_width],
            "channels": b.output_channels,
            "last_stage_stride": b.last_stage_stride,
            "head": self.head,
        });
        let digest = Sha256::digest(layout.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TbnModel {
    config: ModelConfig,
    store: ParamStore,
    backbone: Backbone,
    head: TbnHead,
    dtype: DType,
    device: Device,
}

impl TbnModel {
    /// Builds a model whose initial parameters are a function of `seed`.
    pub fn new(config: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(seed);
        let vb = store.var_builder(dtype, device);
        let backbone = build_backbone(&config.backbone, &store, vb.clone())?;
        let head = TbnHead::new(&config.head, config.backbone.output_shape(), vb)?;
        Ok(Self {
            config: config.clone(),
            store,
            backbone,
            head,
            dtype,
            device: device.clone(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn head(&self) -> &TbnHead {
        &self.head
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Pixels in [0, 1] → branch outputs.
    pub fn forward(&self, pixels: &Tensor, train: bool) -> Result<BranchOutputs> {
        let t0 = self.backbone.forward(pixels, train)?;
        self.head.forward(&t0, train)
    }

    /// True when `name` belongs to the backbone (the pretrained group).
    pub fn is_backbone_param(name: &str) -> bool {
        name.strip_prefix(BACKBONE_PREFIX)
            .is_some_and(|rest| rest.starts_with('.'))
    }
}
