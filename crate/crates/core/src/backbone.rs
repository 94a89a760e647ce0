//! Base feature extractor producing the T0 tensor.
//!
//! Two variants sit behind [`Backbone`]: a 50-layer residual network cut
//! before global pooling with its last stage run at stride 1 (input /16), and
//! a small four-stage strided convolution stack with the same /16 reduction
//! for CPU-scale runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{Module, ModuleT, Tensor};
use candle_nn::{batch_norm, BatchNorm, Conv2d, Conv2dConfig, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{conv_no_bias, BottleneckBlock, BN_EPS};
use crate::params::{load_archive, ParamStore};

/// ImageNet channel statistics for inputs scaled to [0, 1].
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

const RESNET50_CHANNELS: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneVariant {
    PaperFaithful,
    DeskTiny,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    pub input_height: usize,
    pub input_width: usize,
    pub output_channels: usize,
    pub last_stage_stride: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrained_weights_path: Option<PathBuf>,
    /// Per-channel mean subtracted from [0, 1] pixels.
    pub pixel_mean: [f64; 3],
    /// Per-channel standard deviation dividing the centred pixels.
    pub pixel_std: [f64; 3],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            variant: BackboneVariant::PaperFaithful,
            input_height: 384,
            input_width: 128,
            output_channels: RESNET50_CHANNELS,
            last_stage_stride: 1,
            pretrained_weights_path: None,
            pixel_mean: IMAGENET_MEAN,
            pixel_std: IMAGENET_STD,
        }
    }
}

impl BackboneConfig {
    pub fn desk_tiny(input_height: usize, input_width: usize, output_channels: usize) -> Self {
        Self {
            variant: BackboneVariant::DeskTiny,
            input_height,
            input_width,
            output_channels,
            ..Self::default()
        }
    }

    /// Total spatial reduction from input to T0.
    pub fn downsample_factor(&self) -> usize {
        16 * self.last_stage_stride
    }

    /// `(channels, height, width)` of T0.
    pub fn output_shape(&self) -> (usize, usize, usize) {
        let f = self.downsample_factor();
        (
            self.output_channels,
            self.input_height / f,
            self.input_width / f,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.downsample_factor();
        match self.variant {
            BackboneVariant::PaperFaithful => {
                if self.output_channels != RESNET50_CHANNELS {
                    return Err(Error::Config(format!(
                        "paper_faithful backbone has {RESNET50_CHANNELS} output channels, got {}",
                        self.output_channels
                    )));
                }
                if !matches!(self.last_stage_stride, 1 | 2) {
                    return Err(Error::Config(format!(
                        "last_stage_stride must be 1 or 2, got {}",
                        self.last_stage_stride
                    )));
                }
            }
            BackboneVariant::DeskTiny => {
                if self.output_channels < 8 {
                    return Err(Error::Config(format!(
                        "desk_tiny output_channels must be >= 8, got {}",
                        self.output_channels
                    )));
                }
                if self.last_stage_stride != 1 {
                    return Err(Error::Config(
                        "desk_tiny supports only last_stage_stride = 1".into(),
                    ));
                }
            }
        }
        if self.input_height == 0 || self.input_width == 0 {
            return Err(Error::Config("input size must be positive".into()));
        }
        if !self.input_height.is_multiple_of(f) || !self.input_width.is_multiple_of(f) {
            return Err(Error::Config(format!(
                "input size {}x{} is not divisible by {f}",
                self.input_height, self.input_width
            )));
        }
        if self.pixel_std.iter().any(|s| *s <= 0.0) {
            return Err(Error::Config("pixel_std entries must be positive".into()));
        }
        if let Some(p) = &self.pretrained_weights_path {
            if !p.is_file() {
                return Err(Error::Config(format!(
                    "pretrained weights file {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(())
    }
}

/// A batch of images with their training identities.
///
/// `pixels` is `(batch, 3, height, width)` with values in [0, 1]; channel
/// normalization happens inside the backbone.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub pixels: Tensor,
    pub labels: Vec<u32>,
}

impl ImageBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self, config: &BackboneConfig, num_identities: usize) -> Result<()> {
        let dims = self.pixels.dims();
        if dims.len() != 4 || dims[1] != 3 || dims[2] != config.input_height || dims[3] != config.input_width {
            return Err(Error::Shape(format!(
                "image batch has shape {dims:?}, expected (batch, 3, {}, {})",
                config.input_height, config.input_width
            )));
        }
        if dims[0] != self.labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                dims[0],
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize >= num_identities) {
            return Err(Error::Label {
                label: bad as usize,
                num_identities,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ResNet50 {
    conv1: Conv2d,
    bn1: BatchNorm,
    layers: Vec<Vec<BottleneckBlock>>,
}

impl ResNet50 {
    fn new(last_stage_stride: usize, vb: VarBuilder) -> Result<Self> {
        let conv1 = conv_no_bias(3, 64, 7, 2, 3, vb.pp("conv1"))?;
        let bn1 = batch_norm(64, BN_EPS, vb.pp("bn1"))?;
        let stages = [
            (64, 3, 1),
            (128, 4, 2),
            (256, 6, 2),
            (512, 3, last_stage_stride),
        ];
        let mut layers = Vec::with_capacity(stages.len());
        let mut c_in = 64;
        for (i, &(width, blocks, stride)) in stages.iter().enumerate() {
            let vb_layer = vb.pp(format!("layer{}", i + 1));
            let mut layer = Vec::with_capacity(blocks);
            for b in 0..blocks {
                let s = if b == 0 { stride } else { 1 };
                layer.push(BottleneckBlock::new(c_in, width, width * 4, s, vb_layer.pp(b))?);
                c_in = width * 4;
            }
            layers.push(layer);
        }
        Ok(Self { conv1, bn1, layers })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let x = self.conv1.forward(x)?;
        let x = self.bn1.forward_t(&x, train)?.relu()?;
        // 3x3/2 max pool with padding 1; inputs are post-ReLU, so zero padding
        // never wins the max over a real value.
        let mut x = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?.max_pool2d_with_stride(3, 2)?;
        for layer in &self.layers {
            for block in layer {
                x = block.forward(&x, train)?;
            }
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
struct DeskTiny {
    stages: Vec<Conv2d>,
}

impl DeskTiny {
    fn new(output_channels: usize, vb: VarBuilder) -> Result<Self> {
        let widths = [
            output_channels / 4,
            output_channels / 2,
            output_channels,
            output_channels,
        ];
        let cfg = Conv2dConfig {
            stride: 2,
            padding: 1,
            ..Default::default()
        };
        let mut c_in = 3;
        let mut stages = Vec::with_capacity(widths.len());
        for (i, &w) in widths.iter().enumerate() {
            stages.push(candle_nn::conv2d(c_in, w, 3, cfg, vb.pp(format!("stage{i}")))?);
            c_in = w;
        }
        Ok(Self { stages })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for conv in &self.stages {
            x = conv.forward(&x)?.relu()?;
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
enum Net {
    ResNet50(ResNet50),
    DeskTiny(DeskTiny),
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    net: Net,
    mean: Tensor,
    std: Tensor,
}

/// Variable-name prefix of backbone parameters inside a model store.
pub const BACKBONE_PREFIX: &str = "backbone";

/// Builds the backbone under the `backbone.` prefix of `store`, loading
/// pretrained weights when the config names a file.
pub fn build_backbone(config: &BackboneConfig, store: &ParamStore, vb: VarBuilder) -> Result<Backbone> {
    config.validate()?;
    let vb = vb.pp(BACKBONE_PREFIX);
    let net = match config.variant {
        BackboneVariant::PaperFaithful => Net::ResNet50(ResNet50::new(config.last_stage_stride, vb.clone())?),
        BackboneVariant::DeskTiny => Net::DeskTiny(DeskTiny::new(config.output_channels, vb.clone())?),
    };
    let dtype = vb.dtype();
    let device = vb.device();
    let mean = Tensor::new(&config.pixel_mean, device)?.to_dtype(dtype)?.reshape((1, 3, 1, 1))?;
    let std = Tensor::new(&config.pixel_std, device)?.to_dtype(dtype)?.reshape((1, 3, 1, 1))?;
    if let Some(path) = &config.pretrained_weights_path {
        load_pretrained(store, path)?;
    }
    Ok(Backbone {
        config: config.clone(),
        net,
        mean,
        std,
    })
}

/// Loads backbone weights from a parameter archive.
///
/// Entries may be named with or without the `backbone.` prefix; entries that
/// match no backbone parameter (a classifier, say) are ignored. Every shape is
/// checked before any value is assigned.
pub fn load_pretrained(store: &ParamStore, path: &Path) -> Result<()> {
    let archive = load_archive(path)?;
    let prefix = format!("{BACKBONE_PREFIX}.");
    let mut updates = BTreeMap::new();
    for (name, var) in store.vars() {
        let Some(short) = name.strip_prefix(&prefix) else {
            continue;
        };
        let found = archive
            .tensors
            .get(&name)
            .or_else(|| archive.tensors.get(short))
            .ok_or_else(|| Error::WeightMissing {
                path: path.to_path_buf(),
                name: short.to_string(),
            })?;
        if found.dims() != var.dims() {
            return Err(Error::WeightShape {
                path: path.to_path_buf(),
                name: short.to_string(),
                expected: var.dims().to_vec(),
                found: found.dims().to_vec(),
            });
        }
        updates.insert(name, found.clone());
    }
    store.assign_all(&updates)
}

impl Backbone {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Maps `(batch, 3, H, W)` pixels in [0, 1] to T0 of shape
    /// `(batch, C, H/16, W/16)`.
    pub fn forward(&self, pixels: &Tensor, train: bool) -> Result<Tensor> {
        let dims = pixels.dims();
        if dims.len() != 4
            || dims[1] != 3
            || dims[2] != self.config.input_height
            || dims[3] != self.config.input_width
        {
            return Err(Error::Shape(format!(
                "backbone expects (batch, 3, {}, {}), got {dims:?}",
                self.config.input_height, self.config.input_width
            )));
        }
        let x = pixels
            .to_dtype(self.mean.dtype())?
            .broadcast_sub(&self.mean)?
            .broadcast_div(&self.std)?;
        match &self.net {
            Net::ResNet50(net) => net.forward(&x, train),
            Net::DeskTiny(net) => net.forward(&x),
        }
    }
}

/// Runs the backbone on a batch after checking its dimensions.
pub fn forward_backbone(backbone: &Backbone, batch: &ImageBatch, train: bool) -> Result<Tensor> {
    backbone.forward(&batch.pixels, train)
}
