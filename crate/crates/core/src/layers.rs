//! Residual bottleneck unit shared by the backbone and the partition head.

use candle_core::{Module, ModuleT, Tensor};
use candle_nn::{batch_norm, BatchNorm, Conv2d, Conv2dConfig, VarBuilder};

use crate::error::{Error, Result};

pub(crate) const BN_EPS: f64 = 1e-5;

pub(crate) fn conv_no_bias(
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    vb: VarBuilder,
) -> candle_core::Result<Conv2d> {
    let cfg = Conv2dConfig {
        stride,
        padding,
        ..Default::default()
    };
    candle_nn::conv2d_no_bias(c_in, c_out, kernel, cfg, vb)
}

/// 1x1 → 3x3 → 1x1 convolutions, each followed by batch norm, with ReLU
/// between stages, a residual shortcut, and a ReLU after the sum.
///
/// The 3x3 stage is padded by one, so with stride 1 the spatial size is
/// unchanged. The shortcut is the identity when `in == out` and stride is 1,
/// otherwise a strided 1x1 projection with batch norm.
///
/// With all convolution weights zero the residual branch is zero (batch norm
/// of a constant yields its bias, initialized to zero), so the block returns
/// `relu(x)`.
#[derive(Debug, Clone)]
pub struct BottleneckBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    conv3: Conv2d,
    bn3: BatchNorm,
    downsample: Option<(Conv2d, BatchNorm)>,
    in_channels: usize,
    mid_channels: usize,
    out_channels: usize,
}

impl BottleneckBlock {
    pub fn new(
        in_channels: usize,
        mid_channels: usize,
        out_channels: usize,
        stride: usize,
        vb: VarBuilder,
    ) -> Result<Self> {
        if in_channels == 0 || mid_channels == 0 || out_channels == 0 || stride == 0 {
            return Err(Error::Config(format!(
                "bottleneck channels/stride must be positive (in {in_channels}, mid {mid_channels}, out {out_channels}, stride {stride})"
            )));
        }
        let conv1 = conv_no_bias(in_channels, mid_channels, 1, 1, 0, vb.pp("conv1"))?;
        let bn1 = batch_norm(mid_channels, BN_EPS, vb.pp("bn1"))?;
        let conv2 = conv_no_bias(mid_channels, mid_channels, 3, stride, 1, vb.pp("conv2"))?;
        let bn2 = batch_norm(mid_channels, BN_EPS, vb.pp("bn2"))?;
        let conv3 = conv_no_bias(mid_channels, out_channels, 1, 1, 0, vb.pp("conv3"))?;
        let bn3 = batch_norm(out_channels, BN_EPS, vb.pp("bn3"))?;
        let downsample = if stride != 1 || in_channels != out_channels {
            let conv = conv_no_bias(in_channels, out_channels, 1, stride, 0, vb.pp("downsample.0"))?;
            let bn = batch_norm(out_channels, BN_EPS, vb.pp("downsample.1"))?;
            Some((conv, bn))
        } else {
            None
        };
        Ok(Self {
            conv1,
            bn1,
            conv2,
            bn2,
            conv3,
            bn3,
            downsample,
            in_channels,
            mid_channels,
            out_channels,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn mid_channels(&self) -> usize {
        self.mid_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn has_identity_shortcut(&self) -> bool {
        self.downsample.is_none()
    }

    /// Applies the block to a `(batch, channels, height, width)` tensor.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let dims = x.dims();
        if dims.len() != 4 || dims[1] != self.in_channels {
            return Err(Error::Shape(format!(
                "bottleneck expects (batch, {}, h, w), got {:?}",
                self.in_channels, dims
            )));
        }
        let y = self.conv1.forward(x)?;
        let y = self.bn1.forward_t(&y, train)?.relu()?;
        let y = self.conv2.forward(&y)?;
        let y = self.bn2.forward_t(&y, train)?.relu()?;
        let y = self.conv3.forward(&y)?;
        let y = self.bn3.forward_t(&y, train)?;
        let shortcut = match &self.downsample {
            Some((conv, bn)) => bn.forward_t(&conv.forward(x)?, train)?,
            None => x.clone(),
        };
        Ok((y + shortcut)?.relu()?)
    }
}
