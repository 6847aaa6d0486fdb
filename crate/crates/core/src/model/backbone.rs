//! Global feature extractors. Both take `(B, 3, H, W)` images in `[0,1]`
//! and return channels-last global features `(B, Hg, Wg, d)`.

use candle_core::{Module, ModuleT, Tensor, Var};
use candle_nn::{BatchNorm, Conv2d, Conv2dConfig};

use super::params::ParamBuilder;
use crate::error::Result;

pub(crate) fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(candle_nn::ops::leaky_relu(x, slope)?)
}

/// Non-overlapping `patch × patch` convolution on a channels-last tensor,
/// computed as a reshape followed by a matrix product.
#[derive(Debug)]
struct PatchConv {
    weight: Var,
    bias: Var,
    patch: usize,
    out_channels: usize,
}

impl PatchConv {
    fn new(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize, patch: usize) -> Result<Self> {
        let fan_in = patch * patch * cin;
        Ok(Self {
            weight: pb.kaiming(&format!("{name}.weight"), &[fan_in, cout], fan_in)?,
            bias: pb.constant(&format!("{name}.bias"), &[cout], 0.0)?,
            patch,
            out_channels: cout,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let p = self.patch;
        let (oh, ow) = (h / p, w / p);
        let cols = if p == 1 {
            x.reshape((b * h * w, c))?
        } else {
            x.reshape((b, oh, p, ow, p, c))?
                .permute((0, 1, 3, 2, 4, 5))?
                .contiguous()?
                .reshape((b * oh * ow, p * p * c))?
        };
        let y = cols
            .matmul(self.weight.as_tensor())?
            .broadcast_add(self.bias.as_tensor())?;
        Ok(y.reshape((b, oh, ow, self.out_channels))?)
    }
}

/// Desk-scale extractor: fixed 4×4 average pooling, then four convolution
/// blocks (4×4/4, 2×2/2, 1×1, 1×1) to 128 channels on an 8×8 grid for a
/// 256×256 input.
#[derive(Debug)]
pub struct TinyBackbone {
    blocks: Vec<PatchConv>,
    mean: Tensor,
    std: Tensor,
    slope: f64,
}

pub const TINY_CHANNELS: [usize; 4] = [32, 64, 128, 128];
const TINY_POOL: usize = 4;

impl TinyBackbone {
    pub(crate) fn new(pb: &mut ParamBuilder, mean: Tensor, std: Tensor, slope: f64) -> Result<Self> {
        let specs = [
            (3, TINY_CHANNELS[0], 4),
            (TINY_CHANNELS[0], TINY_CHANNELS[1], 2),
            (TINY_CHANNELS[1], TINY_CHANNELS[2], 1),
            (TINY_CHANNELS[2], TINY_CHANNELS[3], 1),
        ];
        let blocks = specs
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, p))| PatchConv::new(pb, &format!("backbone.block{}", i + 1), cin, cout, p))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            mean,
            std,
            slope,
        })
    }

    /// Output grid side for a square input of side `input`.
    pub fn grid(input: usize) -> usize {
        input / (TINY_POOL * 4 * 2)
    }

    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let x = images.avg_pool2d(TINY_POOL)?;
        let x = x.broadcast_sub(&self.mean)?.broadcast_div(&self.std)?;
        let mut x = x.permute((0, 2, 3, 1))?.contiguous()?;
        for block in &self.blocks {
            x = leaky_relu(&block.forward(&x)?, self.slope)?;
        }
        Ok(x)
    }
}

#[derive(Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
    name: String,
}

impl ConvBn {
    fn new(
        pb: &mut ParamBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = cin * kernel * kernel;
        let w = pb.kaiming(&format!("{name}.conv.weight"), &[cout, cin, kernel, kernel], fan_in)?;
        let cfg = Conv2dConfig {
            padding,
            stride,
            ..Default::default()
        };
        let conv = Conv2d::new(w.as_tensor().clone(), None, cfg);
        let gamma = pb.constant(&format!("{name}.bn.weight"), &[cout], 1.0)?;
        let beta = pb.constant(&format!("{name}.bn.bias"), &[cout], 0.0)?;
        let running_mean = pb.buffer(&format!("{name}.bn.running_mean"), &[cout], 0.0)?;
        let running_var = pb.buffer(&format!("{name}.bn.running_var"), &[cout], 1.0)?;
        let bn = BatchNorm::new(
            cout,
            running_mean,
            running_var,
            gamma.as_tensor().clone(),
            beta.as_tensor().clone(),
            1e-5,
        )?;
        Ok(Self {
            conv,
            bn,
            name: name.to_string(),
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.bn.forward_t(&self.conv.forward(x)?, train)?)
    }

    fn buffers(&self, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{}.bn.running_mean", self.name), self.bn.running_mean().clone()));
        out.push((format!("{}.bn.running_var", self.name), self.bn.running_var().clone()));
    }
}

#[derive(Debug)]
struct BasicBlock {
    conv1: ConvBn,
    conv2: ConvBn,
    downsample: Option<ConvBn>,
}

impl BasicBlock {
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.conv1.forward(x, train)?.relu()?;
        let y = self.conv2.forward(&y, train)?;
        let skip = match &self.downsample {
            Some(d) => d.forward(x, train)?,
            None => x.clone(),
        };
        Ok((y + skip)?.relu()?)
    }
}

/// 34-layer residual network without its pooling and classifier layers:
/// 512 channels at stride 32.
#[derive(Debug)]
pub struct ResNet34 {
    stem: ConvBn,
    blocks: Vec<BasicBlock>,
    mean: Tensor,
    std: Tensor,
}

impl ResNet34 {
    pub(crate) fn new(pb: &mut ParamBuilder, mean: Tensor, std: Tensor) -> Result<Self> {
        let stem = ConvBn::new(pb, "backbone.stem", 3, 64, 7, 2, 3)?;
        let mut blocks = Vec::new();
        let mut cin = 64;
        for (stage, (&count, &cout)) in [3usize, 4, 6, 3].iter().zip(&[64usize, 128, 256, 512]).enumerate() {
            for i in 0..count {
                let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                let name = format!("backbone.layer{}.{i}", stage + 1);
                let downsample = if stride != 1 || cin != cout {
                    Some(ConvBn::new(pb, &format!("{name}.downsample"), cin, cout, 1, stride, 0)?)
                } else {
                    None
                };
                blocks.push(BasicBlock {
                    conv1: ConvBn::new(pb, &format!("{name}.conv1"), cin, cout, 3, stride, 1)?,
                    conv2: ConvBn::new(pb, &format!("{name}.conv2"), cout, cout, 3, 1, 1)?,
                    downsample,
                });
                cin = cout;
            }
        }
        Ok(Self {
            stem,
            blocks,
            mean,
            std,
        })
    }

    pub fn grid(input: usize) -> usize {
        input / 32
    }

    pub fn forward(&self, images: &Tensor, train: bool) -> Result<Tensor> {
        let x = images.broadcast_sub(&self.mean)?.broadcast_div(&self.std)?;
        let x = self.stem.forward(&x, train)?.relu()?;
        // Inputs are non-negative after ReLU, so zero padding matches -inf padding.
        let x = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let mut x = x.max_pool2d_with_stride(3, 2)?;
        for block in &self.blocks {
            x = block.forward(&x, train)?;
        }
        Ok(x.permute((0, 2, 3, 1))?.contiguous()?)
    }

    pub fn buffers(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.stem.buffers(&mut out);
        for b in &self.blocks {
            b.conv1.buffers(&mut out);
            b.conv2.buffers(&mut out);
            if let Some(d) = &b.downsample {
                d.buffers(&mut out);
            }
        }
        out
    }
}
