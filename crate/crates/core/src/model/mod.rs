//! Image-to-intensity network: a shared global feature extractor, one
//! spatial-attention branch per AU producing a unit-norm AU feature, and one
//! two-layer regressor per AU with a hard clip to `[0,1]`.

mod backbone;
pub mod checkpoint;
mod params;

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var, D};
use serde::{Deserialize, Serialize};

pub use backbone::{ResNet34, TinyBackbone};
pub use params::ParamStore;

use crate::error::{validation, Result, TasError};
use backbone::leaky_relu;
use params::ParamBuilder;

/// Added along a fixed diagonal direction before l2 normalization so an
/// all-zero pooled feature still maps to a unit vector.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    /// 34-layer residual network, 512×8×8 output.
    Resnet34,
    /// Four patch-convolution blocks, 128×8×8 output.
    Tiny,
}

impl BackboneKind {
    pub fn feature_dim(self) -> usize {
        match self {
            BackboneKind::Resnet34 => 512,
            BackboneKind::Tiny => backbone::TINY_CHANNELS[3],
        }
    }

    pub fn grid(self, input_size: usize) -> usize {
        match self {
            BackboneKind::Resnet34 => ResNet34::grid(input_size),
            BackboneKind::Tiny => TinyBackbone::grid(input_size),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub au_count: usize,
    pub backbone: BackboneKind,
    pub feature_dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub attention_kernel: usize,
    pub mlp_hidden: usize,
    pub input_size: usize,
    pub leaky_slope: f64,
    pub pixel_mean: [f64; 3],
    pub pixel_std: [f64; 3],
}

impl ModelConfig {
    pub fn new(au_count: usize, backbone: BackboneKind) -> Self {
        let input_size = 256;
        let grid = backbone.grid(input_size);
        Self {
            au_count,
            backbone,
            feature_dim: backbone.feature_dim(),
            grid_h: grid,
            grid_w: grid,
            attention_kernel: 9,
            mlp_hidden: 64,
            input_size,
            leaky_slope: 0.01,
            pixel_mean: [0.485, 0.456, 0.406],
            pixel_std: [0.229, 0.224, 0.225],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.au_count == 0 {
            return Err(validation("au_count must be positive"));
        }
        if self.attention_kernel.is_multiple_of(2) {
            return Err(validation(format!(
                "attention kernel {} must be odd",
                self.attention_kernel
            )));
        }
        if self.mlp_hidden == 0 {
            return Err(validation("mlp_hidden must be positive"));
        }
        let grid = self.backbone.grid(self.input_size);
        if self.feature_dim != self.backbone.feature_dim() || self.grid_h != grid || self.grid_w != grid {
            return Err(validation(format!(
                "backbone {:?} produces {}×{grid}×{grid} features, config declares {}×{}×{}",
                self.backbone,
                self.backbone.feature_dim(),
                self.feature_dim,
                self.grid_h,
                self.grid_w
            )));
        }
        if self.pixel_std.iter().any(|&s| s <= 0.0) {
            return Err(validation("pixel_std entries must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug)]
enum Extractor {
    Tiny(TinyBackbone),
    Resnet34(ResNet34),
}

#[derive(Debug)]
struct AttentionBranch {
    /// `(d, k*k)`: weight of input channel `ch` at kernel offset `ky*k + kx`.
    weight: Var,
    bias: Var,
}

#[derive(Debug)]
struct Regressor {
    fc1_weight: Var,
    fc1_bias: Var,
    fc2_weight: Var,
    fc2_bias: Var,
}

/// Output of a forward pass over `B` images.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// `(B, C, d)`, unit norm along the last axis.
    pub features: Tensor,
    /// `(B, C)`, clipped to `[0,1]`.
    pub intensities: Tensor,
}

#[derive(Debug)]
pub struct TasModel {
    config: ModelConfig,
    extractor: Extractor,
    branches: Vec<AttentionBranch>,
    regressors: Vec<Regressor>,
    params: ParamStore,
    /// Gather positions that turn per-location kernel responses into a
    /// "same"-padded convolution over the grid, laid out `(C, Hg*Wg, k*k)`.
    gather_all: Tensor,
    gather_one: Tensor,
    device: Device,
}

impl TasModel {
    /// Fresh model with parameters drawn from a seeded generator.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut pb = ParamBuilder::seeded(seed, DType::F32, Device::Cpu);
        Self::build(config, &mut pb)
    }

    /// Model with parameters taken from `tensors` (e.g. a loaded checkpoint).
    pub fn from_tensors(config: ModelConfig, tensors: &HashMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let mut pb = ParamBuilder::from_tensors(tensors, DType::F32, Device::Cpu);
        let model = Self::build(config, &mut pb)?;
        let expected: usize = model.named_tensors().len();
        if expected != tensors.len() {
            return Err(TasError::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {expected}",
                tensors.len()
            )));
        }
        Ok(model)
    }

    fn build(config: ModelConfig, pb: &mut ParamBuilder) -> Result<Self> {
        let device = pb.device.clone();
        let mean = Tensor::from_vec(config.pixel_mean.to_vec(), (1, 3, 1, 1), &device)?.to_dtype(pb.dtype)?;
        let std = Tensor::from_vec(config.pixel_std.to_vec(), (1, 3, 1, 1), &device)?.to_dtype(pb.dtype)?;
        let extractor = match config.backbone {
            BackboneKind::Tiny => Extractor::Tiny(TinyBackbone::new(pb, mean, std, config.leaky_slope)?),
            BackboneKind::Resnet34 => Extractor::Resnet34(ResNet34::new(pb, mean, std)?),
        };

        let d = config.feature_dim;
        let kk = config.attention_kernel * config.attention_kernel;
        let mut branches = Vec::with_capacity(config.au_count);
        for c in 0..config.au_count {
            branches.push(AttentionBranch {
                weight: pb.kaiming(&format!("attention.{c}.weight"), &[d, kk], d * kk)?,
                bias: pb.constant(&format!("attention.{c}.bias"), &[1], 0.0)?,
            });
        }
        let h = config.mlp_hidden;
        let mut regressors = Vec::with_capacity(config.au_count);
        for c in 0..config.au_count {
            regressors.push(Regressor {
                fc1_weight: pb.kaiming(&format!("regressor.{c}.fc1.weight"), &[d, h], d)?,
                fc1_bias: pb.constant(&format!("regressor.{c}.fc1.bias"), &[h], 0.0)?,
                fc2_weight: pb.uniform(&format!("regressor.{c}.fc2.weight"), &[h, 1], (1.0 / h as f64).sqrt())?,
                // Start mid-range so the clip does not saturate at initialization.
                fc2_bias: pb.constant(&format!("regressor.{c}.fc2.bias"), &[1], 0.5)?,
            });
        }

        let gather_all = gather_index(&config, config.au_count, &device)?;
        let gather_one = gather_index(&config, 1, &device)?;
        Ok(Self {
            config,
            extractor,
            branches,
            regressors,
            params: std::mem::take(&mut pb.store),
            gather_all,
            gather_one,
            device,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.params.vars()
    }

    /// Every tensor needed to restore the model, parameters first.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|(n, v)| (n.to_string(), v.as_tensor().clone()))
            .collect();
        if let Extractor::Resnet34(r) = &self.extractor {
            out.extend(r.buffers());
        }
        out
    }

    /// Names of the parameters owned by AU branch `c` (attention and regressor).
    pub fn branch_param_names(&self, c: usize) -> Vec<String> {
        let prefixes = [format!("attention.{c}."), format!("regressor.{c}.")];
        self.params
            .iter()
            .map(|(n, _)| n)
            .filter(|n| prefixes.iter().any(|p| n.starts_with(p.as_str())))
            .map(str::to_string)
            .collect()
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        let s = self.config.input_size;
        match images.dims() {
            [_, 3, h, w] if *h == s && *w == s => Ok(()),
            dims => Err(TasError::Shape(format!(
                "expected images of shape (B, 3, {s}, {s}), got {dims:?}"
            ))),
        }
    }

    fn global_nhwc(&self, images: &Tensor, train: bool) -> Result<Tensor> {
        self.check_images(images)?;
        let images = images.to_dtype(DType::F32)?;
        match &self.extractor {
            Extractor::Tiny(b) => b.forward(&images),
            Extractor::Resnet34(b) => b.forward(&images, train),
        }
    }

    /// Global feature map `(B, d, Hg, Wg)` in evaluation mode.
    pub fn extract_global(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.global_nhwc(images, false)?.permute((0, 3, 1, 2))?.contiguous()?)
    }

    fn attend(&self, global: &Tensor, branches: &[&AttentionBranch], gather: &Tensor) -> Result<Tensor> {
        let (b, hg, wg, d) = global.dims4()?;
        let k = self.config.attention_kernel;
        let kk = k * k;
        let nb = branches.len();
        let pad = k / 2;
        let weight = Tensor::cat(&branches.iter().map(|br| br.weight.as_tensor()).collect::<Vec<_>>(), 1)?;
        let bias = Tensor::cat(&branches.iter().map(|br| br.bias.as_tensor()).collect::<Vec<_>>(), 0)?;

        let locations = global.reshape((b * hg * wg, d))?;
        let responses = locations
            .matmul(&weight)?
            .reshape((b, hg, wg, nb * kk))?
            .pad_with_zeros(1, pad, pad)?
            .pad_with_zeros(2, pad, pad)?;
        let (hp, wp) = (hg + 2 * pad, wg + 2 * pad);
        let logits = responses
            .reshape((b, hp * wp * nb * kk))?
            .index_select(gather, 1)?
            .reshape((b, nb, hg * wg, kk))?
            .sum(D::Minus1)?
            .broadcast_add(&bias.reshape((1, nb, 1))?)?;
        let attention = candle_nn::ops::sigmoid(&logits)?;

        let pooled = (attention.matmul(&global.reshape((b, hg * wg, d))?)? / (hg * wg) as f64)?;
        let shifted = (pooled + NORM_EPS / (d as f64).sqrt())?;
        let norm = shifted.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
        Ok(shifted.broadcast_div(&norm)?)
    }

    /// Unit-norm feature `(B, d)` of AU branch `c` from a global map `(B, d, Hg, Wg)`.
    pub fn attend_au(&self, global: &Tensor, c: usize) -> Result<Tensor> {
        let branch = self
            .branches
            .get(c)
            .ok_or_else(|| validation(format!("AU class {c} out of range")))?;
        let nhwc = global.permute((0, 2, 3, 1))?.contiguous()?;
        Ok(self.attend(&nhwc, &[branch], &self.gather_one)?.squeeze(1)?)
    }

    /// Regressor output before clipping, `(B,)`.
    pub fn raw_intensity(&self, features: &Tensor, c: usize) -> Result<Tensor> {
        let r = self
            .regressors
            .get(c)
            .ok_or_else(|| validation(format!("AU class {c} out of range")))?;
        let h = features
            .matmul(r.fc1_weight.as_tensor())?
            .broadcast_add(r.fc1_bias.as_tensor())?;
        let h = leaky_relu(&h, self.config.leaky_slope)?;
        let out = h
            .matmul(r.fc2_weight.as_tensor())?
            .broadcast_add(r.fc2_bias.as_tensor())?;
        Ok(out.squeeze(1)?)
    }

    /// Clipped intensity `(B,)` of AU `c` from unit features `(B, d)`.
    pub fn estimate_intensity(&self, features: &Tensor, c: usize) -> Result<Tensor> {
        Ok(self.raw_intensity(features, c)?.clamp(0.0, 1.0)?)
    }

    /// Full forward pass. `train` only matters for backbones with batch
    /// statistics; the tiny backbone behaves identically in both modes.
    pub fn forward_t(&self, images: &Tensor, train: bool) -> Result<ModelOutput> {
        let global = self.global_nhwc(images, train)?;
        let refs: Vec<&AttentionBranch> = self.branches.iter().collect();
        let features = self.attend(&global, &refs, &self.gather_all)?;
        let intensities = (0..self.config.au_count)
            .map(|c| self.estimate_intensity(&features.narrow(1, c, 1)?.squeeze(1)?, c))
            .collect::<Result<Vec<_>>>()?;
        let intensities = Tensor::stack(&intensities, 1)?;
        Ok(ModelOutput {
            features,
            intensities,
        })
    }

    /// Evaluation-mode forward pass.
    pub fn forward(&self, images: &Tensor) -> Result<ModelOutput> {
        self.forward_t(images, false)
    }
}

fn gather_index(config: &ModelConfig, branches: usize, device: &Device) -> Result<Tensor> {
    let k = config.attention_kernel;
    let kk = k * k;
    let (hg, wg) = (config.grid_h, config.grid_w);
    let wp = wg + k - 1;
    let stride = branches * kk;
    let mut idx = Vec::with_capacity(branches * hg * wg * kk);
    for c in 0..branches {
        for y in 0..hg {
            for x in 0..wg {
                for ky in 0..k {
                    for kx in 0..k {
                        let q = (y + ky) * wp + (x + kx);
                        idx.push((q * stride + c * kk + ky * k + kx) as u32);
                    }
                }
            }
        }
    }
    let n = idx.len();
    Ok(Tensor::from_vec(idx, n, device)?)
}
