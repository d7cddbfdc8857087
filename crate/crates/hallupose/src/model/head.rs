//! Dual-branch SPDH pose head.
//!
//! Each branch (uv and uz) takes the 1/4-resolution embedding, predicts
//! J-channel heatmaps at {1/4, 1/2, 1} of the input resolution — one 3x3
//! prediction layer per scale — and climbs between scales with a residual
//! transpose-convolution block. The three predictions are resized bilinearly
//! to full resolution and summed.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::nn::{upsample_bilinear, upsample_nearest, BatchNorm2d, Conv2d, ConvTranspose2d, VarStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Channels of the embedding fed to the head (C_feat, or 2*C_feat when two
    /// backbones are concatenated).
    pub in_channels: usize,
    pub num_joints: usize,
    /// Trunk widths at the {1/4, 1/2, 1} scales.
    pub widths: [usize; 3],
}

impl HeadConfig {
    pub fn new(in_channels: usize, num_joints: usize, widths: [usize; 3]) -> Result<Self> {
        if in_channels == 0 || num_joints == 0 || widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(
                "head channels, joints and widths must be positive".into(),
            ));
        }
        Ok(HeadConfig {
            in_channels,
            num_joints,
            widths,
        })
    }
}

/// Doubles resolution: transpose conv trunk with a nearest+1x1 skip.
struct UpBlock {
    tconv: ConvTranspose2d,
    bn1: BatchNorm2d,
    conv: Conv2d,
    bn2: BatchNorm2d,
    skip_conv: Conv2d,
    skip_bn: BatchNorm2d,
}

impl UpBlock {
    fn new(vs: &mut VarStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(UpBlock {
            tconv: ConvTranspose2d::new(vs, &format!("{name}.tconv"), c_in, c_out, 2, 2, 0, false)?,
            bn1: BatchNorm2d::new(vs, &format!("{name}.bn1"), c_out)?,
            conv: Conv2d::new(vs, &format!("{name}.conv"), c_out, c_out, 3, 1, 1, false)?,
            bn2: BatchNorm2d::new(vs, &format!("{name}.bn2"), c_out)?,
            skip_conv: Conv2d::new(vs, &format!("{name}.skip.conv"), c_in, c_out, 1, 1, 0, false)?,
            skip_bn: BatchNorm2d::new(vs, &format!("{name}.skip.bn"), c_out)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let main = self.bn1.forward(&self.tconv.forward(x)?, train)?.relu()?;
        let main = self.bn2.forward(&self.conv.forward(&main)?, train)?;
        let skip = self
            .skip_bn
            .forward(&self.skip_conv.forward(&upsample_nearest(x, 2)?)?, train)?;
        Ok((main + skip)?.relu()?)
    }
}

struct HeadBranch {
    trunk_conv: Conv2d,
    trunk_bn: BatchNorm2d,
    pred_quarter: Conv2d,
    up1: UpBlock,
    pred_half: Conv2d,
    up2: UpBlock,
    pred_full: Conv2d,
}

impl HeadBranch {
    fn new(vs: &mut VarStore, name: &str, cfg: &HeadConfig) -> Result<Self> {
        let [w0, w1, w2] = cfg.widths;
        let j = cfg.num_joints;
        Ok(HeadBranch {
            trunk_conv: Conv2d::new(vs, &format!("{name}.trunk.conv"), cfg.in_channels, w0, 3, 1, 1, false)?,
            trunk_bn: BatchNorm2d::new(vs, &format!("{name}.trunk.bn"), w0)?,
            pred_quarter: Conv2d::new(vs, &format!("{name}.pred.quarter"), w0, j, 3, 1, 1, true)?,
            up1: UpBlock::new(vs, &format!("{name}.up1"), w0, w1)?,
            pred_half: Conv2d::new(vs, &format!("{name}.pred.half"), w1, j, 3, 1, 1, true)?,
            up2: UpBlock::new(vs, &format!("{name}.up2"), w1, w2)?,
            pred_full: Conv2d::new(vs, &format!("{name}.pred.full"), w2, j, 3, 1, 1, true)?,
        })
    }

    fn forward(&self, features: &Tensor, train: bool) -> Result<Tensor> {
        let (_b, _c, hq, wq) = features.dims4()?;
        let (h, w) = (hq * 4, wq * 4);
        let t = self.trunk_bn.forward(&self.trunk_conv.forward(features)?, train)?.relu()?;
        let p_quarter = self.pred_quarter.forward(&t)?;
        let t = self.up1.forward(&t, train)?;
        let p_half = self.pred_half.forward(&t)?;
        let t = self.up2.forward(&t, train)?;
        let p_full = self.pred_full.forward(&t)?;
        let sum = (upsample_bilinear(&p_quarter, h, w)? + upsample_bilinear(&p_half, h, w)?)?;
        Ok((sum + p_full)?)
    }
}

/// The two-branch head emitting `(uv, uz)` heatmap stacks at input resolution.
pub struct PoseHead {
    cfg: HeadConfig,
    uv: HeadBranch,
    uz: HeadBranch,
}

impl PoseHead {
    pub fn new(vs: &mut VarStore, prefix: &str, cfg: HeadConfig) -> Result<Self> {
        Ok(PoseHead {
            uv: HeadBranch::new(vs, &format!("{prefix}.uv"), &cfg)?,
            uz: HeadBranch::new(vs, &format!("{prefix}.uz"), &cfg)?,
            cfg,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.cfg
    }

    /// `features` must be (B, in_channels, H/4, W/4); returns two
    /// (B, J, H, W) stacks.
    pub fn forward(&self, features: &Tensor, train: bool) -> Result<(Tensor, Tensor)> {
        let (_b, c, _h, _w) = features.dims4()?;
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "pose head expects {} input channels, got {c}",
                self.cfg.in_channels
            )));
        }
        Ok((
            self.uv.forward(features, train)?,
            self.uz.forward(features, train)?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn head_emits_full_resolution_stacks() {
        let mut vs = VarStore::new(Device::Cpu, 0);
        let cfg = HeadConfig::new(32, 14, [16, 12, 8]).unwrap();
        let head = PoseHead::new(&mut vs, "head", cfg).unwrap();
        let f = Tensor::zeros((2, 32, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let (uv, uz) = head.forward(&f, false).unwrap();
        assert_eq!(uv.dims(), &[2, 14, 64, 64]);
        assert_eq!(uz.dims(), &[2, 14, 64, 64]);
    }

    #[test]
    fn head_rejects_channel_mismatch() {
        let mut vs = VarStore::new(Device::Cpu, 0);
        let cfg = HeadConfig::new(32, 14, [16, 12, 8]).unwrap();
        let head = PoseHead::new(&mut vs, "head", cfg).unwrap();
        let f = Tensor::zeros((2, 16, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(head.forward(&f, false).is_err());
    }

    #[test]
    fn zeroed_finer_scales_reduce_to_upsampled_quarter_prediction() {
        // the final map is the sum of the three per-scale predictions
        let mut vs = VarStore::new(Device::Cpu, 3);
        let cfg = HeadConfig::new(8, 2, [8, 6, 4]).unwrap();
        let head = PoseHead::new(&mut vs, "head", cfg).unwrap();
        let f = Tensor::rand(0f32, 1f32, (1, 8, 8, 8), &Device::Cpu).unwrap();

        use super::super::nn::Init;
        for branch in ["uv", "uz"] {
            for (suffix, c_in) in [("half", 6usize), ("full", 4usize)] {
                let w = vs
                    .param(&format!("head.{branch}.pred.{suffix}.weight"), &[2, c_in, 3, 3], Init::Zeros)
                    .unwrap();
                w.set(&Tensor::zeros((2, c_in, 3, 3), DType::F32, &Device::Cpu).unwrap())
                    .unwrap();
                let b = vs
                    .param(&format!("head.{branch}.pred.{suffix}.bias"), &[2], Init::Zeros)
                    .unwrap();
                b.set(&Tensor::zeros(2, DType::F32, &Device::Cpu).unwrap()).unwrap();
            }
        }

        let (uv, _) = head.forward(&f, false).unwrap();
        // recompute the quarter-scale prediction alone and upsample it
        let t = head.uv.trunk_bn.forward(&head.uv.trunk_conv.forward(&f).unwrap(), false).unwrap().relu().unwrap();
        let pq = head.uv.pred_quarter.forward(&t).unwrap();
        let expect = upsample_bilinear(&pq, 32, 32).unwrap();
        let a = uv.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = expect.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}
