//! Lightweight multi-resolution backbone.
//!
//! A stride-2 stem brings the input to 1/4 resolution, after which four
//! parallel branches run at {1/4, 1/8, 1/16, 1/32} with widths
//! {W0, 2W0, 4W0, 8W0}. Every stage applies one residual block per branch and
//! then exchanges information across all branch pairs. The branch outputs are
//! upsampled to 1/4 resolution, concatenated and projected to the embedding
//! width.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::nn::{downsample_avg, upsample_nearest, BatchNorm2d, Conv2d, VarStore};
use crate::error::{Error, Result};

pub const NUM_BRANCHES: usize = 4;

/// Structural hyperparameters of the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Channels of the highest-resolution branch; lower branches double it.
    pub base_width: usize,
    /// Number of block+fusion stages.
    pub num_stages: usize,
    /// Channels of the emitted feature map.
    pub out_channels: usize,
    /// 1 for depth input, 3 for RGB.
    pub in_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            base_width: 24,
            num_stages: 3,
            out_channels: 64,
            in_channels: 3,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width < 2 {
            return Err(Error::Config(format!(
                "base_width must be at least 2, got {}",
                self.base_width
            )));
        }
        if self.num_stages < 1 {
            return Err(Error::Config("num_stages must be at least 1".into()));
        }
        if self.out_channels < 8 {
            return Err(Error::Config(format!(
                "out_channels must be at least 8, got {}",
                self.out_channels
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        Ok(())
    }

    fn widths(&self) -> [usize; NUM_BRANCHES] {
        [
            self.base_width,
            self.base_width * 2,
            self.base_width * 4,
            self.base_width * 8,
        ]
    }
}

struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    fn new(
        vs: &mut VarStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        Ok(ConvBn {
            conv: Conv2d::new(vs, &format!("{name}.conv"), c_in, c_out, kernel, stride, kernel / 2, false)?,
            bn: BatchNorm2d::new(vs, &format!("{name}.bn"), c_out)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.bn.forward(&self.conv.forward(x)?, train)
    }
}

/// Two 3x3 convolutions with an identity skip.
struct BasicBlock {
    cb1: ConvBn,
    cb2: ConvBn,
}

impl BasicBlock {
    fn new(vs: &mut VarStore, name: &str, width: usize) -> Result<Self> {
        Ok(BasicBlock {
            cb1: ConvBn::new(vs, &format!("{name}.1"), width, width, 3, 1)?,
            cb2: ConvBn::new(vs, &format!("{name}.2"), width, width, 3, 1)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.cb1.forward(x, train)?.relu()?;
        let y = self.cb2.forward(&y, train)?;
        Ok((x + y)?.relu()?)
    }
}

/// Resolution/width adapter from branch `src` to branch `dst`.
struct FuseUnit {
    cb: ConvBn,
    /// log2 of the resolution change; positive means downsample.
    shift: i32,
}

impl FuseUnit {
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        if self.shift > 0 {
            let y = downsample_avg(x, 1 << self.shift)?;
            self.cb.forward(&y, train)
        } else {
            let y = self.cb.forward(x, train)?;
            upsample_nearest(&y, 1 << (-self.shift))
        }
    }
}

struct Stage {
    blocks: Vec<BasicBlock>,
    /// `fuse[dst][src]`, `None` on the diagonal (identity).
    fuse: Vec<Vec<Option<FuseUnit>>>,
}

/// The multi-resolution feature extractor.
pub struct Backbone {
    cfg: BackboneConfig,
    stem1: ConvBn,
    stem2: ConvBn,
    transitions: Vec<ConvBn>,
    stages: Vec<Stage>,
    proj: ConvBn,
}

impl Backbone {
    /// Build under `prefix` (e.g. `f_depth`), registering weights in `vs`.
    pub fn new(vs: &mut VarStore, prefix: &str, cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.widths();
        let stem1 = ConvBn::new(vs, &format!("{prefix}.stem.1"), cfg.in_channels, w[0], 3, 2)?;
        let stem2 = ConvBn::new(vs, &format!("{prefix}.stem.2"), w[0], w[0], 3, 2)?;
        let mut transitions = Vec::new();
        for b in 1..NUM_BRANCHES {
            transitions.push(ConvBn::new(
                vs,
                &format!("{prefix}.transition.{b}"),
                w[b - 1],
                w[b],
                3,
                2,
            )?);
        }
        let mut stages = Vec::new();
        for s in 0..cfg.num_stages {
            let mut blocks = Vec::new();
            for b in 0..NUM_BRANCHES {
                blocks.push(BasicBlock::new(
                    vs,
                    &format!("{prefix}.stage{s}.branch{b}"),
                    w[b],
                )?);
            }
            let mut fuse = Vec::new();
            for dst in 0..NUM_BRANCHES {
                let mut row = Vec::new();
                for src in 0..NUM_BRANCHES {
                    if src == dst {
                        row.push(None);
                    } else {
                        let cb = ConvBn::new(
                            vs,
                            &format!("{prefix}.stage{s}.fuse.{src}to{dst}"),
                            w[src],
                            w[dst],
                            1,
                            1,
                        )?;
                        row.push(Some(FuseUnit {
                            cb,
                            shift: dst as i32 - src as i32,
                        }));
                    }
                }
                fuse.push(row);
            }
            stages.push(Stage { blocks, fuse });
        }
        let concat_width: usize = w.iter().sum();
        let proj = ConvBn::new(vs, &format!("{prefix}.proj"), concat_width, cfg.out_channels, 1, 1)?;
        Ok(Backbone {
            cfg,
            stem1,
            stem2,
            transitions,
            stages,
            proj,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Map an input image to a feature map at 1/4 resolution.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_b, c, h, w) = x.dims4()?;
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "backbone expects {} input channels, got {c}",
                self.cfg.in_channels
            )));
        }
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!(
                "input dimensions must be divisible by 32, got {h}x{w}"
            )));
        }
        let y = self.stem1.forward(x, train)?.relu()?;
        let y = self.stem2.forward(&y, train)?.relu()?;

        let mut xs: Vec<Tensor> = vec![y];
        for t in &self.transitions {
            let next = t.forward(xs.last().unwrap(), train)?.relu()?;
            xs.push(next);
        }

        for stage in &self.stages {
            for (b, block) in stage.blocks.iter().enumerate() {
                xs[b] = block.forward(&xs[b], train)?;
            }
            let mut fused = Vec::with_capacity(NUM_BRANCHES);
            for dst in 0..NUM_BRANCHES {
                let mut acc = xs[dst].clone();
                for src in 0..NUM_BRANCHES {
                    if let Some(unit) = &stage.fuse[dst][src] {
                        acc = (acc + unit.forward(&xs[src], train)?)?;
                    }
                }
                fused.push(acc.relu()?);
            }
            xs = fused;
        }

        let mut parts = vec![xs[0].clone()];
        for (b, x_b) in xs.iter().enumerate().skip(1) {
            parts.push(upsample_nearest(x_b, 1 << b)?);
        }
        let cat = Tensor::cat(&parts, 1)?;
        Ok(self.proj.forward(&cat, train)?.relu()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn feature_map_is_quarter_resolution() {
        let mut vs = VarStore::new(Device::Cpu, 0);
        let cfg = BackboneConfig {
            base_width: 4,
            num_stages: 1,
            out_channels: 16,
            in_channels: 3,
        };
        let bb = Backbone::new(&mut vs, "f_rgb", cfg).unwrap();
        let x = Tensor::zeros((2, 3, 64, 96), candle_core::DType::F32, &Device::Cpu).unwrap();
        let y = bb.forward(&x, false).unwrap();
        assert_eq!(y.dims(), &[2, 16, 16, 24]);
    }

    #[test]
    fn rejects_input_not_divisible_by_32() {
        let mut vs = VarStore::new(Device::Cpu, 0);
        let cfg = BackboneConfig {
            base_width: 4,
            num_stages: 1,
            out_channels: 8,
            in_channels: 1,
        };
        let bb = Backbone::new(&mut vs, "f_depth", cfg).unwrap();
        let x = Tensor::zeros((1, 1, 48, 64), candle_core::DType::F32, &Device::Cpu).unwrap();
        assert!(bb.forward(&x, false).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let mut vs = VarStore::new(Device::Cpu, 7);
        let cfg = BackboneConfig {
            base_width: 4,
            num_stages: 2,
            out_channels: 8,
            in_channels: 3,
        };
        let bb = Backbone::new(&mut vs, "f_rgb", cfg).unwrap();
        let x = Tensor::rand(0f32, 1f32, (1, 3, 32, 32), &Device::Cpu).unwrap();
        let a = bb.forward(&x, false).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = bb.forward(&x, false).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }
}
