//! Backbones, the SPDH pose head, and the composite stage-1/stage-2 models.
//!
//! Stage 1 is a single depth backbone (`f_depth`) feeding the head. Stage 2
//! runs two RGB backbones (`f_rgb`, `f_hall`) whose concatenated features feed
//! a fresh head, plus the frozen stage-1 depth backbone used only to produce
//! the feature targets of the hallucination loss. The frozen teacher's
//! parameters are never handed to an optimizer and its batch-norm statistics
//! are never updated; its digest is re-checked every epoch during training.

pub mod backbone;
pub mod head;
pub mod nn;

use std::collections::HashMap;

use candle_core::{Device, Tensor, Var};
use serde::{Deserialize, Serialize};

pub use backbone::{Backbone, BackboneConfig};
pub use head::{HeadConfig, PoseHead};
pub use nn::{digest_tensors, VarStore};

use crate::error::{Error, Result};

/// Name prefix of the depth (teacher) backbone in both stages.
pub const TEACHER_PREFIX: &str = "f_depth";

/// Which inference-time backbones a stage-2 model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Variant {
    /// RGB backbone + hallucination backbone (the full model).
    Full,
    /// Hallucination backbone only.
    HallOnly,
    /// RGB backbone only (no hallucination loss; the RGB baseline).
    RgbOnly,
}

impl Stage2Variant {
    pub fn uses_rgb(&self) -> bool {
        matches!(self, Stage2Variant::Full | Stage2Variant::RgbOnly)
    }

    pub fn uses_hall(&self) -> bool {
        matches!(self, Stage2Variant::Full | Stage2Variant::HallOnly)
    }

    pub fn num_backbones(&self) -> usize {
        self.uses_rgb() as usize + self.uses_hall() as usize
    }
}

/// Structural configuration shared by both stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub base_width: usize,
    pub num_stages: usize,
    /// C_feat: channels of each backbone's feature map.
    pub feature_channels: usize,
    pub num_joints: usize,
    pub head_widths: [usize; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_width: 24,
            num_stages: 3,
            feature_channels: 64,
            num_joints: 14,
            head_widths: [64, 32, 16],
        }
    }
}

impl ModelConfig {
    pub fn backbone_config(&self, in_channels: usize) -> BackboneConfig {
        BackboneConfig {
            base_width: self.base_width,
            num_stages: self.num_stages,
            out_channels: self.feature_channels,
            in_channels,
        }
    }

    pub fn head_config(&self, num_backbones: usize) -> Result<HeadConfig> {
        HeadConfig::new(
            self.feature_channels * num_backbones,
            self.num_joints,
            self.head_widths,
        )
    }
}

/// Depth-only model: `f_depth` backbone plus the pose head.
pub struct Stage1Model {
    vs: VarStore,
    backbone: Backbone,
    head: PoseHead,
    cfg: ModelConfig,
}

impl Stage1Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(VarStore::new(Device::Cpu, seed), cfg)
    }

    /// Build at an explicit element type (f64 for gradient verification).
    pub fn new_with_dtype(cfg: ModelConfig, seed: u64, dtype: candle_core::DType) -> Result<Self> {
        Self::build(VarStore::new(Device::Cpu, seed).with_dtype(dtype), cfg)
    }

    /// Reconstruct from checkpoint tensors. Every model tensor must be present.
    pub fn from_tensors(cfg: ModelConfig, tensors: HashMap<String, Tensor>) -> Result<Self> {
        let vs = VarStore::with_preload(Device::Cpu, 0, tensors, vec![String::new()]);
        let model = Self::build(vs, cfg)?;
        if !model.vs.missing().is_empty() {
            return Err(Error::Checkpoint(format!(
                "stage-1 checkpoint is missing tensors: {:?}",
                model.vs.missing()
            )));
        }
        Ok(model)
    }

    fn build(mut vs: VarStore, cfg: ModelConfig) -> Result<Self> {
        let backbone = Backbone::new(&mut vs, TEACHER_PREFIX, cfg.backbone_config(1))?;
        let head = PoseHead::new(&mut vs, "head", cfg.head_config(1)?)?;
        Ok(Stage1Model {
            vs,
            backbone,
            head,
            cfg,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn var_store(&self) -> &VarStore {
        &self.vs
    }

    /// `depth` is (B, 1, H, W); returns (uv, uz, f_depth).
    pub fn forward(&self, depth: &Tensor, train: bool) -> Result<(Tensor, Tensor, Tensor)> {
        let feat = self.backbone.forward(depth, train)?;
        let (uv, uz) = self.head.forward(&feat, train)?;
        Ok((uv, uz, feat))
    }

    /// All parameters train in stage 1.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.vs.params().map(|(n, v)| (n.clone(), v.clone())).collect()
    }

    pub fn count_trainable(&self) -> usize {
        self.vs.count_parameters(|_| true)
    }
}

/// Output of a stage-2 forward pass.
pub struct Stage2Output {
    pub uv: Tensor,
    pub uz: Tensor,
    pub f_rgb: Option<Tensor>,
    pub f_hall: Option<Tensor>,
}

/// RGB-input model with an optional hallucination branch and a frozen depth
/// teacher.
pub struct Stage2Model {
    vs: VarStore,
    teacher: Backbone,
    rgb: Option<Backbone>,
    hall: Option<Backbone>,
    head: PoseHead,
    variant: Stage2Variant,
    cfg: ModelConfig,
}

impl Stage2Model {
    /// Assemble a fresh stage-2 model around frozen teacher weights (the
    /// `f_depth.*` tensors of a stage-1 checkpoint).
    pub fn new(
        cfg: ModelConfig,
        variant: Stage2Variant,
        teacher: HashMap<String, Tensor>,
        seed: u64,
    ) -> Result<Self> {
        let vs = VarStore::with_preload(
            Device::Cpu,
            seed,
            teacher,
            vec![format!("{TEACHER_PREFIX}.")],
        );
        Self::build(vs, cfg, variant, true)
    }

    /// Build at an explicit element type (f64 for gradient verification).
    pub fn new_with_dtype(
        cfg: ModelConfig,
        variant: Stage2Variant,
        teacher: HashMap<String, Tensor>,
        seed: u64,
        dtype: candle_core::DType,
    ) -> Result<Self> {
        let vs = VarStore::with_preload(
            Device::Cpu,
            seed,
            teacher,
            vec![format!("{TEACHER_PREFIX}.")],
        )
        .with_dtype(dtype);
        Self::build(vs, cfg, variant, true)
    }

    /// Reconstruct a stage-2 model from checkpoint tensors.
    pub fn from_tensors(
        cfg: ModelConfig,
        variant: Stage2Variant,
        tensors: HashMap<String, Tensor>,
    ) -> Result<Self> {
        let vs = VarStore::with_preload(Device::Cpu, 0, tensors, vec![String::new()]);
        Self::build(vs, cfg, variant, false)
    }

    fn build(
        mut vs: VarStore,
        cfg: ModelConfig,
        variant: Stage2Variant,
        teacher_only_strict: bool,
    ) -> Result<Self> {
        let teacher = Backbone::new(&mut vs, TEACHER_PREFIX, cfg.backbone_config(1))?;
        let rgb = if variant.uses_rgb() {
            Some(Backbone::new(&mut vs, "f_rgb", cfg.backbone_config(3))?)
        } else {
            None
        };
        let hall = if variant.uses_hall() {
            Some(Backbone::new(&mut vs, "f_hall", cfg.backbone_config(3))?)
        } else {
            None
        };
        let head = PoseHead::new(&mut vs, "head", cfg.head_config(variant.num_backbones())?)?;
        if !vs.missing().is_empty() {
            let what = if teacher_only_strict {
                "stage-1 checkpoint does not provide required teacher tensors"
            } else {
                "stage-2 checkpoint is missing tensors"
            };
            return Err(Error::Checkpoint(format!("{what}: {:?}", vs.missing())));
        }
        Ok(Stage2Model {
            vs,
            teacher,
            rgb,
            hall,
            head,
            variant,
            cfg,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn variant(&self) -> Stage2Variant {
        self.variant
    }

    pub fn var_store(&self) -> &VarStore {
        &self.vs
    }

    /// Inference/training pass over RGB input (B, 3, H, W).
    ///
    /// `detach_hall` severs the hallucination features from the head input
    /// (used to verify where gradients flow); the returned `f_hall` is always
    /// the attached tensor.
    pub fn forward(&self, rgb: &Tensor, train: bool, detach_hall: bool) -> Result<Stage2Output> {
        let f_rgb = match &self.rgb {
            Some(b) => Some(b.forward(rgb, train)?),
            None => None,
        };
        let f_hall = match &self.hall {
            Some(b) => Some(b.forward(rgb, train)?),
            None => None,
        };
        let mut parts: Vec<Tensor> = Vec::new();
        if let Some(f) = &f_rgb {
            parts.push(f.clone());
        }
        if let Some(f) = &f_hall {
            parts.push(if detach_hall { f.detach() } else { f.clone() });
        }
        let head_in = if parts.len() == 1 {
            parts.pop().unwrap()
        } else {
            Tensor::cat(&parts, 1)?
        };
        let (uv, uz) = self.head.forward(&head_in, train)?;
        Ok(Stage2Output {
            uv,
            uz,
            f_rgb,
            f_hall,
        })
    }

    /// Frozen-teacher features for the hallucination target. Always runs in
    /// evaluation mode and detaches the result.
    pub fn teacher_features(&self, depth: &Tensor) -> Result<Tensor> {
        Ok(self.teacher.forward(depth, false)?.detach())
    }

    /// Everything except the frozen teacher.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.vs
            .params_filtered(|n| !n.starts_with(TEACHER_PREFIX))
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect()
    }

    pub fn count_trainable(&self) -> usize {
        self.vs.count_parameters(|n| !n.starts_with(TEACHER_PREFIX))
    }

    /// Digest of the frozen teacher's weights and statistics.
    pub fn teacher_digest(&self) -> Result<String> {
        self.vs.digest(TEACHER_PREFIX)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            base_width: 4,
            num_stages: 1,
            feature_channels: 8,
            num_joints: 3,
            head_widths: [8, 6, 4],
        }
    }

    fn teacher_tensors(cfg: ModelConfig, seed: u64) -> HashMap<String, Tensor> {
        let stage1 = Stage1Model::new(cfg, seed).unwrap();
        stage1
            .var_store()
            .all_tensors()
            .into_iter()
            .filter(|(n, _)| n.starts_with(TEACHER_PREFIX))
            .collect()
    }

    #[test]
    fn default_backbone_parameter_budget() {
        let mut vs = VarStore::new(Device::Cpu, 0);
        let cfg = ModelConfig::default();
        let _ = Backbone::new(&mut vs, TEACHER_PREFIX, cfg.backbone_config(1)).unwrap();
        let n = vs.count_parameters(|_| true);
        assert!(
            (3_000_000..=5_000_000).contains(&n),
            "default backbone has {n} parameters, expected within [3M, 5M]"
        );
    }

    #[test]
    fn stage1_shapes_and_trainable_set() {
        let model = Stage1Model::new(tiny_cfg(), 0).unwrap();
        let x = Tensor::zeros((2, 1, 32, 32), candle_core::DType::F32, &Device::Cpu).unwrap();
        let (uv, uz, feat) = model.forward(&x, false).unwrap();
        assert_eq!(uv.dims(), &[2, 3, 32, 32]);
        assert_eq!(uz.dims(), &[2, 3, 32, 32]);
        assert_eq!(&feat.dims()[2..], &[8, 8]);
        // stage-1 trainable set covers the depth backbone and the head
        let names: Vec<String> = model.trainable().into_iter().map(|(n, _)| n).collect();
        assert!(names.iter().any(|n| n.starts_with("f_depth.")));
        assert!(names.iter().any(|n| n.starts_with("head.")));
        assert_eq!(names.len(), model.var_store().params().count());
    }

    #[test]
    fn stage2_freezes_teacher_and_reports_consistent_shapes() {
        let cfg = tiny_cfg();
        let model = Stage2Model::new(cfg, Stage2Variant::Full, teacher_tensors(cfg, 1), 2).unwrap();
        // frozen teacher contributes nothing to the trainable count
        let total = model.vs.count_parameters(|_| true);
        let teacher_n = model.vs.count_parameters(|n| n.starts_with(TEACHER_PREFIX));
        assert_eq!(model.count_trainable(), total - teacher_n);
        assert!(model
            .trainable()
            .iter()
            .all(|(n, _)| !n.starts_with(TEACHER_PREFIX)));

        let rgb = Tensor::zeros((1, 3, 32, 32), candle_core::DType::F32, &Device::Cpu).unwrap();
        let depth = Tensor::zeros((1, 1, 32, 32), candle_core::DType::F32, &Device::Cpu).unwrap();
        let out = model.forward(&rgb, false, false).unwrap();
        let f_depth = model.teacher_features(&depth).unwrap();
        assert_eq!(out.uv.dims(), &[1, 3, 32, 32]);
        assert_eq!(out.uz.dims(), &[1, 3, 32, 32]);
        assert_eq!(out.f_rgb.as_ref().unwrap().dims(), &[1, 8, 8, 8]);
        assert_eq!(out.f_hall.as_ref().unwrap().dims(), &[1, 8, 8, 8]);
        assert_eq!(f_depth.dims(), &[1, 8, 8, 8]);
    }

    #[test]
    fn stage2_requires_teacher_tensors() {
        let err = Stage2Model::new(tiny_cfg(), Stage2Variant::Full, HashMap::new(), 0);
        assert!(err.is_err());
    }

    #[test]
    fn stage2_variants_change_head_width() {
        let cfg = tiny_cfg();
        let teacher = teacher_tensors(cfg, 1);
        for (variant, heads_in) in [
            (Stage2Variant::Full, 16),
            (Stage2Variant::HallOnly, 8),
            (Stage2Variant::RgbOnly, 8),
        ] {
            let m = Stage2Model::new(cfg, variant, teacher.clone(), 3).unwrap();
            assert_eq!(m.head.config().in_channels, heads_in);
            let rgb = Tensor::zeros((1, 3, 32, 32), candle_core::DType::F32, &Device::Cpu).unwrap();
            let out = m.forward(&rgb, false, false).unwrap();
            assert_eq!(out.f_rgb.is_some(), variant.uses_rgb());
            assert_eq!(out.f_hall.is_some(), variant.uses_hall());
        }
    }
}
