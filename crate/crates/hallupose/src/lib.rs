//! RGB-based 3D human pose estimation with hallucinated depth features.
//!
//! The toolkit trains a heatmap-based 3D pose estimator in two stages. A depth
//! backbone is trained first on depth maps alone. In the second stage two RGB
//! backbones are trained jointly: one free to specialize on RGB appearance, the
//! other driven to reproduce the frozen depth backbone's feature maps, so that
//! depth-like cues remain available at inference time when only RGB is given.
//!
//! Poses are represented as semi-perspective decoupled heatmaps (SPDH): each
//! joint owns a `uv` heatmap on the image plane and a `uz` heatmap whose rows
//! index quantized metric depth. [`geometry`] implements the codec between 3D
//! skeletons and heatmap stacks, [`model`] the backbones and the dual-branch
//! multi-resolution head, [`training`] the two-stage procedure, [`evaluation`]
//! MPJPE/mAP metrics and feature-proximity analysis, and [`data`] dataset IO,
//! augmentation and a synthetic RGB-D generator for end-to-end verification.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod training;

pub use error::{Error, Result};
