//! Dataset ingestion and on-disk layout.
//!
//! A dataset root holds:
//!
//! ```text
//! root/calib.json                  {"rgb": {..intrinsics..}, "depth": {..}}
//! root/samples/<id>/rgb.png        8-bit RGB
//! root/samples/<id>/depth.png      16-bit grayscale, millimeters, 0 = invalid
//! root/samples/<id>/pose.json      skeleton JSON (cm, depth camera frame)
//! root/splits/<name>.txt           one sample id per line, LF
//! ```
//!
//! Depth is converted to centimeters in memory. Skeletons are expressed in the
//! depth camera frame; the synthetic generator emits RGB and depth registered
//! to the same camera.

pub mod augment;
pub mod preprocess;
pub mod synthetic;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, SPDHConfig, Skeleton3D};

/// Dense depth map in centimeters; 0 marks an invalid measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl DepthMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        DepthMap {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Store as a 16-bit grayscale PNG in millimeters.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(
            self.width as u32,
            self.height as u32,
        );
        for (i, px) in img.pixels_mut().enumerate() {
            let mm = (self.data[i] as f64 * 10.0).round().clamp(0.0, 65535.0) as u16;
            *px = image::Luma([mm]);
        }
        img.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.into_luma16();
        let (width, height) = (img.width() as usize, img.height() as usize);
        let data = img.pixels().map(|p| p.0[0] as f32 / 10.0).collect();
        Ok(DepthMap {
            width,
            height,
            data,
        })
    }
}

/// Per-dataset camera calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub rgb: CameraIntrinsics,
    pub depth: CameraIntrinsics,
}

/// One dataset record: an RGB image, an optional registered depth map, the
/// ground-truth skeleton, and the calibration of both streams.
#[derive(Debug, Clone)]
pub struct FrameSample {
    pub sample_id: String,
    pub rgb: image::RgbImage,
    pub depth: Option<DepthMap>,
    pub skeleton: Skeleton3D,
    pub intrinsics_rgb: CameraIntrinsics,
    pub intrinsics_depth: CameraIntrinsics,
}

impl FrameSample {
    pub fn validate(&self) -> Result<()> {
        self.skeleton.validate()?;
        if let Some(d) = &self.depth {
            if d.data.iter().any(|&v| v < 0.0) {
                return Err(Error::Data(format!(
                    "sample {}: negative depth value",
                    self.sample_id
                )));
            }
        }
        Ok(())
    }
}

/// A validated list of sample ids under a dataset root.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: String,
    pub sample_ids: Vec<String>,
    pub calib: Calibration,
    pub joint_names: Vec<String>,
    pub spdh: SPDHConfig,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

impl DatasetManifest {
    pub fn sample_dir(&self, id: &str) -> PathBuf {
        self.root.join("samples").join(id)
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn with_spdh(mut self, spdh: SPDHConfig) -> Self {
        self.spdh = spdh;
        self
    }
}

/// Load and validate a dataset split.
///
/// Ids come back in lexicographic order regardless of file order. Every id
/// must resolve to `rgb.png` and `pose.json` on disk (depth is optional,
/// checked at use); all missing paths are reported in one error.
pub fn load_dataset(root: &Path, split: &str) -> Result<DatasetManifest> {
    let calib: Calibration = read_json(&root.join("calib.json"))?;
    calib.rgb.validate()?;
    calib.depth.validate()?;

    let split_path = root.join("splits").join(format!("{split}.txt"));
    let text = fs::read_to_string(&split_path).map_err(|e| Error::io(&split_path, e))?;
    let ids: BTreeSet<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    let sample_ids: Vec<String> = ids.into_iter().collect();
    if sample_ids.is_empty() {
        log::warn!("split `{split}` at {} lists no samples", split_path.display());
    }

    let mut missing = Vec::new();
    for id in &sample_ids {
        let dir = root.join("samples").join(id);
        for file in ["rgb.png", "pose.json"] {
            if !dir.join(file).is_file() {
                missing.push(format!("{id}/{file}"));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "split `{split}` references missing files: {}",
            missing.join(", ")
        )));
    }

    let joint_names = match sample_ids.first() {
        Some(id) => {
            let skel: Skeleton3D = read_json(&root.join("samples").join(id).join("pose.json"))?;
            skel.joint_names
        }
        None => Skeleton3D::default_names(14),
    };

    Ok(DatasetManifest {
        root: root.to_path_buf(),
        split: split.to_string(),
        sample_ids,
        calib,
        joint_names,
        spdh: SPDHConfig::default(),
    })
}

/// Load one sample by id.
pub fn load_sample(manifest: &DatasetManifest, id: &str) -> Result<FrameSample> {
    let dir = manifest.sample_dir(id);
    let rgb_path = dir.join("rgb.png");
    let rgb = image::open(&rgb_path)?.into_rgb8();
    let depth_path = dir.join("depth.png");
    let depth = if depth_path.is_file() {
        Some(DepthMap::load_png(&depth_path)?)
    } else {
        None
    };
    let skeleton: Skeleton3D = read_json(&dir.join("pose.json"))?;
    skeleton.validate()?;
    let sample = FrameSample {
        sample_id: id.to_string(),
        rgb,
        depth,
        skeleton,
        intrinsics_rgb: manifest.calib.rgb,
        intrinsics_depth: manifest.calib.depth,
    };
    sample.validate()?;
    Ok(sample)
}

/// Write one sample into the dataset layout (used by the synthetic generator).
pub fn save_sample(root: &Path, sample: &FrameSample) -> Result<()> {
    let dir = root.join("samples").join(&sample.sample_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    sample
        .rgb
        .save(dir.join("rgb.png"))
        .map_err(Error::from)?;
    if let Some(d) = &sample.depth {
        d.save_png(&dir.join("depth.png"))?;
    }
    write_json(&dir.join("pose.json"), &sample.skeleton)
}

/// Write `calib.json` for a dataset root.
pub fn save_calibration(root: &Path, calib: &Calibration) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    write_json(&root.join("calib.json"), calib)
}

/// Write a split file (one id per line, LF).
pub fn save_split(root: &Path, name: &str, ids: &[String]) -> Result<()> {
    let dir = root.join("splits");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join(format!("{name}.txt"));
    let mut text = ids.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
