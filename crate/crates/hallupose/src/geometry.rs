//! Pinhole camera math and the SPDH heatmap codec.
//!
//! A 3D skeleton (camera frame, centimeters) is encoded into two stacks of
//! per-joint heatmaps:
//!
//! * `uv` — the image plane: a Gaussian peak at the pinhole projection of the
//!   joint.
//! * `uz` — a pseudo-image whose columns match image columns and whose rows
//!   index metric depth, quantized linearly into `hm_height` bins over
//!   `[z_min, z_max)`: a Gaussian peak at `(u, (Z - z_min) / delta_z)`.
//!
//! Gaussian centers snap to the nearest cell before stamping, so every active
//! channel peaks at exactly 1.0 in exactly one cell. Decoding is plain argmax
//! (first maximum in row-major order wins on ties, i.e. the smallest
//! `(row, col)` lexicographically), with the `uz` row read in a ±2 column
//! window around the `u` found in the `uv` map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole camera parameters, in pixels. No distortion model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: f64, height: f64) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Geometry(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(0.0 <= self.cx && self.cx < self.width) {
            return Err(Error::Geometry(format!(
                "principal point cx={} outside [0, {})",
                self.cx, self.width
            )));
        }
        if !(0.0 <= self.cy && self.cy < self.height) {
            return Err(Error::Geometry(format!(
                "principal point cy={} outside [0, {})",
                self.cy, self.height
            )));
        }
        Ok(())
    }
}

/// Project a 3D point (camera frame, cm) to continuous pixel coordinates.
pub fn project_point(k: &CameraIntrinsics, p: [f64; 3]) -> Result<(f64, f64)> {
    let [x, y, z] = p;
    if z <= 0.0 {
        return Err(Error::Geometry(format!(
            "cannot project point with non-positive depth z={z}"
        )));
    }
    Ok((k.fx * x / z + k.cx, k.fy * y / z + k.cy))
}

/// Recover a 3D point (cm) from pixel coordinates and a metric depth.
pub fn backproject_pixel(k: &CameraIntrinsics, u: f64, v: f64, z: f64) -> Result<[f64; 3]> {
    if z <= 0.0 {
        return Err(Error::Geometry(format!(
            "cannot backproject with non-positive depth z={z}"
        )));
    }
    Ok([(u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z])
}

/// Rescale intrinsics for an image resized by `(sx, sy)`.
pub fn scale_intrinsics(k: &CameraIntrinsics, sx: f64, sy: f64) -> Result<CameraIntrinsics> {
    if sx <= 0.0 || sy <= 0.0 {
        return Err(Error::Geometry(format!(
            "scale factors must be positive, got sx={sx} sy={sy}"
        )));
    }
    Ok(CameraIntrinsics {
        fx: k.fx * sx,
        fy: k.fy * sy,
        cx: k.cx * sx,
        cy: k.cy * sy,
        width: k.width * sx,
        height: k.height * sy,
    })
}

/// A 3D skeleton in the camera frame, centimeters, with per-space visibility.
///
/// `mask_uv[j]` / `mask_uz[j]` mark whether joint `j` carries a valid label in
/// the image plane / depth space. Joints masked out in both spaces may hold
/// arbitrary coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton3D {
    pub joints: Vec<[f64; 3]>,
    pub joint_names: Vec<String>,
    pub mask_uv: Vec<bool>,
    pub mask_uz: Vec<bool>,
}

/// The default 14-joint schema (head, neck, then right/left arm and leg chains).
pub const JOINT_NAMES_14: [&str; 14] = [
    "head",
    "neck",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_hip",
    "right_knee",
    "right_ankle",
    "left_hip",
    "left_knee",
    "left_ankle",
];

/// Left/right joint index pairs of [`JOINT_NAMES_14`], swapped on horizontal flip.
pub const FLIP_PAIRS_14: [(usize, usize); 6] = [(2, 5), (3, 6), (4, 7), (8, 11), (9, 12), (10, 13)];

impl Skeleton3D {
    /// A skeleton with every joint marked visible in both spaces.
    pub fn fully_visible(joints: Vec<[f64; 3]>, joint_names: Vec<String>) -> Self {
        let n = joints.len();
        Skeleton3D {
            joints,
            joint_names,
            mask_uv: vec![true; n],
            mask_uz: vec![true; n],
        }
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.joints.len();
        if self.joint_names.len() != j || self.mask_uv.len() != j || self.mask_uz.len() != j {
            return Err(Error::Geometry(format!(
                "skeleton field lengths disagree: joints={j} names={} mask_uv={} mask_uz={}",
                self.joint_names.len(),
                self.mask_uv.len(),
                self.mask_uz.len()
            )));
        }
        for (i, p) in self.joints.iter().enumerate() {
            if (self.mask_uv[i] || self.mask_uz[i]) && p[2] <= 0.0 {
                return Err(Error::Geometry(format!(
                    "joint {i} marked visible but has non-positive depth Z={}",
                    p[2]
                )));
            }
        }
        Ok(())
    }

    pub fn default_names(n: usize) -> Vec<String> {
        if n == 14 {
            JOINT_NAMES_14.iter().map(|s| s.to_string()).collect()
        } else {
            (0..n).map(|i| format!("joint_{i:02}")).collect()
        }
    }
}

/// Geometry of the SPDH representation: heatmap size, Gaussian widths and the
/// depth quantization range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SPDHConfig {
    pub hm_width: usize,
    pub hm_height: usize,
    pub sigma_uv: f64,
    pub sigma_uz: f64,
    /// Near end of the quantized depth range, cm.
    pub z_min: f64,
    /// Far end of the quantized depth range, cm (exclusive).
    pub z_max: f64,
    /// Minimum peak activation for a decoded joint to count as present.
    pub peak_threshold: f32,
}

impl Default for SPDHConfig {
    fn default() -> Self {
        SPDHConfig {
            hm_width: 256,
            hm_height: 256,
            sigma_uv: 2.0,
            sigma_uz: 2.0,
            z_min: 0.0,
            z_max: 500.0,
            peak_threshold: 0.3,
        }
    }
}

impl SPDHConfig {
    /// Depth covered by one `uz` row, cm.
    pub fn delta_z(&self) -> f64 {
        (self.z_max - self.z_min) / self.hm_height as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.hm_width == 0 || self.hm_height == 0 {
            return Err(Error::Config("heatmap dimensions must be positive".into()));
        }
        if !(self.sigma_uv > 0.0 && self.sigma_uz > 0.0) {
            return Err(Error::Config(format!(
                "gaussian sigmas must be positive, got sigma_uv={} sigma_uz={}",
                self.sigma_uv, self.sigma_uz
            )));
        }
        if !(self.z_min >= 0.0 && self.z_max > self.z_min) {
            return Err(Error::Config(format!(
                "depth range must satisfy 0 <= z_min < z_max, got [{}, {}]",
                self.z_min, self.z_max
            )));
        }
        if !(self.peak_threshold >= 0.0) {
            return Err(Error::Config("peak_threshold must be non-negative".into()));
        }
        Ok(())
    }

    /// Analytic ceiling on the mean 3D error of `decode(encode(skeleton))` for
    /// a fully visible skeleton: pixel rounding backprojected at the far end of
    /// the depth range, plus depth-bin rounding, plus the half-bin bias of the
    /// bin-center decode rule.
    pub fn roundtrip_bound_cm(&self, k: &CameraIntrinsics) -> f64 {
        let dz = self.delta_z();
        let e_px = self.z_max * (0.5 / k.fx).hypot(0.5 / k.fy);
        ((dz / 2.0).powi(2) + e_px * e_px).sqrt() + dz / 2.0
    }
}

/// A stack of `joints` single-channel heatmaps, row-major `[j][row][col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    pub joints: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl HeatmapStack {
    pub fn zeros(joints: usize, height: usize, width: usize) -> Self {
        HeatmapStack {
            joints,
            height,
            width,
            data: vec![0.0; joints * height * width],
        }
    }

    pub fn from_data(joints: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != joints * height * width {
            return Err(Error::Shape(format!(
                "heatmap stack expects {} values, got {}",
                joints * height * width,
                data.len()
            )));
        }
        Ok(HeatmapStack {
            joints,
            height,
            width,
            data,
        })
    }

    pub fn channel(&self, j: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[j * n..(j + 1) * n]
    }

    pub fn channel_mut(&mut self, j: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[j * n..(j + 1) * n]
    }

    /// Maximum value of channel `j` and its location, first-in-row-major-order
    /// on ties (the smallest `(row, col)` lexicographically).
    pub fn argmax(&self, j: usize) -> (f32, usize, usize) {
        let ch = self.channel(j);
        let mut best = f32::NEG_INFINITY;
        let mut best_idx = 0usize;
        for (i, &v) in ch.iter().enumerate() {
            if v > best {
                best = v;
                best_idx = i;
            }
        }
        (best, best_idx / self.width, best_idx % self.width)
    }
}

/// Paired uv/uz heatmap stacks plus the per-joint masks that were in effect
/// when they were encoded. Masked-out channels are all-zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SPDHTarget {
    pub uv: HeatmapStack,
    pub uz: HeatmapStack,
    pub mask_uv: Vec<bool>,
    pub mask_uz: Vec<bool>,
}

/// A single-channel heatmap holding a Gaussian bump.
///
/// The value at cell `(r, c)` is `exp(-((c-col)^2 + (r-row)^2) / (2 sigma^2))`;
/// cells farther than 3 sigma from the center along either axis are left at
/// zero. Centers may lie outside the map, leaving a truncated tail or nothing.
pub fn gaussian_peak(center: (f64, f64), sigma: f64, height: usize, width: usize) -> Vec<f32> {
    let mut buf = vec![0.0f32; height * width];
    stamp_gaussian(&mut buf, height, width, center.0, center.1, sigma);
    buf
}

fn stamp_gaussian(buf: &mut [f32], height: usize, width: usize, col: f64, row: f64, sigma: f64) {
    let reach = (3.0 * sigma).ceil();
    let c0 = ((col - reach).floor().max(0.0)) as i64;
    let c1 = ((col + reach).ceil().min(width as f64 - 1.0)) as i64;
    let r0 = ((row - reach).floor().max(0.0)) as i64;
    let r1 = ((row + reach).ceil().min(height as f64 - 1.0)) as i64;
    if c1 < c0 || r1 < r0 {
        return;
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    for r in r0..=r1 {
        let dr = r as f64 - row;
        if dr.abs() > reach {
            continue;
        }
        for c in c0..=c1 {
            let dc = c as f64 - col;
            if dc.abs() > reach {
                continue;
            }
            let v = (-(dc * dc + dr * dr) * inv).exp();
            buf[r as usize * width + c as usize] = v as f32;
        }
    }
}

/// Per-space visibility of each joint under the pinhole model `k` (already at
/// heatmap resolution) and the depth quantization of `cfg`.
///
/// A joint is uv-visible when it projects inside the heatmap and has positive
/// depth; it is uz-visible when its column is inside the heatmap and its depth
/// lies in `[z_min, z_max)`. This is purely geometric; it ignores the
/// skeleton's own annotation masks.
pub fn compute_visibility(
    skel: &Skeleton3D,
    k: &CameraIntrinsics,
    cfg: &SPDHConfig,
) -> (Vec<bool>, Vec<bool>) {
    let mut mask_uv = vec![false; skel.num_joints()];
    let mut mask_uz = vec![false; skel.num_joints()];
    for (j, p) in skel.joints.iter().enumerate() {
        let z = p[2];
        if z <= 0.0 {
            continue;
        }
        let (u, v) = match project_point(k, *p) {
            Ok(uv) => uv,
            Err(_) => continue,
        };
        let u_in = u >= 0.0 && u < cfg.hm_width as f64;
        let v_in = v >= 0.0 && v < cfg.hm_height as f64;
        mask_uv[j] = u_in && v_in;
        mask_uz[j] = u_in && z >= cfg.z_min && z < cfg.z_max;
    }
    (mask_uv, mask_uz)
}

/// Snap a continuous coordinate to the nearest cell index, clamped to the map.
fn snap(x: f64, len: usize) -> usize {
    (x.round().max(0.0) as usize).min(len - 1)
}

/// Encode a skeleton into SPDH heatmap stacks.
///
/// `k` must already be scaled to heatmap resolution. The effective mask of a
/// joint is its annotation mask AND its geometric visibility; channels of
/// masked-out joints are left all-zero.
pub fn encode_spdh(skel: &Skeleton3D, k: &CameraIntrinsics, cfg: &SPDHConfig) -> SPDHTarget {
    let j = skel.num_joints();
    let mut uv = HeatmapStack::zeros(j, cfg.hm_height, cfg.hm_width);
    let mut uz = HeatmapStack::zeros(j, cfg.hm_height, cfg.hm_width);
    let (vis_uv, vis_uz) = compute_visibility(skel, k, cfg);
    let mask_uv: Vec<bool> = (0..j).map(|i| skel.mask_uv[i] && vis_uv[i]).collect();
    let mask_uz: Vec<bool> = (0..j).map(|i| skel.mask_uz[i] && vis_uz[i]).collect();
    let dz = cfg.delta_z();
    for i in 0..j {
        if !(mask_uv[i] || mask_uz[i]) {
            continue;
        }
        let (u, v) = project_point(k, skel.joints[i]).expect("visible joint has positive depth");
        let col = snap(u, cfg.hm_width) as f64;
        if mask_uv[i] {
            let row = snap(v, cfg.hm_height) as f64;
            stamp_gaussian(
                uv.channel_mut(i),
                cfg.hm_height,
                cfg.hm_width,
                col,
                row,
                cfg.sigma_uv,
            );
        }
        if mask_uz[i] {
            let zbin = (skel.joints[i][2] - cfg.z_min) / dz;
            let zrow = snap(zbin, cfg.hm_height) as f64;
            stamp_gaussian(
                uz.channel_mut(i),
                cfg.hm_height,
                cfg.hm_width,
                col,
                zrow,
                cfg.sigma_uz,
            );
        }
    }
    SPDHTarget {
        uv,
        uz,
        mask_uv,
        mask_uz,
    }
}

/// Decode predicted SPDH stacks back into a metric 3D skeleton.
///
/// Per joint: `(u, v)` comes from the argmax of the `uv` channel; the depth row
/// comes from the argmax of the `uz` channel restricted to columns
/// `[u-2, u+2]`, falling back to the channel-wide argmax when the windowed
/// maximum is below `peak_threshold`. Depth is reconstructed at the bin center,
/// `z_min + (row + 0.5) * delta_z`. A joint whose `uv` peak or chosen `uz` peak
/// is below `peak_threshold` is reported invisible, never fabricated.
pub fn decode_spdh(
    uv: &HeatmapStack,
    uz: &HeatmapStack,
    k: &CameraIntrinsics,
    cfg: &SPDHConfig,
) -> Result<Skeleton3D> {
    if uv.joints != uz.joints || uv.height != uz.height || uv.width != uz.width {
        return Err(Error::Shape(format!(
            "uv stack {}x{}x{} does not match uz stack {}x{}x{}",
            uv.joints, uv.height, uv.width, uz.joints, uz.height, uz.width
        )));
    }
    let j = uv.joints;
    let dz = cfg.delta_z();
    let mut skel = Skeleton3D {
        joints: vec![[0.0; 3]; j],
        joint_names: Skeleton3D::default_names(j),
        mask_uv: vec![false; j],
        mask_uz: vec![false; j],
    };
    for i in 0..j {
        let (uv_max, v_row, u_col) = uv.argmax(i);
        if uv_max < cfg.peak_threshold {
            continue;
        }
        let (uz_max, z_row) = argmax_in_columns(uz, i, u_col.saturating_sub(2), u_col + 2);
        let (uz_max, z_row) = if uz_max < cfg.peak_threshold {
            let (m, r, _) = uz.argmax(i);
            (m, r)
        } else {
            (uz_max, z_row)
        };
        if uz_max < cfg.peak_threshold {
            continue;
        }
        let z = cfg.z_min + (z_row as f64 + 0.5) * dz;
        skel.joints[i] = backproject_pixel(k, u_col as f64, v_row as f64, z)?;
        skel.mask_uv[i] = true;
        skel.mask_uz[i] = true;
    }
    Ok(skel)
}

/// Argmax of channel `j` over columns `[c_lo, c_hi]` (inclusive, clamped),
/// returning `(max, row)`. Ties resolve to the smallest `(row, col)`.
fn argmax_in_columns(stack: &HeatmapStack, j: usize, c_lo: usize, c_hi: usize) -> (f32, usize) {
    let c_hi = c_hi.min(stack.width - 1);
    let ch = stack.channel(j);
    let mut best = f32::NEG_INFINITY;
    let mut best_row = 0usize;
    for r in 0..stack.height {
        let row = &ch[r * stack.width..(r + 1) * stack.width];
        for c in c_lo..=c_hi {
            if row[c] > best {
                best = row[c];
                best_row = r;
            }
        }
    }
    (best, best_row)
}
