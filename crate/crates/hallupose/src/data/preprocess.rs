//! Resizing and normalization between dataset records and network inputs.
//!
//! RGB resizes bilinearly and standardizes with fixed channel statistics.
//! Depth resizes with nearest-neighbour lookup so invalid (zero) pixels never
//! bleed into valid ones, then normalizes to [0, 1] over the SPDH depth range.
//! Intrinsics rescale with the images; 3D annotations are resolution-free.

use candle_core::{Device, Tensor};

use super::{DepthMap, FrameSample};
use crate::error::Result;
use crate::geometry::{scale_intrinsics, HeatmapStack, SPDHConfig, SPDHTarget};

/// Fixed RGB standardization constants (channel mean/std in [0,1] space).
pub const RGB_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const RGB_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Resize both streams of a sample to the network input size, rescaling each
/// stream's intrinsics to match. The skeleton is metric and stays unchanged.
pub fn resize_to_input(s: &FrameSample, width: usize, height: usize) -> Result<FrameSample> {
    let rgb = image::imageops::resize(
        &s.rgb,
        width as u32,
        height as u32,
        image::imageops::FilterType::Triangle,
    );
    let k_rgb = scale_intrinsics(
        &s.intrinsics_rgb,
        width as f64 / s.rgb.width() as f64,
        height as f64 / s.rgb.height() as f64,
    )?;
    let depth = s.depth.as_ref().map(|d| resize_depth_nearest(d, width, height));
    let k_depth = scale_intrinsics(
        &s.intrinsics_depth,
        width as f64 / s.intrinsics_depth.width,
        height as f64 / s.intrinsics_depth.height,
    )?;
    Ok(FrameSample {
        sample_id: s.sample_id.clone(),
        rgb,
        depth,
        skeleton: s.skeleton.clone(),
        intrinsics_rgb: k_rgb,
        intrinsics_depth: k_depth,
    })
}

fn resize_depth_nearest(d: &DepthMap, width: usize, height: usize) -> DepthMap {
    let mut out = DepthMap::zeros(width, height);
    for y in 0..height {
        let sy = (((y as f64 + 0.5) * d.height as f64 / height as f64) as usize).min(d.height - 1);
        for x in 0..width {
            let sx =
                (((x as f64 + 0.5) * d.width as f64 / width as f64) as usize).min(d.width - 1);
            out.data[y * width + x] = d.data[sy * d.width + sx];
        }
    }
    out
}

/// CHW standardized RGB values.
pub fn rgb_to_chw(rgb: &image::RgbImage) -> Vec<f32> {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut out = vec![0.0f32; 3 * h * w];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            out[c * h * w + i] = (px.0[c] as f32 / 255.0 - RGB_MEAN[c]) / RGB_STD[c];
        }
    }
    out
}

/// Depth in [0,1] over the SPDH range; invalid pixels stay 0.
pub fn depth_to_chw(d: &DepthMap, cfg: &SPDHConfig) -> Vec<f32> {
    let span = (cfg.z_max - cfg.z_min) as f32;
    d.data
        .iter()
        .map(|&v| {
            if v <= 0.0 {
                0.0
            } else {
                ((v - cfg.z_min as f32) / span).clamp(0.0, 1.0)
            }
        })
        .collect()
}

/// A collated training/evaluation batch.
pub struct Batch {
    pub rgb: Tensor,
    pub depth: Option<Tensor>,
    pub gt_uv: Tensor,
    pub gt_uz: Tensor,
    pub mask_uv: Tensor,
    pub mask_uz: Tensor,
    pub sample_ids: Vec<String>,
}

/// Stack preprocessed samples and their encoded targets into tensors. Samples
/// must already be at network input resolution; a sample without depth yields
/// a batch without a depth tensor (an error for stages that need it).
pub fn make_batch(
    items: &[(FrameSample, SPDHTarget)],
    cfg: &SPDHConfig,
    device: &Device,
) -> Result<Batch> {
    let b = items.len();
    let (w, h) = (
        items[0].0.rgb.width() as usize,
        items[0].0.rgb.height() as usize,
    );
    let j = items[0].1.uv.joints;

    let mut rgb = Vec::with_capacity(b * 3 * h * w);
    let mut depth = Vec::new();
    let mut uv = Vec::with_capacity(b * j * h * w);
    let mut uz = Vec::with_capacity(b * j * h * w);
    let mut m_uv = Vec::with_capacity(b * j);
    let mut m_uz = Vec::with_capacity(b * j);
    let mut ids = Vec::with_capacity(b);
    let all_have_depth = items.iter().all(|(s, _)| s.depth.is_some());
    for (s, t) in items {
        rgb.extend_from_slice(&rgb_to_chw(&s.rgb));
        if all_have_depth {
            depth.extend_from_slice(&depth_to_chw(s.depth.as_ref().unwrap(), cfg));
        }
        uv.extend_from_slice(&t.uv.data);
        uz.extend_from_slice(&t.uz.data);
        m_uv.extend(t.mask_uv.iter().map(|&v| v as u8 as f32));
        m_uz.extend(t.mask_uz.iter().map(|&v| v as u8 as f32));
        ids.push(s.sample_id.clone());
    }
    Ok(Batch {
        rgb: Tensor::from_vec(rgb, (b, 3, h, w), device)?,
        depth: if all_have_depth {
            Some(Tensor::from_vec(depth, (b, 1, h, w), device)?)
        } else {
            None
        },
        gt_uv: Tensor::from_vec(uv, (b, j, h, w), device)?,
        gt_uz: Tensor::from_vec(uz, (b, j, h, w), device)?,
        mask_uv: Tensor::from_vec(m_uv, (b, j), device)?,
        mask_uz: Tensor::from_vec(m_uz, (b, j), device)?,
        sample_ids: ids,
    })
}

/// Split model output stacks back into per-sample heatmap stacks.
pub fn tensor_to_stacks(t: &Tensor) -> Result<Vec<HeatmapStack>> {
    let (b, j, h, w) = t.dims4()?;
    let flat = t.flatten_all()?.to_vec1::<f32>()?;
    let n = j * h * w;
    (0..b)
        .map(|i| HeatmapStack::from_data(j, h, w, flat[i * n..(i + 1) * n].to_vec()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project_point, CameraIntrinsics, Skeleton3D};

    fn sample() -> FrameSample {
        let k = CameraIntrinsics::new(200.0, 200.0, 160.0, 128.0, 320.0, 256.0).unwrap();
        let mut depth = DepthMap::zeros(320, 256);
        for v in depth.data.iter_mut() {
            *v = 250.0;
        }
        depth.data[0] = 0.0; // invalid
        FrameSample {
            sample_id: "t".into(),
            rgb: image::RgbImage::new(320, 256),
            depth: Some(depth),
            skeleton: Skeleton3D::fully_visible(
                vec![[30.0, -40.0, 250.0]],
                vec!["j".into()],
            ),
            intrinsics_rgb: k,
            intrinsics_depth: k,
        }
    }

    #[test]
    fn depth_normalization_endpoints() {
        let cfg = SPDHConfig::default();
        let mut d = DepthMap::zeros(2, 1);
        d.data = vec![cfg.z_min as f32, cfg.z_max as f32];
        let n = depth_to_chw(&d, &cfg);
        // z_min maps to 0 when z_min > 0 would too, via the invalid-0 path
        assert_eq!(n[0], 0.0);
        assert_eq!(n[1], 1.0);

        let mut d = DepthMap::zeros(2, 1);
        d.data = vec![0.0, cfg.z_max as f32 + 100.0];
        let n = depth_to_chw(&d, &cfg);
        assert_eq!(n[0], 0.0, "invalid pixel normalizes to 0");
        assert_eq!(n[1], 1.0, "beyond-range clamps to 1");
    }

    #[test]
    fn resized_intrinsics_reproject_consistently() {
        let s = sample();
        let r = resize_to_input(&s, 96, 96).unwrap();
        assert_eq!(r.rgb.width(), 96);
        let p = [30.0, -40.0, 250.0];
        let (u0, v0) = project_point(&s.intrinsics_depth, p).unwrap();
        let (u1, v1) = project_point(&r.intrinsics_depth, p).unwrap();
        assert!((u1 - u0 * 96.0 / 320.0).abs() < 1e-9);
        assert!((v1 - v0 * 96.0 / 256.0).abs() < 1e-9);
        // depth resizing preserves exact values (nearest, no blending)
        let d = r.depth.unwrap();
        assert!(d.data.iter().all(|&v| v == 0.0 || v == 250.0));
    }
}
