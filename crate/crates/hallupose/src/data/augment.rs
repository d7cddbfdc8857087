//! Geometric and depth augmentation with exact label synchronization.
//!
//! Images are warped by inverse-mapped resampling (bilinear for RGB, nearest
//! for depth), but heatmap targets are never warped: the skeleton's projected
//! joints go through the same affine map analytically and the target is
//! re-encoded from them, so peaks stay exact. A horizontal flip also swaps
//! left/right joint channels.
//!
//! Depth jitter (`z_jitter`, stage 1 only) translates every valid depth pixel
//! and slides each joint along its viewing ray to the shifted depth, which
//! moves the uz rows while leaving projections — and therefore the uv maps —
//! untouched.

use rand::Rng;

use super::{DepthMap, FrameSample};
use crate::error::{Error, Result};
use crate::geometry::{
    backproject_pixel, encode_spdh, project_point, SPDHConfig, SPDHTarget, Skeleton3D,
};

pub const MAX_ROT_DEG: f64 = 5.0;
pub const MAX_TX_FRAC: f64 = 0.15;
pub const MAX_TY_FRAC: f64 = 0.02;
pub const MAX_Z_JITTER_CM: f64 = 30.0;

/// One draw of augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub rot_deg: f64,
    pub tx_frac: f64,
    pub ty_frac: f64,
    pub hflip: bool,
    /// Stage-1 only; forced to zero for stage 2.
    pub z_jitter_cm: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            rot_deg: 0.0,
            tx_frac: 0.0,
            ty_frac: 0.0,
            hflip: false,
            z_jitter_cm: 0.0,
        }
    }

    /// Draw parameters for the given training stage.
    pub fn sample(rng: &mut impl Rng, stage: u8) -> Self {
        AugmentParams {
            rot_deg: rng.gen_range(-MAX_ROT_DEG..=MAX_ROT_DEG),
            tx_frac: rng.gen_range(-MAX_TX_FRAC..=MAX_TX_FRAC),
            ty_frac: rng.gen_range(-MAX_TY_FRAC..=MAX_TY_FRAC),
            hflip: rng.gen_bool(0.5),
            z_jitter_cm: if stage == 1 {
                rng.gen_range(-MAX_Z_JITTER_CM..=MAX_Z_JITTER_CM)
            } else {
                0.0
            },
        }
    }

    pub fn validate(&self, stage: u8) -> Result<()> {
        if self.rot_deg.abs() > MAX_ROT_DEG
            || self.tx_frac.abs() > MAX_TX_FRAC
            || self.ty_frac.abs() > MAX_TY_FRAC
            || self.z_jitter_cm.abs() > MAX_Z_JITTER_CM
        {
            return Err(Error::Config(format!(
                "augmentation parameters out of range: {self:?}"
            )));
        }
        if stage != 1 && self.z_jitter_cm != 0.0 {
            return Err(Error::Config(
                "depth jitter is a stage-1 augmentation; stage 2 must use z_jitter_cm = 0".into(),
            ));
        }
        Ok(())
    }

    pub fn is_identity_geometry(&self) -> bool {
        self.rot_deg == 0.0 && self.tx_frac == 0.0 && self.ty_frac == 0.0 && !self.hflip
    }
}

/// Row-major 2x3 affine map of pixel coordinates.
#[derive(Debug, Clone, Copy)]
struct Affine {
    m: [f64; 6],
}

impl Affine {
    fn identity() -> Self {
        Affine {
            m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        }
    }

    fn apply(&self, u: f64, v: f64) -> (f64, f64) {
        (
            self.m[0] * u + self.m[1] * v + self.m[2],
            self.m[3] * u + self.m[4] * v + self.m[5],
        )
    }

    /// self ∘ other (apply `other` first).
    fn compose(&self, other: &Affine) -> Affine {
        let a = &self.m;
        let b = &other.m;
        Affine {
            m: [
                a[0] * b[0] + a[1] * b[3],
                a[0] * b[1] + a[1] * b[4],
                a[0] * b[2] + a[1] * b[5] + a[2],
                a[3] * b[0] + a[4] * b[3],
                a[3] * b[1] + a[4] * b[4],
                a[3] * b[2] + a[4] * b[5] + a[5],
            ],
        }
    }

    fn inverse(&self) -> Affine {
        let [a, b, c, d, e, f] = self.m;
        let det = a * e - b * d;
        let (ia, ib, id, ie) = (e / det, -b / det, -d / det, a / det);
        Affine {
            m: [ia, ib, -(ia * c + ib * f), id, ie, -(id * c + ie * f)],
        }
    }
}

/// Rotation about the image center, then translation, then optional flip.
fn build_transform(p: &AugmentParams, width: usize, height: usize) -> Affine {
    let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    let th = p.rot_deg.to_radians();
    let (s, c) = (th.sin(), th.cos());
    let rot = Affine {
        m: [
            c,
            -s,
            cx - c * cx + s * cy,
            s,
            c,
            cy - s * cx - c * cy,
        ],
    };
    let trans = Affine {
        m: [
            1.0,
            0.0,
            p.tx_frac * width as f64,
            0.0,
            1.0,
            p.ty_frac * height as f64,
        ],
    };
    let mut t = trans.compose(&rot);
    if p.hflip {
        let flip = Affine {
            m: [-1.0, 0.0, width as f64 - 1.0, 0.0, 1.0, 0.0],
        };
        t = flip.compose(&t);
    }
    t
}

fn warp_rgb(img: &image::RgbImage, inv: &Affine) -> image::RgbImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let (su, sv) = inv.apply(x as f64, y as f64);
            let px = sample_bilinear(img, su, sv);
            out.put_pixel(x as u32, y as u32, px);
        }
    }
    out
}

fn sample_bilinear(img: &image::RgbImage, u: f64, v: f64) -> image::Rgb<u8> {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let u0 = u.floor();
    let v0 = v.floor();
    let (fu, fv) = (u - u0, v - v0);
    let mut acc = [0.0f64; 3];
    for (dy, wy) in [(0i64, 1.0 - fv), (1, fv)] {
        for (dx, wx) in [(0i64, 1.0 - fu), (1, fu)] {
            let (xi, yi) = (u0 as i64 + dx, v0 as i64 + dy);
            let weight = wx * wy;
            if weight == 0.0 {
                continue;
            }
            if xi >= 0 && xi < w && yi >= 0 && yi < h {
                let p = img.get_pixel(xi as u32, yi as u32);
                for c in 0..3 {
                    acc[c] += weight * p.0[c] as f64;
                }
            }
        }
    }
    image::Rgb([
        acc[0].round().clamp(0.0, 255.0) as u8,
        acc[1].round().clamp(0.0, 255.0) as u8,
        acc[2].round().clamp(0.0, 255.0) as u8,
    ])
}

fn warp_depth(d: &DepthMap, inv: &Affine) -> DepthMap {
    let mut out = DepthMap::zeros(d.width, d.height);
    for y in 0..d.height {
        for x in 0..d.width {
            let (su, sv) = inv.apply(x as f64, y as f64);
            let (xi, yi) = (su.round() as i64, sv.round() as i64);
            if xi >= 0 && (xi as usize) < d.width && yi >= 0 && (yi as usize) < d.height {
                out.data[y * d.width + x] = d.data[yi as usize * d.width + xi as usize];
            }
        }
    }
    out
}

/// Left/right joint index pairs derived from `left_*`/`right_*` name prefixes.
fn flip_pairs(names: &[String]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (i, name) in names.iter().enumerate() {
        if let Some(rest) = name.strip_prefix("left_") {
            if let Some(j) = names.iter().position(|n| n == &format!("right_{rest}")) {
                pairs.push((j, i));
            }
        }
    }
    pairs
}

/// Apply the geometric augmentation to a sample (at network-input resolution)
/// and regenerate its SPDH target from the transformed joint projections.
pub fn augment_sample(
    s: &FrameSample,
    p: &AugmentParams,
    cfg: &SPDHConfig,
) -> Result<(FrameSample, SPDHTarget)> {
    p.validate(if p.z_jitter_cm == 0.0 { 2 } else { 1 })?;
    let k = s.intrinsics_depth;
    if p.is_identity_geometry() {
        let target = encode_spdh(&s.skeleton, &k, cfg);
        return Ok((s.clone(), target));
    }

    let (w, h) = (s.rgb.width() as usize, s.rgb.height() as usize);
    let fwd = build_transform(p, w, h);
    let inv = fwd.inverse();

    let rgb = warp_rgb(&s.rgb, &inv);
    let depth = s.depth.as_ref().map(|d| warp_depth(d, &inv));

    // transform joints analytically: project, map, backproject at the same Z
    let mut skeleton = s.skeleton.clone();
    for (i, joint) in skeleton.joints.iter_mut().enumerate() {
        let z = joint[2];
        if z <= 0.0 {
            continue;
        }
        let (u, v) = project_point(&k, *joint)?;
        let (u2, v2) = fwd.apply(u, v);
        *joint = backproject_pixel(&k, u2, v2, z)?;
        let _ = i;
    }
    if p.hflip {
        for (a, b) in flip_pairs(&skeleton.joint_names) {
            skeleton.joints.swap(a, b);
            skeleton.mask_uv.swap(a, b);
            skeleton.mask_uz.swap(a, b);
        }
    }

    let target = encode_spdh(&skeleton, &k, cfg);
    Ok((
        FrameSample {
            sample_id: s.sample_id.clone(),
            rgb,
            depth,
            skeleton,
            intrinsics_rgb: s.intrinsics_rgb,
            intrinsics_depth: s.intrinsics_depth,
        },
        target,
    ))
}

/// Translate the depth image and slide the skeleton along viewing rays by
/// `delta_cm`. The uv target is carried over unchanged; uz rows re-encode at
/// the shifted depth and the uz mask follows the new depth range membership.
pub fn z_jitter(
    s: &FrameSample,
    target: &SPDHTarget,
    delta_cm: f64,
    cfg: &SPDHConfig,
) -> Result<(FrameSample, SPDHTarget)> {
    if delta_cm.abs() > MAX_Z_JITTER_CM {
        return Err(Error::Config(format!(
            "z jitter {delta_cm} cm exceeds the ±{MAX_Z_JITTER_CM} cm range"
        )));
    }
    if delta_cm == 0.0 {
        return Ok((s.clone(), target.clone()));
    }
    let depth = s.depth.as_ref().map(|d| {
        let mut out = d.clone();
        for v in out.data.iter_mut() {
            if *v > 0.0 {
                *v = (*v + delta_cm as f32).max(0.0);
            }
        }
        out
    });
    let mut skeleton = s.skeleton.clone();
    for joint in skeleton.joints.iter_mut() {
        let z = joint[2];
        if z <= 0.0 {
            continue;
        }
        let z2 = z + delta_cm;
        if z2 <= 0.0 {
            // slid behind the camera; keep the point but it can no longer be
            // encoded (visibility will mask it out)
            joint[2] = z2;
            continue;
        }
        let scale = z2 / z;
        joint[0] *= scale;
        joint[1] *= scale;
        joint[2] = z2;
    }
    let mut new_target = encode_spdh(&skeleton, &s.intrinsics_depth, cfg);
    // projections are unchanged by construction; keep the uv stack bit-exact
    new_target.uv = target.uv.clone();
    new_target.mask_uv = target.mask_uv.clone();
    Ok((
        FrameSample {
            sample_id: s.sample_id.clone(),
            rgb: s.rgb.clone(),
            depth,
            skeleton,
            intrinsics_rgb: s.intrinsics_rgb,
            intrinsics_depth: s.intrinsics_depth,
        },
        new_target,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, Skeleton3D};

    fn net_sample() -> FrameSample {
        let k = CameraIntrinsics::new(96.0, 96.0, 48.0, 48.0, 96.0, 96.0).unwrap();
        let mut rgb = image::RgbImage::new(96, 96);
        for (i, px) in rgb.pixels_mut().enumerate() {
            px.0 = [(i % 251) as u8, (i % 127) as u8, (i % 83) as u8];
        }
        let mut depth = DepthMap::zeros(96, 96);
        for (i, v) in depth.data.iter_mut().enumerate() {
            *v = 200.0 + (i % 50) as f32;
        }
        let joints = vec![
            [20.0, -30.0, 250.0],
            [18.0, -10.0, 252.0],
            [-25.0, 14.0, 300.0],
            [28.0, 16.0, 310.0],
        ];
        let names = vec![
            "head".to_string(),
            "neck".to_string(),
            "right_wrist".to_string(),
            "left_wrist".to_string(),
        ];
        FrameSample {
            sample_id: "a".into(),
            rgb,
            depth: Some(depth),
            skeleton: Skeleton3D::fully_visible(joints, names),
            intrinsics_rgb: k,
            intrinsics_depth: k,
        }
    }

    fn cfg() -> SPDHConfig {
        SPDHConfig {
            hm_width: 96,
            hm_height: 96,
            ..SPDHConfig::default()
        }
    }

    #[test]
    fn identity_params_are_a_noop() {
        let s = net_sample();
        let (out, target) = augment_sample(&s, &AugmentParams::identity(), &cfg()).unwrap();
        assert_eq!(out.rgb.as_raw(), s.rgb.as_raw());
        assert_eq!(out.depth, s.depth);
        assert_eq!(out.skeleton, s.skeleton);
        assert_eq!(target, encode_spdh(&s.skeleton, &s.intrinsics_depth, &cfg()));
    }

    #[test]
    fn out_of_range_params_are_rejected() {
        let s = net_sample();
        let mut p = AugmentParams::identity();
        p.rot_deg = 9.0;
        assert!(augment_sample(&s, &p, &cfg()).is_err());
        let mut p = AugmentParams::identity();
        p.tx_frac = 0.2;
        assert!(augment_sample(&s, &p, &cfg()).is_err());
    }

    #[test]
    fn hflip_twice_restores_labels_and_swaps_channels() {
        let s = net_sample();
        let mut p = AugmentParams::identity();
        p.hflip = true;
        let (once, _) = augment_sample(&s, &p, &cfg()).unwrap();
        // one flip swaps the left/right wrist data
        assert_eq!(once.skeleton.joints[2][2], s.skeleton.joints[3][2]);
        assert_eq!(once.skeleton.joints[3][2], s.skeleton.joints[2][2]);
        let (twice, _) = augment_sample(&once, &p, &cfg()).unwrap();
        for (a, b) in twice.skeleton.joints.iter().zip(&s.skeleton.joints) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1e-9, "{a:?} vs {b:?}");
            }
        }
        assert_eq!(twice.rgb.as_raw(), s.rgb.as_raw());
    }

    #[test]
    fn rotation_composes_to_identity_on_labels() {
        let s = net_sample();
        let mut plus = AugmentParams::identity();
        plus.rot_deg = 5.0;
        let mut minus = AugmentParams::identity();
        minus.rot_deg = -5.0;
        let (a, _) = augment_sample(&s, &plus, &cfg()).unwrap();
        let (b, _) = augment_sample(&a, &minus, &cfg()).unwrap();
        let k = s.intrinsics_depth;
        for (ja, jb) in b.skeleton.joints.iter().zip(&s.skeleton.joints) {
            let (ua, va) = project_point(&k, *ja).unwrap();
            let (ub, vb) = project_point(&k, *jb).unwrap();
            assert!(
                (ua - ub).abs() < 1e-9 && (va - vb).abs() < 1e-9,
                "labels did not return: ({ua},{va}) vs ({ub},{vb})"
            );
        }
    }

    #[test]
    fn augmented_target_peaks_match_reencoded_skeleton() {
        let s = net_sample();
        let mut p = AugmentParams::identity();
        p.rot_deg = 4.0;
        p.tx_frac = 0.1;
        p.ty_frac = -0.01;
        p.hflip = true;
        let (out, target) = augment_sample(&s, &p, &cfg()).unwrap();
        let re = encode_spdh(&out.skeleton, &out.intrinsics_depth, &cfg());
        assert_eq!(target, re, "labels must be analytic, never interpolated");
    }

    #[test]
    fn z_jitter_identity_involution_and_mask_flip() {
        let s = net_sample();
        let c = cfg();
        let target = encode_spdh(&s.skeleton, &s.intrinsics_depth, &c);

        let (s0, t0) = z_jitter(&s, &target, 0.0, &c).unwrap();
        assert_eq!(s0.skeleton, s.skeleton);
        assert_eq!(t0, target);

        let (s1, t1) = z_jitter(&s, &target, 17.0, &c).unwrap();
        assert_eq!(t1.uv, target.uv, "uv targets must not move");
        assert_ne!(t1.uz, target.uz);
        let (_s2, t2) = z_jitter(&s1, &t1, -17.0, &c).unwrap();
        assert_eq!(t2, target, "jitter must be an involution on targets");

        // a joint near z_max leaves the encodable range and gets masked out
        let mut far = s.clone();
        far.skeleton.joints[0] = [0.0, 0.0, c.z_max - 10.0];
        let far_target = encode_spdh(&far.skeleton, &far.intrinsics_depth, &c);
        assert!(far_target.mask_uz[0]);
        let (_, t3) = z_jitter(&far, &far_target, 30.0, &c).unwrap();
        assert!(!t3.mask_uz[0], "mask_uz must flip to 0 beyond z_max");
        assert!(t3.mask_uv[0], "uv visibility is unaffected");

        // jitter is rejected outside its range and in stage 2
        assert!(z_jitter(&s, &target, 31.0, &c).is_err());
        let mut p = AugmentParams::identity();
        p.z_jitter_cm = 5.0;
        assert!(p.validate(2).is_err());
        assert!(p.validate(1).is_ok());
    }
}
