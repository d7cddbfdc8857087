//! Deterministic synthetic RGB-D generator.
//!
//! Renders a 14-joint articulated stick figure as a union of capsules:
//! depth by per-pixel ray casting with a z-buffer, RGB as a normal-shaded
//! view of the same geometry over a procedurally textured background. Joint
//! annotations come straight from the sampled skeleton, so labels are exact
//! by construction. A fixed seed reproduces the dataset byte for byte.

use std::path::Path;

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{save_calibration, save_sample, save_split, Calibration, DepthMap, FrameSample};
use crate::error::{Error, Result};
use crate::geometry::{project_point, CameraIntrinsics, Skeleton3D, JOINT_NAMES_14};

/// Upper bound on any capsule radius the generator emits, cm.
pub const MAX_CAPSULE_RADIUS_CM: f64 = 11.0;

#[derive(Debug, Clone, Copy)]
pub struct SyntheticConfig {
    pub image_width: u32,
    pub image_height: u32,
    /// Focal length in pixels (same for x and y).
    pub focal: f64,
    /// Range the figure's root depth is drawn from, cm.
    pub root_z: (f64, f64),
    /// Depth annotation validity range, cm; joints outside are masked out of
    /// the uz space.
    pub z_valid: (f64, f64),
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            image_width: 320,
            image_height: 256,
            focal: 200.0,
            root_z: (150.0, 450.0),
            z_valid: (0.0, 500.0),
        }
    }
}

impl SyntheticConfig {
    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: self.focal,
            fy: self.focal,
            cx: self.image_width as f64 / 2.0,
            cy: self.image_height as f64 / 2.0,
            width: self.image_width as f64,
            height: self.image_height as f64,
        }
    }
}

struct Capsule {
    a: Vector3<f64>,
    b: Vector3<f64>,
    radius: f64,
    albedo: [f64; 3],
}

/// Joint indices in [`JOINT_NAMES_14`] order.
mod joint {
    pub const HEAD: usize = 0;
    pub const NECK: usize = 1;
    pub const R_SHOULDER: usize = 2;
    pub const R_ELBOW: usize = 3;
    pub const R_WRIST: usize = 4;
    pub const L_SHOULDER: usize = 5;
    pub const L_ELBOW: usize = 6;
    pub const L_WRIST: usize = 7;
    pub const R_HIP: usize = 8;
    pub const R_KNEE: usize = 9;
    pub const R_ANKLE: usize = 10;
    pub const L_HIP: usize = 11;
    pub const L_KNEE: usize = 12;
    pub const L_ANKLE: usize = 13;
}

/// Generate `n` samples under `root` and write the requested splits, which
/// partition the samples in generation order and must cover all of them.
pub fn generate_synthetic(
    root: &Path,
    n: usize,
    seed: u64,
    splits: &[(String, usize)],
    cfg: &SyntheticConfig,
) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    let split_plan: Vec<(String, usize)> = if splits.is_empty() {
        vec![("all".to_string(), n)]
    } else {
        splits.to_vec()
    };
    let total: usize = split_plan.iter().map(|(_, c)| c).sum();
    if total != n {
        return Err(Error::Config(format!(
            "split sizes sum to {total} but {n} samples were requested"
        )));
    }

    let k = cfg.intrinsics();
    save_calibration(root, &Calibration { rgb: k, depth: k })?;

    let mut ids: Vec<String> = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("s{i:06}");
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, i as u64));
        let sample = render_sample(&id, &mut rng, cfg);
        save_sample(root, &sample)?;
        ids.push(id);
    }

    let mut offset = 0usize;
    for (name, count) in &split_plan {
        save_split(root, name, &ids[offset..offset + count])?;
        offset += count;
    }
    Ok(())
}

fn mix(seed: u64, index: u64) -> u64 {
    // splitmix64 over the (seed, index) pair
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Draw a bounded random pose and return camera-frame joints plus capsules.
fn sample_figure(
    rng: &mut ChaCha8Rng,
    cfg: &SyntheticConfig,
) -> (Vec<Vector3<f64>>, Vec<Capsule>, Vec<Vec<usize>>) {
    use joint::*;
    let deg = std::f64::consts::PI / 180.0;
    let scale = rng.gen_range(0.92..1.08);
    let shoulder_half = 19.0 * scale;
    let hip_half = 15.0 * scale;
    let torso = 50.0 * scale;
    let neck_head = 24.0 * scale;
    let upper_arm = 28.0 * scale;
    let forearm = 26.0 * scale;
    let thigh = 42.0 * scale;
    let shin = 40.0 * scale;

    // body frame: origin at mid-hip, Y down (matching the camera), Z forward
    let mut joints = vec![Vector3::zeros(); 14];
    joints[NECK] = Vector3::new(0.0, -torso, 0.0);
    joints[HEAD] = Vector3::new(0.0, -torso - neck_head, 0.0);
    joints[R_SHOULDER] = joints[NECK] + Vector3::new(-shoulder_half, 2.0, 0.0);
    joints[L_SHOULDER] = joints[NECK] + Vector3::new(shoulder_half, 2.0, 0.0);
    joints[R_HIP] = Vector3::new(-hip_half, 0.0, 0.0);
    joints[L_HIP] = Vector3::new(hip_half, 0.0, 0.0);

    let mut limb = |root: Vector3<f64>,
                    side: f64,
                    len_a: f64,
                    len_b: f64,
                    abduct: f64,
                    swing: f64,
                    flex: f64|
     -> (Vector3<f64>, Vector3<f64>) {
        // direction of the upper segment: start straight down, rotate sideways
        // (abduction) then forward/backward (swing)
        let dir = Vector3::new(
            side * abduct.sin(),
            abduct.cos() * swing.cos(),
            abduct.cos() * swing.sin(),
        );
        let mid = root + dir * len_a;
        // bend about a horizontal axis perpendicular to the segment
        let mut axis = dir.cross(&Vector3::new(0.0, 0.0, 1.0));
        if axis.norm() < 1e-6 {
            axis = Vector3::new(1.0, 0.0, 0.0);
        }
        let rot = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), flex * side);
        let end = mid + rot * dir * len_b;
        (mid, end)
    };

    let (re, rw) = limb(
        joints[R_SHOULDER],
        -1.0,
        upper_arm,
        forearm,
        rng.gen_range(15.0..75.0) * deg,
        rng.gen_range(-30.0..40.0) * deg,
        rng.gen_range(10.0..100.0) * deg,
    );
    joints[R_ELBOW] = re;
    joints[R_WRIST] = rw;
    let (le, lw) = limb(
        joints[L_SHOULDER],
        1.0,
        upper_arm,
        forearm,
        rng.gen_range(15.0..75.0) * deg,
        rng.gen_range(-30.0..40.0) * deg,
        rng.gen_range(10.0..100.0) * deg,
    );
    joints[L_ELBOW] = le;
    joints[L_WRIST] = lw;
    let (rk, ra) = limb(
        joints[R_HIP],
        -1.0,
        thigh,
        shin,
        rng.gen_range(2.0..20.0) * deg,
        rng.gen_range(-15.0..25.0) * deg,
        rng.gen_range(0.0..60.0) * deg,
    );
    joints[R_KNEE] = rk;
    joints[R_ANKLE] = ra;
    let (lk, la) = limb(
        joints[L_HIP],
        1.0,
        thigh,
        shin,
        rng.gen_range(2.0..20.0) * deg,
        rng.gen_range(-15.0..25.0) * deg,
        rng.gen_range(0.0..60.0) * deg,
    );
    joints[L_KNEE] = lk;
    joints[L_ANKLE] = la;

    // whole-body orientation
    let yaw = rng.gen_range(-40.0..40.0) * deg;
    let pitch = rng.gen_range(-10.0..10.0) * deg;
    let roll = rng.gen_range(-8.0..8.0) * deg;
    let r = Rotation3::from_euler_angles(pitch, yaw, roll);
    for p in joints.iter_mut() {
        *p = r * *p;
    }

    // place the root so the projection stays inside the frame when possible
    let k = cfg.intrinsics();
    let z0 = rng.gen_range(cfg.root_z.0..cfg.root_z.1);
    let margin = 6.0;
    let place = |extent: &dyn Fn(&Vector3<f64>) -> f64,
                 c: f64,
                 limit: f64,
                 rng: &mut ChaCha8Rng|
     -> f64 {
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for p in &joints {
            let zj = (z0 + p.z).max(1.0);
            lo = lo.max((margin - c) * zj / cfg.focal - extent(p));
            hi = hi.min((limit - 1.0 - margin - c) * zj / cfg.focal - extent(p));
        }
        if lo < hi {
            rng.gen_range(lo..hi)
        } else {
            (lo + hi) / 2.0
        }
    };
    let x0 = place(&|p| p.x, k.cx, k.width, rng);
    let y0 = place(&|p| p.y, k.cy, k.height, rng);
    let rootv = Vector3::new(x0, y0, z0);
    for p in joints.iter_mut() {
        *p += rootv;
    }

    // capsules with randomized radii and albedos
    let limb_r = rng.gen_range(3.5..5.5);
    let leg_r = rng.gen_range(4.5..6.5);
    let torso_r = rng.gen_range(7.0..9.0);
    let head_r = rng.gen_range(8.5..MAX_CAPSULE_RADIUS_CM);
    let mut color = |lo: f64| -> [f64; 3] {
        [
            rng.gen_range(lo..0.95),
            rng.gen_range(lo..0.95),
            rng.gen_range(lo..0.95),
        ]
    };
    let skin = color(0.45);
    let shirt = color(0.25);
    let pants = color(0.2);
    let mid_hip = (joints[R_HIP] + joints[L_HIP]) / 2.0;
    let seg = |a: Vector3<f64>, b: Vector3<f64>, radius: f64, albedo: [f64; 3]| Capsule {
        a,
        b,
        radius,
        albedo,
    };
    let capsules = vec![
        seg(joints[NECK], joints[HEAD], head_r, skin), // 0
        seg(joints[NECK], mid_hip, torso_r, shirt),    // 1 spine
        seg(joints[R_SHOULDER], joints[L_SHOULDER], torso_r * 0.8, shirt), // 2 collar
        seg(joints[R_HIP], joints[L_HIP], torso_r * 0.85, pants), // 3 pelvis
        seg(joints[R_SHOULDER], joints[R_ELBOW], limb_r, shirt), // 4
        seg(joints[R_ELBOW], joints[R_WRIST], limb_r * 0.9, skin), // 5
        seg(joints[L_SHOULDER], joints[L_ELBOW], limb_r, shirt), // 6
        seg(joints[L_ELBOW], joints[L_WRIST], limb_r * 0.9, skin), // 7
        seg(joints[R_HIP], joints[R_KNEE], leg_r, pants), // 8
        seg(joints[R_KNEE], joints[R_ANKLE], leg_r * 0.85, pants), // 9
        seg(joints[L_HIP], joints[L_KNEE], leg_r, pants), // 10
        seg(joints[L_KNEE], joints[L_ANKLE], leg_r * 0.85, pants), // 11
    ];
    let adjacency: Vec<Vec<usize>> = vec![
        vec![0],          // head
        vec![0, 1, 2],    // neck
        vec![2, 4],       // r_shoulder
        vec![4, 5],       // r_elbow
        vec![5],          // r_wrist
        vec![2, 6],       // l_shoulder
        vec![6, 7],       // l_elbow
        vec![7],          // l_wrist
        vec![3, 8],       // r_hip
        vec![8, 9],       // r_knee
        vec![9],          // r_ankle
        vec![3, 10],      // l_hip
        vec![10, 11],     // l_knee
        vec![11],         // l_ankle
    ];
    (joints, capsules, adjacency)
}

/// Nearest intersection of the ray `t * dir` (unit `dir`, origin at the
/// camera) with a capsule; returns `t` and the surface normal.
fn ray_capsule(dir: &Vector3<f64>, cap: &Capsule) -> Option<(f64, Vector3<f64>)> {
    let ba = cap.b - cap.a;
    let oa = -cap.a;
    let baba = ba.dot(&ba);
    let bard = ba.dot(dir);
    let baoa = ba.dot(&oa);
    let rdoa = dir.dot(&oa);
    let oaoa = oa.dot(&oa);
    let r2 = cap.radius * cap.radius;
    let a = baba - bard * bard;
    let b = baba * rdoa - baoa * bard;
    let c = baba * oaoa - baoa * baoa - r2 * baba;
    if a.abs() > 1e-12 {
        let h = b * b - a * c;
        if h >= 0.0 {
            let t = (-b - h.sqrt()) / a;
            let y = baoa + t * bard;
            if t > 0.0 && y >= 0.0 && y <= baba {
                let p = dir * t;
                let n = (p - (cap.a + ba * (y / baba))) / cap.radius;
                return Some((t, n));
            }
        }
    }
    // spherical caps
    let mut best: Option<(f64, Vector3<f64>)> = None;
    for center in [&cap.a, &cap.b] {
        let oc = -center;
        let bq = oc.dot(dir);
        let cq = oc.dot(&oc) - r2;
        let h = bq * bq - cq;
        if h >= 0.0 {
            let t = -bq - h.sqrt();
            if t > 0.0 && best.map_or(true, |(bt, _)| t < bt) {
                let n = (dir * t - center) / cap.radius;
                best = Some((t, n));
            }
        }
    }
    best
}

fn render_sample(id: &str, rng: &mut ChaCha8Rng, cfg: &SyntheticConfig) -> FrameSample {
    let (w, h) = (cfg.image_width as usize, cfg.image_height as usize);
    let k = cfg.intrinsics();
    let (joints, capsules, adjacency) = sample_figure(rng, cfg);

    let mut zbuf = vec![f32::INFINITY; w * h];
    let mut winner = vec![usize::MAX; w * h];
    let mut normals = vec![Vector3::<f64>::zeros(); w * h];

    for (ci, cap) in capsules.iter().enumerate() {
        // screen bounding box of the capsule
        let (mut x0, mut y0, mut x1, mut y1) = (w as i64, h as i64, -1i64, -1i64);
        for p in [&cap.a, &cap.b] {
            if p.z <= cap.radius {
                continue;
            }
            let (u, v) = project_point(&k, [p.x, p.y, p.z]).unwrap();
            let rpx = cap.radius * cfg.focal / (p.z - cap.radius) + 2.0;
            x0 = x0.min((u - rpx).floor() as i64);
            x1 = x1.max((u + rpx).ceil() as i64);
            y0 = y0.min((v - rpx).floor() as i64);
            y1 = y1.max((v + rpx).ceil() as i64);
        }
        let x0 = x0.max(0) as usize;
        let y0 = y0.max(0) as usize;
        let x1 = (x1.min(w as i64 - 1)).max(-1);
        let y1 = (y1.min(h as i64 - 1)).max(-1);
        if x1 < 0 || y1 < 0 {
            continue;
        }
        for py in y0..=y1 as usize {
            for px in x0..=x1 as usize {
                let dir = Vector3::new(
                    (px as f64 - k.cx) / k.fx,
                    (py as f64 - k.cy) / k.fy,
                    1.0,
                )
                .normalize();
                if let Some((t, n)) = ray_capsule(&dir, cap) {
                    let z = (t * dir.z) as f32;
                    let idx = py * w + px;
                    if z < zbuf[idx] {
                        zbuf[idx] = z;
                        winner[idx] = ci;
                        normals[idx] = n;
                    }
                }
            }
        }
    }

    // background texture: two-tone value noise with a horizontal sweep
    let c0 = [
        rng.gen_range(0.1..0.6),
        rng.gen_range(0.1..0.6),
        rng.gen_range(0.1..0.6),
    ];
    let c1 = [
        rng.gen_range(0.4..0.9),
        rng.gen_range(0.4..0.9),
        rng.gen_range(0.4..0.9),
    ];
    let (gw, gh) = (9usize, 7usize);
    let grid: Vec<f64> = (0..gw * gh).map(|_| rng.gen_range(0.0..1.0)).collect();
    let noise = |x: f64, y: f64| -> f64 {
        let gx = x * (gw - 1) as f64;
        let gy = y * (gh - 1) as f64;
        let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
        let (fx, fy) = (gx - ix as f64, gy - iy as f64);
        let (ix1, iy1) = ((ix + 1).min(gw - 1), (iy + 1).min(gh - 1));
        let v00 = grid[iy * gw + ix];
        let v10 = grid[iy * gw + ix1];
        let v01 = grid[iy1 * gw + ix];
        let v11 = grid[iy1 * gw + ix1];
        (v00 * (1.0 - fx) + v10 * fx) * (1.0 - fy) + (v01 * (1.0 - fx) + v11 * fx) * fy
    };

    let light = Vector3::new(-0.35, -0.55, -0.76).normalize();
    let mut rgb = image::RgbImage::new(w as u32, h as u32);
    let mut depth = DepthMap::zeros(w, h);
    for py in 0..h {
        for px in 0..w {
            let idx = py * w + px;
            let color = if winner[idx] != usize::MAX {
                depth.data[idx] = zbuf[idx];
                let albedo = capsules[winner[idx]].albedo;
                let diffuse = normals[idx].dot(&-light).max(0.0);
                let i = 0.30 + 0.70 * diffuse;
                [albedo[0] * i, albedo[1] * i, albedo[2] * i]
            } else {
                let v = noise(px as f64 / w as f64, py as f64 / h as f64);
                let sweep = 0.85 + 0.3 * px as f64 / w as f64;
                [
                    (c0[0] + (c1[0] - c0[0]) * v) * sweep,
                    (c0[1] + (c1[1] - c0[1]) * v) * sweep,
                    (c0[2] + (c1[2] - c0[2]) * v) * sweep,
                ]
            };
            rgb.put_pixel(
                px as u32,
                py as u32,
                image::Rgb([
                    (color[0].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (color[1].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (color[2].clamp(0.0, 1.0) * 255.0).round() as u8,
                ]),
            );
        }
    }

    // annotation masks: a joint is visible when its projected pixel is in
    // frame, the z-buffer winner there is one of its own capsules, and the
    // rendered surface sits within capsule thickness of the joint (a limb seen
    // end-on hides its own far joint)
    let mut mask_uv = vec![false; 14];
    let mut mask_uz = vec![false; 14];
    for (j, p) in joints.iter().enumerate() {
        let (u, v) = match project_point(&k, [p.x, p.y, p.z]) {
            Ok(uv) => uv,
            Err(_) => continue,
        };
        let (pu, pv) = (u.round() as i64, v.round() as i64);
        if pu < 0 || pu >= w as i64 || pv < 0 || pv >= h as i64 {
            continue;
        }
        let idx = pv as usize * w + pu as usize;
        let win = winner[idx];
        let unoccluded = win != usize::MAX
            && adjacency[j].contains(&win)
            && (zbuf[idx] as f64 - p.z).abs() <= capsules[win].radius + 1.5;
        mask_uv[j] = unoccluded;
        mask_uz[j] = unoccluded && p.z >= cfg.z_valid.0 && p.z < cfg.z_valid.1;
    }

    let skeleton = Skeleton3D {
        joints: joints.iter().map(|p| [p.x, p.y, p.z]).collect(),
        joint_names: JOINT_NAMES_14.iter().map(|s| s.to_string()).collect(),
        mask_uv,
        mask_uz,
    };

    FrameSample {
        sample_id: id.to_string(),
        rgb,
        depth: Some(depth),
        skeleton,
        intrinsics_rgb: k,
        intrinsics_depth: k,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;
    use tempfile::TempDir;

    fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
        let mut files = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in fs::read_dir(&dir).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                    files.push((rel, fs::read(&path).unwrap()));
                }
            }
        }
        files.sort();
        files
    }

    #[test]
    fn equal_seeds_give_byte_identical_datasets() {
        let cfg = SyntheticConfig::default();
        let d1 = TempDir::new().unwrap();
        let d2 = TempDir::new().unwrap();
        generate_synthetic(d1.path(), 3, 42, &[], &cfg).unwrap();
        generate_synthetic(d2.path(), 3, 42, &[], &cfg).unwrap();
        assert_eq!(tree_bytes(d1.path()), tree_bytes(d2.path()));

        let d3 = TempDir::new().unwrap();
        generate_synthetic(d3.path(), 3, 43, &[], &cfg).unwrap();
        assert_ne!(tree_bytes(d1.path()), tree_bytes(d3.path()));
    }

    #[test]
    fn generated_annotations_are_geometrically_consistent() {
        let cfg = SyntheticConfig::default();
        let dir = TempDir::new().unwrap();
        generate_synthetic(dir.path(), 6, 7, &[], &cfg).unwrap();
        let manifest = crate::data::load_dataset(dir.path(), "all").unwrap();
        assert_eq!(manifest.len(), 6);
        let mut visible = 0usize;
        for id in &manifest.sample_ids {
            let s = crate::data::load_sample(&manifest, id).unwrap();
            let depth = s.depth.as_ref().unwrap();
            let k = s.intrinsics_depth;
            for (j, p) in s.skeleton.joints.iter().enumerate() {
                if s.skeleton.mask_uz[j] {
                    assert!(
                        p[2] >= cfg.z_valid.0 && p[2] < cfg.z_valid.1,
                        "uz-visible joint outside the valid depth range: {}",
                        p[2]
                    );
                }
                if s.skeleton.mask_uv[j] {
                    visible += 1;
                    let (u, v) = project_point(&k, *p).unwrap();
                    let d = depth.get(u.round() as usize, v.round() as usize);
                    assert!(d > 0.0, "visible joint over invalid depth");
                    assert!(
                        (d as f64 - p[2]).abs() <= MAX_CAPSULE_RADIUS_CM + 2.0,
                        "depth {d} too far from joint Z {} at joint {j}",
                        p[2]
                    );
                }
            }
        }
        // the figure must actually be visible most of the time
        assert!(visible > 6 * 14 / 2, "only {visible} visible joints");
    }

    #[test]
    fn split_plan_partitions_samples() {
        let cfg = SyntheticConfig::default();
        let dir = TempDir::new().unwrap();
        generate_synthetic(
            dir.path(),
            5,
            1,
            &[("train".into(), 3), ("test".into(), 2)],
            &cfg,
        )
        .unwrap();
        let train = crate::data::load_dataset(dir.path(), "train").unwrap();
        let test = crate::data::load_dataset(dir.path(), "test").unwrap();
        assert_eq!(train.len(), 3);
        assert_eq!(test.len(), 2);
        assert!(train.sample_ids.iter().all(|id| !test.sample_ids.contains(id)));

        let bad = generate_synthetic(dir.path(), 5, 1, &[("train".into(), 3)], &cfg);
        assert!(bad.is_err());
    }
}
