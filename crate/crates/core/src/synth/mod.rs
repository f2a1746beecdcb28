//! Procedural characters, poses, backgrounds and paired training samples.

mod dataset;

use std::collections::BTreeMap;

use nalgebra::{Point3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{
    bake_landmarks, pose_mesh, rasterize, Camera, Joint, LandmarkSet, MeshApose, Pose, RgbaImage, UdpImage,
};

pub use dataset::{
    character_seeds, read_manifest, read_split, write_dataset, DatasetConfig, ManifestEntry, SampleDir, Split, MANIFEST,
};

/// Deterministic generator for one purpose (`stream`) of one seed.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSpec {
    pub name: String,
    pub parent: Option<String>,
    pub pivot: [f64; 3],
    /// Allowed (lo, hi) range of each Euler angle, radians.
    pub limits: [[f64; 2]; 3],
}

/// A box swept along the segment `from -> to`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartSpec {
    pub name: String,
    pub joint: String,
    pub from: [f64; 3],
    pub to: [f64; 3],
    /// Cross-section (width, depth).
    pub thickness: [f64; 2],
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CharacterSpec {
    pub seed: u64,
    pub joints: Vec<JointSpec>,
    pub parts: Vec<PartSpec>,
}

/// Faces of each box are split this many times along the bone.
const SEGMENTS: usize = 2;
const MAX_TRIANGLES: usize = 2000;
/// Largest global yaw a generated pose uses.
pub const MAX_YAW: f64 = 0.6;

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen_range(0.08..0.95), rng.gen_range(0.08..0.95), rng.gen_range(0.08..0.95)]
}

pub fn gen_character(seed: u64) -> CharacterSpec {
    let mut rng = rng_for(seed, 1);
    let r = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| rng.gen_range(lo..hi);
    let thigh = r(&mut rng, 0.38, 0.52);
    let shin = r(&mut rng, 0.38, 0.52);
    let torso = r(&mut rng, 0.5, 0.72);
    let torso_w = r(&mut rng, 0.34, 0.5);
    let torso_d = r(&mut rng, 0.2, 0.3);
    let head_h = r(&mut rng, 0.26, 0.4);
    let head_w = r(&mut rng, 0.26, 0.42);
    let upper_arm = r(&mut rng, 0.28, 0.4);
    let forearm = r(&mut rng, 0.26, 0.36);
    let arm_t = r(&mut rng, 0.08, 0.13);
    let leg_t = r(&mut rng, 0.11, 0.16);
    let arm_angle = r(&mut rng, 0.6, 0.95);
    let (skin, shirt, sleeve, pants, shoes, accent) =
        (color(&mut rng), color(&mut rng), color(&mut rng), color(&mut rng), color(&mut rng), color(&mut rng));

    let hip_y = thigh + shin;
    let top = hip_y + torso;
    let mut joints = Vec::new();
    let mut parts = Vec::new();
    let mut joint = |name: &str, parent: Option<&str>, pivot: [f64; 3], limits: [[f64; 2]; 3]| {
        joints.push(JointSpec { name: name.into(), parent: parent.map(Into::into), pivot, limits });
    };
    joint("pelvis", None, [0.0, hip_y, 0.0], [[-0.2, 0.2], [-0.35, 0.35], [-0.15, 0.15]]);
    joint("neck", Some("pelvis"), [0.0, top, 0.0], [[-0.4, 0.4], [-0.6, 0.6], [-0.3, 0.3]]);
    let sx = torso_w / 2.0 + arm_t / 2.0;
    let sy = top - arm_t / 2.0;
    for (side, s) in [("l", 1.0), ("r", -1.0)] {
        let dir = [s * arm_angle.sin(), -arm_angle.cos(), 0.0];
        let elbow = [s * sx + dir[0] * upper_arm, sy + dir[1] * upper_arm, 0.0];
        let wrist = [elbow[0] + dir[0] * forearm, elbow[1] + dir[1] * forearm, 0.0];
        let z_lim = if s > 0.0 { [-0.5, 1.1] } else { [-1.1, 0.5] };
        joint(&format!("{side}_shoulder"), Some("pelvis"), [s * sx, sy, 0.0], [[-1.0, 1.0], [-0.5, 0.5], z_lim]);
        joint(&format!("{side}_elbow"), Some(&format!("{side}_shoulder")), elbow, [[-0.3, 0.3], [-1.2, 1.2], [-0.6, 0.6]]);
        parts.push(PartSpec {
            name: format!("{side}_upper_arm"),
            joint: format!("{side}_shoulder"),
            from: [s * sx, sy, 0.0],
            to: elbow,
            thickness: [arm_t, arm_t],
            color: sleeve,
        });
        parts.push(PartSpec {
            name: format!("{side}_forearm"),
            joint: format!("{side}_elbow"),
            from: elbow,
            to: wrist,
            thickness: [arm_t * 0.9, arm_t * 0.9],
            color: skin,
        });
        let hx = s * torso_w / 4.0;
        joint(&format!("{side}_hip"), Some("pelvis"), [hx, hip_y, 0.0], [[-0.8, 0.6], [-0.3, 0.3], [-0.3, 0.3]]);
        joint(&format!("{side}_knee"), Some(&format!("{side}_hip")), [hx, shin, 0.0], [[0.0, 1.2], [0.0, 0.0], [0.0, 0.0]]);
        parts.push(PartSpec {
            name: format!("{side}_thigh"),
            joint: format!("{side}_hip"),
            from: [hx, hip_y, 0.0],
            to: [hx, shin, 0.0],
            thickness: [leg_t, leg_t],
            color: pants,
        });
        parts.push(PartSpec {
            name: format!("{side}_shin"),
            joint: format!("{side}_knee"),
            from: [hx, shin, 0.0],
            to: [hx, 0.0, 0.0],
            thickness: [leg_t * 0.9, leg_t * 0.9],
            color: shoes,
        });
    }
    parts.push(PartSpec {
        name: "torso".into(),
        joint: "pelvis".into(),
        from: [0.0, hip_y, 0.0],
        to: [0.0, top, 0.0],
        thickness: [torso_w, torso_d],
        color: shirt,
    });
    parts.push(PartSpec {
        name: "head".into(),
        joint: "neck".into(),
        from: [0.0, top + 0.02, 0.0],
        to: [0.0, top + 0.02 + head_h, 0.0],
        thickness: [head_w, head_w * 0.9],
        color: skin,
    });
    match rng.gen_range(0..=2u32) {
        0 => {}
        1 => {
            let len = r(&mut rng, 0.2, 0.4);
            joint("tail", Some("pelvis"), [0.0, hip_y, -torso_d / 2.0], [[-0.5, 0.5], [-0.5, 0.5], [0.0, 0.0]]);
            parts.push(PartSpec {
                name: "tail".into(),
                joint: "tail".into(),
                from: [0.0, hip_y, -torso_d / 2.0],
                to: [0.0, hip_y - len * 0.5, -torso_d / 2.0 - len],
                thickness: [0.06, 0.06],
                color: accent,
            });
        }
        _ => {
            let len = r(&mut rng, 0.14, 0.3);
            let spread = r(&mut rng, 0.1, 0.5);
            for (i, s) in [1.0, -1.0].into_iter().enumerate() {
                let base = [s * head_w * 0.3, top + 0.02 + head_h, 0.0];
                joint(&format!("ear_{i}"), Some("neck"), base, [[-0.3, 0.3], [0.0, 0.0], [-0.3, 0.3]]);
                parts.push(PartSpec {
                    name: format!("ear_{i}"),
                    joint: format!("ear_{i}"),
                    from: base,
                    to: [base[0] + s * len * spread, base[1] + len, 0.0],
                    thickness: [0.08, 0.04],
                    color: accent,
                });
            }
        }
    }
    CharacterSpec { seed, joints, parts }
}

/// Appends a subdivided box around the segment `from -> to`, faces wound
/// counter-clockwise seen from outside.
fn push_box(
    verts: &mut Vec<Point3<f64>>,
    tris: &mut Vec<[u32; 3]>,
    from: Vector3<f64>,
    to: Vector3<f64>,
    [width, depth]: [f64; 2],
) {
    let axis = to - from;
    let len = axis.norm();
    let d = axis / len;
    let helper = if d.z.abs() < 0.9 { Vector3::z() } else { Vector3::x() };
    let v = d.cross(&helper).normalize();
    let u = v.cross(&d);
    let c = (from + to) / 2.0;
    let (a, u, v) = (d * len, u * width, v * depth);
    // (center offset, e1, e2, subdivisions along e1/e2) with e1 x e2 outward
    let faces = [
        (a / 2.0, u, v, (1, 1)),
        (-a / 2.0, v, u, (1, 1)),
        (u / 2.0, v, a, (1, SEGMENTS)),
        (-u / 2.0, a, v, (SEGMENTS, 1)),
        (v / 2.0, a, u, (SEGMENTS, 1)),
        (-v / 2.0, u, a, (1, SEGMENTS)),
    ];
    for (off, e1, e2, (n1, n2)) in faces {
        let origin = c + off - e1 / 2.0 - e2 / 2.0;
        let base = verts.len() as u32;
        for j in 0..=n2 {
            for i in 0..=n1 {
                let p = origin + e1 * (i as f64 / n1 as f64) + e2 * (j as f64 / n2 as f64);
                verts.push(Point3::from(p));
            }
        }
        let idx = |i: usize, j: usize| base + (j * (n1 + 1) + i) as u32;
        for j in 0..n2 {
            for i in 0..n1 {
                tris.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
                tris.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
            }
        }
    }
}

impl CharacterSpec {
    pub fn from_json(text: &str, path: &std::path::Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            detail: e.to_string(),
        })
    }

    /// Builds the A-pose mesh, translated so its bounding box is centred on
    /// the origin.
    pub fn mesh(&self) -> Result<MeshApose> {
        let mut joints: Vec<Joint> = Vec::with_capacity(self.joints.len());
        for j in &self.joints {
            let parent = match &j.parent {
                None => None,
                Some(p) => Some(joints.iter().position(|x| &x.name == p).ok_or_else(|| {
                    Error::contract("character", format!("joint {} names unknown or later parent {p}", j.name))
                })?),
            };
            if joints.iter().any(|x| x.name == j.name) {
                return Err(Error::contract("character", format!("duplicate joint {}", j.name)));
            }
            joints.push(Joint { name: j.name.clone(), parent, pivot: j.pivot });
        }
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        let mut colors = Vec::new();
        let mut vertex_joint = Vec::new();
        for p in &self.parts {
            let j = joints
                .iter()
                .position(|x| x.name == p.joint)
                .ok_or_else(|| Error::contract("character", format!("part {} names unknown joint {}", p.name, p.joint)))?;
            let (from, to) = (Vector3::from(p.from), Vector3::from(p.to));
            if [(to - from).norm(), p.thickness[0], p.thickness[1]].iter().any(|v| v.is_nan() || *v <= 0.0) {
                return Err(Error::DegenerateMesh(format!("part {} has non-positive dimensions", p.name)));
            }
            if p.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::contract("character", format!("part {} color outside [0,1]", p.name)));
            }
            let start = vertices.len();
            push_box(&mut vertices, &mut triangles, from, to, p.thickness);
            colors.resize(vertices.len(), p.color);
            vertex_joint.resize(vertices.len(), j);
            debug_assert!(vertices.len() > start);
        }
        if triangles.len() > MAX_TRIANGLES {
            return Err(Error::contract("character", format!("{} triangles exceed {MAX_TRIANGLES}", triangles.len())));
        }
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for v in &vertices {
            lo = lo.inf(&v.coords);
            hi = hi.sup(&v.coords);
        }
        let centre = (lo + hi) / 2.0;
        for v in &mut vertices {
            *v -= centre;
        }
        for j in &mut joints {
            j.pivot = (Vector3::from(j.pivot) - centre).into();
        }
        MeshApose::new(vertices, triangles, colors, joints, vertex_joint)
    }

    pub fn within_limits(&self, pose: &Pose) -> bool {
        pose.yaw.abs() <= MAX_YAW
            && pose.joints.iter().all(|(name, angles)| {
                self.joints.iter().find(|j| &j.name == name).is_some_and(|j| {
                    (0..3).all(|a| angles[a] >= j.limits[a][0] && angles[a] <= j.limits[a][1])
                })
            })
    }
}

pub fn gen_pose(seed: u64, spec: &CharacterSpec) -> Pose {
    let mut rng = rng_for(seed, 2);
    let mut joints = BTreeMap::new();
    for j in &spec.joints {
        let angles = j.limits.map(|[lo, hi]| if hi > lo { rng.gen_range(lo..=hi) } else { lo });
        joints.insert(j.name.clone(), angles);
    }
    Pose { yaw: rng.gen_range(-MAX_YAW..=MAX_YAW), joints }
}

/// Linear gradient between two random colors plus smooth value noise.
pub fn gen_background(seed: u64, height: usize, width: usize) -> RgbaImage {
    let mut rng = rng_for(seed, 3);
    let (c0, c1) = (color(&mut rng), color(&mut rng));
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    const G: usize = 5;
    let lattice: Vec<f64> = (0..G * G).map(|_| rng.gen_range(-0.15..0.15)).collect();
    let mut data = Vec::with_capacity(height * width * 4);
    for y in 0..height {
        let v = y as f64 / height.max(2).saturating_sub(1) as f64;
        for x in 0..width {
            let u = x as f64 / width.max(2).saturating_sub(1) as f64;
            let t = (((u - 0.5) * dx + (v - 0.5) * dy) / std::f64::consts::SQRT_2 + 0.5).clamp(0.0, 1.0);
            let (gx, gy) = (u * (G - 1) as f64, v * (G - 1) as f64);
            let (ix, iy) = ((gx as usize).min(G - 2), (gy as usize).min(G - 2));
            let (fx, fy) = (gx - ix as f64, gy - iy as f64);
            let l = |i: usize, j: usize| lattice[j * G + i];
            let noise = (l(ix, iy) * (1.0 - fx) + l(ix + 1, iy) * fx) * (1.0 - fy)
                + (l(ix, iy + 1) * (1.0 - fx) + l(ix + 1, iy + 1) * fx) * fy;
            for c in 0..3 {
                data.push((c0[c] * (1.0 - t) + c1[c] * t + noise).clamp(0.0, 1.0) as f32);
            }
            data.push(1.0);
        }
    }
    RgbaImage::new(height, width, data).expect("background values are clamped")
}

/// A character ready for rendering: mesh, baked landmarks and framing.
#[derive(Clone, Debug)]
pub struct Character {
    pub spec: CharacterSpec,
    pub mesh: MeshApose,
    pub landmarks: LandmarkSet,
    radius: f64,
}

impl Character {
    pub fn new(spec: CharacterSpec) -> Result<Self> {
        let mesh = spec.mesh()?;
        let landmarks = bake_landmarks(&mesh)?;
        let radius = mesh.vertices.iter().map(|v| v.coords.norm()).fold(0.0, f64::max);
        Ok(Character { spec, mesh, landmarks, radius })
    }

    pub fn from_seed(seed: u64) -> Result<Self> {
        Character::new(gen_character(seed))
    }

    /// Largest distance of an A-pose vertex from the origin.
    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Front orthographic camera that keeps every pose inside the frame.
    pub fn camera(&self, resolution: usize) -> Camera {
        let scale = 0.5 * resolution as f64 / (self.radius * 1.2);
        Camera::front(Point3::origin(), scale, resolution, resolution).expect("valid framing")
    }

    /// Color render and dense-pose image from one shared visibility pass.
    pub fn render(&self, pose: &Pose, cam: &Camera) -> Result<(RgbaImage, UdpImage)> {
        let posed = pose_mesh(&self.mesh, pose)?;
        let cov = rasterize(&posed, cam);
        Ok((
            crate::geom::rgba_from_coverage(&cov, &posed),
            crate::geom::udp_from_coverage(&cov, &posed, &self.landmarks),
        ))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub sheet: Vec<RgbaImage>,
    /// Rendered target with coverage alpha.
    pub target: RgbaImage,
    /// Absent for unlabeled samples.
    pub target_udp: Option<UdpImage>,
    /// The target pasted over `k` backgrounds; opaque.
    pub augmented: Vec<RgbaImage>,
}

impl TrainingSample {
    pub fn has_udp_gt(&self) -> bool {
        self.target_udp.is_some()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleConfig {
    pub m: usize,
    pub k: usize,
    pub resolution: usize,
    pub crop: bool,
    pub labeled: bool,
    /// Maximum brightness change of augmented views; 0 disables jitter.
    pub color_jitter: f64,
}

impl SampleConfig {
    pub fn new(m: usize, k: usize, resolution: usize) -> Self {
        SampleConfig { m, k, resolution, crop: true, labeled: true, color_jitter: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.k == 0 {
            return Err(Error::Config(format!("m = {} and k = {} must be at least 1", self.m, self.k)));
        }
        if self.resolution < 16 {
            return Err(Error::Config(format!("resolution {} is below 16", self.resolution)));
        }
        if !(0.0..1.0).contains(&self.color_jitter) {
            return Err(Error::Config(format!("color jitter {} outside [0,1)", self.color_jitter)));
        }
        Ok(())
    }
}

/// `k` copies of `img`: the first unchanged, the rest with a random RGB gain
/// within `1 ± amount`.
pub fn brightness_views(img: &RgbaImage, k: usize, amount: f64, seed: u64) -> Vec<RgbaImage> {
    let mut rng = rng_for(seed, 8);
    (0..k)
        .map(|j| {
            let mut view = img.clone();
            if j > 0 && amount > 0.0 {
                let gain = 1.0 + rng.gen_range(-amount..amount) as f32;
                for px in view.0.data.chunks_exact_mut(4) {
                    for c in &mut px[..3] {
                        *c = (*c * gain).clamp(0.0, 1.0);
                    }
                }
            }
            view
        })
        .collect()
}

/// Side of the random crop window for a given resolution.
pub fn crop_side(resolution: usize) -> usize {
    resolution * 7 / 8
}

pub fn make_sample(spec: &CharacterSpec, m: usize, k: usize, seed: u64, resolution: usize) -> Result<TrainingSample> {
    make_sample_with(&Character::new(spec.clone())?, &SampleConfig::new(m, k, resolution), seed)
}

/// Draws `m + 1` distinct poses, renders the sheet and the target, and pastes
/// the target over `k` backgrounds. One crop window is shared by all images.
pub fn make_sample_with(ch: &Character, cfg: &SampleConfig, seed: u64) -> Result<TrainingSample> {
    cfg.validate()?;
    let res = cfg.resolution;
    let cam = ch.camera(res);
    let mut rng = rng_for(seed, 4);
    let mut poses: Vec<Pose> = Vec::with_capacity(cfg.m + 1);
    while poses.len() < cfg.m + 1 {
        let p = gen_pose(rng.gen(), &ch.spec);
        if !poses.contains(&p) {
            poses.push(p);
        }
    }
    let side = crop_side(res);
    let (cy, cx) = if cfg.crop { (rng.gen_range(0..=res - side), rng.gen_range(0..=res - side)) } else { (0, 0) };
    let crop_rgba = |img: RgbaImage| -> Result<RgbaImage> {
        if cfg.crop {
            Ok(img.crop(cy, cx, side, side)?.resize_bilinear(res, res))
        } else {
            Ok(img)
        }
    };
    let mut sheet = Vec::with_capacity(cfg.m);
    for pose in &poses[1..] {
        sheet.push(crop_rgba(ch.render(pose, &cam)?.0)?);
    }
    let (target_full, udp_full) = ch.render(&poses[0], &cam)?;
    let mut augmented = Vec::with_capacity(cfg.k);
    for _ in 0..cfg.k {
        let bg = gen_background(rng.gen(), res, res);
        let mut view = target_full.over(&bg)?;
        if cfg.color_jitter > 0.0 {
            let gain = 1.0 + rng.gen_range(-cfg.color_jitter..cfg.color_jitter) as f32;
            for px in view.0.data.chunks_exact_mut(4) {
                for c in &mut px[..3] {
                    *c = (*c * gain).clamp(0.0, 1.0);
                }
            }
        }
        augmented.push(crop_rgba(view)?);
    }
    let target_udp = if cfg.labeled {
        Some(if cfg.crop { udp_full.crop(cy, cx, side, side)?.resize_nearest(res, res) } else { udp_full })
    } else {
        None
    };
    Ok(TrainingSample { sheet, target: crop_rgba(target_full)?, target_udp, augmented })
}

/// Per-character split into (train, validation) by a `train:val` ratio.
pub fn split_dataset(seeds: &[u64], ratio: (usize, usize), shuffle_seed: u64) -> Result<(Vec<u64>, Vec<u64>)> {
    let (t, v) = ratio;
    if t == 0 || v == 0 {
        return Err(Error::Config(format!("split ratio {t}:{v} must have both parts positive")));
    }
    let mut unique = seeds.to_vec();
    unique.sort_unstable();
    unique.dedup();
    if unique.len() != seeds.len() {
        return Err(Error::Config("character seeds must be distinct".into()));
    }
    let n_val = seeds.len() * v / (t + v);
    if n_val == 0 || n_val == seeds.len() {
        return Err(Error::Config(format!(
            "{} characters cannot be split {t}:{v}; at least {} are needed",
            seeds.len(),
            t + v
        )));
    }
    let mut order = seeds.to_vec();
    order.shuffle(&mut rng_for(shuffle_seed, 5));
    let val = order.split_off(order.len() - n_val);
    Ok((order, val))
}

/// Cycles the given views in order until there are `m` of them.
pub fn fill_views<T: Clone>(images: &[T], m: usize) -> Result<Vec<T>> {
    if images.is_empty() {
        return Err(Error::EmptySet("fill_views"));
    }
    Ok(images.iter().cycle().take(m).cloned().collect())
}
