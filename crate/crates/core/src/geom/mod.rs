//! Dense-pose geometry: landmark baking, forward kinematics, cameras and
//! z-buffer rasterization.

mod image;
mod raster;

use std::collections::BTreeMap;

use nalgebra::{Matrix4, Point3, Rotation3, Translation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use self::image::{decode_udp, Image4, encode_udp, read_udp, write_udp, RgbaImage, UdpImage, UDP_MAGIC, UDP_VERSION};
pub use self::raster::{
    rasterize, rasterize_rgba, rasterize_udp, rgba_from_coverage, shade, udp_from_coverage, Coverage, LIGHT_DIR, MIN_SHADE,
};

/// A joint of the rigid skeleton. Joints are stored parents-first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    /// Rotation centre in A-pose world coordinates.
    pub pivot: [f64; 3],
}

/// A character mesh in its canonical A-pose.
#[derive(Clone, Debug, PartialEq)]
pub struct MeshApose {
    pub vertices: Vec<Point3<f64>>,
    pub triangles: Vec<[u32; 3]>,
    /// Per-vertex appearance color in [0,1].
    pub colors: Vec<[f64; 3]>,
    pub joints: Vec<Joint>,
    /// Index of the joint that rigidly carries each vertex.
    pub vertex_joint: Vec<usize>,
}

impl MeshApose {
    pub fn new(
        vertices: Vec<Point3<f64>>,
        triangles: Vec<[u32; 3]>,
        colors: Vec<[f64; 3]>,
        joints: Vec<Joint>,
        vertex_joint: Vec<usize>,
    ) -> Result<Self> {
        let mesh = MeshApose { vertices, triangles, colors, joints, vertex_joint };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        let nv = self.vertices.len();
        if self.triangles.is_empty() {
            return Err(Error::DegenerateMesh("no triangles".into()));
        }
        if let Some(t) = self.triangles.iter().find(|t| t.iter().any(|&i| i as usize >= nv)) {
            return Err(Error::contract("mesh", format!("triangle {t:?} indexes past {nv} vertices")));
        }
        if self.colors.len() != nv || self.vertex_joint.len() != nv {
            return Err(Error::contract(
                "mesh",
                format!("{nv} vertices, {} colors, {} joint assignments", self.colors.len(), self.vertex_joint.len()),
            ));
        }
        if self.joints.is_empty() {
            return Err(Error::contract("mesh", "skeleton has no joints"));
        }
        for (i, j) in self.joints.iter().enumerate() {
            match j.parent {
                None if i != 0 => return Err(Error::contract("mesh", format!("joint {} has no parent", j.name))),
                Some(p) if p >= i => {
                    return Err(Error::contract("mesh", format!("joint {} must follow its parent", j.name)))
                }
                _ => {}
            }
        }
        if self.vertex_joint.iter().any(|&j| j >= self.joints.len()) {
            return Err(Error::contract("mesh", "vertex assigned to a missing joint"));
        }
        Ok(())
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    pub fn identity_pose(&self) -> PosedMesh<'_> {
        PosedMesh { mesh: self, positions: self.vertices.clone() }
    }
}

/// Per-vertex landmark colors, fixed in the A-pose.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    pub values: Vec<[f64; 3]>,
}

/// Fraction of the bounding-box extent added on each side before normalizing.
pub const LANDMARK_MARGIN: f64 = 0.01;

pub fn bake_landmarks(mesh: &MeshApose) -> Result<LandmarkSet> {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for v in &mesh.vertices {
        for a in 0..3 {
            lo[a] = lo[a].min(v[a]);
            hi[a] = hi[a].max(v[a]);
        }
    }
    let mut origin = [0.0; 3];
    let mut range = [0.0; 3];
    for a in 0..3 {
        let extent = hi[a] - lo[a];
        if !extent.is_finite() || extent <= 0.0 {
            return Err(Error::DegenerateMesh(format!("bounding box has zero extent along axis {a}")));
        }
        origin[a] = lo[a] - LANDMARK_MARGIN * extent;
        range[a] = extent * (1.0 + 2.0 * LANDMARK_MARGIN);
    }
    let values = mesh
        .vertices
        .iter()
        .map(|v| std::array::from_fn(|a| ((v[a] - origin[a]) / range[a]).clamp(0.0, 1.0)))
        .collect();
    Ok(LandmarkSet { values })
}

/// Joint rotations as (x, y, z) Euler angles in radians, keyed by joint name,
/// plus a rotation of the whole body about the vertical axis.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pose {
    #[serde(default)]
    pub yaw: f64,
    #[serde(default)]
    pub joints: BTreeMap<String, [f64; 3]>,
}

impl Pose {
    pub fn is_identity(&self) -> bool {
        self.yaw == 0.0 && self.joints.values().all(|a| a.iter().all(|&x| x == 0.0))
    }
}

#[derive(Clone, Debug)]
pub struct PosedMesh<'m> {
    pub mesh: &'m MeshApose,
    pub positions: Vec<Point3<f64>>,
}

/// World transform of every joint under `pose`, global yaw included.
pub fn joint_transforms(mesh: &MeshApose, pose: &Pose) -> Result<Vec<Matrix4<f64>>> {
    for name in pose.joints.keys() {
        if mesh.joint_index(name).is_none() {
            return Err(Error::contract("pose_mesh", format!("unknown joint {name:?}")));
        }
    }
    let global = Rotation3::from_axis_angle(&Vector3::y_axis(), pose.yaw).to_homogeneous();
    let mut local: Vec<Matrix4<f64>> = Vec::with_capacity(mesh.joints.len());
    for j in &mesh.joints {
        let [rx, ry, rz] = pose.joints.get(&j.name).copied().unwrap_or([0.0; 3]);
        let pivot = Vector3::from(j.pivot);
        let m = Translation3::from(pivot).to_homogeneous()
            * Rotation3::from_euler_angles(rx, ry, rz).to_homogeneous()
            * Translation3::from(-pivot).to_homogeneous();
        let m = match j.parent {
            Some(p) => local[p] * m,
            None => m,
        };
        local.push(m);
    }
    Ok(local.into_iter().map(|m| global * m).collect())
}

pub fn pose_mesh<'m>(mesh: &'m MeshApose, pose: &Pose) -> Result<PosedMesh<'m>> {
    if pose.is_identity() {
        return Ok(mesh.identity_pose());
    }
    let xf = joint_transforms(mesh, pose)?;
    let positions = mesh
        .vertices
        .iter()
        .zip(&mesh.vertex_joint)
        .map(|(v, &j)| xf[j].transform_point(v))
        .collect();
    Ok(PosedMesh { mesh, positions })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    /// Pixels per world unit.
    Orthographic { scale: f64 },
    /// Vertical field of view in radians.
    Perspective { fov_y: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub eye: Point3<f64>,
    pub look_at: Point3<f64>,
    pub up: Unit<Vector3<f64>>,
    pub projection: Projection,
    pub height: usize,
    pub width: usize,
    forward: Vector3<f64>,
    right: Vector3<f64>,
    true_up: Vector3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projected {
    pub x: f64,
    pub y: f64,
    /// Distance along the viewing direction.
    pub depth: f64,
    /// False for points at or behind a perspective camera's eye.
    pub in_front: bool,
}

/// Nearest depth a perspective camera accepts.
pub const NEAR: f64 = 1e-6;

impl Camera {
    pub fn new(
        eye: Point3<f64>,
        look_at: Point3<f64>,
        up: Vector3<f64>,
        projection: Projection,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Config(format!("viewport {height}x{width} must be positive")));
        }
        let dir = look_at - eye;
        if dir.norm() == 0.0 || !dir.norm().is_finite() {
            return Err(Error::Config("camera eye and look_at coincide".into()));
        }
        let forward = dir.normalize();
        let side = forward.cross(&up);
        if side.norm() < 1e-12 {
            return Err(Error::Config("camera up vector is parallel to the view direction".into()));
        }
        match projection {
            Projection::Orthographic { scale } if !(scale > 0.0 && scale.is_finite()) => {
                return Err(Error::Config(format!("orthographic scale {scale} must be positive")))
            }
            Projection::Perspective { fov_y } if !(fov_y > 0.0 && fov_y < std::f64::consts::PI) => {
                return Err(Error::Config(format!("field of view {fov_y} must lie in (0, pi)")))
            }
            _ => {}
        }
        let right = side.normalize();
        let true_up = right.cross(&forward);
        Ok(Camera { eye, look_at, up: Unit::new_normalize(up), projection, height, width, forward, right, true_up })
    }

    /// Orthographic camera in front of the character (on +z) looking at `target`.
    pub fn front(target: Point3<f64>, scale: f64, height: usize, width: usize) -> Result<Self> {
        Camera::new(
            target + Vector3::new(0.0, 0.0, 10.0),
            target,
            Vector3::y(),
            Projection::Orthographic { scale },
            height,
            width,
        )
    }

    pub fn forward(&self) -> Vector3<f64> {
        self.forward
    }

    pub fn project(&self, p: &Point3<f64>) -> Projected {
        let d = p - self.eye;
        let depth = d.dot(&self.forward);
        let (sx, sy) = (d.dot(&self.right), d.dot(&self.true_up));
        let (cx, cy) = (self.width as f64 / 2.0, self.height as f64 / 2.0);
        match self.projection {
            Projection::Orthographic { scale } => {
                Projected { x: cx + scale * sx, y: cy - scale * sy, depth, in_front: true }
            }
            Projection::Perspective { fov_y } => {
                let focal = cy / (fov_y / 2.0).tan();
                if depth <= NEAR {
                    return Projected { x: f64::NAN, y: f64::NAN, depth, in_front: false };
                }
                Projected { x: cx + focal * sx / depth, y: cy - focal * sy / depth, depth, in_front: true }
            }
        }
    }

    pub fn is_perspective(&self) -> bool {
        matches!(self.projection, Projection::Perspective { .. })
    }
}
