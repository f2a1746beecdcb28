use nalgebra::Vector3;

use super::{image::Image4, Camera, LandmarkSet, PosedMesh, Projected, RgbaImage, UdpImage};

/// Direction towards the light, normalized before use.
pub const LIGHT_DIR: [f64; 3] = [0.3, 0.5, 1.0];
/// Floor of the diffuse shading factor.
pub const MIN_SHADE: f64 = 0.3;

/// Per-pixel visibility: the winning triangle and its interpolation weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Coverage {
    pub height: usize,
    pub width: usize,
    pub triangle: Vec<Option<u32>>,
    /// Perspective-correct barycentric weights of the winning triangle.
    pub weights: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
}

impl Coverage {
    pub fn covered(&self) -> usize {
        self.triangle.iter().filter(|t| t.is_some()).count()
    }
}

#[inline]
fn edge(a: &Projected, b: &Projected, px: f64, py: f64) -> f64 {
    (b.x - a.x) * (py - a.y) - (b.y - a.y) * (px - a.x)
}

/// Top-left rule for the edge a->b of a triangle with orientation `sign`.
#[inline]
fn owns_ties(a: &Projected, b: &Projected, sign: f64) -> bool {
    let dx = sign * (b.x - a.x);
    let dy = sign * (b.y - a.y);
    dy < 0.0 || (dy == 0.0 && dx > 0.0)
}

#[inline]
fn inside(w: f64, owns: bool) -> bool {
    w > 0.0 || (w == 0.0 && owns)
}

/// Z-buffer scan conversion at pixel centers. Equal depths keep the
/// lower-indexed triangle. Triangles with a vertex behind a perspective
/// camera are skipped whole.
pub fn rasterize(pm: &PosedMesh<'_>, cam: &Camera) -> Coverage {
    let (h, w) = (cam.height, cam.width);
    let proj: Vec<Projected> = pm.positions.iter().map(|p| cam.project(p)).collect();
    let persp = cam.is_perspective();
    let mut cov = Coverage {
        height: h,
        width: w,
        triangle: vec![None; h * w],
        weights: vec![[0.0; 3]; h * w],
        depth: vec![f64::INFINITY; h * w],
    };
    for (t, tri) in pm.mesh.triangles.iter().enumerate() {
        let [a, b, c] = tri.map(|i| proj[i as usize]);
        if !(a.in_front && b.in_front && c.in_front) {
            continue;
        }
        let signed = edge(&a, &b, c.x, c.y);
        if signed == 0.0 || !signed.is_finite() {
            continue;
        }
        let sign = signed.signum();
        let area = signed.abs();
        let owns = [owns_ties(&b, &c, sign), owns_ties(&c, &a, sign), owns_ties(&a, &b, sign)];

        let x_lo = (a.x.min(b.x).min(c.x) - 0.5).floor().max(0.0);
        let x_hi = (a.x.max(b.x).max(c.x) - 0.5).ceil().min((w - 1) as f64);
        let y_lo = (a.y.min(b.y).min(c.y) - 0.5).floor().max(0.0);
        let y_hi = (a.y.max(b.y).max(c.y) - 0.5).ceil().min((h - 1) as f64);
        if !(x_lo <= x_hi && y_lo <= y_hi) {
            continue;
        }
        for py in y_lo as usize..=y_hi as usize {
            let qy = py as f64 + 0.5;
            for px in x_lo as usize..=x_hi as usize {
                let qx = px as f64 + 0.5;
                let w0 = sign * edge(&b, &c, qx, qy);
                let w1 = sign * edge(&c, &a, qx, qy);
                let w2 = sign * edge(&a, &b, qx, qy);
                if !(inside(w0, owns[0]) && inside(w1, owns[1]) && inside(w2, owns[2])) {
                    continue;
                }
                let (b0, b1, b2) = (w0 / area, w1 / area, w2 / area);
                let (z, wts) = if persp {
                    let (i0, i1, i2) = (b0 / a.depth, b1 / b.depth, b2 / c.depth);
                    let s = i0 + i1 + i2;
                    (1.0 / s, [i0 / s, i1 / s, i2 / s])
                } else {
                    (b0 * a.depth + b1 * b.depth + b2 * c.depth, [b0, b1, b2])
                };
                let k = py * w + px;
                if z < cov.depth[k] {
                    cov.depth[k] = z;
                    cov.triangle[k] = Some(t as u32);
                    cov.weights[k] = wts;
                }
            }
        }
    }
    cov
}

fn interpolate(cov: &Coverage, pm: &PosedMesh<'_>, k: usize, attr: &[[f64; 3]]) -> Option<[f64; 3]> {
    let t = cov.triangle[k]? as usize;
    let [i0, i1, i2] = pm.mesh.triangles[t].map(|i| i as usize);
    let wts = cov.weights[k];
    Some(std::array::from_fn(|a| {
        (wts[0] * attr[i0][a] + wts[1] * attr[i1][a] + wts[2] * attr[i2][a]).clamp(0.0, 1.0)
    }))
}

pub fn rasterize_udp(pm: &PosedMesh<'_>, lms: &LandmarkSet, cam: &Camera) -> UdpImage {
    let cov = rasterize(pm, cam);
    udp_from_coverage(&cov, pm, lms)
}

pub fn udp_from_coverage(cov: &Coverage, pm: &PosedMesh<'_>, lms: &LandmarkSet) -> UdpImage {
    let mut img = Image4::zeros(cov.height, cov.width);
    for k in 0..cov.height * cov.width {
        if let Some(l) = interpolate(cov, pm, k, &lms.values) {
            img.data[4 * k..4 * k + 4].copy_from_slice(&[l[0] as f32, l[1] as f32, l[2] as f32, 1.0]);
        }
    }
    UdpImage(img)
}

/// Flat diffuse factor of triangle `t` at its posed position.
pub fn shade(pm: &PosedMesh<'_>, t: usize) -> f64 {
    let [p0, p1, p2] = pm.mesh.triangles[t].map(|i| pm.positions[i as usize]);
    let n = (p1 - p0).cross(&(p2 - p0));
    let norm = n.norm();
    if norm == 0.0 {
        return MIN_SHADE;
    }
    let light = Vector3::from(LIGHT_DIR).normalize();
    (n.dot(&light) / norm).max(MIN_SHADE)
}

pub fn rasterize_rgba(pm: &PosedMesh<'_>, cam: &Camera) -> RgbaImage {
    let cov = rasterize(pm, cam);
    rgba_from_coverage(&cov, pm)
}

pub fn rgba_from_coverage(cov: &Coverage, pm: &PosedMesh<'_>) -> RgbaImage {
    let shades: Vec<f64> = (0..pm.mesh.triangles.len()).map(|t| shade(pm, t)).collect();
    let mut img = Image4::zeros(cov.height, cov.width);
    for k in 0..cov.height * cov.width {
        if let Some(c) = interpolate(cov, pm, k, &pm.mesh.colors) {
            let s = shades[cov.triangle[k].unwrap() as usize];
            let px = c.map(|v| (v * s).clamp(0.0, 1.0) as f32);
            img.data[4 * k..4 * k + 4].copy_from_slice(&[px[0], px[1], px[2], 1.0]);
        }
    }
    RgbaImage(img)
}
