//! Helpers shared by the integration tests.
#![allow(dead_code)]

use conr::geom::{pose_mesh, rasterize, Camera, Joint, LandmarkSet, MeshApose, PosedMesh};
use conr::synth::{gen_pose, rng_for, Character};
use nalgebra::Point3;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_mesh(rng: &mut ChaCha8Rng, triangles: usize, extent: f64) -> MeshApose {
    let mut vertices = Vec::new();
    for _ in 0..triangles * 3 {
        vertices.push(Point3::new(
            rng.gen_range(-extent..extent),
            rng.gen_range(-extent..extent),
            rng.gen_range(-3.0..3.0),
        ));
    }
    // a few triangles share vertices so shared edges are exercised
    let mut tris: Vec<[u32; 3]> = (0..triangles as u32).map(|t| [3 * t, 3 * t + 1, 3 * t + 2]).collect();
    for t in 1..triangles {
        if rng.gen_bool(0.3) {
            tris[t][0] = tris[t - 1][1];
            tris[t][1] = tris[t - 1][2];
        }
    }
    let n = vertices.len();
    MeshApose::new(
        vertices,
        tris,
        vec![[0.5; 3]; n],
        vec![Joint { name: "root".into(), parent: None, pivot: [0.0; 3] }],
        vec![0; n],
    )
    .unwrap()
}

/// Brute force: every pixel tests every triangle and keeps the strictly
/// nearest hit.
pub fn oracle(posed: &PosedMesh, lms: &LandmarkSet, cam: &Camera) -> Vec<f32> {
    let proj: Vec<_> = posed.positions.iter().map(|p| cam.project(p)).collect();
    let mut out = vec![0.0f32; cam.height * cam.width * 4];
    for py in 0..cam.height {
        for px in 0..cam.width {
            let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
            let mut best = f64::INFINITY;
            let mut hit: Option<([f64; 3], [usize; 3])> = None;
            for tri in &posed.mesh.triangles {
                let idx = tri.map(|i| i as usize);
                let [a, b, c] = idx.map(|i| proj[i]);
                if !(a.in_front && b.in_front && c.in_front) {
                    continue;
                }
                let e = |p: &conr::geom::Projected, q: &conr::geom::Projected, x: f64, y: f64| {
                    (q.x - p.x) * (y - p.y) - (q.y - p.y) * (x - p.x)
                };
                let area = e(&a, &b, c.x, c.y);
                if area == 0.0 || !area.is_finite() {
                    continue;
                }
                let s = if area > 0.0 { 1.0 } else { -1.0 };
                let mut w = [s * e(&b, &c, x, y), s * e(&c, &a, x, y), s * e(&a, &b, x, y)];
                let edges = [(b, c), (c, a), (a, b)];
                let ok = (0..3).all(|i| {
                    let (p, q) = edges[i];
                    let (dx, dy) = (s * (q.x - p.x), s * (q.y - p.y));
                    w[i] > 0.0 || (w[i] == 0.0 && (dy < 0.0 || (dy == 0.0 && dx > 0.0)))
                });
                if !ok {
                    continue;
                }
                let area = area.abs();
                for wi in &mut w {
                    *wi /= area;
                }
                let (z, wts) = if cam.is_perspective() {
                    let inv = [w[0] / a.depth, w[1] / b.depth, w[2] / c.depth];
                    let sum = inv[0] + inv[1] + inv[2];
                    (1.0 / sum, inv.map(|v| v / sum))
                } else {
                    (w[0] * a.depth + w[1] * b.depth + w[2] * c.depth, w)
                };
                if z < best {
                    best = z;
                    hit = Some((wts, idx));
                }
            }
            if let Some((wts, [i0, i1, i2])) = hit {
                let k = 4 * (py * cam.width + px);
                for ch in 0..3 {
                    let v = wts[0] * lms.values[i0][ch] + wts[1] * lms.values[i1][ch] + wts[2] * lms.values[i2][ch];
                    out[k + ch] = v.clamp(0.0, 1.0) as f32;
                }
                out[k + 3] = 1.0;
            }
        }
    }
    out
}

pub fn random_landmarks(rng: &mut ChaCha8Rng, n: usize) -> LandmarkSet {
    LandmarkSet { values: (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect() }
}

pub struct Consistency {
    /// Pose pairs examined.
    pub pairs: usize,
    /// Pairs in which no vertex was front-most in both poses.
    pub pairs_without_vertex: usize,
    pub vertices: usize,
    /// Largest landmark difference between the two poses, or against the baked value.
    pub max_diff: f64,
}

const PROBE: usize = 17;
const PER_PAIR: usize = 4;

/// For `characters` random characters and `pairs` random pose pairs each,
/// centres an orthographic camera on a vertex so that it projects onto the
/// middle pixel's centre, and compares the landmark rasterized there in both
/// poses. A vertex counts only when a triangle of its own wins the pixel in
/// both poses.
pub fn pose_consistency(characters: usize, pairs: usize, seed: u64) -> Consistency {
    let mut out = Consistency { pairs: 0, pairs_without_vertex: 0, vertices: 0, max_diff: 0.0 };
    let centre = (PROBE / 2) * PROBE + PROBE / 2;
    for c in 0..characters as u64 {
        let ch = Character::from_seed(seed.wrapping_add(c)).unwrap();
        let scale = 0.5 * 64.0 / (ch.radius() * 1.2);
        let mut rng = rng_for(seed ^ c, 11);
        for _ in 0..pairs {
            out.pairs += 1;
            let poses = [gen_pose(rng.gen(), &ch.spec), gen_pose(rng.gen(), &ch.spec)];
            let posed: Vec<_> = poses.iter().map(|p| pose_mesh(&ch.mesh, p).unwrap()).collect();
            let mut order: Vec<usize> = (0..ch.mesh.vertices.len()).collect();
            order.shuffle(&mut rng);
            let mut found = 0;
            for v in order {
                let mut samples = Vec::new();
                for (pose, pm) in poses.iter().zip(&posed) {
                    let cam = Camera::front(pm.positions[v], scale, PROBE, PROBE).unwrap();
                    let owner = rasterize(pm, &cam).triangle[centre];
                    if !owner.is_some_and(|t| ch.mesh.triangles[t as usize].contains(&(v as u32))) {
                        break;
                    }
                    let (_, udp) = ch.render(pose, &cam).unwrap();
                    samples.push([0, 1, 2].map(|i| udp.data[4 * centre + i] as f64));
                }
                if samples.len() < 2 {
                    continue;
                }
                let baked = ch.landmarks.values[v];
                for i in 0..3 {
                    let d = (samples[0][i] - samples[1][i]).abs().max((samples[0][i] - baked[i]).abs());
                    out.max_diff = out.max_diff.max(d);
                }
                out.vertices += 1;
                found += 1;
                if found == PER_PAIR {
                    break;
                }
            }
            if found == 0 {
                out.pairs_without_vertex += 1;
            }
        }
    }
    out
}
