//! Central finite-difference checks of every differentiable op.
//!
//! Each case builds a small graph in double precision, projects its output
//! onto a fixed random direction to get a scalar, and compares the tape's
//! gradient with `(L(x + h) - L(x - h)) / 2h` for every input element.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

pub type BuildFn = Box<dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>>;

pub struct GradCase {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    pub build: BuildFn,
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: String,
    pub shapes: Vec<Vec<usize>>,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct OpReport {
    pub name: String,
    pub instances: usize,
    pub shapes: Vec<Vec<usize>>,
    pub max_rel_error: f64,
    pub passed: bool,
}

pub const TOLERANCE: f64 = 1e-3;
const STEP: f64 = 1e-6;
/// Gradients smaller than this are compared absolutely.
const FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn projected_loss(case: &GradCase, inputs: &[Tensor<f64>], proj: &Option<Tensor<f64>>) -> Result<(f64, Option<Tensor<f64>>)> {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = (case.build)(&tape, &vars)?;
    let proj = match proj {
        Some(p) => p.clone(),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
            let shape = out.shape();
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?
        }
    };
    let loss = out.mul(&tape.constant(proj.clone()))?.sum();
    Ok((loss.value().item(), Some(proj)))
}

/// Runs one case, returning the worst relative error over all input elements.
pub fn check_case(case: &GradCase) -> Result<CaseResult> {
    let (_, proj) = projected_loss(case, &case.inputs, &None)?;
    let tape = Tape::new();
    let vars: Vec<_> = case.inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = (case.build)(&tape, &vars)?;
    let loss = out.mul(&tape.constant(proj.clone().expect("projection")))?.sum();
    let grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(case.inputs[i].shape().to_vec()));
        for j in 0..case.inputs[i].numel() {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[j] += STEP;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[j] -= STEP;
            let (lp, _) = projected_loss(case, &plus, &proj)?;
            let (lm, _) = projected_loss(case, &minus, &proj)?;
            let numeric = (lp - lm) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
        }
    }
    Ok(CaseResult {
        name: case.name.clone(),
        shapes: case.inputs.iter().map(|t| t.shape().to_vec()).collect(),
        max_rel_error: worst,
    })
}

/// Checks all cases and folds instances of the same op into one report line.
pub fn run_cases(cases: &[GradCase]) -> Result<Vec<OpReport>> {
    let mut reports: Vec<OpReport> = Vec::new();
    for case in cases {
        let r = check_case(case)?;
        match reports.iter_mut().find(|rep| rep.name == r.name) {
            Some(rep) => {
                rep.instances += 1;
                rep.max_rel_error = rep.max_rel_error.max(r.max_rel_error);
            }
            None => reports.push(OpReport {
                name: r.name,
                instances: 1,
                shapes: r.shapes,
                max_rel_error: r.max_rel_error,
                passed: true,
            }),
        }
    }
    for rep in &mut reports {
        rep.passed = rep.max_rel_error < TOLERANCE;
    }
    Ok(reports)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Values whose magnitude stays at least `gap` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(gap..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Flow whose sample points keep a fractional part in [0.15, 0.85] and stay
/// strictly inside the image, so no bilinear kink or clamp is within reach.
fn smooth_flow(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Tensor<f64> {
    let mut data = vec![0.0; n * 2 * h * w];
    for b in 0..n {
        for axis in 0..2 {
            let extent = if axis == 0 { w } else { h };
            for i in 0..h {
                for j in 0..w {
                    let base = if axis == 0 { j } else { i };
                    let target = rng.gen_range(0..extent - 1) as f64 + rng.gen_range(0.15..0.85);
                    let off = target - base as f64;
                    data[((b * 2 + axis) * h + i) * w + j] = off;
                }
            }
        }
    }
    Tensor::new(vec![n, 2, h, w], data).expect("shape")
}

/// The full per-op suite: `instances` random cases for every differentiable op.
pub fn default_suite(seed: u64, instances: usize) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    for _ in 0..instances {
        cases.push(GradCase {
            name: "conv2d".into(),
            inputs: vec![
                uniform(&mut rng, &[1, 2, 5, 5], -1.0, 1.0),
                uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0),
                uniform(&mut rng, &[3], -1.0, 1.0),
            ],
            build: Box::new(|_, v| v[0].conv2d(&v[1], &v[2], 1, 1)),
        });
        cases.push(GradCase {
            name: "conv2d_strided".into(),
            inputs: vec![
                uniform(&mut rng, &[2, 2, 5, 5], -1.0, 1.0),
                uniform(&mut rng, &[2, 2, 3, 3], -1.0, 1.0),
                uniform(&mut rng, &[2], -1.0, 1.0),
            ],
            build: Box::new(|_, v| v[0].conv2d(&v[1], &v[2], 2, 1)),
        });
        cases.push(GradCase {
            name: "upsample_nearest".into(),
            inputs: vec![uniform(&mut rng, &[1, 2, 3, 2], -1.0, 1.0)],
            build: Box::new(|_, v| v[0].upsample_nearest(2)),
        });
        cases.push(GradCase {
            name: "resize_nearest".into(),
            inputs: vec![uniform(&mut rng, &[1, 2, 4, 6], -1.0, 1.0)],
            build: Box::new(|_, v| v[0].resize_nearest(3, 2)),
        });
        cases.push(GradCase {
            name: "avg_pool2".into(),
            inputs: vec![uniform(&mut rng, &[2, 1, 4, 4], -1.0, 1.0)],
            build: Box::new(|_, v| v[0].avg_pool2()),
        });
        cases.push(GradCase {
            name: "grid_sample_bilinear".into(),
            inputs: vec![uniform(&mut rng, &[1, 2, 5, 5], -1.0, 1.0), smooth_flow(&mut rng, 1, 5, 5)],
            build: Box::new(|_, v| v[0].grid_sample(&v[1])),
        });
        cases.push(GradCase {
            name: "concat_channels".into(),
            inputs: vec![uniform(&mut rng, &[2, 1, 2, 3], -1.0, 1.0), uniform(&mut rng, &[2, 3, 2, 3], -1.0, 1.0)],
            build: Box::new(|t, v| t.concat_channels(&[v[0], v[1]])),
        });
        cases.push(GradCase {
            name: "slice_channels".into(),
            inputs: vec![uniform(&mut rng, &[2, 4, 2, 2], -1.0, 1.0)],
            build: Box::new(|_, v| v[0].slice_channels(1, 2)),
        });
        cases.push(GradCase {
            name: "leaky_relu".into(),
            inputs: vec![away_from_zero(&mut rng, &[1, 2, 3, 3], 0.05)],
            build: Box::new(|_, v| v[0].leaky_relu(0.1)),
        });
        cases.push(GradCase {
            name: "sigmoid".into(),
            inputs: vec![uniform(&mut rng, &[1, 2, 3, 3], -3.0, 3.0)],
            build: Box::new(|_, v| Ok(v[0].sigmoid())),
        });
        cases.push(GradCase {
            name: "tanh".into(),
            inputs: vec![uniform(&mut rng, &[1, 2, 3, 3], -2.0, 2.0)],
            build: Box::new(|_, v| Ok(v[0].tanh())),
        });
        cases.push(GradCase {
            name: "weighted_set_mean".into(),
            inputs: vec![
                uniform(&mut rng, &[1, 2, 3, 3], -1.0, 1.0),
                uniform(&mut rng, &[1, 2, 3, 3], -1.0, 1.0),
                uniform(&mut rng, &[1, 2, 3, 3], -1.0, 1.0),
                uniform(&mut rng, &[1, 1, 3, 3], 0.0, 1.0),
                uniform(&mut rng, &[1, 1, 3, 3], 0.0, 1.0),
                uniform(&mut rng, &[1, 1, 3, 3], 0.0, 1.0),
            ],
            build: Box::new(|t, v| t.weighted_set_mean(&v[..3], &v[3..])),
        });
        cases.push(GradCase {
            name: "view_mean".into(),
            inputs: vec![uniform(&mut rng, &[4, 2, 2, 2], -1.0, 1.0), uniform(&mut rng, &[4, 1, 2, 2], 0.0, 1.0)],
            build: Box::new(|_, v| v[0].view_mean(Some(&v[1]), 2)),
        });
        cases.push(GradCase {
            name: "mul_channels".into(),
            inputs: vec![uniform(&mut rng, &[2, 3, 2, 2], -1.0, 1.0), uniform(&mut rng, &[2, 1, 2, 2], -1.0, 1.0)],
            build: Box::new(|_, v| v[0].mul_channels(&v[1])),
        });
        cases.push(GradCase {
            name: "elementwise".into(),
            inputs: vec![uniform(&mut rng, &[1, 2, 2, 3], 0.2, 1.5), away_from_zero(&mut rng, &[1, 2, 2, 3], 0.05)],
            build: Box::new(|_, v| {
                let s = v[0].sqrt().add(&v[0].ln())?;
                let p = v[1].abs().mul(&v[0].square())?;
                let q = v[0].sub(&v[1].scale(0.5).add_scalar(0.25))?;
                s.add(&p)?.add(&q)?.add(&v[0].clamp(-10.0, 10.0))
            }),
        });
        cases.push(GradCase {
            name: "channel_normalize".into(),
            inputs: vec![uniform(&mut rng, &[1, 3, 2, 2], -1.0, 1.0)],
            build: Box::new(|_, v| v[0].channel_normalize(1e-6)),
        });
        cases.push(GradCase {
            name: "batch_stack_slice_repeat".into(),
            inputs: vec![uniform(&mut rng, &[1, 2, 2, 2], -1.0, 1.0), uniform(&mut rng, &[2, 2, 2, 2], -1.0, 1.0)],
            build: Box::new(|t, v| {
                let s = t.stack_batch(&[v[0], v[1]])?;
                let r = s.slice_batch(1, 2)?.repeat_batch(2)?;
                t.concat_channels(&[r, s.repeat_batch(1)?.slice_batch(0, 1)?.repeat_batch(4)?])
            }),
        });
        cases.push(GradCase {
            name: "mean".into(),
            inputs: vec![uniform(&mut rng, &[2, 2, 2, 2], -1.0, 1.0)],
            build: Box::new(|_, v| Ok(v[0].mean())),
        });
    }
    cases
}
