use conr::tensor::gradcheck::{self, GradCase};
use conr::tensor::kernels::{self, ConvGeom};
use conr::{AdamW, AdamWConfig, OptState, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct six-loop cross-correlation (plus batch loop).
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
    let [n, cin, h, wd] = x.dims4().unwrap();
    let [cout, _, kh, kw] = w.dims4().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for bi in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((bi * cin + ci) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((co * cin + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((bi * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_forward_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (stride, pad, k) in [(1, 0, 3), (1, 1, 3), (2, 1, 3), (1, 2, 5), (1, 0, 1)] {
        let x = random(&mut rng, &[2, 3, 5, 5]);
        let w = random(&mut rng, &[4, 3, k, k]);
        let b = random(&mut rng, &[4]);
        let tape = Tape::new();
        let y = tape
            .constant(x.clone())
            .conv2d(&tape.constant(w.clone()), &tape.constant(b.clone()), stride, pad)
            .unwrap();
        let reference = naive_conv(&x, &w, &b, stride, pad);
        let got = y.value();
        // sums are accumulated in a different order, so compare to rounding level
        for (a, r) in got.data().iter().zip(&reference) {
            assert!((a - r).abs() < 1e-12, "stride {stride} pad {pad}: {a} vs {r}");
        }
    }
}

#[test]
fn every_op_passes_finite_differences() {
    let reports = gradcheck::run_cases(&gradcheck::default_suite(7, 10)).unwrap();
    for r in &reports {
        assert!(r.instances >= 10);
        assert!(r.passed, "{} max rel error {:.3e}", r.name, r.max_rel_error);
    }
    assert!(reports.iter().any(|r| r.name == "conv2d"));
    assert!(reports.iter().any(|r| r.name == "grid_sample_bilinear"));
}

#[test]
fn corrupted_conv_backward_is_caught() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let case = GradCase {
        name: "conv2d".into(),
        inputs: vec![random(&mut rng, &[1, 2, 5, 5]), random(&mut rng, &[3, 2, 3, 3]), random(&mut rng, &[3])],
        build: Box::new(|tape, v| {
            let (x, w, b) = (v[0].value(), v[1].value(), v[2].value());
            let geom = ConvGeom::new(x.shape(), w.shape(), b.shape(), 1, 1)?;
            let out = kernels::conv2d_forward(&geom, x.data(), w.data(), b.data());
            let value = Tensor::new(vec![1, 3, 5, 5], out)?;
            Ok(tape.custom(
                v,
                value,
                Box::new(move |inputs, g| {
                    let mut gx = Tensor::zeros(inputs[0].shape().to_vec());
                    let mut gw = Tensor::zeros(inputs[1].shape().to_vec());
                    let mut gb = Tensor::zeros(inputs[2].shape().to_vec());
                    kernels::conv2d_backward(
                        &geom,
                        inputs[0].data(),
                        inputs[1].data(),
                        g.data(),
                        Some(gx.data_mut()),
                        Some(gw.data_mut()),
                        Some(gb.data_mut()),
                    );
                    // the fault: weight gradient off by 10%
                    let gw = gw.map(|v| v * 1.1);
                    vec![Some(gx), Some(gw), Some(gb)]
                }),
            ))
        }),
    };
    let reports = gradcheck::run_cases(&[case]).unwrap();
    assert_eq!(reports[0].name, "conv2d");
    assert!(!reports[0].passed);
}

/// Textbook Adam, written independently of the crate's optimizer.
fn reference_adam(p0: &[f64], grads: &[Vec<f64>], lr: f64, b1: f64, b2: f64, eps: f64) -> Vec<Vec<f64>> {
    let mut p = p0.to_vec();
    let mut m = vec![0.0; p.len()];
    let mut v = vec![0.0; p.len()];
    let mut out = Vec::new();
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
        out.push(p.clone());
    }
    out
}

#[test]
fn adamw_without_decay_is_adam() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p0: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let grads: Vec<Vec<f64>> = (0..10).map(|_| (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
    let cfg = AdamWConfig { learning_rate: 0.05, weight_decay: 0.0, ..Default::default() };
    let expected = reference_adam(&p0, &grads, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon);
    let opt = AdamW::new(cfg).unwrap();
    let mut params = vec![Tensor::new(vec![6], p0).unwrap()];
    let mut state = OptState::new(&params);
    for (g, exp) in grads.iter().zip(&expected) {
        opt.step(&["p".to_string()], &mut params, &[Tensor::new(vec![6], g.clone()).unwrap()], &mut state).unwrap();
        for (a, e) in params[0].data().iter().zip(exp) {
            assert!((a - e).abs() < 1e-12);
        }
    }
    assert_eq!(state.step, 10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn weighted_set_mean_is_permutation_invariant(seed in any::<u64>(), n in 1usize..6, rot in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<Tensor<f64>> = (0..n).map(|_| random(&mut rng, &[1, 3, 2, 2])).collect();
        let ws: Vec<Tensor<f64>> = (0..n).map(|_| random(&mut rng, &[1, 1, 2, 2])).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.rotate_left(rot % n);
        order.swap(0, n - 1);
        let tape = Tape::new();
        let xv: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let wv: Vec<_> = ws.iter().map(|t| tape.constant(t.clone())).collect();
        let a = tape.weighted_set_mean(&xv, &wv).unwrap().value();
        let px: Vec<_> = order.iter().map(|&i| xv[i]).collect();
        let pw: Vec<_> = order.iter().map(|&i| wv[i]).collect();
        let b = tape.weighted_set_mean(&px, &pw).unwrap().value();
        prop_assert!(a.max_abs_diff(&b) <= 1e-6);

        let tape32 = Tape::<f32>::new();
        let xv: Vec<_> = xs.iter().map(|t| tape32.constant(t.cast())).collect();
        let wv: Vec<_> = ws.iter().map(|t| tape32.constant(t.cast())).collect();
        let a = tape32.weighted_set_mean(&xv, &wv).unwrap().value();
        let px: Vec<_> = order.iter().map(|&i| xv[i]).collect();
        let pw: Vec<_> = order.iter().map(|&i| wv[i]).collect();
        let b = tape32.weighted_set_mean(&px, &pw).unwrap().value();
        prop_assert!(a.max_abs_diff(&b) <= 1e-4);
    }
}
