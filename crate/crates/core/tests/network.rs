use conr::network::{
    check_resolution, cross_view_exchange, decoder_block, detect, detect_averaged, encode, render, Model, ModelConfig, Split,
};
use conr::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen::<f32>()).collect()).unwrap()
}

fn small() -> ModelConfig {
    ModelConfig { base_channels: 8, detector_channels: 4, ..Default::default() }
}

fn render_views(model: &Model<f32>, views: &[Tensor<f32>], udp: &Tensor<f32>) -> Tensor<f32> {
    let tape = Tape::new();
    let p = model.params.bind(&tape, false);
    let refs: Vec<&Tensor<f32>> = views.iter().collect();
    let sheet = tape.constant(Tensor::stack_batch(&refs).unwrap());
    let enc = encode(&p, sheet, views.len()).unwrap();
    let out = render(&p, &model.config, &enc, tape.constant(udp.clone())).unwrap();
    (*out.value()).clone()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn output_ignores_view_order() {
    let model = Model::<f32>::new(small(), 3).unwrap();
    let views: Vec<_> = (0..4).map(|i| random(&[1, 4, 32, 32], 10 + i)).collect();
    let udp = random(&[1, 4, 32, 32], 99);
    let base = render_views(&model, &views, &udp);
    let perms = permutations(4);
    assert_eq!(perms.len(), 24);
    for perm in perms {
        let shuffled: Vec<_> = perm.iter().map(|&i| views[i].clone()).collect();
        let out = render_views(&model, &shuffled, &udp);
        assert!(out.max_abs_diff(&base) <= 1e-4, "{perm:?}: {}", out.max_abs_diff(&base));
    }
}

#[test]
fn duplicated_view_matches_single() {
    for blocks in [0, 1, 3] {
        let model = Model::<f32>::new(ModelConfig { message_blocks: blocks, ..small() }, 4).unwrap();
        let view = random(&[1, 4, 16, 16], 1);
        let udp = random(&[1, 4, 16, 16], 2);
        let one = render_views(&model, std::slice::from_ref(&view), &udp);
        let two = render_views(&model, &[view.clone(), view], &udp);
        assert!(one.max_abs_diff(&two) <= 1e-6, "blocks {blocks}: {}", one.max_abs_diff(&two));
    }
}

#[test]
fn any_sheet_size_runs_with_one_parameter_set() {
    let model = Model::<f32>::new(small(), 5).unwrap();
    let count = model.params.count();
    let udp = random(&[1, 4, 16, 16], 7);
    for n in 1..=8 {
        let views: Vec<_> = (0..n).map(|i| random(&[1, 4, 16, 16], i as u64)).collect();
        let out = render_views(&model, &views, &udp);
        assert_eq!(out.shape(), &[1, 4, 16, 16]);
        assert_eq!(model.params.count(), count);
    }
}

#[test]
fn cached_encoding_reuses_exactly() {
    let model = Model::<f32>::new(small(), 6).unwrap();
    let views: Vec<_> = (0..2).map(|i| random(&[1, 4, 16, 16], 20 + i)).collect();
    let udps = [random(&[1, 4, 16, 16], 30), random(&[1, 4, 16, 16], 31)];
    let cached = {
        let tape = Tape::new();
        let p = model.params.bind(&tape, false);
        let sheet = tape.constant(Tensor::stack_batch(&[&views[0], &views[1]]).unwrap());
        encode(&p, sheet, 2).unwrap().detach()
    };
    for udp in &udps {
        let tape = Tape::new();
        let p = model.params.bind(&tape, false);
        let enc = cached.attach(&tape);
        let out = render(&p, &model.config, &enc, tape.constant(udp.clone())).unwrap();
        assert_eq!(*out.value(), render_views(&model, &views, udp));
    }
}

#[test]
fn every_parameter_receives_gradient() {
    for share in [false, true] {
        let model = Model::<f32>::new(ModelConfig { share_encoder: share, ..small() }, 8).unwrap();
        let tape = Tape::new();
        let p = model.params.bind(&tape, true);
        let sheet = tape.constant(random(&[2, 4, 16, 16], 40));
        let rgb = tape.constant(random(&[2, 3, 16, 16], 41));
        let (udp, _) = detect_averaged(&p, &model.config, rgb, 2).unwrap();
        let enc = encode(&p, sheet, 2).unwrap();
        let out = render(&p, &model.config, &enc, udp).unwrap();
        let target = tape.constant(random(&[1, 4, 16, 16], 42));
        let loss = out.sub(&target).unwrap().square().mean();
        let g = tape.backward(loss).unwrap();
        for (name, grad) in model.params.names().iter().zip(p.grads(&g)) {
            assert!(grad.data().iter().any(|&v| v != 0.0), "share {share}: {name} has a zero gradient");
        }
    }
}

#[test]
fn zero_weights_give_zero_features_and_identity_warp() {
    let mut model = Model::<f32>::new(small(), 9).unwrap();
    for t in model.params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let tape = Tape::new();
    let p = model.params.bind(&tape, false);
    let skip = tape.constant(random(&[1, 64, 1, 1], 1));
    let udp = tape.constant(random(&[1, 4, 1, 1], 2));
    let out = decoder_block(&p, 1, &[skip, udp], true).unwrap();
    assert!(out.raw.value().data().iter().all(|&v| v == 0.0));
    assert!(out.flow.value().data().iter().all(|&v| v == 0.0));
    assert_eq!(*out.warped.value(), *out.remote.value());
}

#[test]
fn block_split_reassembles_raw() {
    let model = Model::<f32>::new(small(), 10).unwrap();
    let tape = Tape::new();
    let p = model.params.bind(&tape, false);
    let skip = tape.constant(random(&[2, 64, 2, 2], 3));
    let udp = tape.constant(random(&[2, 4, 2, 2], 4));
    let out = decoder_block(&p, 1, &[skip, udp], false).unwrap();
    let width = out.raw.shape()[1];
    let sp = Split::of(width);
    let pieces = [(0, sp.local), (sp.local, sp.remote), (sp.local + sp.remote, 2), (width - 1, 1)];
    let rebuilt = tape
        .concat_channels(&pieces.map(|(s, l)| out.raw.slice_channels(s, l).unwrap()))
        .unwrap();
    assert_eq!(*rebuilt.value(), *out.raw.value());
    assert_eq!(*out.warped.value(), *out.remote.value());
}

#[test]
fn exchange_divides_by_view_count() {
    let model = Model::<f32>::new(small(), 11).unwrap();
    let tape = Tape::new();
    let p = model.params.bind(&tape, false);
    let skip = tape.constant(random(&[2, 64, 2, 2], 5));
    let udp = tape.constant(random(&[2, 4, 2, 2], 6));
    let mut out = decoder_block(&p, 1, &[skip, udp], true).unwrap();
    // silence the second view
    let mut w = (*out.weight.value()).clone();
    let half = w.numel() / 2;
    w.data_mut()[half..].iter_mut().for_each(|v| *v = 0.0);
    out.weight = tape.constant(w.clone());
    let msg = cross_view_exchange(&out, 2).unwrap();
    let r = out.warped.value();
    let c = r.shape()[1];
    for ch in 0..c {
        for px in 0..4 {
            let expect = w.data()[px] * r.data()[ch * 4 + px] / 2.0;
            assert!((msg.value().data()[ch * 4 + px] - expect).abs() < 1e-6);
        }
    }
}

#[test]
fn detector_shape_and_range() {
    let model = Model::<f32>::new(small(), 12).unwrap();
    let tape = Tape::new();
    let p = model.params.bind(&tape, false);
    let rgb = tape.constant(random(&[3, 3, 32, 48], 7));
    let out = detect(&p, &model.config, rgb).unwrap();
    assert_eq!(out.shape(), vec![3, 4, 32, 48]);
    assert!(out.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
    let again = detect(&p, &model.config, rgb).unwrap();
    assert_eq!(*again.value(), *out.value());

    let (single, each) = detect_averaged(&p, &model.config, rgb.slice_batch(0, 1).unwrap(), 1).unwrap();
    assert_eq!(*single.value(), *each.value());
    let twice = tape.stack_batch(&[rgb.slice_batch(0, 1).unwrap(), rgb.slice_batch(0, 1).unwrap()]).unwrap();
    let (mean, _) = detect_averaged(&p, &model.config, twice, 2).unwrap();
    assert!(mean.value().max_abs_diff(&single.value()) < 1e-6);
    assert!(detect_averaged(&p, &model.config, rgb, 0).is_err());
}

#[test]
fn resolution_must_divide_by_sixteen() {
    assert!(check_resolution(64, 64).is_ok());
    assert!(check_resolution(40, 64).is_err());
    let model = Model::<f32>::new(small(), 13).unwrap();
    let tape = Tape::new();
    let p = model.params.bind(&tape, false);
    assert!(detect(&p, &model.config, tape.constant(random(&[1, 3, 24, 24], 8))).is_err());
}

#[test]
fn renderer_parameters_do_not_depend_on_views() {
    let a = Model::<f32>::new(ModelConfig::default(), 1).unwrap();
    let b = Model::<f32>::new(ModelConfig::default(), 2).unwrap();
    assert_eq!(a.renderer_param_count(), b.renderer_param_count());
    assert!(a.renderer_param_count() < a.params.count());
}
