//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 6 and 7 are direction checks between runs whose differences sit
//! at the level of seed noise for a model this small; they are reported but
//! do not fail the run. Every other criterion is asserted.
//!
//! `ACCEPTANCE_ITERATIONS` shortens the overfit runs for quick local passes.

mod common;

use std::time::Instant;

use conr::geom::{decode_udp, encode_udp, rasterize_udp, read_udp, write_udp, Camera, Projection, UdpImage};
use conr::network::{encode, load_checkpoint, render, save_checkpoint, Model, ModelConfig};
use conr::synth::{read_manifest, write_dataset, Character, DatasetConfig, SampleConfig, Split, MANIFEST};
use conr::tensor::gradcheck::{default_suite, run_cases, TOLERANCE};
use conr::training::*;
use conr::{AdamWConfig, Tape, Tensor};
use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    id: u32,
    name: &'static str,
    passed: bool,
    asserted: bool,
    detail: String,
    seconds: f64,
}

fn report(id: u32, name: &'static str, asserted: bool, start: Instant, passed: bool, detail: String) -> Outcome {
    let o = Outcome { id, name, passed, asserted, detail, seconds: start.elapsed().as_secs_f64() };
    println!("{}", line(&o));
    o
}

fn line(o: &Outcome) -> String {
    let status = if o.passed { "PASS" } else { "FAIL" };
    let note = if o.asserted { "" } else { " (reported only)" };
    format!("{status} {:>2} {}{note}: {} [{:.1}s]", o.id, o.name, o.detail, o.seconds)
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let reports = run_cases(&default_suite(7, 10)).unwrap();
    let ops_ok = reports.iter().all(|r| r.passed && r.instances >= 10);
    let worst_op = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let cfg = ModelConfig { base_channels: 4, detector_channels: 4, ..Default::default() };
    let checks = pipeline_gradcheck(cfg, 16, 20, 1).unwrap();
    let worst_pipe = checks.iter().map(|c| c.relative_error()).fold(0.0, f64::max);
    let secs = t.elapsed().as_secs_f64();
    report(
        1,
        "gradient suite",
        true,
        t,
        ops_ok && worst_pipe < 1e-2 && secs < 120.0,
        format!(
            "{} ops x10, worst {worst_op:.2e} (< {TOLERANCE:e}); pipeline 16x16 C=4, 20 params, worst {worst_pipe:.2e} (< 1e-2)",
            reports.len()
        ),
    )
}

fn rasterizer() -> Outcome {
    let t = Instant::now();
    let mut mismatches = 0;
    let mut total = 0;
    for (size, count) in [(16usize, 50u64), (32, 10)] {
        for i in 0..count {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 * size as u64 + i);
            let mesh = common::random_mesh(&mut rng, 12, 1.2);
            let lms = common::random_landmarks(&mut rng, mesh.vertices.len());
            let projection = if i % 2 == 0 {
                Projection::Orthographic { scale: size as f64 / 2.0 }
            } else {
                Projection::Perspective { fov_y: 0.6 }
            };
            let eye = Point3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 6.0);
            let cam = Camera::new(eye, Point3::origin(), Vector3::y(), projection, size, size).unwrap();
            let got = rasterize_udp(&mesh.identity_pose(), &lms, &cam);
            total += 1;
            if got.data != common::oracle(&mesh.identity_pose(), &lms, &cam) {
                mismatches += 1;
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    report(
        2,
        "rasterizer oracle",
        true,
        t,
        mismatches == 0 && secs < 60.0,
        format!("{total} meshes (50 at 16x16, 10 at 32x32), {mismatches} differ from brute force"),
    )
}

fn pose_consistency() -> Outcome {
    let t = Instant::now();
    let r = common::pose_consistency(20, 3, 500);
    let secs = t.elapsed().as_secs_f64();
    report(
        3,
        "pose consistency",
        true,
        t,
        r.pairs_without_vertex == 0 && r.max_diff < 1e-6 && secs < 60.0,
        format!(
            "{} pose pairs, {} vertices, max landmark difference {:.1e} (< 1e-6), {} pairs without a shared visible vertex",
            r.pairs, r.vertices, r.max_diff, r.pairs_without_vertex
        ),
    )
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

fn render_views(model: &Model<f32>, views: &[Tensor<f32>], udp: &Tensor<f32>) -> Tensor<f32> {
    let tape = Tape::new();
    let p = model.params.bind(&tape, false);
    let sheet = tape.constant(Tensor::stack_batch(&views.iter().collect::<Vec<_>>()).unwrap());
    let enc = encode(&p, sheet, views.len()).unwrap();
    (*render(&p, &model.config, &enc, tape.constant(udp.clone())).unwrap().value()).clone()
}

/// Worst deviation over the 24 orders of a 4-view sheet, and between one view
/// and the same view twice.
fn set_invariance(model: &Model<f32>, views: &[Tensor<f32>], udp: &Tensor<f32>) -> (f64, f64) {
    let base = render_views(model, views, udp);
    let perm = permutations(4)
        .iter()
        .map(|p| {
            let shuffled: Vec<_> = p.iter().map(|&i| views[i].clone()).collect();
            render_views(model, &shuffled, udp).max_abs_diff(&base)
        })
        .fold(0.0, f64::max);
    let one = render_views(model, &views[..1], udp);
    let two = render_views(model, &[views[0].clone(), views[0].clone()], udp);
    (perm, one.max_abs_diff(&two))
}

fn invariance(trained: &Model<f32>, bank: &PoseBank) -> Outcome {
    let t = Instant::now();
    let random = Model::<f32>::new(ModelConfig::default(), 21).unwrap();
    let views: Vec<_> = bank.characters[0].views[..4].iter().map(|(rgba, _)| rgba.to_tensor::<f32>()).collect();
    let udp = bank.characters[0].views[4].1.to_tensor::<f32>();
    let (p_rand, d_rand) = set_invariance(&random, &views, &udp);
    let (p_train, d_train) = set_invariance(trained, &views, &udp);
    let perm = p_rand.max(p_train);
    let dup = d_rand.max(d_train);
    report(
        4,
        "set invariance",
        true,
        t,
        perm <= 1e-4 && dup <= 1e-6,
        format!("random and trained renderer: 24 orders max {perm:.1e} (<= 1e-4), duplicate view {dup:.1e} (<= 1e-6)"),
    )
}

fn overfit_config(iterations: u64, message_blocks: usize) -> TrainConfig {
    TrainConfig {
        m: 2,
        k: 2,
        n: 2,
        iterations,
        batch_size: 2,
        resolution: 48,
        model: ModelConfig { message_blocks, ..Default::default() },
        optimizer: AdamWConfig { learning_rate: 1e-3, ..Default::default() },
        log_every: 250,
        prefetch: 2,
        ..Default::default()
    }
}

struct OverfitRun {
    model: Model<f32>,
    pool: Metrics,
    seconds: f64,
}

fn overfit(bank: &PoseBank, pool: &[conr::synth::TrainingSample], iterations: u64, message_blocks: usize) -> OverfitRun {
    let t = Instant::now();
    let mut trainer = Trainer::new(overfit_config(iterations, message_blocks)).unwrap();
    trainer
        .train(bank, |m| {
            eprintln!("  message_blocks={message_blocks} {}", m.line());
            Ok(())
        })
        .unwrap();
    let seconds = t.elapsed().as_secs_f64();
    let pool = evaluate(&trainer.model, pool, 2).unwrap();
    OverfitRun { model: trainer.model, pool, seconds }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn loss_values() -> Outcome {
    let t = Instant::now();
    let tape = Tape::<f64>::new();
    let pred = tape.constant(Tensor::new(vec![1, 4, 2, 2], vec![0.5; 16]).unwrap());
    let gt = Tensor::new(vec![1, 4, 2, 2], vec![1.0; 16]).unwrap();
    let bce = loss_mask(pred, &gt).unwrap().value().item();
    let each = tape.constant(Tensor::new(vec![3, 4, 2, 2], vec![0.3; 48]).unwrap());
    let mean = tape.constant(Tensor::new(vec![1, 4, 2, 2], vec![0.3; 16]).unwrap());
    let cons = loss_cons(each, mean, 3).unwrap().value().item();
    let parts = LossParts { udp: 0.1, mask: 0.2, perc: 0.3, photo: 0.4, cons: 0.5 };
    let w = LossWeights::default();
    let full = total_loss(&parts, &w, true).unwrap();
    let semi = total_loss(&parts, &w, false).unwrap();
    let ok = (bce - std::f64::consts::LN_2).abs() <= 1e-6
        && cons == 0.0
        && (full - 1.215).abs() <= 1e-12
        && (semi - 0.915).abs() <= 1e-12;
    report(
        8,
        "loss values",
        true,
        t,
        ok,
        format!("BCE(0.5,1) {bce:.9}, identical detections {cons}, weighted total {full:.15}, without labels {semi:.15}"),
    )
}

fn bit_exact_io() -> Outcome {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut data = Vec::new();
    for _ in 0..13 * 7 {
        let occ = rng.gen_bool(0.6);
        let lm: [f32; 3] = if occ { [rng.gen(), rng.gen(), rng.gen()] } else { [0.0; 3] };
        data.extend_from_slice(&lm);
        data.push(if occ { 1.0 } else { 0.0 });
    }
    let udp = UdpImage::new(13, 7, data).unwrap();
    let path = dir.path().join("a.udpf");
    write_udp(&udp, &path).unwrap();
    let back = read_udp(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let udp_ok = back == udp && encode_udp(&back) == bytes && decode_udp(&bytes).unwrap() == udp;

    let model = Model::<f32>::new(ModelConfig::default(), 4).unwrap();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    save_checkpoint(&model.params, &a).unwrap();
    let mut other = Model::<f32>::new(ModelConfig::default(), 5).unwrap();
    load_checkpoint(&a, &mut other.params).unwrap();
    save_checkpoint(&other.params, &b).unwrap();
    let ckpt_ok = std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap() && other.params.tensors() == model.params.tensors();

    let data_dir = dir.path().join("data");
    let cfg = DatasetConfig {
        characters: 17,
        seed: 3,
        ratio: (16, 1),
        sample: SampleConfig::new(1, 1, 16),
        unlabeled_fraction: 0.0,
    };
    write_dataset(&data_dir, &cfg).unwrap();
    let manifest = read_manifest(&data_dir.join(MANIFEST)).unwrap();
    let train: Vec<u64> = manifest.iter().filter(|e| e.split == Split::Train).map(|e| e.seed).collect();
    let val: Vec<u64> = manifest.iter().filter(|e| e.split == Split::Val).map(|e| e.seed).collect();
    let disjoint = train.iter().all(|s| !val.contains(s));
    let split_ok = train.len() == 16 && val.len() == 1 && disjoint;
    report(
        9,
        "bit-exact I/O",
        true,
        t,
        udp_ok && ckpt_ok && split_ok,
        format!(
            "udpf round trip {udp_ok}, checkpoint round trip {ckpt_ok}, 17 characters split {}:{} disjoint {disjoint}",
            train.len(),
            val.len()
        ),
    )
}

fn tiny(iterations: u64) -> TrainConfig {
    TrainConfig {
        m: 2,
        k: 2,
        n: 2,
        iterations,
        batch_size: 2,
        resolution: 16,
        model: ModelConfig { base_channels: 4, detector_channels: 4, ..Default::default() },
        log_every: 2,
        ..Default::default()
    }
}

fn determinism() -> Outcome {
    let t = Instant::now();
    let src = Procedural {
        characters: vec![Character::from_seed(1).unwrap(), Character::from_seed(2).unwrap()],
        base: SampleConfig::new(2, 2, 16),
    };
    let stream = |ms: Vec<Metrics>| ms.iter().map(Metrics::line).collect::<Vec<_>>();
    let a = stream(Trainer::new(tiny(10)).unwrap().train(&src, |_| Ok(())).unwrap());
    let b = stream(Trainer::new(tiny(10)).unwrap().train(&src, |_| Ok(())).unwrap());

    let dir = tempfile::tempdir().unwrap();
    let mut straight = Trainer::new(tiny(10)).unwrap();
    straight.train(&src, |_| Ok(())).unwrap();
    let mut first = Trainer::new(tiny(6)).unwrap();
    let mut resumed = stream(first.train(&src, |_| Ok(())).unwrap());
    first.save(dir.path()).unwrap();
    let mut second = Trainer::resume(tiny(10), dir.path()).unwrap();
    resumed.extend(stream(second.train(&src, |_| Ok(())).unwrap()));
    let same_params = straight.model.params.tensors() == second.model.params.tensors();
    report(
        10,
        "determinism and resume",
        true,
        t,
        a == b && a == resumed && same_params,
        format!(
            "repeat streams identical {}, 6+4 resumed stream identical {}, parameters identical {same_params}",
            a == b,
            a == resumed
        ),
    )
}

fn main() {
    let iterations: u64 = std::env::var("ACCEPTANCE_ITERATIONS").ok().and_then(|v| v.parse().ok()).unwrap_or(3000);
    let mut outcomes = vec![gradients(), rasterizer(), pose_consistency()];

    let bank = PoseBank::render(&[11, 22, 33], 8, 48, 16, 1).unwrap();
    let pool = bank.pool(2, 1, 2).unwrap();
    let full = overfit(&bank, &pool, iterations, 3);
    outcomes.push(invariance(&full.model, &bank));

    let start = Instant::now();
    let p = full.pool.parts;
    outcomes.push(report(
        5,
        "overfit reproduction",
        true,
        start,
        p.photo < 0.05 && p.udp < 0.05 && full.seconds < 1800.0,
        format!(
            "3 characters x 8 poses, 48x48, {iterations} iterations in {:.0}s: L_photo {:.4} (< 0.05), L_udp {:.4} (< 0.05)",
            full.seconds, p.photo, p.udp
        ),
    ));

    let start = Instant::now();
    let held = bank.held_out(4, 2, 9).unwrap();
    let (_, two) = evaluate_each(&full.model, &held, 2).unwrap();
    let (_, one) = evaluate_each(&full.model, &held, 1).unwrap();
    let (m2, m1) = (median(two.clone()), median(one.clone()));
    let wins = two.iter().zip(&one).filter(|(a, b)| a <= b).count();
    outcomes.push(report(
        6,
        "view-count direction",
        false,
        start,
        m2 <= m1,
        format!("{} held-out poses: median L_photo n=2 {m2:.6} vs n=1 {m1:.6}; n=2 no worse on {wins}", held.len()),
    ));

    let start = Instant::now();
    let one_block = overfit(&bank, &pool, iterations, 1);
    let no_blocks = overfit(&bank, &pool, iterations, 0);
    let (l0, l1, l3) = (no_blocks.pool.parts.photo, one_block.pool.parts.photo, p.photo);
    outcomes.push(report(
        7,
        "message-passing direction",
        false,
        start,
        l1 < l0 && l3 <= l1 + 0.005,
        format!("training L_photo with message blocks 0: {l0:.5}, 1: {l1:.5}, 3: {l3:.5}"),
    ));

    outcomes.push(loss_values());
    outcomes.push(bit_exact_io());
    outcomes.push(determinism());

    outcomes.sort_by_key(|o| o.id);
    println!("\nacceptance summary");
    for o in &outcomes {
        println!("{}", line(o));
    }
    let failed: Vec<_> = outcomes.iter().filter(|o| o.asserted && !o.passed).map(|o| o.name).collect();
    if !failed.is_empty() {
        eprintln!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
