//! The weight-shared multi-view renderer and the dense-pose detector.
//!
//! Views of a sheet travel through the batch dimension: item `b * n + i` is
//! view `i` of sample `b`. Every per-view network is the same set of weights,
//! so the parameter count never depends on `n`.

mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use params::{
    decode_checkpoint, decode_opt_state, encode_checkpoint, encode_opt_state, load_checkpoint, save_checkpoint,
    Bound, ParamStore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, OPTIMIZER_MAGIC,
};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.1;
/// Logit added to the rendered alpha at occupied target pixels and subtracted at empty ones.
const ALPHA_PRIOR: f64 = 6.0;
const PIXEL_NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    /// Renderer base width; encoder stages use C, 2C, 4C, 8C.
    pub base_channels: usize,
    pub detector_channels: usize,
    /// How many of the three inner decoder blocks exchange messages, deepest first.
    pub message_blocks: usize,
    /// Cross-view exchange and weighted averaging; off gives independent
    /// per-view networks joined by a plain mean at the head.
    pub cinn: bool,
    pub grid_sample: bool,
    /// Detector runs on the renderer's encoder instead of its own.
    pub share_encoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 16,
            detector_channels: 8,
            message_blocks: 3,
            cinn: true,
            grid_sample: true,
            share_encoder: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.message_blocks > 3 {
            return Err(Error::Config(format!("message_blocks {} outside 0..=3", self.message_blocks)));
        }
        if self.base_channels < 4 || !self.base_channels.is_multiple_of(2) {
            return Err(Error::Config(format!("base_channels {} must be even and at least 4", self.base_channels)));
        }
        if self.detector_channels == 0 {
            return Err(Error::Config("detector_channels must be positive".into()));
        }
        Ok(())
    }

    fn encoder_widths(&self) -> [usize; 5] {
        let c = self.base_channels;
        [c, c, 2 * c, 4 * c, 8 * c]
    }

    fn detector_widths(&self) -> [usize; 5] {
        if self.share_encoder {
            return self.encoder_widths();
        }
        let c = self.detector_channels;
        [c, c, 2 * c, 4 * c, 8 * c]
    }

    /// Raw output channels of decoder blocks D1..D3.
    pub fn decoder_widths(&self) -> [usize; 3] {
        let c = self.base_channels;
        [4 * c, 2 * c, 2 * c]
    }
}

/// Channel layout of a decoder block's raw output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Split {
    pub local: usize,
    pub remote: usize,
}

impl Split {
    pub fn of(width: usize) -> Split {
        Split { local: width / 2 - 3, remote: width / 2 }
    }
}

pub fn check_resolution(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(16) || !w.is_multiple_of(16) {
        return Err(Error::Config(format!("image size {h}x{w} must be a positive multiple of 16")));
    }
    Ok(())
}

/// All learnable weights of renderer and detector.
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let e = config.encoder_widths();
        p.add_conv(&mut rng, "enc.stem", 4, e[0], 3, 1.0);
        for s in 1..5 {
            p.add_conv(&mut rng, &format!("enc.s{s}.down"), e[s - 1], e[s], 3, 1.0);
            p.add_conv(&mut rng, &format!("enc.s{s}.res"), e[s], e[s], 3, 0.5);
        }
        let d = config.decoder_widths();
        let sp = d.map(Split::of);
        let inputs = [e[4] + 4, sp[0].local + sp[0].remote + e[3] + 4, sp[1].local + sp[1].remote + e[2] + 4];
        for j in 0..3 {
            p.add_conv(&mut rng, &format!("dec{}.c1", j + 1), inputs[j], d[j], 3, 1.0);
            p.add_conv(&mut rng, &format!("dec{}.c2", j + 1), d[j], d[j], 3, 0.5);
        }
        let c = config.base_channels;
        let head_in = sp[0].remote + sp[1].remote + sp[2].remote + sp[2].local + e[1] + 4;
        p.add_conv(&mut rng, "head.c1", head_in, c, 3, 1.0);
        p.add_conv(&mut rng, "head.c2", c + 4, c, 3, 1.0);
        p.add_conv(&mut rng, "head.out", c, 4, 3, 0.5);

        let q = config.detector_widths();
        if !config.share_encoder {
            p.add_conv(&mut rng, "det.stem", 3, q[0], 3, 1.0);
            for s in 1..5 {
                p.add_conv(&mut rng, &format!("det.s{s}.down"), q[s - 1], q[s], 3, 1.0);
                for u in 0..2 {
                    p.add_conv(&mut rng, &format!("det.s{s}.r{u}a"), q[s], q[s], 3, 1.0);
                    p.add_conv(&mut rng, &format!("det.s{s}.r{u}b"), q[s], q[s], 3, 0.5);
                }
            }
        }
        // five residual blocks from 1/16 back to full resolution
        for (i, s) in (0..5).rev().enumerate() {
            let name = format!("det.dec{}", i + 1);
            if s < 4 {
                p.add_conv(&mut rng, &format!("{name}.fuse"), q[s + 1] + q[s], q[s], 3, 1.0);
            }
            p.add_conv(&mut rng, &format!("{name}.a"), q[s], q[s], 3, 1.0);
            p.add_conv(&mut rng, &format!("{name}.b"), q[s], q[s], 3, 0.5);
        }
        p.add_conv(&mut rng, "det.out", q[0], 4, 3, 0.5);
        Ok(Model { config, params: p })
    }

    /// Trainable weights of the renderer alone.
    pub fn renderer_param_count(&self) -> usize {
        self.params
            .names()
            .iter()
            .zip(self.params.tensors())
            .filter(|(n, _)| !n.starts_with("det."))
            .map(|(_, t)| t.numel())
            .sum()
    }
}

fn conv<'t, T: Real>(p: &Bound<'t, T>, name: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let w = p.get(&format!("{name}.w"))?;
    let pad = w.shape()[2] / 2;
    x.conv2d(&w, &p.get(&format!("{name}.b"))?, 1, pad)
}

/// Rescales every pixel's feature vector to unit mean square. Without it
/// unnormalised activations grow quickly under Adam and the sigmoid heads saturate.
fn pixel_norm<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let c = x.shape()[1] as f64;
    Ok(x.channel_normalize(c * PIXEL_NORM_EPS)?.scale(c.sqrt()))
}

fn conv_act<'t, T: Real>(p: &Bound<'t, T>, name: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    pixel_norm(conv(p, name, x)?.leaky_relu(LEAKY_SLOPE)?)
}

/// `x + conv_b(act(conv_a(x)))`, followed by the activation.
fn residual<'t, T: Real>(p: &Bound<'t, T>, a: &str, b: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let y = conv(p, b, conv_act(p, a, x)?)?;
    pixel_norm(x.add(&y)?.leaky_relu(LEAKY_SLOPE)?)
}

/// Encoder features of every view: full resolution, then 1/2 .. 1/16.
pub struct SheetEncoding<'t, T: Real> {
    pub levels: [Var<'t, T>; 5],
    pub views: usize,
}

/// Detached encoder outputs that can seed any number of later renders.
#[derive(Clone, Debug, PartialEq)]
pub struct CachedEncoding<T: Real> {
    pub levels: Vec<Tensor<T>>,
    pub views: usize,
}

impl<'t, T: Real> SheetEncoding<'t, T> {
    pub fn detach(&self) -> CachedEncoding<T> {
        CachedEncoding { levels: self.levels.iter().map(|v| (*v.value()).clone()).collect(), views: self.views }
    }
}

impl<T: Real> CachedEncoding<T> {
    pub fn attach<'t>(&self, tape: &'t Tape<T>) -> SheetEncoding<'t, T> {
        let l = &self.levels;
        SheetEncoding {
            levels: [0, 1, 2, 3, 4].map(|i| tape.constant(l[i].clone())),
            views: self.views,
        }
    }
}

/// Encodes a `[B * n, 4, H, W]` stack of sheet images. The pose never
/// enters the encoder.
pub fn encode<'t, T: Real>(p: &Bound<'t, T>, sheet: Var<'t, T>, views: usize) -> Result<SheetEncoding<'t, T>> {
    let [bn, c, h, w] = sheet.value().dims4()?;
    check_resolution(h, w)?;
    if c != 4 || views == 0 || bn % views != 0 {
        return Err(Error::contract("encode", format!("sheet {:?} with {views} views", sheet.shape())));
    }
    let stem = conv_act(p, "enc.stem", sheet)?;
    let mut levels = vec![stem];
    let mut x = stem;
    for s in 1..5 {
        x = conv_act(p, &format!("enc.s{s}.down"), x.avg_pool2()?)?;
        x = x.add(&conv_act(p, &format!("enc.s{s}.res"), x)?)?;
        levels.push(x);
    }
    Ok(SheetEncoding { levels: levels.try_into().map_err(|_| Error::contract("encode", "level count"))?, views })
}

pub struct BlockOutput<'t, T: Real> {
    pub raw: Var<'t, T>,
    pub local: Var<'t, T>,
    pub remote: Var<'t, T>,
    pub flow: Var<'t, T>,
    pub weight: Var<'t, T>,
    /// `remote` after flow warping (or unchanged with warping disabled).
    pub warped: Var<'t, T>,
}

/// One decoder block: two convolutions over the concatenated inputs, split
/// into local/remote features, a bounded flow and a sigmoid weight.
pub fn decoder_block<'t, T: Real>(
    p: &Bound<'t, T>,
    j: usize,
    inputs: &[Var<'t, T>],
    warp: bool,
) -> Result<BlockOutput<'t, T>> {
    let tape = inputs[0].tape();
    let x = tape.concat_channels(inputs)?;
    let raw = conv(p, &format!("dec{j}.c2"), conv_act(p, &format!("dec{j}.c1"), x)?)?;
    let [_, width, h, _] = raw.value().dims4()?;
    let sp = Split::of(width);
    let local = raw.slice_channels(0, sp.local)?.leaky_relu(LEAKY_SLOPE)?;
    let remote = raw.slice_channels(sp.local, sp.remote)?.leaky_relu(LEAKY_SLOPE)?;
    let flow = raw.slice_channels(sp.local + sp.remote, 2)?.tanh().scale(h as f64 / 4.0);
    let weight = raw.slice_channels(sp.local + sp.remote + 2, 1)?.sigmoid();
    let warped = if warp { remote.grid_sample(&flow)? } else { remote };
    Ok(BlockOutput { raw, local, remote, flow, weight, warped })
}

/// Weighted mean of warped remote features over the `n` views of each sample.
pub fn cross_view_exchange<'t, T: Real>(out: &BlockOutput<'t, T>, views: usize) -> Result<Var<'t, T>> {
    out.warped.view_mean(Some(&out.weight), views)
}

/// Renders `[B, 4, H, W]` RGBA for target poses `udp` (`[B, 4, H, W]`).
pub fn render<'t, T: Real>(
    p: &Bound<'t, T>,
    cfg: &ModelConfig,
    enc: &SheetEncoding<'t, T>,
    udp: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let n = enc.views;
    let [b, c, h, w] = udp.value().dims4()?;
    let [bn, _, eh, ew] = enc.levels[0].value().dims4()?;
    if c != 4 || bn != b * n || (eh, ew) != (h, w) {
        return Err(Error::contract(
            "render",
            format!("udp {:?} against {n}-view encoding {:?}", udp.shape(), enc.levels[0].shape()),
        ));
    }
    let per_view = udp.repeat_batch(n)?;
    let mut prev: Option<(Var<'t, T>, Var<'t, T>)> = None;
    let mut messages = Vec::with_capacity(3);
    let mut last_local = None;
    for j in 1..=3 {
        let level = 5 - j;
        let skip = enc.levels[level];
        let [_, _, sh, sw] = skip.value().dims4()?;
        let pose = per_view.resize_nearest(sh, sw)?;
        let inputs = match prev {
            None => vec![skip, pose],
            Some((local, remote)) => vec![local.upsample_nearest(2)?, remote.upsample_nearest(2)?, skip, pose],
        };
        let out = decoder_block(p, j, &inputs, cfg.grid_sample)?;
        let averaged = if cfg.cinn { cross_view_exchange(&out, n)? } else { out.warped.view_mean(None, n)? };
        let forward = if cfg.cinn && j <= cfg.message_blocks { averaged.repeat_batch(n)? } else { out.warped };
        messages.push(averaged);
        last_local = Some(out.local);
        prev = Some((out.local, forward));
    }
    let tape = udp.tape();
    let half_h = enc.levels[1].value().dims4()?[2];
    let mut head_in = Vec::with_capacity(6);
    for (j, m) in messages.iter().enumerate() {
        head_in.push(m.upsample_nearest(half_h / m.value().dims4()?[2])?);
        debug_assert!(j < 3);
    }
    let local = last_local.expect("three blocks").view_mean(None, n)?;
    head_in.push(local.upsample_nearest(2)?);
    head_in.push(enc.levels[1].view_mean(None, n)?);
    head_in.push(udp.resize_nearest(half_h, enc.levels[1].value().dims4()?[3])?);
    let x = conv_act(p, "head.c1", tape.concat_channels(&head_in)?)?.upsample_nearest(2)?;
    let x = conv_act(p, "head.c2", tape.concat_channels(&[x, udp])?)?;
    let out = conv(p, "head.out", x)?;
    // Alpha starts from the target occupancy; the network learns a correction.
    let prior = udp.slice_channels(3, 1)?.add_scalar(-0.5).scale(2.0 * ALPHA_PRIOR);
    let alpha = out.slice_channels(3, 1)?.add(&prior)?;
    Ok(tape.concat_channels(&[out.slice_channels(0, 3)?, alpha])?.sigmoid())
}

/// Predicts `[N, 4, H, W]` dense pose from `[N, 3, H, W]` RGB.
pub fn detect<'t, T: Real>(p: &Bound<'t, T>, cfg: &ModelConfig, rgb: Var<'t, T>) -> Result<Var<'t, T>> {
    let [n, c, h, w] = rgb.value().dims4()?;
    check_resolution(h, w)?;
    if c != 3 {
        return Err(Error::contract("detect", format!("expected RGB input, got {:?}", rgb.shape())));
    }
    let levels: Vec<Var<'t, T>> = if cfg.share_encoder {
        let ones = rgb.tape().constant(Tensor::full(vec![n, 1, h, w], T::one()));
        let rgba = rgb.tape().concat_channels(&[rgb, ones])?;
        encode(p, rgba, 1)?.levels.to_vec()
    } else {
        let mut x = conv_act(p, "det.stem", rgb)?;
        let mut levels = vec![x];
        for s in 1..5 {
            x = conv_act(p, &format!("det.s{s}.down"), x.avg_pool2()?)?;
            for u in 0..2 {
                x = residual(p, &format!("det.s{s}.r{u}a"), &format!("det.s{s}.r{u}b"), x)?;
            }
            levels.push(x);
        }
        levels
    };
    let mut x = levels[4];
    for (i, s) in (0..5).rev().enumerate() {
        let name = format!("det.dec{}", i + 1);
        if s < 4 {
            x = conv_act(p, &format!("{name}.fuse"), x.tape().concat_channels(&[x.upsample_nearest(2)?, levels[s]])?)?;
        }
        x = residual(p, &format!("{name}.a"), &format!("{name}.b"), x)?;
    }
    Ok(conv(p, "det.out", x)?.sigmoid())
}

/// Mean of `k` detections per sample plus the individual detections.
pub fn detect_averaged<'t, T: Real>(
    p: &Bound<'t, T>,
    cfg: &ModelConfig,
    rgb: Var<'t, T>,
    k: usize,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    if k == 0 {
        return Err(Error::EmptySet("detect_averaged"));
    }
    let each = detect(p, cfg, rgb)?;
    Ok((each.view_mean(None, k)?, each))
}
