//! Detector and renderer objectives.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::ParamStore;
use crate::tensor::{Real, Tape, Tensor, Var};

pub const BCE_CLAMP: f64 = 1e-7;
const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub theta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0, beta: 0.05, gamma: 1.0, theta: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma), ("theta", self.theta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} = {v} must be a non-negative number")));
            }
        }
        Ok(())
    }
}

/// One value per loss term.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub udp: f64,
    pub mask: f64,
    pub perc: f64,
    pub photo: f64,
    pub cons: f64,
}

impl LossParts {
    pub fn named(&self) -> [(&'static str, f64); 5] {
        [("l_udp", self.udp), ("l_mask", self.mask), ("l_perc", self.perc), ("l_photo", self.photo), ("l_cons", self.cons)]
    }
}

/// Coefficients applied to (udp, mask, perc, photo, cons). Without dense-pose
/// labels the first two terms vanish.
pub fn coefficients(w: &LossWeights, has_udp_gt: bool) -> [f64; 5] {
    let sup = if has_udp_gt { 1.0 } else { 0.0 };
    [sup, sup * w.alpha, w.beta, w.gamma, w.theta]
}

pub fn total_loss(parts: &LossParts, w: &LossWeights, has_udp_gt: bool) -> Result<f64> {
    let coef = coefficients(w, has_udp_gt);
    let mut total = 0.0;
    for ((name, v), c) in parts.named().into_iter().zip(coef) {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        if c != 0.0 {
            total += c * v;
        }
    }
    Ok(total)
}

fn channel<T: Real>(t: &Tensor<T>, c: usize) -> Result<Tensor<T>> {
    let [n, ch, h, w] = t.dims4()?;
    if c >= ch {
        return Err(Error::contract("channel", format!("channel {c} of {:?}", t.shape())));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        out.extend_from_slice(&t.data()[(b * ch + c) * hw..(b * ch + c + 1) * hw]);
    }
    Tensor::new(vec![n, 1, h, w], out)
}

fn same_dims(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::contract(op, format!("{a:?} against {b:?}")));
    }
    Ok(())
}

/// Masked L1 over the three landmark channels where the label is occupied.
/// The flag is true when the label has no occupied pixel and the loss is 0.
pub fn loss_udp<'t, T: Real>(pred: Var<'t, T>, gt: &Tensor<T>) -> Result<(Var<'t, T>, bool)> {
    same_dims("loss_udp", &pred.shape(), gt.shape())?;
    let [n, _, h, w] = gt.dims4()?;
    let occ = channel(gt, 3)?.map(|v| if v > T::from_f64c(0.5) { T::one() } else { T::zero() });
    let count = occ.data().iter().filter(|&&v| v > T::zero()).count();
    let tape = pred.tape();
    if count == 0 {
        log::warn!("dense-pose label has no occupied pixel; landmark loss is 0");
        return Ok((tape.constant(Tensor::scalar(T::zero())), true));
    }
    let hw = h * w;
    let mut target = Vec::with_capacity(n * 3 * hw);
    for b in 0..n {
        target.extend_from_slice(&gt.data()[b * 4 * hw..(b * 4 + 3) * hw]);
    }
    let target = tape.constant(Tensor::new(vec![n, 3, h, w], target)?);
    let diff = pred.slice_channels(0, 3)?.sub(&target)?.abs();
    let masked = diff.mul_channels(&tape.constant(occ))?;
    Ok((masked.sum().scale(1.0 / (3 * count) as f64), false))
}

/// Mean binary cross-entropy of predicted occupancy (channel 3).
pub fn loss_mask<'t, T: Real>(pred: Var<'t, T>, gt: &Tensor<T>) -> Result<Var<'t, T>> {
    same_dims("loss_mask", &pred.shape(), gt.shape())?;
    let g = channel(gt, 3)?;
    let tape = pred.tape();
    let p = pred.slice_channels(3, 1)?.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    let pos = p.ln().mul(&tape.constant(g.clone()))?;
    let neg = p.scale(-1.0).add_scalar(1.0).ln().mul(&tape.constant(g.map(|v| T::one() - v)))?;
    Ok(pos.add(&neg)?.mean().scale(-1.0))
}

/// Mean per-pixel sample standard deviation of `k` detections around their mean.
pub fn loss_cons<'t, T: Real>(each: Var<'t, T>, mean: Var<'t, T>, k: usize) -> Result<Var<'t, T>> {
    if k == 0 {
        return Err(Error::EmptySet("loss_cons"));
    }
    let [bk, c, h, w] = each.value().dims4()?;
    same_dims("loss_cons", &[bk / k, c, h, w], &mean.shape())?;
    if k == 1 {
        return Ok(each.tape().constant(Tensor::scalar(T::zero())));
    }
    let spread = each.sub(&mean.repeat_batch(k)?)?.square().view_mean(None, k)?;
    Ok(spread.scale(k as f64 / (k - 1) as f64).sqrt().mean())
}

/// RGB over white, `a * (rgb - 1) + 1`, for a `[N, 4, H, W]` RGBA tensor.
pub fn composite_white<'t, T: Real>(rgba: Var<'t, T>) -> Result<Var<'t, T>> {
    let rgb = rgba.slice_channels(0, 3)?;
    let a = rgba.slice_channels(3, 1)?;
    Ok(rgb.add_scalar(-1.0).mul_channels(&a)?.add_scalar(1.0))
}

pub fn composite_white_tensor<T: Real>(rgba: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = rgba.dims4()?;
    if c != 4 {
        return Err(Error::contract("composite", format!("expected RGBA, got {:?}", rgba.shape())));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * 3 * hw);
    for b in 0..n {
        let px = &rgba.data()[b * 4 * hw..(b + 1) * 4 * hw];
        let a = &px[3 * hw..];
        for ch in 0..3 {
            out.extend(px[ch * hw..(ch + 1) * hw].iter().zip(a).map(|(&v, &a)| a * (v - T::one()) + T::one()));
        }
    }
    Tensor::new(vec![n, 3, h, w], out)
}

/// L1 over RGB after compositing both images on white.
pub fn loss_photo<'t, T: Real>(rendered: Var<'t, T>, target: &Tensor<T>) -> Result<Var<'t, T>> {
    same_dims("loss_photo", &rendered.shape(), target.shape())?;
    let t = rendered.tape().constant(composite_white_tensor(target)?);
    Ok(composite_white(rendered)?.sub(&t)?.abs().mean())
}

/// Frozen random three-stage feature extractor standing in for a pretrained
/// perceptual network. Its weights never join the optimised parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualProxy<T: Real> {
    params: ParamStore<T>,
}

pub const PROXY_SEED: u64 = 0x5eed_cafe;
const PROXY_WIDTHS: [usize; 4] = [3, 8, 16, 32];

impl<T: Real> PerceptualProxy<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for s in 0..3 {
            params.add_conv(&mut rng, &format!("stage{s}"), PROXY_WIDTHS[s], PROXY_WIDTHS[s + 1], 3, 1.0);
        }
        PerceptualProxy { params }
    }

    pub fn features<'t>(&self, tape: &'t Tape<T>, rgb: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        let p = self.params.bind(tape, false);
        let mut x = rgb;
        let mut out = Vec::with_capacity(3);
        for s in 0..3 {
            if s > 0 {
                x = x.avg_pool2()?;
            }
            x = x.conv2d(&p.get(&format!("stage{s}.w"))?, &p.get(&format!("stage{s}.b"))?, 1, 1)?.leaky_relu(0.2)?;
            out.push(x.channel_normalize(NORM_EPS)?);
        }
        Ok(out)
    }

    /// Sum over stages of the mean squared difference of unit-normalised features.
    pub fn loss<'t>(&self, a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
        same_dims("loss_perc", &a.shape(), &b.shape())?;
        let tape = a.tape();
        let fa = self.features(tape, a)?;
        let fb = self.features(tape, b)?;
        let mut total: Option<Var<'t, T>> = None;
        for (x, y) in fa.iter().zip(&fb) {
            let term = x.sub(y)?.square().mean();
            total = Some(match total {
                None => term,
                Some(t) => t.add(&term)?,
            });
        }
        Ok(total.expect("three stages"))
    }
}

/// Perceptual distance between a rendered RGBA and a target RGBA, both over white.
pub fn loss_perc<'t, T: Real>(proxy: &PerceptualProxy<T>, rendered: Var<'t, T>, target: &Tensor<T>) -> Result<Var<'t, T>> {
    same_dims("loss_perc", &rendered.shape(), target.shape())?;
    let t = rendered.tape().constant(composite_white_tensor(target)?);
    proxy.loss(composite_white(rendered)?, t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: f64) -> Tensor<f64> {
        Tensor::full(shape.to_vec(), v)
    }

    #[test]
    fn bce_reference_values() {
        let tape = Tape::new();
        let gt = t(&[1, 4, 2, 2], 1.0);
        let half = loss_mask(tape.constant(t(&[1, 4, 2, 2], 0.5)), &gt).unwrap();
        assert!((half.value().item() - std::f64::consts::LN_2).abs() < 1e-12);
        let sure = loss_mask(tape.constant(t(&[1, 4, 2, 2], 1.0)), &gt).unwrap();
        assert!((sure.value().item() - BCE_CLAMP).abs() < 1e-12);
        let p9 = loss_mask(tape.constant(t(&[1, 4, 2, 2], 0.9)), &gt).unwrap();
        assert!((p9.value().item() + 0.9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn landmark_loss_is_masked() {
        let tape = Tape::new();
        let mut gt = t(&[1, 4, 2, 2], 0.4);
        // right column unoccupied
        for i in [1, 3] {
            for c in 0..4 {
                gt.data_mut()[c * 4 + i] = 0.0;
            }
        }
        for c in 0..3 {
            for i in [0, 2] {
                gt.data_mut()[c * 4 + i] = 0.4;
            }
        }
        for i in [0, 2] {
            gt.data_mut()[12 + i] = 1.0;
        }
        let mut pred = gt.clone();
        assert_eq!(loss_udp(tape.constant(pred.clone()), &gt).unwrap().0.value().item(), 0.0);
        for c in 0..3 {
            pred.data_mut()[c * 4 + 1] = 0.9;
        }
        assert_eq!(loss_udp(tape.constant(pred.clone()), &gt).unwrap().0.value().item(), 0.0);
        for c in 0..3 {
            for i in [0, 2] {
                pred.data_mut()[c * 4 + i] += 0.1;
            }
        }
        assert!((loss_udp(tape.constant(pred), &gt).unwrap().0.value().item() - 0.1).abs() < 1e-12);
        let (zero, empty) = loss_udp(tape.constant(t(&[1, 4, 2, 2], 0.3)), &t(&[1, 4, 2, 2], 0.0)).unwrap();
        assert!(empty);
        assert_eq!(zero.value().item(), 0.0);
    }

    #[test]
    fn consistency_closed_form() {
        let tape = Tape::new();
        let a = t(&[1, 4, 2, 2], 0.0);
        let b = t(&[1, 4, 2, 2], 1.0);
        let each = tape.constant(Tensor::stack_batch(&[&a, &b]).unwrap());
        let mean = each.view_mean(None, 2).unwrap();
        let l = loss_cons(each, mean, 2).unwrap().value().item();
        assert!((l - 0.5f64.sqrt()).abs() < 1e-12);
        let scaled = each.scale(3.0);
        let l3 = loss_cons(scaled, scaled.view_mean(None, 2).unwrap(), 2).unwrap().value().item();
        assert!((l3 - 3.0 * l).abs() < 1e-12);
        let same = tape.constant(Tensor::stack_batch(&[&b, &b, &b]).unwrap());
        assert_eq!(loss_cons(same, same.view_mean(None, 3).unwrap(), 3).unwrap().value().item(), 0.0);
    }

    #[test]
    fn photometric_extremes() {
        let tape = Tape::new();
        let black = t(&[1, 4, 2, 2], 0.0).map(|_| 0.0);
        let mut black_opaque = black.clone();
        black_opaque.data_mut()[12..].iter_mut().for_each(|v| *v = 1.0);
        let white = t(&[1, 4, 2, 2], 1.0);
        assert_eq!(loss_photo(tape.constant(black_opaque.clone()), &white).unwrap().value().item(), 1.0);
        let mut shifted = black_opaque.clone();
        shifted.data_mut()[..12].iter_mut().for_each(|v| *v = 0.25);
        assert!((loss_photo(tape.constant(shifted), &black_opaque).unwrap().value().item() - 0.25).abs() < 1e-12);
        // fully transparent is white
        assert_eq!(loss_photo(tape.constant(black), &white).unwrap().value().item(), 0.0);
    }

    #[test]
    fn perceptual_proxy_is_symmetric_and_seeded() {
        let proxy = PerceptualProxy::<f64>::new(PROXY_SEED);
        assert_eq!(proxy, PerceptualProxy::new(PROXY_SEED));
        let tape = Tape::new();
        let mut a = t(&[1, 3, 8, 8], 0.2);
        a.data_mut()[5] = 0.9;
        let b = t(&[1, 3, 8, 8], 0.6);
        let (va, vb) = (tape.constant(a), tape.constant(b));
        let ab = proxy.loss(va, vb).unwrap().value().item();
        let ba = proxy.loss(vb, va).unwrap().value().item();
        assert!(ab > 0.0);
        assert!((ab - ba).abs() < 1e-15);
        assert_eq!(proxy.loss(va, va).unwrap().value().item(), 0.0);
    }

    #[test]
    fn weighted_sum_and_label_drop() {
        let parts = LossParts { udp: 0.1, mask: 0.2, perc: 0.3, photo: 0.4, cons: 0.5 };
        let w = LossWeights::default();
        assert!((total_loss(&parts, &w, true).unwrap() - 1.215).abs() < 1e-12);
        assert!((total_loss(&parts, &w, false).unwrap() - 0.915).abs() < 1e-12);
        assert_eq!(total_loss(&LossParts::default(), &w, true).unwrap(), 0.0);
        let bad = LossParts { photo: f64::NAN, ..parts };
        assert!(matches!(total_loss(&bad, &w, true), Err(Error::NonFinite(n)) if n == "l_photo"));
    }
}
