//! Raw forward and backward kernels on flat NCHW buffers.
//!
//! The tape calls into these; they are public so that custom ops and the
//! gradient-check fixtures can reuse the exact same arithmetic.

use super::Real;
use crate::error::{Error, Result};

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], weight: &[usize], bias: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (&[n, cin, h, w], &[cout, wcin, kh, kw]) = (x, weight) else {
            return Err(Error::contract("conv2d", format!("expected rank-4 input and kernel, got {x:?} and {weight:?}")));
        };
        if wcin != cin {
            return Err(Error::contract("conv2d", format!("input has {cin} channels, kernel expects {wcin}")));
        }
        if bias != [cout] {
            return Err(Error::contract("conv2d", format!("bias shape {bias:?} does not match {cout} output channels")));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d", "stride must be >= 1"));
        }
        let span_h = (h + 2 * pad).checked_sub(kh);
        let span_w = (w + 2 * pad).checked_sub(kw);
        let (Some(span_h), Some(span_w)) = (span_h, span_w) else {
            return Err(Error::Config(format!("conv2d: kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})")));
        };
        if span_h % stride != 0 || span_w % stride != 0 {
            return Err(Error::Config(format!(
                "conv2d: ({h}+2*{pad}-{kh})/{stride} or ({w}+2*{pad}-{kw})/{stride} is not integral"
            )));
        }
        Ok(ConvGeom { n, cin, h, w, cout, kh, kw, stride, pad, oh: span_h / stride + 1, ow: span_w / stride + 1 })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let p = g.p();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        // contiguous run with zero borders
                        let off = kj as isize - g.pad as isize;
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = ox as isize + off;
                            *v = if ix >= 0 && (ix as usize) < g.w { src[ix as usize] } else { T::zero() };
                        }
                    } else {
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            *v = if ix >= 0 && (ix as usize) < g.w { src[ix as usize] } else { T::zero() };
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(g: &ConvGeom, cols: &[T], gx: &mut [T]) {
    let p = g.p();
    for c in 0..g.cin {
        let plane = &mut gx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let (k, p) = (g.k(), g.p());
    let mut out = vec![T::zero(); g.n * g.cout * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for b in 0..g.n {
        let xb = &x[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w];
        let ob = &mut out[b * g.cout * p..(b + 1) * g.cout * p];
        for (co, row) in ob.chunks_mut(p).enumerate() {
            row.fill(bias[co]);
        }
        let cols_ref: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut cols);
            &cols
        };
        T::gemm(g.cout, k, p, T::one(), weight, k as isize, 1, cols_ref, p as isize, 1, T::one(), ob, p as isize, 1);
    }
    out
}

/// Accumulates convolution gradients into whichever outputs are requested.
pub fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    gout: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    mut gb: Option<&mut [T]>,
) {
    let (k, p) = (g.k(), g.p());
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    let mut gcols = vec![T::zero(); if g.is_pointwise() { 0 } else { k * p }];
    for b in 0..g.n {
        let xb = &x[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w];
        let gob = &gout[b * g.cout * p..(b + 1) * g.cout * p];
        if let Some(gb) = gb.as_deref_mut() {
            for (co, row) in gob.chunks(p).enumerate() {
                gb[co] += row.iter().copied().sum::<T>();
            }
        }
        if let Some(gw) = gw.as_deref_mut() {
            let cols_ref: &[T] = if g.is_pointwise() {
                xb
            } else {
                im2col(g, xb, &mut cols);
                &cols
            };
            // gw[Cout,K] += gout[Cout,P] * cols^T[P,K]
            T::gemm(g.cout, p, k, T::one(), gob, p as isize, 1, cols_ref, 1, p as isize, T::one(), gw, k as isize, 1);
        }
        if let Some(gx) = gx.as_deref_mut() {
            let gxb = &mut gx[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w];
            if g.is_pointwise() {
                // gx[Cin,P] += W^T[Cin,Cout] * gout[Cout,P]
                T::gemm(k, g.cout, p, T::one(), weight, 1, k as isize, gob, p as isize, 1, T::one(), gxb, p as isize, 1);
            } else {
                T::gemm(k, g.cout, p, T::one(), weight, 1, k as isize, gob, p as isize, 1, T::zero(), &mut gcols, p as isize, 1);
                col2im_add(g, &gcols, gxb);
            }
        }
    }
}

pub fn upsample_nearest_forward<T: Real>(x: &[T], [n, c, h, w]: [usize; 4], f: usize) -> Vec<T> {
    let (oh, ow) = (h * f, w * f);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.chunks(h * w) {
        for i in 0..oh {
            let row = &plane[(i / f) * w..(i / f + 1) * w];
            for j in 0..ow {
                out.push(row[j / f]);
            }
        }
    }
    out
}

pub fn upsample_nearest_backward<T: Real>(gout: &[T], [_, _, h, w]: [usize; 4], f: usize, gx: &mut [T]) {
    let (oh, ow) = (h * f, w * f);
    for (gplane, xplane) in gout.chunks(oh * ow).zip(gx.chunks_mut(h * w)) {
        for i in 0..oh {
            for j in 0..ow {
                xplane[(i / f) * w + j / f] += gplane[i * ow + j];
            }
        }
    }
}

/// Nearest-neighbour source index for output index `i` when resizing `src` to `dst` cells.
pub fn nearest_source(i: usize, src: usize, dst: usize) -> usize {
    (i * src) / dst
}

pub fn resize_nearest_forward<T: Real>(x: &[T], [_, _, h, w]: [usize; 4], oh: usize, ow: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len() / (h * w) * oh * ow);
    for plane in x.chunks(h * w) {
        for i in 0..oh {
            let si = nearest_source(i, h, oh);
            for j in 0..ow {
                out.push(plane[si * w + nearest_source(j, w, ow)]);
            }
        }
    }
    out
}

pub fn resize_nearest_backward<T: Real>(gout: &[T], [_, _, h, w]: [usize; 4], oh: usize, ow: usize, gx: &mut [T]) {
    for (gplane, xplane) in gout.chunks(oh * ow).zip(gx.chunks_mut(h * w)) {
        for i in 0..oh {
            let si = nearest_source(i, h, oh);
            for j in 0..ow {
                xplane[si * w + nearest_source(j, w, ow)] += gplane[i * ow + j];
            }
        }
    }
}

pub fn avg_pool2_forward<T: Real>(x: &[T], [_, _, h, w]: [usize; 4]) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64c(0.25);
    let mut out = Vec::with_capacity(x.len() / 4);
    for plane in x.chunks(h * w) {
        for i in 0..oh {
            let r0 = &plane[2 * i * w..(2 * i + 1) * w];
            let r1 = &plane[(2 * i + 1) * w..(2 * i + 2) * w];
            for j in 0..ow {
                out.push((r0[2 * j] + r0[2 * j + 1] + r1[2 * j] + r1[2 * j + 1]) * quarter);
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Real>(gout: &[T], [_, _, h, w]: [usize; 4], gx: &mut [T]) {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64c(0.25);
    for (gplane, xplane) in gout.chunks(oh * ow).zip(gx.chunks_mut(h * w)) {
        for i in 0..oh {
            for j in 0..ow {
                let g = gplane[i * ow + j] * quarter;
                xplane[2 * i * w + 2 * j] += g;
                xplane[2 * i * w + 2 * j + 1] += g;
                xplane[(2 * i + 1) * w + 2 * j] += g;
                xplane[(2 * i + 1) * w + 2 * j + 1] += g;
            }
        }
    }
}

/// Bilinear sampling footprint of one output pixel.
struct Tap<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    ax: T,
    ay: T,
    /// false when the coordinate was clamped (zero derivative along that axis)
    free_x: bool,
    free_y: bool,
}

fn tap<T: Real>(sx: T, sy: T, h: usize, w: usize) -> Tap<T> {
    let (maxx, maxy) = (T::from_usize(w - 1).unwrap(), T::from_usize(h - 1).unwrap());
    let free_x = sx >= T::zero() && sx <= maxx;
    let free_y = sy >= T::zero() && sy <= maxy;
    let cx = sx.max(T::zero()).min(maxx);
    let cy = sy.max(T::zero()).min(maxy);
    let fx = cx.floor();
    let fy = cy.floor();
    let x0 = fx.to_usize().unwrap();
    let y0 = fy.to_usize().unwrap();
    Tap { x0, x1: (x0 + 1).min(w - 1), y0, y1: (y0 + 1).min(h - 1), ax: cx - fx, ay: cy - fy, free_x, free_y }
}

/// Warps `x` by per-pixel offsets: output(i, j) samples x at (j + flow_x, i + flow_y),
/// clamping the sample position to the image border.
pub fn grid_sample_forward<T: Real>(x: &[T], flow: &[T], [n, c, h, w]: [usize; 4]) -> Vec<T> {
    let hw = h * w;
    let mut out = vec![T::zero(); n * c * hw];
    for b in 0..n {
        let fl = &flow[b * 2 * hw..(b + 1) * 2 * hw];
        for i in 0..h {
            for j in 0..w {
                let pix = i * w + j;
                let sx = T::from_usize(j).unwrap() + fl[pix];
                let sy = T::from_usize(i).unwrap() + fl[hw + pix];
                let t = tap(sx, sy, h, w);
                let one = T::one();
                let (w00, w01) = ((one - t.ay) * (one - t.ax), (one - t.ay) * t.ax);
                let (w10, w11) = (t.ay * (one - t.ax), t.ay * t.ax);
                for ch in 0..c {
                    let plane = &x[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    out[(b * c + ch) * hw + pix] = w00 * plane[t.y0 * w + t.x0]
                        + w01 * plane[t.y0 * w + t.x1]
                        + w10 * plane[t.y1 * w + t.x0]
                        + w11 * plane[t.y1 * w + t.x1];
                }
            }
        }
    }
    out
}

pub fn grid_sample_backward<T: Real>(
    x: &[T],
    flow: &[T],
    dims: [usize; 4],
    gout: &[T],
    mut gx: Option<&mut [T]>,
    mut gflow: Option<&mut [T]>,
) {
    let [n, c, h, w] = dims;
    let hw = h * w;
    let one = T::one();
    for b in 0..n {
        let fl = &flow[b * 2 * hw..(b + 1) * 2 * hw];
        for i in 0..h {
            for j in 0..w {
                let pix = i * w + j;
                let sx = T::from_usize(j).unwrap() + fl[pix];
                let sy = T::from_usize(i).unwrap() + fl[hw + pix];
                let t = tap(sx, sy, h, w);
                let (w00, w01) = ((one - t.ay) * (one - t.ax), (one - t.ay) * t.ax);
                let (w10, w11) = (t.ay * (one - t.ax), t.ay * t.ax);
                let (mut dsx, mut dsy) = (T::zero(), T::zero());
                for ch in 0..c {
                    let base = (b * c + ch) * hw;
                    let g = gout[base + pix];
                    if let Some(gx) = gx.as_deref_mut() {
                        gx[base + t.y0 * w + t.x0] += w00 * g;
                        gx[base + t.y0 * w + t.x1] += w01 * g;
                        gx[base + t.y1 * w + t.x0] += w10 * g;
                        gx[base + t.y1 * w + t.x1] += w11 * g;
                    }
                    let plane = &x[base..base + hw];
                    let (v00, v01) = (plane[t.y0 * w + t.x0], plane[t.y0 * w + t.x1]);
                    let (v10, v11) = (plane[t.y1 * w + t.x0], plane[t.y1 * w + t.x1]);
                    dsx += g * ((one - t.ay) * (v01 - v00) + t.ay * (v11 - v10));
                    dsy += g * ((one - t.ax) * (v10 - v00) + t.ax * (v11 - v01));
                }
                if let Some(gf) = gflow.as_deref_mut() {
                    if t.free_x {
                        gf[b * 2 * hw + pix] += dsx;
                    }
                    if t.free_y {
                        gf[b * 2 * hw + hw + pix] += dsy;
                    }
                }
            }
        }
    }
}

/// Unit-normalises every pixel's channel vector: y = x / sqrt(sum_c x^2 + eps).
pub fn channel_normalize_forward<T: Real>(x: &[T], [n, c, h, w]: [usize; 4], eps: T) -> (Vec<T>, Vec<T>) {
    let hw = h * w;
    let mut out = vec![T::zero(); x.len()];
    let mut norms = vec![T::zero(); n * hw];
    for b in 0..n {
        for p in 0..hw {
            let mut ss = eps;
            for ch in 0..c {
                let v = x[(b * c + ch) * hw + p];
                ss += v * v;
            }
            let s = ss.sqrt();
            norms[b * hw + p] = s;
            for ch in 0..c {
                let idx = (b * c + ch) * hw + p;
                out[idx] = x[idx] / s;
            }
        }
    }
    (out, norms)
}

pub fn channel_normalize_backward<T: Real>(y: &[T], norms: &[T], [n, c, h, w]: [usize; 4], gout: &[T], gx: &mut [T]) {
    let hw = h * w;
    for b in 0..n {
        for p in 0..hw {
            let mut dot = T::zero();
            for ch in 0..c {
                let idx = (b * c + ch) * hw + p;
                dot += gout[idx] * y[idx];
            }
            let s = norms[b * hw + p];
            for ch in 0..c {
                let idx = (b * c + ch) * hw + p;
                gx[idx] += (gout[idx] - y[idx] * dot) / s;
            }
        }
    }
}
