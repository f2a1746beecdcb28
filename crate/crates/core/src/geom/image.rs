use std::ops::Deref;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// A four-channel float image stored row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image4 {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image4 {
    pub fn zeros(height: usize, width: usize) -> Self {
        Image4 { height, width, data: vec![0.0; height * width * 4] }
    }

    fn checked(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 4 {
            return Err(Error::contract("image", format!("{height}x{width}x4 image from {} values", data.len())));
        }
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract("image", format!("value {} at index {i} outside [0,1]", data[i])));
        }
        Ok(Image4 { height, width, data })
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 4] {
        let k = 4 * (y * self.width + x);
        [self.data[k], self.data[k + 1], self.data[k + 2], self.data[k + 3]]
    }

    /// Planar `[1, 4, H, W]` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let hw = self.height * self.width;
        let mut out = vec![T::zero(); 4 * hw];
        for (k, px) in self.data.chunks_exact(4).enumerate() {
            for c in 0..4 {
                out[c * hw + k] = T::from_f64c(px[c] as f64);
            }
        }
        Tensor::new(vec![1, 4, self.height, self.width], out).expect("shape matches data")
    }

    /// Reads batch item `b` of a `[N, 4, H, W]` tensor, clamping to [0,1].
    fn from_tensor<T: Real>(t: &Tensor<T>, b: usize) -> Result<Self> {
        let [n, c, h, w] = t.dims4()?;
        if c != 4 || b >= n {
            return Err(Error::contract("image", format!("item {b} of a {:?} tensor is not a 4-channel image", t.shape())));
        }
        let hw = h * w;
        let src = &t.data()[b * 4 * hw..(b + 1) * 4 * hw];
        let mut data = vec![0.0; 4 * hw];
        for k in 0..hw {
            for ch in 0..4 {
                let v = src[ch * hw + k].to_f64c();
                data[4 * k + ch] = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) as f32 };
            }
        }
        Ok(Image4 { height: h, width: w, data })
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || y0 + h > self.height || x0 + w > self.width {
            return Err(Error::contract("crop", format!("{h}x{w} at ({y0},{x0}) in {}x{}", self.height, self.width)));
        }
        let mut data = Vec::with_capacity(h * w * 4);
        for y in y0..y0 + h {
            let row = 4 * (y * self.width + x0);
            data.extend_from_slice(&self.data[row..row + 4 * w]);
        }
        Ok(Image4 { height: h, width: w, data })
    }

    pub fn resize_nearest(&self, oh: usize, ow: usize) -> Self {
        let mut out = Image4::zeros(oh, ow);
        for y in 0..oh {
            let sy = crate::tensor::kernels::nearest_source(y, self.height, oh);
            for x in 0..ow {
                let sx = crate::tensor::kernels::nearest_source(x, self.width, ow);
                let k = 4 * (y * ow + x);
                out.data[k..k + 4].copy_from_slice(&self.pixel(sy, sx));
            }
        }
        out
    }

    /// Bilinear resampling with pixel-centre alignment and edge clamping.
    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Self {
        let mut out = Image4::zeros(oh, ow);
        let axis = |i: usize, src: usize, dst: usize| {
            let s = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        };
        for y in 0..oh {
            let (y0, y1, fy) = axis(y, self.height, oh);
            for x in 0..ow {
                let (x0, x1, fx) = axis(x, self.width, ow);
                let (p00, p01, p10, p11) = (self.pixel(y0, x0), self.pixel(y0, x1), self.pixel(y1, x0), self.pixel(y1, x1));
                let k = 4 * (y * ow + x);
                for c in 0..4 {
                    let top = p00[c] as f64 * (1.0 - fx) + p01[c] as f64 * fx;
                    let bottom = p10[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
                    out.data[k + c] = (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0) as f32;
                }
            }
        }
        out
    }

    fn to_png(&self) -> image::RgbaImage {
        let bytes = self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        image::RgbaImage::from_raw(self.width as u32, self.height as u32, bytes).expect("buffer size")
    }
}

/// Dense-pose image: three landmark channels and occupancy.
#[derive(Clone, Debug, PartialEq)]
pub struct UdpImage(pub(crate) Image4);

/// RGBA image with straight (non-premultiplied) alpha.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbaImage(pub(crate) Image4);

impl Deref for UdpImage {
    type Target = Image4;
    fn deref(&self) -> &Image4 {
        &self.0
    }
}

impl Deref for RgbaImage {
    type Target = Image4;
    fn deref(&self) -> &Image4 {
        &self.0
    }
}

impl UdpImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Image4::checked(height, width, data).map(UdpImage)
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        UdpImage(Image4::zeros(height, width))
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>, batch_index: usize) -> Result<Self> {
        Image4::from_tensor(t, batch_index).map(UdpImage)
    }

    /// Binary occupancy with landmarks zeroed off the body.
    pub fn is_ground_truth(&self) -> bool {
        self.data.chunks_exact(4).all(|p| p[3] == 1.0 || (p[3] == 0.0 && p[0] == 0.0 && p[1] == 0.0 && p[2] == 0.0))
    }

    pub fn occupied(&self) -> usize {
        self.data.chunks_exact(4).filter(|p| p[3] > 0.5).count()
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        self.0.crop(y0, x0, h, w).map(UdpImage)
    }

    pub fn resize_nearest(&self, oh: usize, ow: usize) -> Self {
        UdpImage(self.0.resize_nearest(oh, ow))
    }

    /// Lossy 8-bit view: landmarks as RGB, occupancy as alpha.
    pub fn write_png_preview(&self, path: impl AsRef<Path>) -> Result<()> {
        self.0.to_png().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

impl RgbaImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Image4::checked(height, width, data).map(RgbaImage)
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        RgbaImage(Image4::zeros(height, width))
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>, batch_index: usize) -> Result<Self> {
        Image4::from_tensor(t, batch_index).map(RgbaImage)
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        self.0.crop(y0, x0, h, w).map(RgbaImage)
    }

    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Self {
        RgbaImage(self.0.resize_bilinear(oh, ow))
    }

    /// Porter-Duff "over" onto an opaque background.
    pub fn over(&self, background: &RgbaImage) -> Result<RgbaImage> {
        if (self.height, self.width) != (background.height, background.width) {
            return Err(Error::contract("over", "foreground and background sizes differ"));
        }
        let mut out = background.0.clone();
        for (o, f) in out.data.chunks_exact_mut(4).zip(self.data.chunks_exact(4)) {
            let a = f[3];
            for c in 0..3 {
                o[c] = f[c] * a + o[c] * (1.0 - a);
            }
            o[3] = a + o[3] * (1.0 - a);
        }
        Ok(RgbaImage(out))
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_rgba8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
        Ok(RgbaImage(Image4 { height: h as usize, width: w as usize, data }))
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.0.to_png().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

pub const UDP_MAGIC: [u8; 4] = *b"UDPF";
pub const UDP_VERSION: u8 = 1;
const HEADER: usize = 13;

pub fn encode_udp(u: &UdpImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + u.data.len() * 4);
    out.extend_from_slice(&UDP_MAGIC);
    out.push(UDP_VERSION);
    out.extend_from_slice(&(u.height as u32).to_le_bytes());
    out.extend_from_slice(&(u.width as u32).to_le_bytes());
    for v in &u.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn need(bytes: &[u8], end: usize) -> Result<()> {
    if bytes.len() < end {
        return Err(Error::Truncated { offset: bytes.len() as u64, needed: (end - bytes.len()) as u64 });
    }
    Ok(())
}

pub fn decode_udp(bytes: &[u8]) -> Result<UdpImage> {
    need(bytes, 4)?;
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != UDP_MAGIC {
        return Err(Error::BadMagic { expected: UDP_MAGIC, found });
    }
    need(bytes, 5)?;
    if bytes[4] != UDP_VERSION {
        return Err(Error::BadVersion { expected: UDP_VERSION, found: bytes[4] });
    }
    need(bytes, HEADER)?;
    let height = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    if height == 0 {
        return Err(Error::Parse { offset: 5, detail: "zero height".into() });
    }
    if width == 0 {
        return Err(Error::Parse { offset: 9, detail: "zero width".into() });
    }
    let payload = height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(16))
        .ok_or(Error::Parse { offset: 5, detail: format!("{height}x{width} image is too large") })?;
    need(bytes, HEADER + payload)?;
    if bytes.len() > HEADER + payload {
        return Err(Error::Parse {
            offset: (HEADER + payload) as u64,
            detail: format!("{} trailing bytes", bytes.len() - HEADER - payload),
        });
    }
    let mut data = Vec::with_capacity(payload / 4);
    for (i, chunk) in bytes[HEADER..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Parse { offset: (HEADER + 4 * i) as u64, detail: format!("value {v} outside [0,1]") });
        }
        data.push(v);
    }
    Ok(UdpImage(Image4 { height, width, data }))
}

pub fn write_udp(u: &UdpImage, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_udp(u))?;
    Ok(())
}

pub fn read_udp(path: impl AsRef<Path>) -> Result<UdpImage> {
    decode_udp(&std::fs::read(path)?)
}
