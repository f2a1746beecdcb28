//! Dense tensors, a tape-based reverse-mode autodiff engine and the AdamW
//! optimizer.
//!
//! Values are stored row-major in NCHW order. Everything is generic over
//! [`Real`] so the same network code runs in `f32` for training and `f64`
//! for finite-difference checks.

pub mod gradcheck;
pub mod kernels;
mod optim;
mod tape;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

pub use optim::{AdamW, AdamWConfig, OptState};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

/// Floating-point element type of a tensor.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a * b + beta * c` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64c(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("representable constant")
    }

    fn to_f64c(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: callers pass slices that cover every index reachable
                // with the given dimensions and strides; debug builds check the
                // extreme offsets below.
                debug_assert!(k == 0 || last_index(m, k, rsa, csa) < a.len());
                debug_assert!(k == 0 || last_index(k, n, rsb, csb) < b.len());
                debug_assert!(last_index(m, n, rsc, csc) < c.len());
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

fn last_index(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    ((rows as isize - 1) * rs + (cols as isize - 1) * cs) as usize
}

/// An n-dimensional array of reals in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::contract("tensor", format!("zero dimension in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64c(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Interprets the tensor as `[N, C, H, W]`.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::contract("dims4", format!("expected rank 4, got {:?}", self.shape))),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::contract("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().to_f64c())
            .fold(0.0, f64::max)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64c(v.to_f64c())).collect(),
        }
    }

    /// Returns images `start..start + len` along the batch axis.
    pub fn batch_slice(&self, start: usize, len: usize) -> Result<Self> {
        let [n, c, h, w] = self.dims4()?;
        if start + len > n || len == 0 {
            return Err(Error::contract("batch_slice", format!("{start}+{len} of {n}")));
        }
        let plane = c * h * w;
        Ok(Tensor {
            shape: vec![len, c, h, w],
            data: self.data[start * plane..(start + len) * plane].to_vec(),
        })
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack_batch(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or(Error::EmptySet("stack_batch"))?;
        let [_, c, h, w] = first.dims4()?;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            let [pn, pc, ph, pw] = p.dims4()?;
            if (pc, ph, pw) != (c, h, w) {
                return Err(Error::contract("stack_batch", format!("{:?} vs {:?}", p.shape, first.shape)));
            }
            n += pn;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { shape: vec![n, c, h, w], data })
    }
}
