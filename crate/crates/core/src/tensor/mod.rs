//! Dense NCHW tensors and the hand-written kernels the pipeline is built from.
//!
//! Every op is generic over [`Real`] so production code runs in `f32` while
//! gradient checks can run the identical code path in `f64`.

mod adaptive;
mod conv;
mod optim;

pub use adaptive::{adaptive_conv, adaptive_conv_backward, bilinear_sample, OffsetField};
pub use conv::{conv2d, conv2d_backward, ConvGrads, ConvParams};
pub use optim::{sgd_step, sgd_update};

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating point scalar usable by every kernel in the crate.
pub trait Real:
    Float
    + Sum
    + Debug
    + Default
    + Send
    + Sync
    + 'static
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
{
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major `(n, c, h, w)` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self::filled(dims, T::zero())
    }

    pub fn filled(dims: [usize; 4], value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::shape("Tensor4::from_vec", dims, data.len()));
        }
        Ok(Self { dims, data })
    }

    /// Builds a tensor by evaluating `f(n, c, y, x)` at every element.
    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let [n, c, h, w] = dims;
        let mut data = Vec::with_capacity(n * c * h * w);
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(ni, ci, y, x));
                    }
                }
            }
        }
        Self { dims, data }
    }

    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cs, hs, ws] = self.dims;
        ((n * cs + c) * hs + y) * ws + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.offset(n, c, y, x);
        self.data[i] = v;
    }

    /// The `h × w` plane for image `n`, channel `c`.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let hw = self.dims[2] * self.dims[3];
        let start = (n * self.dims[1] + c) * hw;
        &self.data[start..start + hw]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let hw = self.dims[2] * self.dims[3];
        let start = (n * self.dims[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor4<T>) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape("Tensor4::add_assign", self.dims, other.dims));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Image `n` as a standalone `(1, c, h, w)` tensor.
    pub fn image(&self, n: usize) -> Tensor4<T> {
        let chw = self.dims[1] * self.dims[2] * self.dims[3];
        Tensor4 {
            dims: [1, self.dims[1], self.dims[2], self.dims[3]],
            data: self.data[n * chw..(n + 1) * chw].to_vec(),
        }
    }
}

pub fn relu<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    Tensor4 {
        dims: x.dims,
        data: x
            .data
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect(),
    }
}

/// Gradient of `relu` given the pre-activation input.
pub fn relu_backward<T: Real>(grad_y: &Tensor4<T>, pre: &Tensor4<T>) -> Result<Tensor4<T>> {
    if grad_y.dims != pre.dims {
        return Err(Error::shape("relu_backward", grad_y.dims, pre.dims));
    }
    Ok(Tensor4 {
        dims: pre.dims,
        data: grad_y
            .data
            .iter()
            .zip(&pre.data)
            .map(|(&g, &p)| if p > T::zero() { g } else { T::zero() })
            .collect(),
    })
}
