//! Convolution whose taps are displaced by a per-location offset field and
//! read through bilinear interpolation.

use super::{ConvGrads, ConvParams, Real, Tensor4};
use crate::error::{Error, Result};

/// Per-location, per-tap `(dy, dx)` displacements in feature-map units.
///
/// Offsets are relative to the regular tap grid of the convolution they are
/// used with, so an all-zero field turns [`adaptive_conv`] into [`super::conv2d`].
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField {
    h: usize,
    w: usize,
    kernel: (usize, usize),
    /// `((y * w + x) * taps + k) * 2 + {0: dy, 1: dx}`
    data: Vec<f64>,
}

impl OffsetField {
    pub fn zeros(h: usize, w: usize, kernel: (usize, usize)) -> Self {
        Self {
            h,
            w,
            kernel,
            data: vec![0.0; h * w * kernel.0 * kernel.1 * 2],
        }
    }

    /// Offsets that turn a dilation-1 grid into a dilation-`dilation` grid.
    pub fn dilated_grid(h: usize, w: usize, kernel: (usize, usize), dilation: usize) -> Self {
        let mut field = Self::zeros(h, w, kernel);
        let (kh, kw) = kernel;
        let extra = dilation as f64 - 1.0;
        for y in 0..h {
            for x in 0..w {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let ry = ky as f64 - ((kh - 1) / 2) as f64;
                        let rx = kx as f64 - ((kw - 1) / 2) as f64;
                        field.set(y, x, ky * kw + kx, extra * ry, extra * rx);
                    }
                }
            }
        }
        field
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn kernel(&self) -> (usize, usize) {
        self.kernel
    }

    pub fn taps(&self) -> usize {
        self.kernel.0 * self.kernel.1
    }

    #[inline]
    fn index(&self, y: usize, x: usize, k: usize) -> usize {
        ((y * self.w + x) * self.taps() + k) * 2
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, k: usize) -> (f64, f64) {
        let i = self.index(y, x, k);
        (self.data[i], self.data[i + 1])
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, k: usize, dy: f64, dx: f64) {
        let i = self.index(y, x, k);
        self.data[i] = dy;
        self.data[i + 1] = dx;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Absolute `(y, x)` sample position of tap `k` at output location `(y, x)`
    /// for a kernel with the given dilation.
    pub fn tap_position(&self, y: usize, x: usize, k: usize, dilation: usize) -> (f64, f64) {
        let (kh, kw) = self.kernel;
        let (ky, kx) = (k / kw, k % kw);
        let ry = (ky as f64 - ((kh - 1) / 2) as f64) * dilation as f64;
        let rx = (kx as f64 - ((kw - 1) / 2) as f64) * dilation as f64;
        let (dy, dx) = self.get(y, x, k);
        (y as f64 + ry + dy, x as f64 + rx + dx)
    }
}

/// Four-corner bilinear read of an `h × w` plane; corners outside the plane read zero.
pub fn bilinear_sample<T: Real>(plane: &[T], h: usize, w: usize, y: f64, x: f64) -> T {
    let c = Corners::<T>::new(h, w, y, x);
    let mut acc = T::zero();
    for i in 0..4 {
        if c.weight[i] != T::zero() {
            acc += c.weight[i] * plane[c.index[i]];
        }
    }
    acc
}

#[derive(Clone, Copy, Debug)]
struct Corners<T> {
    index: [usize; 4],
    weight: [T; 4],
}

impl<T: Real> Corners<T> {
    fn new(h: usize, w: usize, y: f64, x: f64) -> Self {
        let mut index = [0usize; 4];
        let mut weight = [T::zero(); 4];
        if !(y.is_finite() && x.is_finite())
            || y <= -1.0
            || x <= -1.0
            || y >= h as f64
            || x >= w as f64
        {
            return Self { index, weight };
        }
        let y0 = y.floor();
        let x0 = x.floor();
        let ly = y - y0;
        let lx = x - x0;
        let (y0, x0) = (y0 as isize, x0 as isize);
        let corners = [
            (y0, x0, (1.0 - ly) * (1.0 - lx)),
            (y0, x0 + 1, (1.0 - ly) * lx),
            (y0 + 1, x0, ly * (1.0 - lx)),
            (y0 + 1, x0 + 1, ly * lx),
        ];
        for (i, &(cy, cx, wt)) in corners.iter().enumerate() {
            if cy >= 0 && cx >= 0 && (cy as usize) < h && (cx as usize) < w && wt != 0.0 {
                index[i] = cy as usize * w + cx as usize;
                weight[i] = T::lit(wt);
            }
        }
        Self { index, weight }
    }
}

/// Bilinear corners for every `(tap, location)` pair, tap-major.
struct SamplePlan<T> {
    taps: usize,
    locations: usize,
    corners: Vec<Corners<T>>,
}

impl<T: Real> SamplePlan<T> {
    fn new(h: usize, w: usize, o: &OffsetField, dilation: usize) -> Self {
        let taps = o.taps();
        let locations = h * w;
        let mut corners = Vec::with_capacity(taps * locations);
        for k in 0..taps {
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = o.tap_position(y, x, k, dilation);
                    corners.push(Corners::new(h, w, sy, sx));
                }
            }
        }
        Self {
            taps,
            locations,
            corners,
        }
    }

    /// Sampled columns `[(ic * taps + k) * locations + p]` for image `n`.
    fn columns(&self, x: &Tensor4<T>, n: usize) -> Vec<T> {
        let in_c = x.dims()[1];
        let mut cols = vec![T::zero(); in_c * self.taps * self.locations];
        for ic in 0..in_c {
            let plane = x.plane(n, ic);
            for k in 0..self.taps {
                let dst = &mut cols[(ic * self.taps + k) * self.locations
                    ..(ic * self.taps + k + 1) * self.locations];
                let src = &self.corners[k * self.locations..(k + 1) * self.locations];
                for (d, c) in dst.iter_mut().zip(src) {
                    *d = c.weight[0] * plane[c.index[0]]
                        + c.weight[1] * plane[c.index[1]]
                        + c.weight[2] * plane[c.index[2]]
                        + c.weight[3] * plane[c.index[3]];
                }
            }
        }
        cols
    }
}

fn check_adaptive<T: Real>(
    op: &'static str,
    x: &Tensor4<T>,
    p: &ConvParams<T>,
    o: &OffsetField,
) -> Result<()> {
    let [_, c, h, w] = x.dims();
    if c != p.in_channels() {
        return Err(Error::shape(op, x.dims(), p.weight.dims()));
    }
    if o.kernel() != p.kernel() {
        return Err(Error::shape(op, o.kernel(), p.kernel()));
    }
    if (o.height(), o.width()) != (h, w) {
        return Err(Error::shape(op, (o.height(), o.width()), (h, w)));
    }
    if p.stride != 1 {
        return Err(Error::config(
            "stride",
            "adaptive convolution requires stride 1",
        ));
    }
    Ok(())
}

/// `y[p] = bias + Σ_k w[k] · x(p + r_k + o_k)` with bilinear reads of `x`.
pub fn adaptive_conv<T: Real>(
    x: &Tensor4<T>,
    p: &ConvParams<T>,
    o: &OffsetField,
) -> Result<Tensor4<T>> {
    check_adaptive("adaptive_conv", x, p, o)?;
    let [n, in_c, h, w] = x.dims();
    let out_c = p.out_channels();
    let plan = SamplePlan::new(h, w, o, p.dilation);
    let cols_per_out = in_c * plan.taps;
    let wdata = p.weight.data();

    let mut y = Tensor4::zeros([n, out_c, h, w]);
    for ni in 0..n {
        let cols = plan.columns(x, ni);
        for oc in 0..out_c {
            let out = y.plane_mut(ni, oc);
            out.fill(p.bias[oc]);
            let wrow = &wdata[oc * cols_per_out..(oc + 1) * cols_per_out];
            for (j, &wv) in wrow.iter().enumerate() {
                let col = &cols[j * plan.locations..(j + 1) * plan.locations];
                for (o, &v) in out.iter_mut().zip(col) {
                    *o += wv * v;
                }
            }
        }
    }
    Ok(y)
}

/// Gradients of `⟨grad_y, adaptive_conv(x, p, o)⟩`; offsets are treated as constants.
pub fn adaptive_conv_backward<T: Real>(
    grad_y: &Tensor4<T>,
    x: &Tensor4<T>,
    p: &ConvParams<T>,
    o: &OffsetField,
) -> Result<ConvGrads<T>> {
    check_adaptive("adaptive_conv_backward", x, p, o)?;
    let [n, in_c, h, w] = x.dims();
    let out_c = p.out_channels();
    if grad_y.dims() != [n, out_c, h, w] {
        return Err(Error::shape(
            "adaptive_conv_backward",
            grad_y.dims(),
            [n, out_c, h, w],
        ));
    }
    let plan = SamplePlan::new(h, w, o, p.dilation);
    let cols_per_out = in_c * plan.taps;
    let loc = plan.locations;
    let wdata = p.weight.data();

    let mut grad_x = Tensor4::zeros(x.dims());
    let mut grad_weight = Tensor4::zeros(p.weight.dims());
    let mut grad_bias = vec![T::zero(); out_c];

    for ni in 0..n {
        let cols = plan.columns(x, ni);
        let mut grad_cols = vec![T::zero(); cols.len()];
        for oc in 0..out_c {
            let gy = grad_y.plane(ni, oc);
            grad_bias[oc] += gy.iter().copied().sum::<T>();
            let wrow = &wdata[oc * cols_per_out..(oc + 1) * cols_per_out];
            let gw = &mut grad_weight.data_mut()[oc * cols_per_out..(oc + 1) * cols_per_out];
            for j in 0..cols_per_out {
                let col = &cols[j * loc..(j + 1) * loc];
                let mut acc = T::zero();
                for (&g, &v) in gy.iter().zip(col) {
                    acc += g * v;
                }
                gw[j] += acc;
                let wv = wrow[j];
                for (gc, &g) in grad_cols[j * loc..(j + 1) * loc].iter_mut().zip(gy) {
                    *gc += wv * g;
                }
            }
        }
        for ic in 0..in_c {
            let gx = grad_x.plane_mut(ni, ic);
            for k in 0..plan.taps {
                let gcol = &grad_cols[(ic * plan.taps + k) * loc..(ic * plan.taps + k + 1) * loc];
                let corners = &plan.corners[k * loc..(k + 1) * loc];
                for (&g, c) in gcol.iter().zip(corners) {
                    for i in 0..4 {
                        gx[c.index[i]] += c.weight[i] * g;
                    }
                }
            }
        }
    }
    debug_assert_eq!(grad_x.dims(), [n, in_c, h, w]);
    Ok(ConvGrads {
        grad_x,
        grad_weight,
        grad_bias,
    })
}
