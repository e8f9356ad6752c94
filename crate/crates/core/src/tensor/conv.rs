use rand::Rng;

use super::{Real, Tensor4};
use crate::error::{Error, Result};

/// Weights and geometry of a 2-D convolution with zero "same" padding.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    /// `(out_c, in_c, kh, kw)`
    pub weight: Tensor4<T>,
    pub bias: Vec<T>,
    pub stride: usize,
    pub dilation: usize,
}

impl<T: Real> ConvParams<T> {
    pub fn new(weight: Tensor4<T>, bias: Vec<T>, stride: usize, dilation: usize) -> Result<Self> {
        let [out_c, _, kh, kw] = weight.dims();
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::config(
                "kernel",
                format!("kernel must be odd, got {kh}x{kw}"),
            ));
        }
        if dilation == 0 {
            return Err(Error::config("dilation", "dilation must be >= 1"));
        }
        if stride == 0 {
            return Err(Error::config("stride", "stride must be >= 1"));
        }
        if bias.len() != out_c {
            return Err(Error::shape("ConvParams::new", weight.dims(), bias.len()));
        }
        Ok(Self {
            weight,
            bias,
            stride,
            dilation,
        })
    }

    pub fn zeros(
        out_c: usize,
        in_c: usize,
        kernel: (usize, usize),
        stride: usize,
        dilation: usize,
    ) -> Result<Self> {
        Self::new(
            Tensor4::zeros([out_c, in_c, kernel.0, kernel.1]),
            vec![T::zero(); out_c],
            stride,
            dilation,
        )
    }

    /// Uniform weights in `±1/sqrt(fan_in)`, zero bias.
    pub fn init_uniform<R: Rng + ?Sized>(
        out_c: usize,
        in_c: usize,
        kernel: (usize, usize),
        stride: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = (in_c * kernel.0 * kernel.1) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let dims = [out_c, in_c, kernel.0, kernel.1];
        let data = (0..dims.iter().product::<usize>())
            .map(|_| T::lit(rng.gen_range(-bound..bound)))
            .collect();
        Self::new(
            Tensor4::from_vec(dims, data)?,
            vec![T::zero(); out_c],
            stride,
            dilation,
        )
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        let d = self.weight.dims();
        (d[2], d[3])
    }

    pub fn taps(&self) -> usize {
        let (kh, kw) = self.kernel();
        kh * kw
    }

    pub fn padding(&self) -> (usize, usize) {
        let (kh, kw) = self.kernel();
        (self.dilation * (kh - 1) / 2, self.dilation * (kw - 1) / 2)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }

    pub fn cast<U: Real>(&self) -> ConvParams<U> {
        ConvParams {
            weight: self.weight.cast(),
            bias: self.bias.iter().map(|b| U::lit(b.as_f64())).collect(),
            stride: self.stride,
            dilation: self.dilation,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Tensor4::zeros(self.weight.dims()),
            bias: vec![T::zero(); self.bias.len()],
            stride: self.stride,
            dilation: self.dilation,
        }
    }
}

/// Gradients of a convolution with respect to its input and parameters.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub grad_x: Tensor4<T>,
    pub grad_weight: Tensor4<T>,
    pub grad_bias: Vec<T>,
}

/// Output indices `o < out_len` whose source `o * stride + off` lies in `0..in_len`.
fn valid_range(out_len: usize, in_len: usize, stride: usize, off: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let last = in_len as isize - 1 - off;
    let hi = if last < 0 {
        0
    } else {
        (last / s + 1).min(out_len as isize)
    };
    (lo as usize, (hi.max(lo)) as usize)
}

fn check_input<T: Real>(op: &'static str, x: &Tensor4<T>, p: &ConvParams<T>) -> Result<()> {
    let [_, c, _, _] = x.dims();
    if c != p.in_channels() {
        return Err(Error::shape(op, x.dims(), p.weight.dims()));
    }
    Ok(())
}

/// Standard (optionally strided and dilated) convolution.
pub fn conv2d<T: Real>(x: &Tensor4<T>, p: &ConvParams<T>) -> Result<Tensor4<T>> {
    check_input("conv2d", x, p)?;
    let [n, in_c, h, w] = x.dims();
    let out_c = p.out_channels();
    let (kh, kw) = p.kernel();
    let (ph, pw) = p.padding();
    let (ho, wo) = p.output_hw(h, w);
    let (s, d) = (p.stride, p.dilation);
    let wdata = p.weight.data();

    let mut y = Tensor4::zeros([n, out_c, ho, wo]);
    for ni in 0..n {
        for oc in 0..out_c {
            let out = y.plane_mut(ni, oc);
            out.fill(p.bias[oc]);
            for ic in 0..in_c {
                let xin = x.plane(ni, ic);
                for ky in 0..kh {
                    let offy = (ky * d) as isize - ph as isize;
                    let (oy_lo, oy_hi) = valid_range(ho, h, s, offy);
                    for kx in 0..kw {
                        let wv = wdata[((oc * in_c + ic) * kh + ky) * kw + kx];
                        let offx = (kx * d) as isize - pw as isize;
                        let (ox_lo, ox_hi) = valid_range(wo, w, s, offx);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = (oy * s) as isize + offy;
                            let row_in = &xin[iy as usize * w..(iy as usize + 1) * w];
                            let row_out = &mut out[oy * wo..(oy + 1) * wo];
                            if s == 1 {
                                let src = &row_in[(ox_lo as isize + offx) as usize
                                    ..(ox_hi as isize + offx) as usize];
                                for (o, &v) in row_out[ox_lo..ox_hi].iter_mut().zip(src) {
                                    *o += wv * v;
                                }
                            } else {
                                for (ox, o) in
                                    row_out.iter_mut().enumerate().take(ox_hi).skip(ox_lo)
                                {
                                    *o += wv * row_in[((ox * s) as isize + offx) as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Gradients of `⟨grad_y, conv2d(x, p)⟩` with respect to `x`, weights and bias.
pub fn conv2d_backward<T: Real>(
    grad_y: &Tensor4<T>,
    x: &Tensor4<T>,
    p: &ConvParams<T>,
) -> Result<ConvGrads<T>> {
    check_input("conv2d_backward", x, p)?;
    let [n, in_c, h, w] = x.dims();
    let out_c = p.out_channels();
    let (kh, kw) = p.kernel();
    let (ph, pw) = p.padding();
    let (ho, wo) = p.output_hw(h, w);
    if grad_y.dims() != [n, out_c, ho, wo] {
        return Err(Error::shape(
            "conv2d_backward",
            grad_y.dims(),
            [n, out_c, ho, wo],
        ));
    }
    let (s, d) = (p.stride, p.dilation);
    let wdata = p.weight.data();

    let mut grad_x = Tensor4::zeros(x.dims());
    let mut grad_weight = Tensor4::zeros(p.weight.dims());
    let mut grad_bias = vec![T::zero(); out_c];

    for ni in 0..n {
        for oc in 0..out_c {
            let gy = grad_y.plane(ni, oc);
            grad_bias[oc] += gy.iter().copied().sum::<T>();
            for ic in 0..in_c {
                let xin = x.plane(ni, ic);
                for ky in 0..kh {
                    let offy = (ky * d) as isize - ph as isize;
                    let (oy_lo, oy_hi) = valid_range(ho, h, s, offy);
                    for kx in 0..kw {
                        let widx = ((oc * in_c + ic) * kh + ky) * kw + kx;
                        let wv = wdata[widx];
                        let offx = (kx * d) as isize - pw as isize;
                        let (ox_lo, ox_hi) = valid_range(wo, w, s, offx);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let mut acc = T::zero();
                        let gx = grad_x.plane_mut(ni, ic);
                        for oy in oy_lo..oy_hi {
                            let iy = ((oy * s) as isize + offy) as usize;
                            let g_row = &gy[oy * wo..(oy + 1) * wo];
                            let x_row = &xin[iy * w..(iy + 1) * w];
                            let gx_row = &mut gx[iy * w..(iy + 1) * w];
                            for ox in ox_lo..ox_hi {
                                let ix = ((ox * s) as isize + offx) as usize;
                                let g = g_row[ox];
                                acc += g * x_row[ix];
                                gx_row[ix] += wv * g;
                            }
                        }
                        grad_weight.data_mut()[widx] += acc;
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        grad_x,
        grad_weight,
        grad_bias,
    })
}
