use rayon::prelude::*;

use super::{Element, Shape, Tensor};
use crate::error::{Error, Result};

/// Weights and geometry of a 2-D convolution.
///
/// `weight` has shape `(out_channels, in_channels / groups, kh, kw)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Option<Vec<T>>,
    pub stride: usize,
    pub rate: usize,
    pub padding: (usize, usize),
    pub groups: usize,
}

/// "Same-like" padding: stride-1 convs keep the spatial size and stride-2
/// convs produce `ceil(in / 2)` for odd kernels.
pub fn same_padding(kernel: usize, rate: usize) -> usize {
    rate * (kernel - 1) / 2
}

impl<T: Element> ConvKernel<T> {
    /// Dense kernel with same-like padding and no bias.
    pub fn new(weight: Tensor<T>, stride: usize, rate: usize) -> Result<Self> {
        let s = weight.shape();
        let k = Self {
            padding: (same_padding(s.h, rate), same_padding(s.w, rate)),
            weight,
            bias: None,
            stride,
            rate,
            groups: 1,
        };
        k.validate()?;
        Ok(k)
    }

    /// Depthwise kernel: `weight` is `(channels, 1, kh, kw)`.
    pub fn depthwise(weight: Tensor<T>, stride: usize, rate: usize) -> Result<Self> {
        let groups = weight.shape().n;
        let mut k = Self::new(weight, stride, rate)?;
        k.groups = groups;
        k.validate()?;
        Ok(k)
    }

    pub fn with_bias(mut self, bias: Vec<T>) -> Result<Self> {
        if bias.len() != self.out_channels() {
            return Err(Error::contract(format!(
                "bias of length {} for {} output channels",
                bias.len(),
                self.out_channels()
            )));
        }
        self.bias = Some(bias);
        Ok(self)
    }

    pub fn with_rate(mut self, rate: usize) -> Result<Self> {
        let s = self.weight.shape();
        self.rate = rate;
        self.padding = (same_padding(s.h, rate), same_padding(s.w, rate));
        self.validate()?;
        Ok(self)
    }

    pub fn with_padding(mut self, pad_h: usize, pad_w: usize) -> Self {
        self.padding = (pad_h, pad_w);
        self
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c * self.groups
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        let s = self.weight.shape();
        (s.h, s.w)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.weight.shape();
        if s.h % 2 == 0 || s.w % 2 == 0 {
            return Err(Error::invalid(format!("kernel {}x{} must be odd", s.h, s.w)));
        }
        if self.rate == 0 {
            return Err(Error::invalid("atrous rate must be >= 1"));
        }
        if !(1..=2).contains(&self.stride) {
            return Err(Error::invalid(format!("stride {} not in {{1, 2}}", self.stride)));
        }
        if self.groups == 0 || s.n % self.groups != 0 {
            return Err(Error::invalid(format!(
                "{} output channels not divisible into {} groups",
                s.n, self.groups
            )));
        }
        Ok(())
    }

    /// Output extent along one axis.
    pub fn output_extent(&self, input: usize, kernel: usize, pad: usize) -> Option<usize> {
        let span = self.rate * (kernel - 1) + 1;
        let padded = input + 2 * pad;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.in_channels() {
            return Err(Error::contract(format!(
                "conv expects {} input channels, got {}",
                self.in_channels(),
                input.c
            )));
        }
        let (kh, kw) = self.kernel_size();
        let oh = self.output_extent(input.h, kh, self.padding.0);
        let ow = self.output_extent(input.w, kw, self.padding.1);
        match (oh, ow) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => {
                Ok(Shape::new(input.n, self.out_channels(), oh, ow))
            }
            _ => Err(Error::DegenerateShape(format!(
                "conv {kh}x{kw} rate {} stride {} on {input} has empty output",
                self.rate, self.stride
            ))),
        }
    }
}

/// Output indices `o` in `[0, out_len)` with `0 <= o*stride + tap - pad < in_len`.
#[inline]
fn valid_range(tap: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let tap = tap as isize;
    let pad = pad as isize;
    let stride = stride as isize;
    let lo_num = pad - tap;
    let start = if lo_num <= 0 { 0 } else { (lo_num + stride - 1) / stride };
    let hi_num = in_len as isize - 1 + pad - tap;
    if hi_num < 0 {
        return (0, 0);
    }
    let end = (hi_num / stride + 1).min(out_len as isize);
    let start = start.min(end);
    (start as usize, end as usize)
}

/// Target number of elements in one im2col band.
const BAND_ELEMS: usize = 1 << 22;

pub fn conv2d<T: Element>(x: &Tensor<T>, k: &ConvKernel<T>) -> Result<Tensor<T>> {
    k.validate()?;
    let os = k.output_shape(x.shape())?;
    let mut out = vec![T::zero(); os.numel()];
    if k.groups == 1 {
        conv_dense(x, k, os, &mut out);
    } else {
        conv_direct(x, k, os, &mut out);
    }
    Tensor::new(os, out)
}

/// Fills `col[k][p]` for output rows `rows` of batch item `n`, where `k`
/// runs over `(ci, ky, kx)` and out-of-bounds taps read zero.
fn im2col<T: Element>(x: &Tensor<T>, k: &ConvKernel<T>, os: Shape, n: usize, rows: std::ops::Range<usize>, col: &mut [T]) {
    let xs = x.shape();
    let (kh, kw) = k.kernel_size();
    let (ph, pw) = k.padding;
    let (stride, rate) = (k.stride, k.rate);
    let bp = rows.len() * os.w;
    let mut r = 0;
    for ci in 0..xs.c {
        let src = x.plane(n, ci);
        for ky in 0..kh {
            let (y0, y1) = valid_range(ky * rate, ph, stride, xs.h, os.h);
            for kx in 0..kw {
                let (x0, x1) = valid_range(kx * rate, pw, stride, xs.w, os.w);
                let dst = &mut col[r * bp..(r + 1) * bp];
                for (j, oy) in rows.clone().enumerate() {
                    let drow = &mut dst[j * os.w..(j + 1) * os.w];
                    if oy < y0 || oy >= y1 || x0 >= x1 {
                        drow.fill(T::zero());
                        continue;
                    }
                    let iy = oy * stride + ky * rate - ph;
                    let row = &src[iy * xs.w..(iy + 1) * xs.w];
                    drow[..x0].fill(T::zero());
                    drow[x1..].fill(T::zero());
                    if stride == 1 {
                        let sx = x0 + kx * rate - pw;
                        drow[x0..x1].copy_from_slice(&row[sx..sx + (x1 - x0)]);
                    } else {
                        for ox in x0..x1 {
                            drow[ox] = row[ox * stride + kx * rate - pw];
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

/// Dense conv as a banded im2col product. Taps accumulate in `(ci, ky, kx)`
/// order, the same order as the direct loop.
fn conv_dense<T: Element>(x: &Tensor<T>, k: &ConvKernel<T>, os: Shape, out: &mut [T]) {
    let (kh, kw) = k.kernel_size();
    let kdim = x.shape().c * kh * kw;
    let plane = os.plane();
    let wdata = k.weight.data();
    let band_rows = (BAND_ELEMS / (kdim * os.w)).clamp(1, os.h);
    let mut col = vec![T::zero(); kdim * band_rows * os.w];
    for n in 0..os.n {
        let out_n = &mut out[n * os.c * plane..(n + 1) * os.c * plane];
        for r0 in (0..os.h).step_by(band_rows) {
            let rows = r0..(r0 + band_rows).min(os.h);
            let (p0, bp) = (r0 * os.w, rows.len() * os.w);
            let col = &mut col[..kdim * bp];
            im2col(x, k, os, n, rows, col);
            let col = &*col;
            out_n.par_chunks_mut(4 * plane).enumerate().for_each(|(blk, dst)| {
                let o0 = 4 * blk;
                let mut bands: Vec<&mut [T]> = dst.chunks_mut(plane).map(|p| &mut p[p0..p0 + bp]).collect();
                for (j, band) in bands.iter_mut().enumerate() {
                    band.fill(k.bias.as_ref().map_or(T::zero(), |b| b[o0 + j]));
                }
                if let [d0, d1, d2, d3] = &mut bands[..] {
                    let w = |j: usize| &wdata[(o0 + j) * kdim..(o0 + j + 1) * kdim];
                    let (w0, w1, w2, w3) = (w(0), w(1), w(2), w(3));
                    for kk in 0..kdim {
                        let c = &col[kk * bp..(kk + 1) * bp];
                        let (a, b, e, f) = (w0[kk], w1[kk], w2[kk], w3[kk]);
                        let rows = d0.iter_mut().zip(d1.iter_mut()).zip(d2.iter_mut()).zip(d3.iter_mut());
                        for ((((y0, y1), y2), y3), &v) in rows.zip(c) {
                            *y0 = *y0 + a * v;
                            *y1 = *y1 + b * v;
                            *y2 = *y2 + e * v;
                            *y3 = *y3 + f * v;
                        }
                    }
                } else {
                    for (j, band) in bands.iter_mut().enumerate() {
                        let w = &wdata[(o0 + j) * kdim..(o0 + j + 1) * kdim];
                        for (kk, &wv) in w.iter().enumerate() {
                            for (d, &v) in band.iter_mut().zip(&col[kk * bp..(kk + 1) * bp]) {
                                *d = *d + wv * v;
                            }
                        }
                    }
                }
            });
        }
    }
}

/// Grouped conv, one output plane at a time.
fn conv_direct<T: Element>(x: &Tensor<T>, k: &ConvKernel<T>, os: Shape, out: &mut [T]) {
    let xs = x.shape();
    let (kh, kw) = k.kernel_size();
    let cin_g = k.weight.shape().c;
    let cout_g = os.c / k.groups;
    let (ph, pw) = k.padding;
    let (stride, rate) = (k.stride, k.rate);
    let wdata = k.weight.data();
    let xdata = x.data();
    let plane = os.plane();

    out.par_chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, dst)| {
            let n = idx / os.c;
            let o = idx % os.c;
            let g = o / cout_g;
            if let Some(b) = &k.bias {
                dst.iter_mut().for_each(|v| *v = b[o]);
            }
            for ci in 0..cin_g {
                let c = g * cin_g + ci;
                let src = &xdata[(n * xs.c + c) * xs.plane()..][..xs.plane()];
                for ky in 0..kh {
                    let (y0, y1) = valid_range(ky * rate, ph, stride, xs.h, os.h);
                    for kx in 0..kw {
                        let wv = wdata[((o * cin_g + ci) * kh + ky) * kw + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        let (x0, x1) = valid_range(kx * rate, pw, stride, xs.w, os.w);
                        for oy in y0..y1 {
                            let iy = oy * stride + ky * rate - ph;
                            let row = &src[iy * xs.w..(iy + 1) * xs.w];
                            let drow = &mut dst[oy * os.w..(oy + 1) * os.w];
                            if stride == 1 {
                                if x1 > x0 {
                                    let sx = x0 + kx * rate - pw;
                                    for (d, &s) in drow[x0..x1].iter_mut().zip(&row[sx..sx + (x1 - x0)]) {
                                        *d = *d + wv * s;
                                    }
                                }
                            } else {
                                for ox in x0..x1 {
                                    let ix = ox * stride + kx * rate - pw;
                                    drow[ox] = drow[ox] + wv * row[ix];
                                }
                            }
                        }
                    }
                }
            }
        });
}

/// Gradient of `sum(grad_out * conv2d(x, k))` with respect to `x`.
pub fn conv2d_backward_input<T: Element>(
    grad_out: &Tensor<T>,
    k: &ConvKernel<T>,
    input_shape: Shape,
) -> Result<Tensor<T>> {
    let os = k.output_shape(input_shape)?;
    if grad_out.shape() != os {
        return Err(Error::contract(format!(
            "conv grad shape {} does not match output {os}",
            grad_out.shape()
        )));
    }
    let (kh, kw) = k.kernel_size();
    let cin_g = k.weight.shape().c;
    let cout_g = os.c / k.groups;
    let (ph, pw) = k.padding;
    let (stride, rate) = (k.stride, k.rate);
    let mut gx = Tensor::zeros(input_shape);
    for n in 0..os.n {
        for o in 0..os.c {
            let g = o / cout_g;
            for ci in 0..cin_g {
                let c = g * cin_g + ci;
                for ky in 0..kh {
                    let (y0, y1) = valid_range(ky * rate, ph, stride, input_shape.h, os.h);
                    for kx in 0..kw {
                        let wv = k.weight.at(o, ci, ky, kx);
                        let (x0, x1) = valid_range(kx * rate, pw, stride, input_shape.w, os.w);
                        for oy in y0..y1 {
                            let iy = oy * stride + ky * rate - ph;
                            for ox in x0..x1 {
                                let ix = ox * stride + kx * rate - pw;
                                let i = gx.offset(n, c, iy, ix);
                                gx.data_mut()[i] = gx.data()[i] + wv * grad_out.at(n, o, oy, ox);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(gx)
}

/// Gradients of `sum(grad_out * conv2d(x, k))` with respect to the weights
/// and (when present) the bias.
pub fn conv2d_backward_weight<T: Element>(
    x: &Tensor<T>,
    grad_out: &Tensor<T>,
    k: &ConvKernel<T>,
) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    let xs = x.shape();
    let os = k.output_shape(xs)?;
    if grad_out.shape() != os {
        return Err(Error::contract(format!(
            "conv grad shape {} does not match output {os}",
            grad_out.shape()
        )));
    }
    let (kh, kw) = k.kernel_size();
    let cin_g = k.weight.shape().c;
    let cout_g = os.c / k.groups;
    let (ph, pw) = k.padding;
    let (stride, rate) = (k.stride, k.rate);
    let mut gw = Tensor::zeros(k.weight.shape());
    for n in 0..os.n {
        for o in 0..os.c {
            let g = o / cout_g;
            for ci in 0..cin_g {
                let c = g * cin_g + ci;
                for ky in 0..kh {
                    let (y0, y1) = valid_range(ky * rate, ph, stride, xs.h, os.h);
                    for kx in 0..kw {
                        let (x0, x1) = valid_range(kx * rate, pw, stride, xs.w, os.w);
                        let mut acc = T::zero();
                        for oy in y0..y1 {
                            let iy = oy * stride + ky * rate - ph;
                            for ox in x0..x1 {
                                let ix = ox * stride + kx * rate - pw;
                                acc = acc + x.at(n, c, iy, ix) * grad_out.at(n, o, oy, ox);
                            }
                        }
                        let i = gw.offset(o, ci, ky, kx);
                        gw.data_mut()[i] = gw.data()[i] + acc;
                    }
                }
            }
        }
    }
    let gb = k.bias.as_ref().map(|_| {
        (0..os.c)
            .map(|o| (0..os.n).map(|n| grad_out.plane(n, o).iter().copied().sum::<T>()).sum())
            .collect()
    });
    Ok((gw, gb))
}
