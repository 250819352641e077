use serde::{Deserialize, Serialize};

use super::{Element, Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Relu6,
    Sigmoid,
    /// `relu6(x + 3) / 6`
    HardSigmoid,
}

impl Activation {
    #[inline]
    pub fn apply<T: Element>(self, x: T) -> T {
        let zero = T::zero();
        let six = T::from_f64_lossy(6.0);
        match self {
            Activation::Relu => x.max(zero),
            Activation::Relu6 => x.max(zero).min(six),
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
            Activation::HardSigmoid => {
                (x + T::from_f64_lossy(3.0)).max(zero).min(six) / six
            }
        }
    }

    /// Derivative at `x`. Kinks take the one-sided value from the right for
    /// lower kinks and from the left for upper kinks.
    #[inline]
    pub fn derivative<T: Element>(self, x: T) -> T {
        let zero = T::zero();
        let one = T::one();
        match self {
            Activation::Relu => {
                if x > zero {
                    one
                } else {
                    zero
                }
            }
            Activation::Relu6 => {
                if x > zero && x < T::from_f64_lossy(6.0) {
                    one
                } else {
                    zero
                }
            }
            Activation::Sigmoid => {
                let s = self.apply(x);
                s * (one - s)
            }
            Activation::HardSigmoid => {
                let three = T::from_f64_lossy(3.0);
                if x > -three && x < three {
                    one / T::from_f64_lossy(6.0)
                } else {
                    zero
                }
            }
        }
    }

    /// Points where the activation is not differentiable.
    pub fn kinks(self) -> &'static [f64] {
        match self {
            Activation::Relu => &[0.0],
            Activation::Relu6 => &[0.0, 6.0],
            Activation::Sigmoid => &[],
            Activation::HardSigmoid => &[-3.0, 3.0],
        }
    }
}

pub fn activation<T: Element>(kind: Activation, x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| kind.apply(v))
}

/// Average pooling over a `window x window` neighbourhood. Padded positions
/// are excluded from the divisor.
pub fn avg_pool2d<T: Element>(
    x: &Tensor<T>,
    window: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    if window == 0 || stride == 0 {
        return Err(Error::invalid("pool window and stride must be >= 1"));
    }
    let s = x.shape();
    let extent = |len: usize| {
        (len + 2 * padding >= window).then(|| (len + 2 * padding - window) / stride + 1)
    };
    let (oh, ow) = match (extent(s.h), extent(s.w)) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
        _ => {
            return Err(Error::DegenerateShape(format!(
                "pool window {window} on {s} has empty output"
            )))
        }
    };
    let os = Shape::new(s.n, s.c, oh, ow);
    let mut out = Tensor::zeros(os);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            for oy in 0..oh {
                let y0 = (oy * stride).saturating_sub(padding);
                let y1 = (oy * stride + window).saturating_sub(padding).min(s.h);
                for ox in 0..ow {
                    let x0 = (ox * stride).saturating_sub(padding);
                    let x1 = (ox * stride + window).saturating_sub(padding).min(s.w);
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        for v in &src[y * s.w + x0..y * s.w + x1] {
                            acc = acc + *v;
                        }
                    }
                    let count = ((y1 - y0) * (x1 - x0)).max(1);
                    out.set(n, c, oy, ox, acc / T::from_usize(count).unwrap());
                }
            }
        }
    }
    Ok(out)
}

pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.plane() == 0 {
        return Err(Error::DegenerateShape(format!("global pool on {s}")));
    }
    let count = T::from_usize(s.plane()).unwrap();
    let data = (0..s.n * s.c)
        .map(|i| {
            let p = &x.data()[i * s.plane()..(i + 1) * s.plane()];
            p.iter().copied().sum::<T>() / count
        })
        .collect();
    Tensor::new(Shape::new(s.n, s.c, 1, 1), data)
}

/// `out[n, o] = sum_i weight[o, i] * z[n, i] + bias[o]`, with `weight` stored
/// as a `(out, in, 1, 1)` tensor and `z` of shape `(n, in, 1, 1)`.
pub fn fully_connected<T: Element>(
    z: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
) -> Result<Tensor<T>> {
    let zs = z.shape();
    let ws = weight.shape();
    if zs.h != 1 || zs.w != 1 || ws.h != 1 || ws.w != 1 {
        return Err(Error::contract(format!(
            "fully connected expects pooled input and matrix weights, got {zs} and {ws}"
        )));
    }
    if ws.c != zs.c {
        return Err(Error::contract(format!(
            "fully connected weight {}x{} applied to {} features",
            ws.n, ws.c, zs.c
        )));
    }
    if let Some(b) = bias {
        if b.len() != ws.n {
            return Err(Error::contract(format!("bias of length {} for {} outputs", b.len(), ws.n)));
        }
    }
    let mut out = Vec::with_capacity(zs.n * ws.n);
    for n in 0..zs.n {
        let zin = &z.data()[n * zs.c..(n + 1) * zs.c];
        for o in 0..ws.n {
            let row = &weight.data()[o * ws.c..(o + 1) * ws.c];
            let dot: T = row.iter().zip(zin).map(|(&a, &b)| a * b).sum();
            out.push(dot + bias.map_or(T::zero(), |b| b[o]));
        }
    }
    Tensor::new(Shape::new(zs.n, ws.n, 1, 1), out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub eps: T,
}

impl<T: Element> BatchNormParams<T> {
    /// Unit statistics: gamma 1, beta 0, mean 0, var 1.
    pub fn identity(channels: usize, eps: T) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Per-channel `(scale, shift)` with `y = scale * x + shift`.
    pub fn affine(&self) -> Result<Vec<(T, T)>> {
        let c = self.gamma.len();
        if self.mean.len() != c || self.var.len() != c || self.beta.len() != c {
            return Err(Error::contract("batch norm parameter vectors differ in length"));
        }
        (0..c)
            .map(|i| {
                if self.var[i] < T::zero() {
                    return Err(Error::invalid(format!("negative variance in channel {i}")));
                }
                let denom = (self.var[i] + self.eps).sqrt();
                let scale = self.gamma[i] / denom;
                Ok((scale, self.beta[i] - scale * self.mean[i]))
            })
            .collect()
    }
}

pub fn batch_norm_inference<T: Element>(
    x: &Tensor<T>,
    p: &BatchNormParams<T>,
) -> Result<Tensor<T>> {
    let s = x.shape();
    if p.channels() != s.c {
        return Err(Error::contract(format!(
            "batch norm over {} channels applied to {s}",
            p.channels()
        )));
    }
    let c = s.c;
    let mut out = x.clone();
    for i in 0..c {
        if p.var[i] < T::zero() {
            return Err(Error::invalid(format!("negative variance in channel {i}")));
        }
    }
    let plane = s.plane();
    for (idx, chunk) in out.data_mut().chunks_mut(plane.max(1)).enumerate() {
        let ch = idx % c;
        let denom = (p.var[ch] + p.eps).sqrt();
        for v in chunk {
            *v = p.gamma[ch] * (*v - p.mean[ch]) / denom + p.beta[ch];
        }
    }
    Ok(out)
}

/// Source coordinate and blend weight for half-pixel-centre resizing.
fn resize_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize with the align-corners-false convention.
pub fn bilinear_resize<T: Element>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if out_h == 0 || out_w == 0 || s.plane() == 0 {
        return Err(Error::DegenerateShape(format!("resize {s} to {out_h}x{out_w}")));
    }
    if (out_h, out_w) == (s.h, s.w) {
        return Ok(x.clone());
    }
    let ty = resize_taps(out_h, s.h);
    let tx = resize_taps(out_w, s.w);
    let os = Shape::new(s.n, s.c, out_h, out_w);
    let mut out = Tensor::zeros(os);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let fy = T::from_f64_lossy(fy);
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let fx = T::from_f64_lossy(fx);
                    let top = src[y0 * s.w + x0] * (T::one() - fx) + src[y0 * s.w + x1] * fx;
                    let bot = src[y1 * s.w + x0] * (T::one() - fx) + src[y1 * s.w + x1] * fx;
                    out.set(n, c, oy, ox, top * (T::one() - fy) + bot * fy);
                }
            }
        }
    }
    Ok(out)
}

pub fn concat_channels<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat of zero tensors"))?
        .shape();
    if let Some(p) = parts
        .iter()
        .find(|p| (p.shape().n, p.shape().h, p.shape().w) != (first.n, first.h, first.w))
    {
        return Err(Error::contract(format!("concat of {first} with {}", p.shape())));
    }
    let c: usize = parts.iter().map(|p| p.shape().c).sum();
    let os = Shape::new(first.n, c, first.h, first.w);
    let mut data = Vec::with_capacity(os.numel());
    for n in 0..first.n {
        for p in parts {
            let per = p.shape().c * p.shape().plane();
            data.extend_from_slice(&p.data()[n * per..(n + 1) * per]);
        }
    }
    Tensor::new(os, data)
}

fn broadcast_zip<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    let sa = a.shape();
    let sb = b.shape();
    let ok = sa
        .dims()
        .iter()
        .zip(sb.dims())
        .all(|(&da, db)| db == da || db == 1);
    if !ok {
        return Err(Error::contract(format!("cannot broadcast {sb} onto {sa}")));
    }
    let pick = |i: usize, d: usize| if d == 1 { 0 } else { i };
    Ok(Tensor::from_fn(sa, |n, c, y, x| {
        f(
            a.at(n, c, y, x),
            b.at(pick(n, sb.n), pick(c, sb.c), pick(y, sb.h), pick(x, sb.w)),
        )
    }))
}

/// `a + b`, where each extent of `b` equals the matching extent of `a` or 1.
pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_zip(a, b, |x, y| x + y)
}

/// `a * b`, where each extent of `b` equals the matching extent of `a` or 1.
pub fn mul_broadcast<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_zip(a, b, |x, y| x * y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn hard_sigmoid_reference_points() {
        let hs = Activation::HardSigmoid;
        assert_eq!(hs.apply(-3.0f64), 0.0);
        assert_eq!(hs.apply(0.0f64), 0.5);
        assert_eq!(hs.apply(3.0f64), 1.0);
        assert_eq!(hs.apply(-10.0f64), 0.0);
        assert_eq!(hs.apply(10.0f64), 1.0);
    }

    #[test]
    fn relu6_and_sigmoid() {
        assert_eq!(Activation::Relu6.apply(7.0f32), 6.0);
        assert_eq!(Activation::Relu6.apply(-1.0f32), 0.0);
        assert_eq!(Activation::Sigmoid.apply(0.0f32), 0.5);
        assert_eq!(Activation::Relu.apply(-2.0f32), 0.0);
    }

    #[test]
    fn avg_pool_constant_and_small() {
        let x = Tensor::<f32>::full(Shape::new(1, 2, 6, 5), 7.0);
        for (k, s, p) in [(1, 1, 0), (3, 1, 1), (5, 1, 2), (2, 2, 0), (5, 2, 2)] {
            let y = avg_pool2d(&x, k, s, p).unwrap();
            assert!(y.data().iter().all(|&v| (v - 7.0).abs() < 1e-6));
        }
        let x = Tensor::<f32>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avg_pool2d(&x, 2, 2, 0).unwrap().data(), &[2.5]);
    }

    #[test]
    fn avg_pool_matches_window_mean() {
        let mut rng = rng();
        let x = Tensor::<f64>::randn(Shape::new(1, 3, 9, 9), 1.0, &mut rng);
        let y = avg_pool2d(&x, 5, 1, 2).unwrap();
        assert_eq!(y.shape(), x.shape());
        for c in 0..3 {
            for oy in 0..9 {
                for ox in 0..9 {
                    let mut vals = Vec::new();
                    for dy in -2i64..=2 {
                        for dx in -2i64..=2 {
                            let (yy, xx) = (oy as i64 + dy, ox as i64 + dx);
                            if (0..9).contains(&yy) && (0..9).contains(&xx) {
                                vals.push(x.at(0, c, yy as usize, xx as usize));
                            }
                        }
                    }
                    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                    assert!((y.at(0, c, oy, ox) - mean).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn global_pool() {
        let x = Tensor::<f32>::from_vec([1, 1, 2, 2], vec![0.0, 0.0, 0.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[1.0]);
        let mut rng = rng();
        let x = Tensor::<f64>::randn(Shape::new(2, 3, 4, 5), 1.0, &mut rng);
        let g = global_avg_pool(&x).unwrap();
        assert_eq!(g.shape(), Shape::new(2, 3, 1, 1));
        for n in 0..2 {
            for c in 0..3 {
                let mut sum = 0.0;
                for y in 0..4 {
                    for xx in 0..5 {
                        sum += x.at(n, c, y, xx);
                    }
                }
                assert!((g.at(n, c, 0, 0) - sum / 20.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fully_connected_cases() {
        let mut rng = rng();
        let z = Tensor::<f64>::randn(Shape::new(2, 3, 1, 1), 1.0, &mut rng);
        let eye = Tensor::from_fn(Shape::new(3, 3, 1, 1), |o, i, _, _| if o == i { 1.0 } else { 0.0 });
        assert_eq!(fully_connected(&z, &eye, None).unwrap(), z);
        let zero = Tensor::zeros(Shape::new(2, 3, 1, 1));
        let out = fully_connected(&z, &zero, Some(&[1.5, -2.0])).unwrap();
        assert_eq!(out.data(), &[1.5, -2.0, 1.5, -2.0]);
        let w = Tensor::<f64>::randn(Shape::new(4, 3, 1, 1), 1.0, &mut rng);
        let out = fully_connected(&z, &w, None).unwrap();
        for n in 0..2 {
            for o in 0..4 {
                let dot: f64 = (0..3).map(|i| w.at(o, i, 0, 0) * z.at(n, i, 0, 0)).sum();
                assert!((out.at(n, o, 0, 0) - dot).abs() < 1e-12);
            }
        }
        assert!(fully_connected(&z, &Tensor::zeros(Shape::new(2, 4, 1, 1)), None).is_err());
    }

    #[test]
    fn batch_norm_cases() {
        let mut rng = rng();
        let x = Tensor::<f64>::randn(Shape::new(2, 3, 3, 3), 1.0, &mut rng);
        let id = BatchNormParams::identity(3, 0.0);
        assert_eq!(batch_norm_inference(&x, &id).unwrap(), x);
        let mut p = id.clone();
        p.gamma = vec![0.0; 3];
        p.beta = vec![1.0, 2.0, 3.0];
        let y = batch_norm_inference(&x, &p).unwrap();
        assert!((0..3).all(|c| y.plane(1, c).iter().all(|&v| v == (c + 1) as f64)));
        let p = BatchNormParams {
            mean: vec![0.3, -0.2, 1.0],
            var: vec![0.5, 2.0, 0.1],
            gamma: vec![1.2, 0.7, -0.4],
            beta: vec![0.1, 0.0, -1.0],
            eps: 1e-5,
        };
        let y = batch_norm_inference(&x, &p).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                for i in 0..9 {
                    let v = x.plane(n, c)[i];
                    let e = p.gamma[c] * (v - p.mean[c]) / (p.var[c] + p.eps).sqrt() + p.beta[c];
                    assert!((y.plane(n, c)[i] - e).abs() < 1e-12);
                }
            }
        }
        let mut bad = p.clone();
        bad.var[1] = -1.0;
        assert!(batch_norm_inference(&x, &bad).is_err());
    }

    #[test]
    fn resize_identity_and_constant() {
        let mut rng = rng();
        let x = Tensor::<f32>::randn(Shape::new(1, 2, 5, 7), 1.0, &mut rng);
        assert_eq!(bilinear_resize(&x, 5, 7).unwrap(), x);
        let c = Tensor::<f32>::full(Shape::new(1, 1, 3, 4), 2.5);
        let r = bilinear_resize(&c, 11, 6).unwrap();
        assert!(r.data().iter().all(|&v| (v - 2.5).abs() < 1e-6));
    }

    #[test]
    fn resize_two_by_two_upsampled() {
        // Hand interpolation with src = (dst + 0.5) / 2 - 0.5, clamped at 0:
        // rows/cols map to 0, 0.25, 0.75, 1 in source coordinates.
        let x = Tensor::<f64>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = bilinear_resize(&x, 4, 4).unwrap();
        let pos = [0.0, 0.25, 0.75, 1.0];
        let f = |r: f64, c: f64| 1.0 + c + 2.0 * r;
        for (i, &r) in pos.iter().enumerate() {
            for (j, &c) in pos.iter().enumerate() {
                assert!((y.at(0, 0, i, j) - f(r, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn broadcast_and_concat() {
        let a = Tensor::<f32>::full(Shape::new(1, 2, 2, 2), 2.0);
        let s = Tensor::from_vec([1, 2, 1, 1], vec![0.5, 3.0]).unwrap();
        let y = mul_broadcast(&a, &s).unwrap();
        assert_eq!(y.plane(0, 0), &[1.0; 4]);
        assert_eq!(y.plane(0, 1), &[6.0; 4]);
        let g = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = add(&a, &g).unwrap();
        assert_eq!(y.plane(0, 1), &[3.0, 2.0, 2.0, 3.0]);
        assert!(add(&g, &a).is_err());
        let c = concat_channels(&[&a, &g]).unwrap();
        assert_eq!(c.shape(), Shape::new(1, 3, 2, 2));
        assert_eq!(c.plane(0, 2), g.plane(0, 0));
    }
}
