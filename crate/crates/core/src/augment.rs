//! The AutoAugment color policy: five two-op sub-policies over RGB images.
//!
//! Enhance ops (sharpness, brightness, contrast, color) blend the image
//! with a degenerate version using the magnitude as the factor, so 1 is the
//! identity. Solarize reads the magnitude as a 0-10 level and inverts
//! pixels at or above `256 * (1 - m / 10)`. Equalize ignores it.

use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 8-bit RGB, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::contract(format!(
                "{height}x{width} RGB image needs {} bytes, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { height, width, data }
    }

    fn map(&self, f: impl Fn(u8) -> u8) -> Image {
        Image { height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// ITU-R 601-2 luma per pixel.
    fn luma(&self) -> Vec<u8> {
        self.data
            .chunks_exact(3)
            .map(|p| ((299 * u32::from(p[0]) + 587 * u32::from(p[1]) + 114 * u32::from(p[2]) + 500) / 1000) as u8)
            .collect()
    }

    /// Binary PPM (P6, maxval 255).
    pub fn write_ppm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)
    }

    pub fn read_ppm<R: Read>(r: R) -> Result<Image> {
        let mut rd = BufReader::new(r);
        let mut fields = Vec::new();
        while fields.len() < 4 {
            let mut line = String::new();
            if rd.read_line(&mut line).map_err(|e| Error::Parse(format!("PPM header: {e}")))? == 0 {
                return Err(Error::Parse("PPM header truncated".into()));
            }
            let body = line.split('#').next().unwrap_or("");
            fields.extend(body.split_whitespace().map(str::to_owned));
        }
        if fields.len() != 4 || fields[0] != "P6" {
            return Err(Error::Parse("expected a binary P6 PPM header".into()));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Parse(format!("bad PPM header field `{s}`")));
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Parse(format!("PPM maxval {maxval} not supported (255 only)")));
        }
        let mut data = vec![0u8; width * height * 3];
        rd.read_exact(&mut data).map_err(|_| Error::Parse("PPM pixel data truncated".into()))?;
        Image::new(height, width, data)
    }

    pub fn read_ppm_file(path: &Path) -> Result<Image> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Image::read_ppm(f).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    pub fn write_ppm_file(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(self.data.len() + 20);
        self.write_ppm(&mut buf).expect("writing to memory");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpKind {
    Sharpness,
    Brightness,
    Equalize,
    Contrast,
    Color,
    Solarize,
}

impl std::str::FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "Sharpness" => OpKind::Sharpness,
            "Brightness" => OpKind::Brightness,
            "Equalize" => OpKind::Equalize,
            "Contrast" => OpKind::Contrast,
            "Color" => OpKind::Color,
            "Solarize" => OpKind::Solarize,
            _ => return Err(Error::invalid(format!("unknown augmentation op `{s}`"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugOp {
    pub kind: OpKind,
    pub prob: f64,
    pub magnitude: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubPolicy {
    pub ops: [AugOp; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugPolicy {
    pub subpolicies: Vec<SubPolicy>,
}

impl AugPolicy {
    pub fn new(subpolicies: Vec<SubPolicy>) -> Result<Self> {
        if subpolicies.is_empty() {
            return Err(Error::invalid("policy needs at least one sub-policy"));
        }
        for op in subpolicies.iter().flat_map(|s| &s.ops) {
            if !(0.0..=1.0).contains(&op.prob) || !(op.magnitude >= 0.0) {
                return Err(Error::invalid(format!("bad op {op:?}")));
            }
        }
        Ok(Self { subpolicies })
    }

    /// The five-sub-policy color table.
    pub fn standard() -> Self {
        use OpKind::*;
        let op = |kind, prob, magnitude| AugOp { kind, prob, magnitude };
        let rows = [
            [op(Sharpness, 0.4, 1.4), op(Brightness, 0.2, 2.0)],
            [op(Equalize, 0.0, 1.8), op(Contrast, 0.2, 2.0)],
            [op(Sharpness, 0.2, 1.8), op(Color, 0.2, 1.8)],
            [op(Solarize, 0.2, 1.4), op(Equalize, 0.6, 1.8)],
            [op(Sharpness, 0.2, 0.2), op(Equalize, 0.2, 1.4)],
        ];
        Self { subpolicies: rows.into_iter().map(|ops| SubPolicy { ops }).collect() }
    }
}

impl fmt::Display for AugPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14}| {:<10} {:>4} {:>4} | {:<10} {:>4} {:>4}", "", "Op 1", "Prob", "Mag", "Op 2", "Prob", "Mag")?;
        for (i, s) in self.subpolicies.iter().enumerate() {
            let [a, b] = s.ops;
            writeln!(
                f,
                "Sub-policy {:<2} | {:<10} {:>4.1} {:>4.1} | {:<10} {:>4.1} {:>4.1}",
                i + 1,
                format!("{:?}", a.kind),
                a.prob,
                a.magnitude,
                format!("{:?}", b.kind),
                b.prob,
                b.magnitude
            )?;
        }
        Ok(())
    }
}

/// Uniform sub-policy index in `1..=len`.
pub fn sample_subpolicy<R: Rng + ?Sized>(policy: &AugPolicy, rng: &mut R) -> usize {
    rng.random_range(0..policy.subpolicies.len()) + 1
}

fn blend(degenerate: &[u8], img: &Image, factor: f64) -> Image {
    let data = degenerate
        .iter()
        .zip(&img.data)
        .map(|(&d, &v)| {
            let d = f64::from(d);
            (d + factor * (f64::from(v) - d)).round().clamp(0.0, 255.0) as u8
        })
        .collect();
    Image { height: img.height, width: img.width, data }
}

/// Inversion threshold for a solarize level; 256 inverts nothing.
pub fn solarize_threshold(magnitude: f64) -> u16 {
    (256.0 * (1.0 - magnitude / 10.0)).round().clamp(0.0, 256.0) as u16
}

fn equalize(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..3 {
        let mut hist = [0usize; 256];
        for p in img.data.chunks_exact(3) {
            hist[usize::from(p[c])] += 1;
        }
        let last = hist.iter().rposition(|&n| n > 0).map_or(0, |i| hist[i]);
        let step = (hist.iter().sum::<usize>() - last) / 255;
        if step == 0 {
            continue;
        }
        let mut lut = [0u8; 256];
        let mut n = step / 2;
        for (v, &h) in hist.iter().enumerate() {
            lut[v] = (n / step).min(255) as u8;
            n += h;
        }
        for p in out.data.chunks_exact_mut(3) {
            p[c] = lut[usize::from(p[c])];
        }
    }
    out
}

/// 3x3 smoothing (center weight 5, total 13); the border stays unchanged.
fn smooth(img: &Image) -> Vec<u8> {
    let (h, w) = (img.height, img.width);
    let mut out = img.data.clone();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            for c in 0..3 {
                let mut acc = 0u32;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let wgt = if dy == 1 && dx == 1 { 5 } else { 1 };
                        acc += wgt * u32::from(img.data[((y + dy - 1) * w + x + dx - 1) * 3 + c]);
                    }
                }
                out[(y * w + x) * 3 + c] = ((acc + 6) / 13) as u8;
            }
        }
    }
    out
}

pub fn apply_op(img: &Image, kind: OpKind, magnitude: f64) -> Result<Image> {
    if !(magnitude >= 0.0 && magnitude.is_finite()) {
        return Err(Error::invalid(format!("magnitude {magnitude} must be finite and >= 0")));
    }
    Ok(match kind {
        OpKind::Brightness => blend(&vec![0; img.data.len()], img, magnitude),
        OpKind::Color => {
            let gray: Vec<u8> = img.luma().into_iter().flat_map(|l| [l, l, l]).collect();
            blend(&gray, img, magnitude)
        }
        OpKind::Contrast => {
            let luma = img.luma();
            let mean = if luma.is_empty() {
                0
            } else {
                (luma.iter().map(|&v| v as f64).sum::<f64>() / luma.len() as f64 + 0.5) as u8
            };
            blend(&vec![mean; img.data.len()], img, magnitude)
        }
        OpKind::Sharpness => blend(&smooth(img), img, magnitude),
        OpKind::Equalize => equalize(img),
        OpKind::Solarize => {
            let t = solarize_threshold(magnitude);
            img.map(|v| if u16::from(v) >= t { 255 - v } else { v })
        }
    })
}

/// Applies op 1 then op 2, each with its own Bernoulli draw.
pub fn apply_subpolicy<R: Rng + ?Sized>(img: &Image, sub: &SubPolicy, rng: &mut R) -> Result<Image> {
    let mut out = img.clone();
    for op in &sub.ops {
        if rng.random::<f64>() < op.prob {
            out = apply_op(&out, op.kind, op.magnitude)?;
        }
    }
    Ok(out)
}

/// Samples a sub-policy and applies it.
pub fn augment<R: Rng + ?Sized>(img: &Image, policy: &AugPolicy, rng: &mut R) -> Result<(usize, Image)> {
    let idx = sample_subpolicy(policy, rng);
    Ok((idx, apply_subpolicy(img, &policy.subpolicies[idx - 1], rng)?))
}

/// Multiplies every magnitude by `factor`; solarize levels stay at most 10.
pub fn scale_magnitudes(policy: &AugPolicy, factor: f64) -> Result<AugPolicy> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::invalid(format!("scale factor {factor} must be positive")));
    }
    let mut out = policy.clone();
    for op in out.subpolicies.iter_mut().flat_map(|s| s.ops.iter_mut()) {
        op.magnitude *= factor;
        if op.kind == OpKind::Solarize {
            op.magnitude = op.magnitude.min(10.0);
        }
    }
    Ok(out)
}
