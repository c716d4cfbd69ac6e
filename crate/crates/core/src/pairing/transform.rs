//! Data-space transformations used to build content positives.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datasets::ImageBatch;
use crate::error::{ensure, Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    /// Counter-clockwise rotation about the image centre, degrees.
    Rotation,
    /// Shift in pixels; x and y offsets are drawn independently.
    Translation,
    /// Zoom factor about the image centre.
    Scale,
    /// Gaussian blur, sigma in pixels.
    Blur,
    /// Contrast factor around the per-image mean.
    Contrast,
    /// Saturation factor (RGB only).
    Saturation,
    /// Hue shift in degrees (RGB only).
    Hue,
}

impl std::str::FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "rotation" => TransformKind::Rotation,
            "translation" => TransformKind::Translation,
            "scale" => TransformKind::Scale,
            "blur" => TransformKind::Blur,
            "contrast" => TransformKind::Contrast,
            "saturation" => TransformKind::Saturation,
            "hue" => TransformKind::Hue,
            other => return Err(Error::config(format!("unknown transform kind {other:?}"))),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resample {
    #[default]
    Bilinear,
    Nearest,
}

/// A transformation family with the range its parameter is drawn from.
/// `min == max` pins the parameter; otherwise it is uniform on `[min, max)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub kind: TransformKind,
    pub min: f64,
    pub max: f64,
    #[serde(default)]
    pub resample: Resample,
}

impl Default for TransformSpec {
    fn default() -> Self {
        Self::rotation(0.0, 360.0)
    }
}

impl TransformSpec {
    pub fn rotation(min_deg: f64, max_deg: f64) -> Self {
        TransformSpec {
            kind: TransformKind::Rotation,
            min: min_deg,
            max: max_deg,
            resample: Resample::Bilinear,
        }
    }

    pub fn new(kind: TransformKind, min: f64, max: f64) -> Self {
        TransformSpec {
            kind,
            min,
            max,
            resample: Resample::Bilinear,
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        ensure!(
            self.min.is_finite() && self.max.is_finite() && self.min <= self.max,
            Error::config(format!("empty transform range [{}, {})", self.min, self.max))
        );
        match self.kind {
            TransformKind::Scale => ensure!(self.min > 0.0, Error::config("scale factors must be positive")),
            TransformKind::Blur | TransformKind::Contrast | TransformKind::Saturation => {
                ensure!(self.min >= 0.0, Error::config("parameter must be non-negative"))
            }
            _ => {}
        }
        if matches!(self.kind, TransformKind::Saturation | TransformKind::Hue) {
            ensure!(
                channels == 3,
                Error::config(format!("{:?} needs RGB images, got {channels} channel(s)", self.kind))
            );
        }
        Ok(())
    }

    fn draw(&self, rng: &mut rng::Rng) -> f64 {
        if self.min == self.max {
            self.min
        } else {
            rng.random_range(self.min..self.max)
        }
    }
}

/// Transform every row of `batch` with a parameter drawn from `spec`.
/// Returns the transformed batch and, per row, `[param, aux]` where `aux`
/// is the vertical offset for translations and zero otherwise.
pub fn apply_transform(batch: &ImageBatch, spec: &TransformSpec, seed: u64) -> Result<(ImageBatch, Vec<[f64; 2]>)> {
    let shape = &batch.images.shape;
    ensure!(
        shape.len() == 4,
        Error::shape(format!("expected [B,H,W,C] images, got {shape:?}"))
    );
    let (h, w, c) = (shape[1], shape[2], shape[3]);
    spec.validate(c)?;
    let mut rng = rng::rng(seed);
    let mut out = Vec::with_capacity(batch.images.len());
    let mut params = Vec::with_capacity(batch.len());
    for r in 0..batch.len() {
        let p = spec.draw(&mut rng);
        let aux = if spec.kind == TransformKind::Translation {
            spec.draw(&mut rng)
        } else {
            0.0
        };
        let img = Image {
            data: batch.images.row(r),
            h,
            w,
            c,
        };
        out.extend(transform_image(&img, spec, p, aux));
        params.push([p, aux]);
    }
    Ok((
        ImageBatch {
            images: Tensor::new(shape.clone(), out),
            indices: batch.indices.clone(),
        },
        params,
    ))
}

/// Rotate `[B,H,W,C]` images counter-clockwise by `deg` degrees.
pub fn rotate_images(images: &Tensor<f32>, deg: f64, resample: Resample) -> Tensor<f32> {
    let (h, w, c) = (images.shape[1], images.shape[2], images.shape[3]);
    let data = (0..images.rows())
        .flat_map(|r| {
            rotate(
                &Image {
                    data: images.row(r),
                    h,
                    w,
                    c,
                },
                deg,
                resample,
            )
        })
        .collect();
    Tensor::new(images.shape.clone(), data)
}

struct Image<'a> {
    data: &'a [f32],
    h: usize,
    w: usize,
    c: usize,
}

impl Image<'_> {
    #[inline]
    fn at(&self, i: isize, j: isize, ch: usize) -> f32 {
        if i < 0 || j < 0 || i >= self.h as isize || j >= self.w as isize {
            0.0
        } else {
            self.data[(i as usize * self.w + j as usize) * self.c + ch]
        }
    }

    /// Sample at fractional row `y`, column `x`; zero outside the support.
    fn sample(&self, y: f64, x: f64, ch: usize, resample: Resample) -> f32 {
        match resample {
            Resample::Nearest => self.at(y.round() as isize, x.round() as isize, ch),
            Resample::Bilinear => {
                let (y0, x0) = (y.floor(), x.floor());
                let (fy, fx) = ((y - y0) as f32, (x - x0) as f32);
                let (i, j) = (y0 as isize, x0 as isize);
                let top = self.at(i, j, ch) * (1.0 - fx) + self.at(i, j + 1, ch) * fx;
                let bottom = self.at(i + 1, j, ch) * (1.0 - fx) + self.at(i + 1, j + 1, ch) * fx;
                top * (1.0 - fy) + bottom * fy
            }
        }
    }

    /// Inverse-map every output pixel through `src(i, j) -> (y, x)`.
    fn warp(&self, resample: Resample, src: impl Fn(f64, f64) -> (f64, f64)) -> Vec<f32> {
        let mut out = vec![0f32; self.data.len()];
        for i in 0..self.h {
            for j in 0..self.w {
                let (y, x) = src(i as f64, j as f64);
                for ch in 0..self.c {
                    out[(i * self.w + j) * self.c + ch] = self.sample(y, x, ch, resample).clamp(0.0, 1.0);
                }
            }
        }
        out
    }

    fn permute(&self, out_h: usize, out_w: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Vec<f32> {
        let mut out = vec![0f32; self.data.len()];
        for i in 0..out_h {
            for j in 0..out_w {
                let (si, sj) = src(i, j);
                let s = (si * self.w + sj) * self.c;
                let d = (i * out_w + j) * self.c;
                out[d..d + self.c].copy_from_slice(&self.data[s..s + self.c]);
            }
        }
        out
    }
}

fn rotate(img: &Image<'_>, deg: f64, resample: Resample) -> Vec<f32> {
    let turn = deg.rem_euclid(360.0);
    let (h, w) = (img.h, img.w);
    // Grid-aligned angles are exact index permutations.
    if turn == 0.0 {
        return img.data.to_vec();
    }
    if turn == 180.0 {
        return img.permute(h, w, |i, j| (h - 1 - i, w - 1 - j));
    }
    if h == w && turn == 90.0 {
        return img.permute(h, w, |i, j| (j, w - 1 - i));
    }
    if h == w && turn == 270.0 {
        return img.permute(h, w, |i, j| (h - 1 - j, i));
    }
    let theta = deg.to_radians();
    let (s, c) = (libm::sin(theta), libm::cos(theta));
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    img.warp(resample, |i, j| {
        // y-up offsets of the output pixel, rotated back by -theta
        let (x, y) = (j - cx, cy - i);
        let (qx, qy) = (c * x + s * y, -s * x + c * y);
        (cy - qy, cx + qx)
    })
}

fn gaussian_blur(img: &Image<'_>, sigma: f64) -> Vec<f32> {
    if sigma <= 0.0 {
        return img.data.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| (k / norm) as f32).collect();
    let (h, w, c) = (img.h as isize, img.w as isize, img.c);
    let mut tmp = vec![0f32; img.data.len()];
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                let mut acc = 0f32;
                for (k, &kv) in kernel.iter().enumerate() {
                    acc += kv * img.at(i, j + k as isize - radius, ch);
                }
                tmp[((i * w + j) as usize) * c + ch] = acc;
            }
        }
    }
    let mid = Image {
        data: &tmp,
        h: img.h,
        w: img.w,
        c,
    };
    let mut out = vec![0f32; img.data.len()];
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                let mut acc = 0f32;
                for (k, &kv) in kernel.iter().enumerate() {
                    acc += kv * mid.at(i + k as isize - radius, j, ch);
                }
                out[((i * w + j) as usize) * c + ch] = acc.clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

fn transform_image(img: &Image<'_>, spec: &TransformSpec, p: f64, aux: f64) -> Vec<f32> {
    let (h, w) = (img.h as f64, img.w as f64);
    let (cy, cx) = ((h - 1.0) / 2.0, (w - 1.0) / 2.0);
    match spec.kind {
        TransformKind::Rotation => rotate(img, p, spec.resample),
        TransformKind::Translation => {
            if p == 0.0 && aux == 0.0 {
                return img.data.to_vec();
            }
            img.warp(spec.resample, |i, j| (i - aux, j - p))
        }
        TransformKind::Scale => {
            if p == 1.0 {
                return img.data.to_vec();
            }
            img.warp(spec.resample, |i, j| (cy + (i - cy) / p, cx + (j - cx) / p))
        }
        TransformKind::Blur => gaussian_blur(img, p),
        TransformKind::Contrast => {
            let c = img.c;
            let px = img.h * img.w;
            let mut out = img.data.to_vec();
            for ch in 0..c {
                let mean = (0..px).map(|k| img.data[k * c + ch] as f64).sum::<f64>() / px as f64;
                for k in 0..px {
                    let v = img.data[k * c + ch] as f64;
                    out[k * c + ch] = (mean + p * (v - mean)).clamp(0.0, 1.0) as f32;
                }
            }
            out
        }
        TransformKind::Saturation => img
            .data
            .chunks_exact(3)
            .flat_map(|px| {
                let gray = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
                px.iter()
                    .map(move |&v| (gray + p as f32 * (v - gray)).clamp(0.0, 1.0))
                    .collect::<Vec<_>>()
            })
            .collect(),
        TransformKind::Hue => img
            .data
            .chunks_exact(3)
            .flat_map(|px| {
                let (hh, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
                let (r, g, b) = hsv_to_rgb(hh + p as f32, s, v);
                [r.clamp(0.0, 1.0), g.clamp(0.0, 1.0), b.clamp(0.0, 1.0)]
            })
            .collect(),
    }
}
