use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::OpId;
use crate::error::{MastError, Result};
use crate::image::{Image, CHANNELS};

/// Parameters of one operator application.
///
/// `magnitude` is in operator units (see [`OpId::limits`]). `aux` holds
/// uniform draws in `[0, 1)` used for directions and positions; `seed`
/// drives per-pixel randomness (noise). Output is a pure function of
/// `(op, params, image)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpParams {
    pub magnitude: f64,
    pub aux: [f64; 4],
    pub seed: u64,
}

impl OpParams {
    pub fn new(magnitude: f64) -> Self {
        Self {
            magnitude,
            aux: [0.5; 4],
            seed: 0,
        }
    }

    pub fn with_aux(mut self, aux: [f64; 4]) -> Self {
        self.aux = aux;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Applies `op` with `params` to `img`. Output has the input's extents and
/// values in `[0, 1]`.
pub fn apply(op: OpId, params: &OpParams, img: &Image) -> Result<Image> {
    let m = params.magnitude;
    let (lo, hi) = op.limits();
    if !m.is_finite() || m < lo || m > hi {
        return Err(MastError::domain(format!(
            "{op} magnitude {m} outside [{lo}, {hi}]"
        )));
    }
    if params.aux.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(MastError::domain(format!("{op} auxiliary draws must lie in [0, 1]")));
    }
    let a = params.aux;
    let mf = m as f32;
    let out = match op {
        OpId::ColorJitter => color_jitter(img, m, a),
        OpId::GaussianBlur => gaussian_blur(img, mf),
        OpId::RandomFlip => {
            if m >= 0.5 {
                img.map_pixels(|c, y, x| img.get(c, y, img.width() - 1 - x))
            } else {
                img.clone()
            }
        }
        OpId::RandomGrayscale => img.blend(&grayscale(img), mf),
        OpId::RandomResizedCrop => resized_crop(img, m, a),
        OpId::ShearX => {
            let cy = (img.height() as f32 - 1.0) / 2.0;
            warp(img, |y, x| (y, x + mf * (y - cy)))
        }
        OpId::ShearY => {
            let cx = (img.width() as f32 - 1.0) / 2.0;
            warp(img, |y, x| (y + mf * (x - cx), x))
        }
        OpId::TranslateX => {
            let dx = mf * img.width() as f32;
            warp(img, |y, x| (y, x - dx))
        }
        OpId::TranslateY => {
            let dy = mf * img.height() as f32;
            warp(img, |y, x| (y - dy, x))
        }
        OpId::Rotate => {
            let (s, c) = (m.to_radians() as f32).sin_cos();
            let cy = (img.height() as f32 - 1.0) / 2.0;
            let cx = (img.width() as f32 - 1.0) / 2.0;
            // inverse rotation of the output grid
            warp(img, |y, x| {
                let (dy, dx) = (y - cy, x - cx);
                (cy - s * dx + c * dy, cx + c * dx + s * dy)
            })
        }
        OpId::Invert => img.blend(&img.map_pixels(|c, y, x| 1.0 - img.get(c, y, x)), mf),
        OpId::Sharpness => sharpness(img, mf),
        OpId::GaussianNoise => {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            let mut out = img.clone();
            for c in 0..CHANNELS {
                for v in out.plane_mut(c) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v += (m * z) as f32;
                }
            }
            out.clamp();
            out
        }
        OpId::SobelFilter => img.blend(&sobel(img), mf),
        OpId::Cutout => cutout(img, mf, a),
        OpId::Solarize => img.map_pixels(|c, y, x| {
            let p = img.get(c, y, x);
            if p > mf {
                1.0 - p
            } else {
                p
            }
        }),
        OpId::Equalize => img.blend(&equalize(img), mf),
        OpId::Posterize => {
            let bits = m.round() as u32;
            let shift = 8 - bits;
            img.map_pixels(|c, y, x| {
                let q = (img.get(c, y, x) * 255.0).round() as u32;
                ((q >> shift) << shift) as f32 / 255.0
            })
        }
        OpId::MotionBlur => motion_blur(img, m, a),
    };
    Ok(out)
}

fn grayscale(img: &Image) -> Image {
    let g = img.gray();
    let w = img.width();
    img.map_pixels(|_, y, x| g[y * w + x])
}

fn color_jitter(img: &Image, strength: f64, a: [f64; 4]) -> Image {
    let jitter = |amp: f64, u: f64| (1.0 + amp * strength * (2.0 * u - 1.0)).max(0.0) as f32;
    let brightness = jitter(0.4, a[0]);
    let contrast = jitter(0.4, a[1]);
    let saturation = jitter(0.4, a[2]);
    let hue = (0.1 * strength * (2.0 * a[3] - 1.0)) as f32;

    let mut out = img.map_pixels(|c, y, x| img.get(c, y, x) * brightness);
    let mean_gray = out.gray().iter().sum::<f32>() / (out.height() * out.width()) as f32;
    let tmp = out.clone();
    out = tmp.map_pixels(|c, y, x| (tmp.get(c, y, x) - mean_gray) * contrast + mean_gray);
    let gray = out.gray();
    let w = out.width();
    let tmp = out.clone();
    out = tmp.map_pixels(|c, y, x| {
        let g = gray[y * w + x];
        (tmp.get(c, y, x) - g) * saturation + g
    });
    if hue != 0.0 {
        // rotate chroma in YIQ space
        let (s, co) = (hue * std::f32::consts::TAU).sin_cos();
        let tmp = out.clone();
        let mut rgb = vec![[0.0f32; 3]; tmp.height() * tmp.width()];
        for (i, px) in rgb.iter_mut().enumerate() {
            let (yy, xx) = (i / w, i % w);
            let (r, g, b) = (tmp.get(0, yy, xx), tmp.get(1, yy, xx), tmp.get(2, yy, xx));
            let luma = 0.299 * r + 0.587 * g + 0.114 * b;
            let ci = 0.596 * r - 0.274 * g - 0.322 * b;
            let cq = 0.211 * r - 0.523 * g + 0.312 * b;
            let (i2, q2) = (ci * co - cq * s, ci * s + cq * co);
            *px = [
                luma + 0.956 * i2 + 0.621 * q2,
                luma - 0.272 * i2 - 0.647 * q2,
                luma - 1.106 * i2 + 1.703 * q2,
            ];
        }
        out = tmp.map_pixels(|c, y, x| rgb[y * w + x][c]);
    }
    out
}

fn convolve_separable(img: &Image, kernel: &[f32]) -> Image {
    let r = (kernel.len() / 2) as isize;
    let (h, w) = (img.height() as isize, img.width() as isize);
    let horiz = img.map_pixels(|c, y, x| {
        kernel
            .iter()
            .enumerate()
            .map(|(i, k)| {
                let xx = (x as isize + i as isize - r).clamp(0, w - 1) as usize;
                k * img.get(c, y, xx)
            })
            .sum()
    });
    horiz.map_pixels(|c, y, x| {
        kernel
            .iter()
            .enumerate()
            .map(|(i, k)| {
                let yy = (y as isize + i as isize - r).clamp(0, h - 1) as usize;
                k * horiz.get(c, yy, x)
            })
            .sum()
    })
}

fn gaussian_blur(img: &Image, sigma: f32) -> Image {
    let radius = (3.0 * sigma).ceil() as usize;
    let kernel: Vec<f32> = (0..=2 * radius)
        .map(|i| {
            let d = i as f32 - radius as f32;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.into_iter().map(|k| k / total).collect();
    convolve_separable(img, &kernel)
}

/// Resamples the output grid through `map(y, x) -> (src_y, src_x)`.
fn warp(img: &Image, map: impl Fn(f32, f32) -> (f32, f32)) -> Image {
    img.map_pixels(|c, y, x| {
        let (sy, sx) = map(y as f32, x as f32);
        img.sample(c, sy, sx)
    })
}

fn resized_crop(img: &Image, area: f64, a: [f64; 4]) -> Image {
    let (h, w) = (img.height() as f64, img.width() as f64);
    // aspect ratios whose crop still fits inside the image
    let fit = -area.ln();
    let (lr_lo, lr_hi) = ((3.0f64 / 4.0).ln().max(-fit), (4.0f64 / 3.0).ln().min(fit));
    let ratio = (lr_lo + a[0] * (lr_hi - lr_lo)).exp();
    let cw = ((area * ratio).sqrt() * w).min(w);
    let ch = ((area / ratio).sqrt() * h).min(h);
    let x0 = a[1] * (w - cw);
    let y0 = a[2] * (h - ch);
    let (sx, sy) = ((cw / w) as f32, (ch / h) as f32);
    let (x0, y0) = (x0 as f32, y0 as f32);
    warp(img, |y, x| (y0 + (y + 0.5) * sy - 0.5, x0 + (x + 0.5) * sx - 0.5))
}

fn sharpness(img: &Image, factor: f32) -> Image {
    let (h, w) = (img.height() as isize, img.width() as isize);
    let smooth = img.map_pixels(|c, y, x| {
        let mut acc = 0.0;
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let yy = (y as isize + dy).clamp(0, h - 1) as usize;
                let xx = (x as isize + dx).clamp(0, w - 1) as usize;
                let k = if dy == 0 && dx == 0 { 5.0 } else { 1.0 };
                acc += k * img.get(c, yy, xx);
            }
        }
        acc / 13.0
    });
    smooth.map_pixels(|c, y, x| {
        let s = smooth.get(c, y, x);
        s + factor * (img.get(c, y, x) - s)
    })
}

fn sobel(img: &Image) -> Image {
    let g = img.gray();
    let (h, w) = (img.height() as isize, img.width() as isize);
    let at = |y: isize, x: isize| g[(y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) as usize];
    let mut mag = vec![0.0f32; g.len()];
    for y in 0..h {
        for x in 0..w {
            let gx = at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y, x - 1)
                - at(y + 1, x - 1);
            let gy = at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y - 1, x)
                - at(y - 1, x + 1);
            mag[(y * w + x) as usize] = (gx * gx + gy * gy).sqrt() / 4.0;
        }
    }
    let wu = w as usize;
    img.map_pixels(|_, y, x| mag[y * wu + x])
}

fn cutout(img: &Image, side: f32, a: [f64; 4]) -> Image {
    let (h, w) = (img.height() as f32, img.width() as f32);
    let (hh, hw) = (side * h / 2.0, side * w / 2.0);
    let (cy, cx) = (a[1] as f32 * h, a[0] as f32 * w);
    img.map_pixels(|c, y, x| {
        let (py, px) = (y as f32 + 0.5, x as f32 + 0.5);
        if (py - cy).abs() < hh && (px - cx).abs() < hw {
            0.5
        } else {
            img.get(c, y, x)
        }
    })
}

fn equalize(img: &Image) -> Image {
    let mut luts = Vec::with_capacity(CHANNELS);
    for c in 0..CHANNELS {
        let mut hist = [0usize; 256];
        for &v in img.plane(c) {
            hist[(v * 255.0).round() as usize] += 1;
        }
        let total = img.plane(c).len();
        let mut cdf = [0usize; 256];
        let mut run = 0;
        for (i, &h) in hist.iter().enumerate() {
            run += h;
            cdf[i] = run;
        }
        let cdf_min = cdf.iter().copied().find(|&v| v > 0).unwrap_or(0);
        let denom = total.saturating_sub(cdf_min);
        let lut: Vec<f32> = (0..256)
            .map(|i| {
                if denom == 0 {
                    i as f32 / 255.0
                } else {
                    (cdf[i].saturating_sub(cdf_min)) as f32 / denom as f32
                }
            })
            .collect();
        luts.push(lut);
    }
    img.map_pixels(|c, y, x| luts[c][(img.get(c, y, x) * 255.0).round() as usize])
}

fn motion_blur(img: &Image, length: f64, a: [f64; 4]) -> Image {
    let taps = length.round().max(1.0) as usize;
    if taps == 1 {
        return img.clone();
    }
    let angle = a[0] * std::f64::consts::PI;
    let (dy, dx) = (angle.sin() as f32, angle.cos() as f32);
    let half = (taps as f32 - 1.0) / 2.0;
    img.map_pixels(|c, y, x| {
        let mut acc = 0.0;
        for t in 0..taps {
            let o = t as f32 - half;
            acc += img.sample(c, y as f32 + o * dy, x as f32 + o * dx);
        }
        acc / taps as f32
    })
}
