//! RGB images with values in `[0, 1]`, stored planar (channel-major).

use crate::error::{MastError, Result};

pub const CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != CHANNELS * height * width {
            return Err(MastError::dim(format!(
                "{height}x{width} image needs {} values, got {}",
                CHANNELS * height * width,
                data.len()
            )));
        }
        let mut img = Self { height, width, data };
        img.clamp();
        Ok(img)
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in rgb {
            data.extend(std::iter::repeat(c.clamp(0.0, 1.0)).take(height * width));
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Bilinear sample at continuous pixel coordinates with edge replication.
    pub fn sample(&self, c: usize, y: f32, x: f32) -> f32 {
        let maxy = (self.height - 1) as f32;
        let maxx = (self.width - 1) as f32;
        let y = y.clamp(0.0, maxy);
        let x = x.clamp(0.0, maxx);
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let fy = y - y0 as f32;
        let fx = x - x0 as f32;
        let top = self.get(c, y0, x0) * (1.0 - fx) + self.get(c, y0, x1) * fx;
        let bottom = self.get(c, y1, x0) * (1.0 - fx) + self.get(c, y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Luma (ITU-R 601) per pixel.
    pub fn gray(&self) -> Vec<f32> {
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        r.iter()
            .zip(g)
            .zip(b)
            .map(|((r, g), b)| 0.299 * r + 0.587 * g + 0.114 * b)
            .collect()
    }

    pub fn mean_rgb(&self) -> [f32; 3] {
        let n = (self.height * self.width) as f32;
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.plane(c).iter().sum::<f32>() / n;
        }
        out
    }

    pub fn clamp(&mut self) {
        for v in &mut self.data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
    }

    /// Builds an image of the same extents from a pixel function.
    pub fn map_pixels(&self, mut f: impl FnMut(usize, usize, usize) -> f32) -> Image {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..CHANNELS {
            for y in 0..self.height {
                for x in 0..self.width {
                    data.push(f(c, y, x));
                }
            }
        }
        let mut img = Image {
            height: self.height,
            width: self.width,
            data,
        };
        img.clamp();
        img
    }

    /// `(1 - t) * self + t * other`.
    pub fn blend(&self, other: &Image, t: f32) -> Image {
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + t * (b - a))
            .collect();
        let mut img = Image {
            height: self.height,
            width: self.width,
            data,
        };
        img.clamp();
        img
    }

    /// Quarter-turn rotation counter-clockwise, `turns` times.
    pub fn rot90(&self, turns: usize) -> Image {
        let mut out = self.clone();
        for _ in 0..turns % 4 {
            let (h, w) = (out.height, out.width);
            let mut data = vec![0.0; out.data.len()];
            for c in 0..CHANNELS {
                for y in 0..h {
                    for x in 0..w {
                        // (y, x) -> (w-1-x, y)
                        let ny = w - 1 - x;
                        let nx = y;
                        data[(c * w + ny) * h + nx] = out.get(c, y, x);
                    }
                }
            }
            out = Image {
                height: w,
                width: h,
                data,
            };
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}
