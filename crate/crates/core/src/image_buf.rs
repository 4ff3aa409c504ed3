//! Small linear-RGB image container shared by the renderer, the diffusion
//! guidance, and the classifier. Pixels are f64, row-major, 3 channels.

use crate::error::{Error, Result};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major H*W*3.
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Image {
            width,
            height,
            data: vec![value; width * height * 3],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height * 3);
        Image {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, p: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i] = p[0];
        self.data[i + 1] = p[1];
        self.data[i + 2] = p[2];
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Image {
        assert!(self.same_shape(other));
        Image {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Rendering range [0,1] to diffusion range [-1,1].
    pub fn to_diffusion_range(&self) -> Image {
        self.map(|v| 2.0 * v - 1.0)
    }

    /// Diffusion range [-1,1] back to rendering range [0,1].
    pub fn to_render_range(&self) -> Image {
        self.map(|v| 0.5 * (v + 1.0))
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn l2_distance(&self, other: &Image) -> f64 {
        assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channel-mean grayscale, H*W.
    pub fn to_gray(&self) -> Vec<f64> {
        (0..self.width * self.height)
            .map(|i| (self.data[3 * i] + self.data[3 * i + 1] + self.data[3 * i + 2]) / 3.0)
            .collect()
    }

    /// Encode to 8-bit sRGB PNG with gamma 2.2, clamping to [0,1].
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| {
                let v = v.clamp(0.0, 1.0).powf(1.0 / 2.2);
                (v * 255.0).round() as u8
            })
            .collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer size matches dimensions");
        buf.save(path).map_err(|e| Error::Image(e.to_string()))
    }

    /// Decode a PNG into linear [0,1] values (gamma 2.2 removed).
    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img
            .into_raw()
            .iter()
            .map(|&b| (b as f64 / 255.0).powf(2.2))
            .collect();
        Ok(Image::from_data(w, h, data))
    }
}

/// Area-weighted box downsample of a grayscale buffer to `ow` x `oh`.
/// Every source pixel contributes to exactly the cells it overlaps, so the
/// map is linear and dense in the adjoint.
pub fn box_resize_gray(src: &[f64], w: usize, h: usize, ow: usize, oh: usize) -> Vec<f64> {
    let mut out = vec![0.0; ow * oh];
    let mut weight = vec![0.0; ow * oh];
    accumulate_box(w, h, ow, oh, |sx, sy, cx, cy, frac| {
        out[cy * ow + cx] += src[sy * w + sx] * frac;
        weight[cy * ow + cx] += frac;
    });
    for i in 0..out.len() {
        if weight[i] > 0.0 {
            out[i] /= weight[i];
        }
    }
    out
}

/// Adjoint of `box_resize_gray`: spreads a cotangent on the resized grid back
/// onto source pixels.
pub fn box_resize_gray_backward(
    d_out: &[f64],
    w: usize,
    h: usize,
    ow: usize,
    oh: usize,
) -> Vec<f64> {
    let mut weight = vec![0.0; ow * oh];
    accumulate_box(w, h, ow, oh, |_, _, cx, cy, frac| {
        weight[cy * ow + cx] += frac;
    });
    let mut d_src = vec![0.0; w * h];
    accumulate_box(w, h, ow, oh, |sx, sy, cx, cy, frac| {
        let idx = cy * ow + cx;
        if weight[idx] > 0.0 {
            d_src[sy * w + sx] += d_out[idx] * frac / weight[idx];
        }
    });
    d_src
}

/// Visit (source pixel, destination cell, overlap fraction) triples for an
/// area-weighted box filter.
fn accumulate_box(
    w: usize,
    h: usize,
    ow: usize,
    oh: usize,
    mut visit: impl FnMut(usize, usize, usize, usize, f64),
) {
    let sx_scale = ow as f64 / w as f64;
    let sy_scale = oh as f64 / h as f64;
    for sy in 0..h {
        let y0 = sy as f64 * sy_scale;
        let y1 = (sy + 1) as f64 * sy_scale;
        for sx in 0..w {
            let x0 = sx as f64 * sx_scale;
            let x1 = (sx + 1) as f64 * sx_scale;
            let cy_start = y0.floor() as usize;
            let cy_end = (y1.ceil() as usize).min(oh);
            let cx_start = x0.floor() as usize;
            let cx_end = (x1.ceil() as usize).min(ow);
            for cy in cy_start..cy_end {
                let oy = overlap(y0, y1, cy as f64, (cy + 1) as f64);
                if oy <= 0.0 {
                    continue;
                }
                for cx in cx_start..cx_end {
                    let ox = overlap(x0, x1, cx as f64, (cx + 1) as f64);
                    if ox <= 0.0 {
                        continue;
                    }
                    visit(sx, sy, cx, cy, ox * oy);
                }
            }
        }
    }
}

#[inline]
fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}
