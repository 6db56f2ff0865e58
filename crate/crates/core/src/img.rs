//! Channel-first image tensors with values nominally in `[-1, 1]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, v: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![v; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::arg(format!(
                "image data length {} does not match shape ({channels}, {height}, {width})",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn ensure_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::arg(format!(
                "image shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise `a·self + b·other`.
    pub fn lincomb(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        self.ensure_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Ok(Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean_sq_diff(&self, other: &Self) -> Result<f64> {
        self.ensure_same_shape(other)?;
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(s / self.data.len() as f64)
    }

    /// Splits into non-overlapping `p×p` patches, one row per patch
    /// (row-major patch order), each row laid out as `(channel, dy, dx)`.
    pub fn patchify(&self, p: usize) -> Result<Tensor> {
        if p == 0 || self.height % p != 0 || self.width % p != 0 {
            return Err(Error::arg(format!(
                "patch size {p} does not tile a {}x{} image",
                self.height, self.width
            )));
        }
        let (gh, gw) = (self.height / p, self.width / p);
        let dim = self.channels * p * p;
        let mut out = Tensor::zeros(gh * gw, dim);
        for py in 0..gh {
            for px in 0..gw {
                let row = out.row_mut(py * gw + px);
                let mut k = 0;
                for c in 0..self.channels {
                    for dy in 0..p {
                        for dx in 0..p {
                            row[k] = self.get(c, py * p + dy, px * p + dx);
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Inverse of [`patchify`](Self::patchify).
    pub fn unpatchify(t: &Tensor, channels: usize, height: usize, width: usize, p: usize) -> Result<Self> {
        if p == 0 || height % p != 0 || width % p != 0 {
            return Err(Error::arg(format!("patch size {p} does not tile {height}x{width}")));
        }
        let (gh, gw) = (height / p, width / p);
        if t.shape() != (gh * gw, channels * p * p) {
            return Err(Error::arg(format!(
                "patch tensor shape {:?} does not match image ({channels}, {height}, {width}) at patch {p}",
                t.shape()
            )));
        }
        let mut img = Self::zeros(channels, height, width);
        for py in 0..gh {
            for px in 0..gw {
                let row = t.row(py * gw + px);
                let mut k = 0;
                for c in 0..channels {
                    for dy in 0..p {
                        for dx in 0..p {
                            img.set(c, py * p + dy, px * p + dx, row[k]);
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(img)
    }

    /// Box-filter downsampling by an integer factor.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::arg(format!(
                "cannot downsample {}x{} by {factor}",
                self.height, self.width
            )));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = Self::zeros(self.channels, h, w);
        let norm = (factor * factor) as f64;
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    let mut s = 0.0;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            s += self.get(c, y * factor + dy, x * factor + dx);
                        }
                    }
                    out.set(c, y, x, s / norm);
                }
            }
        }
        Ok(out)
    }

    /// Resamples to `size×size` (box filter when shrinking by an integer
    /// factor, nearest-neighbour repetition when growing).
    pub fn resize_square(&self, size: usize) -> Result<Self> {
        if self.height != self.width {
            return Err(Error::arg("resize_square needs a square image"));
        }
        if size == self.height {
            Ok(self.clone())
        } else if size < self.height && self.height % size == 0 {
            self.downsample(self.height / size)
        } else if size > self.height && size % self.height == 0 {
            let f = size / self.height;
            let mut out = Self::zeros(self.channels, size, size);
            for c in 0..self.channels {
                for y in 0..size {
                    for x in 0..size {
                        out.set(c, y, x, self.get(c, y / f, x / f));
                    }
                }
            }
            Ok(out)
        } else {
            Err(Error::arg(format!(
                "cannot resize {}x{} to {size}x{size} by an integer factor",
                self.height, self.width
            )))
        }
    }

    /// 8-bit RGB/gray pixels after mapping `[-1, 1] → [0, 255]`.
    pub fn to_u8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    let v = (self.get(c, y, x) + 1.0) * 127.5;
                    out.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            c => return Err(Error::Image(format!("cannot write {c}-channel PNG"))),
        };
        image::save_buffer(path, &self.to_u8(), self.width as u32, self.height as u32, color)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Self::zeros(3, h, w);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, f64::from(px.0[c]) / 127.5 - 1.0);
            }
        }
        Ok(out)
    }
}
