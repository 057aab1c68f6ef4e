use std::path::Path;

use cpn_tensor::{Element, Tensor};

use crate::error::{invalid, CoreError, Result};

/// Luminance weights applied to RGB input before any processing.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Single-channel image with `f64` samples, row-major, pixel centres at
/// integer coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid(format!("raster must be non-empty, got {width}x{height}")));
        }
        if data.len() != width * height {
            return Err(CoreError::ShapeMismatch(format!(
                "{width}x{height} raster needs {} samples, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Raster { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Raster {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    /// Builds a raster from `f(x, y)`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Raster { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    fn at_or(&self, x: isize, y: isize, fallback: Option<f64>) -> f64 {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.data[y as usize * self.width + x as usize]
        } else if let Some(v) = fallback {
            v
        } else {
            let cx = x.clamp(0, self.width as isize - 1) as usize;
            let cy = y.clamp(0, self.height as isize - 1) as usize;
            self.data[cy * self.width + cx]
        }
    }

    fn bilinear(&self, x: f64, y: f64, fallback: Option<f64>) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let (fx, fy) = (x - x0, y - y0);
        let (xi, yi) = (x0 as isize, y0 as isize);
        let a = self.at_or(xi, yi, fallback);
        let b = self.at_or(xi + 1, yi, fallback);
        let c = self.at_or(xi, yi + 1, fallback);
        let d = self.at_or(xi + 1, yi + 1, fallback);
        let top = a + (b - a) * fx;
        let bottom = c + (d - c) * fx;
        top + (bottom - top) * fy
    }

    /// Bilinear sample; pixels outside the raster read as zero.
    pub fn sample_zero(&self, x: f64, y: f64) -> f64 {
        self.bilinear(x, y, Some(0.0))
    }

    /// Bilinear sample with edge replication.
    pub fn sample_clamped(&self, x: f64, y: f64) -> f64 {
        self.bilinear(x, y, None)
    }

    /// Resamples the axis-aligned region starting at pixel `(x0, y0)` with
    /// extent `src_w × src_h` pixels onto an `out_w × out_h` grid.
    /// Resampling a full raster to its own size is the identity.
    pub fn resample_region(
        &self,
        x0: f64,
        y0: f64,
        src_w: f64,
        src_h: f64,
        out_w: usize,
        out_h: usize,
    ) -> Raster {
        let sx = src_w / out_w as f64;
        let sy = src_h / out_h as f64;
        Raster::from_fn(out_w, out_h, |x, y| {
            let u = x0 - 0.5 + (x as f64 + 0.5) * sx;
            let v = y0 - 0.5 + (y as f64 + 0.5) * sy;
            self.sample_clamped(u, v)
        })
    }

    pub fn resize(&self, out_w: usize, out_h: usize) -> Raster {
        self.resample_region(0.0, 0.0, self.width as f64, self.height as f64, out_w, out_h)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Zero-mean, unit-variance copy. A constant raster maps to all zeros.
    pub fn standardized(&self) -> Raster {
        let mean = self.mean();
        let var = self.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / self.data.len() as f64;
        let std = var.sqrt();
        let data = if std > 1e-12 {
            self.data.iter().map(|v| (v - mean) / std).collect()
        } else {
            vec![0.0; self.data.len()]
        };
        Raster {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// `[H, W]` tensor.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::from_fn(vec![self.height, self.width], |i| T::from_f64(self.data[i]))
    }

    /// Stacks equally sized rasters into a `[N, 1, H, W]` batch.
    pub fn batch<T: Element>(rasters: &[&Raster]) -> Result<Tensor<T>> {
        let first = rasters
            .first()
            .ok_or_else(|| invalid("cannot batch zero rasters"))?;
        let (w, h) = (first.width, first.height);
        let mut data = Vec::with_capacity(rasters.len() * w * h);
        for r in rasters {
            if r.width != w || r.height != h {
                return Err(CoreError::ShapeMismatch(format!(
                    "batch mixes {w}x{h} and {}x{} rasters",
                    r.width, r.height
                )));
            }
            data.extend(r.data.iter().map(|&v| T::from_f64(v)));
        }
        Ok(Tensor::new(vec![rasters.len(), 1, h, w], data)?)
    }

    /// Loads an 8-bit image; colour input is reduced with [`LUMA_WEIGHTS`].
    /// Samples are scaled to `[0, 1]`.
    pub fn load(path: impl AsRef<Path>) -> Result<Raster> {
        let img = image::open(path)?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb
            .pixels()
            .map(|p| {
                let [r, g, b] = p.0;
                (LUMA_WEIGHTS[0] * r as f64 + LUMA_WEIGHTS[1] * g as f64 + LUMA_WEIGHTS[2] * b as f64)
                    / 255.0
            })
            .collect();
        Raster::new(w as usize, h as usize, data)
    }

    /// Writes an 8-bit grayscale PNG; samples are clamped to `[0, 1]`.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| invalid("raster dimensions overflow"))?;
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Linear map onto `[0, 1]` using the raster's own range.
    pub fn rescaled_unit(&self) -> Raster {
        let lo = self.data.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let data = if span > 1e-12 {
            self.data.iter().map(|v| (v - lo) / span).collect()
        } else {
            vec![0.5; self.data.len()]
        };
        Raster {
            width: self.width,
            height: self.height,
            data,
        }
    }
}
