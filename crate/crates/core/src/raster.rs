//! Dense row-major rasters, validity masks, and flow fields.
//!
//! Rasters are channel-interleaved. All sampling routines use pixel-center
//! integer coordinates: pixel `(x, y)` sits at `(x as f64, y as f64)`.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Raster<T = f32> {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Copy> Raster<T> {
    pub fn filled(width: usize, height: usize, channels: usize, value: T) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Dimension(format!(
                "{}x{}x{} raster needs {} values, got {}",
                width,
                height,
                channels,
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: T) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_shape<U>(&self, other: &Raster<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map<U, F: Fn(T) -> U>(&self, f: F) -> Raster<U> {
        Raster {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl Raster<f32> {
    pub fn to_f64(&self) -> Raster<f64> {
        self.map(f64::from)
    }
}

impl Raster<f64> {
    pub fn to_f32(&self) -> Raster<f32> {
        self.map(|v| v as f32)
    }

    /// Single-channel bilinear sample. `None` when any support pixel falls
    /// outside the raster.
    #[inline]
    pub fn sample(&self, u: f64, v: f64) -> Option<f64> {
        let s = Support::new(u, v, self.width, self.height)?;
        Some(s.apply(&self.data, self.width))
    }

    /// Area-mean downsampling by an integer factor; trailing rows and
    /// columns that do not fill a whole block are dropped.
    pub fn downsample(&self, factor: usize) -> Raster<f64> {
        if factor == 1 {
            return self.clone();
        }
        let (w, h, c) = (self.width / factor, self.height / factor, self.channels);
        let norm = 1.0 / (factor * factor) as f64;
        let mut out = Raster::filled(w, h, c, 0.0);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += self.get(x * factor + dx, y * factor + dy, ch);
                        }
                    }
                    out.set(x, y, ch, acc * norm);
                }
            }
        }
        out
    }
}

/// The four bilinear support pixels and their weights for one sample point.
#[derive(Clone, Copy, Debug)]
pub struct Support {
    pub x0: usize,
    pub y0: usize,
    pub fx: f64,
    pub fy: f64,
}

impl Support {
    /// Support for a sample at `(u, v)`; `None` when any support pixel is
    /// outside `[0, W-1] x [0, H-1]`. A sample exactly on the last row or
    /// column uses the previous cell with fraction 1.
    #[inline]
    pub fn new(u: f64, v: f64, width: usize, height: usize) -> Option<Self> {
        if !(u >= 0.0 && v >= 0.0) || width < 2 || height < 2 {
            return None;
        }
        let (wm, hm) = ((width - 1) as f64, (height - 1) as f64);
        if u > wm || v > hm {
            return None;
        }
        // Truncation equals floor for non-negative coordinates.
        let mut x0 = u as usize;
        let mut y0 = v as usize;
        if x0 >= width - 1 {
            x0 = width - 2;
        }
        if y0 >= height - 1 {
            y0 = height - 2;
        }
        Some(Self {
            x0,
            y0,
            fx: u - x0 as f64,
            fy: v - y0 as f64,
        })
    }

    #[inline]
    pub fn index(&self, width: usize) -> usize {
        self.y0 * width + self.x0
    }

    #[inline]
    pub fn weights(&self) -> [f64; 4] {
        let (fx, fy) = (self.fx, self.fy);
        [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy]
    }

    #[inline]
    pub fn apply(&self, data: &[f64], width: usize) -> f64 {
        let i = self.index(width);
        let w = self.weights();
        w[0] * data[i] + w[1] * data[i + 1] + w[2] * data[i + width] + w[3] * data[i + width + 1]
    }

    /// Value plus partial derivatives with respect to the sample coordinates.
    #[inline]
    pub fn apply_with_grad(&self, data: &[f64], width: usize) -> (f64, f64, f64) {
        let i = self.index(width);
        let (p00, p10, p01, p11) = (data[i], data[i + 1], data[i + width], data[i + width + 1]);
        let (fx, fy) = (self.fx, self.fy);
        let top = p00 + fx * (p10 - p00);
        let bottom = p01 + fx * (p11 - p01);
        let value = top + fy * (bottom - top);
        let du = (1.0 - fy) * (p10 - p00) + fy * (p11 - p01);
        let dv = bottom - top;
        (value, du, dv)
    }

    /// Scatter `g` onto the support pixels using the bilinear weights.
    #[inline]
    pub fn scatter(&self, out: &mut [f64], width: usize, g: f64) {
        let i = self.index(width);
        let w = self.weights();
        out[i] += w[0] * g;
        out[i + 1] += w[1] * g;
        out[i + width] += w[2] * g;
        out[i + width + 1] += w[3] * g;
    }
}

/// Per-pixel boolean validity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidityMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl ValidityMask {
    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "{}x{} mask needs {} values, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn and(&self, other: &ValidityMask) -> ValidityMask {
        ValidityMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a && b).collect(),
        }
    }

    /// Mask stored as a single-channel raster of `{0.0, 1.0}`.
    pub fn to_raster(&self) -> Raster<f32> {
        Raster {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn from_raster(r: &Raster<f32>) -> Result<Self> {
        if r.channels() != 1 {
            return Err(Error::Dimension(format!(
                "mask raster must have 1 channel, got {}",
                r.channels()
            )));
        }
        Ok(Self {
            width: r.width(),
            height: r.height(),
            data: r.data().iter().map(|&v| v >= 0.5).collect(),
        })
    }

    /// A block is valid when the majority of its pixels are valid.
    pub fn downsample(&self, factor: usize) -> ValidityMask {
        if factor == 1 {
            return self.clone();
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let mut out = ValidityMask::filled(w, h, false);
        for y in 0..h {
            for x in 0..w {
                let mut n = 0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        n += self.get(x * factor + dx, y * factor + dy) as usize;
                    }
                }
                out.set(x, y, 2 * n >= factor * factor);
            }
        }
        out
    }
}

/// Dense per-pixel 2D displacement in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    data: Vec<[f64; 2]>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::uniform(width, height, [0.0, 0.0])
    }

    pub fn uniform(width: usize, height: usize, v: [f64; 2]) -> Self {
        Self {
            width,
            height,
            data: vec![v; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<[f64; 2]>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "{}x{} flow needs {} vectors, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[[f64; 2]] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [[f64; 2]] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 2] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: [f64; 2]) {
        self.data[y * self.width + x] = v;
    }

    /// Bilinear sample of both components.
    #[inline]
    pub fn sample(&self, u: f64, v: f64) -> Option<[f64; 2]> {
        let s = Support::new(u, v, self.width, self.height)?;
        let i = s.index(self.width);
        let w = s.weights();
        let d = &self.data;
        let wd = self.width;
        let mut out = [0.0; 2];
        for (c, o) in out.iter_mut().enumerate() {
            *o = w[0] * d[i][c] + w[1] * d[i + 1][c] + w[2] * d[i + wd][c] + w[3] * d[i + wd + 1][c];
        }
        Some(out)
    }

    pub fn to_raster(&self) -> Raster<f32> {
        let data = self.data.iter().flat_map(|v| [v[0] as f32, v[1] as f32]).collect();
        Raster {
            width: self.width,
            height: self.height,
            channels: 2,
            data,
        }
    }

    pub fn from_raster(r: &Raster<f32>) -> Result<Self> {
        if r.channels() != 2 {
            return Err(Error::Dimension(format!(
                "flow raster must have 2 channels, got {}",
                r.channels()
            )));
        }
        let data = r
            .data()
            .chunks_exact(2)
            .map(|c| [f64::from(c[0]), f64::from(c[1])])
            .collect();
        Ok(Self {
            width: r.width(),
            height: r.height(),
            data,
        })
    }

    /// Area-mean downsampling; displacement vectors shrink by the same factor.
    pub fn downsample(&self, factor: usize) -> FlowField {
        if factor == 1 {
            return self.clone();
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let norm = 1.0 / (factor * factor * factor) as f64;
        let mut out = FlowField::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 2];
                for dy in 0..factor {
                    for dx in 0..factor {
                        let f = self.get(x * factor + dx, y * factor + dy);
                        acc[0] += f[0];
                        acc[1] += f[1];
                    }
                }
                out.set(x, y, [acc[0] * norm, acc[1] * norm]);
            }
        }
        out
    }
}
