//! Dense row-major `H×W×C` rasters of `f64`.

use crate::error::{Error, Result};

/// Interleaved image buffer; pixel `(row, col)` channel `c` lives at
/// `(row * width + col) * channels + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "buffer of {} values for {width}x{height}x{channels}",
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

    #[inline]
    pub fn index(&self, row: usize, col: usize, channel: usize) -> usize {
        (row * self.width + col) * self.channels + channel
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[self.index(row, col, channel)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f64) {
        let i = self.index(row, col, channel);
        self.data[i] = value;
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let i = self.index(row, col, 0);
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let i = self.index(row, col, 0);
        &mut self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Raster) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn ensure_same_shape(&self, other: &Raster) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    /// Copy out a subset of channels, e.g. `0..3` for RGB of an RGBA raster.
    pub fn select_channels(&self, channels: std::ops::Range<usize>) -> Raster {
        let n = channels.len();
        let mut out = Raster::new(self.width, self.height, n);
        for (dst, src) in out
            .data
            .chunks_exact_mut(n)
            .zip(self.data.chunks_exact(self.channels))
        {
            dst.copy_from_slice(&src[channels.clone()]);
        }
        out
    }

    /// Copy the half-open window `[x1,x2)×[y1,y2)`.
    pub fn crop(&self, x1: usize, y1: usize, x2: usize, y2: usize) -> Result<Raster> {
        if x1 >= x2 || y1 >= y2 || x2 > self.width || y2 > self.height {
            return Err(Error::Shape(format!(
                "crop ({x1},{y1},{x2},{y2}) outside {}x{}",
                self.width, self.height
            )));
        }
        let w = x2 - x1;
        let mut out = Raster::new(w, y2 - y1, self.channels);
        for row in y1..y2 {
            let src = self.index(row, x1, 0);
            let dst = out.index(row - y1, 0, 0);
            out.data[dst..dst + w * self.channels]
                .copy_from_slice(&self.data[src..src + w * self.channels]);
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &Raster) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
