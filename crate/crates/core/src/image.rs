//! Role-tagged glyph rasters and lossless image I/O.
//!
//! Pixels are stored channel-major (`[C, H, W]`) as `f32` in `[-1, 1]`;
//! `-1` is background, `+1` is ink.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Ancient-script input glyph.
    Condition,
    /// Canonical modern rendering.
    Target,
    /// Modern rendering in a non-canonical style.
    StyleReference,
    /// Model output.
    Generated,
}

impl Role {
    pub const STORED: [Role; 3] = [Role::Condition, Role::Target, Role::StyleReference];

    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Condition => "condition",
            Role::Target => "target",
            Role::StyleReference => "style_reference",
            Role::Generated => "generated",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "condition" => Ok(Role::Condition),
            "target" => Ok(Role::Target),
            "style_reference" => Ok(Role::StyleReference),
            "generated" => Ok(Role::Generated),
            other => Err(Error::Data(format!("unknown role directory {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlyphImage {
    pixels: Tensor<f32>,
    pub role: Role,
    pub category: Option<String>,
}

impl GlyphImage {
    /// Wrap a `[C, H, W]` tensor. Values must lie in `[-1, 1]`.
    pub fn new(pixels: Tensor<f32>, role: Role, category: Option<String>) -> Result<Self> {
        if pixels.ndim() != 3 {
            return Err(Error::Shape(format!("glyph image must be [C, H, W], got {:?}", pixels.shape())));
        }
        if let Some(v) = pixels.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("pixel value {v} outside [-1, 1]")));
        }
        Ok(Self { pixels, role, category })
    }

    /// Build from an arbitrary tensor, clipping into `[-1, 1]`.
    pub fn from_clipped(pixels: Tensor<f32>, role: Role, category: Option<String>) -> Result<Self> {
        Self::new(pixels.map(|v| v.clamp(-1.0, 1.0)), role, category)
    }

    /// Grayscale plane replicated to `channels`.
    pub fn from_gray(gray: &[f32], height: usize, width: usize, channels: usize, role: Role, category: Option<String>) -> Result<Self> {
        if gray.len() != height * width {
            return Err(Error::Shape("gray plane size mismatch".into()));
        }
        let mut data = Vec::with_capacity(channels * gray.len());
        for _ in 0..channels {
            data.extend_from_slice(gray);
        }
        Self::new(Tensor::new(&[channels, height, width], data)?, role, category)
    }

    pub fn pixels(&self) -> &Tensor<f32> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Tensor<f32> {
        self.pixels
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim(0)
    }

    pub fn height(&self) -> usize {
        self.pixels.dim(1)
    }

    pub fn width(&self) -> usize {
        self.pixels.dim(2)
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    /// Channel mean as a single plane.
    pub fn gray(&self) -> Vec<f32> {
        let (c, hw) = (self.channels(), self.height() * self.width());
        let mut out = vec![0.0f32; hw];
        for ch in 0..c {
            for (o, v) in out.iter_mut().zip(&self.pixels.data()[ch * hw..(ch + 1) * hw]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= c as f32);
        out
    }

    pub fn check_dims(&self, height: usize, width: usize, channels: usize) -> Result<()> {
        if (self.height(), self.width(), self.channels()) != (height, width, channels) {
            return Err(Error::Shape(format!(
                "image is {}x{}x{}, expected {height}x{width}x{channels}",
                self.height(),
                self.width(),
                self.channels()
            )));
        }
        Ok(())
    }

    /// Quantize to 8-bit grayscale (`round((v + 1) * 127.5)`).
    pub fn to_gray8(&self) -> GrayImage {
        let g = self.gray();
        let (h, w) = (self.height() as u32, self.width() as u32);
        GrayImage::from_fn(w, h, |x, y| Luma([to_u8(g[(y * w + x) as usize])]))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }
}

pub fn to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn from_u8(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// Load any supported lossless raster as grayscale `[0, 255]` plus dims.
pub fn read_gray(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let g = img.to_luma8();
    let (w, h) = (g.width() as usize, g.height() as usize);
    Ok((g.into_raw(), h, w))
}

/// Pad to a centred square with `fill`, then area-resample to `size x size`.
pub fn pad_and_resize(gray: &[f32], h: usize, w: usize, size: usize, fill: f32) -> Vec<f32> {
    let side = h.max(w);
    let (oy, ox) = ((side - h) / 2, (side - w) / 2);
    let mut sq = vec![fill; side * side];
    for y in 0..h {
        sq[(y + oy) * side + ox..(y + oy) * side + ox + w].copy_from_slice(&gray[y * w..(y + 1) * w]);
    }
    if side == size {
        return sq;
    }
    area_resample(&sq, side, size)
}

/// Box-filter resampling of a square plane: each output pixel is the
/// area-weighted mean of the source pixels it covers.
pub fn area_resample(src: &[f32], n: usize, m: usize) -> Vec<f32> {
    let scale = n as f64 / m as f64;
    let weights = |o: usize| -> Vec<(usize, f64)> {
        let (a, b) = (o as f64 * scale, (o + 1) as f64 * scale);
        let mut v = Vec::new();
        let mut i = a.floor() as usize;
        while (i as f64) < b && i < n {
            let lo = (i as f64).max(a);
            let hi = ((i + 1) as f64).min(b);
            if hi > lo {
                v.push((i, (hi - lo) / scale));
            }
            i += 1;
        }
        v
    };
    let ws: Vec<_> = (0..m).map(weights).collect();
    let mut out = vec![0.0f32; m * m];
    for (oy, wy) in ws.iter().enumerate() {
        for (ox, wx) in ws.iter().enumerate() {
            let mut s = 0.0f64;
            for &(iy, fy) in wy {
                for &(ix, fx) in wx {
                    s += src[iy * n + ix] as f64 * fy * fx;
                }
            }
            out[oy * m + ox] = s as f32;
        }
    }
    out
}
