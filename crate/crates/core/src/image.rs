//! Raster containers and 8-bit PNG I/O.

use std::path::Path;

use crate::error::{Error, Result};

/// Single-channel H×W grid of reals, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// Soft or binary per-pixel defect probability in [0,1].
pub type DefectMap = Plane;

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "plane dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "buffer of {} values does not fit {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0, "plane dimensions must be positive");
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Plane {
        Plane {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-major index of the largest entry (first one on ties).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }

    pub fn ensure_same_shape(&self, other: &Plane, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Plane) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Circular shift so that `out[(r + dr) mod H][(c + dc) mod W] = self[r][c]`.
    pub fn roll(&self, dr: isize, dc: isize) -> Plane {
        let (h, w) = self.shape();
        let mut out = Plane::zeros(h, w);
        for r in 0..h {
            let rr = (r as isize + dr).rem_euclid(h as isize) as usize;
            for c in 0..w {
                let cc = (c as isize + dc).rem_euclid(w as isize) as usize;
                out.data[rr * w + cc] = self.data[r * w + c];
            }
        }
        out
    }

    pub fn to_image(&self) -> ImageBuf {
        ImageBuf {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self.data.clone(),
        }
    }

    /// Nearest-neighbour resampling to a new size.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Plane {
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        Plane::from_fn(height, width, |r, c| {
            let rr = (((r as f64 + 0.5) * sy) as usize).min(self.height - 1);
            let cc = (((c as f64 + 0.5) * sx) as usize).min(self.width - 1);
            self.get(rr, cc)
        })
    }
}

/// H×W×C raster in [0,1], channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageBuf {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "buffer of {} values does not fit {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_plane(plane: Plane) -> Self {
        Self {
            height: plane.height,
            width: plane.width,
            channels: 1,
            data: plane.data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    /// Channel `ch` as its own plane.
    pub fn channel(&self, ch: usize) -> Plane {
        Plane::from_fn(self.height, self.width, |r, c| self.get(r, c, ch))
    }

    pub fn ensure_same_shape(&self, other: &ImageBuf, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

impl From<Plane> for ImageBuf {
    fn from(p: Plane) -> Self {
        ImageBuf::from_plane(p)
    }
}

#[inline]
pub(crate) fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a plane as an 8-bit grayscale PNG (values clamped to [0,1]).
pub fn write_png_gray(path: &Path, plane: &Plane) -> Result<()> {
    let bytes: Vec<u8> = plane.data().iter().map(|&v| quantize_u8(v)).collect();
    let img = image::GrayImage::from_raw(plane.width() as u32, plane.height() as u32, bytes)
        .ok_or_else(|| Error::corrupt(path, "buffer size mismatch"))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::corrupt(path, e.to_string()))
}

/// Writes an RGB image (3 channels) as an 8-bit PNG.
pub fn write_png_rgb(path: &Path, img: &ImageBuf) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::UnsupportedChannels(img.channels()));
    }
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize_u8(v)).collect();
    let out = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, bytes)
        .ok_or_else(|| Error::corrupt(path, "buffer size mismatch"))?;
    out.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::corrupt(path, e.to_string()))
}

/// Reads any supported raster; grayscale stays 1-channel, everything else becomes RGB.
pub fn read_image(path: &Path) -> Result<ImageBuf> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    let dynimg = image::open(path).map_err(|e| Error::corrupt(path, e.to_string()))?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    match dynimg.color() {
        image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 => {
            let g = dynimg.to_luma8();
            let data = g.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
            ImageBuf::new(h, w, 1, data)
        }
        _ => {
            let rgb = dynimg.to_rgb8();
            let data = rgb.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
            ImageBuf::new(h, w, 3, data)
        }
    }
}

/// Reads a PNG and collapses it to one channel with the standard luminance weights.
pub fn read_png_gray(path: &Path) -> Result<Plane> {
    let img = read_image(path)?;
    crate::spectral::to_grayscale(&img)
}
