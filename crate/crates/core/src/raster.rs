//! Floating-point raster images and the resampling primitives shared by the
//! camera, compositing, overlay and rendering code.
//!
//! Pixel `(x, y)` covers the continuous square `[x, x+1) × [y, y+1)`, so its
//! centre sits at `(x + 0.5, y + 0.5)`. Every module that converts between
//! pixel indices and continuous coordinates goes through that convention.

use std::io::Cursor;
use std::path::Path;

use image::ImageFormat;
pub use image::RgbImage;

#[derive(Debug, thiserror::Error)]
pub enum RasterError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode image: {0}")]
    Decode(String),
    #[error("cannot encode image: {0}")]
    Encode(String),
    #[error("expected a 3-channel image, got {0} channels")]
    Channels(usize),
}

/// Interleaved multi-channel image with `f64` samples.
///
/// Detector, generator and optimizer code keeps samples in `[0, 1]`; nothing
/// here enforces a range.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
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

    /// Solid RGB image.
    pub fn solid_rgb(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut img = Self::new(width, height, 3);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    /// Wraps an interleaved buffer. Panics if the length does not match.
    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            width * height * channels,
            "buffer length does not match {width}x{height}x{channels}"
        );
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
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

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
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

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, value: f64) {
        let i = self.index(x, y, c);
        self.data[i] = value;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.index(x, y, 0);
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Mean over every sample of every channel.
    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies `src` into `self` with its top-left corner at `(x0, y0)`.
    /// Parts of `src` that fall outside `self` are dropped.
    pub fn blit(&mut self, src: &Image, x0: i64, y0: i64) {
        assert_eq!(self.channels, src.channels);
        for sy in 0..src.height {
            let dy = y0 + sy as i64;
            if dy < 0 || dy >= self.height as i64 {
                continue;
            }
            for sx in 0..src.width {
                let dx = x0 + sx as i64;
                if dx < 0 || dx >= self.width as i64 {
                    continue;
                }
                let d = self.index(dx as usize, dy as usize, 0);
                let s = src.index(sx, sy, 0);
                self.data[d..d + self.channels].copy_from_slice(&src.data[s..s + self.channels]);
            }
        }
    }

    /// Copies the `w × h` window starting at `(x0, y0)`. The window must lie
    /// inside the image.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Image {
        assert!(x0 + w <= self.width && y0 + h <= self.height);
        let mut out = Image::new(w, h, self.channels);
        for y in 0..h {
            let s = self.index(x0, y0 + y, 0);
            let d = out.index(0, y, 0);
            let n = w * self.channels;
            out.data[d..d + n].copy_from_slice(&self.data[s..s + n]);
        }
        out
    }

    /// Bilinear sample of channel `c` at index-space location `(sx, sy)`,
    /// where integer coordinates hit pixel centres. Returns `None` outside
    /// `[0, w-1] × [0, h-1]`.
    pub fn sample_bilinear(&self, sx: f64, sy: f64, c: usize) -> Option<f64> {
        let (x0, x1, fx) = bilinear_axis(sx, self.width)?;
        let (y0, y1, fy) = bilinear_axis(sy, self.height)?;
        let a = self.get(x0, y0, c);
        let b = self.get(x1, y0, c);
        let top = if fx == 0.0 { a } else { a * (1.0 - fx) + b * fx };
        if fy == 0.0 {
            return Some(top);
        }
        let d = self.get(x0, y1, c);
        let e = self.get(x1, y1, c);
        let bottom = if fx == 0.0 { d } else { d * (1.0 - fx) + e * fx };
        Some(top * (1.0 - fy) + bottom * fy)
    }

    /// Converts 8-bit RGB to `[0, 1]` samples.
    pub fn from_rgb8(img: &RgbImage) -> Self {
        let data = img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            channels: 3,
            data,
        }
    }

    /// Quantizes `[0, 1]` samples to 8 bits, rounding half up and clamping.
    pub fn to_rgb8(&self) -> Result<RgbImage, RasterError> {
        if self.channels != 3 {
            return Err(RasterError::Channels(self.channels));
        }
        let raw = self.data.iter().map(|&v| quantize_unit(v)).collect();
        Ok(RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions"))
    }

    /// Snaps every sample to the nearest 8-bit level.
    pub fn quantize_8bit(&mut self) {
        for v in &mut self.data {
            *v = f64::from(quantize_unit(*v)) / 255.0;
        }
    }
}

/// Maps a `[0, 1]` sample to `0..=255`, rounding half up.
#[inline]
pub fn quantize_unit(v: f64) -> u8 {
    round_half_up_u8(v * 255.0)
}

/// Rounds half up and clamps to `0..=255`. NaN maps to 0.
#[inline]
pub fn round_half_up_u8(v: f64) -> u8 {
    let r = (v + 0.5).floor();
    if r.is_nan() || r <= 0.0 {
        0
    } else if r >= 255.0 {
        255
    } else {
        r as u8
    }
}

fn bilinear_axis(s: f64, len: usize) -> Option<(usize, usize, f64)> {
    const EPS: f64 = 1e-9;
    if !s.is_finite() || len == 0 {
        return None;
    }
    let max = (len - 1) as f64;
    if s < -EPS || s > max + EPS {
        return None;
    }
    let s = s.clamp(0.0, max);
    let i0 = s.floor() as usize;
    let mut f = s - i0 as f64;
    if f < EPS {
        f = 0.0;
    }
    let i1 = (i0 + 1).min(len - 1);
    Some((i0, i1, f))
}

#[derive(Debug, Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    w1: f64,
}

fn axis_taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            let w1 = if i1 == i0 { 0.0 } else { s - i0 as f64 };
            Tap { i0, i1, w1 }
        })
        .collect()
}

/// Separable bilinear resize with half-pixel centres, kept as an explicit
/// linear operator so its adjoint is available for backpropagation.
#[derive(Debug, Clone)]
pub struct Resize {
    src_w: usize,
    src_h: usize,
    xs: Vec<Tap>,
    ys: Vec<Tap>,
}

impl Resize {
    pub fn new(src_w: usize, src_h: usize, dst_w: usize, dst_h: usize) -> Self {
        assert!(src_w > 0 && src_h > 0 && dst_w > 0 && dst_h > 0, "empty resize");
        Self {
            src_w,
            src_h,
            xs: axis_taps(src_w, dst_w),
            ys: axis_taps(src_h, dst_h),
        }
    }

    pub fn dst_size(&self) -> (usize, usize) {
        (self.xs.len(), self.ys.len())
    }

    pub fn apply(&self, src: &Image) -> Image {
        assert_eq!((src.width, src.height), (self.src_w, self.src_h));
        let ch = src.channels;
        let mut out = Image::new(self.xs.len(), self.ys.len(), ch);
        for (dy, ty) in self.ys.iter().enumerate() {
            for (dx, tx) in self.xs.iter().enumerate() {
                for c in 0..ch {
                    let a = src.get(tx.i0, ty.i0, c);
                    let b = src.get(tx.i1, ty.i0, c);
                    let d = src.get(tx.i0, ty.i1, c);
                    let e = src.get(tx.i1, ty.i1, c);
                    let top = a + (b - a) * tx.w1;
                    let bottom = d + (e - d) * tx.w1;
                    out.set(dx, dy, c, top + (bottom - top) * ty.w1);
                }
            }
        }
        out
    }

    /// Transpose of [`Resize::apply`]: scatters a destination-shaped gradient
    /// back onto the source grid.
    pub fn adjoint(&self, grad_dst: &Image) -> Image {
        assert_eq!((grad_dst.width, grad_dst.height), self.dst_size());
        let ch = grad_dst.channels;
        let mut out = Image::new(self.src_w, self.src_h, ch);
        for (dy, ty) in self.ys.iter().enumerate() {
            for (dx, tx) in self.xs.iter().enumerate() {
                let wx0 = 1.0 - tx.w1;
                let wy0 = 1.0 - ty.w1;
                for c in 0..ch {
                    let g = grad_dst.get(dx, dy, c);
                    if g == 0.0 {
                        continue;
                    }
                    let i = out.index(tx.i0, ty.i0, c);
                    out.data[i] += g * wx0 * wy0;
                    let i = out.index(tx.i1, ty.i0, c);
                    out.data[i] += g * tx.w1 * wy0;
                    let i = out.index(tx.i0, ty.i1, c);
                    out.data[i] += g * wx0 * ty.w1;
                    let i = out.index(tx.i1, ty.i1, c);
                    out.data[i] += g * tx.w1 * ty.w1;
                }
            }
        }
        out
    }
}

pub fn resize_bilinear(img: &Image, width: usize, height: usize) -> Image {
    if img.width == width && img.height == height {
        return img.clone();
    }
    Resize::new(img.width, img.height, width, height).apply(img)
}

pub fn decode_png(bytes: &[u8]) -> Result<RgbImage, RasterError> {
    image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map(|img| img.to_rgb8())
        .map_err(|e| RasterError::Decode(e.to_string()))
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>, RasterError> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| RasterError::Encode(e.to_string()))?;
    Ok(buf.into_inner())
}

pub fn load_png(path: &Path) -> Result<RgbImage, RasterError> {
    let bytes = std::fs::read(path).map_err(|source| RasterError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_png(&bytes)
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<(), RasterError> {
    let bytes = encode_png(img)?;
    std::fs::write(path, bytes).map_err(|source| RasterError::Io {
        path: path.display().to_string(),
        source,
    })
}
