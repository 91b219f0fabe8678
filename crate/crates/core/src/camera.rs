//! Pinhole camera with Brown–Conrady radial-tangential distortion.
//!
//! ```text
//! r² = x² + y²
//! x_d = x·(1 + k1·r² + k2·r⁴ + k3·r⁶) + 2·p1·x·y + p2·(r² + 2·x²)
//! y_d = y·(1 + k1·r² + k2·r⁴ + k3·r⁶) + p1·(r² + 2·y²) + 2·p2·x·y
//! u   = fx·x_d + skew·y_d + cx
//! v   = fy·y_d + cy
//! ```
//!
//! Pixel coordinates are continuous with pixel centres at `i + 0.5` (see
//! [`crate::raster`]). The same model drives background undistortion,
//! composite re-distortion, label remapping and the evaluation renderer.

use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::raster::{quantize_unit, Image};

/// Iteration cap for inverting the distortion.
pub const UNDISTORT_MAX_ITERS: usize = 50;
/// Convergence threshold on the fixed-point update, normalized units.
pub const UNDISTORT_STEP_TOL: f64 = 1e-9;
/// Largest residual `|distort(x) - p|` accepted after the iteration cap.
pub const UNDISTORT_RESIDUAL_TOL: f64 = 1e-6;
/// Points sampled per box edge (corners included) by [`remap_bbox`].
pub const BBOX_EDGE_SAMPLES: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum CameraError {
    #[error("calibration parse error in field `{field}`: {message}")]
    Parse { field: String, message: String },
    #[error("invalid camera model: {0}")]
    Validation(String),
    #[error("undistortion did not converge at ({x}, {y}); residual {residual:e}")]
    NonConvergence { x: f64, y: f64, residual: f64 },
    #[error("image is {got_w}x{got_h} but the camera is {want_w}x{want_h}")]
    DimensionMismatch {
        want_w: u32,
        want_h: u32,
        got_w: u32,
        got_h: u32,
    },
    #[error("remapped bounding box has zero area")]
    DegenerateBox,
    #[error("invalid bounding box: {0}")]
    InvalidBox(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedPoint {
    pub x: f64,
    pub y: f64,
}

impl PixelPoint {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

impl NormalizedPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Which way a remap goes. `Undistort` turns a raw capture into an ideal
/// pinhole image; `Distort` applies the lens back onto an ideal image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Undistort,
    Distort,
}

/// Intrinsics, distortion coefficients and sensor size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub skew: f64,
    pub k1: f64,
    pub k2: f64,
    pub p1: f64,
    pub p2: f64,
    #[serde(default)]
    pub k3: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraModel {
    /// Distortion-free camera with the principal point at the frame centre.
    pub fn pinhole(width: u32, height: u32, focal: f64) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: f64::from(width) / 2.0,
            cy: f64::from(height) / 2.0,
            skew: 0.0,
            k1: 0.0,
            k2: 0.0,
            p1: 0.0,
            p2: 0.0,
            k3: 0.0,
            width,
            height,
        }
    }

    pub fn with_radial(mut self, k1: f64, k2: f64, k3: f64) -> Self {
        self.k1 = k1;
        self.k2 = k2;
        self.k3 = k3;
        self
    }

    pub fn with_tangential(mut self, p1: f64, p2: f64) -> Self {
        self.p1 = p1;
        self.p2 = p2;
        self
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        let named = [
            ("fx", self.fx),
            ("fy", self.fy),
            ("cx", self.cx),
            ("cy", self.cy),
            ("skew", self.skew),
            ("k1", self.k1),
            ("k2", self.k2),
            ("p1", self.p1),
            ("p2", self.p2),
            ("k3", self.k3),
        ];
        if let Some((name, _)) = named.iter().find(|(_, v)| !v.is_finite()) {
            return Err(CameraError::Validation(format!("{name} is not finite")));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(CameraError::Validation(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(CameraError::Validation(format!(
                "resolution must be positive ({}x{})",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// True when every distortion coefficient is exactly zero.
    pub fn is_distortion_free(&self) -> bool {
        self.k1 == 0.0 && self.k2 == 0.0 && self.k3 == 0.0 && self.p1 == 0.0 && self.p2 == 0.0
    }

    pub fn pixel_to_normalized(&self, p: PixelPoint) -> NormalizedPoint {
        let y = (p.v - self.cy) / self.fy;
        let x = (p.u - self.cx - self.skew * y) / self.fx;
        NormalizedPoint { x, y }
    }

    pub fn normalized_to_pixel(&self, p: NormalizedPoint) -> PixelPoint {
        PixelPoint {
            u: self.fx * p.x + self.skew * p.y + self.cx,
            v: self.fy * p.y + self.cy,
        }
    }

    fn radial(&self, x: f64, y: f64) -> f64 {
        let r2 = x * x + y * y;
        1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3))
    }

    fn tangential(&self, x: f64, y: f64) -> (f64, f64) {
        let r2 = x * x + y * y;
        (
            2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x),
            self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y,
        )
    }

    pub fn check_dims(&self, width: usize, height: usize) -> Result<(), CameraError> {
        if width != self.width as usize || height != self.height as usize {
            return Err(CameraError::DimensionMismatch {
                want_w: self.width,
                want_h: self.height,
                got_w: width as u32,
                got_h: height as u32,
            });
        }
        Ok(())
    }

    /// Maps a pixel through the lens in the given direction.
    pub fn map_pixel(&self, p: PixelPoint, direction: Direction) -> Result<PixelPoint, CameraError> {
        let n = self.pixel_to_normalized(p);
        let m = match direction {
            Direction::Distort => distort_point(n, self),
            Direction::Undistort => undistort_point(n, self)?,
        };
        Ok(self.normalized_to_pixel(m))
    }
}

/// Applies the forward lens model to normalized coordinates.
pub fn distort_point(p: NormalizedPoint, cam: &CameraModel) -> NormalizedPoint {
    let radial = cam.radial(p.x, p.y);
    let (tx, ty) = cam.tangential(p.x, p.y);
    NormalizedPoint {
        x: p.x * radial + tx,
        y: p.y * radial + ty,
    }
}

/// Inverts [`distort_point`] by fixed-point iteration
/// `x ← (x_d − tangential(x)) / radial(x)`, halving the step whenever the
/// residual grows.
pub fn undistort_point(p: NormalizedPoint, cam: &CameraModel) -> Result<NormalizedPoint, CameraError> {
    if cam.is_distortion_free() {
        return Ok(p);
    }
    let residual_at = |q: NormalizedPoint| {
        let d = distort_point(q, cam);
        (d.x - p.x).hypot(d.y - p.y)
    };
    let mut q = p;
    let mut residual = residual_at(q);
    let mut damping = 1.0;
    for _ in 0..UNDISTORT_MAX_ITERS {
        let radial = cam.radial(q.x, q.y);
        if !radial.is_finite() || radial <= 0.0 {
            break;
        }
        let (tx, ty) = cam.tangential(q.x, q.y);
        let target = NormalizedPoint {
            x: (p.x - tx) / radial,
            y: (p.y - ty) / radial,
        };
        let step_x = damping * (target.x - q.x);
        let step_y = damping * (target.y - q.y);
        let next = NormalizedPoint {
            x: q.x + step_x,
            y: q.y + step_y,
        };
        let next_residual = residual_at(next);
        if !next_residual.is_finite() {
            break;
        }
        if next_residual > residual {
            damping *= 0.5;
        }
        q = next;
        residual = next_residual;
        if step_x.hypot(step_y) < UNDISTORT_STEP_TOL {
            break;
        }
    }
    if residual.is_finite() && residual <= UNDISTORT_RESIDUAL_TOL {
        Ok(q)
    } else {
        Err(CameraError::NonConvergence {
            x: p.x,
            y: p.y,
            residual,
        })
    }
}

/// Per-pixel source lookup for one camera and direction. Building the table
/// is the expensive part of a remap, so callers that remap many frames keep
/// one around.
#[derive(Debug, Clone)]
pub struct RemapTable {
    width: usize,
    height: usize,
    identity: bool,
    // Source location in index space per destination pixel; NaN = outside.
    sources: Vec<(f64, f64)>,
}

impl RemapTable {
    pub fn new(cam: &CameraModel, direction: Direction) -> Self {
        let width = cam.width as usize;
        let height = cam.height as usize;
        if cam.is_distortion_free() {
            return Self {
                width,
                height,
                identity: true,
                sources: Vec::new(),
            };
        }
        // A destination pixel pulls from the inverse-mapped location.
        let inverse = match direction {
            Direction::Undistort => Direction::Distort,
            Direction::Distort => Direction::Undistort,
        };
        let mut sources = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let dst = PixelPoint::new(x as f64 + 0.5, y as f64 + 0.5);
                let src = match cam.map_pixel(dst, inverse) {
                    Ok(s) => (s.u - 0.5, s.v - 0.5),
                    Err(_) => (f64::NAN, f64::NAN),
                };
                sources.push(src);
            }
        }
        Self {
            width,
            height,
            identity: false,
            sources,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    pub fn apply(&self, img: &Image) -> Result<Image, CameraError> {
        self.check(img.width(), img.height())?;
        if self.identity {
            return Ok(img.clone());
        }
        let ch = img.channels();
        let mut out = Image::new(self.width, self.height, ch);
        let data = out.data_mut();
        for (i, &(sx, sy)) in self.sources.iter().enumerate() {
            for c in 0..ch {
                data[i * ch + c] = img.sample_bilinear(sx, sy, c).unwrap_or(0.0);
            }
        }
        Ok(out)
    }

    /// 8-bit variant: resamples in floating point and rounds half up.
    pub fn apply_rgb8(&self, img: &RgbImage) -> Result<RgbImage, CameraError> {
        self.check(img.width() as usize, img.height() as usize)?;
        if self.identity {
            return Ok(img.clone());
        }
        let out = self.apply(&Image::from_rgb8(img))?;
        let raw = out.data().iter().map(|&v| quantize_unit(v)).collect();
        Ok(RgbImage::from_raw(img.width(), img.height(), raw).expect("dimensions match"))
    }

    fn check(&self, width: usize, height: usize) -> Result<(), CameraError> {
        if width != self.width || height != self.height {
            return Err(CameraError::DimensionMismatch {
                want_w: self.width as u32,
                want_h: self.height as u32,
                got_w: width as u32,
                got_h: height as u32,
            });
        }
        Ok(())
    }
}

/// Resamples a whole frame through the lens model with bilinear
/// interpolation; destinations whose source falls outside the frame are 0.
pub fn remap_image(img: &Image, cam: &CameraModel, direction: Direction) -> Result<Image, CameraError> {
    cam.check_dims(img.width(), img.height())?;
    RemapTable::new(cam, direction).apply(img)
}

pub fn remap_rgb8(img: &RgbImage, cam: &CameraModel, direction: Direction) -> Result<RgbImage, CameraError> {
    cam.check_dims(img.width() as usize, img.height() as usize)?;
    RemapTable::new(cam, direction).apply_rgb8(img)
}

/// Normalized axis-aligned box label (`cx, cy, w, h` relative to the frame).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub class_id: u32,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(class_id: u32, cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, CameraError> {
        let b = Self {
            class_id,
            cx,
            cy,
            w,
            h,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        let vals = [self.cx, self.cy, self.w, self.h];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(CameraError::InvalidBox("non-finite coordinate".into()));
        }
        if !(0.0..=1.0).contains(&self.cx) || !(0.0..=1.0).contains(&self.cy) {
            return Err(CameraError::InvalidBox(format!(
                "centre ({}, {}) outside the unit square",
                self.cx, self.cy
            )));
        }
        if !(self.w > 0.0 && self.w <= 1.0 && self.h > 0.0 && self.h <= 1.0) {
            return Err(CameraError::InvalidBox(format!(
                "size ({}, {}) must be in (0, 1]",
                self.w, self.h
            )));
        }
        Ok(())
    }

    /// Builds a box from normalized corners, clamping to the unit square.
    pub fn from_corners(class_id: u32, x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, CameraError> {
        let (x0, x1) = (x0.clamp(0.0, 1.0), x1.clamp(0.0, 1.0));
        let (y0, y1) = (y0.clamp(0.0, 1.0), y1.clamp(0.0, 1.0));
        let (w, h) = (x1 - x0, y1 - y0);
        if !(w > 0.0 && h > 0.0) {
            return Err(CameraError::DegenerateBox);
        }
        Ok(Self {
            class_id,
            cx: (x0 + x1) / 2.0,
            cy: (y0 + y1) / 2.0,
            w,
            h,
        })
    }

    /// `(x0, y0, x1, y1)` in normalized units.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    /// `(x0, y0, x1, y1)` in continuous pixel coordinates.
    pub fn to_pixels(&self, width: usize, height: usize) -> (f64, f64, f64, f64) {
        let (x0, y0, x1, y1) = self.corners();
        let (w, h) = (width as f64, height as f64);
        (x0 * w, y0 * h, x1 * w, y1 * h)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let (ax0, ay0, ax1, ay1) = self.corners();
        let (bx0, by0, bx1, by1) = other.corners();
        let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
        let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Maps a box label through the lens: samples its boundary, maps every
/// sample, and returns the clamped axis-aligned hull.
pub fn remap_bbox(b: &BBox, cam: &CameraModel, direction: Direction) -> Result<BBox, CameraError> {
    b.validate()?;
    if cam.is_distortion_free() {
        return Ok(*b);
    }
    let (w, h) = (f64::from(cam.width), f64::from(cam.height));
    let (x0, y0, x1, y1) = b.to_pixels(cam.width as usize, cam.height as usize);
    let n = BBOX_EDGE_SAMPLES;
    let mut lo = (f64::INFINITY, f64::INFINITY);
    let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut visit = |u: f64, v: f64| -> Result<(), CameraError> {
        let m = cam.map_pixel(PixelPoint::new(u, v), direction)?;
        lo = (lo.0.min(m.u), lo.1.min(m.v));
        hi = (hi.0.max(m.u), hi.1.max(m.v));
        Ok(())
    };
    for i in 0..n {
        let t = i as f64 / (n - 1) as f64;
        let u = x0 + t * (x1 - x0);
        let v = y0 + t * (y1 - y0);
        visit(u, y0)?;
        visit(u, y1)?;
        visit(x0, v)?;
        visit(x1, v)?;
    }
    BBox::from_corners(b.class_id, lo.0 / w, lo.1 / h, hi.0 / w, hi.1 / h)
}

const CALIBRATION_FIELDS: [(&str, bool); 12] = [
    ("fx", true),
    ("fy", true),
    ("cx", true),
    ("cy", true),
    ("skew", false),
    ("k1", true),
    ("k2", true),
    ("p1", true),
    ("p2", true),
    ("k3", false),
    ("width", true),
    ("height", true),
];

/// Parses a calibration JSON object. Errors name the offending field.
pub fn parse_calibration(text: &str) -> Result<CameraModel, CameraError> {
    let value: Value = serde_json::from_str(text).map_err(|e| CameraError::Parse {
        field: "<document>".into(),
        message: e.to_string(),
    })?;
    let obj = value.as_object().ok_or_else(|| CameraError::Parse {
        field: "<document>".into(),
        message: "expected a JSON object".into(),
    })?;
    let mut vals = [0.0f64; 12];
    for (slot, (name, required)) in vals.iter_mut().zip(CALIBRATION_FIELDS) {
        *slot = number_field(obj, name, required)?;
    }
    let dim = |name: &str, v: f64| -> Result<u32, CameraError> {
        if v.fract() != 0.0 || v < 0.0 || v > f64::from(u32::MAX) {
            return Err(CameraError::Parse {
                field: name.into(),
                message: format!("expected a non-negative integer, got {v}"),
            });
        }
        Ok(v as u32)
    };
    let cam = CameraModel {
        fx: vals[0],
        fy: vals[1],
        cx: vals[2],
        cy: vals[3],
        skew: vals[4],
        k1: vals[5],
        k2: vals[6],
        p1: vals[7],
        p2: vals[8],
        k3: vals[9],
        width: dim("width", vals[10])?,
        height: dim("height", vals[11])?,
    };
    cam.validate()?;
    Ok(cam)
}

fn number_field(obj: &Map<String, Value>, name: &str, required: bool) -> Result<f64, CameraError> {
    match obj.get(name) {
        None if required => Err(CameraError::Parse {
            field: name.into(),
            message: "missing".into(),
        }),
        None => Ok(0.0),
        Some(v) => v.as_f64().ok_or_else(|| CameraError::Parse {
            field: name.into(),
            message: format!("expected a number, got {v}"),
        }),
    }
}

pub fn calibration_to_json(cam: &CameraModel) -> String {
    serde_json::to_string_pretty(cam).expect("camera model serializes")
}

pub fn load_calibration(path: &Path) -> Result<CameraModel, CameraError> {
    let text = std::fs::read_to_string(path).map_err(|source| CameraError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_calibration(&text)
}

pub fn save_calibration(cam: &CameraModel, path: &Path) -> Result<(), CameraError> {
    cam.validate()?;
    std::fs::write(path, calibration_to_json(cam) + "\n").map_err(|source| CameraError::Io {
        path: path.display().to_string(),
        source,
    })
}
