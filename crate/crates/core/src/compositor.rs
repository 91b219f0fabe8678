//! Composite dataset generation: sign crops pasted onto undistorted platform
//! backgrounds, photometrically matched by maRGB, re-distorted through the
//! calibrated camera and labelled in the distorted frame.
//!
//! maRGB is the scalar mean over every pixel and every channel of an 8-bit
//! RGB image, so it lives in `[0, 255]`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{remap_bbox, BBox, CameraError, CameraModel, Direction, RemapTable};
use crate::raster::{self, round_half_up_u8, Image, RasterError};
use crate::seed::{derive_seed, rng_from_seed};

/// Attempts per sample before giving up on the darkness filter (1 + 10 retries).
pub const DARK_RETRIES: u32 = 10;

const STREAM_SAMPLE: u64 = 0x5341_4d50;
const STREAM_DARK_RETRY: u64 = 0x4441_524b;

#[derive(Debug, thiserror::Error)]
pub enum CompositorError {
    #[error("image is empty")]
    EmptyImage,
    #[error("background pool is empty")]
    EmptyPool,
    #[error("sign {0} has zero brightness")]
    ZeroBrightness(String),
    #[error("background {0} has not been undistorted")]
    NotUndistorted(String),
    #[error("sign of {sign_w}x{sign_h} px cannot fit a {frame_w}x{frame_h} frame with the configured margins")]
    ConfigInfeasible {
        sign_w: u32,
        sign_h: u32,
        frame_w: u32,
        frame_h: u32,
    },
    #[error("invalid composite config: {0}")]
    InvalidConfig(String),
    #[error("sample still darker than the threshold after {0} retries")]
    TooDarkAfterRetries(u32),
    #[error("class {0} has a target count but no sign instances")]
    InsufficientSources(u32),
    #[error("label parse error on line {line}: {message}")]
    Label { line: usize, message: String },
    #[error("dataset manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CompositorError + '_ {
    move |source| CompositorError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Mean of all channel values.
pub fn compute_ma_rgb(img: &RgbImage) -> Result<f64, CompositorError> {
    let raw = img.as_raw();
    if raw.is_empty() {
        return Err(CompositorError::EmptyImage);
    }
    let sum: u64 = raw.iter().map(|&v| u64::from(v)).sum();
    Ok(sum as f64 / raw.len() as f64)
}

/// `compute_ma_rgb(img) < threshold`, strictly.
pub fn is_too_dark(img: &RgbImage, threshold: f64) -> bool {
    match compute_ma_rgb(img) {
        Ok(m) => m < threshold,
        Err(_) => true,
    }
}

#[derive(Debug, Clone)]
pub struct SignInstance {
    pixels: RgbImage,
    class_id: u32,
    ma_rgb: f64,
    source_id: String,
}

impl SignInstance {
    pub fn new(pixels: RgbImage, class_id: u32, source_id: impl Into<String>) -> Result<Self, CompositorError> {
        let ma_rgb = compute_ma_rgb(&pixels)?;
        Ok(Self {
            pixels,
            class_id,
            ma_rgb,
            source_id: source_id.into(),
        })
    }

    pub fn pixels(&self) -> &RgbImage {
        &self.pixels
    }

    pub fn class_id(&self) -> u32 {
        self.class_id
    }

    pub fn ma_rgb(&self) -> f64 {
        self.ma_rgb
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }
}

#[derive(Debug, Clone)]
pub struct Background {
    pixels: RgbImage,
    ma_rgb: f64,
    undistorted: bool,
    source_id: String,
}

impl Background {
    /// A raw platform capture, still carrying lens distortion.
    pub fn captured(pixels: RgbImage, source_id: impl Into<String>) -> Result<Self, CompositorError> {
        Ok(Self {
            ma_rgb: compute_ma_rgb(&pixels)?,
            pixels,
            undistorted: false,
            source_id: source_id.into(),
        })
    }

    /// A frame already in ideal pinhole geometry.
    pub fn undistorted(pixels: RgbImage, source_id: impl Into<String>) -> Result<Self, CompositorError> {
        Ok(Self {
            undistorted: true,
            ..Self::captured(pixels, source_id)?
        })
    }

    /// Undistorts a raw capture through `cam`. No-op on frames that are
    /// already undistorted.
    pub fn undistort(self, cam: &CameraModel) -> Result<Self, CompositorError> {
        if self.undistorted {
            return Ok(self);
        }
        let pixels = crate::camera::remap_rgb8(&self.pixels, cam, Direction::Undistort)?;
        Self::undistorted(pixels, self.source_id)
    }

    pub fn pixels(&self) -> &RgbImage {
        &self.pixels
    }

    pub fn ma_rgb(&self) -> f64 {
        self.ma_rgb
    }

    pub fn is_undistorted(&self) -> bool {
        self.undistorted
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompositeConfig {
    /// Pasted sign height as a fraction of frame height, lower bound.
    pub scale_min: f64,
    pub scale_max: f64,
    /// Minimum gap between sign and frame edge, fraction of the frame side.
    pub margin: f64,
    /// Composites with maRGB strictly below this are rejected.
    pub dark_threshold: f64,
    /// Samples to emit per class id.
    pub targets: BTreeMap<u32, usize>,
    pub seed: u64,
    /// Apply maRGB brightness matching to reused (oversampled) sign instances.
    pub rescale_reused: bool,
}

impl Default for CompositeConfig {
    fn default() -> Self {
        Self {
            scale_min: 0.05,
            scale_max: 0.4,
            margin: 0.02,
            dark_threshold: 25.0,
            targets: BTreeMap::new(),
            seed: 0,
            rescale_reused: true,
        }
    }
}

impl CompositeConfig {
    pub fn validate(&self) -> Result<(), CompositorError> {
        let bad = |m: String| Err(CompositorError::InvalidConfig(m));
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max < 1.0) {
            return bad(format!(
                "need 0 < scale_min <= scale_max < 1, got [{}, {}]",
                self.scale_min, self.scale_max
            ));
        }
        if !(0.0..0.5).contains(&self.margin) {
            return bad(format!("margin {} outside [0, 0.5)", self.margin));
        }
        if !(0.0..=255.0).contains(&self.dark_threshold) {
            return bad(format!("dark_threshold {} outside [0, 255]", self.dark_threshold));
        }
        Ok(())
    }
}

/// Background whose maRGB is closest to the sign's; ties go to the lowest index.
pub fn select_background<'a>(sign: &SignInstance, pool: &'a [Background]) -> Result<&'a Background, CompositorError> {
    let mut best: Option<(f64, &Background)> = None;
    for bg in pool {
        let d = (bg.ma_rgb - sign.ma_rgb).abs();
        if best.map_or(true, |(bd, _)| d < bd) {
            best = Some((d, bg));
        }
    }
    best.map(|(_, bg)| bg).ok_or(CompositorError::EmptyPool)
}

/// Ratio `bg.maRGB / sign.maRGB` applied by [`rescale_brightness`].
pub fn brightness_ratio(sign: &SignInstance, bg: &Background) -> Result<f64, CompositorError> {
    if sign.ma_rgb <= 0.0 {
        return Err(CompositorError::ZeroBrightness(sign.source_id.clone()));
    }
    Ok(bg.ma_rgb / sign.ma_rgb)
}

/// Scales every channel by the background-to-sign maRGB ratio, rounding half
/// up and clamping to `[0, 255]`.
pub fn rescale_brightness(sign: &SignInstance, bg: &Background) -> Result<RgbImage, CompositorError> {
    let ratio = brightness_ratio(sign, bg)?;
    Ok(scale_pixels(&sign.pixels, ratio))
}

fn scale_pixels(img: &RgbImage, ratio: f64) -> RgbImage {
    let raw = img.as_raw().iter().map(|&v| round_half_up_u8(f64::from(v) * ratio)).collect();
    RgbImage::from_raw(img.width(), img.height(), raw).expect("same dimensions")
}

/// Where and how large a sign lands in the frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PastePlacement {
    /// Top-left corner, pixels.
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
    /// Sign height over frame height as drawn.
    pub scale: f64,
}

impl PastePlacement {
    /// Sign of height `scale · frame_h` at an explicit top-left corner.
    pub fn at(scale: f64, x: u32, y: u32, sign_w: u32, sign_h: u32, frame_h: u32) -> Self {
        let (width, height) = scaled_size(scale, sign_w, sign_h, frame_h);
        Self {
            x,
            y,
            width,
            height,
            scale,
        }
    }

    /// Sign of height `scale · frame_h` centred in the frame.
    pub fn centred(scale: f64, sign_w: u32, sign_h: u32, frame_w: u32, frame_h: u32) -> Self {
        let (width, height) = scaled_size(scale, sign_w, sign_h, frame_h);
        Self {
            x: frame_w.saturating_sub(width) / 2,
            y: frame_h.saturating_sub(height) / 2,
            width,
            height,
            scale,
        }
    }
}

fn scaled_size(scale: f64, sign_w: u32, sign_h: u32, frame_h: u32) -> (u32, u32) {
    let h = (scale * f64::from(frame_h)).round().max(1.0);
    let w = (h * f64::from(sign_w) / f64::from(sign_h)).round().max(1.0);
    (w as u32, h as u32)
}

/// Draws a scale from the configured range and a position respecting the
/// margins.
pub fn draw_placement(
    cfg: &CompositeConfig,
    frame_w: u32,
    frame_h: u32,
    sign_w: u32,
    sign_h: u32,
    rng: &mut impl Rng,
) -> Result<PastePlacement, CompositorError> {
    let scale = if cfg.scale_min == cfg.scale_max {
        cfg.scale_min
    } else {
        rng.gen_range(cfg.scale_min..=cfg.scale_max)
    };
    let (w, h) = scaled_size(scale, sign_w, sign_h, frame_h);
    let mx = (cfg.margin * f64::from(frame_w)).ceil() as u32;
    let my = (cfg.margin * f64::from(frame_h)).ceil() as u32;
    if w + 2 * mx > frame_w || h + 2 * my > frame_h {
        return Err(CompositorError::ConfigInfeasible {
            sign_w: w,
            sign_h: h,
            frame_w,
            frame_h,
        });
    }
    let x = rng.gen_range(mx..=frame_w - mx - w);
    let y = rng.gen_range(my..=frame_h - my - h);
    Ok(PastePlacement {
        x,
        y,
        width: w,
        height: h,
        scale,
    })
}

/// Resizes the sign (bilinear) into `placement` and returns the composite
/// with the tight normalized box around the pasted rectangle.
pub fn paste_at(
    frame: &RgbImage,
    sign_pixels: &RgbImage,
    class_id: u32,
    placement: &PastePlacement,
) -> Result<(RgbImage, BBox), CompositorError> {
    let (fw, fh) = (frame.width(), frame.height());
    if placement.x + placement.width > fw || placement.y + placement.height > fh {
        return Err(CompositorError::ConfigInfeasible {
            sign_w: placement.width,
            sign_h: placement.height,
            frame_w: fw,
            frame_h: fh,
        });
    }
    if sign_pixels.width() == 0 || sign_pixels.height() == 0 {
        return Err(CompositorError::EmptyImage);
    }
    let resized = raster::resize_bilinear(
        &Image::from_rgb8(sign_pixels),
        placement.width as usize,
        placement.height as usize,
    )
    .to_rgb8()?;
    let mut out = frame.clone();
    image::imageops::replace(&mut out, &resized, i64::from(placement.x), i64::from(placement.y));
    let (w, h) = (f64::from(fw), f64::from(fh));
    let label = BBox {
        class_id,
        cx: (f64::from(placement.x) + f64::from(placement.width) / 2.0) / w,
        cy: (f64::from(placement.y) + f64::from(placement.height) / 2.0) / h,
        w: f64::from(placement.width) / w,
        h: f64::from(placement.height) / h,
    };
    Ok((out, label))
}

/// Randomized paste onto an undistorted background.
pub fn paste_sign(
    bg: &Background,
    sign_pixels: &RgbImage,
    class_id: u32,
    cfg: &CompositeConfig,
    rng: &mut impl Rng,
) -> Result<(RgbImage, BBox, PastePlacement), CompositorError> {
    if !bg.undistorted {
        return Err(CompositorError::NotUndistorted(bg.source_id.clone()));
    }
    let placement = draw_placement(
        cfg,
        bg.pixels.width(),
        bg.pixels.height(),
        sign_pixels.width(),
        sign_pixels.height(),
        rng,
    )?;
    let (img, label) = paste_at(&bg.pixels, sign_pixels, class_id, &placement)?;
    Ok((img, label, placement))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Seed of the attempt that produced the sample.
    pub seed: u64,
    pub sign_source: String,
    pub background_source: String,
    pub scale: f64,
    pub position: (u32, u32),
    pub brightness_ratio: f64,
    pub reused: bool,
    /// Attempts rejected by the darkness filter before this one.
    pub dark_rejections: u32,
}

#[derive(Debug, Clone)]
pub struct CompositeSample {
    pub image: RgbImage,
    pub label: BBox,
    pub provenance: Provenance,
}

/// Sample generator bound to one camera and config. Holds the re-distortion
/// lookup table so it is built once per dataset.
#[derive(Debug, Clone)]
pub struct Compositor {
    cam: CameraModel,
    cfg: CompositeConfig,
    distort: RemapTable,
}

impl Compositor {
    pub fn new(cam: CameraModel, cfg: CompositeConfig) -> Result<Self, CompositorError> {
        cam.validate()?;
        cfg.validate()?;
        Ok(Self {
            distort: RemapTable::new(&cam, Direction::Distort),
            cam,
            cfg,
        })
    }

    pub fn camera(&self) -> &CameraModel {
        &self.cam
    }

    pub fn config(&self) -> &CompositeConfig {
        &self.cfg
    }

    /// select background → (rescale if reused) → paste → re-distort image
    /// and label → darkness filter, retrying with derived seeds.
    pub fn generate_sample(
        &self,
        sign: &SignInstance,
        pool: &[Background],
        seed: u64,
        reused: bool,
    ) -> Result<CompositeSample, CompositorError> {
        let bg = select_background(sign, pool)?;
        if !bg.undistorted {
            return Err(CompositorError::NotUndistorted(bg.source_id.clone()));
        }
        self.cam.check_dims(bg.pixels.width() as usize, bg.pixels.height() as usize)?;
        let (pixels, ratio) = if reused && self.cfg.rescale_reused {
            (rescale_brightness(sign, bg)?, brightness_ratio(sign, bg)?)
        } else {
            (sign.pixels.clone(), 1.0)
        };
        for attempt in 0..=DARK_RETRIES {
            let attempt_seed = if attempt == 0 {
                seed
            } else {
                derive_seed(seed, STREAM_DARK_RETRY, u64::from(attempt))
            };
            let mut rng = rng_from_seed(attempt_seed);
            let (pasted, label, placement) = paste_sign(bg, &pixels, sign.class_id, &self.cfg, &mut rng)?;
            let image = self.distort.apply_rgb8(&pasted)?;
            if is_too_dark(&image, self.cfg.dark_threshold) {
                continue;
            }
            let label = remap_bbox(&label, &self.cam, Direction::Distort)?;
            return Ok(CompositeSample {
                image,
                label,
                provenance: Provenance {
                    seed: attempt_seed,
                    sign_source: sign.source_id.clone(),
                    background_source: bg.source_id.clone(),
                    scale: placement.scale,
                    position: (placement.x, placement.y),
                    brightness_ratio: ratio,
                    reused,
                    dark_rejections: attempt,
                },
            });
        }
        Err(CompositorError::TooDarkAfterRetries(DARK_RETRIES))
    }

    /// Emits exactly `cfg.targets[class]` samples per class, cycling through
    /// that class's instances; the second and later uses of an instance are
    /// reuses. Files go to `images/`, `labels/` and `manifest.json` under
    /// `out_dir`. Samples are produced on up to `jobs` threads and written in
    /// index order.
    pub fn generate_dataset(
        &self,
        signs: &[SignInstance],
        pool: &[Background],
        out_dir: &Path,
        jobs: usize,
    ) -> Result<DatasetManifest, CompositorError> {
        let plan = self.plan(signs)?;
        let run = || -> Vec<Result<CompositeSample, CompositorError>> {
            plan.par_iter()
                .map(|p| {
                    let seed = derive_seed(self.cfg.seed, STREAM_SAMPLE, p.index as u64);
                    self.generate_sample(&signs[p.sign], pool, seed, p.reused)
                })
                .collect()
        };
        let samples = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| CompositorError::InvalidConfig(format!("thread pool: {e}")))?
            .install(run);

        let images = out_dir.join("images");
        let labels = out_dir.join("labels");
        std::fs::create_dir_all(&images).map_err(io_err(&images))?;
        std::fs::create_dir_all(&labels).map_err(io_err(&labels))?;
        let mut manifest = DatasetManifest::default();
        for (p, sample) in plan.iter().zip(samples) {
            let sample = sample?;
            let id = format!("{:06}", p.index);
            raster::save_png(&sample.image, &images.join(format!("{id}.png")))?;
            let label_path = labels.join(format!("{id}.txt"));
            std::fs::write(&label_path, format_labels(&[sample.label])).map_err(io_err(&label_path))?;
            manifest.entries.push(ManifestEntry {
                id,
                seed: sample.provenance.seed,
                sign_source: sample.provenance.sign_source,
                background_source: sample.provenance.background_source,
                brightness_ratio: sample.provenance.brightness_ratio,
                scale: sample.provenance.scale,
                class_id: sample.label.class_id,
            });
        }
        let path = out_dir.join("manifest.json");
        std::fs::write(&path, manifest.to_json()).map_err(io_err(&path))?;
        Ok(manifest)
    }

    fn plan(&self, signs: &[SignInstance]) -> Result<Vec<PlannedSample>, CompositorError> {
        let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in signs.iter().enumerate() {
            by_class.entry(s.class_id).or_default().push(i);
        }
        let mut plan = Vec::new();
        for (&class, &target) in &self.cfg.targets {
            if target == 0 {
                continue;
            }
            let instances = by_class.get(&class).ok_or(CompositorError::InsufficientSources(class))?;
            for k in 0..target {
                plan.push(PlannedSample {
                    index: plan.len(),
                    sign: instances[k % instances.len()],
                    reused: k >= instances.len(),
                });
            }
        }
        Ok(plan)
    }
}

struct PlannedSample {
    index: usize,
    sign: usize,
    reused: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub sign_source: String,
    pub background_source: String,
    pub brightness_ratio: f64,
    pub scale: f64,
    pub class_id: u32,
}

/// `manifest.json`: a JSON list with one entry per emitted sample.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.entries).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self, CompositorError> {
        let entries: Vec<ManifestEntry> =
            serde_json::from_str(text).map_err(|e| CompositorError::Manifest(e.to_string()))?;
        Ok(Self { entries })
    }

    pub fn class_counts(&self) -> BTreeMap<u32, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.class_id).or_insert(0) += 1;
        }
        counts
    }
}

/// One `class_id cx cy w h` line per box, six decimals, newline-terminated.
pub fn format_labels(boxes: &[BBox]) -> String {
    let mut s = String::new();
    for b in boxes {
        let _ = writeln!(s, "{} {:.6} {:.6} {:.6} {:.6}", b.class_id, b.cx, b.cy, b.w, b.h);
    }
    s
}

pub fn parse_labels(text: &str) -> Result<Vec<BBox>, CompositorError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| CompositorError::Label { line: i + 1, message };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", fields.len())));
        }
        let class_id: u32 = fields[0]
            .parse()
            .map_err(|_| err(format!("bad class id `{}`", fields[0])))?;
        let mut v = [0.0f64; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|_| err(format!("bad number `{f}`")))?;
        }
        let b = BBox::new(class_id, v[0], v[1], v[2], v[3]).map_err(|e| err(e.to_string()))?;
        out.push(b);
    }
    Ok(out)
}

/// One image of a generated dataset with its labels.
#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub id: String,
    pub image_path: PathBuf,
    pub labels: Vec<BBox>,
}

/// Reads a dataset directory in manifest order (or sorted label order when
/// there is no manifest). Images are not decoded here.
pub fn read_dataset(dir: &Path) -> Result<Vec<DatasetItem>, CompositorError> {
    let manifest_path = dir.join("manifest.json");
    let ids: Vec<String> = if manifest_path.exists() {
        let text = std::fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        DatasetManifest::parse(&text)?.entries.into_iter().map(|e| e.id).collect()
    } else {
        let labels = dir.join("labels");
        let mut ids: Vec<String> = std::fs::read_dir(&labels)
            .map_err(io_err(&labels))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let p = e.path();
                if p.extension()? != "txt" {
                    return None;
                }
                Some(p.file_stem()?.to_string_lossy().into_owned())
            })
            .collect();
        ids.sort();
        ids
    };
    ids.into_iter()
        .map(|id| {
            let label_path = dir.join("labels").join(format!("{id}.txt"));
            let text = std::fs::read_to_string(&label_path).map_err(io_err(&label_path))?;
            Ok(DatasetItem {
                image_path: dir.join("images").join(format!("{id}.png")),
                labels: parse_labels(&text)?,
                id,
            })
        })
        .collect()
}
