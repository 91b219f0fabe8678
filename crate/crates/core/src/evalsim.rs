//! Digital stand-in for the physical distance sweep.
//!
//! A sign of physical side `S` is rendered at distance `d` as an
//! `f·S/d`-pixel square over a fixed background, optionally carrying a patch,
//! then pushed through the camera's distortion and a per-frame brightness
//! jitter. Each cell of the factorial grid is scored over a window of frames.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::toy::synthetic_scene;
use crate::adapters::{synthetic_stop_sign, AdapterError, Detector, Generator, ToyGenerator, ToyOutput, STOP_CLASS_ID};
use crate::camera::{BBox, CameraError, CameraModel, Direction, RemapTable};
use crate::optimizer::{OptimizerError, OverlayPlacement, OverlayRegion, Slot};
use crate::raster::{resize_bilinear, Image, RasterError};
use crate::seed::{derive_seed, rng_from_seed};

pub const CLEAN: &str = "clean";
pub const WHITE: &str = "white";
pub const BLACK: &str = "black";
/// `size` and `placement` value of clean rows in records.csv.
pub const NONE: &str = "none";
pub const RECORDS_HEADER: [&str; 6] = ["distance_m", "patch_type", "size", "placement", "frame_idx", "confidence"];

const STREAM_JITTER: u64 = 0x6a69;
const STREAM_BACKGROUND: u64 = 0x6267;
const OCCLUDER_SIDE: usize = 64;
const SIGN_TEMPLATE_SIDE: usize = 512;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("invalid sweep configuration: {0}")]
    Config(String),
    #[error("sign of {side} px at {distance} m does not fit the frame")]
    SignOutOfFrame { distance: f64, side: usize },
    #[error("unknown patch type {0:?}")]
    UnknownPatch(String),
    #[error("records line {line}: {message}")]
    Records { line: u64, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
}

/// Pinhole projection: apparent side in pixels of an object of side `s` at
/// distance `d` under focal length `f`.
pub fn projected_size(s: f64, d: f64, f: f64) -> Result<f64, EvalError> {
    if !(d > 0.0) {
        return Err(EvalError::Config(format!("distance {d} must be positive")));
    }
    Ok(f * s / d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeClass {
    pub name: String,
    /// Patch side over sign side.
    pub fraction: f64,
}

/// A learned patch variant. Without a file the simulator uses a seeded
/// placeholder from the toy generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NapSpec {
    pub name: String,
    #[serde(default)]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub distances: Vec<f64>,
    pub naps: Vec<NapSpec>,
    pub sizes: Vec<SizeClass>,
    pub placements: Vec<Slot>,
    /// Frames per cell.
    pub window: usize,
    /// Brightness jitter bound in 8-bit steps.
    pub jitter: u8,
    /// Physical sign side in meters.
    pub sign_side_m: f64,
    /// Vertical sign centre as a fraction of frame height.
    pub anchor_y: f64,
    pub camera: CameraModel,
    pub seed: u64,
    pub background: Option<PathBuf>,
    pub sign: Option<PathBuf>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            distances: vec![0.30, 0.38, 0.45, 0.60, 0.90],
            naps: ["peacock", "dog", "bear"]
                .into_iter()
                .map(|n| NapSpec {
                    name: n.into(),
                    path: None,
                })
                .collect(),
            sizes: vec![
                SizeClass {
                    name: "small".into(),
                    fraction: 0.464,
                },
                SizeClass {
                    name: "medium".into(),
                    fraction: 0.604,
                },
                SizeClass {
                    name: "large".into(),
                    fraction: 0.697,
                },
            ],
            placements: Slot::ALL.to_vec(),
            window: 150,
            jitter: 3,
            sign_side_m: 0.15,
            anchor_y: 0.4,
            camera: CameraModel::pinhole(640, 480, 600.0).with_radial(-0.08, 0.01, 0.0),
            seed: 0,
            background: None,
            sign: None,
        }
    }
}

impl SweepConfig {
    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| EvalError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sweep config serializes")
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::Config(m));
        if self.distances.is_empty() {
            return bad("at least one distance is required".into());
        }
        if let Some(d) = self.distances.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
            return bad(format!("distance {d} must be positive"));
        }
        if self.window == 0 {
            return bad("window must be at least one frame".into());
        }
        if let Some(s) = self.sizes.iter().find(|s| !(s.fraction > 0.0 && s.fraction <= 1.0)) {
            return bad(format!("size {} fraction {} outside (0, 1]", s.name, s.fraction));
        }
        if !(self.sign_side_m.is_finite() && self.sign_side_m > 0.0) {
            return bad(format!("sign_side_m {} must be positive", self.sign_side_m));
        }
        if !(0.0..=1.0).contains(&self.anchor_y) {
            return bad(format!("anchor_y {} outside [0, 1]", self.anchor_y));
        }
        let mut names: Vec<String> = self.patch_types();
        names.sort();
        names.dedup();
        if names.len() != self.patch_types().len() {
            return bad("duplicate patch type names".into());
        }
        let mut sizes: Vec<&str> = self.sizes.iter().map(|s| s.name.as_str()).collect();
        sizes.sort();
        sizes.dedup();
        if sizes.len() != self.sizes.len() || sizes.contains(&NONE) {
            return bad("size names must be unique and not \"none\"".into());
        }
        self.camera.validate()?;
        Ok(())
    }

    /// Patched types in sweep order: the two occluders, then each NAP.
    pub fn patch_types(&self) -> Vec<String> {
        let mut v = vec![WHITE.to_string(), BLACK.to_string()];
        v.extend(self.naps.iter().map(|n| nap_type(&n.name)));
        v
    }

    pub fn cell_count(&self) -> usize {
        self.distances.len() * (1 + self.patch_types().len() * self.sizes.len() * self.placements.len())
    }
}

pub fn nap_type(name: &str) -> String {
    format!("nap_{name}")
}

/// Seeded stand-in for a learned patch when no file is supplied.
pub fn placeholder_nap(name: &str, seed: u64) -> Image {
    let g = ToyGenerator::smooth(OCCLUDER_SIDE, 16, seed, ToyOutput::Sigmoid);
    g.generate(&g.initial_latent(name, seed)).expect("toy generator output is in range")
}

/// One cell of the sweep grid. Clean cells carry no size or placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub distance_m: f64,
    pub patch_type: String,
    pub size: Option<String>,
    pub placement: Option<Slot>,
}

impl Cell {
    pub fn clean(distance_m: f64) -> Self {
        Self {
            distance_m,
            patch_type: CLEAN.into(),
            size: None,
            placement: None,
        }
    }

    pub fn is_clean(&self) -> bool {
        self.patch_type == CLEAN
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub cell: Cell,
    pub frames: Vec<f64>,
    pub mean: f64,
    /// `mean − clean mean` at the same distance; absent for clean rows.
    pub delta: Option<f64>,
    pub error: Option<String>,
}

pub fn window_mean(frames: &[f64]) -> f64 {
    if frames.is_empty() {
        return f64::NAN;
    }
    frames.iter().sum::<f64>() / frames.len() as f64
}

impl EvalRecord {
    pub fn from_frames(cell: Cell, frames: Vec<f64>) -> Self {
        Self {
            cell,
            mean: window_mean(&frames),
            frames,
            delta: None,
            error: None,
        }
    }

    fn failed(cell: Cell, message: String) -> Self {
        Self {
            cell,
            frames: Vec::new(),
            mean: f64::NAN,
            delta: None,
            error: Some(message),
        }
    }
}

/// Fills `delta` for patched records from the clean record at the same
/// distance. Records with no usable clean baseline keep `None`.
pub fn attach_deltas(records: &mut [EvalRecord]) {
    let clean: HashMap<u64, f64> = records
        .iter()
        .filter(|r| r.cell.is_clean() && r.error.is_none())
        .map(|r| (r.cell.distance_m.to_bits(), r.mean))
        .collect();
    for r in records.iter_mut() {
        r.delta = if r.cell.is_clean() || r.error.is_some() {
            None
        } else {
            clean.get(&r.cell.distance_m.to_bits()).map(|c| r.mean - c)
        };
    }
}

/// Rendering state shared by every cell of a sweep.
pub struct Simulator {
    cfg: SweepConfig,
    remap: RemapTable,
    background: Image,
    sign: Image,
    patches: BTreeMap<String, Image>,
    sizes: BTreeMap<String, f64>,
}

impl Simulator {
    /// `naps` maps NAP names to loaded patches; configured NAPs missing from
    /// it get a placeholder. The background and sign default to synthetic
    /// ones unless given here.
    pub fn new(
        cfg: SweepConfig,
        naps: BTreeMap<String, Image>,
        background: Option<Image>,
        sign: Option<Image>,
    ) -> Result<Self, EvalError> {
        cfg.validate()?;
        let (w, h) = (cfg.camera.width as usize, cfg.camera.height as usize);
        let background = match background {
            Some(bg) if bg.width() == w && bg.height() == h => bg,
            Some(bg) => resize_bilinear(&bg, w, h),
            None => {
                let mut rng = rng_from_seed(derive_seed(cfg.seed, STREAM_BACKGROUND, 0));
                synthetic_scene(w, h, false, &mut rng).0
            }
        };
        let sign = sign.unwrap_or_else(|| synthetic_stop_sign(SIGN_TEMPLATE_SIDE));
        let mut patches = BTreeMap::new();
        patches.insert(WHITE.to_string(), Image::filled(OCCLUDER_SIDE, OCCLUDER_SIDE, 3, 1.0));
        patches.insert(BLACK.to_string(), Image::filled(OCCLUDER_SIDE, OCCLUDER_SIDE, 3, 0.0));
        for nap in &cfg.naps {
            let img = naps
                .get(&nap.name)
                .cloned()
                .unwrap_or_else(|| placeholder_nap(&nap.name, cfg.seed));
            patches.insert(nap_type(&nap.name), img);
        }
        let sizes = cfg.sizes.iter().map(|s| (s.name.clone(), s.fraction)).collect();
        Ok(Self {
            remap: RemapTable::new(&cfg.camera, Direction::Distort),
            cfg,
            background,
            sign,
            patches,
            sizes,
        })
    }

    pub fn config(&self) -> &SweepConfig {
        &self.cfg
    }

    fn frame_size(&self) -> (usize, usize) {
        (self.cfg.camera.width as usize, self.cfg.camera.height as usize)
    }

    /// Every cell in sweep order: per distance, the clean cell then the
    /// patched grid by type, size and placement.
    pub fn cells(&self) -> Vec<Cell> {
        let types = self.cfg.patch_types();
        let mut out = Vec::with_capacity(self.cfg.cell_count());
        for &d in &self.cfg.distances {
            out.push(Cell::clean(d));
            for t in &types {
                for s in &self.cfg.sizes {
                    for &p in &self.cfg.placements {
                        out.push(Cell {
                            distance_m: d,
                            patch_type: t.clone(),
                            size: Some(s.name.clone()),
                            placement: Some(p),
                        });
                    }
                }
            }
        }
        out
    }

    /// Top-left corner and side of the sign square at distance `d`.
    pub fn sign_square(&self, d: f64) -> Result<(usize, usize, usize), EvalError> {
        let (w, h) = self.frame_size();
        let side = projected_size(self.cfg.sign_side_m, d, self.cfg.camera.fx)?.round() as usize;
        let x0 = (w as f64 / 2.0 - side as f64 / 2.0).round();
        let y0 = (self.cfg.anchor_y * h as f64 - side as f64 / 2.0).round();
        if side < 2 || x0 < 0.0 || y0 < 0.0 || x0 as usize + side > w || y0 as usize + side > h {
            return Err(EvalError::SignOutOfFrame { distance: d, side });
        }
        Ok((x0 as usize, y0 as usize, side))
    }

    pub fn sign_box(&self, d: f64) -> Result<BBox, EvalError> {
        let (w, h) = self.frame_size();
        let (x0, y0, side) = self.sign_square(d)?;
        let (x1, y1) = (x0 + side, y0 + side);
        Ok(BBox::new(
            STOP_CLASS_ID,
            (x0 + x1) as f64 / 2.0 / w as f64,
            (y0 + y1) as f64 / 2.0 / h as f64,
            side as f64 / w as f64,
            side as f64 / h as f64,
        )?)
    }

    fn placement(&self, size: &str, slot: Slot) -> Result<OverlayPlacement, EvalError> {
        let frac = *self
            .sizes
            .get(size)
            .ok_or_else(|| EvalError::Config(format!("unknown size {size:?}")))?;
        Ok(OverlayPlacement::new(slot, frac)?)
    }

    fn region(&self, d: f64, size: &str, slot: Slot, patch_side: usize) -> Result<OverlayRegion, EvalError> {
        let (w, h) = self.frame_size();
        Ok(OverlayRegion::new(w, h, &self.sign_box(d)?, patch_side, &self.placement(size, slot)?)?)
    }

    /// Pasted patch pixels over frame pixels, before distortion.
    pub fn patch_coverage(&self, d: f64, size: &str, slot: Slot) -> Result<f64, EvalError> {
        let (w, h) = self.frame_size();
        Ok(self.region(d, size, slot, OCCLUDER_SIDE)?.pixel_count() as f64 / (w * h) as f64)
    }

    /// Undistorted scene: background, sign and (for patched cells) patch.
    pub fn compose(&self, cell: &Cell) -> Result<Image, EvalError> {
        let mut frame = self.background.clone();
        let (x0, y0, side) = self.sign_square(cell.distance_m)?;
        frame.blit(&resize_bilinear(&self.sign, side, side), x0 as i64, y0 as i64);
        if !cell.is_clean() {
            let patch = self
                .patches
                .get(&cell.patch_type)
                .ok_or_else(|| EvalError::UnknownPatch(cell.patch_type.clone()))?;
            if patch.width() != patch.height() {
                return Err(OptimizerError::NotSquare {
                    width: patch.width(),
                    height: patch.height(),
                }
                .into());
            }
            let size = cell.size.as_deref().ok_or_else(|| EvalError::Config("patched cell without size".into()))?;
            let slot = cell.placement.ok_or_else(|| EvalError::Config("patched cell without placement".into()))?;
            self.region(cell.distance_m, size, slot, patch.width())?.apply(&mut frame, patch);
        }
        Ok(frame)
    }

    /// Distorted, 8-bit quantized frame before jitter.
    pub fn render_base(&self, cell: &Cell) -> Result<Image, EvalError> {
        let mut frame = self.remap.apply(&self.compose(cell)?)?;
        frame.quantize_8bit();
        Ok(frame)
    }

    /// Brightness offset of frame `frame_index`, in 8-bit steps. Shared by
    /// every cell so patched and clean windows see the same capture noise.
    pub fn jitter_offset(&self, frame_index: usize) -> i32 {
        let j = i32::from(self.cfg.jitter);
        if j == 0 {
            return 0;
        }
        let mut rng = rng_from_seed(derive_seed(self.cfg.seed, STREAM_JITTER, frame_index as u64));
        rng.gen_range(-j..=j)
    }

    fn jittered(base: &Image, offset: i32) -> Image {
        if offset == 0 {
            return base.clone();
        }
        let delta = f64::from(offset);
        let mut out = base.clone();
        for v in out.data_mut() {
            *v = ((*v * 255.0).round() + delta).clamp(0.0, 255.0) / 255.0;
        }
        out
    }

    pub fn render_scene(&self, cell: &Cell, frame_index: usize) -> Result<Image, EvalError> {
        let base = self.render_base(cell)?;
        Ok(Self::jittered(&base, self.jitter_offset(frame_index)))
    }

    /// Scores one cell over the window. Frames differ only by their jitter
    /// offset, so the detector runs once per distinct offset.
    pub fn run_cell(&self, cell: &Cell, detector: &dyn Detector) -> EvalRecord {
        let attempt = || -> Result<Vec<f64>, EvalError> {
            let base = self.render_base(cell)?;
            let mut seen: HashMap<i32, f64> = HashMap::new();
            let mut frames = Vec::with_capacity(self.cfg.window);
            for i in 0..self.cfg.window {
                let off = self.jitter_offset(i);
                let conf = match seen.get(&off) {
                    Some(&c) => c,
                    None => {
                        let c = detector.stop_confidence(&Self::jittered(&base, off))?;
                        seen.insert(off, c);
                        c
                    }
                };
                frames.push(conf);
            }
            Ok(frames)
        };
        match attempt() {
            Ok(frames) => EvalRecord::from_frames(cell.clone(), frames),
            Err(e) => EvalRecord::failed(cell.clone(), e.to_string()),
        }
    }

    /// Runs every cell on up to `jobs` threads. Output order is the cell
    /// order regardless of scheduling.
    pub fn run_sweep(&self, detector: &dyn Detector, jobs: usize) -> Result<Vec<EvalRecord>, EvalError> {
        let cells = self.cells();
        let mut records: Vec<EvalRecord> = if jobs <= 1 {
            cells.iter().map(|c| self.run_cell(c, detector)).collect()
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build()
                .map_err(|e| EvalError::Config(e.to_string()))?;
            pool.install(|| cells.par_iter().map(|c| self.run_cell(c, detector)).collect())
        };
        attach_deltas(&mut records);
        Ok(records)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameRow {
    distance_m: f64,
    patch_type: String,
    size: String,
    placement: String,
    frame_idx: usize,
    confidence: f64,
}

/// One row per frame of every successful record.
pub fn format_records(records: &[EvalRecord]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(RECORDS_HEADER).expect("in-memory write");
    for r in records.iter().filter(|r| r.error.is_none()) {
        for (i, &c) in r.frames.iter().enumerate() {
            w.serialize(FrameRow {
                distance_m: r.cell.distance_m,
                patch_type: r.cell.patch_type.clone(),
                size: r.cell.size.clone().unwrap_or_else(|| NONE.into()),
                placement: r.cell.placement.map_or(NONE, Slot::name).to_string(),
                frame_idx: i,
                confidence: c,
            })
            .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

/// Failed cells with their messages, or `None` when every cell succeeded.
pub fn format_failures(records: &[EvalRecord]) -> Option<String> {
    let failed: Vec<&EvalRecord> = records.iter().filter(|r| r.error.is_some()).collect();
    if failed.is_empty() {
        return None;
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["distance_m", "patch_type", "size", "placement", "error"]).expect("in-memory write");
    for r in failed {
        w.write_record([
            r.cell.distance_m.to_string(),
            r.cell.patch_type.clone(),
            r.cell.size.clone().unwrap_or_else(|| NONE.into()),
            r.cell.placement.map_or(NONE, Slot::name).to_string(),
            r.error.clone().unwrap_or_default(),
        ])
        .expect("in-memory write");
    }
    Some(String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8"))
}

/// Parses records.csv back into per-cell records (in order of first
/// appearance) with deltas attached. Frames must be numbered `0..n` per cell.
pub fn parse_records(text: &str) -> Result<Vec<EvalRecord>, EvalError> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| EvalError::Records {
        line: 1,
        message: e.to_string(),
    })?;
    if header.iter().ne(RECORDS_HEADER) {
        return Err(EvalError::Records {
            line: 1,
            message: format!("expected header {}", RECORDS_HEADER.join(",")),
        });
    }
    let mut records: Vec<EvalRecord> = Vec::new();
    let mut index: HashMap<(u64, String, String, String), usize> = HashMap::new();
    for row in rdr.deserialize::<FrameRow>() {
        let row = row.map_err(|e| EvalError::Records {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = records.iter().map(|r| r.frames.len() as u64).sum::<u64>() + 2;
        let err = |message: String| EvalError::Records { line, message };
        if !(row.distance_m.is_finite() && row.distance_m > 0.0) {
            return Err(err(format!("distance {} must be positive", row.distance_m)));
        }
        if !(0.0..=1.0).contains(&row.confidence) {
            return Err(err(format!("confidence {} outside [0, 1]", row.confidence)));
        }
        let clean = row.patch_type == CLEAN;
        let placement = if row.placement == NONE {
            None
        } else {
            Some(Slot::parse(&row.placement).ok_or_else(|| err(format!("unknown placement {:?}", row.placement)))?)
        };
        let size = (row.size != NONE).then(|| row.size.clone());
        if clean != (placement.is_none() && size.is_none()) {
            return Err(err("clean rows must have size and placement \"none\", patched rows neither".into()));
        }
        let key = (row.distance_m.to_bits(), row.patch_type.clone(), row.size.clone(), row.placement.clone());
        let slot = *index.entry(key).or_insert_with(|| {
            records.push(EvalRecord::from_frames(
                Cell {
                    distance_m: row.distance_m,
                    patch_type: row.patch_type.clone(),
                    size,
                    placement,
                },
                Vec::new(),
            ));
            records.len() - 1
        });
        let rec = &mut records[slot];
        if row.frame_idx != rec.frames.len() {
            return Err(err(format!(
                "frame {} of {} out of sequence (expected {})",
                row.frame_idx,
                rec.cell.patch_type,
                rec.frames.len()
            )));
        }
        rec.frames.push(row.confidence);
    }
    for r in &mut records {
        r.mean = window_mean(&r.frames);
    }
    attach_deltas(&mut records);
    Ok(records)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), EvalError> {
    std::fs::write(path, text).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_records(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::ConstantDetector;
    use proptest::prelude::{prop_assert, proptest};

    fn small_cfg() -> SweepConfig {
        SweepConfig {
            distances: vec![0.6],
            naps: vec![],
            sizes: vec![SizeClass {
                name: "large".into(),
                fraction: 0.697,
            }],
            placements: vec![Slot::Center],
            window: 5,
            camera: CameraModel::pinhole(160, 120, 150.0).with_radial(-0.05, 0.0, 0.0),
            ..SweepConfig::default()
        }
    }

    fn sim(cfg: SweepConfig) -> Simulator {
        Simulator::new(cfg, BTreeMap::new(), None, None).unwrap()
    }

    #[test]
    fn projected_size_examples() {
        assert!((projected_size(0.1, 0.30, 600.0).unwrap() - 200.0).abs() < 1e-9);
        let a = projected_size(0.15, 0.4, 600.0).unwrap();
        assert_eq!(projected_size(0.15, 0.8, 600.0).unwrap(), a / 2.0);
        assert!(projected_size(0.15, 0.0, 600.0).is_err());
    }

    #[test]
    fn default_cell_count() {
        let cfg = SweepConfig::default();
        assert_eq!(cfg.cell_count(), 230);
        assert_eq!(sim(cfg).cells().len(), 230);
    }

    #[test]
    fn single_factor_sweep_has_two_records() {
        let mut cfg = small_cfg();
        cfg.naps.clear();
        let s = Simulator::new(cfg.clone(), BTreeMap::new(), None, None).unwrap();
        // white + black: 1 clean + 2 patched
        assert_eq!(s.cells().len(), 3);
        let cells: Vec<Cell> = s.cells().into_iter().filter(|c| c.is_clean() || c.patch_type == WHITE).collect();
        assert_eq!(cells.len(), 2);
    }

    #[test]
    fn no_jitter_means_static_frames() {
        let mut cfg = small_cfg();
        cfg.jitter = 0;
        let s = sim(cfg);
        let cell = Cell::clean(0.6);
        assert_eq!(s.render_scene(&cell, 0).unwrap(), s.render_scene(&cell, 7).unwrap());
    }

    #[test]
    fn jitter_moves_brightness_within_bound() {
        let s = sim(small_cfg());
        let cell = Cell::clean(0.6);
        let base = s.render_base(&cell).unwrap();
        let offsets: Vec<i32> = (0..40).map(|i| s.jitter_offset(i)).collect();
        assert!(offsets.iter().all(|o| o.abs() <= 3));
        assert!(offsets.iter().any(|&o| o != 0));
        let i = offsets.iter().position(|&o| o != 0).unwrap();
        let f = s.render_scene(&cell, i).unwrap();
        for (a, b) in f.data().iter().zip(base.data()) {
            assert!(((a - b) * 255.0).abs() <= 3.0 + 1e-9);
        }
    }

    #[test]
    fn clean_scene_shows_the_sign() {
        let s = sim(small_cfg());
        let frame = s.compose(&Cell::clean(0.6)).unwrap();
        let (x0, y0, side) = s.sign_square(0.6).unwrap();
        let sign = resize_bilinear(&synthetic_stop_sign(SIGN_TEMPLATE_SIDE), side, side);
        assert_eq!(frame.crop(x0, y0, side, side), sign);
    }

    #[test]
    fn full_cover_black_blackens_sign() {
        let mut cfg = small_cfg();
        cfg.sizes[0].fraction = 1.0;
        let s = sim(cfg);
        let cell = Cell {
            distance_m: 0.6,
            patch_type: BLACK.into(),
            size: Some("large".into()),
            placement: Some(Slot::Center),
        };
        let frame = s.compose(&cell).unwrap();
        let (x0, y0, side) = s.sign_square(0.6).unwrap();
        assert!(frame.crop(x0, y0, side, side).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_detector_gives_zero_delta() {
        let s = sim(small_cfg());
        let recs = s.run_sweep(&ConstantDetector { confidence: 0.9 }, 1).unwrap();
        for r in &recs {
            assert!(r.frames.iter().all(|&c| c == 0.9));
            assert_eq!(r.mean, 0.9);
            if !r.cell.is_clean() {
                assert_eq!(r.delta, Some(0.0));
            }
        }
    }

    #[test]
    fn window_mean_example() {
        assert!((window_mean(&[0.8, 0.7, 0.9]) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn delta_against_clean_fixture() {
        let mut recs = vec![
            EvalRecord::from_frames(Cell::clean(0.3), vec![0.7788]),
            EvalRecord::from_frames(
                Cell {
                    distance_m: 0.3,
                    patch_type: nap_type("bear"),
                    size: Some("large".into()),
                    placement: Some(Slot::Center),
                },
                vec![0.4208],
            ),
        ];
        attach_deltas(&mut recs);
        assert!((recs[1].delta.unwrap() - (-0.3580)).abs() < 1e-12);
        assert_eq!(recs[0].delta, None);
    }

    #[test]
    fn records_round_trip() {
        let s = sim(small_cfg());
        let recs = s.run_sweep(&ConstantDetector { confidence: 0.25 }, 2).unwrap();
        let text = format_records(&recs);
        assert!(text.starts_with("distance_m,patch_type,size,placement,frame_idx,confidence\n"));
        let back = parse_records(&text).unwrap();
        assert_eq!(back, recs);
        assert_eq!(format_records(&back), text);
    }

    #[test]
    fn failed_cells_are_reported_and_sweep_continues() {
        let mut cfg = small_cfg();
        cfg.naps = vec![NapSpec {
            name: "odd".into(),
            path: None,
        }];
        let mut naps = BTreeMap::new();
        naps.insert("odd".to_string(), Image::new(8, 5, 3));
        let s = Simulator::new(cfg, naps, None, None).unwrap();
        let recs = s.run_sweep(&ConstantDetector { confidence: 0.5 }, 1).unwrap();
        assert_eq!(recs.len(), 4);
        let bad: Vec<_> = recs.iter().filter(|r| r.error.is_some()).collect();
        assert_eq!(bad.len(), 1);
        assert_eq!(bad[0].cell.patch_type, "nap_odd");
        assert!(format_failures(&recs).unwrap().contains("nap_odd"));
        assert!(!format_records(&recs).contains("nap_odd"));
    }

    #[test]
    fn malformed_records_rejected() {
        let h = "distance_m,patch_type,size,placement,frame_idx,confidence\n";
        assert!(parse_records("a,b\n").is_err());
        assert!(parse_records(&format!("{h}0.3,clean,none,none,1,0.5\n")).is_err());
        assert!(parse_records(&format!("{h}0.3,clean,none,none,0,1.5\n")).is_err());
        assert!(parse_records(&format!("{h}0.3,white,none,none,0,0.5\n")).is_err());
        assert!(parse_records(&format!("{h}0.3,white,large,middle,0,0.5\n")).is_err());
        assert!(parse_records(&format!("{h}-1,clean,none,none,0,0.5\n")).is_err());
        assert_eq!(parse_records(h).unwrap().len(), 0);
    }

    #[test]
    fn config_json_round_trip_and_validation() {
        let cfg = SweepConfig::default();
        assert_eq!(SweepConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(SweepConfig::from_json("{}").unwrap(), cfg);
        assert!(SweepConfig::from_json(r#"{"window": 0}"#).is_err());
        assert!(SweepConfig::from_json(r#"{"distances": [0.3, -1]}"#).is_err());
        assert!(SweepConfig::from_json(r#"{"bogus": 1}"#).is_err());
    }

    proptest! {
        #[test]
        fn coverage_decreases_with_distance(i in 0usize..3, d in 0.3f64..1.5, step in 0.05f64..0.5) {
            static SIM: std::sync::OnceLock<Simulator> = std::sync::OnceLock::new();
            let s = SIM.get_or_init(|| sim(SweepConfig::default()));
            let size = ["small", "medium", "large"][i];
            let near = s.patch_coverage(d, size, Slot::Center).unwrap();
            let far = s.patch_coverage(d + step, size, Slot::Center).unwrap();
            prop_assert!(far < near);
        }
    }
}
