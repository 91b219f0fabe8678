//! Detector and patch-generator contracts.
//!
//! Gradients cross the boundary through explicit methods rather than a shared
//! autodiff graph: a detector hands back `∂(stop confidence)/∂pixels` scaled
//! by an upstream scalar, and a generator hands back `∂/∂z` for an
//! image-shaped upstream gradient. Real models attach behind these traits
//! (in-process or over [`wire`]); the toy implementations in [`toy`] make the
//! whole pipeline runnable and checkable without pretrained weights.

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::camera::BBox;
use crate::raster::{Image, RasterError};
use crate::seed::{label_hash, mix64, rng_from_seed};

pub mod toy;
pub mod wire;

pub use toy::{synthetic_scene, synthetic_stop_sign, ToyDetector, ToyGenerator, ToyOutput};
pub use wire::{external_detector_probe, Endpoint, ExternalDetector, Transport, WireServer};

/// GTSRB class id of the STOP sign.
pub const STOP_CLASS_ID: u32 = 14;

#[derive(Debug, thiserror::Error)]
pub enum AdapterError {
    #[error("expected a {want_w}x{want_h} image, got {got_w}x{got_h}")]
    ResolutionMismatch {
        want_w: usize,
        want_h: usize,
        got_w: usize,
        got_h: usize,
    },
    #[error("expected length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("adapter does not provide gradients")]
    NoGradientSupport,
    #[error("adapter produced out-of-range output: {0}")]
    OutOfRange(String),
    #[error("endpoint unreachable: {0}")]
    Unreachable(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: u32,
    pub confidence: f64,
}

/// How several STOP detections in one frame collapse to a single confidence.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Max,
    Mean,
}

/// STOP confidence of a detection list; 0 when there is no STOP detection.
pub fn reduce_stop_confidence(detections: &[Detection], reduction: Reduction) -> f64 {
    let stops = detections.iter().filter(|d| d.class_id == STOP_CLASS_ID).map(|d| d.confidence);
    match reduction {
        Reduction::Max => stops.fold(0.0, f64::max),
        Reduction::Mean => {
            let (sum, n) = stops.fold((0.0, 0usize), |(s, n), c| (s + c, n + 1));
            if n == 0 {
                0.0
            } else {
                sum / n as f64
            }
        }
    }
}

/// What a detector declares about itself. Also the body of the wire
/// protocol's probe reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Capabilities {
    pub supports_gradients: bool,
    /// Expected input `[width, height]`, if fixed.
    pub resolution: Option<[u32; 2]>,
    pub class_map: BTreeMap<u32, String>,
    /// Free-form description of what "STOP confidence" means for this model
    /// (e.g. objectness × class probability).
    #[serde(default)]
    pub confidence_definition: String,
    /// Safe to call from several threads at once.
    #[serde(default)]
    pub reentrant: bool,
}

pub trait Detector: Send + Sync {
    fn capabilities(&self) -> Capabilities;

    fn detect(&self, image: &Image) -> Result<Vec<Detection>, AdapterError>;

    /// Max confidence over STOP detections, 0 if none.
    fn stop_confidence(&self, image: &Image) -> Result<f64, AdapterError> {
        Ok(reduce_stop_confidence(&self.detect(image)?, Reduction::Max))
    }

    fn supports_gradients(&self) -> bool {
        false
    }

    /// `upstream · ∂ stop_confidence(image) / ∂ image`.
    fn input_gradient(&self, _image: &Image, _upstream: f64) -> Result<Image, AdapterError> {
        Err(AdapterError::NoGradientSupport)
    }
}

pub trait Generator: Send + Sync {
    fn latent_dim(&self) -> usize;

    /// `(width, height)` of every generated patch.
    fn patch_size(&self) -> (usize, usize);

    fn generate(&self, z: &[f64]) -> Result<Image, AdapterError>;

    fn supports_gradients(&self) -> bool {
        false
    }

    /// Pulls an image-shaped upstream gradient back to the latent.
    fn latent_gradient(&self, _z: &[f64], _upstream: &Image) -> Result<Vec<f64>, AdapterError> {
        Err(AdapterError::NoGradientSupport)
    }

    /// Starting latent for an initialization label. Generators without a
    /// class-conditional prior draw a standard normal vector keyed by the
    /// label and seed.
    fn initial_latent(&self, label: &str, seed: u64) -> Vec<f64> {
        let mut rng = rng_from_seed(mix64(label_hash(label) ^ seed));
        (0..self.latent_dim()).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}

impl<T: Detector + ?Sized> Detector for Box<T> {
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }
    fn detect(&self, image: &Image) -> Result<Vec<Detection>, AdapterError> {
        (**self).detect(image)
    }
    fn stop_confidence(&self, image: &Image) -> Result<f64, AdapterError> {
        (**self).stop_confidence(image)
    }
    fn supports_gradients(&self) -> bool {
        (**self).supports_gradients()
    }
    fn input_gradient(&self, image: &Image, upstream: f64) -> Result<Image, AdapterError> {
        (**self).input_gradient(image, upstream)
    }
}

/// Detector that reports the same STOP confidence for every input. Useful as
/// a baseline and in bookkeeping tests.
#[derive(Debug, Clone, Copy)]
pub struct ConstantDetector {
    pub confidence: f64,
}

impl Detector for ConstantDetector {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            supports_gradients: true,
            resolution: None,
            class_map: [(STOP_CLASS_ID, "stop".to_string())].into_iter().collect(),
            confidence_definition: "constant".into(),
            reentrant: true,
        }
    }

    fn detect(&self, _image: &Image) -> Result<Vec<Detection>, AdapterError> {
        Ok(vec![Detection {
            bbox: BBox {
                class_id: STOP_CLASS_ID,
                cx: 0.5,
                cy: 0.5,
                w: 0.5,
                h: 0.5,
            },
            class_id: STOP_CLASS_ID,
            confidence: self.confidence,
        }])
    }

    fn supports_gradients(&self) -> bool {
        true
    }

    fn input_gradient(&self, image: &Image, _upstream: f64) -> Result<Image, AdapterError> {
        Ok(Image::new(image.width(), image.height(), image.channels()))
    }
}
