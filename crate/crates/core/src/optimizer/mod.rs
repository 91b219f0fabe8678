//! Latent-space patch optimization.
//!
//! A generator maps a latent `z` to a square patch, the patch is overlaid on
//! every STOP sign of the optimization set, and `z` descends the gradient of
//! the mean STOP confidence plus a total-variation penalty. The patch with the
//! lowest mean confidence seen during any run is kept.

use std::path::PathBuf;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterError, Detector, Generator, STOP_CLASS_ID};
use crate::camera::{BBox, CameraError};
use crate::compositor::DatasetItem;
use crate::raster::{Image, RasterError};
use crate::seed::{derive_seed, rng_from_seed};

pub mod overlay;
pub mod run;
pub mod tv;

pub use overlay::{overlay_patch, OverlayPlacement, OverlayRegion, Slot};
pub use run::RunWriter;
pub use tv::{tv_gradient, tv_loss};

pub const DEFAULT_ITERATIONS: usize = 500;
pub const DEFAULT_LEARNING_RATE: f64 = 0.02;
pub const DEFAULT_LAMBDA_TV: f64 = 0.1;
pub const CHECKPOINT_EVERY: usize = 50;
/// Sets up to this size are used whole at every step.
pub const FULL_BATCH_LIMIT: usize = 64;
pub const MINIBATCH_SIZE: usize = 16;

const STREAM_MINIBATCH: u64 = 0x6d62;

#[derive(Debug, thiserror::Error)]
pub enum OptimizerError {
    #[error("patch {width}x{height} is too small for total variation")]
    TooSmall { width: usize, height: usize },
    #[error("sign box leaves only a {side} px patch")]
    BoxTooSmall { side: usize },
    #[error("patch must be square, got {width}x{height}")]
    NotSquare { width: usize, height: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("{0} does not provide gradients")]
    NoGradientSupport(&'static str),
    #[error("non-finite latent gradient at iteration {iteration}")]
    NonFiniteGradient { iteration: usize },
    #[error("no STOP sign boxes in the optimization set")]
    NoStopBoxes,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint does not match this run: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Serde(String),
}

/// One optimization image with the STOP sign the patch goes on.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image: Image,
    pub sign_box: BBox,
}

/// One scene per STOP label. Images are decoded from disk.
pub fn scenes_from_dataset(items: &[DatasetItem]) -> Result<Vec<Scene>, OptimizerError> {
    let mut scenes = Vec::new();
    for item in items {
        let stops: Vec<BBox> = item.labels.iter().copied().filter(|b| b.class_id == STOP_CLASS_ID).collect();
        if stops.is_empty() {
            continue;
        }
        let image = Image::from_rgb8(&crate::raster::load_png(&item.image_path)?);
        for sign_box in stops {
            scenes.push(Scene {
                image: image.clone(),
                sign_box,
            });
        }
    }
    if scenes.is_empty() {
        return Err(OptimizerError::NoStopBoxes);
    }
    Ok(scenes)
}

/// Loss value and (optionally) its gradient w.r.t. patch pixels.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub mean_confidence: f64,
    pub gradient: Option<Image>,
}

/// Patch-space objective minimized by [`step`].
pub trait PatchObjective: Sync {
    /// Number of items `batch` indices may refer to.
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn evaluate(&self, patch: &Image, batch: &[usize], want_grad: bool) -> Result<Evaluation, OptimizerError>;
}

/// Mean STOP confidence over overlaid scenes.
pub struct DetectionObjective<'a> {
    scenes: &'a [Scene],
    detector: &'a dyn Detector,
    placement: OverlayPlacement,
}

impl<'a> DetectionObjective<'a> {
    pub fn new(scenes: &'a [Scene], detector: &'a dyn Detector, placement: OverlayPlacement) -> Self {
        Self {
            scenes,
            detector,
            placement,
        }
    }
}

impl PatchObjective for DetectionObjective<'_> {
    fn len(&self) -> usize {
        self.scenes.len()
    }

    fn evaluate(&self, patch: &Image, batch: &[usize], want_grad: bool) -> Result<Evaluation, OptimizerError> {
        if batch.is_empty() {
            return Err(OptimizerError::EmptyBatch);
        }
        if patch.width() != patch.height() {
            return Err(OptimizerError::NotSquare {
                width: patch.width(),
                height: patch.height(),
            });
        }
        if want_grad && !self.detector.supports_gradients() {
            return Err(OptimizerError::NoGradientSupport("detector"));
        }
        let upstream = 1.0 / batch.len() as f64;
        // Per-scene work runs in parallel; the reduction below is sequential
        // in batch order so results do not depend on the thread count.
        let parts: Vec<(f64, Option<Image>)> = batch
            .par_iter()
            .map(|&i| -> Result<(f64, Option<Image>), OptimizerError> {
                let scene = &self.scenes[i];
                let region = OverlayRegion::new(
                    scene.image.width(),
                    scene.image.height(),
                    &scene.sign_box,
                    patch.width(),
                    &self.placement,
                )?;
                let mut overlaid = scene.image.clone();
                region.apply(&mut overlaid, patch);
                let conf = self.detector.stop_confidence(&overlaid)?;
                let grad = if want_grad {
                    let g = self.detector.input_gradient(&overlaid, upstream)?;
                    Some(region.adjoint(&g))
                } else {
                    None
                };
                Ok((conf, grad))
            })
            .collect::<Result<_, _>>()?;
        let mut sum = 0.0;
        let mut gradient = want_grad.then(|| Image::new(patch.width(), patch.height(), patch.channels()));
        for (conf, g) in parts {
            sum += conf;
            if let (Some(acc), Some(g)) = (gradient.as_mut(), g) {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
        let mean = sum * upstream;
        Ok(Evaluation {
            loss: mean,
            mean_confidence: mean,
            gradient,
        })
    }
}

/// Mean STOP confidence of `detector` over every scene with `patch` overlaid.
pub fn detection_loss(
    scenes: &[Scene],
    patch: &Image,
    detector: &dyn Detector,
    placement: &OverlayPlacement,
) -> Result<f64, OptimizerError> {
    let all: Vec<usize> = (0..scenes.len()).collect();
    Ok(DetectionObjective::new(scenes, detector, *placement).evaluate(patch, &all, false)?.loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase")]
pub enum UpdateRule {
    Sgd,
    Momentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for UpdateRule {
    fn default() -> Self {
        UpdateRule::Sgd
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub l_det: f64,
    pub l_tv: f64,
    pub l_total: f64,
    pub mean_stop_conf: f64,
}

/// Optimizer state for one initialization. `history` holds one record per
/// completed step, so after `k` steps `iteration == history.len() == k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub z: Vec<f64>,
    pub eta: f64,
    pub lambda_tv: f64,
    #[serde(default)]
    pub update: UpdateRule,
    pub iteration: usize,
    pub history: Vec<LossRecord>,
    #[serde(default)]
    pub first_moment: Vec<f64>,
    #[serde(default)]
    pub second_moment: Vec<f64>,
}

impl LatentState {
    pub fn new(z: Vec<f64>, eta: f64, lambda_tv: f64, update: UpdateRule) -> Self {
        let n = z.len();
        let (first_moment, second_moment) = match update {
            UpdateRule::Sgd => (Vec::new(), Vec::new()),
            UpdateRule::Momentum { .. } => (vec![0.0; n], Vec::new()),
            UpdateRule::Adam { .. } => (vec![0.0; n], vec![0.0; n]),
        };
        Self {
            z,
            eta,
            lambda_tv,
            update,
            iteration: 0,
            history: Vec::new(),
            first_moment,
            second_moment,
        }
    }
}

/// What one step evaluated: the patch at the pre-update latent and its losses.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub patch: Image,
    pub record: LossRecord,
}

/// One descent step on `L_det + λ·L_tv` through the generator. On error the
/// state is left as it was.
pub fn step(
    state: &mut LatentState,
    generator: &dyn Generator,
    objective: &dyn PatchObjective,
    batch: &[usize],
) -> Result<StepOutcome, OptimizerError> {
    if !generator.supports_gradients() {
        return Err(OptimizerError::NoGradientSupport("generator"));
    }
    let patch = generator.generate(&state.z)?;
    let eval = objective.evaluate(&patch, batch, true)?;
    let mut grad_patch = eval
        .gradient
        .ok_or_else(|| OptimizerError::InvalidConfig("objective returned no gradient".into()))?;
    let l_tv = tv_loss(&patch)?;
    if state.lambda_tv != 0.0 {
        let g_tv = tv_gradient(&patch)?;
        for (a, b) in grad_patch.data_mut().iter_mut().zip(g_tv.data()) {
            *a += state.lambda_tv * b;
        }
    }
    let g = generator.latent_gradient(&state.z, &grad_patch)?;
    if g.len() != state.z.len() {
        return Err(AdapterError::DimensionMismatch {
            expected: state.z.len(),
            got: g.len(),
        }
        .into());
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(OptimizerError::NonFiniteGradient {
            iteration: state.iteration,
        });
    }

    let eta = state.eta;
    match state.update {
        UpdateRule::Sgd => {
            for (z, g) in state.z.iter_mut().zip(&g) {
                *z -= eta * g;
            }
        }
        UpdateRule::Momentum { beta } => {
            for ((z, v), g) in state.z.iter_mut().zip(state.first_moment.iter_mut()).zip(&g) {
                *v = beta * *v + g;
                *z -= eta * *v;
            }
        }
        UpdateRule::Adam { beta1, beta2, eps } => {
            let t = (state.iteration + 1) as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            for (((z, m), v), g) in state
                .z
                .iter_mut()
                .zip(state.first_moment.iter_mut())
                .zip(state.second_moment.iter_mut())
                .zip(&g)
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *z -= eta * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
    let record = LossRecord {
        iteration: state.iteration,
        l_det: eval.loss,
        l_tv,
        l_total: eval.loss + state.lambda_tv * l_tv,
        mean_stop_conf: eval.mean_confidence,
    };
    state.history.push(record);
    state.iteration += 1;
    Ok(StepOutcome { patch, record })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// Initialization labels, one optimization run each.
    pub inits: Vec<String>,
    pub iterations: usize,
    pub eta: f64,
    pub lambda_tv: f64,
    pub update: UpdateRule,
    pub placement: OverlayPlacement,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub minibatch_size: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            inits: vec!["peacock".into(), "dog".into(), "bear".into()],
            iterations: DEFAULT_ITERATIONS,
            eta: DEFAULT_LEARNING_RATE,
            lambda_tv: DEFAULT_LAMBDA_TV,
            update: UpdateRule::Sgd,
            placement: OverlayPlacement {
                slot: Slot::Center,
                size_fraction: 0.604,
            },
            seed: 0,
            checkpoint_every: CHECKPOINT_EVERY,
            minibatch_size: MINIBATCH_SIZE,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), OptimizerError> {
        let bad = |m: String| Err(OptimizerError::InvalidConfig(m));
        if self.inits.is_empty() {
            return bad("at least one initialization label is required".into());
        }
        if self.iterations == 0 {
            return bad("iterations must be positive".into());
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return bad(format!("learning rate {} must be positive", self.eta));
        }
        if !(self.lambda_tv.is_finite() && self.lambda_tv >= 0.0) {
            return bad(format!("lambda_tv {} must be non-negative", self.lambda_tv));
        }
        if self.minibatch_size == 0 {
            return bad("minibatch_size must be positive".into());
        }
        OverlayPlacement::new(self.placement.slot, self.placement.size_fraction)?;
        match self.update {
            UpdateRule::Sgd => {}
            UpdateRule::Momentum { beta } if (0.0..1.0).contains(&beta) => {}
            UpdateRule::Adam { beta1, beta2, eps }
                if (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0 => {}
            other => return bad(format!("invalid update rule parameters {other:?}")),
        }
        Ok(())
    }
}

/// A logged patch: its latent and mean STOP confidence on the whole
/// optimization set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub init: String,
    pub iteration: usize,
    pub confidence: f64,
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitRun {
    pub label: String,
    pub history: Vec<LossRecord>,
    pub best: CandidateRecord,
}

/// Resumable snapshot taken between steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: AttackConfig,
    pub init_index: usize,
    pub state: LatentState,
    pub init_best: Option<CandidateRecord>,
    pub finished: Vec<InitRun>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn parse(text: &str) -> Result<Self, OptimizerError> {
        serde_json::from_str(text).map_err(|e| OptimizerError::Serde(e.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub best: CandidateRecord,
    pub best_patch: Image,
    pub runs: Vec<InitRun>,
}

/// Hooks called while an attack runs. All default to no-ops.
pub trait AttackObserver {
    fn on_init_start(&mut self, _label: &str, _state: &LatentState) -> Result<(), OptimizerError> {
        Ok(())
    }

    fn on_step(&mut self, _label: &str, _record: &LossRecord, _patch: &Image) -> Result<(), OptimizerError> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _checkpoint: &Checkpoint) -> Result<(), OptimizerError> {
        Ok(())
    }
}

pub struct NoObserver;

impl AttackObserver for NoObserver {}

/// Multi-initialization attack over a fixed optimization set.
pub struct Attack<'a> {
    cfg: AttackConfig,
    scenes: &'a [Scene],
    detector: &'a dyn Detector,
    generator: &'a dyn Generator,
}

impl<'a> Attack<'a> {
    pub fn new(
        cfg: AttackConfig,
        scenes: &'a [Scene],
        detector: &'a dyn Detector,
        generator: &'a dyn Generator,
    ) -> Result<Self, OptimizerError> {
        cfg.validate()?;
        if scenes.is_empty() {
            return Err(OptimizerError::NoStopBoxes);
        }
        if !detector.supports_gradients() {
            return Err(OptimizerError::NoGradientSupport("detector"));
        }
        if !generator.supports_gradients() {
            return Err(OptimizerError::NoGradientSupport("generator"));
        }
        let (pw, ph) = generator.patch_size();
        if pw != ph {
            return Err(OptimizerError::NotSquare { width: pw, height: ph });
        }
        Ok(Self {
            cfg,
            scenes,
            detector,
            generator,
        })
    }

    pub fn config(&self) -> &AttackConfig {
        &self.cfg
    }

    fn fresh_state(&self, init_index: usize) -> LatentState {
        let z = self.generator.initial_latent(&self.cfg.inits[init_index], self.cfg.seed);
        LatentState::new(z, self.cfg.eta, self.cfg.lambda_tv, self.cfg.update)
    }

    /// Indices used at `iteration` of init `init_index`. Depends only on the
    /// seed and position, so a resumed run draws the same batches.
    pub fn batch(&self, init_index: usize, iteration: usize) -> Vec<usize> {
        let n = self.scenes.len();
        if n <= FULL_BATCH_LIMIT {
            return (0..n).collect();
        }
        let k = self.cfg.minibatch_size.min(n);
        let key = ((init_index as u64) << 32) | iteration as u64;
        let mut rng = rng_from_seed(derive_seed(self.cfg.seed, STREAM_MINIBATCH, key));
        let mut idx = sample(&mut rng, n, k).into_vec();
        idx.sort_unstable();
        idx
    }

    pub fn run(&self, observer: &mut dyn AttackObserver) -> Result<AttackOutcome, OptimizerError> {
        let state = self.fresh_state(0);
        self.drive(0, state, None, Vec::new(), observer, true)
    }

    pub fn resume(&self, checkpoint: Checkpoint, observer: &mut dyn AttackObserver) -> Result<AttackOutcome, OptimizerError> {
        if checkpoint.config != self.cfg {
            return Err(OptimizerError::CheckpointMismatch("configuration differs".into()));
        }
        if checkpoint.init_index >= self.cfg.inits.len()
            || checkpoint.state.iteration > self.cfg.iterations
            || checkpoint.state.history.len() != checkpoint.state.iteration
            || checkpoint.state.z.len() != self.generator.latent_dim()
        {
            return Err(OptimizerError::CheckpointMismatch("inconsistent state".into()));
        }
        self.drive(
            checkpoint.init_index,
            checkpoint.state,
            checkpoint.init_best,
            checkpoint.finished,
            observer,
            false,
        )
    }

    fn drive(
        &self,
        mut init_index: usize,
        mut state: LatentState,
        mut init_best: Option<CandidateRecord>,
        mut finished: Vec<InitRun>,
        observer: &mut dyn AttackObserver,
        mut announce: bool,
    ) -> Result<AttackOutcome, OptimizerError> {
        let objective = DetectionObjective::new(self.scenes, self.detector, self.cfg.placement);
        let everything: Vec<usize> = (0..self.scenes.len()).collect();
        let full_batch = self.scenes.len() <= FULL_BATCH_LIMIT;
        loop {
            let label = self.cfg.inits[init_index].clone();
            if announce {
                observer.on_init_start(&label, &state)?;
            }
            while state.iteration < self.cfg.iterations {
                let z_before = state.z.clone();
                let batch = self.batch(init_index, state.iteration);
                let outcome = step(&mut state, self.generator, &objective, &batch)?;
                let confidence = if full_batch {
                    outcome.record.mean_stop_conf
                } else {
                    let c = objective.evaluate(&outcome.patch, &everything, false)?.mean_confidence;
                    if let Some(r) = state.history.last_mut() {
                        r.mean_stop_conf = c;
                    }
                    c
                };
                let record = *state.history.last().expect("step pushed a record");
                observer.on_step(&label, &record, &outcome.patch)?;
                if init_best.as_ref().map_or(true, |b| confidence < b.confidence) {
                    init_best = Some(CandidateRecord {
                        init: label.clone(),
                        iteration: record.iteration,
                        confidence,
                        z: z_before,
                    });
                }
                let every = self.cfg.checkpoint_every;
                if every > 0 && state.iteration % every == 0 && state.iteration < self.cfg.iterations {
                    observer.on_checkpoint(&Checkpoint {
                        config: self.cfg.clone(),
                        init_index,
                        state: state.clone(),
                        init_best: init_best.clone(),
                        finished: finished.clone(),
                    })?;
                }
            }
            finished.push(InitRun {
                label,
                history: std::mem::take(&mut state.history),
                best: init_best.take().expect("at least one iteration ran"),
            });
            init_index += 1;
            if init_index == self.cfg.inits.len() {
                break;
            }
            state = self.fresh_state(init_index);
            announce = true;
            let every = self.cfg.checkpoint_every;
            if every > 0 {
                observer.on_checkpoint(&Checkpoint {
                    config: self.cfg.clone(),
                    init_index,
                    state: state.clone(),
                    init_best: None,
                    finished: finished.clone(),
                })?;
            }
        }
        // Runs are in init order and each run keeps its earliest minimum, so a
        // strict comparison breaks ties toward the earliest iteration, then
        // the first init.
        let mut best = finished[0].best.clone();
        for run in &finished[1..] {
            if run.best.confidence < best.confidence {
                best = run.best.clone();
            }
        }
        let best_patch = self.generator.generate(&best.z)?;
        Ok(AttackOutcome {
            best,
            best_patch,
            runs: finished,
        })
    }
}

/// Runs every initialization without observers.
pub fn optimize(
    cfg: AttackConfig,
    scenes: &[Scene],
    detector: &dyn Detector,
    generator: &dyn Generator,
) -> Result<AttackOutcome, OptimizerError> {
    Attack::new(cfg, scenes, detector, generator)?.run(&mut NoObserver)
}
