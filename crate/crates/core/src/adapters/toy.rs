//! Desk-scale stand-ins for the attack/deployment detector and the patch
//! generator. Both have closed-form gradients.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{AdapterError, Capabilities, Detection, Detector, Generator, STOP_CLASS_ID};
use crate::camera::BBox;
use crate::raster::Image;
use crate::seed::rng_from_seed;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One pooled feature layer, an affine map and a sigmoid:
///
/// ```text
/// f_k  = mean over grid cell k of (r − (g + b) / 2)
/// conf = sigmoid(w · f + b)
/// ```
///
/// It always reports exactly one STOP detection with a fixed centred box.
#[derive(Debug, Clone)]
pub struct ToyDetector {
    width: usize,
    height: usize,
    grid: usize,
    weights: Vec<f64>,
    bias: f64,
    cell_x: Vec<usize>,
    cell_y: Vec<usize>,
    cell_counts: Vec<f64>,
}

impl ToyDetector {
    pub fn new(width: usize, height: usize, grid: usize, weights: Vec<f64>, bias: f64) -> Result<Self, AdapterError> {
        if grid == 0 || width < grid || height < grid {
            return Err(AdapterError::OutOfRange(format!(
                "grid {grid} does not fit a {width}x{height} input"
            )));
        }
        if weights.len() != grid * grid {
            return Err(AdapterError::DimensionMismatch {
                expected: grid * grid,
                got: weights.len(),
            });
        }
        let cell_x: Vec<usize> = (0..width).map(|x| x * grid / width).collect();
        let cell_y: Vec<usize> = (0..height).map(|y| y * grid / height).collect();
        let mut cell_counts = vec![0.0; grid * grid];
        for &cy in &cell_y {
            for &cx in &cell_x {
                cell_counts[cy * grid + cx] += 1.0;
            }
        }
        Ok(Self {
            width,
            height,
            grid,
            weights,
            bias,
            cell_x,
            cell_y,
            cell_counts,
        })
    }

    /// Logistic regression fit on labelled images (full-batch gradient
    /// descent with a small L2 penalty).
    pub fn fit(width: usize, height: usize, grid: usize, images: &[Image], positive: &[bool]) -> Result<Self, AdapterError> {
        assert_eq!(images.len(), positive.len());
        let mut det = Self::new(width, height, grid, vec![0.0; grid * grid], 0.0)?;
        let feats = images.iter().map(|img| det.features(img)).collect::<Result<Vec<_>, _>>()?;
        let n = feats.len().max(1) as f64;
        let (lr, l2) = (4.0, 1e-3);
        for _ in 0..3000 {
            let mut gw = vec![0.0; det.weights.len()];
            let mut gb = 0.0;
            for (f, &y) in feats.iter().zip(positive) {
                let err = sigmoid(det.logit(f)) - if y { 1.0 } else { 0.0 };
                for (g, v) in gw.iter_mut().zip(f) {
                    *g += err * v / n;
                }
                gb += err / n;
            }
            for (w, g) in det.weights.iter_mut().zip(&gw) {
                *w -= lr * (g + l2 * *w);
            }
            det.bias -= lr * gb;
        }
        Ok(det)
    }

    /// Fits on 50 seeded synthetic scenes, half of them with a STOP sign.
    pub fn train_synthetic(width: usize, height: usize, grid: usize, seed: u64) -> Result<Self, AdapterError> {
        let mut rng = rng_from_seed(seed);
        let mut images = Vec::with_capacity(50);
        let mut labels = Vec::with_capacity(50);
        for i in 0..50 {
            let with_sign = i % 2 == 0;
            images.push(synthetic_scene(width, height, with_sign, &mut rng).0);
            labels.push(with_sign);
        }
        Self::fit(width, height, grid, &images, &labels)
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    fn check(&self, image: &Image) -> Result<(), AdapterError> {
        if image.width() != self.width || image.height() != self.height || image.channels() != 3 {
            return Err(AdapterError::ResolutionMismatch {
                want_w: self.width,
                want_h: self.height,
                got_w: image.width(),
                got_h: image.height(),
            });
        }
        Ok(())
    }

    pub fn features(&self, image: &Image) -> Result<Vec<f64>, AdapterError> {
        self.check(image)?;
        let mut sums = vec![0.0; self.grid * self.grid];
        let data = image.data();
        for (y, &cy) in self.cell_y.iter().enumerate() {
            let row = y * self.width * 3;
            let base = cy * self.grid;
            for (x, &cx) in self.cell_x.iter().enumerate() {
                let i = row + x * 3;
                sums[base + cx] += data[i] - 0.5 * (data[i + 1] + data[i + 2]);
            }
        }
        for (s, n) in sums.iter_mut().zip(&self.cell_counts) {
            *s /= n;
        }
        Ok(sums)
    }

    fn logit(&self, features: &[f64]) -> f64 {
        self.weights.iter().zip(features).map(|(w, f)| w * f).sum::<f64>() + self.bias
    }

    fn confidence(&self, image: &Image) -> Result<f64, AdapterError> {
        Ok(sigmoid(self.logit(&self.features(image)?)))
    }
}

impl Detector for ToyDetector {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            supports_gradients: true,
            resolution: Some([self.width as u32, self.height as u32]),
            class_map: [(STOP_CLASS_ID, "stop".to_string())].into_iter().collect(),
            confidence_definition: "sigmoid of pooled red-dominance features".into(),
            reentrant: true,
        }
    }

    fn detect(&self, image: &Image) -> Result<Vec<Detection>, AdapterError> {
        let confidence = self.confidence(image)?;
        Ok(vec![Detection {
            bbox: BBox {
                class_id: STOP_CLASS_ID,
                cx: 0.5,
                cy: 0.5,
                w: 0.5,
                h: 0.5,
            },
            class_id: STOP_CLASS_ID,
            confidence,
        }])
    }

    fn stop_confidence(&self, image: &Image) -> Result<f64, AdapterError> {
        self.confidence(image)
    }

    fn supports_gradients(&self) -> bool {
        true
    }

    fn input_gradient(&self, image: &Image, upstream: f64) -> Result<Image, AdapterError> {
        let s = self.confidence(image)?;
        let g = upstream * s * (1.0 - s);
        let per_cell: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.cell_counts)
            .map(|(w, n)| g * w / n)
            .collect();
        let mut out = Image::new(self.width, self.height, 3);
        let data = out.data_mut();
        for (y, &cy) in self.cell_y.iter().enumerate() {
            let row = y * self.width * 3;
            for (x, &cx) in self.cell_x.iter().enumerate() {
                let c = per_cell[cy * self.grid + cx];
                let i = row + x * 3;
                data[i] = c;
                data[i + 1] = -0.5 * c;
                data[i + 2] = -0.5 * c;
            }
        }
        Ok(out)
    }
}

/// Whether a [`ToyGenerator`] squashes its output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyOutput {
    /// `reshape(B·z)`; Jacobian is exactly `B`. Output is unbounded.
    Linear,
    /// `sigmoid(B·z)`, always inside `[0, 1]`.
    Sigmoid,
}

/// Fixed-basis generator: a `(side·side·3) × latent_dim` matrix maps the
/// latent to patch pixels.
#[derive(Debug, Clone)]
pub struct ToyGenerator {
    side: usize,
    latent_dim: usize,
    // Row-major: row = output sample, column = latent coordinate.
    basis: Vec<f64>,
    output: ToyOutput,
}

impl ToyGenerator {
    pub fn new(side: usize, latent_dim: usize, basis: Vec<f64>, output: ToyOutput) -> Result<Self, AdapterError> {
        let expected = side * side * 3 * latent_dim;
        if basis.len() != expected {
            return Err(AdapterError::DimensionMismatch {
                expected,
                got: basis.len(),
            });
        }
        Ok(Self {
            side,
            latent_dim,
            basis,
            output,
        })
    }

    /// Linear generator whose basis is the identity, so the patch is the
    /// latent reshaped (`latent_dim = side·side·3`).
    pub fn identity(side: usize) -> Self {
        let n = side * side * 3;
        let mut basis = vec![0.0; n * n];
        for i in 0..n {
            basis[i * n + i] = 1.0;
        }
        Self {
            side,
            latent_dim: n,
            basis,
            output: ToyOutput::Linear,
        }
    }

    /// Seeded basis of low-frequency cosine modes with random per-channel
    /// gains, giving smooth colour fields.
    pub fn smooth(side: usize, latent_dim: usize, seed: u64, output: ToyOutput) -> Self {
        let mut rng = rng_from_seed(seed);
        let n = side * side * 3;
        let mut basis = vec![0.0; n * latent_dim];
        for k in 0..latent_dim {
            let fx = f64::from(rng.gen_range(0u8..=2));
            let fy = f64::from(rng.gen_range(0u8..=2));
            let px = rng.gen_range(0.0..std::f64::consts::PI);
            let py = rng.gen_range(0.0..std::f64::consts::PI);
            let gains: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
            for y in 0..side {
                let vy = (std::f64::consts::PI * fy * (y as f64 + 0.5) / side as f64 + py).cos();
                for x in 0..side {
                    let vx = (std::f64::consts::PI * fx * (x as f64 + 0.5) / side as f64 + px).cos();
                    for (c, g) in gains.iter().enumerate() {
                        let row = (y * side + x) * 3 + c;
                        basis[row * latent_dim + k] = g * vx * vy;
                    }
                }
            }
        }
        Self {
            side,
            latent_dim,
            basis,
            output,
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn output(&self) -> ToyOutput {
        self.output
    }

    fn check_latent(&self, z: &[f64]) -> Result<(), AdapterError> {
        if z.len() != self.latent_dim {
            return Err(AdapterError::DimensionMismatch {
                expected: self.latent_dim,
                got: z.len(),
            });
        }
        Ok(())
    }

    fn pre_activation(&self, z: &[f64]) -> Vec<f64> {
        self.basis
            .chunks_exact(self.latent_dim)
            .map(|row| row.iter().zip(z).map(|(b, v)| b * v).sum())
            .collect()
    }
}

impl Generator for ToyGenerator {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn patch_size(&self) -> (usize, usize) {
        (self.side, self.side)
    }

    fn generate(&self, z: &[f64]) -> Result<Image, AdapterError> {
        self.check_latent(z)?;
        let mut pre = self.pre_activation(z);
        if self.output == ToyOutput::Sigmoid {
            for v in &mut pre {
                *v = sigmoid(*v);
            }
            if let Some(bad) = pre.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(AdapterError::OutOfRange(format!("generated sample {bad}")));
            }
        }
        Ok(Image::from_vec(self.side, self.side, 3, pre))
    }

    fn supports_gradients(&self) -> bool {
        true
    }

    fn latent_gradient(&self, z: &[f64], upstream: &Image) -> Result<Vec<f64>, AdapterError> {
        self.check_latent(z)?;
        if upstream.width() != self.side || upstream.height() != self.side || upstream.channels() != 3 {
            return Err(AdapterError::ResolutionMismatch {
                want_w: self.side,
                want_h: self.side,
                got_w: upstream.width(),
                got_h: upstream.height(),
            });
        }
        let local: Vec<f64> = match self.output {
            ToyOutput::Linear => upstream.data().to_vec(),
            ToyOutput::Sigmoid => self
                .pre_activation(z)
                .iter()
                .zip(upstream.data())
                .map(|(&a, g)| {
                    let s = sigmoid(a);
                    g * s * (1.0 - s)
                })
                .collect(),
        };
        let mut grad = vec![0.0; self.latent_dim];
        for (row, g) in self.basis.chunks_exact(self.latent_dim).zip(&local) {
            if *g == 0.0 {
                continue;
            }
            for (acc, b) in grad.iter_mut().zip(row) {
                *acc += b * g;
            }
        }
        Ok(grad)
    }
}

const SIGN_RED: [f64; 3] = [0.78, 0.08, 0.10];
const SIGN_WHITE: [f64; 3] = [0.95, 0.95, 0.95];
const SIGN_SURROUND: [f64; 3] = [0.62, 0.64, 0.66];

/// Square STOP-like sign: red regular octagon with a white rim and a white
/// legend band, on a neutral grey surround.
pub fn synthetic_stop_sign(side: usize) -> Image {
    let r = side as f64 / 2.0;
    Image::from_fn(side, side, 3, |x, y, c| {
        let dx = ((x as f64 + 0.5) - r).abs() / r;
        let dy = ((y as f64 + 0.5) - r).abs() / r;
        // Regular octagon with unit inradius: |dx|, |dy| <= 1, |dx|+|dy| <= √2.
        let octagon = |s: f64| dx <= s && dy <= s && dx + dy <= s * std::f64::consts::SQRT_2;
        let colour = if !octagon(0.98) {
            SIGN_SURROUND
        } else if !octagon(0.88) {
            SIGN_WHITE
        } else if dy <= 0.16 && dx <= 0.62 && ((dx * 10.0) as i64) % 3 != 2 {
            SIGN_WHITE
        } else {
            SIGN_RED
        };
        colour[c]
    })
}

/// Random non-red backdrop with a few muted rectangles, optionally with a
/// STOP sign pasted at a random size and position. Returns the sign box.
pub fn synthetic_scene(width: usize, height: usize, with_sign: bool, rng: &mut impl Rng) -> (Image, Option<BBox>) {
    let base: f64 = rng.gen_range(0.25..0.75);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.05..0.05));
    let mut img = Image::solid_rgb(width, height, std::array::from_fn(|c| (base + tint[c]).clamp(0.0, 1.0)));
    for _ in 0..3 {
        let w = rng.gen_range(width / 8..=width / 3).max(1);
        let h = rng.gen_range(height / 8..=height / 3).max(1);
        let g: f64 = rng.gen_range(0.1..0.9);
        let hue: [f64; 3] = std::array::from_fn(|_| (g + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0));
        let rect = Image::solid_rgb(w, h, hue);
        let x = rng.gen_range(0..=width - w);
        let y = rng.gen_range(0..=height - h);
        img.blit(&rect, x as i64, y as i64);
    }
    if !with_sign {
        return (img, None);
    }
    let side = ((rng.gen_range(0.2..0.6) * height as f64).round() as usize).clamp(4, height.min(width));
    let x = rng.gen_range(0..=width - side);
    let y = rng.gen_range(0..=height - side);
    img.blit(&synthetic_stop_sign(side), x as i64, y as i64);
    let (w, h) = (width as f64, height as f64);
    let b = BBox {
        class_id: STOP_CLASS_ID,
        cx: (x as f64 + side as f64 / 2.0) / w,
        cy: (y as f64 + side as f64 / 2.0) / h,
        w: side as f64 / w,
        h: side as f64 / h,
    };
    (img, Some(b))
}
