use serde::{Deserialize, Serialize};

use crate::camera::BBox;
use crate::raster::{Image, Resize};

use super::OptimizerError;

/// Anchor of the patch on the sign face.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Center,
    Upper,
    Lower,
}

impl Slot {
    pub const ALL: [Slot; 3] = [Slot::Center, Slot::Upper, Slot::Lower];

    /// Fraction of the free vertical space above the patch.
    fn vertical_anchor(self) -> f64 {
        match self {
            Slot::Center => 0.5,
            Slot::Upper => 0.15,
            Slot::Lower => 0.85,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Slot::Center => "center",
            Slot::Upper => "upper",
            Slot::Lower => "lower",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|slot| slot.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlayPlacement {
    pub slot: Slot,
    /// Patch side over the shorter sign-box side, in `(0, 1]`.
    pub size_fraction: f64,
}

impl OverlayPlacement {
    pub fn new(slot: Slot, size_fraction: f64) -> Result<Self, OptimizerError> {
        if !(size_fraction > 0.0 && size_fraction <= 1.0) {
            return Err(OptimizerError::InvalidConfig(format!(
                "size_fraction {size_fraction} outside (0, 1]"
            )));
        }
        Ok(Self { slot, size_fraction })
    }
}

/// Where a square patch lands in a scene, with the resize operator that maps
/// patch pixels onto it.
#[derive(Debug, Clone)]
pub struct OverlayRegion {
    pub x0: usize,
    pub y0: usize,
    pub side: usize,
    resize: Resize,
}

impl OverlayRegion {
    /// Lays out a `patch_side` square patch inside `sign_box` of a
    /// `scene_w × scene_h` frame.
    pub fn new(
        scene_w: usize,
        scene_h: usize,
        sign_box: &BBox,
        patch_side: usize,
        placement: &OverlayPlacement,
    ) -> Result<Self, OptimizerError> {
        sign_box.validate()?;
        let (x0, y0, x1, y1) = sign_box.to_pixels(scene_w, scene_h);
        let bx0 = (x0.round().max(0.0) as usize).min(scene_w);
        let by0 = (y0.round().max(0.0) as usize).min(scene_h);
        let bx1 = (x1.round().max(0.0) as usize).min(scene_w);
        let by1 = (y1.round().max(0.0) as usize).min(scene_h);
        let (bw, bh) = (bx1.saturating_sub(bx0), by1.saturating_sub(by0));
        let short = bw.min(bh);
        let side = ((placement.size_fraction * short as f64).round() as usize).min(short);
        if side < 2 {
            return Err(OptimizerError::BoxTooSmall { side });
        }
        let x = bx0 + (bw - side) / 2;
        let y = by0 + (placement.slot.vertical_anchor() * (bh - side) as f64).round() as usize;
        Ok(Self {
            x0: x,
            y0: y,
            side,
            resize: Resize::new(patch_side, patch_side, side, side),
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.side * self.side
    }

    /// Pastes the resized patch into `scene` in place.
    pub fn apply(&self, scene: &mut Image, patch: &Image) {
        let resized = self.resize.apply(patch);
        scene.blit(&resized, self.x0 as i64, self.y0 as i64);
    }

    /// Gradient w.r.t. patch pixels given a gradient w.r.t. the overlaid
    /// scene: the resize adjoint of the pasted window.
    pub fn adjoint(&self, grad_scene: &Image) -> Image {
        let window = grad_scene.crop(self.x0, self.y0, self.side, self.side);
        self.resize.adjoint(&window)
    }
}

/// Returns a copy of `scene` with `patch` resized into the sign box at the
/// given placement. Pixels outside the pasted window are untouched.
pub fn overlay_patch(
    scene: &Image,
    sign_box: &BBox,
    patch: &Image,
    placement: &OverlayPlacement,
) -> Result<Image, OptimizerError> {
    if patch.width() != patch.height() {
        return Err(OptimizerError::NotSquare {
            width: patch.width(),
            height: patch.height(),
        });
    }
    let region = OverlayRegion::new(scene.width(), scene.height(), sign_box, patch.width(), placement)?;
    let mut out = scene.clone();
    region.apply(&mut out, patch);
    Ok(out)
}
