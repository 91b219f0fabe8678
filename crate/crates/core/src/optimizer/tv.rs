use crate::raster::Image;

use super::OptimizerError;

fn check(patch: &Image) -> Result<(), OptimizerError> {
    if patch.width() < 2 || patch.height() < 2 {
        return Err(OptimizerError::TooSmall {
            width: patch.width(),
            height: patch.height(),
        });
    }
    Ok(())
}

fn term_count(patch: &Image) -> f64 {
    let (w, h, c) = (patch.width(), patch.height(), patch.channels());
    (c * ((h - 1) * w + h * (w - 1))) as f64
}

/// Anisotropic L1 total variation, averaged over the number of difference
/// terms.
pub fn tv_loss(patch: &Image) -> Result<f64, OptimizerError> {
    check(patch)?;
    let (w, h, ch) = (patch.width(), patch.height(), patch.channels());
    let mut sum = 0.0;
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let v = patch.get(x, y, c);
                if y + 1 < h {
                    sum += (patch.get(x, y + 1, c) - v).abs();
                }
                if x + 1 < w {
                    sum += (patch.get(x + 1, y, c) - v).abs();
                }
            }
        }
    }
    Ok(sum / term_count(patch))
}

/// Subgradient of [`tv_loss`], with `sign(0) = 0`.
pub fn tv_gradient(patch: &Image) -> Result<Image, OptimizerError> {
    check(patch)?;
    let (w, h, ch) = (patch.width(), patch.height(), patch.channels());
    let scale = 1.0 / term_count(patch);
    let sign = |d: f64| {
        if d > 0.0 {
            scale
        } else if d < 0.0 {
            -scale
        } else {
            0.0
        }
    };
    let mut grad = Image::new(w, h, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let v = patch.get(x, y, c);
                if y + 1 < h {
                    let s = sign(patch.get(x, y + 1, c) - v);
                    let i = grad.index(x, y + 1, c);
                    grad.data_mut()[i] += s;
                    let i = grad.index(x, y, c);
                    grad.data_mut()[i] -= s;
                }
                if x + 1 < w {
                    let s = sign(patch.get(x + 1, y, c) - v);
                    let i = grad.index(x + 1, y, c);
                    grad.data_mut()[i] += s;
                    let i = grad.index(x, y, c);
                    grad.data_mut()[i] -= s;
                }
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn constant_patch_has_zero_tv() {
        assert_eq!(tv_loss(&Image::filled(5, 4, 3, 0.3)).unwrap(), 0.0);
    }

    #[test]
    fn checkerboard_2x2() {
        let p = Image::from_vec(2, 2, 1, vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(tv_loss(&p).unwrap(), 1.0);
    }

    #[test]
    fn too_small() {
        assert!(matches!(tv_loss(&Image::new(1, 5, 3)), Err(OptimizerError::TooSmall { .. })));
        assert!(tv_gradient(&Image::new(5, 1, 3)).is_err());
    }

    #[test]
    fn subgradient_matches_finite_differences() {
        let mut rng = crate::seed::rng_from_seed(17);
        let p = Image::from_fn(8, 8, 3, |_, _, _| rng.gen_range(0.0..1.0));
        let g = tv_gradient(&p).unwrap();
        let h = 1e-5;
        for i in 0..p.data().len() {
            let mut plus = p.clone();
            plus.data_mut()[i] += h;
            let mut minus = p.clone();
            minus.data_mut()[i] -= h;
            let fd = (tv_loss(&plus).unwrap() - tv_loss(&minus).unwrap()) / (2.0 * h);
            let a = g.data()[i];
            assert!((a - fd).abs() <= 1e-4 * a.abs().max(fd.abs()) + 1e-9, "sample {i}: {a} vs {fd}");
        }
    }
}
