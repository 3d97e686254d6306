//! Training-time augmentation: one random affine (rotation, translation,
//! isotropic scale) applied identically to image and label, plus a random
//! contrast gain on the image only.
//!
//! Images are resampled bilinearly, labels by nearest neighbour, both
//! through the inverse map with zero fill outside the frame.

use serde::{Deserialize, Serialize};

use crate::metrics::Mask;
use crate::rng::Rng;
use crate::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Rotation range in degrees, drawn from [-r, r].
    #[serde(default = "default_rotate")]
    pub rotate_deg: f64,
    /// Translation range in pixels per axis, drawn from [-t, t].
    #[serde(default = "default_translate")]
    pub translate_px: f64,
    /// Isotropic scale range.
    #[serde(default = "default_scale")]
    pub scale: (f64, f64),
    /// Multiplicative contrast gain range, image channels only.
    #[serde(default = "default_contrast")]
    pub contrast: (f64, f64),
}

fn default_rotate() -> f64 {
    10.0
}
fn default_translate() -> f64 {
    3.0
}
fn default_scale() -> (f64, f64) {
    (0.9, 1.1)
}
fn default_contrast() -> (f64, f64) {
    (0.8, 1.2)
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotate_deg: default_rotate(),
            translate_px: default_translate(),
            scale: default_scale(),
            contrast: default_contrast(),
        }
    }
}

/// One drawn transform. The forward map takes input pixel p to
/// `R(theta) * s * (p - c) + c + t`; sampling inverts it.
#[derive(Debug, Clone, Copy)]
pub struct DrawnAffine {
    pub theta: f64,
    pub scale: f64,
    pub translate: (f64, f64),
    pub gain: f64,
}

pub fn draw_transform(config: &AugmentConfig, rng: &mut Rng) -> DrawnAffine {
    let theta = rng.uniform_in(-config.rotate_deg, config.rotate_deg).to_radians();
    let scale = rng.uniform_in(config.scale.0, config.scale.1);
    let ty = rng.uniform_in(-config.translate_px, config.translate_px);
    let tx = rng.uniform_in(-config.translate_px, config.translate_px);
    let gain = rng.uniform_in(config.contrast.0, config.contrast.1);
    DrawnAffine {
        theta,
        scale,
        translate: (ty, tx),
        gain,
    }
}

/// Inverse-map an output pixel centre to input coordinates.
fn source_coords(t: &DrawnAffine, h: usize, w: usize, y: usize, x: usize) -> (f64, f64) {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let dy = y as f64 - cy - t.translate.0;
    let dx = x as f64 - cx - t.translate.1;
    let (sin, cos) = (-t.theta).sin_cos();
    let ry = cos * dy - sin * dx;
    let rx = sin * dy + cos * dx;
    (cy + ry / t.scale, cx + rx / t.scale)
}

/// Apply the geometric part plus gain to a [C,H,W] image.
pub fn warp_image(image: &Tensor, t: &DrawnAffine) -> Tensor {
    let shape = image.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = Tensor::zeros(shape);
    for ch in 0..c {
        let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out.data_mut()[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = source_coords(t, h, w, y, x);
                dst[y * w + x] = t.gain * bilinear(plane, h, w, sy, sx);
            }
        }
    }
    out
}

/// Apply the geometric part to a label mask (nearest neighbour, no gain).
pub fn warp_mask(mask: &Mask, t: &DrawnAffine) -> Mask {
    let (h, w) = (mask.height(), mask.width());
    Mask::from_fn(h, w, |y, x| {
        let (sy, sx) = source_coords(t, h, w, y, x);
        let (ny, nx) = (sy.round(), sx.round());
        ny >= 0.0
            && nx >= 0.0
            && ny < h as f64
            && nx < w as f64
            && mask.get(ny as usize, nx as usize)
    })
}

fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y0 = y.floor();
    let x0 = x.floor();
    let (fy, fx) = (y - y0, x - x0);
    let mut acc = 0.0;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let (py, px) = (y0 + dy, x0 + dx);
            if py >= 0.0 && px >= 0.0 && py < h as f64 && px < w as f64 {
                acc += wy * wx * plane[py as usize * w + px as usize];
            }
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_transform_is_identity() {
        let t = DrawnAffine {
            theta: 0.0,
            scale: 1.0,
            translate: (0.0, 0.0),
            gain: 1.0,
        };
        let image = Tensor::from_fn(&[1, 8, 8], |i| i as f64);
        assert_eq!(warp_image(&image, &t).data(), image.data());
        let mask = Mask::from_fn(8, 8, |y, x| (y * x) % 3 == 0);
        assert_eq!(warp_mask(&mask, &t), mask);
    }

    #[test]
    fn labels_follow_their_image_pixels() {
        // a delta image with the label on the same pixel: after any affine,
        // the warped label must sit on the warped image mass
        let mut rng = Rng::new(40);
        let config = AugmentConfig::default();
        for _ in 0..20 {
            let mut image = Tensor::zeros(&[1, 17, 17]);
            image.data_mut()[8 * 17 + 8] = 1.0; // centre delta survives rotation
            let mut mask = Mask::new(17, 17);
            mask.set(8, 8, true);
            let t = draw_transform(&config, &mut rng);
            let wi = warp_image(&image, &t);
            let wm = warp_mask(&mask, &t);
            assert_eq!(wm.count_ones(), 1, "delta label stays a single pixel");
            // locate label and image peak
            let (mut ly, mut lx) = (0usize, 0usize);
            for y in 0..17 {
                for x in 0..17 {
                    if wm.get(y, x) {
                        (ly, lx) = (y, x);
                    }
                }
            }
            let (mut py, mut px, mut best) = (0usize, 0usize, -1.0);
            for y in 0..17 {
                for x in 0..17 {
                    let v = wi.data()[y * 17 + x];
                    if v > best {
                        (py, px, best) = (y, x, v);
                    }
                }
            }
            assert!(
                (py as isize - ly as isize).abs() <= 1 && (px as isize - lx as isize).abs() <= 1,
                "label ({ly},{lx}) strayed from image mass ({py},{px})"
            );
        }
    }

    #[test]
    fn contrast_gain_scales_image_but_never_the_label() {
        let t = DrawnAffine {
            theta: 0.0,
            scale: 1.0,
            translate: (0.0, 0.0),
            gain: 1.2,
        };
        let image = Tensor::from_fn(&[2, 4, 4], |i| (i + 1) as f64);
        let warped = warp_image(&image, &t);
        for (a, b) in image.data().iter().zip(warped.data()) {
            assert!((b - 1.2 * a).abs() < 1e-12);
        }
        let mask = Mask::from_fn(4, 4, |y, _| y % 2 == 0);
        assert_eq!(warp_mask(&mask, &t), mask);
    }

    #[test]
    fn translation_moves_content() {
        let t = DrawnAffine {
            theta: 0.0,
            scale: 1.0,
            translate: (2.0, -1.0),
            gain: 1.0,
        };
        let mut mask = Mask::new(9, 9);
        mask.set(4, 4, true);
        let warped = warp_mask(&mask, &t);
        assert!(warped.get(6, 3));
        assert_eq!(warped.count_ones(), 1);
    }
}
