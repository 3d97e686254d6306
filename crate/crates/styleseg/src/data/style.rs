//! Annotation-style transforms: deterministic label-space functions that
//! encode a labeling protocol.
//!
//! Every transform maps (base label, image) to a binary mask of the same
//! shape. "Small" components are measured under 8-connectivity; discs are
//! Euclidean (`dx^2 + dy^2 <= r^2`), so a radius-1 disc is the 5-pixel
//! plus shape.

use serde::{Deserialize, Serialize};

use crate::metrics::{connected_components, Connectivity, Mask};
use crate::Tensor;

/// Channel index carrying the bright marker blob, when present.
pub const MARKER_CHANNEL: usize = 1;
/// A marker is "present" when the marker channel exceeds this anywhere.
pub const MARKER_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StyleTransform {
    /// Labels are the base truth untouched.
    Identity,
    /// Delete every 8-connected component of size `<= max_size` pixels.
    RemoveSmall { max_size: usize },
    /// Morphological dilation with a Euclidean disc.
    BoundaryGrow { radius: usize },
    /// Morphological erosion with a Euclidean disc.
    BoundaryShrink { radius: usize },
    /// Dilate iff the image's marker channel exceeds the fixed threshold
    /// anywhere; otherwise pass the base truth through.
    DilateIfMarker { radius: usize },
}

impl StyleTransform {
    /// Short stable name used in file manifests and result rows.
    pub fn label(&self) -> String {
        match self {
            StyleTransform::Identity => "identity".into(),
            StyleTransform::RemoveSmall { max_size } => format!("remove-small({max_size})"),
            StyleTransform::BoundaryGrow { radius } => format!("boundary-grow({radius})"),
            StyleTransform::BoundaryShrink { radius } => format!("boundary-shrink({radius})"),
            StyleTransform::DilateIfMarker { radius } => format!("dilate-if-marker({radius})"),
        }
    }
}

/// Offsets of the Euclidean disc of the given radius.
pub fn disc_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut offsets = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                offsets.push((dy, dx));
            }
        }
    }
    offsets
}

pub fn dilate(mask: &Mask, radius: usize) -> Mask {
    let (h, w) = (mask.height(), mask.width());
    let offsets = disc_offsets(radius);
    Mask::from_fn(h, w, |y, x| {
        offsets.iter().any(|&(dy, dx)| {
            let (ny, nx) = (y as isize + dy, x as isize + dx);
            ny >= 0
                && nx >= 0
                && ny < h as isize
                && nx < w as isize
                && mask.get(ny as usize, nx as usize)
        })
    })
}

/// Erosion; pixels whose disc pokes outside the image erode away
/// (out-of-bounds counts as background).
pub fn erode(mask: &Mask, radius: usize) -> Mask {
    let (h, w) = (mask.height(), mask.width());
    let offsets = disc_offsets(radius);
    Mask::from_fn(h, w, |y, x| {
        offsets.iter().all(|&(dy, dx)| {
            let (ny, nx) = (y as isize + dy, x as isize + dx);
            ny >= 0
                && nx >= 0
                && ny < h as isize
                && nx < w as isize
                && mask.get(ny as usize, nx as usize)
        })
    })
}

pub fn remove_small(mask: &Mask, max_size: usize) -> Mask {
    let comps = connected_components(mask, Connectivity::Eight);
    let (h, w) = (mask.height(), mask.width());
    Mask::from_fn(h, w, |y, x| {
        let label = comps.labels[y * w + x];
        label != 0 && comps.sizes[label as usize - 1] > max_size
    })
}

/// True iff the image's marker channel exceeds the threshold anywhere.
pub fn marker_present(image: &Tensor) -> bool {
    let shape = image.shape();
    debug_assert_eq!(shape.len(), 3, "expected [C,H,W] image");
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    assert!(
        c > MARKER_CHANNEL,
        "marker styles need an image with a marker channel"
    );
    image.data()[MARKER_CHANNEL * h * w..(MARKER_CHANNEL + 1) * h * w]
        .iter()
        .any(|&v| v > MARKER_THRESHOLD)
}

/// Apply an annotation style to a base label.
pub fn apply_style(base: &Mask, image: &Tensor, style: &StyleTransform) -> Mask {
    match style {
        StyleTransform::Identity => base.clone(),
        StyleTransform::RemoveSmall { max_size } => remove_small(base, *max_size),
        StyleTransform::BoundaryGrow { radius } => dilate(base, *radius),
        StyleTransform::BoundaryShrink { radius } => erode(base, *radius),
        StyleTransform::DilateIfMarker { radius } => {
            if marker_present(image) {
                dilate(base, *radius)
            } else {
                base.clone()
            }
        }
    }
}
