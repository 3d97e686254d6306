//! Deterministic multi-cohort phantom datasets.
//!
//! A cohort is a set of samples whose images contain soft-edged elliptical
//! "lesions" over a noisy background; the cohort's annotation style is a
//! deterministic transform of the clean lesion field. Two cohorts built
//! from the same seed share images and base truths exactly and differ only
//! in labels, which is what the style-conditioning experiments need.

pub mod io;
pub mod style;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::Mask;
use crate::{Rng, Tensor};
pub use style::{apply_style, StyleTransform};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid cohort spec: {0}")]
    Validation(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad dataset container: {0}")]
    Format(String),
}

/// One phantom patient: a multi-channel image, its styled label, the
/// pre-style base truth, and the source it belongs to.
#[derive(Debug, Clone)]
pub struct Sample {
    /// `[C, H, W]`; channel 0 is anatomy/lesion signal, channel 1 carries
    /// the marker blob when `has_marker`.
    pub image: Tensor,
    pub label: Mask,
    pub base_truth: Mask,
    pub source: String,
    pub has_marker: bool,
}

/// Recipe for one cohort. Generation is pure in (spec, seed): equal specs
/// produce bit-identical cohorts.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSpec {
    pub source: String,
    pub n_samples: usize,
    pub style: StyleTransform,
    #[serde(default = "default_lesion_count")]
    pub lesion_count: (usize, usize),
    #[serde(default = "default_lesion_radius")]
    pub lesion_radius: (f64, f64),
    #[serde(default)]
    pub marker_prob: f64,
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
    pub seed: u64,
    #[serde(default = "default_extent")]
    pub height: usize,
    #[serde(default = "default_extent")]
    pub width: usize,
}

fn default_lesion_count() -> (usize, usize) {
    (2, 8)
}
fn default_lesion_radius() -> (f64, f64) {
    (1.0, 6.0)
}
fn default_noise_sigma() -> f64 {
    0.05
}
fn default_extent() -> usize {
    64
}

impl CohortSpec {
    pub fn new(source: &str, n_samples: usize, style: StyleTransform, seed: u64) -> Self {
        CohortSpec {
            source: source.to_string(),
            n_samples,
            style,
            lesion_count: default_lesion_count(),
            lesion_radius: default_lesion_radius(),
            marker_prob: 0.0,
            noise_sigma: default_noise_sigma(),
            seed,
            height: default_extent(),
            width: default_extent(),
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        let err = |msg: String| Err(DataError::Validation(msg));
        if self.n_samples == 0 {
            return err("n_samples must be >= 1".into());
        }
        if self.height % 8 != 0 || self.width % 8 != 0 {
            return err(format!(
                "image extent {}x{} must be divisible by 8",
                self.height, self.width
            ));
        }
        if self.lesion_count.0 > self.lesion_count.1 || self.lesion_count.0 == 0 {
            return err(format!("bad lesion count range {:?}", self.lesion_count));
        }
        if self.lesion_radius.0 <= 0.0 || self.lesion_radius.0 > self.lesion_radius.1 {
            return err(format!("bad lesion radius range {:?}", self.lesion_radius));
        }
        if self.lesion_radius.1 >= self.height.min(self.width) as f64 {
            return err(format!(
                "lesion radius {} does not fit a {}x{} image",
                self.lesion_radius.1, self.height, self.width
            ));
        }
        if !(0.0..=1.0).contains(&self.marker_prob) {
            return err(format!("marker_prob {} outside [0,1]", self.marker_prob));
        }
        if self.noise_sigma < 0.0 {
            return err(format!("noise_sigma {} negative", self.noise_sigma));
        }
        Ok(())
    }
}

/// Number of image channels every generated sample carries.
pub const IMAGE_CHANNELS: usize = 2;

const HALF_MAX: f64 = 0.5;

/// Generate every sample of a cohort. Each sample derives its own RNG
/// stream from (cohort seed, sample index), so generation order does not
/// matter.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Vec<Sample>, DataError> {
    spec.validate()?;
    let root = Rng::new(spec.seed).split("gen");
    (0..spec.n_samples)
        .map(|i| generate_sample(spec, root.split_index(i as u64)))
        .collect()
}

fn generate_sample(spec: &CohortSpec, mut rng: Rng) -> Result<Sample, DataError> {
    let (h, w) = (spec.height, spec.width);

    // clean lesion field: sum of Gaussian bumps whose half-max contour
    // sits at the drawn radius
    let count_span = spec.lesion_count.1 - spec.lesion_count.0 + 1;
    let n_lesions = spec.lesion_count.0 + rng.below(count_span);
    let mut field = vec![0.0f64; h * w];
    let half_max_dist = (2.0 * HALF_MAX.recip().ln()).sqrt(); // d/sigma at half max
    for _ in 0..n_lesions {
        let cy = rng.uniform_in(2.0, h as f64 - 2.0);
        let cx = rng.uniform_in(2.0, w as f64 - 2.0);
        let radius = rng.uniform_in(spec.lesion_radius.0, spec.lesion_radius.1);
        let sigma = radius / half_max_dist;
        let reach = (radius * 3.0).ceil() as isize;
        let (icy, icx) = (cy.round() as isize, cx.round() as isize);
        for y in (icy - reach).max(0)..(icy + reach + 1).min(h as isize) {
            for x in (icx - reach).max(0)..(icx + reach + 1).min(w as isize) {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                field[y as usize * w + x as usize] += (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    let base_truth = Mask::from_bits(h, w, field.iter().map(|&v| v >= HALF_MAX).collect());

    // smooth low-frequency background in the anatomy channel
    let (fy, fx) = (rng.uniform_in(0.5, 2.0), rng.uniform_in(0.5, 2.0));
    let phase = rng.uniform_in(0.0, std::f64::consts::TAU);
    let mut image = Tensor::zeros(&[IMAGE_CHANNELS, h, w]);
    for y in 0..h {
        for x in 0..w {
            let bg = 0.5
                + 0.5
                    * (std::f64::consts::TAU * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64)
                        + phase)
                        .sin();
            image.data_mut()[y * w + x] = 0.3 * bg + field[y * w + x];
        }
    }

    // marker channel: a bright blob anywhere, on marker samples only
    let has_marker = rng.bernoulli(spec.marker_prob);
    if has_marker {
        let my = rng.uniform_in(4.0, h as f64 - 4.0);
        let mx = rng.uniform_in(4.0, w as f64 - 4.0);
        let amp = rng.uniform_in(0.8, 1.2);
        let msigma = 2.0;
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 - my).powi(2) + (x as f64 - mx).powi(2);
                image.data_mut()[h * w + y * w + x] += amp * (-d2 / (2.0 * msigma * msigma)).exp();
            }
        }
    }

    // pixel noise goes on the image only; labels derive from the clean field
    for v in image.data_mut().iter_mut() {
        *v += rng.normal_scaled(0.0, spec.noise_sigma);
    }

    let label = apply_style(&base_truth, &image, &spec.style);
    Ok(Sample {
        image,
        label,
        base_truth,
        source: spec.source.clone(),
        has_marker,
    })
}

/// Index sets of a train/val/test split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Split a (possibly multi-cohort) sample list, stratified per source.
///
/// Counts per source are `floor(f_train * n)` / `floor(f_val * n)` / rest;
/// every split must receive at least one sample from every source.
pub fn split(
    samples: &[Sample],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<SplitIndices, DataError> {
    let (ft, fv, fe) = fractions;
    if (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(DataError::Validation(format!(
            "split fractions must sum to 1, got {fractions:?}"
        )));
    }
    let mut by_source: std::collections::BTreeMap<&str, Vec<usize>> = Default::default();
    for (i, s) in samples.iter().enumerate() {
        by_source.entry(&s.source).or_default().push(i);
    }
    let mut out = SplitIndices {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    let root = Rng::new(seed).split("split");
    for (source, mut indices) in by_source {
        let n = indices.len();
        let n_train = (ft * n as f64).floor() as usize;
        let n_val = (fv * n as f64).floor() as usize;
        let n_test = n - n_train - n_val;
        if n_train == 0 || n_val == 0 || n_test == 0 {
            return Err(DataError::Validation(format!(
                "source {source}: {n} samples cannot fill a {ft}/{fv}/{fe} split"
            )));
        }
        root.split(source).shuffle(&mut indices);
        out.train.extend(&indices[..n_train]);
        out.val.extend(&indices[n_train..n_train + n_val]);
        out.test.extend(&indices[n_train + n_val..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{connected_components, Connectivity};

    fn spec(style: StyleTransform) -> CohortSpec {
        CohortSpec {
            height: 32,
            width: 32,
            n_samples: 12,
            ..CohortSpec::new("t", 12, style, 77)
        }
    }

    #[test]
    fn identity_label_equals_base_truth() {
        for s in generate_cohort(&spec(StyleTransform::Identity)).unwrap() {
            assert_eq!(s.label, s.base_truth);
        }
    }

    #[test]
    fn remove_small_leaves_no_small_component() {
        let cohort = generate_cohort(&spec(StyleTransform::RemoveSmall { max_size: 10 })).unwrap();
        let mut removed_any = false;
        for s in &cohort {
            let comps = connected_components(&s.label, Connectivity::Eight);
            assert!(comps.sizes.iter().all(|&sz| sz > 10), "sizes {:?}", comps.sizes);
            removed_any |= s.label != s.base_truth;
        }
        assert!(removed_any, "expected at least one small lesion in the cohort");
    }

    #[test]
    fn dilate_if_marker_is_a_per_sample_superset() {
        let mut sp = spec(StyleTransform::DilateIfMarker { radius: 1 });
        sp.marker_prob = 0.5;
        let cohort = generate_cohort(&sp).unwrap();
        assert!(cohort.iter().any(|s| s.has_marker));
        assert!(cohort.iter().any(|s| !s.has_marker));
        for s in &cohort {
            if s.has_marker {
                for y in 0..s.label.height() {
                    for x in 0..s.label.width() {
                        if s.base_truth.get(y, x) {
                            assert!(s.label.get(y, x), "label must contain base truth");
                        }
                    }
                }
            } else {
                assert_eq!(s.label, s.base_truth);
            }
        }
    }

    #[test]
    fn generation_is_pure_in_the_seed() {
        let a = generate_cohort(&spec(StyleTransform::Identity)).unwrap();
        let b = generate_cohort(&spec(StyleTransform::Identity)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image.data(), y.image.data());
            assert_eq!(x.label, y.label);
            assert_eq!(x.has_marker, y.has_marker);
        }
    }

    #[test]
    fn cohorts_with_equal_seeds_share_base_truths() {
        let a = generate_cohort(&spec(StyleTransform::Identity)).unwrap();
        let b = generate_cohort(&CohortSpec {
            source: "other".into(),
            ..spec(StyleTransform::BoundaryGrow { radius: 1 })
        })
        .unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image.data(), y.image.data());
            assert_eq!(x.base_truth, y.base_truth);
        }
        assert!(a.iter().zip(&b).any(|(x, y)| x.label != y.label));
    }

    #[test]
    fn impossible_radius_is_a_validation_error() {
        let mut sp = spec(StyleTransform::Identity);
        sp.lesion_radius = (1.0, 40.0);
        assert!(matches!(
            generate_cohort(&sp),
            Err(DataError::Validation(_))
        ));
    }

    #[test]
    fn split_is_stratified_and_deterministic() {
        let mut samples = generate_cohort(&spec(StyleTransform::Identity)).unwrap();
        samples.truncate(10);
        let mut other = generate_cohort(&CohortSpec {
            source: "b".into(),
            ..spec(StyleTransform::Identity)
        })
        .unwrap();
        other.truncate(10);
        samples.extend(other);

        let s1 = split(&samples, (0.6, 0.2, 0.2), 5).unwrap();
        let s2 = split(&samples, (0.6, 0.2, 0.2), 5).unwrap();
        assert_eq!(s1, s2);
        // 6/2/2 per cohort
        assert_eq!(s1.train.len(), 12);
        assert_eq!(s1.val.len(), 4);
        assert_eq!(s1.test.len(), 4);
        for split_set in [&s1.train, &s1.val, &s1.test] {
            let per_b = split_set.iter().filter(|&&i| samples[i].source == "b").count();
            assert_eq!(per_b * 2, split_set.len());
        }
        // disjoint and exhaustive
        let mut all: Vec<usize> = s1
            .train
            .iter()
            .chain(&s1.val)
            .chain(&s1.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn split_too_small_errors() {
        let mut samples = generate_cohort(&spec(StyleTransform::Identity)).unwrap();
        samples.truncate(3);
        assert!(split(&samples, (0.6, 0.2, 0.2), 5).is_err());
    }
}
