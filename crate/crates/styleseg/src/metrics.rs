//! Voxel-level and lesion-level evaluation: Dice, PR-AUC, connected
//! components, and component-level detection F1.
//!
//! Everything here is a pure function; the conventions the rest of the
//! crate relies on are pinned in one place:
//!
//! - Dice of two empty masks is 1.0.
//! - The PR curve is evaluated at every distinct score threshold
//!   (descending, prediction rule `score >= t`), and the area is the
//!   trapezoid over recall steps anchored at (recall 0, first precision).
//!   No precision envelope is applied.
//! - A ground-truth component counts as detected iff it overlaps predicted
//!   foreground in at least one pixel; a predicted component is a false
//!   positive iff it overlaps no ground-truth foreground.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("mask shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("scores length {0} does not match mask size {1}")]
    ScoreLength(usize, usize),
}

/// Binary 2-d mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize) -> Self {
        Mask {
            h,
            w,
            bits: vec![false; h * w],
        }
    }

    pub fn from_bits(h: usize, w: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), h * w);
        Mask { h, w, bits }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                bits.push(f(y, x));
            }
        }
        Mask { h, w, bits }
    }

    /// Threshold a score map with the `score >= t` convention.
    pub fn threshold(scores: &[f64], h: usize, w: usize, t: f64) -> Self {
        assert_eq!(scores.len(), h * w);
        Mask {
            h,
            w,
            bits: scores.iter().map(|&s| s >= t).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.w + x] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.h == other.h && self.w == other.w
    }
}

/// `2|P and G| / (|P|+|G|)`; both masks empty gives 1.0 by convention.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64, MetricError> {
    if !pred.same_shape(gt) {
        return Err(MetricError::ShapeMismatch(pred.h, pred.w, gt.h, gt.w));
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&p, &g) in pred.bits.iter().zip(&gt.bits) {
        inter += (p && g) as usize;
        total += p as usize + g as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Area under the exact precision-recall curve.
///
/// Returns `None` when the ground truth has no positive pixel (the curve
/// is undefined there).
pub fn pr_auc(scores: &[f64], gt: &Mask) -> Result<Option<f64>, MetricError> {
    if scores.len() != gt.len() {
        return Err(MetricError::ScoreLength(scores.len(), gt.len()));
    }
    let positives = gt.count_ones();
    if positives == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));

    let mut auc = 0.0;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut prev_precision = f64::NAN; // replaced by the first point
    let mut i = 0;
    while i < order.len() {
        // absorb the whole tie group: one curve point per distinct score
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if gt.bits[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        if prev_precision.is_nan() {
            prev_precision = precision; // anchor at (0, first precision)
        }
        auc += (recall - prev_recall) * (precision + prev_precision) / 2.0;
        prev_recall = recall;
        prev_precision = precision;
    }
    Ok(Some(auc))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

/// Connected-component labeling output. Labels are 1-based; 0 marks
/// background. Components are numbered in row-major discovery order, so
/// the labeling is deterministic.
#[derive(Debug, Clone)]
pub struct Components {
    pub labels: Vec<u32>,
    pub sizes: Vec<usize>,
    pub h: usize,
    pub w: usize,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }
}

/// Breadth-first flood labeling.
pub fn connected_components(mask: &Mask, connectivity: Connectivity) -> Components {
    let (h, w) = (mask.h, mask.w);
    let mut labels = vec![0u32; h * w];
    let mut sizes = Vec::new();
    let mut queue = Vec::new();
    let neighbours: &[(isize, isize)] = match connectivity {
        Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        Connectivity::Eight => &[
            (-1, -1),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ],
    };
    for start in 0..h * w {
        if !mask.bits[start] || labels[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        let mut size = 0usize;
        queue.clear();
        queue.push(start);
        labels[start] = label;
        while let Some(idx) = queue.pop() {
            size += 1;
            let (y, x) = (idx / w, idx % w);
            for &(dy, dx) in neighbours {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let nidx = ny as usize * w + nx as usize;
                if mask.bits[nidx] && labels[nidx] == 0 {
                    labels[nidx] = label;
                    queue.push(nidx);
                }
            }
        }
        sizes.push(size);
    }
    Components { labels, sizes, h, w }
}

/// Component-level detection tallies: (detected, missed, false positives).
///
/// `small_only` restricts the ground-truth components in scope, and the
/// predicted components eligible to count as false positives, to
/// components of size `<= max`.
pub fn detection_counts(
    pred: &Mask,
    gt: &Mask,
    small_only: Option<usize>,
) -> Result<DetectionCounts, MetricError> {
    if !pred.same_shape(gt) {
        return Err(MetricError::ShapeMismatch(pred.h, pred.w, gt.h, gt.w));
    }
    let gt_comps = connected_components(gt, Connectivity::Eight);
    let pred_comps = connected_components(pred, Connectivity::Eight);
    let in_scope = |size: usize| small_only.map_or(true, |max| size <= max);

    let mut counts = DetectionCounts::default();
    counts.gt_components = gt_comps.count();
    counts.pred_components = pred_comps.count();
    for (ci, &size) in gt_comps.sizes.iter().enumerate() {
        if !in_scope(size) {
            continue;
        }
        let label = ci as u32 + 1;
        let hit = gt_comps
            .labels
            .iter()
            .zip(&pred.bits)
            .any(|(&l, &p)| l == label && p);
        if hit {
            counts.tp += 1;
        } else {
            counts.missed += 1;
        }
    }
    for (ci, &size) in pred_comps.sizes.iter().enumerate() {
        if !in_scope(size) {
            continue;
        }
        let label = ci as u32 + 1;
        let overlaps_gt = pred_comps
            .labels
            .iter()
            .zip(&gt.bits)
            .any(|(&l, &g)| l == label && g);
        if !overlaps_gt {
            counts.fp += 1;
        }
    }
    Ok(counts)
}

/// Summable detection tallies (micro-averaging across samples).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DetectionCounts {
    pub tp: usize,
    pub fp: usize,
    pub missed: usize,
    pub gt_components: usize,
    pub pred_components: usize,
}

impl DetectionCounts {
    pub fn add(&mut self, other: &DetectionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.missed += other.missed;
        self.gt_components += other.gt_components;
        self.pred_components += other.pred_components;
    }

    /// `2TP / (2TP + FP + FN)`; 1.0 when nothing is in scope on either side.
    pub fn f1(&self) -> f64 {
        if self.tp + self.fp + self.missed == 0 {
            return 1.0;
        }
        2.0 * self.tp as f64 / (2.0 * self.tp as f64 + self.fp as f64 + self.missed as f64)
    }
}

/// Component-level F1 of a single mask pair.
pub fn detection_f1(
    pred: &Mask,
    gt: &Mask,
    small_only: Option<usize>,
) -> Result<f64, MetricError> {
    Ok(detection_counts(pred, gt, small_only)?.f1())
}

/// Everything the evaluation matrix records for one (style, cohort) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub dice: f64,
    pub pr_auc: Option<f64>,
    pub detection_f1: f64,
    pub small_lesion_f1: f64,
    pub threshold_used: f64,
    pub component_count_pred: usize,
    pub component_count_gt: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> Mask {
        let mut m = Mask::new(h, w);
        for &(y, x) in on {
            m.set(y, x, true);
        }
        m
    }

    #[test]
    fn dice_identical_disjoint_half() {
        let a = mask(3, 3, &[(0, 0), (1, 1), (2, 2)]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let b = mask(3, 3, &[(0, 1), (1, 2)]);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        // |P|=4, |G|=4, overlap 2 -> 2*2/(4+4) = 0.5
        let p = mask(4, 4, &[(0, 0), (0, 1), (0, 2), (0, 3)]);
        let g = mask(4, 4, &[(0, 2), (0, 3), (1, 0), (1, 1)]);
        assert_eq!(dice(&p, &g).unwrap(), 0.5);
        // both empty -> 1.0 by convention
        assert_eq!(dice(&Mask::new(2, 2), &Mask::new(2, 2)).unwrap(), 1.0);
    }

    #[test]
    fn pr_auc_perfect_separation_is_one() {
        let gt = mask(1, 4, &[(0, 0), (0, 1)]);
        let scores = [0.9, 0.8, 0.2, 0.1];
        assert!((pr_auc(&scores, &gt).unwrap().unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pr_auc_constant_scores_equals_prevalence() {
        let gt = mask(1, 5, &[(0, 0), (0, 3)]);
        let scores = [0.5; 5];
        let auc = pr_auc(&scores, &gt).unwrap().unwrap();
        assert!((auc - 0.4).abs() < 1e-15);
    }

    #[test]
    fn pr_auc_six_pixel_toy_matches_enumeration_oracle() {
        // scores {.9,.8,.7,.6,.5,.4}, gt {1,0,1,0,0,0}
        let gt = mask(1, 6, &[(0, 0), (0, 2)]);
        let scores = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4];
        let auc = pr_auc(&scores, &gt).unwrap().unwrap();
        let oracle = pr_auc_oracle(&scores, &gt).unwrap();
        assert!((auc - oracle).abs() < 1e-12);
        // frozen value from the enumeration oracle: 1/2 + 7/24 = 19/24
        assert!((auc - 19.0 / 24.0).abs() < 1e-15, "auc {auc}");
    }

    #[test]
    fn pr_auc_without_positives_is_undefined() {
        assert_eq!(pr_auc(&[0.1, 0.2], &Mask::new(1, 2)).unwrap(), None);
    }

    /// Exhaustive threshold-enumeration oracle: recompute TP/FP at every
    /// distinct threshold by scanning, then apply the documented area rule.
    pub fn pr_auc_oracle(scores: &[f64], gt: &Mask) -> Option<f64> {
        let positives = gt.count_ones();
        if positives == 0 {
            return None;
        }
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let mut points = Vec::new();
        for &t in &thresholds {
            let mut tp = 0;
            let mut fp = 0;
            for (i, &s) in scores.iter().enumerate() {
                if s >= t {
                    if gt.bits()[i] {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
            points.push((tp as f64 / positives as f64, tp as f64 / (tp + fp) as f64));
        }
        let mut auc = 0.0;
        let (mut pr, mut pp) = (0.0, points[0].1);
        for &(r, p) in &points {
            auc += (r - pr) * (p + pp) / 2.0;
            pr = r;
            pp = p;
        }
        Some(auc)
    }

    #[test]
    fn diagonal_pixels_connectivity() {
        let m = mask(3, 3, &[(0, 0), (1, 1)]);
        assert_eq!(connected_components(&m, Connectivity::Eight).count(), 1);
        assert_eq!(connected_components(&m, Connectivity::Four).count(), 2);
    }

    #[test]
    fn component_labels_are_row_major() {
        let m = mask(3, 4, &[(0, 3), (2, 0), (0, 1)]);
        let c = connected_components(&m, Connectivity::Eight);
        assert_eq!(c.labels[1], 1); // (0,1) discovered first
        assert_eq!(c.labels[3], 2); // then (0,3)
        assert_eq!(c.labels[8], 3); // then (2,0)
        assert_eq!(c.sizes, vec![1, 1, 1]);
    }

    /// Independent union-find oracle for component counting.
    pub fn union_find_count(mask: &Mask, connectivity: Connectivity) -> usize {
        let (h, w) = (mask.height(), mask.width());
        let mut parent: Vec<usize> = (0..h * w).collect();
        fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        let neigh: &[(isize, isize)] = match connectivity {
            Connectivity::Four => &[(0, 1), (1, 0)],
            Connectivity::Eight => &[(0, 1), (1, -1), (1, 0), (1, 1)],
        };
        for y in 0..h {
            for x in 0..w {
                if !mask.get(y, x) {
                    continue;
                }
                for &(dy, dx) in neigh {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    if mask.get(ny as usize, nx as usize) {
                        let a = find(&mut parent, y * w + x);
                        let b = find(&mut parent, ny as usize * w + nx as usize);
                        parent[a] = b;
                    }
                }
            }
        }
        let mut roots = std::collections::BTreeSet::new();
        for y in 0..h {
            for x in 0..w {
                if mask.get(y, x) {
                    let r = find(&mut parent, y * w + x);
                    roots.insert(r);
                }
            }
        }
        roots.len()
    }

    #[test]
    fn component_count_matches_union_find_oracle() {
        let mut rng = crate::Rng::new(31);
        for _ in 0..50 {
            let m = Mask::from_fn(16, 16, |_, _| rng.bernoulli(0.35));
            for conn in [Connectivity::Four, Connectivity::Eight] {
                let c = connected_components(&m, conn);
                assert_eq!(c.count(), union_find_count(&m, conn));
                assert_eq!(c.sizes.iter().sum::<usize>(), m.count_ones());
            }
        }
    }

    #[test]
    fn detection_f1_cases() {
        // pred == gt with 3 components -> 1.0
        let gt = mask(5, 9, &[(0, 0), (2, 3), (2, 4), (4, 8)]);
        assert_eq!(detection_f1(&gt, &gt, None).unwrap(), 1.0);

        // pred covers 1 of 2 gt lesions, no extra components -> F1 = 2/3
        let gt2 = mask(5, 9, &[(0, 0), (4, 8)]);
        let pred2 = mask(5, 9, &[(0, 0)]);
        let f1 = detection_f1(&pred2, &gt2, None).unwrap();
        assert!((f1 - 2.0 / 3.0).abs() < 1e-15);

        // empty gt conventions
        assert_eq!(detection_f1(&Mask::new(3, 3), &Mask::new(3, 3), None).unwrap(), 1.0);
        assert_eq!(
            detection_f1(&mask(3, 3, &[(0, 0)]), &Mask::new(3, 3), None).unwrap(),
            0.0
        );
    }

    #[test]
    fn small_only_removes_large_components_from_scope() {
        // one 5-px and one large gt lesion; pred hits only the large one
        let mut gt = Mask::new(12, 24);
        for x in 0..5 {
            gt.set(0, x, true); // 5-px small lesion
        }
        for y in 4..11 {
            for x in 10..20 {
                gt.set(y, x, true); // 70-px large lesion
            }
        }
        let mut pred = Mask::new(12, 24);
        for y in 4..11 {
            for x in 10..20 {
                pred.set(y, x, true);
            }
        }
        assert_eq!(detection_f1(&pred, &gt, Some(10)).unwrap(), 0.0);
        assert_eq!(detection_f1(&pred, &gt, None).unwrap(), 2.0 / 3.0);
    }
}
