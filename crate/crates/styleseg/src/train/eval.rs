//! Operating-point selection and the style-by-cohort evaluation matrix.
//!
//! Thresholds are tuned per (conditioning style, cohort) on that cohort's
//! validation split only, never on test data; metrics are micro-averaged
//! over each cohort's test split (pixel and component tallies pooled
//! across samples).

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::metrics::{detection_counts, pr_auc, DetectionCounts, Mask, MetricReport};
use crate::model::Model;

use super::{predict_scores, Result, TrainError};

/// Lesions of at most this many pixels count as "small" for the
/// small-lesion detection metric.
pub const SMALL_LESION_MAX: usize = 10;

/// Threshold grid: 101 points, 0.00 to 1.00.
pub const THRESHOLD_GRID: usize = 101;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub value: f64,
    /// Set when the validation pool had no positive pixel and the default
    /// 0.5 was returned.
    pub degenerate: bool,
}

/// Pick the grid threshold maximizing pooled segmentation F1 under the
/// `score >= t` convention; ties break toward the lowest threshold.
pub fn select_threshold(scores: &[f64], labels: &[bool]) -> ThresholdChoice {
    assert_eq!(scores.len(), labels.len());
    let positives = labels.iter().filter(|&&b| b).count();
    if positives == 0 {
        return ThresholdChoice {
            value: 0.5,
            degenerate: true,
        };
    }
    let mut best = (0.0f64, -1.0f64); // (threshold, f1)
    for i in 0..THRESHOLD_GRID {
        let t = i as f64 / (THRESHOLD_GRID - 1) as f64;
        let mut tp = 0usize;
        let mut fp = 0usize;
        for (&s, &l) in scores.iter().zip(labels) {
            if s >= t {
                if l {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        let fn_ = positives - tp;
        let f1 = if 2 * tp + fp + fn_ == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
        };
        if f1 > best.1 {
            best = (t, f1);
        }
    }
    ThresholdChoice {
        value: best.0,
        degenerate: false,
    }
}

/// One (style, cohort) cell of the evaluation matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalCell {
    pub style: String,
    pub cohort: String,
    pub report: MetricReport,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalMatrix {
    pub cells: Vec<EvalCell>,
}

impl EvalMatrix {
    pub fn get(&self, style: &str, cohort: &str) -> Option<&MetricReport> {
        self.cells
            .iter()
            .find(|c| c.style == style && c.cohort == cohort)
            .map(|c| &c.report)
    }

    /// results.csv rows in (style, cohort) order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "style,cohort,threshold,dice,pr_auc,detection_f1,small_lesion_f1,components_pred,components_gt\n",
        );
        for c in &self.cells {
            let r = &c.report;
            let auc = r.pr_auc.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                c.style,
                c.cohort,
                r.threshold_used,
                r.dice,
                auc,
                r.detection_f1,
                r.small_lesion_f1,
                r.component_count_pred,
                r.component_count_gt
            ));
        }
        out
    }
}

/// Score a set of samples under one conditioning style and aggregate the
/// pooled metric report at the given threshold.
pub fn score_cohort(
    model: &Model,
    samples: &[&Sample],
    style: Option<&str>,
    threshold: f64,
    batch_size: usize,
) -> Result<MetricReport> {
    let scores = predict_scores(model, samples, style, batch_size)?;
    pooled_report(samples, &scores, threshold)
}

/// Micro-averaged metrics over samples: pixel tallies pooled for Dice and
/// PR-AUC, component tallies summed for the detection metrics.
pub fn pooled_report(
    samples: &[&Sample],
    scores: &[Vec<f64>],
    threshold: f64,
) -> Result<MetricReport> {
    let mut inter = 0usize;
    let mut total = 0usize;
    let mut det = DetectionCounts::default();
    let mut small = DetectionCounts::default();
    let mut pooled_scores = Vec::new();
    let mut pooled_labels = Vec::new();
    for (s, score) in samples.iter().zip(scores) {
        let (h, w) = (s.label.height(), s.label.width());
        let pred = Mask::threshold(score, h, w, threshold);
        for (p, g) in pred.bits().iter().zip(s.label.bits()) {
            inter += (*p && *g) as usize;
            total += *p as usize + *g as usize;
        }
        det.add(&detection_counts(&pred, &s.label, None)?);
        small.add(&detection_counts(&pred, &s.label, Some(SMALL_LESION_MAX))?);
        pooled_scores.extend_from_slice(score);
        pooled_labels.extend(s.label.bits().iter().copied());
    }
    let dice = if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    };
    let gt = Mask::from_bits(1, pooled_labels.len(), pooled_labels);
    let auc = pr_auc(&pooled_scores, &gt).map_err(TrainError::Metric)?;
    Ok(MetricReport {
        dice,
        pr_auc: auc,
        detection_f1: det.f1(),
        small_lesion_f1: small.f1(),
        threshold_used: threshold,
        component_count_pred: det.pred_components,
        component_count_gt: det.gt_components,
    })
}

/// Build the full (style x cohort) matrix. For every pair, the threshold
/// comes from the cohort's validation split scored under that style, and
/// the metrics from its test split.
pub fn evaluate_matrix(
    model: &Model,
    styles: &[String],
    cohorts: &[(String, Vec<&Sample>, Vec<&Sample>)], // (name, val, test)
    batch_size: usize,
) -> Result<EvalMatrix> {
    let mut matrix = EvalMatrix::default();
    for style in styles {
        let style_opt = if model.film().is_some() {
            None
        } else {
            Some(style.as_str())
        };
        for (cohort, val, test) in cohorts {
            let val_scores = predict_scores(model, val, style_opt, batch_size)?;
            let mut pool_scores = Vec::new();
            let mut pool_labels = Vec::new();
            for (s, sc) in val.iter().zip(&val_scores) {
                pool_scores.extend_from_slice(sc);
                pool_labels.extend(s.label.bits().iter().copied());
            }
            let threshold = select_threshold(&pool_scores, &pool_labels);
            let report = score_cohort(model, test, style_opt, threshold.value, batch_size)?;
            matrix.cells.push(EvalCell {
                style: style.clone(),
                cohort: cohort.clone(),
                report,
            });
        }
    }
    Ok(matrix)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_on_separated_scores_takes_lowest_winning_gridpoint() {
        // fg scores 0.9, bg 0.1: every t in (0.1, 0.9] is optimal; the tie
        // rule returns the lowest grid point above 0.1
        let scores = [0.9, 0.9, 0.1, 0.1];
        let labels = [true, true, false, false];
        let choice = select_threshold(&scores, &labels);
        assert!(!choice.degenerate);
        assert!((choice.value - 0.11).abs() < 1e-12, "got {}", choice.value);
    }

    #[test]
    fn threshold_constant_scores_returns_lowest_max() {
        let scores = [0.4; 6];
        let labels = [true, false, true, false, false, false];
        // every t <= 0.4 keeps all pixels positive (F1 = 2*2/(2*2+4) = 0.5),
        // t > 0.4 empties the prediction (F1 = 0); lowest maximizer is 0.0
        let choice = select_threshold(&scores, &labels);
        assert_eq!(choice.value, 0.0);
    }

    #[test]
    fn threshold_four_pixel_toy_first_reaches_f1_one_at_041() {
        let scores = [0.2, 0.4, 0.6, 0.8];
        let labels = [false, false, true, true];
        // exhaustive sweep oracle over the same grid
        let mut oracle_best = (0.0, -1.0);
        for i in 0..THRESHOLD_GRID {
            let t = i as f64 / 100.0;
            let tp = scores
                .iter()
                .zip(&labels)
                .filter(|(s, l)| **s >= t && **l)
                .count();
            let fp = scores
                .iter()
                .zip(&labels)
                .filter(|(s, l)| **s >= t && !**l)
                .count();
            let fn_ = 2 - tp;
            let f1 = if 2 * tp + fp + fn_ == 0 {
                0.0
            } else {
                2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
            };
            if f1 > oracle_best.1 {
                oracle_best = (t, f1);
            }
        }
        let choice = select_threshold(&scores, &labels);
        assert_eq!(choice.value, oracle_best.0);
        assert!((choice.value - 0.41).abs() < 1e-12);
    }

    #[test]
    fn empty_labels_fall_back_to_half_with_flag() {
        let choice = select_threshold(&[0.3, 0.7], &[false, false]);
        assert!(choice.degenerate);
        assert_eq!(choice.value, 0.5);
    }
}
