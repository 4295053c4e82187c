//! Greedy detection matching and all-points average precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection};
use crate::tensor::Tensor;

/// Outcome of matching one image's detections against its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Aligned with the input detections.
    pub tp: Vec<bool>,
    pub gt_matched: Vec<bool>,
    pub scores: Vec<f64>,
}

impl MatchResult {
    pub fn n_tp(&self) -> usize {
        self.tp.iter().filter(|&&t| t).count()
    }
}

/// Descending score, ties by input order.
fn rank(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Each detection, in score order, takes the unmatched ground truth with the
/// highest IoU if that IoU reaches `iou_threshold`.
pub fn match_detections(dets: &[Detection], gts: &[BBox], iou_threshold: f64) -> MatchResult {
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let mut tp = vec![false; dets.len()];
    let mut gt_matched = vec![false; gts.len()];
    for i in rank(&scores) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gb) in gts.iter().enumerate() {
            if gt_matched[g] {
                continue;
            }
            let v = dets[i].bbox.iou(gb);
            if v >= iou_threshold && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            gt_matched[g] = true;
            tp[i] = true;
        }
    }
    MatchResult {
        tp,
        gt_matched,
        scores,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub ap: f64,
    pub n_gt: usize,
    pub n_det: usize,
    /// `[recall, precision]` after each ranked detection.
    pub pr_curve: Vec<[f64; 2]>,
}

/// Precision-recall points over detections pooled from every image.
pub fn pr_curve(results: &[MatchResult]) -> Result<(Vec<[f64; 2]>, usize)> {
    let n_gt: usize = results.iter().map(|r| r.gt_matched.len()).sum();
    if n_gt == 0 {
        return Err(Error::Data(
            "average precision is undefined without ground truth".into(),
        ));
    }
    let scores: Vec<f64> = results
        .iter()
        .flat_map(|r| r.scores.iter().copied())
        .collect();
    let flags: Vec<bool> = results.iter().flat_map(|r| r.tp.iter().copied()).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let curve = rank(&scores)
        .into_iter()
        .map(|i| {
            if flags[i] {
                tp += 1;
            } else {
                fp += 1;
            }
            [tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64]
        })
        .collect();
    Ok((curve, n_gt))
}

/// Area under the precision envelope (all-points interpolation).
pub fn average_precision(results: &[MatchResult]) -> Result<f64> {
    let (curve, _) = pr_curve(results)?;
    Ok(ap_from_curve(&curve))
}

fn ap_from_curve(curve: &[[f64; 2]]) -> f64 {
    let mut envelope: Vec<f64> = curve.iter().map(|p| p[1]).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, &e) in curve.iter().zip(&envelope) {
        ap += (p[0] - prev_r) * e;
        prev_r = p[0];
    }
    ap
}

pub fn evaluate(
    per_image: &[(Vec<Detection>, Vec<BBox>)],
    iou_threshold: f64,
) -> Result<EvalReport> {
    let results: Vec<MatchResult> = per_image
        .iter()
        .map(|(d, g)| match_detections(d, g, iou_threshold))
        .collect();
    let (pr, n_gt) = pr_curve(&results)?;
    Ok(EvalReport {
        iou_threshold,
        ap: ap_from_curve(&pr),
        n_gt,
        n_det: pr.len(),
        pr_curve: pr,
    })
}

/// Square plot of the precision-recall curve: recall to the right,
/// precision upwards, black on white.
pub fn render_pr_curve(report: &EvalReport, size: usize) -> Tensor<f64> {
    let size = size.max(2);
    let mut img = Tensor::full(&[3, size, size], 1.0);
    let last = (size - 1) as f64;
    let mut plot = |r: f64, p: f64| {
        let x = (r.clamp(0.0, 1.0) * last).round() as usize;
        let y = ((1.0 - p.clamp(0.0, 1.0)) * last).round() as usize;
        for c in 0..3 {
            img.set3(c, y, x, 0.0);
        }
    };
    let mut prev = [0.0, 1.0];
    for pt in &report.pr_curve {
        let steps = (((pt[0] - prev[0]).abs().max((pt[1] - prev[1]).abs())) * last)
            .ceil()
            .max(1.0) as usize;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            plot(
                prev[0] + t * (pt[0] - prev[0]),
                prev[1] + t * (pt[1] - prev[1]),
            );
        }
        prev = *pt;
    }
    img
}
