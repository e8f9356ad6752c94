//! Positive / negative / ignore labelling of anchors and regression targets.

use crate::error::{Error, Result};
use crate::geometry::{encode, iou, BBox, Delta};

/// Floor applied to every target standard deviation.
pub const STD_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Metric {
    /// Anchor center inside the object's shrunken center region.
    AnchorFree,
    /// Anchor/object IoU above a threshold.
    AnchorBased,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AssignmentConfig {
    pub sigma_ctr: f64,
    pub sigma_ign: f64,
    pub iou_pos: f64,
    pub iou_neg: f64,
    pub metric: Metric,
}

impl AssignmentConfig {
    pub fn anchor_free(sigma_ctr: f64, sigma_ign: f64) -> Self {
        Self {
            sigma_ctr,
            sigma_ign,
            iou_pos: 0.7,
            iou_neg: 0.3,
            metric: Metric::AnchorFree,
        }
    }

    pub fn anchor_based(iou_pos: f64, iou_neg: f64) -> Self {
        Self {
            sigma_ctr: 0.2,
            sigma_ign: 0.5,
            iou_pos,
            iou_neg,
            metric: Metric::AnchorBased,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_ctr > 0.0 && self.sigma_ctr <= self.sigma_ign && self.sigma_ign <= 1.0) {
            return Err(Error::config(
                "sigma_ctr/sigma_ign",
                format!(
                    "need 0 < sigma_ctr <= sigma_ign <= 1, got {} / {}",
                    self.sigma_ctr, self.sigma_ign
                ),
            ));
        }
        if !(self.iou_neg > 0.0 && self.iou_neg <= self.iou_pos && self.iou_pos < 1.0) {
            return Err(Error::config(
                "iou_pos/iou_neg",
                format!(
                    "need 0 < iou_neg <= iou_pos < 1, got {} / {}",
                    self.iou_neg, self.iou_pos
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Positive,
    Negative,
    Ignore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentResult {
    pub labels: Vec<Label>,
    pub matched_gt: Vec<Option<usize>>,
    /// Raw `encode(anchor, gt)` for positives, `None` elsewhere.
    pub targets: Vec<Option<Delta>>,
}

impl AssignmentResult {
    fn all_negative(n: usize) -> Self {
        Self {
            labels: vec![Label::Negative; n],
            matched_gt: vec![None; n],
            targets: vec![None; n],
        }
    }

    fn fill_targets(&mut self, anchors: &[BBox], gts: &[BBox]) {
        for (i, label) in self.labels.iter().enumerate() {
            self.targets[i] = match (label, self.matched_gt[i]) {
                (Label::Positive, Some(g)) => Some(encode(&anchors[i], &gts[g])),
                _ => None,
            };
        }
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == Label::Positive)
            .map(|(i, _)| i)
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|l| **l == label).count()
    }
}

/// Dispatches on `cfg.metric`.
pub fn assign(anchors: &[BBox], gts: &[BBox], cfg: &AssignmentConfig) -> AssignmentResult {
    match cfg.metric {
        Metric::AnchorFree => assign_anchor_free(anchors, gts, cfg),
        Metric::AnchorBased => assign_anchor_based(anchors, gts, cfg),
    }
}

/// Positive if the anchor center lies in some object's `sigma_ctr` region
/// (smallest such object wins), ignore if only inside a `sigma_ign` region.
pub fn assign_anchor_free(
    anchors: &[BBox],
    gts: &[BBox],
    cfg: &AssignmentConfig,
) -> AssignmentResult {
    let mut result = AssignmentResult::all_negative(anchors.len());
    if gts.is_empty() {
        return result;
    }
    for (i, a) in anchors.iter().enumerate() {
        let mut best: Option<usize> = None;
        let mut ignored = false;
        for (g, gt) in gts.iter().enumerate() {
            if gt.region_contains(cfg.sigma_ctr, a.x, a.y) {
                if best.is_none_or(|b| gt.area() < gts[b].area()) {
                    best = Some(g);
                }
            } else if gt.region_contains(cfg.sigma_ign, a.x, a.y) {
                ignored = true;
            }
        }
        if let Some(g) = best {
            result.labels[i] = Label::Positive;
            result.matched_gt[i] = Some(g);
        } else if ignored {
            result.labels[i] = Label::Ignore;
        }
    }
    result.fill_targets(anchors, gts);
    result
}

/// IoU thresholding plus the best anchor of every object forced positive.
pub fn assign_anchor_based(
    anchors: &[BBox],
    gts: &[BBox],
    cfg: &AssignmentConfig,
) -> AssignmentResult {
    let mut result = AssignmentResult::all_negative(anchors.len());
    if gts.is_empty() {
        return result;
    }
    let mut best_for_gt = vec![(0.0f64, None::<usize>); gts.len()];
    for (i, a) in anchors.iter().enumerate() {
        let mut max = (f64::NEG_INFINITY, 0usize);
        for (g, gt) in gts.iter().enumerate() {
            let v = iou(a, gt);
            if v > max.0 {
                max = (v, g);
            }
            if v > best_for_gt[g].0 {
                best_for_gt[g] = (v, Some(i));
            }
        }
        if max.0 > cfg.iou_pos {
            result.labels[i] = Label::Positive;
            result.matched_gt[i] = Some(max.1);
        } else if max.0 >= cfg.iou_neg {
            result.labels[i] = Label::Ignore;
        }
    }
    for (g, &(_, anchor)) in best_for_gt.iter().enumerate() {
        if let Some(i) = anchor {
            result.labels[i] = Label::Positive;
            result.matched_gt[i] = Some(g);
        }
    }
    result.fill_targets(anchors, gts);
    result
}

/// Componentwise mean and population standard deviation of regression targets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetStats {
    pub mean: Delta,
    pub std: Delta,
}

impl TargetStats {
    pub fn identity() -> Self {
        Self {
            mean: Delta::ZERO,
            std: Delta::new(1.0, 1.0, 1.0, 1.0),
        }
    }
}

pub fn compute_target_stats(samples: &[Delta]) -> Result<TargetStats> {
    if samples.len() < 2 {
        return Err(Error::Stats(format!(
            "need at least 2 samples, got {}",
            samples.len()
        )));
    }
    let n = samples.len() as f64;
    let mut mean = [0.0; 4];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s.to_array()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = [0.0; 4];
    for s in samples {
        for ((acc, v), m) in var.iter_mut().zip(s.to_array()).zip(mean) {
            *acc += (v - m) * (v - m);
        }
    }
    let std = var.map(|v| (v / n).sqrt().max(STD_FLOOR));
    if mean.iter().chain(&std).any(|v| !v.is_finite()) {
        return Err(Error::Stats("non-finite statistics".into()));
    }
    Ok(TargetStats {
        mean: Delta::from_array(mean),
        std: Delta::from_array(std),
    })
}

pub fn normalize_targets(t: &Delta, stats: &TargetStats) -> Delta {
    let (t, m, s) = (t.to_array(), stats.mean.to_array(), stats.std.to_array());
    Delta::from_array([0, 1, 2, 3].map(|k| (t[k] - m[k]) / s[k]))
}

pub fn denormalize_prediction(d: &Delta, stats: &TargetStats) -> Delta {
    let (d, m, s) = (d.to_array(), stats.mean.to_array(), stats.std.to_array());
    Delta::from_array([0, 1, 2, 3].map(|k| d[k] * s[k] + m[k]))
}
