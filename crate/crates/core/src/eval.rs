//! Average recall of proposal sets.
//!
//! Matching is gt-major: objects are visited in index order and each takes its
//! highest-IoU unmatched proposal among the top `k`, provided that IoU reaches
//! the threshold. Proposals are first put in a canonical order (score
//! descending, then box coordinates) so permuting equal-score proposals never
//! changes the result.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, ScoredBox};

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn ar_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

fn canonical_top_k(proposals: &[ScoredBox], k: usize) -> Vec<BBox> {
    let mut sorted: Vec<&ScoredBox> = proposals.iter().collect();
    sorted.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.bbox.x.total_cmp(&b.bbox.x))
            .then(a.bbox.y.total_cmp(&b.bbox.y))
            .then(a.bbox.w.total_cmp(&b.bbox.w))
            .then(a.bbox.h.total_cmp(&b.bbox.h))
    });
    sorted.into_iter().take(k).map(|s| s.bbox).collect()
}

/// For each object, the index of its matched proposal in `candidates`.
pub fn match_objects(candidates: &[BBox], gts: &[BBox], iou_thr: f64) -> Vec<Option<usize>> {
    let overlaps: Vec<Vec<f64>> = gts
        .iter()
        .map(|g| candidates.iter().map(|c| iou(g, c)).collect())
        .collect();
    match_with_overlaps(&overlaps, candidates.len(), iou_thr)
}

fn match_with_overlaps(
    overlaps: &[Vec<f64>],
    n_candidates: usize,
    iou_thr: f64,
) -> Vec<Option<usize>> {
    let mut taken = vec![false; n_candidates];
    overlaps
        .iter()
        .map(|row| {
            let mut best: Option<(usize, f64)> = None;
            for (j, &v) in row.iter().enumerate() {
                if !taken[j] && v >= iou_thr && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            best.map(|(j, _)| {
                taken[j] = true;
                j
            })
        })
        .collect()
}

fn check_inputs(proposals: &[Vec<ScoredBox>], gts: &[Vec<BBox>], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Eval("proposal budget k must be at least 1".into()));
    }
    if proposals.len() != gts.len() {
        return Err(Error::Eval(format!(
            "{} proposal sets for {} images",
            proposals.len(),
            gts.len()
        )));
    }
    if gts.iter().all(Vec::is_empty) {
        return Err(Error::Eval(
            "recall is undefined without ground-truth objects".into(),
        ));
    }
    Ok(())
}

/// `(matched, total)` object counts at every threshold, sharing one IoU matrix per image.
fn match_counts(
    proposals: &[Vec<ScoredBox>],
    gts: &[Vec<BBox>],
    k: usize,
    thresholds: &[f64],
) -> (Vec<usize>, usize) {
    let mut matched = vec![0usize; thresholds.len()];
    let mut total = 0;
    for (props, objects) in proposals.iter().zip(gts) {
        total += objects.len();
        if objects.is_empty() {
            continue;
        }
        let cands = canonical_top_k(props, k);
        let overlaps: Vec<Vec<f64>> = objects
            .iter()
            .map(|g| cands.iter().map(|c| iou(g, c)).collect())
            .collect();
        for (t, &thr) in thresholds.iter().enumerate() {
            matched[t] += match_with_overlaps(&overlaps, cands.len(), thr)
                .iter()
                .filter(|m| m.is_some())
                .count();
        }
    }
    (matched, total)
}

/// Fraction of all objects matched at `iou_thr` by the top-`k` proposals of their image.
pub fn recall_at(
    proposals: &[Vec<ScoredBox>],
    gts: &[Vec<BBox>],
    k: usize,
    iou_thr: f64,
) -> Result<f64> {
    check_inputs(proposals, gts, k)?;
    let (matched, total) = match_counts(proposals, gts, k, &[iou_thr]);
    Ok(matched[0] as f64 / total as f64)
}

/// Mean of [`recall_at`] over the ten thresholds 0.50 … 0.95.
pub fn average_recall(proposals: &[Vec<ScoredBox>], gts: &[Vec<BBox>], k: usize) -> Result<f64> {
    check_inputs(proposals, gts, k)?;
    let thr = ar_thresholds();
    let (matched, total) = match_counts(proposals, gts, k, &thr);
    Ok(matched
        .iter()
        .map(|&m| m as f64 / total as f64)
        .sum::<f64>()
        / thr.len() as f64)
}

/// Object-area cut points separating small / medium / large.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SizeBuckets {
    pub small_below: f64,
    pub large_from: f64,
}

impl SizeBuckets {
    /// Cuts at 1/9 and 1/3 of the largest possible object area.
    pub fn for_max_size(max_size: f64) -> Self {
        let max_area = max_size * max_size;
        Self {
            small_below: max_area / 9.0,
            large_from: max_area / 3.0,
        }
    }

    pub fn bucket(&self, area: f64) -> usize {
        if area < self.small_below {
            0
        } else if area < self.large_from {
            1
        } else {
            2
        }
    }
}

pub const BUCKET_NAMES: [&str; 3] = ["small", "medium", "large"];

#[derive(Clone, Debug, PartialEq)]
pub struct RecallReport {
    pub ar_at_k: BTreeMap<usize, f64>,
    /// `(k, threshold index) → recall`, thresholds from [`ar_thresholds`].
    pub recalls: BTreeMap<(usize, usize), f64>,
    /// AR at the largest budget, per size bucket; `None` when a bucket is empty.
    pub size_ar: [Option<f64>; 3],
    pub size_k: usize,
}

impl RecallReport {
    pub fn compute(
        proposals: &[Vec<ScoredBox>],
        gts: &[Vec<BBox>],
        ks: &[usize],
        buckets: SizeBuckets,
    ) -> Result<Self> {
        let thr = ar_thresholds();
        let mut ar_at_k = BTreeMap::new();
        let mut recalls = BTreeMap::new();
        for &k in ks {
            check_inputs(proposals, gts, k)?;
            let (matched, total) = match_counts(proposals, gts, k, &thr);
            let per: Vec<f64> = matched.iter().map(|&m| m as f64 / total as f64).collect();
            for (t, r) in per.iter().enumerate() {
                recalls.insert((k, t), *r);
            }
            ar_at_k.insert(k, per.iter().sum::<f64>() / thr.len() as f64);
        }
        let size_k = ks.iter().copied().max().unwrap_or(100);
        let mut size_ar = [None; 3];
        for (b, slot) in size_ar.iter_mut().enumerate() {
            let subset: Vec<Vec<BBox>> = gts
                .iter()
                .map(|g| {
                    g.iter()
                        .copied()
                        .filter(|o| buckets.bucket(o.area()) == b)
                        .collect()
                })
                .collect();
            if subset.iter().any(|g| !g.is_empty()) {
                *slot = Some(average_recall(proposals, &subset, size_k)?);
            }
        }
        let report = Self {
            ar_at_k,
            recalls,
            size_ar,
            size_k,
        };
        report.check_invariants()?;
        Ok(report)
    }

    /// Range, threshold monotonicity and budget monotonicity.
    pub fn check_invariants(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !self
            .ar_at_k
            .values()
            .chain(self.recalls.values())
            .all(|&v| in_unit(v))
        {
            return Err(Error::Eval("recall outside [0, 1]".into()));
        }
        for (&(k, t), &r) in &self.recalls {
            if t > 0 && r > self.recalls[&(k, t - 1)] + 1e-12 {
                return Err(Error::Eval(format!(
                    "recall increases with threshold at k={k}"
                )));
            }
        }
        let ars: Vec<f64> = self.ar_at_k.values().copied().collect();
        if ars.windows(2).any(|w| w[1] + 1e-12 < w[0]) {
            return Err(Error::Eval("AR decreases with a larger budget".into()));
        }
        Ok(())
    }

    /// Per-threshold rows, then a `(k, ar)` summary block, then the size block.
    pub fn to_csv(&self) -> String {
        let thr = ar_thresholds();
        let mut out = String::from("k,iou_threshold,recall\n");
        for (&(k, t), r) in &self.recalls {
            let _ = writeln!(out, "{k},{:.2},{r:.6}", thr[t]);
        }
        out.push_str("\nk,ar\n");
        for (k, ar) in &self.ar_at_k {
            let _ = writeln!(out, "{k},{ar:.6}");
        }
        out.push_str("\nsize,k,ar\n");
        for (name, ar) in BUCKET_NAMES.iter().zip(&self.size_ar) {
            match ar {
                Some(v) => {
                    let _ = writeln!(out, "{name},{},{v:.6}", self.size_k);
                }
                None => {
                    let _ = writeln!(out, "{name},{},nan", self.size_k);
                }
            }
        }
        out
    }
}
