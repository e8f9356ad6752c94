//! Brute-force reference implementations and randomized comparison suites.
//!
//! Each `check_*` function draws `instances` random cases from `seed` and returns a
//! description of the first disagreement with the library.

#![allow(dead_code)]

use crpn_core::assign::{assign_anchor_based, assign_anchor_free, AssignmentConfig, Label};
use crpn_core::eval::{ar_thresholds, average_recall};
use crpn_core::geometry::{decode, encode, iou, nms_indices, BBox, ScoredBox, DELTA_LOG_CLAMP};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EXTENT: f64 = 64.0;
const CELL: f64 = 0.5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Box with corners on the half-pixel lattice inside the canvas.
pub fn lattice_box(rng: &mut impl Rng) -> BBox {
    let cells = (EXTENT / CELL) as i64;
    let mut axis = || {
        let a = rng.gen_range(0..cells);
        let b = rng.gen_range(0..cells);
        let (lo, hi) = (a.min(b), a.max(b) + 1);
        (lo as f64 * CELL, hi as f64 * CELL)
    };
    let (x1, x2) = axis();
    let (y1, y2) = axis();
    BBox::from_corners(x1, y1, x2, y2)
}

/// Box near `gt`: jittered center and size, so overlaps span the full range.
pub fn jittered(rng: &mut impl Rng, gt: &BBox) -> BBox {
    let (x1, y1, x2, y2) = gt.corners();
    let q = |v: f64| (v / CELL).round() * CELL;
    let j = |rng: &mut dyn rand::RngCore, s: f64| q(rng.gen_range(-0.4..0.4) * s);
    let nx1 = (x1 + j(rng, gt.w)).clamp(0.0, EXTENT - CELL);
    let ny1 = (y1 + j(rng, gt.h)).clamp(0.0, EXTENT - CELL);
    let nx2 = (x2 + j(rng, gt.w)).clamp(nx1 + CELL, EXTENT);
    let ny2 = (y2 + j(rng, gt.h)).clamp(ny1 + CELL, EXTENT);
    BBox::from_corners(nx1, ny1, nx2, ny2)
}

/// Scores drawn from a handful of values so ties are common.
pub fn scored(rng: &mut impl Rng, n: usize, gts: &[BBox]) -> Vec<ScoredBox> {
    (0..n)
        .map(|_| {
            let bbox = if !gts.is_empty() && rng.gen_bool(0.6) {
                {
                    let g = rng.gen_range(0..gts.len());
                    jittered(rng, &gts[g])
                }
            } else {
                lattice_box(rng)
            };
            ScoredBox {
                bbox,
                score: rng.gen_range(0..8) as f64 / 8.0,
            }
        })
        .collect()
}

/// Counts covered half-pixel cells; exact for lattice boxes.
pub fn iou_by_cells(a: &BBox, b: &BBox) -> f64 {
    let cells = (EXTENT / CELL) as usize;
    let covers = |bx: &BBox, i: usize, j: usize| {
        let (x1, y1, x2, y2) = bx.corners();
        let (cx, cy) = (i as f64 * CELL, j as f64 * CELL);
        x1 <= cx && cx + CELL <= x2 && y1 <= cy && cy + CELL <= y2
    };
    let (mut inter, mut union) = (0usize, 0usize);
    for j in 0..cells {
        for i in 0..cells {
            let (ia, ib) = (covers(a, i, j), covers(b, i, j));
            inter += (ia && ib) as usize;
            union += (ia || ib) as usize;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Repeatedly take the best undecided box and discard everything overlapping it.
pub fn nms_oracle(cands: &[ScoredBox], thr: f64) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..cands.len()).collect();
    let mut keep = Vec::new();
    while !alive.is_empty() {
        let mut best = 0;
        for p in 1..alive.len() {
            let (i, b) = (alive[p], alive[best]);
            if cands[i].score > cands[b].score || (cands[i].score == cands[b].score && i < b) {
                best = p;
            }
        }
        let top = alive.remove(best);
        keep.push(top);
        alive.retain(|&i| iou(&cands[i].bbox, &cands[top].bbox) <= thr);
    }
    keep
}

fn inside(gt: &BBox, sigma: f64, px: f64, py: f64) -> bool {
    let (x1, y1, x2, y2) = gt.corners();
    let (mx, my) = ((1.0 - sigma) * 0.5 * gt.w, (1.0 - sigma) * 0.5 * gt.h);
    px >= x1 + mx && px <= x2 - mx && py >= y1 + my && py <= y2 - my
}

pub fn af_oracle(
    anchors: &[BBox],
    gts: &[BBox],
    cfg: &AssignmentConfig,
) -> (Vec<Label>, Vec<Option<usize>>) {
    let mut labels = Vec::new();
    let mut matched = Vec::new();
    for a in anchors {
        let containing: Vec<usize> = (0..gts.len())
            .filter(|&g| inside(&gts[g], cfg.sigma_ctr, a.x, a.y))
            .collect();
        if let Some(&first) = containing.first() {
            let smallest = containing.iter().copied().fold(first, |b, g| {
                if gts[g].area() < gts[b].area() {
                    g
                } else {
                    b
                }
            });
            labels.push(Label::Positive);
            matched.push(Some(smallest));
        } else if gts.iter().any(|g| inside(g, cfg.sigma_ign, a.x, a.y)) {
            labels.push(Label::Ignore);
            matched.push(None);
        } else {
            labels.push(Label::Negative);
            matched.push(None);
        }
    }
    (labels, matched)
}

pub fn ab_oracle(
    anchors: &[BBox],
    gts: &[BBox],
    cfg: &AssignmentConfig,
) -> (Vec<Label>, Vec<Option<usize>>) {
    let m: Vec<Vec<f64>> = anchors
        .iter()
        .map(|a| gts.iter().map(|g| iou(a, g)).collect())
        .collect();
    let mut labels = vec![Label::Negative; anchors.len()];
    let mut matched = vec![None; anchors.len()];
    for i in 0..anchors.len() {
        let Some(best) = (0..gts.len()).reduce(|b, g| if m[i][g] > m[i][b] { g } else { b }) else {
            continue;
        };
        if m[i][best] > cfg.iou_pos {
            labels[i] = Label::Positive;
            matched[i] = Some(best);
        } else if m[i][best] >= cfg.iou_neg {
            labels[i] = Label::Ignore;
        }
    }
    for g in 0..gts.len() {
        let top = (0..anchors.len()).map(|i| m[i][g]).fold(0.0, f64::max);
        if top > 0.0 {
            let i = (0..anchors.len()).find(|&i| m[i][g] == top).unwrap();
            labels[i] = Label::Positive;
            matched[i] = Some(g);
        }
    }
    (labels, matched)
}

/// Per-threshold greedy matching over a freshly selected top-k.
pub fn ar_oracle(props: &[Vec<ScoredBox>], gts: &[Vec<BBox>], k: usize) -> f64 {
    let total: usize = gts.iter().map(Vec::len).sum();
    let mut sum = 0.0;
    for thr in ar_thresholds() {
        let mut hit = 0;
        for (p, g) in props.iter().zip(gts) {
            let mut pool = p.clone();
            let mut top = Vec::new();
            while top.len() < k && !pool.is_empty() {
                let mut b = 0;
                for i in 1..pool.len() {
                    let (x, y) = (&pool[i], &pool[b]);
                    let key = |s: &ScoredBox| (-s.score, s.bbox.x, s.bbox.y, s.bbox.w, s.bbox.h);
                    if key(x).partial_cmp(&key(y)) == Some(std::cmp::Ordering::Less) {
                        b = i;
                    }
                }
                top.push(pool.remove(b).bbox);
            }
            let mut used = vec![false; top.len()];
            for gt in g {
                let mut best: Option<usize> = None;
                for (j, c) in top.iter().enumerate() {
                    let v = iou(gt, c);
                    if !used[j] && v >= thr && best.map_or(true, |b| v > iou(gt, &top[b])) {
                        best = Some(j);
                    }
                }
                if let Some(j) = best {
                    used[j] = true;
                    hit += 1;
                }
            }
        }
        sum += hit as f64 / total as f64;
    }
    sum / ar_thresholds().len() as f64
}

pub fn check_iou(instances: usize, seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    for n in 0..instances {
        let a = lattice_box(&mut r);
        let b = if r.gen_bool(0.5) {
            jittered(&mut r, &a)
        } else {
            lattice_box(&mut r)
        };
        let (got, want) = (iou(&a, &b), iou_by_cells(&a, &b));
        if (got - want).abs() > 1e-12 || (iou(&b, &a) - got).abs() > 1e-15 {
            return Err(format!("iou case {n}: {a:?} {b:?}: {got} vs {want}"));
        }
    }
    Ok(())
}

pub fn check_nms(instances: usize, seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    for n in 0..instances {
        let gts: Vec<BBox> = (0..r.gen_range(1..6))
            .map(|_| lattice_box(&mut r))
            .collect();
        let n_cands = r.gen_range(0..=200);
        let cands = scored(&mut r, n_cands, &gts);
        let thr = [0.3, 0.5, 0.7, 0.8][n % 4];
        let (got, want) = (nms_indices(&cands, thr), nms_oracle(&cands, thr));
        if got != want {
            return Err(format!(
                "nms case {n} (thr {thr}, {} boxes): {got:?} vs {want:?}",
                cands.len()
            ));
        }
    }
    Ok(())
}

/// Scenes with up to `max_anchors` anchors and `max_gts` objects.
pub fn check_assigners(
    instances: usize,
    seed: u64,
    max_anchors: usize,
    max_gts: usize,
) -> Result<(), String> {
    let mut r = rng(seed);
    for n in 0..instances {
        let gts: Vec<BBox> = (0..r.gen_range(0..=max_gts))
            .map(|_| lattice_box(&mut r))
            .collect();
        let anchors: Vec<BBox> = (0..r.gen_range(1..=max_anchors))
            .map(|_| {
                if !gts.is_empty() && r.gen_bool(0.5) {
                    {
                        let g = r.gen_range(0..gts.len());
                        jittered(&mut r, &gts[g])
                    }
                } else {
                    lattice_box(&mut r)
                }
            })
            .collect();
        let af = AssignmentConfig::anchor_free(r.gen_range(0.1..0.5), 0.5 + r.gen_range(0.0..0.5));
        let res = assign_anchor_free(&anchors, &gts, &af);
        if (res.labels.clone(), res.matched_gt.clone()) != af_oracle(&anchors, &gts, &af) {
            return Err(format!("anchor-free case {n}: {anchors:?} / {gts:?}"));
        }
        let neg = r.gen_range(0.1..0.5);
        let ab = AssignmentConfig::anchor_based(neg + r.gen_range(0.0..0.4), neg);
        let res = assign_anchor_based(&anchors, &gts, &ab);
        if (res.labels.clone(), res.matched_gt.clone()) != ab_oracle(&anchors, &gts, &ab) {
            return Err(format!("anchor-based case {n}: {anchors:?} / {gts:?}"));
        }
        for (i, t) in res.targets.iter().enumerate() {
            if let (Some(t), Some(g)) = (t, res.matched_gt[i]) {
                if t.dw.abs() > DELTA_LOG_CLAMP || t.dh.abs() > DELTA_LOG_CLAMP {
                    continue;
                }
                let back = decode(&anchors[i], t);
                let err = (back.x - gts[g].x).abs()
                    + (back.y - gts[g].y).abs()
                    + (back.w - gts[g].w).abs()
                    + (back.h - gts[g].h).abs();
                if err > 1e-9 {
                    return Err(format!(
                        "target of anchor {i} in case {n} does not decode to its gt"
                    ));
                }
            }
        }
    }
    Ok(())
}

pub fn check_round_trip(instances: usize, seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    for n in 0..instances {
        let a = lattice_box(&mut r);
        let b = lattice_box(&mut r);
        let d = encode(&a, &b);
        let back = decode(&a, &d);
        // log-size offsets beyond the clamp saturate
        let size = |anchor: f64, target: f64, log: f64| {
            if log.abs() <= DELTA_LOG_CLAMP {
                target
            } else {
                anchor * (DELTA_LOG_CLAMP * log.signum()).exp()
            }
        };
        let (w, h) = (size(a.w, b.w, d.dw), size(a.h, b.h, d.dh));
        let err = [back.x - b.x, back.y - b.y, back.w - w, back.h - h]
            .iter()
            .map(|d| d.abs())
            .fold(0.0, f64::max);
        if err > 1e-6 * EXTENT {
            return Err(format!(
                "round trip case {n}: {a:?} -> {b:?} came back as {back:?}"
            ));
        }
    }
    Ok(())
}

pub fn check_ar(instances: usize, seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    for n in 0..instances {
        let images = r.gen_range(1..5);
        let gts: Vec<Vec<BBox>> = (0..images)
            .map(|_| {
                (0..r.gen_range(0..5))
                    .map(|_| lattice_box(&mut r))
                    .collect()
            })
            .collect();
        if gts.iter().all(Vec::is_empty) {
            continue;
        }
        let props: Vec<Vec<ScoredBox>> = gts
            .iter()
            .map(|g| {
                let n = r.gen_range(0..30);
                scored(&mut r, n, g)
            })
            .collect();
        for k in [1, 3, 10, 100] {
            let got = average_recall(&props, &gts, k).map_err(|e| e.to_string())?;
            let want = ar_oracle(&props, &gts, k);
            if (got - want).abs() > 1e-12 {
                return Err(format!("AR case {n}, k={k}: {got} vs {want}"));
            }
        }
    }
    Ok(())
}
