//! Regression and classification losses with analytic gradients.
//!
//! All losses are evaluated in `f64` regardless of the network precision.

use crate::error::{Error, Result};
use crate::geometry::{intersection, BBox, Delta};

/// IoU floor inside the logarithm of [`iou_loss`].
pub const IOU_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    /// Per-stage regression weights.
    pub alpha: Vec<f64>,
    /// Regression/classification balance.
    pub lambda: f64,
}

impl LossWeights {
    pub fn uniform(stages: usize, lambda: f64) -> Self {
        Self {
            alpha: vec![1.0; stages],
            lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.is_empty()
            || self
                .alpha
                .iter()
                .chain([&self.lambda])
                .any(|v| !(*v > 0.0 && v.is_finite()))
        {
            return Err(Error::config(
                "loss_weights",
                "alpha and lambda must be positive",
            ));
        }
        Ok(())
    }
}

#[inline]
pub fn smooth_l1_scalar(z: f64) -> (f64, f64) {
    if z.abs() < 1.0 {
        (0.5 * z * z, z)
    } else {
        (z.abs() - 0.5, z.signum())
    }
}

/// Summed smooth-L1 over the four delta components; gradient w.r.t. `pred`.
pub fn smooth_l1(pred: &Delta, target: &Delta) -> (f64, [f64; 4]) {
    let (p, t) = (pred.to_array(), target.to_array());
    let mut loss = 0.0;
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let (l, g) = smooth_l1_scalar(p[k] - t[k]);
        loss += l;
        grad[k] = g;
    }
    (loss, grad)
}

/// `-ln(max(IoU, ε))`; gradient w.r.t. the predicted `(x, y, w, h)`.
pub fn iou_loss(pred: &BBox, gt: &BBox) -> (f64, [f64; 4]) {
    let inter = intersection(pred, gt);
    let union = pred.area() + gt.area() - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    if iou <= IOU_EPS {
        return (-IOU_EPS.ln(), [0.0; 4]);
    }
    let (px1, py1, px2, py2) = pred.corners();
    let (gx1, gy1, gx2, gy2) = gt.corners();
    let iw = px2.min(gx2) - px1.max(gx1);
    let ih = py2.min(gy2) - py1.max(gy1);

    let ind = |c: bool| if c { 1.0 } else { 0.0 };
    let (right_in, left_in) = (ind(px2 < gx2), ind(px1 > gx1));
    let (bottom_in, top_in) = (ind(py2 < gy2), ind(py1 > gy1));
    let d_iw = [right_in - left_in, 0.0, 0.5 * (right_in + left_in), 0.0];
    let d_ih = [0.0, bottom_in - top_in, 0.0, 0.5 * (bottom_in + top_in)];
    let d_area = [0.0, 0.0, pred.h, pred.w];

    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d_inter = d_iw[k] * ih + d_ih[k] * iw;
        let d_union = d_area[k] - d_inter;
        let d_iou = (d_inter * union - inter * d_union) / (union * union);
        grad[k] = -d_iou / iou;
    }
    (-iou.ln(), grad)
}

/// Binary cross-entropy on a logit; gradient w.r.t. the logit.
pub fn bce(logit: f64, label: bool) -> (f64, f64) {
    let y = if label { 1.0 } else { 0.0 };
    let loss = logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p();
    (loss, sigmoid(logit) - y)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `λ · Σ_τ α_τ · reg_τ + cls`
pub fn total_loss(stage_reg_losses: &[f64], cls_loss: f64, w: &LossWeights) -> Result<f64> {
    if stage_reg_losses.len() != w.alpha.len() {
        return Err(Error::config(
            "loss_weights.alpha",
            format!(
                "{} stage losses but {} weights",
                stage_reg_losses.len(),
                w.alpha.len()
            ),
        ));
    }
    let reg: f64 = stage_reg_losses
        .iter()
        .zip(&w.alpha)
        .map(|(l, a)| a * l)
        .sum();
    Ok(w.lambda * reg + cls_loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn smooth_l1_examples() {
        let t = Delta::new(0.1, 0.2, -0.3, 0.4);
        assert_eq!(smooth_l1(&t, &t), (0.0, [0.0; 4]));
        let (l, _) = smooth_l1(&Delta::new(0.5, 0.0, 0.0, 0.0), &Delta::ZERO);
        assert_eq!(l, 0.125);
        let (l, g) = smooth_l1(&Delta::new(2.0, 0.0, 0.0, 0.0), &Delta::ZERO);
        assert_eq!(l, 1.5);
        assert_eq!(g[0], 1.0);
    }

    #[test]
    fn smooth_l1_is_c1_at_the_knee() {
        let h = 1e-12;
        let (below, d_below) = smooth_l1_scalar(1.0 - h);
        let (at, d_at) = smooth_l1_scalar(1.0);
        assert!((below - at).abs() < 1e-9);
        assert!((d_below - d_at).abs() < 1e-9);
        let (neg, d_neg) = smooth_l1_scalar(-1.0);
        assert!((neg - 0.5).abs() < 1e-15 && d_neg == -1.0);
    }

    #[test]
    fn iou_loss_examples() {
        let u = b(0.0, 0.0, 1.0, 1.0);
        // pred = gt sits on a kink of the intersection, so only the value is pinned
        assert_eq!(iou_loss(&u, &u).0, 0.0);
        let (l, _) = iou_loss(&b(0.5, 0.0, 1.0, 1.0), &u);
        assert!((l - 3f64.ln()).abs() < 1e-12);
        let (l, g) = iou_loss(&b(10.0, 0.0, 1.0, 1.0), &u);
        assert_eq!(l, -IOU_EPS.ln());
        assert_eq!(g, [0.0; 4]);
    }

    #[test]
    fn iou_loss_positive_away_from_target() {
        let gt = b(3.0, 4.0, 5.0, 2.0);
        for pred in [
            b(3.1, 4.0, 5.0, 2.0),
            b(3.0, 4.0, 5.5, 2.0),
            b(3.0, 3.9, 5.0, 1.8),
        ] {
            assert!(iou_loss(&pred, &gt).0 > 0.0);
        }
    }

    #[test]
    fn bce_examples() {
        assert!((bce(0.0, true).0 - 2f64.ln()).abs() < 1e-15);
        assert!((bce(0.0, false).0 - 2f64.ln()).abs() < 1e-15);
        // direct formula -ln(sigmoid(5)) = ln(1 + e^-5)
        let want = (1.0 + (-5f64).exp()).ln();
        assert!((bce(5.0, true).0 - want).abs() < 1e-15);
        assert!((bce(5.0, true).1 - (sigmoid(5.0) - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn bce_is_stable_for_large_logits() {
        for z in [-50.0, -30.0, 30.0, 50.0] {
            for y in [false, true] {
                let (l, g) = bce(z, y);
                assert!(l.is_finite() && g.is_finite() && l >= 0.0);
            }
        }
        assert!((bce(-50.0, true).0 - 50.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(
            total_loss(&[0.0, 0.0], 0.0, &LossWeights::uniform(2, 10.0)).unwrap(),
            0.0
        );
        let v = total_loss(&[0.2, 0.3], 0.7, &LossWeights::uniform(2, 10.0)).unwrap();
        assert!((v - 5.7).abs() < 1e-12);
        assert_eq!(
            total_loss(&[0.4], 0.25, &LossWeights::uniform(1, 1.0)).unwrap(),
            0.65
        );
        assert!(total_loss(&[0.4], 0.25, &LossWeights::uniform(2, 1.0)).is_err());
    }
}
