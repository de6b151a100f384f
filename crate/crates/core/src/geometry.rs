//! Axis-aligned boxes, IoU and the CIoU regression loss.
//!
//! Boxes are stored in center form `(cx, cy, w, h)`; the corner form is a
//! derived view. Gradients are always taken with respect to the center form.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Axis-aligned box in center form, in pixels.
///
/// Serializes as a corner-form `[x1, y1, x2, y2]` tuple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        debug_assert!(!(w < 0.0 || h < 0.0), "negative box extent");
        Self { cx, cy, w, h }
    }

    /// Builds a box from corners; reversed corners yield a zero extent.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        let w = (x2 - x1).max(0.0);
        let h = (y2 - y1).max(0.0);
        Self { cx: x1 + 0.5 * w, cy: y1 + 0.5 * h, w, h }
    }

    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        let [x1, y1, x2, y2] = self.corners();
        x >= x1 && x <= x2 && y >= y1 && y <= y2
    }

    /// Clips the box to `[0, width] x [0, height]`.
    pub fn clipped(&self, width: f64, height: f64) -> Self {
        let [x1, y1, x2, y2] = self.corners();
        Self::from_corners(
            x1.clamp(0.0, width),
            y1.clamp(0.0, height),
            x2.clamp(0.0, width),
            y2.clamp(0.0, height),
        )
    }
}

impl From<[f64; 4]> for BBox {
    fn from(c: [f64; 4]) -> Self {
        BBox::from_corners(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.corners()
    }
}

/// One decoded candidate: a box, its objectness and per-class scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub objectness: f64,
    pub class_scores: Vec<f64>,
    pub class_id: usize,
}

impl Detection {
    /// Creates a detection; `class_id` is the arg-max of `class_scores`
    /// (lowest index on ties).
    pub fn new(bbox: BBox, objectness: f64, class_scores: Vec<f64>) -> Self {
        let class_id = argmax(&class_scores);
        Self { bbox, objectness, class_scores, class_id }
    }

    /// Confidence score used for filtering and ranking: objectness times the
    /// best class probability.
    pub fn score(&self) -> f64 {
        self.objectness * self.class_scores.get(self.class_id).copied().unwrap_or(0.0)
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Intersection over union; zero when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

// Derivative of min(a, b) w.r.t. a, splitting ties evenly so that the
// identity configuration gets the symmetric subgradient.
#[inline]
fn dmin(a: f64, b: f64) -> f64 {
    if a < b {
        1.0
    } else if a == b {
        0.5
    } else {
        0.0
    }
}

#[inline]
fn dmax(a: f64, b: f64) -> f64 {
    dmin(b, a)
}

// Maps a gradient w.r.t. corners (x1, y1, x2, y2) to center form.
#[inline]
fn corners_to_center_grad(g: [f64; 4]) -> [f64; 4] {
    [g[0] + g[2], g[1] + g[3], 0.5 * (g[2] - g[0]), 0.5 * (g[3] - g[1])]
}

/// IoU together with its gradient w.r.t. `pred` in center form.
pub fn iou_with_grad(pred: &BBox, other: &BBox) -> (f64, [f64; 4]) {
    let (v, g) = iou_corner_grad(pred, other);
    (v, corners_to_center_grad(g))
}

fn iou_corner_grad(p: &BBox, o: &BBox) -> (f64, [f64; 4]) {
    let [px1, py1, px2, py2] = p.corners();
    let [ox1, oy1, ox2, oy2] = o.corners();
    let iw_raw = px2.min(ox2) - px1.max(ox1);
    let ih_raw = py2.min(oy2) - py1.max(oy1);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let pw = px2 - px1;
    let ph = py2 - py1;
    let union = pw * ph + o.area() - inter;
    if union <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    // d iw / d (px1, px2), d ih / d (py1, py2)
    let (diw_dx1, diw_dx2) = if iw_raw > 0.0 {
        (-dmax(px1, ox1), dmin(px2, ox2))
    } else {
        (0.0, 0.0)
    };
    let (dih_dy1, dih_dy2) = if ih_raw > 0.0 {
        (-dmax(py1, oy1), dmin(py2, oy2))
    } else {
        (0.0, 0.0)
    };
    let di = [diw_dx1 * ih, dih_dy1 * iw, diw_dx2 * ih, dih_dy2 * iw];
    let da = [-ph, -pw, ph, pw];
    let mut g = [0.0; 4];
    for k in 0..4 {
        let du = da[k] - di[k];
        g[k] = (di[k] * union - inter * du) / (union * union);
    }
    (inter / union, g)
}

/// Complete-IoU loss of `pred` against `gt` and its gradient w.r.t. `pred`
/// in center form.
///
/// `1 - IoU + rho^2 / c^2 + alpha * v`, with `rho` the center distance, `c`
/// the enclosing-box diagonal, `v` the aspect-ratio consistency term and
/// `alpha = v / (1 - IoU + v)`. The gradient includes the dependence of
/// `alpha` on the prediction.
pub fn ciou_loss(pred: &BBox, gt: &BBox) -> (f64, [f64; 4]) {
    let (iou_v, diou_c) = iou_corner_grad(pred, gt);
    let diou = corners_to_center_grad(diou_c);

    let [px1, py1, px2, py2] = pred.corners();
    let [gx1, gy1, gx2, gy2] = gt.corners();

    // Center distance.
    let dx = pred.cx - gt.cx;
    let dy = pred.cy - gt.cy;
    let rho2 = dx * dx + dy * dy;
    let drho2 = [2.0 * dx, 2.0 * dy, 0.0, 0.0];

    // Enclosing diagonal.
    let ew = px2.max(gx2) - px1.min(gx1);
    let eh = py2.max(gy2) - py1.min(gy1);
    let c2 = ew * ew + eh * eh;
    let dc2_corner = [
        -2.0 * ew * dmin(px1, gx1),
        -2.0 * eh * dmin(py1, gy1),
        2.0 * ew * dmax(px2, gx2),
        2.0 * eh * dmax(py2, gy2),
    ];
    let dc2 = corners_to_center_grad(dc2_corner);

    let (dist, ddist) = if c2 > 0.0 {
        let mut g = [0.0; 4];
        for k in 0..4 {
            g[k] = (drho2[k] * c2 - rho2 * dc2[k]) / (c2 * c2);
        }
        (rho2 / c2, g)
    } else {
        (0.0, [0.0; 4])
    };

    // Aspect-ratio term; atan2 keeps degenerate predictions finite.
    let k4 = 4.0 / (PI * PI);
    let angle_diff = gt.w.atan2(gt.h) - pred.w.atan2(pred.h);
    let v = k4 * angle_diff * angle_diff;
    let r2 = pred.w * pred.w + pred.h * pred.h;
    let dv = if r2 > 0.0 {
        // d atan2(w, h) = (h dw - w dh) / (w^2 + h^2)
        let s = -2.0 * k4 * angle_diff / r2;
        [0.0, 0.0, s * pred.h, -s * pred.w]
    } else {
        [0.0; 4]
    };

    let u = 1.0 - iou_v;
    let denom = u + v;
    let (av, dav) = if denom > 0.0 {
        let dv_coef = v * (2.0 * u + v) / (denom * denom);
        let du_coef = -(v * v) / (denom * denom);
        let mut g = [0.0; 4];
        for k in 0..4 {
            g[k] = dv_coef * dv[k] + du_coef * (-diou[k]);
        }
        (v * v / denom, g)
    } else {
        (0.0, [0.0; 4])
    };

    let loss = 1.0 - iou_v + dist + av;
    let mut grad = [0.0; 4];
    for k in 0..4 {
        grad[k] = -diou[k] + ddist[k] + dav[k];
    }
    (loss, grad)
}

/// Central finite-difference gradient of `f` at `b` (center form).
#[cfg(test)]
pub(crate) fn finite_diff_box(f: impl Fn(&BBox) -> f64, b: &BBox, step: f64) -> [f64; 4] {
    let base = [b.cx, b.cy, b.w, b.h];
    let mut g = [0.0; 4];
    for k in 0..4 {
        let mut hi = base;
        let mut lo = base;
        hi[k] += step;
        lo[k] -= step;
        let bh = BBox { cx: hi[0], cy: hi[1], w: hi[2], h: hi[3] };
        let bl = BBox { cx: lo[0], cy: lo[1], w: lo[2], h: lo[3] };
        g[k] = (f(&bh) - f(&bl)) / (2.0 * step);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn corner(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::from_corners(x1, y1, x2, y2)
    }

    // Direct evaluation of the CIoU formula from corner coordinates, with no
    // shared code paths.
    fn ciou_oracle(p: [f64; 4], g: [f64; 4]) -> f64 {
        let inter_w = (p[2].min(g[2]) - p[0].max(g[0])).max(0.0);
        let inter_h = (p[3].min(g[3]) - p[1].max(g[1])).max(0.0);
        let inter = inter_w * inter_h;
        let ap = (p[2] - p[0]) * (p[3] - p[1]);
        let ag = (g[2] - g[0]) * (g[3] - g[1]);
        let iou = inter / (ap + ag - inter);
        let pcx = (p[0] + p[2]) / 2.0;
        let pcy = (p[1] + p[3]) / 2.0;
        let gcx = (g[0] + g[2]) / 2.0;
        let gcy = (g[1] + g[3]) / 2.0;
        let rho2 = (pcx - gcx).powi(2) + (pcy - gcy).powi(2);
        let cw = p[2].max(g[2]) - p[0].min(g[0]);
        let ch = p[3].max(g[3]) - p[1].min(g[1]);
        let c2 = cw * cw + ch * ch;
        let at_g = ((g[2] - g[0]) / (g[3] - g[1])).atan();
        let at_p = ((p[2] - p[0]) / (p[3] - p[1])).atan();
        let v = 4.0 / (PI * PI) * (at_g - at_p).powi(2);
        let alpha = if v == 0.0 { 0.0 } else { v / (1.0 - iou + v) };
        1.0 - iou + rho2 / c2 + alpha * v
    }

    fn random_box(rng: &mut ChaCha8Rng) -> BBox {
        BBox::new(
            rng.random_range(0.0..20.0),
            rng.random_range(0.0..20.0),
            rng.random_range(0.5..10.0),
            rng.random_range(0.5..10.0),
        )
    }

    fn rel_close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn iou_examples() {
        let unit = corner(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&unit, &unit), 1.0);
        let a = corner(0.0, 0.0, 2.0, 2.0);
        let b = corner(1.0, 0.0, 3.0, 2.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
        let far = corner(5.0, 5.0, 6.0, 6.0);
        assert_eq!(iou(&unit, &far), 0.0);
    }

    #[test]
    fn degenerate_boxes_have_zero_iou() {
        let p = corner(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou(&p, &p), 0.0);
        let (v, g) = iou_with_grad(&p, &p);
        assert_eq!(v, 0.0);
        assert_eq!(g, [0.0; 4]);
    }

    #[test]
    fn corner_center_round_trip() {
        let b = BBox::new(3.25, -1.5, 4.0, 0.5);
        let [x1, y1, x2, y2] = b.corners();
        assert_eq!(BBox::from_corners(x1, y1, x2, y2), b);
    }

    #[test]
    fn ciou_identity_is_zero_with_zero_gradient() {
        let b = BBox::new(5.0, 7.0, 3.0, 2.0);
        let (loss, grad) = ciou_loss(&b, &b);
        assert!(loss.abs() < 1e-12);
        for g in grad {
            assert!(g.abs() < 1e-9, "{grad:?}");
        }
    }

    #[test]
    fn ciou_matches_direct_formula() {
        let p = [0.0, 0.0, 2.0, 2.0];
        let g = [1.0, 0.0, 3.0, 2.0];
        let expected = ciou_oracle(p, g);
        // 1 - 1/3 + 1/13
        assert!((expected - (1.0 - 1.0 / 3.0 + 1.0 / 13.0)).abs() < 1e-12);
        let (loss, _) = ciou_loss(&BBox::from(p), &BBox::from(g));
        assert!((loss - expected).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let a = random_box(&mut rng);
            let b = random_box(&mut rng);
            let (loss, _) = ciou_loss(&a, &b);
            assert!((loss - ciou_oracle(a.corners(), b.corners())).abs() < 1e-10);
        }
    }

    #[test]
    fn ciou_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut good = 0;
        let trials = 1000;
        for _ in 0..trials {
            let p = random_box(&mut rng);
            let g = random_box(&mut rng);
            let (_, grad) = ciou_loss(&p, &g);
            let fd = finite_diff_box(|b| ciou_loss(b, &g).0, &p, 1e-4);
            if (0..4).all(|k| rel_close(grad[k], fd[k], 1e-4) || (grad[k] - fd[k]).abs() < 1e-9) {
                good += 1;
            }
        }
        assert!(good as f64 >= 0.99 * trials as f64, "{good}/{trials}");
    }

    #[test]
    fn ciou_degenerate_prediction_is_finite() {
        let gt = BBox::new(5.0, 5.0, 4.0, 2.0);
        for p in [BBox::new(5.0, 5.0, 0.0, 3.0), BBox::new(1.0, 1.0, 0.0, 0.0)] {
            let (loss, grad) = ciou_loss(&p, &gt);
            assert!(loss.is_finite());
            assert!(grad.iter().all(|g| g.is_finite()));
        }
    }

    #[test]
    fn iou_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut good = 0;
        for _ in 0..500 {
            let p = random_box(&mut rng);
            let o = random_box(&mut rng);
            let (_, grad) = iou_with_grad(&p, &o);
            let fd = finite_diff_box(|b| iou(b, &o), &p, 1e-5);
            if (0..4).all(|k| rel_close(grad[k], fd[k], 1e-4) || (grad[k] - fd[k]).abs() < 1e-9) {
                good += 1;
            }
        }
        assert!(good >= 495, "{good}");
    }

    #[test]
    fn detection_score_and_class() {
        let d = Detection::new(BBox::new(0.0, 0.0, 1.0, 1.0), 0.9, vec![0.1, 0.8, 0.1]);
        assert_eq!(d.class_id, 1);
        assert!((d.score() - 0.72).abs() < 1e-12);
    }

    #[test]
    fn bbox_serializes_as_corners() {
        let b = BBox::from_corners(1.0, 2.0, 4.0, 8.0);
        let s = serde_json::to_string(&b).unwrap();
        assert_eq!(s, "[1.0,2.0,4.0,8.0]");
        let back: BBox = serde_json::from_str(&s).unwrap();
        assert_eq!(back, b);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.0..30.0f64, 0.0..30.0f64)
            .prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h))
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            let ba = iou(&b, &a);
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn iou_one_only_for_equal_boxes(a in arb_box(), b in arb_box()) {
            if a.area() > 0.0 {
                prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-9);
            }
            if (iou(&a, &b) - 1.0).abs() < 1e-12 {
                for (x, y) in a.corners().iter().zip(b.corners()) {
                    prop_assert!((x - y).abs() < 1e-6);
                }
            }
        }
    }
}
