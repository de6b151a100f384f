use serde::{Deserialize, Serialize};

use super::conv::{sigmoid, softplus};
use super::decode::{candidate_backward, candidate_view};
use super::network::RawObjective;
use super::{ArchConfig, GtObject, HeadMode, RawPrediction, NUM_SCALES};
use crate::geometry::{argmax, ciou_loss};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub cls: f64,
    pub ciou: f64,
    pub obj: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cls: 1.0, ciou: 1.0, obj: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub ciou: f64,
    pub obj: f64,
    /// Weighted sum of the three terms.
    pub total: f64,
}

/// Positive cell of each object: the cell containing its center at the scale
/// whose reference size (four strides) is closest to `sqrt(w h)` in log
/// space. If an earlier object
/// already holds that cell, the next closest scale is tried; `None` only when
/// every scale is taken.
const REF: f64 = 4.0;

pub fn assign(arch: &ArchConfig, objects: &[GtObject]) -> Vec<Option<usize>> {
    let mut taken = std::collections::HashSet::new();
    objects
        .iter()
        .map(|o| {
            let size = (o.bbox.w * o.bbox.h).sqrt().max(1e-9).ln();
            let mut scales: Vec<usize> = (0..NUM_SCALES).collect();
            scales.sort_by(|&a, &b| {
                let da = (size - (REF * arch.stride(a) as f64).ln()).abs();
                let db = (size - (REF * arch.stride(b) as f64).ln()).abs();
                da.total_cmp(&db).then(b.cmp(&a))
            });
            scales.into_iter().find_map(|scale| {
                let stride = arch.stride(scale) as f64;
                let g = arch.grid(scale);
                let gx = ((o.bbox.cx / stride).floor().max(0.0) as usize).min(g - 1);
                let gy = ((o.bbox.cy / stride).floor().max(0.0) as usize).min(g - 1);
                let idx = arch.scale_offset(scale) + gy * g + gx;
                taken.insert(idx).then_some(idx)
            })
        })
        .collect()
}

/// `-ln(1 - p_k)` for a softmax over `z`, with its gradient w.r.t. `z`.
fn neg_log_one_minus_softmax(z: &[f64], k: usize, p: &[f64]) -> (f64, Vec<f64>) {
    let others: Vec<f64> = z.iter().enumerate().filter(|&(j, _)| j != k).map(|(_, &v)| v).collect();
    let lse = |v: &[f64]| {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    let lse_all = lse(z);
    let lse_other = lse(&others);
    let value = lse_all - lse_other;
    let grad = (0..z.len())
        .map(|j| if j == k { p[k] } else { p[j] - (z[j] - lse_other).exp() })
        .collect();
    (value, grad)
}

/// Detection loss: objectness BCE over every candidate, class BCE and CIoU
/// over positive cells. Returns the per-term values and the gradient of the
/// weighted total w.r.t. the raw prediction.
pub fn detector_loss(
    arch: &ArchConfig,
    raw: &RawPrediction,
    objects: &[GtObject],
    weights: &LossWeights,
) -> (LossBreakdown, Vec<f64>) {
    let cells = arch.cells();
    let ch = arch.cell_channels();
    let k = arch.num_classes;
    let mut grad = vec![0.0; raw.data.len()];
    let mut out = LossBreakdown::default();

    let assignment = assign(arch, objects);
    let mut positive = vec![None; cells.len()];
    for (o, a) in objects.iter().zip(&assignment) {
        if let Some(i) = *a {
            positive[i] = Some(*o);
        }
    }

    for (i, cell) in cells.iter().enumerate() {
        let r = raw.candidate(i);
        let g = &mut grad[i * ch..(i + 1) * ch];
        let y = if positive[i].is_some() { 1.0 } else { 0.0 };
        // Objectness logit: its own channel, or the largest class logit.
        let obj_ch = match arch.head_mode {
            HeadMode::Objectness => 0,
            HeadMode::ClassOnly => 5 + argmax(&r[5..5 + k]),
        };
        let z = r[obj_ch];
        out.obj += softplus(z) - y * z;
        g[obj_ch] += weights.obj * (sigmoid(z) - y);

        let Some(gt) = positive[i] else { continue };
        let logits = &r[5..5 + k];
        match arch.head_mode {
            HeadMode::Objectness => {
                let view = candidate_view(arch, cell, r);
                let p = &view.probs;
                let lse = {
                    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
                };
                out.cls += lse - logits[gt.class_id];
                for j in 0..k {
                    g[5 + j] += weights.cls * (p[j] - if j == gt.class_id { 1.0 } else { 0.0 });
                }
                for c in (0..k).filter(|&c| c != gt.class_id) {
                    let (v, gz) = neg_log_one_minus_softmax(logits, c, p);
                    out.cls += v;
                    for j in 0..k {
                        g[5 + j] += weights.cls * gz[j];
                    }
                }
            }
            HeadMode::ClassOnly => {
                for (j, &zj) in logits.iter().enumerate() {
                    let yj = if j == gt.class_id { 1.0 } else { 0.0 };
                    out.cls += softplus(zj) - yj * zj;
                    g[5 + j] += weights.cls * (sigmoid(zj) - yj);
                }
            }
        }

        let view = candidate_view(arch, cell, r);
        let (l, db) = ciou_loss(&view.bbox, &gt.bbox);
        out.ciou += l;
        let db = db.map(|v| v * weights.ciou);
        candidate_backward(arch, cell, r, &view, 0.0, None, Some(db), g);
    }
    out.total = weights.cls * out.cls + weights.ciou * out.ciou + weights.obj * out.obj;
    (out, grad)
}

/// Which detection-loss term an input gradient is taken of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Obj,
    Cls,
    Ciou,
    Total,
}

/// A detection-loss term bound to one image's ground truth.
#[derive(Debug, Clone)]
pub struct LossSelector {
    pub term: LossTerm,
    pub objects: Vec<GtObject>,
    pub weights: LossWeights,
}

impl LossSelector {
    pub fn new(term: LossTerm, objects: Vec<GtObject>) -> Self {
        Self { term, objects, weights: LossWeights::default() }
    }
}

impl RawObjective for LossSelector {
    fn evaluate(&self, arch: &ArchConfig, raw: &RawPrediction) -> (f64, Vec<f64>) {
        let w = match self.term {
            LossTerm::Obj => LossWeights { cls: 0.0, ciou: 0.0, obj: 1.0 },
            LossTerm::Cls => LossWeights { cls: 1.0, ciou: 0.0, obj: 0.0 },
            LossTerm::Ciou => LossWeights { cls: 0.0, ciou: 1.0, obj: 0.0 },
            LossTerm::Total => self.weights,
        };
        let (b, g) = detector_loss(arch, raw, &self.objects, &w);
        let v = match self.term {
            LossTerm::Obj => b.obj,
            LossTerm::Cls => b.cls,
            LossTerm::Ciou => b.ciou,
            LossTerm::Total => b.total,
        };
        (v, g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unsquash(y: f64) -> f64 {
        y / (1.0 - y.abs())
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    fn random_objects(rng: &mut ChaCha8Rng, n: usize) -> Vec<GtObject> {
        (0..n)
            .map(|_| GtObject {
                bbox: BBox::new(rng.random_range(8.0..56.0), rng.random_range(8.0..56.0), rng.random_range(6.0..30.0), rng.random_range(6.0..30.0)),
                class_id: rng.random_range(0..3),
            })
            .collect()
    }

    #[test]
    fn assignment_picks_scale_by_size() {
        let arch = ArchConfig::default();
        let mk = |s: f64| GtObject { bbox: BBox::new(20.5, 20.5, s, s), class_id: 0 };
        let a = assign(&arch, &[mk(8.0), mk(16.0), mk(30.0)]);
        assert_eq!(a[0], Some(10 * 32 + 10));
        assert_eq!(a[1], Some(1024 + 5 * 16 + 5));
        assert_eq!(a[2], Some(1024 + 256 + 2 * 8 + 2));
        // Thresholds sit at the geometric means of the reference sizes.
        let t1 = (8.0f64 * 16.0).sqrt();
        assert!(assign(&arch, &[mk(t1 - 0.01)])[0].unwrap() < 1024);
        assert!(assign(&arch, &[mk(t1 + 0.01)])[0].unwrap() >= 1024);
        let t2 = (16.0f64 * 32.0).sqrt();
        assert!(assign(&arch, &[mk(t2 - 0.01)])[0].unwrap() < 1024 + 256);
        assert!(assign(&arch, &[mk(t2 + 0.01)])[0].unwrap() >= 1024 + 256);
    }

    #[test]
    fn occupied_cell_falls_back_to_next_scale() {
        let arch = ArchConfig::default();
        let mk = |cx: f64| GtObject { bbox: BBox::new(cx, 20.5, 14.0, 14.0), class_id: 0 };
        let a = assign(&arch, &[mk(16.5), mk(18.0), mk(18.5)]);
        assert_eq!(a[0], Some(1024 + 5 * 16 + 4));
        // Same stride-4 cell: 14 px is closer to 8 px (stride 2) than to
        // 32 px (stride 8) in log space.
        assert_eq!(a[1], Some(10 * 32 + 9));
        // Stride 4 and 2 cells both held: stride 8.
        assert_eq!(a[2], Some(1024 + 256 + 2 * 8 + 2));
        // Four objects on one point exhaust all scales.
        let same = assign(&arch, &[mk(9.0); 4]);
        assert_eq!(same.iter().filter(|c| c.is_none()).count(), 1);
    }

    #[test]
    fn half_objectness_positive_contributes_ln2() {
        let arch = ArchConfig::default();
        let obj = [GtObject { bbox: BBox::new(20.5, 20.5, 8.0, 8.0), class_id: 1 }];
        let idx = assign(&arch, &obj)[0].unwrap();
        // Every other cell very confidently negative.
        let mut raw = RawPrediction::zeros(&arch);
        for i in 0..raw.num_candidates() {
            raw.candidate_mut(i)[0] = if i == idx { 0.0 } else { -60.0 };
        }
        let (b, _) = detector_loss(&arch, &raw, &obj, &LossWeights::default());
        assert!((b.obj - 2f64.ln()).abs() < 1e-12, "{}", b.obj);
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        for mode in [HeadMode::Objectness, HeadMode::ClassOnly] {
            let arch = ArchConfig { head_mode: mode, ..Default::default() };
            let objs = [
                GtObject { bbox: BBox::new(20.5, 20.5, 8.0, 10.0), class_id: 2 },
                GtObject { bbox: BBox::new(44.0, 40.0, 28.0, 24.0), class_id: 0 },
            ];
            let asg = assign(&arch, &objs);
            let cells = arch.cells();
            let mut raw = RawPrediction::zeros(&arch);
            for i in 0..raw.num_candidates() {
                let r = raw.candidate_mut(i);
                r[0] = -60.0;
                for j in 0..3 {
                    r[5 + j] = -60.0;
                }
            }
            for (o, a) in objs.iter().zip(&asg) {
                let i = a.unwrap();
                let c = cells[i];
                let r = raw.candidate_mut(i);
                r[0] = 60.0;
                r[1] = logit(o.bbox.cx / c.stride - c.gx as f64);
                r[2] = logit(o.bbox.cy / c.stride - c.gy as f64);
                r[3] = unsquash((o.bbox.w.ln() - c.log_mid) / c.log_half);
                r[4] = unsquash((o.bbox.h.ln() - c.log_mid) / c.log_half);
                r[5 + o.class_id] = 60.0;
            }
            let (b, _) = detector_loss(&arch, &raw, &objs, &LossWeights::default());
            assert!(b.total.abs() < 1e-9, "{mode:?}: {b:?}");
        }
    }

    #[test]
    fn empty_image_has_only_negative_objectness() {
        let arch = ArchConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut raw = RawPrediction::zeros(&arch);
        raw.data.iter_mut().for_each(|v| *v = rng.random_range(-2.0..2.0));
        let (b, _) = detector_loss(&arch, &raw, &[], &LossWeights::default());
        assert_eq!(b.cls, 0.0);
        assert_eq!(b.ciou, 0.0);
        let want: f64 = (0..raw.num_candidates()).map(|i| -(1.0 - sigmoid(raw.candidate(i)[0])).ln()).sum();
        assert!((b.obj - want).abs() < 1e-9 * want);
        assert_eq!(b.total, b.obj);
    }

    #[test]
    fn total_is_unweighted_sum_by_default() {
        let arch = ArchConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let objs = random_objects(&mut rng, 4);
        let mut raw = RawPrediction::zeros(&arch);
        raw.data.iter_mut().for_each(|v| *v = rng.random_range(-2.0..2.0));
        let (b, _) = detector_loss(&arch, &raw, &objs, &LossWeights::default());
        assert_eq!(b.total, b.cls + b.ciou + b.obj);
    }

    #[test]
    fn raw_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for mode in [HeadMode::Objectness, HeadMode::ClassOnly] {
            let arch = ArchConfig { head_mode: mode, ..Default::default() };
            for trial in 0..3 {
                let objs = random_objects(&mut rng, 1 + trial);
                let mut raw = RawPrediction::zeros(&arch);
                raw.data.iter_mut().for_each(|v| *v = rng.random_range(-2.0..2.0));
                let w = LossWeights { cls: 1.0, ciou: 1.0, obj: 1.0 };
                let (_, g) = detector_loss(&arch, &raw, &objs, &w);
                // Every channel of the positive cells plus a random sample.
                let ch = arch.cell_channels();
                let mut idx: Vec<usize> = assign(&arch, &objs).into_iter().flatten().flat_map(|i| (0..ch).map(move |c| i * ch + c)).collect();
                idx.extend((0..200).map(|_| rng.random_range(0..raw.data.len())));
                for &j in &idx {
                    let h = 1e-6;
                    let mut a = raw.clone();
                    a.data[j] += h;
                    let mut b = raw.clone();
                    b.data[j] -= h;
                    let fd = (detector_loss(&arch, &a, &objs, &w).0.total - detector_loss(&arch, &b, &objs, &w).0.total) / (2.0 * h);
                    assert!((fd - g[j]).abs() <= 1e-4 * fd.abs().max(g[j].abs()).max(1e-2), "{mode:?} entry {j}: fd {fd} vs {}", g[j]);
                }
            }
        }
    }

    #[test]
    fn positive_objectness_bce_decreases_in_confidence() {
        let arch = ArchConfig::default();
        let objs = [GtObject { bbox: BBox::new(20.5, 20.5, 8.0, 8.0), class_id: 0 }];
        let i = assign(&arch, &objs)[0].unwrap();
        let mut last = f64::INFINITY;
        for z in [-5.0, -1.0, 0.0, 0.5, 3.0, 8.0] {
            let mut raw = RawPrediction::zeros(&arch);
            raw.candidate_mut(i)[0] = z;
            let (b, _) = detector_loss(&arch, &raw, &objs, &LossWeights::default());
            assert!(b.obj < last);
            last = b.obj;
        }
    }
}
