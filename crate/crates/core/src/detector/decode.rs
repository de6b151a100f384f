use super::conv::sigmoid;
use super::{ArchConfig, CellInfo, HeadMode, RawPrediction};
use crate::geometry::{argmax, BBox, Detection};

/// Decoded quantities of one candidate, with the box left unclipped so it
/// stays differentiable.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateView {
    pub objectness: f64,
    pub probs: Vec<f64>,
    pub bbox: BBox,
}

impl CandidateView {
    pub fn score(&self) -> f64 {
        self.objectness * self.probs[argmax(&self.probs)]
    }
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Bounded squash for size offsets. Its slope decays polynomially, so an
/// offset pushed far out still receives a usable gradient.
fn squash(t: f64) -> f64 {
    t / (1.0 + t.abs())
}

fn squash_grad(t: f64) -> f64 {
    let d = 1.0 + t.abs();
    1.0 / (d * d)
}

pub(crate) fn decode_box(cell: &CellInfo, r: &[f64]) -> BBox {
    let cx = (cell.gx as f64 + sigmoid(r[1])) * cell.stride;
    let cy = (cell.gy as f64 + sigmoid(r[2])) * cell.stride;
    let w = (cell.log_mid + cell.log_half * squash(r[3])).exp();
    let h = (cell.log_mid + cell.log_half * squash(r[4])).exp();
    BBox::new(cx, cy, w, h)
}

pub(crate) fn candidate_view(arch: &ArchConfig, cell: &CellInfo, r: &[f64]) -> CandidateView {
    let logits = &r[5..5 + arch.num_classes];
    let (objectness, probs) = match arch.head_mode {
        HeadMode::Objectness => (sigmoid(r[0]), softmax(logits)),
        HeadMode::ClassOnly => {
            let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
            (probs[argmax(&probs)], probs)
        }
    };
    CandidateView { objectness, probs, bbox: decode_box(cell, r) }
}

/// Chains gradients w.r.t. decoded quantities (objectness, class
/// probabilities, unclipped box in center form) into `grad` w.r.t. the raw
/// channels of the candidate. Accumulates.
pub(crate) fn candidate_backward(
    arch: &ArchConfig,
    cell: &CellInfo,
    r: &[f64],
    view: &CandidateView,
    d_obj: f64,
    d_probs: Option<&[f64]>,
    d_box: Option<[f64; 4]>,
    grad: &mut [f64],
) {
    let k = arch.num_classes;
    match arch.head_mode {
        HeadMode::Objectness => {
            let s = view.objectness;
            grad[0] += d_obj * s * (1.0 - s);
            if let Some(dp) = d_probs {
                let dot: f64 = dp.iter().zip(&view.probs).map(|(a, b)| a * b).sum();
                for j in 0..k {
                    grad[5 + j] += view.probs[j] * (dp[j] - dot);
                }
            }
        }
        HeadMode::ClassOnly => {
            let top = argmax(&view.probs);
            for j in 0..k {
                let p = view.probs[j];
                let mut d = d_probs.map_or(0.0, |dp| dp[j]);
                if j == top {
                    d += d_obj;
                }
                grad[5 + j] += d * p * (1.0 - p);
            }
        }
    }
    if let Some(db) = d_box {
        let sx = sigmoid(r[1]);
        let sy = sigmoid(r[2]);

        grad[1] += db[0] * cell.stride * sx * (1.0 - sx);
        grad[2] += db[1] * cell.stride * sy * (1.0 - sy);
        grad[3] += db[2] * view.bbox.w * cell.log_half * squash_grad(r[3]);
        grad[4] += db[3] * view.bbox.h * cell.log_half * squash_grad(r[4]);
    }
}

/// One detection per cell, boxes clipped to the image.
pub fn decode(arch: &ArchConfig, raw: &RawPrediction) -> Vec<Detection> {
    let size = arch.image_size as f64;
    arch.cells()
        .iter()
        .enumerate()
        .map(|(i, cell)| {
            let v = candidate_view(arch, cell, raw.candidate(i));
            Detection::new(v.bbox.clipped(size, size), v.objectness, v.probs)
        })
        .collect()
}

/// Number of candidates whose score exceeds `conf_threshold`; the same rule
/// as the NMS confidence filter.
pub fn count_candidates(arch: &ArchConfig, raw: &RawPrediction, conf_threshold: f64) -> usize {
    arch.cells()
        .iter()
        .enumerate()
        .filter(|(i, cell)| candidate_view(arch, cell, raw.candidate(*i)).score() > conf_threshold)
        .count()
}
