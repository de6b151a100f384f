//! mAP50, precision/recall curves and latency/FPS reporting.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{count_candidates, decode, forward, DetectorParams, GtObject, Image};
use crate::error::{LabError, Result};
use crate::geometry::{iou, Detection};
use crate::latency::TwoTermModel;
use crate::nms::{confidence_filter, nms, NmsConfig};

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub class_id: usize,
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    /// `None` for classes with neither ground truth nor detections.
    pub per_class_ap: Vec<Option<f64>>,
    pub map50: f64,
    pub curves: Vec<PrCurve>,
}

/// Area under the precision envelope, integrated at every recall change.
pub fn average_precision(recall: &[f64], precision: &[f64]) -> f64 {
    let mut mrec = Vec::with_capacity(recall.len() + 2);
    let mut mpre = Vec::with_capacity(recall.len() + 2);
    mrec.push(0.0);
    mpre.push(0.0);
    mrec.extend_from_slice(recall);
    mpre.extend_from_slice(precision);
    mrec.push(1.0);
    mpre.push(0.0);
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    (1..mrec.len()).map(|i| (mrec[i] - mrec[i - 1]) * mpre[i]).sum()
}

/// mAP at IoU 0.5 with greedy score-descending matching: each detection is
/// matched to the unmatched same-class ground truth of highest IoU, if that
/// IoU is at least 0.5.
pub fn map50(dets: &[Vec<Detection>], gts: &[Vec<GtObject>], num_classes: usize) -> Result<MapReport> {
    if dets.len() != gts.len() {
        return Err(LabError::Shape {
            expected: format!("{} detection lists", gts.len()),
            got: dets.len().to_string(),
        });
    }
    let mut per_class_ap = Vec::with_capacity(num_classes);
    let mut curves = Vec::new();
    for c in 0..num_classes {
        let n_gt: usize = gts.iter().map(|g| g.iter().filter(|o| o.class_id == c).count()).sum();
        let mut cand: Vec<(f64, usize, usize)> = dets
            .iter()
            .enumerate()
            .flat_map(|(img, ds)| ds.iter().enumerate().filter(|(_, d)| d.class_id == c).map(move |(j, d)| (d.score(), img, j)))
            .collect();
        if n_gt == 0 && cand.is_empty() {
            per_class_ap.push(None);
            continue;
        }
        // Stable: equal scores keep image/detection order.
        cand.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut recall = Vec::with_capacity(cand.len());
        let mut precision = Vec::with_capacity(cand.len());
        for &(_, img, j) in &cand {
            let d = &dets[img][j];
            let mut best: Option<(f64, usize)> = None;
            for (k, g) in gts[img].iter().enumerate() {
                if g.class_id != c || matched[img][k] {
                    continue;
                }
                let v = iou(&d.bbox, &g.bbox);
                if v >= 0.5 && best.is_none_or(|(b, _)| v > b) {
                    best = Some((v, k));
                }
            }
            match best {
                Some((_, k)) => {
                    matched[img][k] = true;
                    tp += 1;
                }
                None => fp += 1,
            }
            recall.push(if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 });
            precision.push(tp as f64 / (tp + fp) as f64);
        }
        let ap = if n_gt == 0 { 0.0 } else { average_precision(&recall, &precision) };
        per_class_ap.push(Some(ap));
        curves.push(PrCurve { class_id: c, recall, precision });
    }
    let present: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let map50 = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    Ok(MapReport { per_class_ap, map50, curves })
}

/// Post-NMS detections and the pre-NMS candidate count of one image.
pub fn detect(params: &DetectorParams, image: &Image, cfg: &NmsConfig) -> Result<(Vec<Detection>, usize)> {
    let raw = forward(params, image)?;
    let all = decode(&params.arch, &raw);
    let candidates = confidence_filter(&all, cfg.conf_threshold);
    let count = candidates.len();
    debug_assert_eq!(count, count_candidates(&params.arch, &raw, cfg.conf_threshold));
    let (kept, _) = nms(&candidates, cfg);
    Ok((kept, count))
}

/// Runs [`detect`] over many images in parallel, keeping input order.
pub fn detect_all(params: &DetectorParams, images: &[&Image], cfg: &NmsConfig) -> Result<(Vec<Vec<Detection>>, Vec<usize>)> {
    let out: Vec<Result<(Vec<Detection>, usize)>> = images.par_iter().map(|im| detect(params, im, cfg)).collect();
    let mut dets = Vec::with_capacity(out.len());
    let mut counts = Vec::with_capacity(out.len());
    for r in out {
        let (d, c) = r?;
        dets.push(d);
        counts.push(c);
    }
    Ok((dets, counts))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub mean_count: f64,
    pub predicted_nms_secs: f64,
    pub t_backbone_secs: f64,
    pub fps: f64,
}

/// Predicted frame rate when every frame carries the mean of `counts`
/// candidates.
pub fn latency_report(counts: &[usize], model: &TwoTermModel) -> Result<LatencyReport> {
    model.validate()?;
    if model.t_backbone_ns == 0 {
        return Err(LabError::Precondition("backbone time must be positive".into()));
    }
    let mean_count = if counts.is_empty() { 0.0 } else { counts.iter().sum::<usize>() as f64 / counts.len() as f64 };
    let predicted_nms_secs = model.predict_secs(mean_count);
    let t_backbone_secs = model.t_backbone_secs();
    Ok(LatencyReport { mean_count, predicted_nms_secs, t_backbone_secs, fps: 1.0 / (t_backbone_secs + predicted_nms_secs) })
}

/// PR curves as CSV rows `class,recall,precision`.
pub fn pr_curves_csv(report: &MapReport) -> String {
    let mut s = String::from("class,recall,precision\n");
    for c in &report.curves {
        for (r, p) in c.recall.iter().zip(&c.precision) {
            s.push_str(&format!("{},{r},{p}\n", c.class_id));
        }
    }
    s
}
