//! Greedy non-maximum suppression with per-phase instrumentation.
//!
//! Work is attributed to two phases: a compute phase (score sort, selection
//! of the current maximum and the IoU of every remaining box against it) and
//! a logic/transfer phase (threshold comparison and removal of suppressed
//! boxes). On an accelerator the first phase runs on the device and the
//! second on the host; here both run on the CPU and are only timed apart.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::geometry::{iou, BBox, Detection};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NmsConfig {
    /// Pre-NMS score filter.
    pub conf_threshold: f64,
    /// Suppression threshold: a box is removed when its IoU with the
    /// selected box is strictly greater than this.
    pub iou_threshold: f64,
    pub max_detections: Option<usize>,
    /// Only suppress boxes of the same class.
    pub per_class: bool,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self { conf_threshold: 0.25, iou_threshold: 0.6, max_detections: None, per_class: false }
    }
}

impl NmsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.conf_threshold) || !(0.0..=1.0).contains(&self.iou_threshold) {
            return Err(LabError::Config(format!(
                "NMS thresholds must lie in [0, 1] (conf {}, iou {})",
                self.conf_threshold, self.iou_threshold
            )));
        }
        Ok(())
    }
}

/// Operation counters and per-phase wall time of one NMS run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NmsTrace {
    pub input_count: u64,
    pub output_count: u64,
    /// Pairwise IoU evaluations.
    pub iou_ops: u64,
    /// Removals from the candidate set (selections plus suppressions).
    pub transfer_ops: u64,
    pub while_iterations: u64,
    pub wall_time_compute: u64,
    pub wall_time_logic: u64,
}

impl NmsTrace {
    pub fn total_ns(&self) -> u64 {
        self.wall_time_compute + self.wall_time_logic
    }
}

/// Keeps detections whose score (objectness times best class probability)
/// is strictly above `conf_threshold`, preserving order.
pub fn confidence_filter(dets: &[Detection], conf_threshold: f64) -> Vec<Detection> {
    dets.iter().filter(|d| d.score() > conf_threshold).cloned().collect()
}

/// Greedy NMS. Returns the kept detections in descending score order.
pub fn nms(dets: &[Detection], cfg: &NmsConfig) -> (Vec<Detection>, NmsTrace) {
    let (idx, trace) = nms_indices(dets, cfg);
    (idx.into_iter().map(|i| dets[i].clone()).collect(), trace)
}

/// Greedy NMS returning indices into `dets` of the kept detections.
///
/// Ties in score go to the lower original index.
pub fn nms_indices(dets: &[Detection], cfg: &NmsConfig) -> (Vec<usize>, NmsTrace) {
    let mut trace = NmsTrace { input_count: dets.len() as u64, ..Default::default() };
    let t_sort = Instant::now();

    let scores: Vec<f64> =
        dets.iter().map(|d| if d.score().is_nan() { f64::NEG_INFINITY } else { d.score() }).collect();
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // Stable: equal scores keep ascending index order.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let boxes: Vec<BBox> = order.iter().map(|&i| dets[i].bbox).collect();
    let classes: Vec<usize> = order.iter().map(|&i| dets[i].class_id).collect();

    let mut remaining: Vec<u32> = (0..order.len() as u32).collect();
    let mut ious: Vec<f64> = Vec::with_capacity(order.len());
    let mut kept = Vec::new();
    trace.wall_time_compute += t_sort.elapsed().as_nanos() as u64;

    while !remaining.is_empty() {
        let tc = Instant::now();
        let m = remaining[0] as usize;
        kept.push(order[m]);
        let mbox = boxes[m];
        ious.clear();
        for &j in &remaining[1..] {
            let j = j as usize;
            if cfg.per_class && classes[j] != classes[m] {
                ious.push(f64::NEG_INFINITY);
            } else {
                ious.push(iou(&mbox, &boxes[j]));
                trace.iou_ops += 1;
            }
        }
        trace.wall_time_compute += tc.elapsed().as_nanos() as u64;

        let tl = Instant::now();
        let rest_len = remaining.len() - 1;
        let mut write = 0;
        let mut removed = 1u64;
        for k in 0..rest_len {
            let j = remaining[k + 1];
            if ious[k] > cfg.iou_threshold {
                removed += 1;
            } else {
                remaining[write] = j;
                write += 1;
            }
        }
        remaining.truncate(write);
        trace.transfer_ops += removed;
        trace.while_iterations += 1;
        trace.wall_time_logic += tl.elapsed().as_nanos() as u64;

        if cfg.max_detections.is_some_and(|cap| kept.len() >= cap) {
            break;
        }
    }
    trace.output_count = kept.len() as u64;
    (kept, trace)
}

/// Synthetic box workloads for the NMS microbenchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadKind {
    /// Small boxes at uniform random positions on a fixed canvas; overlap
    /// density grows with the box count while most pairs stay below the
    /// suppression threshold.
    Dense,
    /// Boxes on a regular grid with gaps; nothing is ever suppressed.
    DisjointGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    pub canvas: f64,
    pub min_size: f64,
    pub max_size: f64,
    pub conf_threshold: f64,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            kind: WorkloadKind::Dense,
            canvas: 640.0,
            min_size: 8.0,
            max_size: 24.0,
            conf_threshold: 0.25,
            num_classes: 3,
            seed: 0,
        }
    }
}

impl WorkloadSpec {
    /// Generates `n` detections, all scoring above the confidence threshold.
    pub fn generate(&self, n: usize) -> Vec<Detection> {
        let mut r = rng::rng(rng::split(self.seed, n as u64));
        let k = self.num_classes.max(1);
        // Both factors above sqrt(threshold) keeps the product above it.
        let lo = (self.conf_threshold.sqrt() + 1e-6).min(0.999);
        let make_det = |bbox: BBox, r: &mut rand_chacha::ChaCha8Rng| {
            let cls = r.random_range(0..k);
            let mut scores = vec![0.0; k];
            let objectness = r.random_range(lo..=1.0);
            scores[cls] = r.random_range(lo..=1.0);
            Detection::new(bbox, objectness, scores)
        };
        match self.kind {
            WorkloadKind::Dense => (0..n)
                .map(|_| {
                    let w = r.random_range(self.min_size..=self.max_size);
                    let h = r.random_range(self.min_size..=self.max_size);
                    let cx = r.random_range(0.0..self.canvas);
                    let cy = r.random_range(0.0..self.canvas);
                    make_det(BBox::new(cx, cy, w, h), &mut r)
                })
                .collect(),
            WorkloadKind::DisjointGrid => {
                let side = (n as f64).sqrt().ceil().max(1.0) as usize;
                (0..n)
                    .map(|i| {
                        let (gx, gy) = ((i % side) as f64, (i / side) as f64);
                        make_det(BBox::new(gx * 4.0 + 1.5, gy * 4.0 + 1.5, 2.0, 2.0), &mut r)
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchSample {
    pub size: usize,
    pub median_ns: u64,
    pub trace: NmsTrace,
}

pub const DEFAULT_MEMORY_GUARD: usize = 1_000_000;

/// Times NMS on generated workloads of each size.
///
/// One warm-up run per size is discarded; the reported trace is the one from
/// the median-time run. Runs sequentially on the calling thread.
pub fn microbenchmark(
    spec: &WorkloadSpec,
    sizes: &[usize],
    repeats: usize,
    nms_cfg: &NmsConfig,
    memory_guard: usize,
) -> Result<Vec<BenchSample>> {
    if sizes.is_empty() {
        return Err(LabError::Precondition("benchmark needs at least one size".into()));
    }
    if repeats < 3 {
        return Err(LabError::Precondition(format!("repeats must be >= 3, got {repeats}")));
    }
    if let Some(&big) = sizes.iter().find(|&&s| s > memory_guard) {
        return Err(LabError::Precondition(format!(
            "workload of {big} boxes exceeds the memory guard of {memory_guard}"
        )));
    }
    let mut out = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let dets = spec.generate(size);
        let _ = std::hint::black_box(nms_indices(&dets, nms_cfg));
        let mut runs: Vec<(u64, NmsTrace)> = (0..repeats)
            .map(|_| {
                let t = Instant::now();
                let (kept, trace) = nms_indices(std::hint::black_box(&dets), nms_cfg);
                std::hint::black_box(kept);
                (t.elapsed().as_nanos() as u64, trace)
            })
            .collect();
        runs.sort_by_key(|r| r.0);
        let (median_ns, trace) = runs[runs.len() / 2];
        out.push(BenchSample { size, median_ns, trace });
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(x1: f64, y1: f64, x2: f64, y2: f64, score: f64) -> Detection {
        Detection::new(BBox::from_corners(x1, y1, x2, y2), score, vec![1.0])
    }

    /// Brute-force greedy NMS: rescans the whole alive set for the maximum on
    /// every round.
    pub(crate) fn reference_nms(dets: &[Detection], thr: f64) -> Vec<usize> {
        let mut alive = vec![true; dets.len()];
        let mut kept = Vec::new();
        loop {
            let mut best: Option<usize> = None;
            for i in 0..dets.len() {
                if !alive[i] {
                    continue;
                }
                match best {
                    None => best = Some(i),
                    Some(b) if dets[i].score() > dets[b].score() => best = Some(i),
                    _ => {}
                }
            }
            let Some(m) = best else { break };
            kept.push(m);
            alive[m] = false;
            for i in 0..dets.len() {
                if alive[i] && iou(&dets[m].bbox, &dets[i].bbox) > thr {
                    alive[i] = false;
                }
            }
        }
        kept
    }

    #[test]
    fn filter_examples() {
        assert!(confidence_filter(&[], 0.25).is_empty());
        let d = Detection::new(BBox::new(1.0, 1.0, 1.0, 1.0), 0.9, vec![0.8, 0.2]);
        assert_eq!(confidence_filter(&[d.clone()], 0.25).len(), 1);
        let spec = WorkloadSpec::default();
        let many = spec.generate(100);
        assert_eq!(confidence_filter(&many, 0.0).len(), 100);
    }

    #[test]
    fn identical_boxes_suppress() {
        let cfg = NmsConfig::default();
        let dets = vec![det(0.0, 0.0, 10.0, 10.0, 0.8), det(0.0, 0.0, 10.0, 10.0, 0.9)];
        let (kept, trace) = nms(&dets, &cfg);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score(), 0.9);
        assert_eq!(trace.iou_ops, 1);
        assert_eq!(trace.while_iterations, 1);
        assert_eq!(trace.transfer_ops, 2);
    }

    #[test]
    fn hand_traced_three_boxes() {
        // box2 is box1 shifted so that IoU = 0.7: overlap 17/3 of width 10 ->
        // inter = 10*(10-s), union = 10*(10+s), (10-s)/(10+s) = 0.7 -> s = 30/17.
        let s = 30.0 / 17.0;
        let b1 = det(0.0, 0.0, 10.0, 10.0, 0.9);
        let b2 = det(s, 0.0, 10.0 + s, 10.0, 0.8);
        let b3 = det(50.0, 50.0, 60.0, 60.0, 0.7);
        assert!((iou(&b1.bbox, &b2.bbox) - 0.7).abs() < 1e-12);
        let (idx, trace) = nms_indices(&[b1, b2, b3], &NmsConfig::default());
        assert_eq!(idx, vec![0, 2]);
        // round 1: IoU against b2 and b3; round 2: nothing left beside b3.
        assert_eq!(trace.iou_ops, 2);
        assert_eq!(trace.while_iterations, 2);
    }

    #[test]
    fn disjoint_boxes_are_all_kept() {
        for n in 0..=10usize {
            let dets: Vec<Detection> = (0..n)
                .map(|i| det(i as f64 * 20.0, 0.0, i as f64 * 20.0 + 5.0, 5.0, 0.5 + i as f64 * 0.01))
                .collect();
            let (kept, trace) = nms(&dets, &NmsConfig::default());
            assert_eq!(kept.len(), n);
            assert_eq!(trace.while_iterations as usize, n);
            assert_eq!(trace.iou_ops as usize, n * n.saturating_sub(1) / 2);
            assert!(kept.windows(2).all(|w| w[0].score() >= w[1].score()));
        }
    }

    #[test]
    fn ties_break_by_index() {
        let dets = vec![det(0.0, 0.0, 4.0, 4.0, 0.5), det(0.0, 0.0, 4.0, 4.0, 0.5)];
        let (idx, _) = nms_indices(&dets, &NmsConfig::default());
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn per_class_mode_keeps_other_classes() {
        let a = Detection::new(BBox::new(5.0, 5.0, 4.0, 4.0), 0.9, vec![1.0, 0.0]);
        let b = Detection::new(BBox::new(5.0, 5.0, 4.0, 4.0), 0.8, vec![0.0, 1.0]);
        let cfg = NmsConfig { per_class: true, ..Default::default() };
        let (kept, trace) = nms(&[a.clone(), b.clone()], &cfg);
        assert_eq!(kept.len(), 2);
        assert_eq!(trace.iou_ops, 0);
        let (kept, _) = nms(&[a, b], &NmsConfig::default());
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn max_detections_caps_output() {
        let spec = WorkloadSpec { kind: WorkloadKind::DisjointGrid, ..Default::default() };
        let dets = spec.generate(20);
        let cfg = NmsConfig { max_detections: Some(5), ..Default::default() };
        let (kept, trace) = nms(&dets, &cfg);
        assert_eq!(kept.len(), 5);
        assert_eq!(trace.while_iterations, 5);
    }

    #[test]
    fn microbenchmark_contracts() {
        let cfg = NmsConfig::default();
        let spec = WorkloadSpec::default();
        let s = microbenchmark(&spec, &[0], 3, &cfg, DEFAULT_MEMORY_GUARD).unwrap();
        assert_eq!(s[0].trace.iou_ops, 0);
        assert!(s[0].median_ns < 1_000_000);

        assert!(microbenchmark(&spec, &[], 3, &cfg, DEFAULT_MEMORY_GUARD).is_err());
        assert!(microbenchmark(&spec, &[10], 2, &cfg, DEFAULT_MEMORY_GUARD).is_err());
        assert!(microbenchmark(&spec, &[2_000_000], 3, &cfg, DEFAULT_MEMORY_GUARD).is_err());

        let grid = WorkloadSpec { kind: WorkloadKind::DisjointGrid, ..Default::default() };
        let s = microbenchmark(&grid, &[50, 300], 3, &cfg, DEFAULT_MEMORY_GUARD).unwrap();
        for smp in &s {
            let n = smp.size as u64;
            assert_eq!(smp.trace.iou_ops, n * (n - 1) / 2);
        }
    }

    #[test]
    fn dense_workload_is_superlinear() {
        let spec = WorkloadSpec::default();
        let cfg = NmsConfig::default();
        let s = microbenchmark(&spec, &[100, 1000, 10000], 3, &cfg, DEFAULT_MEMORY_GUARD).unwrap();
        assert!(s[0].trace.iou_ops < s[1].trace.iou_ops);
        assert!(s[2].trace.iou_ops as f64 / s[1].trace.iou_ops as f64 > 10.0);
    }

    fn arb_dets(max: usize) -> impl Strategy<Value = Vec<Detection>> {
        prop::collection::vec(
            (0.0..40.0f64, 0.0..40.0f64, 1.0..15.0f64, 1.0..15.0f64, 0.0..1.0f64),
            0..=max,
        )
        .prop_map(|v| {
            v.into_iter()
                // Coarse score grid so ties occur.
                .map(|(x, y, w, h, s)| {
                    Detection::new(BBox::new(x, y, w, h), (s * 20.0).round() / 20.0, vec![1.0])
                })
                .collect()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]

        #[test]
        fn matches_reference(dets in arb_dets(50), thr in 0.0..1.0f64) {
            let cfg = NmsConfig { iou_threshold: thr, ..Default::default() };
            let (idx, trace) = nms_indices(&dets, &cfg);
            prop_assert_eq!(&idx, &reference_nms(&dets, thr));
            let n = dets.len() as u64;
            prop_assert!(trace.iou_ops <= n * n.saturating_sub(1) / 2 + n);
            prop_assert_eq!(trace.while_iterations, trace.output_count);
            prop_assert!(trace.output_count <= trace.input_count);
        }

        #[test]
        fn survivors_are_stable_and_suppressions_justified(dets in arb_dets(40)) {
            let cfg = NmsConfig::default();
            let (kept_idx, _) = nms_indices(&dets, &cfg);
            let kept: Vec<Detection> = kept_idx.iter().map(|&i| dets[i].clone()).collect();
            let (again, _) = nms(&kept, &cfg);
            prop_assert_eq!(again.len(), kept.len());
            for (i, d) in dets.iter().enumerate() {
                if kept_idx.contains(&i) {
                    continue;
                }
                let justified = kept_idx.iter().any(|&k| {
                    let earlier = dets[k].score() > d.score() || (dets[k].score() == d.score() && k < i);
                    earlier && iou(&dets[k].bbox, &d.bbox) > cfg.iou_threshold
                });
                prop_assert!(justified);
            }
        }
    }
}
