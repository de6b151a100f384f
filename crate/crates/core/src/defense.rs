//! Background-attentive adversarial training: PGD on the objectness loss
//! restricted to pixels outside per-object protection windows, with an outer
//! loop over the window size that stops once the attacked candidate count
//! fits the hardware capacity.

use serde::{Deserialize, Serialize};

use crate::attacks::{pgd_batch, pgd_objective, AttackConfig, AttackFamily, Norm, PerturbationBudget, PgdResult, PixelMask};
use crate::detector::{
    train_with, DetectorParams, GtObject, Image, LossSelector, LossTerm, Sample, TrainConfig, TrainReport,
};
use crate::error::{LabError, Result};
use crate::evalkit::{detect_all, map50};
use crate::nms::NmsConfig;
use crate::rng::{split, split_named};

/// Mask that is unset inside a window of `ratio * (w, h)` centered on each
/// object and set elsewhere. A pixel is inside a window when its center is.
pub fn build_mask(objects: &[GtObject], ratio: f64, height: usize, width: usize) -> Result<PixelMask> {
    if !(ratio >= 0.0 && ratio.is_finite()) {
        return Err(LabError::Config(format!("mask ratio must be >= 0, got {ratio}")));
    }
    let mut m = PixelMask::ones(height, width);
    for o in objects {
        let (hw, hh) = (0.5 * ratio * o.bbox.w, 0.5 * ratio * o.bbox.h);
        let (x1, x2) = (o.bbox.cx - hw, o.bbox.cx + hw);
        let (y1, y2) = (o.bbox.cy - hh, o.bbox.cy + hh);
        // Pixel i has center i + 0.5; it is covered when x1 <= i + 0.5 < x2.
        let lo = |a: f64, n: usize| ((a - 0.5).ceil().max(0.0) as usize).min(n);
        let (xa, xb) = (lo(x1, width), lo(x2, width));
        let (ya, yb) = (lo(y1, height), lo(y2, height));
        for y in ya..yb {
            for x in xa..xb {
                m.set(y, x, false);
            }
        }
    }
    Ok(m)
}

/// PGD ascent of the objectness loss, confined to the set pixels of `mask`.
pub fn masked_pgd(
    params: &DetectorParams,
    image: &Image,
    objects: &[GtObject],
    mask: &PixelMask,
    budget: &PerturbationBudget,
    seed: u64,
) -> Result<PgdResult> {
    let objective = LossSelector::new(LossTerm::Obj, objects.to_vec());
    pgd_objective(params, image, &objective, budget, Some(mask), NmsConfig::default().conf_threshold, seed)
}

/// Direction of the outer mask-ratio schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleDirection {
    /// Shrink the protected windows after each failing stage and stop at the
    /// first stage that meets the capacity.
    #[default]
    Shrink,
    /// Grow the windows while the capacity is met and keep the last stage
    /// that met it.
    Grow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AtConfig {
    /// Optimizer, epochs per stage, batch size and seed of each stage.
    pub train: TrainConfig,
    /// Training-time perturbation.
    pub budget: PerturbationBudget,
    pub start_ratio: f64,
    pub ratio_step: f64,
    /// Upper ratio bound for [`ScheduleDirection::Grow`].
    pub max_ratio: f64,
    pub direction: ScheduleDirection,
    /// Attack used to measure the attacked candidate count after each stage.
    pub eval_attack: AttackConfig,
    pub eval_budget: PerturbationBudget,
}

impl Default for AtConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig { epochs: 10, ..Default::default() },
            budget: PerturbationBudget::new(Norm::LInf, 1.0 / 255.0, 4),
            start_ratio: 1.0,
            ratio_step: 0.1,
            max_ratio: 1.5,
            direction: ScheduleDirection::Shrink,
            eval_attack: AttackConfig::family(AttackFamily::Overload),
            eval_budget: PerturbationBudget::reference(),
        }
    }
}

impl AtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train.epochs == 0 {
            return Err(LabError::Config("adversarial training needs at least one epoch per stage".into()));
        }
        if !(self.start_ratio > 0.0 && self.start_ratio.is_finite()) {
            return Err(LabError::Config(format!("start ratio must be positive, got {}", self.start_ratio)));
        }
        if !(self.ratio_step > 0.0 && self.ratio_step.is_finite()) {
            return Err(LabError::Config(format!("ratio step must be positive, got {}", self.ratio_step)));
        }
        self.budget.validate()?;
        self.eval_budget.validate()?;
        self.train.optimizer.validate()
    }
}

/// Adversarial training at a fixed mask ratio: every sample is replaced by
/// its masked-PGD perturbation under the current weights before the step.
pub fn at_stage(params: &DetectorParams, data: &[Sample], ratio: f64, cfg: &AtConfig) -> Result<TrainReport> {
    cfg.budget.validate()?;
    let budget = cfg.budget;
    train_with(params, data, &cfg.train, &|p, s, seed| {
        let mask = build_mask(&s.objects, ratio, s.image.height, s.image.width)?;
        let res = masked_pgd(p, &s.image, &s.objects, &mask, &budget, seed)?;
        let leaked = res.delta.chunks_exact(3).zip(&mask.data).any(|(px, &set)| !set && px.iter().any(|&d| d != 0.0));
        if leaked {
            return Err(LabError::Precondition("perturbation touched a protected pixel".into()));
        }
        Ok(res.apply(&s.image))
    })
}

/// Mean attacked candidate count and clean mAP50 of `params` on `data`.
pub fn evaluate_stage(params: &DetectorParams, data: &[Sample], cfg: &AtConfig, seed: u64) -> Result<(f64, f64)> {
    let images: Vec<&Image> = data.iter().map(|s| &s.image).collect();
    let results = pgd_batch(params, &images, &cfg.eval_budget, &cfg.eval_attack, seed)?;
    let attacked = results.iter().map(|r| r.final_count() as f64).sum::<f64>() / data.len() as f64;
    let (dets, _) = detect_all(params, &images, &NmsConfig::default())?;
    let gts: Vec<Vec<GtObject>> = data.iter().map(|s| s.objects.clone()).collect();
    let clean = map50(&dets, &gts, params.arch.num_classes)?.map50;
    Ok((attacked, clean))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub ratio: f64,
    pub attacked_count_mean: f64,
    pub clean_map50: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct UnderloadResult {
    pub params: DetectorParams,
    pub accepted_ratio: f64,
    pub log: Vec<StageRecord>,
}

/// The outer capacity loop. Each stage restarts from `params0`, trains at
/// the current ratio and measures the attacked candidate count on `val`.
///
/// With [`ScheduleDirection::Shrink`] the ratio drops by the step after every
/// stage whose count is at least `c_max`, and the first stage below `c_max`
/// is returned. With [`ScheduleDirection::Grow`] the ratio rises while the
/// count stays below `c_max` and the last such stage is returned.
pub fn underload_train(
    params0: &DetectorParams,
    train_data: &[Sample],
    val: &[Sample],
    cfg: &AtConfig,
    c_max: f64,
) -> Result<UnderloadResult> {
    cfg.validate()?;
    if val.is_empty() {
        return Err(LabError::Precondition("validation set is empty".into()));
    }
    if c_max.is_nan() || c_max <= 0.0 {
        // Counts are non-negative, so `count < c_max` can never hold.
        return Err(LabError::CapacityUnreachable { c_max, last_count: f64::NAN });
    }
    let eval_seed = split_named(cfg.train.seed, "underload-eval");
    let mut log = Vec::new();
    let mut best: Option<(DetectorParams, f64)> = None;
    let mut ratio = cfg.start_ratio;
    let mut last_count = f64::NAN;
    // Ratios are generated as start -/+ k * step so they do not drift.
    for stage in 0.. {
        let report = at_stage(params0, train_data, ratio, cfg)?;
        let (count, clean) = evaluate_stage(&report.params, val, cfg, split(eval_seed, stage as u64))?;
        last_count = count;
        let ok = count < c_max;
        log.push(StageRecord { stage, ratio, attacked_count_mean: count, clean_map50: clean, accepted: ok });
        let next = stage as f64 + 1.0;
        match cfg.direction {
            ScheduleDirection::Shrink => {
                if ok {
                    return Ok(UnderloadResult { params: report.params, accepted_ratio: ratio, log });
                }
                ratio = cfg.start_ratio - next * cfg.ratio_step;
                if ratio < -1e-9 {
                    break;
                }
                ratio = ratio.max(0.0);
            }
            ScheduleDirection::Grow => {
                if !ok {
                    break;
                }
                best = Some((report.params, ratio));
                ratio = cfg.start_ratio + next * cfg.ratio_step;
                if ratio > cfg.max_ratio + 1e-9 {
                    break;
                }
            }
        }
    }
    if let Some((params, accepted_ratio)) = best {
        for r in &mut log {
            r.accepted = r.ratio == accepted_ratio;
        }
        return Ok(UnderloadResult { params, accepted_ratio, log });
    }
    Err(LabError::CapacityUnreachable { c_max, last_count })
}

/// Stage log as CSV with a header row.
pub fn schedule_csv(log: &[StageRecord]) -> String {
    let mut s = String::from("stage,ratio,attacked_count_mean,clean_map50,accepted\n");
    for r in log {
        s.push_str(&format!("{},{:.4},{:.4},{:.4},{}\n", r.stage, r.ratio, r.attacked_count_mean, r.clean_map50, r.accepted));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{ArchConfig, HeadMode};
    use crate::geometry::BBox;
    use proptest::prelude::*;

    fn obj(cx: f64, cy: f64, w: f64, h: f64) -> GtObject {
        GtObject { bbox: BBox::new(cx, cy, w, h), class_id: 0 }
    }

    fn small_arch() -> ArchConfig {
        ArchConfig {
            image_size: 16,
            num_classes: 2,
            channels: [3, 4, 4],
            backbone_kernels: [3, 3, 3],
            head_kernels: [3, 3, 3],
            head_mode: HeadMode::Objectness,
            objectness_bias: -1.0,
        }
    }

    fn small_data(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let mut img = Image::filled(16, 16, 0.3);
                let x0 = 2 + i % 6;
                for y in 5..11 {
                    for x in x0..x0 + 6 {
                        let j = img.index(y, x, 1);
                        img.data[j] = 0.9;
                    }
                }
                let b = BBox::from_corners(x0 as f64, 5.0, x0 as f64 + 6.0, 11.0);
                Sample { image: img, objects: vec![GtObject { bbox: b, class_id: i % 2 }] }
            })
            .collect()
    }

    fn fast_cfg() -> AtConfig {
        AtConfig {
            train: TrainConfig { epochs: 2, batch_size: 2, seed: 3, ..Default::default() },
            eval_budget: PerturbationBudget::new(Norm::L2, 0.5, 3),
            ..Default::default()
        }
    }

    #[test]
    fn ratio_zero_and_no_objects_give_all_ones() {
        let m = build_mask(&[obj(30.0, 30.0, 10.0, 10.0)], 0.0, 64, 64).unwrap();
        assert_eq!(m, PixelMask::ones(64, 64));
        assert_eq!(build_mask(&[], 1.0, 64, 64).unwrap(), PixelMask::ones(64, 64));
        assert!(build_mask(&[], -0.1, 64, 64).is_err());
    }

    #[test]
    fn full_image_object_is_fully_protected() {
        let m = build_mask(&[obj(32.0, 32.0, 64.0, 64.0)], 1.0, 64, 64).unwrap();
        assert_eq!(m.count_ones(), 0);
        let s = &small_data(1)[0];
        let full = build_mask(&[obj(8.0, 8.0, 16.0, 16.0)], 1.0, 16, 16).unwrap();
        let p = DetectorParams::init(small_arch(), 1).unwrap();
        let r = masked_pgd(&p, &s.image, &s.objects, &full, &PerturbationBudget::new(Norm::L2, 1.0, 4), 0).unwrap();
        assert!(r.delta.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn centered_ten_pixel_box_protects_100_pixels() {
        let m = build_mask(&[obj(32.0, 32.0, 10.0, 10.0)], 1.0, 64, 64).unwrap();
        assert_eq!(m.count_zeros(), 100);
        for y in 27..37 {
            for x in 27..37 {
                assert!(!m.get(y, x));
            }
        }
        // Half the ratio: a 5x5 window around (32, 32).
        let h = build_mask(&[obj(32.0, 32.0, 10.0, 10.0)], 0.5, 64, 64).unwrap();
        assert_eq!(h.count_zeros(), 25);
    }

    #[test]
    fn windows_clip_and_union() {
        let m = build_mask(&[obj(0.0, 0.0, 10.0, 10.0), obj(3.0, 3.0, 4.0, 4.0)], 1.0, 64, 64).unwrap();
        assert_eq!(m.count_zeros(), 25);
        let two = build_mask(&[obj(10.0, 10.0, 4.0, 4.0), obj(12.0, 10.0, 4.0, 4.0)], 1.0, 64, 64).unwrap();
        assert_eq!(two.count_zeros(), 6 * 4);
    }

    proptest! {
        #[test]
        fn protected_count_is_monotone_in_ratio(
            boxes in proptest::collection::vec((0.0..64.0f64, 0.0..64.0f64, 1.0..40.0f64, 1.0..40.0f64), 0..5),
            r1 in 0.0..2.0f64,
            r2 in 0.0..2.0f64,
        ) {
            let objs: Vec<GtObject> = boxes.iter().map(|&(x, y, w, h)| obj(x, y, w, h)).collect();
            let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            let a = build_mask(&objs, lo, 64, 64).unwrap();
            let b = build_mask(&objs, hi, 64, 64).unwrap();
            prop_assert!(a.count_zeros() <= b.count_zeros());
            // Nested: every pixel protected at the smaller ratio stays protected.
            for (pa, pb) in a.data.iter().zip(&b.data) {
                prop_assert!(*pa || !*pb);
            }
        }
    }

    #[test]
    fn random_mask_blocks_perturbation() {
        let p = DetectorParams::init(small_arch(), 2).unwrap();
        let s = &small_data(1)[0];
        let mut m = PixelMask::ones(16, 16);
        for i in (0..256).step_by(3) {
            m.data[i] = false;
        }
        let r = masked_pgd(&p, &s.image, &s.objects, &m, &PerturbationBudget::new(Norm::LInf, 0.1, 5), 4).unwrap();
        assert!(r.delta.iter().any(|&d| d != 0.0));
        for (px, &set) in r.delta.chunks_exact(3).zip(&m.data) {
            if !set {
                assert!(px.iter().all(|&d| d == 0.0));
            }
        }
    }

    #[test]
    fn all_ones_mask_matches_unmasked_objectness_pgd() {
        let p = DetectorParams::init(small_arch(), 3).unwrap();
        let s = &small_data(1)[0];
        let budget = PerturbationBudget::new(Norm::L2, 0.8, 6);
        let masked = masked_pgd(&p, &s.image, &s.objects, &PixelMask::ones(16, 16), &budget, 9).unwrap();
        let sel = LossSelector::new(LossTerm::Obj, s.objects.clone());
        let plain = pgd_objective(&p, &s.image, &sel, &budget, None, 0.25, 9).unwrap();
        assert_eq!(masked, plain);
    }

    #[test]
    fn tiny_budget_stage_matches_clean_training() {
        let p = DetectorParams::init(small_arch(), 4).unwrap();
        let data = small_data(4);
        let cfg = AtConfig { budget: PerturbationBudget::new(Norm::LInf, 1e-12, 2), ..fast_cfg() };
        let at = at_stage(&p, &data, 0.5, &cfg).unwrap();
        let clean = crate::detector::train(&p, &data, &cfg.train).unwrap();
        for (a, b) in at.loss_trace.iter().zip(&clean.loss_trace) {
            assert!((a.total - b.total).abs() < 1e-6);
        }
        let again = at_stage(&p, &data, 0.5, &cfg).unwrap();
        assert_eq!(at.params, again.params);
    }

    #[test]
    fn infinite_capacity_stops_after_one_stage() {
        let p = DetectorParams::init(small_arch(), 5).unwrap();
        let data = small_data(4);
        let r = underload_train(&p, &data, &data[..2], &fast_cfg(), f64::INFINITY).unwrap();
        assert_eq!(r.log.len(), 1);
        assert_eq!(r.accepted_ratio, 1.0);
        assert!(r.log[0].accepted);
    }

    #[test]
    fn zero_capacity_is_unreachable() {
        let p = DetectorParams::init(small_arch(), 6).unwrap();
        let data = small_data(2);
        let e = underload_train(&p, &data, &data, &fast_cfg(), 0.0).unwrap_err();
        assert!(matches!(e, LabError::CapacityUnreachable { .. }));
        assert_eq!(e.exit_code(), 3);
    }

    #[test]
    fn unmet_capacity_walks_ratio_down_to_zero() {
        // Objectness bias far above zero: every cell passes the filter, so
        // the count can never drop below 1.
        let arch = ArchConfig { objectness_bias: 30.0, ..small_arch() };
        let p = DetectorParams::init(arch, 7).unwrap();
        let data = small_data(2);
        let cfg = AtConfig {
            train: TrainConfig { epochs: 1, batch_size: 2, seed: 1, ..Default::default() },
            ratio_step: 0.5,
            eval_budget: PerturbationBudget::new(Norm::L2, 0.1, 1),
            ..Default::default()
        };
        let e = underload_train(&p, &data, &data, &cfg, 1.0).unwrap_err();
        assert!(matches!(e, LabError::CapacityUnreachable { .. }));
    }

    #[test]
    fn schedule_ratios_move_monotonically() {
        let arch = ArchConfig { objectness_bias: 30.0, ..small_arch() };
        let p = DetectorParams::init(arch, 8).unwrap();
        let data = small_data(2);
        let cfg = AtConfig {
            train: TrainConfig { epochs: 1, batch_size: 2, seed: 1, ..Default::default() },
            ratio_step: 0.4,
            eval_budget: PerturbationBudget::new(Norm::L2, 0.1, 1),
            ..Default::default()
        };
        // Accept anything below the full candidate count.
        let r = underload_train(&p, &data, &data, &cfg, 1e6).unwrap();
        assert_eq!(r.log.len(), 1);
        let grow = AtConfig { direction: ScheduleDirection::Grow, max_ratio: 1.8, ..cfg };
        let g = underload_train(&p, &data, &data, &grow, 1e6).unwrap();
        let ratios: Vec<f64> = g.log.iter().map(|r| r.ratio).collect();
        assert_eq!(ratios.len(), 3);
        assert!(ratios.windows(2).all(|w| w[1] > w[0]));
        assert!((g.accepted_ratio - 1.8).abs() < 1e-12);
        let csv = schedule_csv(&g.log);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("stage,ratio,attacked_count_mean,clean_map50,accepted\n"));
    }

    #[test]
    fn eval_attack_is_overload_reference() {
        let c = AtConfig::default();
        assert_eq!(c.eval_attack.family, AttackFamily::Overload);
        assert_eq!(c.eval_budget, PerturbationBudget::reference());
        assert_eq!(c.train.epochs, 10);
        assert_eq!(c.budget.steps, 4);
    }
}
