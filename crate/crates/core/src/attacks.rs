//! Latency attacks: projected gradient ascent on the input pixels of losses
//! that push background cells over the confidence threshold, so that NMS
//! receives many more candidates.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::decode::{candidate_backward, candidate_view, CandidateView};
use crate::detector::{backward, count_candidates, decode, forward_cached, ArchConfig, DetectorParams, Image, RawObjective, RawPrediction, Sample};
use crate::error::{LabError, Result};
use crate::geometry::{argmax, iou, iou_with_grad, Detection};
use crate::nms::{confidence_filter, NmsConfig};
use crate::rng::{rng, split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
pub enum Norm {
    #[serde(rename = "linf")]
    #[value(name = "linf")]
    LInf,
    #[serde(rename = "l2")]
    #[value(name = "l2")]
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationBudget {
    pub norm: Norm,
    /// Radius of the norm ball, in units of the `[0, 1]` pixel scale.
    pub epsilon: f64,
    pub steps: usize,
    /// Defaults to `2.5 * epsilon / steps`.
    #[serde(default)]
    pub step_size: Option<f64>,
    /// Start from a random point of the ball instead of zero.
    #[serde(default)]
    pub random_start: bool,
}

impl Default for PerturbationBudget {
    fn default() -> Self {
        Self::reference()
    }
}

impl PerturbationBudget {
    pub fn new(norm: Norm, epsilon: f64, steps: usize) -> Self {
        Self { norm, epsilon, steps, step_size: None, random_start: false }
    }

    /// Reference attack strength for 64x64 images: an l2 radius of 7.0,
    /// i.e. a strength of 70 on 640x640 images scaled by the square root of
    /// the pixel-count ratio, with 50 steps.
    pub fn reference() -> Self {
        Self::new(Norm::L2, 7.0, 50)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(LabError::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if let Some(s) = self.step_size {
            if !(s > 0.0 && s.is_finite()) {
                return Err(LabError::Config(format!("step size must be positive, got {s}")));
            }
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        self.step_size.unwrap_or(2.5 * self.epsilon / self.steps.max(1) as f64)
    }

    pub fn norm_of(&self, delta: &[f64]) -> f64 {
        match self.norm {
            Norm::LInf => delta.iter().fold(0.0, |m, d| m.max(d.abs())),
            Norm::L2 => delta.iter().map(|d| d * d).sum::<f64>().sqrt(),
        }
    }

    fn project(&self, delta: &mut [f64]) {
        match self.norm {
            Norm::LInf => {
                for d in delta.iter_mut() {
                    *d = d.clamp(-self.epsilon, self.epsilon);
                }
            }
            Norm::L2 => {
                let n = self.norm_of(delta);
                if n > self.epsilon {
                    let s = self.epsilon / n;
                    for d in delta.iter_mut() {
                        *d *= s;
                    }
                }
            }
        }
    }
}

/// Binary per-pixel mask; `true` marks pixels the perturbation may touch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl PixelMask {
    pub fn ones(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![true; height * width] }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![false; height * width] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn count_zeros(&self) -> usize {
        self.data.len() - self.count_ones()
    }

    /// Whether the pixel containing point `(x, y)` is set; points outside the
    /// mask count as unset.
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        if !(x >= 0.0 && y >= 0.0) {
            return false;
        }
        let (xi, yi) = (x.floor() as usize, y.floor() as usize);
        xi < self.width && yi < self.height && self.get(yi, xi)
    }

    fn check(&self, image: &Image) -> Result<()> {
        if self.height != image.height || self.width != image.width || self.data.len() != self.height * self.width {
            return Err(LabError::Shape {
                expected: format!("{}x{} mask", image.height, image.width),
                got: format!("{}x{} ({} entries)", self.height, self.width, self.data.len()),
            });
        }
        Ok(())
    }

    /// Zeroes HWC entries of `v` at unset pixels.
    fn apply(&self, v: &mut [f64]) {
        for (px, &keep) in v.chunks_exact_mut(3).zip(&self.data) {
            if !keep {
                px.fill(0.0);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum AttackFamily {
    Overload,
    Phantom,
    /// Confidence plus dispersion and shrink terms.
    #[serde(rename = "daedalus_like")]
    #[value(name = "daedalus-like")]
    DaedalusLike,
    Targeted,
}

impl AttackFamily {
    pub fn label(&self) -> &'static str {
        match self {
            AttackFamily::Overload => "overload",
            AttackFamily::Phantom => "phantom",
            AttackFamily::DaedalusLike => "daedalus_like",
            AttackFamily::Targeted => "targeted",
        }
    }
}

/// Which per-candidate confidence the attack maximizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceMode {
    /// Objectness times the best class probability (the filtering score).
    #[default]
    Score,
    Objectness,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub family: AttackFamily,
    /// Weight of the auxiliary terms.
    pub rho: f64,
    /// Weight of the confidence term in the phantom family.
    pub lambda1: f64,
    /// Weight of the detection-preservation term in the phantom family.
    pub lambda3: f64,
    pub target_class: Option<usize>,
    /// Pixels the perturbation may touch; for the targeted family also the
    /// region whose candidates are scored.
    pub region_mask: Option<PixelMask>,
    pub confidence: ConfidenceMode,
    /// Candidates entering the pairwise dispersion term.
    pub top_m: usize,
    /// Score above which a candidate counts as detected.
    pub conf_threshold: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            family: AttackFamily::Overload,
            rho: 0.1,
            lambda1: 1.0,
            lambda3: 0.0,
            target_class: None,
            region_mask: None,
            confidence: ConfidenceMode::Score,
            top_m: 100,
            conf_threshold: 0.25,
        }
    }
}

impl AttackConfig {
    pub fn family(family: AttackFamily) -> Self {
        Self { family, ..Default::default() }
    }

    pub fn validate(&self, arch: &ArchConfig) -> Result<()> {
        if !(self.rho >= 0.0) || !self.lambda1.is_finite() || !self.lambda3.is_finite() {
            return Err(LabError::Config(format!(
                "attack weights must be finite with rho >= 0 (rho {}, lambda1 {}, lambda3 {})",
                self.rho, self.lambda1, self.lambda3
            )));
        }
        if self.family == AttackFamily::Targeted {
            match self.target_class {
                Some(c) if c < arch.num_classes => {}
                other => {
                    return Err(LabError::Config(format!(
                        "targeted attack needs a target class below {}, got {other:?}",
                        arch.num_classes
                    )))
                }
            }
        }
        if self.family == AttackFamily::DaedalusLike && self.top_m < 2 {
            return Err(LabError::Config("top_m must be at least 2".into()));
        }
        Ok(())
    }
}

/// An attack loss bound to its configuration and the clean detections it
/// refers to. Ascending the value strengthens the attack.
#[derive(Debug, Clone)]
pub struct AttackObjective {
    cfg: AttackConfig,
    orig: Vec<Detection>,
}

impl AttackObjective {
    /// `orig_dets` (post-NMS detections on the clean image) are required by
    /// the phantom family.
    pub fn new(arch: &ArchConfig, cfg: AttackConfig, orig_dets: Option<Vec<Detection>>) -> Result<Self> {
        cfg.validate(arch)?;
        if cfg.family == AttackFamily::Phantom && orig_dets.is_none() {
            return Err(LabError::Precondition("phantom attack needs the clean detections".into()));
        }
        Ok(Self { cfg, orig: orig_dets.unwrap_or_default() })
    }

    pub fn config(&self) -> &AttackConfig {
        &self.cfg
    }
}

impl RawObjective for AttackObjective {
    fn evaluate(&self, arch: &ArchConfig, raw: &RawPrediction) -> (f64, Vec<f64>) {
        attack_loss_unchecked(arch, raw, &self.orig, &self.cfg)
    }
}

/// Attack loss of `raw` and its gradient w.r.t. `raw`.
pub fn attack_loss(arch: &ArchConfig, raw: &RawPrediction, orig_dets: Option<&[Detection]>, cfg: &AttackConfig) -> Result<(f64, Vec<f64>)> {
    let obj = AttackObjective::new(arch, cfg.clone(), orig_dets.map(|d| d.to_vec()))?;
    Ok(obj.evaluate(arch, raw))
}

// Per-candidate gradients w.r.t. decoded quantities, chained to raw at the end.
struct DecodedGrad {
    d_obj: Vec<f64>,
    d_probs: Vec<f64>,
    d_box: Vec<[f64; 4]>,
    k: usize,
}

impl DecodedGrad {
    fn new(n: usize, k: usize) -> Self {
        Self { d_obj: vec![0.0; n], d_probs: vec![0.0; n * k], d_box: vec![[0.0; 4]; n], k }
    }
}

fn confidence(mode: ConfidenceMode, v: &CandidateView) -> f64 {
    match mode {
        ConfidenceMode::Score => v.score(),
        ConfidenceMode::Objectness => v.objectness,
    }
}

/// Mean confidence over all candidates, gradient scaled by `w`.
fn conf_term(mode: ConfidenceMode, views: &[CandidateView], w: f64, g: &mut DecodedGrad) -> f64 {
    let n = views.len() as f64;
    let mut sum = 0.0;
    for (i, v) in views.iter().enumerate() {
        sum += confidence(mode, v);
        match mode {
            ConfidenceMode::Score => {
                let top = argmax(&v.probs);
                g.d_obj[i] += w * v.probs[top] / n;
                g.d_probs[i * g.k + top] += w * v.objectness / n;
            }
            ConfidenceMode::Objectness => g.d_obj[i] += w / n,
        }
    }
    sum / n
}

/// Mean box area as a fraction of the image, gradient scaled by `w`.
fn area_term(views: &[CandidateView], image_area: f64, w: f64, g: &mut DecodedGrad) -> f64 {
    let n = views.len() as f64;
    let mut sum = 0.0;
    for (i, v) in views.iter().enumerate() {
        sum += v.bbox.w * v.bbox.h / image_area;
        g.d_box[i][2] += w * v.bbox.h / (image_area * n);
        g.d_box[i][3] += w * v.bbox.w / (image_area * n);
    }
    sum / n
}

/// Mean over `orig` of `1 - max IoU` with any candidate above the threshold.
fn preservation_term(views: &[CandidateView], orig: &[Detection], thr: f64, w: f64, g: &mut DecodedGrad) -> f64 {
    if orig.is_empty() {
        return 0.0;
    }
    let high: Vec<usize> = (0..views.len()).filter(|&i| views[i].score() > thr).collect();
    let m = orig.len() as f64;
    let mut sum = 0.0;
    for o in orig {
        let best = high
            .iter()
            .map(|&i| (i, iou(&views[i].bbox, &o.bbox)))
            .fold(None, |acc: Option<(usize, f64)>, (i, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((i, v)),
            });
        match best {
            Some((i, _)) => {
                let (v, gi) = iou_with_grad(&views[i].bbox, &o.bbox);
                sum += 1.0 - v;
                for c in 0..4 {
                    g.d_box[i][c] -= w * gi[c] / m;
                }
            }
            None => sum += 1.0,
        }
    }
    sum / m
}

/// Mean pairwise IoU among the `top_m` highest-scoring candidates.
fn dispersion_term(views: &[CandidateView], top_m: usize, w: f64, g: &mut DecodedGrad) -> f64 {
    let mut order: Vec<usize> = (0..views.len()).collect();
    order.sort_by(|&a, &b| views[b].score().total_cmp(&views[a].score()).then(a.cmp(&b)));
    order.truncate(top_m.min(views.len()));
    let pairs = order.len() * order.len().saturating_sub(1) / 2;
    if pairs == 0 {
        return 0.0;
    }
    let p = pairs as f64;
    let mut sum = 0.0;
    for (ai, &a) in order.iter().enumerate() {
        for &b in &order[ai + 1..] {
            let (v, ga) = iou_with_grad(&views[a].bbox, &views[b].bbox);
            let (_, gb) = iou_with_grad(&views[b].bbox, &views[a].bbox);
            sum += v;
            for c in 0..4 {
                g.d_box[a][c] += w * ga[c] / p;
                g.d_box[b][c] += w * gb[c] / p;
            }
        }
    }
    sum / p
}

/// Mean of objectness times the target-class probability over candidates
/// whose centers lie in `region` (all candidates when no region is given or
/// none falls inside).
fn targeted_term(views: &[CandidateView], target: usize, region: Option<&PixelMask>, g: &mut DecodedGrad) -> f64 {
    let mut sel: Vec<usize> = match region {
        Some(m) => (0..views.len()).filter(|&i| m.contains_point(views[i].bbox.cx, views[i].bbox.cy)).collect(),
        None => Vec::new(),
    };
    if sel.is_empty() {
        sel = (0..views.len()).collect();
    }
    let n = sel.len() as f64;
    let mut sum = 0.0;
    for &i in &sel {
        let v = &views[i];
        sum += v.objectness * v.probs[target];
        g.d_obj[i] += v.probs[target] / n;
        g.d_probs[i * g.k + target] += v.objectness / n;
    }
    sum / n
}

fn attack_loss_unchecked(arch: &ArchConfig, raw: &RawPrediction, orig: &[Detection], cfg: &AttackConfig) -> (f64, Vec<f64>) {
    let cells = arch.cells();
    let views: Vec<CandidateView> = cells.iter().enumerate().map(|(i, c)| candidate_view(arch, c, raw.candidate(i))).collect();
    let k = arch.num_classes;
    let mut g = DecodedGrad::new(views.len(), k);
    let area = (arch.image_size * arch.image_size) as f64;
    let value = match cfg.family {
        AttackFamily::Overload => conf_term(cfg.confidence, &views, 1.0, &mut g),
        AttackFamily::Phantom => {
            let conf = conf_term(cfg.confidence, &views, cfg.lambda1, &mut g);
            let bbox = area_term(&views, area, -cfg.rho, &mut g);
            let keep = preservation_term(&views, orig, cfg.conf_threshold, -cfg.rho * cfg.lambda3, &mut g);
            cfg.lambda1 * conf - cfg.rho * (bbox + cfg.lambda3 * keep)
        }
        AttackFamily::DaedalusLike => {
            let conf = conf_term(cfg.confidence, &views, 1.0, &mut g);
            let spread = dispersion_term(&views, cfg.top_m, -cfg.rho, &mut g);
            let bbox = area_term(&views, area, -cfg.rho, &mut g);
            conf - cfg.rho * (spread + bbox)
        }
        AttackFamily::Targeted => {
            let t = cfg.target_class.expect("validated target class");
            targeted_term(&views, t, cfg.region_mask.as_ref(), &mut g)
        }
    };

    let mut grad = vec![0.0; raw.data.len()];
    let ch = raw.channels;
    for (i, (cell, v)) in cells.iter().zip(&views).enumerate() {
        let dp = &g.d_probs[i * k..(i + 1) * k];
        let any_p = dp.iter().any(|&x| x != 0.0);
        let db = g.d_box[i];
        let any_b = db.iter().any(|&x| x != 0.0);
        if g.d_obj[i] == 0.0 && !any_p && !any_b {
            continue;
        }
        candidate_backward(
            arch,
            cell,
            raw.candidate(i),
            v,
            g.d_obj[i],
            any_p.then_some(dp),
            any_b.then_some(db),
            &mut grad[i * ch..(i + 1) * ch],
        );
    }
    (value, grad)
}

/// Loss value and post-filter candidate count after one PGD step; entry 0 of
/// a trace is the starting point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgdStep {
    pub loss: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PgdResult {
    /// Perturbation in HWC order.
    pub delta: Vec<f64>,
    pub trace: Vec<PgdStep>,
}

impl PgdResult {
    pub fn start_count(&self) -> usize {
        self.trace[0].count
    }

    pub fn final_count(&self) -> usize {
        self.trace.last().expect("trace has a starting entry").count
    }

    pub fn apply(&self, image: &Image) -> Image {
        image.add(&self.delta)
    }
}

/// Projected gradient ascent of `objective` w.r.t. the pixels of `image`.
///
/// Each step moves along the sign of the gradient (l-inf) or the normalized
/// gradient (l2), zeroes the masked pixels, projects onto the norm ball and
/// clips `image + delta` to `[0, 1]`.
pub fn pgd_objective(
    params: &DetectorParams,
    image: &Image,
    objective: &dyn RawObjective,
    budget: &PerturbationBudget,
    mask: Option<&PixelMask>,
    conf_threshold: f64,
    seed: u64,
) -> Result<PgdResult> {
    pgd_objective_observed(params, image, objective, budget, mask, conf_threshold, seed, &mut |_| {})
}

/// [`pgd_objective`] that also hands the raw prediction at every iterate,
/// starting point included, to `observe`.
#[allow(clippy::too_many_arguments)]
pub fn pgd_objective_observed(
    params: &DetectorParams,
    image: &Image,
    objective: &dyn RawObjective,
    budget: &PerturbationBudget,
    mask: Option<&PixelMask>,
    conf_threshold: f64,
    seed: u64,
    observe: &mut dyn FnMut(&RawPrediction),
) -> Result<PgdResult> {
    budget.validate()?;
    if let Some(m) = mask {
        m.check(image)?;
    }
    let arch = &params.arch;
    let n = image.data.len();
    let mut delta = vec![0.0; n];
    if budget.random_start {
        let mut r = rng(seed);
        match budget.norm {
            Norm::LInf => delta.iter_mut().for_each(|d| *d = r.random_range(-budget.epsilon..=budget.epsilon)),
            Norm::L2 => {
                delta.iter_mut().for_each(|d| *d = StandardNormal.sample(&mut r));
                let norm = budget.norm_of(&delta).max(f64::MIN_POSITIVE);
                let radius = budget.epsilon * r.random::<f64>();
                delta.iter_mut().for_each(|d| *d *= radius / norm);
            }
        }
        finish_step(image, &mut delta, budget, mask);
    }

    let step = budget.step();
    let mut trace = Vec::with_capacity(budget.steps + 1);
    for k in 0..=budget.steps {
        let x = image.add(&delta);
        let (raw, cache) = forward_cached(params, &x)?;
        observe(&raw);
        let (value, graw) = objective.evaluate(arch, &raw);
        trace.push(PgdStep { loss: value, count: count_candidates(arch, &raw, conf_threshold) });
        if k == budget.steps {
            break;
        }
        let (_, g) = backward(params, &cache, &graw, false, true);
        let mut g = g.expect("input gradient requested");
        if let Some(m) = mask {
            m.apply(&mut g);
        }
        match budget.norm {
            Norm::LInf => {
                for (d, gi) in delta.iter_mut().zip(&g) {
                    if *gi != 0.0 {
                        *d += step * gi.signum();
                    }
                }
            }
            Norm::L2 => {
                let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                if gn > 0.0 {
                    for (d, gi) in delta.iter_mut().zip(&g) {
                        *d += step * gi / gn;
                    }
                }
            }
        }
        finish_step(image, &mut delta, budget, mask);
    }
    Ok(PgdResult { delta, trace })
}

fn finish_step(image: &Image, delta: &mut [f64], budget: &PerturbationBudget, mask: Option<&PixelMask>) {
    if let Some(m) = mask {
        m.apply(delta);
    }
    budget.project(delta);
    for (d, &x) in delta.iter_mut().zip(&image.data) {
        *d = (x + *d).clamp(0.0, 1.0) - x;
    }
}

/// Post-NMS detections used as the clean reference of an attack.
pub fn clean_detections(params: &DetectorParams, image: &Image, nms_cfg: &NmsConfig) -> Result<Vec<Detection>> {
    Ok(crate::evalkit::detect(params, image, nms_cfg)?.0)
}

/// Runs the configured attack family on one image. The perturbation is
/// restricted to `cfg.region_mask` when set.
pub fn pgd(params: &DetectorParams, image: &Image, budget: &PerturbationBudget, cfg: &AttackConfig, seed: u64) -> Result<PgdResult> {
    let orig = match cfg.family {
        AttackFamily::Phantom => {
            let nms_cfg = NmsConfig { conf_threshold: cfg.conf_threshold, ..Default::default() };
            Some(clean_detections(params, image, &nms_cfg)?)
        }
        _ => None,
    };
    let objective = AttackObjective::new(&params.arch, cfg.clone(), orig)?;
    pgd_objective(params, image, &objective, budget, cfg.region_mask.as_ref(), cfg.conf_threshold, seed)
}

/// [`pgd`] over many images in parallel; image `i` uses seed `split(seed, i)`.
pub fn pgd_batch(params: &DetectorParams, images: &[&Image], budget: &PerturbationBudget, cfg: &AttackConfig, seed: u64) -> Result<Vec<PgdResult>> {
    images
        .par_iter()
        .enumerate()
        .map(|(i, img)| pgd(params, img, budget, cfg, split(seed, i as u64)))
        .collect()
}

/// Summary of one attack run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub family: String,
    pub norm: Norm,
    pub epsilon: f64,
    pub steps: usize,
    pub clean_count: usize,
    pub attacked_count: usize,
    pub per_step_trace: Vec<PgdStep>,
    pub seed: u64,
}

impl AttackRecord {
    pub fn new(cfg: &AttackConfig, budget: &PerturbationBudget, result: &PgdResult, seed: u64) -> Self {
        Self {
            family: cfg.family.label().to_string(),
            norm: budget.norm,
            epsilon: budget.epsilon,
            steps: budget.steps,
            clean_count: result.start_count(),
            attacked_count: result.final_count(),
            per_step_trace: result.trace.clone(),
            seed,
        }
    }
}

/// Candidates of the attacked image that pass the confidence filter and do
/// not overlap any clean detection at IoU 0.5 or more.
pub fn find_phantoms(clean_kept: &[Detection], attacked: &[Detection], conf_threshold: f64) -> Vec<Detection> {
    confidence_filter(attacked, conf_threshold)
        .into_iter()
        .filter(|d| clean_kept.iter().all(|c| iou(&c.bbox, &d.bbox) < 0.5))
        .collect()
}

/// Mask that is set everywhere except inside the ground-truth boxes.
pub fn background_mask(sample: &Sample) -> PixelMask {
    let (h, w) = (sample.image.height, sample.image.width);
    let mut m = PixelMask::ones(h, w);
    for o in &sample.objects {
        for y in 0..h {
            for x in 0..w {
                if o.bbox.contains_point(x as f64 + 0.5, y as f64 + 0.5) {
                    m.set(y, x, false);
                }
            }
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetedCount {
    pub image: usize,
    pub class_id: usize,
    /// Phantoms of the target class centered in the background.
    pub phantoms: usize,
}

/// Targeted background attack for every (image, class) pair. Each attack
/// perturbs and scores only background pixels.
pub fn targeted_semantics_experiment(
    params: &DetectorParams,
    samples: &[Sample],
    classes: &[usize],
    budget: &PerturbationBudget,
    seed: u64,
) -> Result<Vec<TargetedCount>> {
    for &c in classes {
        if c >= params.arch.num_classes {
            return Err(LabError::Config(format!("class {c} not in the model's {} classes", params.arch.num_classes)));
        }
    }
    let jobs: Vec<(usize, usize)> = (0..samples.len()).flat_map(|i| classes.iter().map(move |&c| (i, c))).collect();
    jobs.par_iter()
        .map(|&(i, c)| {
            let s = &samples[i];
            let region = background_mask(s);
            let cfg = AttackConfig {
                family: AttackFamily::Targeted,
                target_class: Some(c),
                region_mask: Some(region.clone()),
                ..Default::default()
            };
            let nms_cfg = NmsConfig { conf_threshold: cfg.conf_threshold, ..Default::default() };
            let clean = clean_detections(params, &s.image, &nms_cfg)?;
            let res = pgd(params, &s.image, budget, &cfg, split(seed, (i * classes.len() + c) as u64))?;
            let (raw, _) = forward_cached(params, &res.apply(&s.image))?;
            let phantoms = find_phantoms(&clean, &decode(&params.arch, &raw), cfg.conf_threshold)
                .iter()
                .filter(|d| d.class_id == c && region.contains_point(d.bbox.cx, d.bbox.cy))
                .count();
            Ok(TargetedCount { image: i, class_id: c, phantoms })
        })
        .collect()
}
