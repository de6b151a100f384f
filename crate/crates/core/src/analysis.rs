//! Measurements on a frozen detector: how closely attack trajectories of
//! different losses agree, how far background and object regions are from
//! producing a phantom, where phantoms appear, and how the attacked count
//! responds to the protected-window size.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{
    background_mask, clean_detections, find_phantoms, pgd_objective_observed, AttackConfig, AttackFamily, AttackObjective, Norm,
    PerturbationBudget, PixelMask,
};
use crate::defense::{build_mask, masked_pgd};
use crate::detector::decode::candidate_view;
use crate::detector::{
    backward, count_candidates, decode, forward, forward_cached, DetectorParams, Image, LossSelector,
    LossTerm, RawObjective, RawPrediction, Sample,
};
use crate::error::{LabError, Result};
use crate::geometry::{iou, Detection};
use crate::nms::NmsConfig;
use crate::rng::split;

// ---------------------------------------------------------------------------
// Statistics helpers

/// Cosine similarity; identical inputs give exactly 1.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Pearson correlation; identical inputs give exactly 1 and a constant
/// input correlates 0 with anything else.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        return 1.0;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// Ranks starting at 1; ties share their average rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

// ---------------------------------------------------------------------------
// Loss correlation

/// Loss driving one PGD trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AnalysisLoss {
    /// A latency-attack objective.
    Adv(AttackConfig),
    /// Objectness term of the detection loss against the ground truth.
    Obj,
    /// Classification term of the detection loss against the ground truth.
    Cls,
}

impl AnalysisLoss {
    pub fn label(&self) -> &'static str {
        match self {
            AnalysisLoss::Adv(_) => "adv",
            AnalysisLoss::Obj => "obj",
            AnalysisLoss::Cls => "cls",
        }
    }

    fn objective(&self, params: &DetectorParams, sample: &Sample) -> Result<Box<dyn RawObjective>> {
        let objects = &sample.objects;
        Ok(match self {
            AnalysisLoss::Adv(cfg) => {
                let orig = match cfg.family {
                    AttackFamily::Phantom => {
                        let nms_cfg = NmsConfig { conf_threshold: cfg.conf_threshold, ..Default::default() };
                        Some(clean_detections(params, &sample.image, &nms_cfg)?)
                    }
                    _ => None,
                };
                Box::new(AttackObjective::new(&params.arch, cfg.clone(), orig)?)
            }
            AnalysisLoss::Obj => Box::new(LossSelector::new(LossTerm::Obj, objects.to_vec())),
            AnalysisLoss::Cls => Box::new(LossSelector::new(LossTerm::Cls, objects.to_vec())),
        })
    }
}

/// Decoded objectness and class probabilities of every candidate, in
/// candidate order. Boxes are left out.
pub fn output_vector(params: &DetectorParams, raw: &RawPrediction) -> Vec<f64> {
    let arch = &params.arch;
    let mut out = Vec::with_capacity(arch.num_candidates() * (1 + arch.num_classes));
    for (i, cell) in arch.cells().iter().enumerate() {
        let v = candidate_view(arch, cell, raw.candidate(i));
        out.push(v.objectness);
        out.extend_from_slice(&v.probs);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepCorrelation {
    pub cosine: f64,
    pub pearson: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTrace {
    pub loss_a: String,
    pub loss_b: String,
    /// `per_image[i][k]`: correlation at PGD iterate `k` (0 = start).
    pub per_image: Vec<Vec<StepCorrelation>>,
    pub median_cosine: Vec<f64>,
    pub median_pearson: Vec<f64>,
}

fn trajectory_outputs(
    params: &DetectorParams,
    sample: &Sample,
    loss: &AnalysisLoss,
    budget: &PerturbationBudget,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let objective = loss.objective(params, sample)?;
    let mut outs = Vec::with_capacity(budget.steps + 1);
    pgd_objective_observed(params, &sample.image, objective.as_ref(), budget, None, NmsConfig::default().conf_threshold, seed, &mut |raw| {
        outs.push(output_vector(params, raw))
    })?;
    Ok(outs)
}

/// Runs one PGD trajectory per loss from the same start on every sample and
/// correlates the two detector outputs iterate by iterate.
pub fn loss_correlation(
    params: &DetectorParams,
    samples: &[Sample],
    loss_a: &AnalysisLoss,
    loss_b: &AnalysisLoss,
    budget: &PerturbationBudget,
    seed: u64,
) -> Result<CorrelationTrace> {
    budget.validate()?;
    let per_image: Vec<Vec<StepCorrelation>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let seed = split(seed, i as u64);
            let a = trajectory_outputs(params, s, loss_a, budget, seed)?;
            let b = trajectory_outputs(params, s, loss_b, budget, seed)?;
            Ok(a.iter().zip(&b).map(|(x, y)| StepCorrelation { cosine: cosine_similarity(x, y), pearson: pearson(x, y) }).collect())
        })
        .collect::<Result<_>>()?;
    let steps = budget.steps + 1;
    let column = |f: fn(&StepCorrelation) -> f64| -> Vec<f64> {
        (0..steps).map(|k| median(&per_image.iter().map(|t| f(&t[k])).collect::<Vec<_>>())).collect()
    };
    let median_cosine = column(|c| c.cosine);
    let median_pearson = column(|c| c.pearson);
    Ok(CorrelationTrace {
        loss_a: loss_a.label().into(),
        loss_b: loss_b.label().into(),
        per_image,
        median_cosine,
        median_pearson,
    })
}

// ---------------------------------------------------------------------------
// Boundary margins

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    /// Pixels outside every ground-truth box.
    Background,
    /// Pixels inside some ground-truth box.
    Object,
}

pub fn region_mask(sample: &Sample, kind: RegionKind) -> PixelMask {
    let mut m = background_mask(sample);
    if kind == RegionKind::Object {
        m.data.iter_mut().for_each(|b| *b = !*b);
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarginSearch {
    /// Norm in which the direction is normalized and the margin reported.
    pub norm: Norm,
    pub conf_threshold: f64,
    /// Largest step along the direction that is tried.
    pub t_max: f64,
    /// Spacing of the coarse scan that finds the first crossing. Fixed in
    /// absolute units, so a larger `t_max` scans a superset of points.
    pub scan_step: f64,
    /// Bisection stops once the bracket is narrower than `tol * t_max`.
    pub tol: f64,
}

impl Default for MarginSearch {
    fn default() -> Self {
        Self { norm: Norm::L2, conf_threshold: 0.25, t_max: 16.0, scan_step: 0.5, tol: 1e-3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginEstimate {
    pub region: RegionKind,
    /// Directional distance to the first phantom, an upper bound on the
    /// true margin. `None` when no phantom appears up to `t_max`.
    pub upper_bound: Option<f64>,
    /// Largest tried step known not to produce a phantom.
    pub bracket_lo: f64,
    /// Smallest tried step known to produce one (`t_max` if none does).
    pub bracket_hi: f64,
    pub evaluations: usize,
}

impl MarginEstimate {
    /// The upper bound, or `t_max` (a lower bound) when nothing crossed.
    pub fn censored(&self) -> f64 {
        self.upper_bound.unwrap_or(self.bracket_hi)
    }
}

/// Whether `image` has a phantom centered in `region`: a candidate at or
/// above the threshold with IoU below 0.5 against every reference detection.
fn has_phantom(params: &DetectorParams, image: &Image, region: &PixelMask, reference: &[Detection], thr: f64) -> Result<bool> {
    let raw = forward(params, image)?;
    Ok(decode(&params.arch, &raw).iter().any(|d| {
        d.score() >= thr
            && region.contains_point(d.bbox.cx, d.bbox.cy)
            && reference.iter().all(|r| iou(&r.bbox, &d.bbox) < 0.5)
    }))
}

/// Default search direction: the objectness-loss ascent direction limited to
/// `region` and scaled to unit norm.
pub fn objectness_direction(params: &DetectorParams, sample: &Sample, region: &PixelMask, norm: Norm) -> Result<Vec<f64>> {
    let (raw, cache) = forward_cached(params, &sample.image)?;
    let (_, graw) = LossSelector::new(LossTerm::Obj, sample.objects.clone()).evaluate(&params.arch, &raw);
    let mut g = backward(params, &cache, &graw, false, true).1.expect("input gradient requested");
    for (px, &set) in g.chunks_exact_mut(3).zip(&region.data) {
        if !set {
            px.fill(0.0);
        }
    }
    if norm == Norm::LInf {
        g.iter_mut().for_each(|v| *v = if *v == 0.0 { 0.0 } else { v.signum() });
    }
    let n = PerturbationBudget::new(norm, 1.0, 1).norm_of(&g);
    if n > 0.0 {
        g.iter_mut().for_each(|v| *v /= n);
    }
    Ok(g)
}

/// Line search for the smallest step `t` along `direction` at which
/// `image + t direction` (clipped to `[0, 1]`) shows a phantom in the region.
///
/// `reference` holds the detections a phantom must not overlap; by default
/// these are the clean post-NMS detections.
pub fn boundary_margin(
    params: &DetectorParams,
    sample: &Sample,
    kind: RegionKind,
    direction: Option<&[f64]>,
    reference: Option<&[Detection]>,
    search: &MarginSearch,
) -> Result<MarginEstimate> {
    if !(search.t_max > 0.0 && search.scan_step > 0.0 && search.tol > 0.0) {
        return Err(LabError::Config(format!("invalid margin search {search:?}")));
    }
    let region = region_mask(sample, kind);
    let owned_dir;
    let dir = match direction {
        Some(d) => {
            if d.len() != sample.image.data.len() {
                return Err(LabError::Shape { expected: sample.image.data.len().to_string(), got: d.len().to_string() });
            }
            d
        }
        None => {
            owned_dir = objectness_direction(params, sample, &region, search.norm)?;
            &owned_dir
        }
    };
    let owned_ref;
    let reference = match reference {
        Some(r) => r,
        None => {
            let nms_cfg = NmsConfig { conf_threshold: search.conf_threshold, ..Default::default() };
            owned_ref = clean_detections(params, &sample.image, &nms_cfg)?;
            &owned_ref
        }
    };
    let dnorm = PerturbationBudget::new(search.norm, 1.0, 1).norm_of(dir);
    let mut evaluations = 0;
    let mut crosses = |t: f64| -> Result<bool> {
        evaluations += 1;
        let delta: Vec<f64> = dir.iter().map(|d| t * d).collect();
        has_phantom(params, &sample.image.add(&delta), &region, reference, search.conf_threshold)
    };

    let est = |lo: f64, hi: f64, found: bool, evaluations: usize| MarginEstimate {
        region: kind,
        upper_bound: found.then_some(hi * dnorm),
        bracket_lo: lo * dnorm,
        bracket_hi: hi * dnorm,
        evaluations,
    };
    if crosses(0.0)? {
        return Ok(est(0.0, 0.0, true, evaluations));
    }
    // Coarse scan for the first crossing, then bisection inside that cell.
    let mut lo = 0.0;
    let mut hi = None;
    let mut k = 1;
    loop {
        let t = (k as f64 * search.scan_step).min(search.t_max);
        if crosses(t)? {
            hi = Some(t);
            break;
        }
        lo = t;
        if t >= search.t_max {
            break;
        }
        k += 1;
    }
    let Some(mut hi) = hi else {
        return Ok(est(lo, search.t_max, false, evaluations));
    };
    while hi - lo > search.tol * search.t_max {
        let mid = 0.5 * (lo + hi);
        if crosses(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(est(lo, hi, true, evaluations))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginComparison {
    pub mean_background: f64,
    pub mean_object: f64,
    /// Images where no phantom appeared up to `t_max`; their margin enters
    /// the means as `t_max`.
    pub background_no_crossing: usize,
    pub object_no_crossing: usize,
    pub images: usize,
}

/// Background and object margins over images that have both regions.
pub fn compare_margins(params: &DetectorParams, samples: &[Sample], search: &MarginSearch) -> Result<(Vec<(MarginEstimate, MarginEstimate)>, MarginComparison)> {
    let pairs: Vec<(MarginEstimate, MarginEstimate)> = samples
        .par_iter()
        .filter(|s| {
            let m = background_mask(s);
            m.count_ones() > 0 && m.count_zeros() > 0
        })
        .map(|s| {
            Ok((
                boundary_margin(params, s, RegionKind::Background, None, None, search)?,
                boundary_margin(params, s, RegionKind::Object, None, None, search)?,
            ))
        })
        .collect::<Result<_>>()?;
    let n = pairs.len();
    if n == 0 {
        return Err(LabError::Precondition("no image has both background and object pixels".into()));
    }
    let cmp = MarginComparison {
        mean_background: pairs.iter().map(|p| p.0.censored()).sum::<f64>() / n as f64,
        mean_object: pairs.iter().map(|p| p.1.censored()).sum::<f64>() / n as f64,
        background_no_crossing: pairs.iter().filter(|p| p.0.upper_bound.is_none()).count(),
        object_no_crossing: pairs.iter().filter(|p| p.1.upper_bound.is_none()).count(),
        images: n,
    };
    Ok((pairs, cmp))
}

// ---------------------------------------------------------------------------
// Phantom statistics

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImagePhantoms {
    pub on_object: usize,
    pub off_object: usize,
    /// Sum of `|delta|` over object pixels divided by the on-object phantom
    /// count; `None` without on-object phantoms.
    pub mass_per_on_phantom: Option<f64>,
    pub mass_per_off_phantom: Option<f64>,
}

impl ImagePhantoms {
    pub fn total(&self) -> usize {
        self.on_object + self.off_object
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomStats {
    pub per_image: Vec<ImagePhantoms>,
    /// Fraction of images with at least as many off-object as on-object
    /// phantoms.
    pub off_dominant_fraction: f64,
}

/// Phantoms of one attacked image, split by whether their center lies in a
/// ground-truth box. `delta` is the HWC perturbation that produced
/// `attacked`.
pub fn image_phantoms(
    params: &DetectorParams,
    sample: &Sample,
    attacked: &Image,
    delta: &[f64],
    conf_threshold: f64,
) -> Result<ImagePhantoms> {
    let nms_cfg = NmsConfig { conf_threshold, ..Default::default() };
    let clean = clean_detections(params, &sample.image, &nms_cfg)?;
    let raw = forward(params, attacked)?;
    let phantoms = find_phantoms(&clean, &decode(&params.arch, &raw), conf_threshold);
    let on = phantoms.iter().filter(|d| sample.objects.iter().any(|o| o.bbox.contains_point(d.bbox.cx, d.bbox.cy))).count();
    let off = phantoms.len() - on;
    let bg = background_mask(sample);
    let (mut mass_on, mut mass_off) = (0.0, 0.0);
    for (px, &is_bg) in delta.chunks_exact(3).zip(&bg.data) {
        let m: f64 = px.iter().map(|d| d.abs()).sum();
        if is_bg {
            mass_off += m;
        } else {
            mass_on += m;
        }
    }
    let per = |mass: f64, n: usize| (n > 0).then(|| mass / n as f64);
    Ok(ImagePhantoms { on_object: on, off_object: off, mass_per_on_phantom: per(mass_on, on), mass_per_off_phantom: per(mass_off, off) })
}

pub fn phantom_stats(
    params: &DetectorParams,
    samples: &[Sample],
    deltas: &[Vec<f64>],
    conf_threshold: f64,
) -> Result<PhantomStats> {
    if samples.len() != deltas.len() {
        return Err(LabError::Shape { expected: format!("{} perturbations", samples.len()), got: deltas.len().to_string() });
    }
    let per_image: Vec<ImagePhantoms> = samples
        .par_iter()
        .zip(deltas)
        .map(|(s, d)| image_phantoms(params, s, &s.image.add(d), d, conf_threshold))
        .collect::<Result<_>>()?;
    let off_dominant_fraction = if per_image.is_empty() {
        0.0
    } else {
        per_image.iter().filter(|p| p.off_object >= p.on_object).count() as f64 / per_image.len() as f64
    };
    Ok(PhantomStats { per_image, off_dominant_fraction })
}

// ---------------------------------------------------------------------------
// Mask-ratio sweep

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub ratio: f64,
    pub mean_perturbable_pixels: f64,
    pub mean_attacked_count: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicitySweep {
    pub points: Vec<SweepPoint>,
    pub clean_mean_count: f64,
    /// Spearman correlation between perturbable-pixel count and attacked
    /// count across the sweep.
    pub spearman: f64,
}

/// Masked objectness PGD at each ratio; image `i` uses the same seed at
/// every ratio.
pub fn monotonicity_sweep(
    params: &DetectorParams,
    samples: &[Sample],
    ratios: &[f64],
    budget: &PerturbationBudget,
    conf_threshold: f64,
    seed: u64,
) -> Result<MonotonicitySweep> {
    if ratios.windows(2).any(|w| w[1] < w[0]) {
        return Err(LabError::Config("ratios must be sorted ascending".into()));
    }
    if samples.is_empty() {
        return Err(LabError::Precondition("no images to sweep".into()));
    }
    let n = samples.len() as f64;
    let arch = &params.arch;
    let clean: Vec<usize> = samples
        .par_iter()
        .map(|s| Ok(count_candidates(arch, &forward(params, &s.image)?, conf_threshold)))
        .collect::<Result<_>>()?;
    let mut points = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let per: Vec<(usize, usize)> = samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let mask = build_mask(&s.objects, ratio, s.image.height, s.image.width)?;
                let res = masked_pgd(params, &s.image, &s.objects, &mask, budget, split(seed, i as u64))?;
                let count = count_candidates(arch, &forward(params, &res.apply(&s.image))?, conf_threshold);
                Ok((mask.count_ones(), count))
            })
            .collect::<Result<_>>()?;
        points.push(SweepPoint {
            ratio,
            mean_perturbable_pixels: per.iter().map(|p| p.0 as f64).sum::<f64>() / n,
            mean_attacked_count: per.iter().map(|p| p.1 as f64).sum::<f64>() / n,
        });
    }
    let px: Vec<f64> = points.iter().map(|p| p.mean_perturbable_pixels).collect();
    let ct: Vec<f64> = points.iter().map(|p| p.mean_attacked_count).collect();
    Ok(MonotonicitySweep {
        spearman: spearman(&px, &ct),
        clean_mean_count: clean.iter().sum::<usize>() as f64 / n,
        points,
    })
}
