//! NMS latency models and the frame-budget capacity solver.
//!
//! Two models are fitted from benchmark data:
//!
//! * [`PiecewiseModel`]: constant `T_base` up to a breakpoint `N_t`, then
//!   `a * |C|^2`.
//! * [`TwoTermModel`]: `alpha * |C|^2 / S_iou + beta * |C| / B`, where
//!   `S_iou` and `B` are measured unit rates of the compute and transfer
//!   phases and `alpha`, `beta` absorb the remaining constants.
//!
//! [`capacity`] inverts the two-term model: the largest candidate count whose
//! predicted NMS time fits in a frame budget after the backbone's share.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::nms::NmsTrace;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseModel {
    pub t_base_ns: u64,
    pub n_t: u64,
    /// Seconds per box squared.
    pub a: f64,
    /// Coefficient of determination of the quadratic segment.
    pub r2: f64,
    /// True when no sample fell in the flat regime; `t_base_ns` is then 0.
    pub flat_segment_missing: bool,
}

impl PiecewiseModel {
    pub fn predict_secs(&self, n: f64) -> f64 {
        if n <= self.n_t as f64 {
            self.t_base_ns as f64 * 1e-9
        } else {
            self.a * n * n
        }
    }
}

/// Fits the piecewise constant/quadratic model to `(|C|, seconds)` samples.
///
/// The breakpoint is searched over the observed sizes; for each candidate the
/// flat level is the mean of the samples at or below it and `a` is the
/// least-squares slope of time against `|C|^2` above it.
pub fn fit_piecewise(samples: &[(u64, f64)]) -> Result<PiecewiseModel> {
    if samples.len() < 6 {
        return Err(LabError::FitDegenerate(format!(
            "need at least 6 samples, got {}",
            samples.len()
        )));
    }
    let min_n = samples.iter().map(|s| s.0).min().unwrap_or(0).max(1);
    let max_n = samples.iter().map(|s| s.0).max().unwrap_or(0);
    if (max_n as f64) < 10.0 * min_n as f64 {
        return Err(LabError::FitDegenerate(format!(
            "sizes span {min_n}..{max_n}, less than one order of magnitude"
        )));
    }

    let mut sizes: Vec<u64> = samples.iter().map(|s| s.0).collect();
    sizes.sort_unstable();
    sizes.dedup();

    let sse_const = {
        let mean = samples.iter().map(|s| s.1).sum::<f64>() / samples.len() as f64;
        samples.iter().map(|s| (s.1 - mean).powi(2)).sum::<f64>()
    };

    struct Candidate {
        n_t: u64,
        t_base: f64,
        a: f64,
        sse: f64,
        flat_missing: bool,
    }
    let mut best: Option<Candidate> = None;
    // Breakpoint below the smallest size (no flat region), or at any size
    // leaving at least two samples in the quadratic region.
    let breakpoints = std::iter::once(None).chain(sizes.iter().copied().map(Some));
    for bp in breakpoints {
        let (flat, quad): (Vec<&(u64, f64)>, Vec<&(u64, f64)>) =
            samples.iter().partition(|s| bp.is_some_and(|b| s.0 <= b));
        if quad.len() < 2 {
            continue;
        }
        let t_base =
            if flat.is_empty() { 0.0 } else { flat.iter().map(|s| s.1).sum::<f64>() / flat.len() as f64 };
        let (sxy, sxx) = quad.iter().fold((0.0, 0.0), |(sxy, sxx), s| {
            let x = (s.0 as f64).powi(2);
            (sxy + x * s.1, sxx + x * x)
        });
        if sxx <= 0.0 {
            continue;
        }
        let a = sxy / sxx;
        let sse = flat.iter().map(|s| (s.1 - t_base).powi(2)).sum::<f64>()
            + quad.iter().map(|s| (s.1 - a * (s.0 as f64).powi(2)).powi(2)).sum::<f64>();
        // Ties go to the larger breakpoint.
        if best.as_ref().is_none_or(|b| sse <= b.sse) {
            best = Some(Candidate {
                n_t: bp.unwrap_or(0),
                t_base,
                a,
                sse,
                flat_missing: flat.is_empty(),
            });
        }
    }
    let best = best.ok_or_else(|| LabError::FitDegenerate("no admissible breakpoint".into()))?;
    if best.a <= 0.0 || sse_const <= best.sse {
        return Err(LabError::FitDegenerate("samples show no quadratic regime".into()));
    }

    let quad: Vec<_> = samples.iter().filter(|s| s.0 > best.n_t || best.flat_missing).collect();
    let mean_q = quad.iter().map(|s| s.1).sum::<f64>() / quad.len() as f64;
    let sst: f64 = quad.iter().map(|s| (s.1 - mean_q).powi(2)).sum();
    let ssr: f64 = quad.iter().map(|s| (s.1 - best.a * (s.0 as f64).powi(2)).powi(2)).sum();
    let r2 = if sst > 0.0 { 1.0 - ssr / sst } else if ssr == 0.0 { 1.0 } else { 0.0 };

    Ok(PiecewiseModel {
        t_base_ns: (best.t_base * 1e9).round() as u64,
        n_t: best.n_t,
        a: best.a,
        r2,
        flat_segment_missing: best.flat_missing,
    })
}

/// Compute-plus-transfer NMS cost model with the backbone's forward time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoTermModel {
    pub alpha: f64,
    pub beta: f64,
    /// IoU operations per second.
    pub s_iou: f64,
    /// Transfer operations per second.
    pub b: f64,
    pub t_backbone_ns: u64,
    /// Constant term found during calibration; reported, not used by
    /// [`TwoTermModel::predict_secs`].
    pub intercept_ns: u64,
    /// Multiplier mapping a candidate count to the workload it stands for
    /// (1 = as measured).
    pub count_scale: f64,
}

impl TwoTermModel {
    pub fn new(alpha: f64, beta: f64, s_iou: f64, b: f64, t_backbone_ns: u64) -> Self {
        Self { alpha, beta, s_iou, b, t_backbone_ns, intercept_ns: 0, count_scale: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.alpha, self.beta, self.s_iou, self.b, self.count_scale]
            .iter()
            .all(|v| v.is_finite());
        if !finite
            || self.alpha < 0.0
            || self.beta < 0.0
            || self.s_iou <= 0.0
            || self.b <= 0.0
            || self.count_scale <= 0.0
            || (self.alpha == 0.0 && self.beta == 0.0)
        {
            return Err(LabError::Config(format!("invalid latency model parameters: {self:?}")));
        }
        Ok(())
    }

    /// Coefficients `(q, l)` of `q x^2 + l x` in seconds for count `x`.
    fn coefficients(&self) -> (f64, f64) {
        let s = self.count_scale;
        (self.alpha * s * s / self.s_iou, self.beta * s / self.b)
    }

    /// Predicted NMS time in seconds for `n` candidates.
    pub fn predict_secs(&self, n: f64) -> f64 {
        let (q, l) = self.coefficients();
        q * n * n + l * n
    }

    pub fn predict_time(&self, n: u64) -> Duration {
        Duration::from_secs_f64(self.predict_secs(n as f64))
    }

    pub fn t_backbone_secs(&self) -> f64 {
        self.t_backbone_ns as f64 * 1e-9
    }

    /// Same cost model, with candidate counts interpreted as `scale` times
    /// as many boxes.
    pub fn with_count_scale(mut self, scale: f64) -> Self {
        self.count_scale = scale;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityReport {
    pub t_budget_ns: u64,
    pub c_max: u64,
    pub model: TwoTermModel,
}

/// Frame budget in seconds for a target frame rate.
pub fn budget_from_fps(fps: f64) -> f64 {
    1.0 / fps
}

/// Largest candidate count whose predicted NMS time fits in
/// `t_budget_secs` minus the backbone time.
///
/// Solves the positive root of `q x^2 + l x - (T - T_backbone) = 0` and then
/// nudges the floor so that
/// `predict(c_max) <= T - T_backbone < predict(c_max + 1)` holds exactly in
/// floating point.
pub fn capacity(model: &TwoTermModel, t_budget_secs: f64) -> Result<CapacityReport> {
    model.validate()?;
    let remaining = t_budget_secs - model.t_backbone_secs();
    if !(remaining > 0.0) {
        return Err(LabError::BudgetInfeasible {
            budget_s: t_budget_secs,
            backbone_s: model.t_backbone_secs(),
        });
    }
    let (q, l) = model.coefficients();
    let root = if q > 0.0 {
        // Rationalized form avoids cancellation when l^2 >> 4 q T.
        2.0 * remaining / (l + (l * l + 4.0 * q * remaining).sqrt())
    } else {
        remaining / l
    };
    let mut c = root.floor().max(0.0).min(u64::MAX as f64 / 4.0) as u64;
    while model.predict_secs((c + 1) as f64) <= remaining {
        c += 1;
    }
    while c > 0 && model.predict_secs(c as f64) > remaining {
        c -= 1;
    }
    Ok(CapacityReport { t_budget_ns: (t_budget_secs * 1e9).round() as u64, c_max: c, model: *model })
}

/// Fits a [`TwoTermModel`] to NMS traces.
///
/// Unit rates come from the traces' operation counts and phase times; the
/// quadratic and linear coefficients come from a non-negative least-squares
/// fit of total time against `(|C|^2, |C|)` plus, when `with_intercept`, a
/// constant.
pub fn calibrate(traces: &[NmsTrace], t_backbone_ns: u64, with_intercept: bool) -> Result<TwoTermModel> {
    let mut sizes: Vec<u64> = traces.iter().map(|t| t.input_count).collect();
    sizes.sort_unstable();
    sizes.dedup();
    if sizes.len() < 5 {
        return Err(LabError::FitDegenerate(format!(
            "traces cover {} distinct sizes, need at least 5",
            sizes.len()
        )));
    }
    let iou_ops: u64 = traces.iter().map(|t| t.iou_ops).sum();
    let transfer_ops: u64 = traces.iter().map(|t| t.transfer_ops).sum();
    let compute_s: f64 = traces.iter().map(|t| t.wall_time_compute as f64 * 1e-9).sum();
    let logic_s: f64 = traces.iter().map(|t| t.wall_time_logic as f64 * 1e-9).sum();
    if iou_ops == 0 || transfer_ops == 0 || compute_s <= 0.0 || logic_s <= 0.0 {
        return Err(LabError::FitDegenerate("traces carry no measurable work".into()));
    }
    let s_iou = iou_ops as f64 / compute_s;
    let b = transfer_ops as f64 / logic_s;

    let rows: Vec<([f64; 3], f64)> = traces
        .iter()
        .map(|t| {
            let n = t.input_count as f64;
            ([n * n, n, 1.0], t.total_ns() as f64 * 1e-9)
        })
        .collect();
    let ncols = if with_intercept { 3 } else { 2 };
    let coef = nnls_small(&rows, ncols)
        .ok_or_else(|| LabError::FitDegenerate("rank-deficient design".into()))?;
    if coef[0] == 0.0 && coef[1] == 0.0 {
        return Err(LabError::FitDegenerate("no growth with candidate count".into()));
    }
    Ok(TwoTermModel {
        alpha: coef[0] * s_iou,
        beta: coef[1] * b,
        s_iou,
        b,
        t_backbone_ns,
        intercept_ns: (coef[2] * 1e9).round() as u64,
        count_scale: 1.0,
    })
}

/// Non-negative least squares for at most three columns by enumerating
/// active sets. Returns `None` if no subset with a nonzero column is solvable.
fn nnls_small(rows: &[([f64; 3], f64)], ncols: usize) -> Option<[f64; 3]> {
    // Column scaling keeps the normal equations well conditioned.
    let mut scale = [1.0; 3];
    for (j, s) in scale.iter_mut().enumerate().take(ncols) {
        let norm = rows.iter().map(|r| r.0[j] * r.0[j]).sum::<f64>().sqrt();
        if norm > 0.0 {
            *s = norm;
        }
    }
    let mut best: Option<([f64; 3], f64)> = None;
    for mask in 1u32..(1 << ncols) {
        let cols: Vec<usize> = (0..ncols).filter(|j| mask & (1 << j) != 0).collect();
        let k = cols.len();
        let mut ata = vec![vec![0.0; k]; k];
        let mut aty = vec![0.0; k];
        for (x, y) in rows {
            for (p, &cp) in cols.iter().enumerate() {
                let xp = x[cp] / scale[cp];
                aty[p] += xp * y;
                for (q, &cq) in cols.iter().enumerate() {
                    ata[p][q] += xp * x[cq] / scale[cq];
                }
            }
        }
        let Some(sol) = solve_dense(ata, aty) else { continue };
        if sol.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            continue;
        }
        let mut coef = [0.0; 3];
        for (p, &c) in cols.iter().enumerate() {
            coef[c] = sol[p] / scale[c];
        }
        let sse: f64 = rows
            .iter()
            .map(|(x, y)| {
                let pred: f64 = (0..3).map(|j| coef[j] * x[j]).sum();
                (y - pred).powi(2)
            })
            .sum();
        if best.as_ref().is_none_or(|b| sse < b.1) {
            best = Some((coef, sse));
        }
    }
    best.map(|b| b.0)
}

fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

/// On-disk latency model: the piecewise fit and the two-term model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyModelFile {
    pub format_version: u32,
    pub fingerprint: String,
    pub t_base_ns: u64,
    pub n_t: u64,
    pub a: f64,
    pub alpha: f64,
    pub beta: f64,
    pub s_iou: f64,
    pub b: f64,
    pub t_backbone_ns: u64,
    pub r2: f64,
    #[serde(default)]
    pub intercept_ns: u64,
    #[serde(default = "one")]
    pub count_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl LatencyModelFile {
    pub fn new(piecewise: &PiecewiseModel, two_term: &TwoTermModel, fingerprint: String) -> Self {
        Self {
            format_version: MODEL_FORMAT_VERSION,
            fingerprint,
            t_base_ns: piecewise.t_base_ns,
            n_t: piecewise.n_t,
            a: piecewise.a,
            alpha: two_term.alpha,
            beta: two_term.beta,
            s_iou: two_term.s_iou,
            b: two_term.b,
            t_backbone_ns: two_term.t_backbone_ns,
            r2: piecewise.r2,
            intercept_ns: two_term.intercept_ns,
            count_scale: two_term.count_scale,
        }
    }

    pub fn two_term(&self) -> TwoTermModel {
        TwoTermModel {
            alpha: self.alpha,
            beta: self.beta,
            s_iou: self.s_iou,
            b: self.b,
            t_backbone_ns: self.t_backbone_ns,
            intercept_ns: self.intercept_ns,
            count_scale: self.count_scale,
        }
    }

    pub fn piecewise(&self) -> PiecewiseModel {
        PiecewiseModel {
            t_base_ns: self.t_base_ns,
            n_t: self.n_t,
            a: self.a,
            r2: self.r2,
            flat_segment_missing: self.t_base_ns == 0,
        }
    }
}
