use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{detector_loss, LossBreakdown, LossWeights};
use super::network::{backward, forward_cached};
use super::{DetectorParams, Image, Sample};
use crate::error::{LabError, Result};
use crate::rng::{rng, split, split_named};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Learning rate at the end of the cosine schedule, as a fraction of `lr`.
    pub final_lr_fraction: f64,
    /// Steps of linear warmup before the cosine decay.
    #[serde(default)]
    pub warmup_steps: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr: 3e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 5e-4, final_lr_fraction: 0.05, warmup_steps: 50 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && (0.0..=1.0).contains(&self.final_lr_fraction);
        if ok {
            Ok(())
        } else {
            Err(LabError::Config(format!("invalid optimizer config {self:?}")))
        }
    }

    /// Learning rate at `step` of `total`: linear warmup, then cosine decay.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warm = self.warmup_steps.min(total / 2);
        if step < warm {
            return self.lr * (step + 1) as f64 / warm as f64;
        }
        let (step, total) = (step - warm, total - warm);
        let t = if total <= 1 { 0.0 } else { step as f64 / (total - 1) as f64 };
        let f = self.final_lr_fraction;
        self.lr * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Random horizontal flips.
    pub flip: bool,
    pub optimizer: OptimizerConfig,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 8,
            seed: 0,
            flip: true,
            optimizer: OptimizerConfig::default(),
            loss_weights: LossWeights::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: DetectorParams,
    /// Mean per-image loss of every epoch.
    pub loss_trace: Vec<LossBreakdown>,
    pub steps: usize,
}

/// Produces the image a training sample is evaluated at. Receives the
/// current weights, the (possibly flipped) sample and a per-sample seed.
pub type Perturb<'a> = dyn Fn(&DetectorParams, &Sample, u64) -> Result<Image> + Sync + 'a;

pub fn train(params0: &DetectorParams, data: &[Sample], cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(params0, data, cfg, &|_, s, _| Ok(s.image.clone()))
}

/// AdamW training on the detection loss evaluated at `perturb(...)` of each
/// sample. Per-image gradients may be computed in parallel; they are summed
/// in batch order so results do not depend on the thread count.
pub fn train_with(params0: &DetectorParams, data: &[Sample], cfg: &TrainConfig, perturb: &Perturb) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(LabError::Precondition("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(LabError::Config("batch_size must be positive".into()));
    }
    cfg.optimizer.validate()?;
    params0.check_finite()?;

    let mut params = params0.clone();
    let n = params.weights.len();
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let opt = cfg.optimizer;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = rng(split_named(cfg.seed, "shuffle"));
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_sum = LossBreakdown::default();
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(LossBreakdown, Vec<f64>)>> = batch
                .par_iter()
                .map(|&idx| {
                    let sample_seed = split(split(cfg.seed, epoch as u64), idx as u64);
                    let flipped;
                    let sample = if cfg.flip && rng(sample_seed).random_bool(0.5) {
                        flipped = data[idx].flipped();
                        &flipped
                    } else {
                        &data[idx]
                    };
                    let image = perturb(&params, sample, sample_seed)?;
                    let (raw, cache) = forward_cached(&params, &image)?;
                    let (b, graw) = detector_loss(&params.arch, &raw, &sample.objects, &cfg.loss_weights);
                    let (gp, _) = backward(&params, &cache, &graw, true, false);
                    Ok((b, gp.expect("parameter gradient requested")))
                })
                .collect();

            let mut grad = vec![0.0; n];
            let mut batch_loss = 0.0;
            for r in results {
                let (b, g) = r?;
                batch_loss += b.total;
                epoch_sum.cls += b.cls;
                epoch_sum.ciou += b.ciou;
                epoch_sum.obj += b.obj;
                epoch_sum.total += b.total;
                for (a, x) in grad.iter_mut().zip(&g) {
                    *a += x;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(LabError::Diverged { epoch, loss: batch_loss * scale });
            }

            step += 1;
            let lr = opt.lr_at(step - 1, total);
            let bc1 = 1.0 - opt.beta1.powi(step as i32);
            let bc2 = 1.0 - opt.beta2.powi(step as i32);
            for i in 0..n {
                let g = grad[i] * scale;
                m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g;
                v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g * g;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + opt.eps);
                params.weights[i] -= lr * (update + opt.weight_decay * params.weights[i]);
            }
        }
        let k = 1.0 / data.len() as f64;
        loss_trace.push(LossBreakdown {
            cls: epoch_sum.cls * k,
            ciou: epoch_sum.ciou * k,
            obj: epoch_sum.obj * k,
            total: epoch_sum.total * k,
        });
    }
    Ok(TrainReport { params, loss_trace, steps: step })
}
