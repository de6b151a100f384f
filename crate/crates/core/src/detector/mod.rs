//! Toy anchor-free single-stage detector: three stride-2 convolutions feeding
//! three grid heads (strides 2, 4, 8), with analytic gradients w.r.t. both
//! weights and input pixels. Each head also sees the next deeper feature map,
//! upsampled to its grid.

mod checkpoint;
pub(crate) mod conv;
pub(crate) mod decode;
mod loss;
mod network;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use decode::{count_candidates, decode, CandidateView};
pub use loss::{assign, detector_loss, LossBreakdown, LossSelector, LossTerm, LossWeights};
pub use network::{backward, forward, forward_cached, grad_input, profile_backbone, ForwardCache, RawObjective};
pub use train::{train, train_with, OptimizerConfig, Perturb, TrainConfig, TrainReport};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::geometry::BBox;
use conv::ConvShape;

/// How objectness is produced by each head cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Separate objectness logit; class scores are a softmax.
    #[default]
    Objectness,
    /// No separate objectness: class scores are independent sigmoids and
    /// objectness is the largest of them. The objectness channel is unused.
    ClassOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub channels: [usize; 3],
    pub backbone_kernels: [usize; 3],
    pub head_kernels: [usize; 3],
    #[serde(default)]
    pub head_mode: HeadMode,
    /// Initial bias of the objectness channel.
    pub objectness_bias: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_classes: 3,
            channels: [16, 32, 32],
            backbone_kernels: [5, 5, 3],
            head_kernels: [7, 5, 5],
            head_mode: HeadMode::Objectness,
            objectness_bias: -4.6,
        }
    }
}

pub const NUM_SCALES: usize = 3;
pub(crate) const NUM_LAYERS: usize = 6;

/// One cell of one head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellInfo {
    pub scale: usize,
    pub gx: usize,
    pub gy: usize,
    pub stride: f64,
    /// Log of the box side at zero raw size output.
    pub log_mid: f64,
    /// Half-width of the log-size range.
    pub log_half: f64,
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 8 != 0 {
            return Err(LabError::Config(format!(
                "image_size must be a positive multiple of 8, got {}",
                self.image_size
            )));
        }
        if self.num_classes < 2 {
            return Err(LabError::Config("num_classes must be at least 2".into()));
        }
        for &k in self.backbone_kernels.iter().chain(&self.head_kernels) {
            if k % 2 == 0 {
                return Err(LabError::Config(format!("kernel sizes must be odd, got {k}")));
            }
        }
        if self.channels.contains(&0) {
            return Err(LabError::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Channels emitted per cell: objectness, 4 box terms, class logits.
    pub fn cell_channels(&self) -> usize {
        5 + self.num_classes
    }

    pub fn stride(&self, scale: usize) -> usize {
        2 << scale
    }

    pub fn grid(&self, scale: usize) -> usize {
        self.image_size / self.stride(scale)
    }

    /// Range `(lo, hi)` of decoded box sides at a scale: half a stride up to
    /// sixteen strides, never more than the image.
    pub fn size_range(&self, scale: usize) -> (f64, f64) {
        let s = self.stride(scale) as f64;
        (0.5 * s, (16.0 * s).min(self.image_size as f64))
    }

    pub fn num_candidates(&self) -> usize {
        (0..NUM_SCALES).map(|s| self.grid(s) * self.grid(s)).sum()
    }

    /// Index of the first candidate of `scale` in the flat candidate order.
    pub fn scale_offset(&self, scale: usize) -> usize {
        (0..scale).map(|s| self.grid(s) * self.grid(s)).sum()
    }

    pub fn cells(&self) -> Vec<CellInfo> {
        let mut out = Vec::with_capacity(self.num_candidates());
        for scale in 0..NUM_SCALES {
            let g = self.grid(scale);
            for gy in 0..g {
                for gx in 0..g {
                    let (lo, hi) = self.size_range(scale);
                    out.push(CellInfo {
                        scale,
                        gx,
                        gy,
                        stride: self.stride(scale) as f64,
                        log_mid: 0.5 * (lo.ln() + hi.ln()),
                        log_half: 0.5 * (hi.ln() - lo.ln()),
                    });
                }
            }
        }
        out
    }

    pub(crate) fn backbone_shape(&self, layer: usize) -> ConvShape {
        let cin = if layer == 0 { 3 } else { self.channels[layer - 1] };
        let h = self.image_size >> layer;
        ConvShape { cin, cout: self.channels[layer], k: self.backbone_kernels[layer], stride: 2, h, w: h }
    }

    pub(crate) fn head_shape(&self, scale: usize) -> ConvShape {
        let g = self.grid(scale);
        let lateral = if scale + 1 < NUM_SCALES { self.channels[scale + 1] } else { 0 };
        ConvShape {
            cin: self.channels[scale] + lateral,
            cout: self.cell_channels(),
            k: self.head_kernels[scale],
            stride: 1,
            h: g,
            w: g,
        }
    }

    /// Conv layers in parameter order: backbone 0..3, then heads 3..6.
    pub(crate) fn layer_shapes(&self) -> [ConvShape; NUM_LAYERS] {
        std::array::from_fn(|i| if i < 3 { self.backbone_shape(i) } else { self.head_shape(i - 3) })
    }

    /// `(weight_offset, bias_offset)` of each layer in the flat parameter vector.
    pub(crate) fn layer_offsets(&self) -> [(usize, usize); NUM_LAYERS] {
        let mut out = [(0, 0); NUM_LAYERS];
        let mut at = 0;
        for (i, s) in self.layer_shapes().iter().enumerate() {
            out[i] = (at, at + s.weight_len());
            at += s.weight_len() + s.cout;
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.layer_shapes().iter().map(|s| s.weight_len() + s.cout).sum()
    }
}

/// Image in HWC order with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, data: vec![value; height * width * 3] }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(LabError::Shape {
                expected: format!("{height}x{width}x3 = {}", height * width * 3),
                got: data.len().to_string(),
            });
        }
        Ok(Self { height, width, data })
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * 3 + c
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn add(&self, delta: &[f64]) -> Image {
        let mut out = self.clone();
        for (o, d) in out.data.iter_mut().zip(delta) {
            *o += d;
        }
        out
    }

    pub(crate) fn to_chw(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; 3 * plane];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            out[i] = px[0];
            out[plane + i] = px[1];
            out[2 * plane + i] = px[2];
        }
        out
    }

    pub(crate) fn chw_to_hwc(chw: &[f64], height: usize, width: usize) -> Vec<f64> {
        let plane = height * width;
        let mut out = vec![0.0; 3 * plane];
        for i in 0..plane {
            for c in 0..3 {
                out[i * 3 + c] = chw[c * plane + i];
            }
        }
        out
    }

    /// Mirrors the image left to right.
    pub fn flipped(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    out.data[self.index(y, x, c)] = self.data[self.index(y, self.width - 1 - x, c)];
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub bbox: BBox,
    pub class_id: usize,
}

/// One labelled image.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub objects: Vec<GtObject>,
}

impl Sample {
    pub fn flipped(&self) -> Sample {
        let w = self.image.width as f64;
        Sample {
            image: self.image.flipped(),
            objects: self
                .objects
                .iter()
                .map(|o| GtObject { bbox: BBox::new(w - o.bbox.cx, o.bbox.cy, o.bbox.w, o.bbox.h), class_id: o.class_id })
                .collect(),
        }
    }
}

/// Detector weights: an architecture plus one flat weight vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub arch: ArchConfig,
    pub weights: Vec<f64>,
}

impl DetectorParams {
    pub fn zeros(arch: ArchConfig) -> Result<Self> {
        arch.validate()?;
        let n = arch.num_params();
        Ok(Self { arch, weights: vec![0.0; n] })
    }

    /// Normal weights scaled by fan-in (small for the heads), objectness
    /// bias from the config, all other biases zero.
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let mut rng = crate::rng::rng(seed);
        let shapes = p.arch.layer_shapes();
        let offsets = p.arch.layer_offsets();
        for (i, (s, &(wo, bo))) in shapes.iter().zip(&offsets).enumerate() {
            let fan_in = (s.cin * s.k * s.k) as f64;
            let out_layer = i >= 3;
            let std = if out_layer { 0.1 / fan_in.sqrt() } else { (1.0 / fan_in).sqrt() };
            let normal = Normal::new(0.0, std).expect("positive std");
            for w in &mut p.weights[wo..wo + s.weight_len()] {
                *w = normal.sample(&mut rng);
            }
            if out_layer && p.arch.head_mode == HeadMode::Objectness {
                p.weights[bo] = p.arch.objectness_bias;
            }
            if out_layer && p.arch.head_mode == HeadMode::ClassOnly {
                for c in 0..p.arch.num_classes {
                    p.weights[bo + 5 + c] = p.arch.objectness_bias;
                }
            }
        }
        Ok(p)
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.weights.iter().all(|w| w.is_finite()) {
            Ok(())
        } else {
            Err(LabError::Precondition("detector weights contain non-finite values".into()))
        }
    }

    pub(crate) fn layer(&self, i: usize) -> (&[f64], &[f64]) {
        let s = self.arch.layer_shapes()[i];
        let (wo, bo) = self.arch.layer_offsets()[i];
        (&self.weights[wo..wo + s.weight_len()], &self.weights[bo..bo + s.cout])
    }
}

/// Raw head outputs for every candidate, flattened as `[candidate][channel]`
/// with candidates ordered by scale, then row, then column.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPrediction {
    pub channels: usize,
    pub data: Vec<f64>,
}

impl RawPrediction {
    pub fn zeros(arch: &ArchConfig) -> Self {
        Self { channels: arch.cell_channels(), data: vec![0.0; arch.num_candidates() * arch.cell_channels()] }
    }

    pub fn num_candidates(&self) -> usize {
        self.data.len() / self.channels
    }

    #[inline]
    pub fn candidate(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    #[inline]
    pub fn candidate_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.channels..(i + 1) * self.channels]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout_has_1344_candidates() {
        let a = ArchConfig::default();
        assert_eq!(a.num_candidates(), 32 * 32 + 16 * 16 + 8 * 8);
        assert_eq!([a.grid(0), a.grid(1), a.grid(2)], [32, 16, 8]);
        for s in 0..3 {
            let bs = a.backbone_shape(s);
            assert_eq!(bs.ho(), a.grid(s));
        }
        let offs = a.layer_offsets();
        let last = a.layer_shapes()[NUM_LAYERS - 1];
        assert_eq!(last.cout, a.cell_channels());
        assert_eq!(offs[NUM_LAYERS - 1].1 + last.cout, a.num_params());
    }

    #[test]
    fn invalid_arch_rejected() {
        let bad = ArchConfig { image_size: 60, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ArchConfig { num_classes: 1, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ArchConfig { head_kernels: [4, 5, 3], ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn flip_round_trip() {
        let mut img = Image::filled(8, 8, 0.0);
        let i = img.index(2, 1, 0);
        img.data[i] = 1.0;
        let f = img.flipped();
        assert_eq!(f.data[f.index(2, 6, 0)], 1.0);
        assert_eq!(f.flipped(), img);
    }
}
