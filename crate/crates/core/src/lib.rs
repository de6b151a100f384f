//! Laboratory for NMS latency attacks on single-stage detectors: an
//! instrumented NMS engine, a fitted latency/capacity model, a toy
//! differentiable grid detector, PGD phantom-object attacks and
//! background-attentive adversarial training with a capacity stopping rule.

pub mod analysis;
pub mod attacks;
pub mod cli;
pub mod data;
pub mod defense;
pub mod detector;
pub mod error;
pub mod evalkit;
pub mod fileio;
pub mod geometry;
pub mod latency;
pub mod nms;
pub mod rng;

pub use error::{LabError, Result};
pub use geometry::{BBox, Detection};
