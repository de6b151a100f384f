//! Synthetic scenes (filled, color-coded rectangles on a textured background)
//! and the dataset file format.
//!
//! File layout: `NMSLABDS`, a little-endian u32 header length, a JSON header,
//! then per image: `H*W*3` f32 pixels (HWC), a u32 box count and per box four
//! f64 corners `x1 y1 x2 y2` followed by a u32 class id.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{GtObject, Image, Sample};
use crate::error::{LabError, Result};
use crate::fileio::{fingerprint, read_file, read_header, write_atomic, write_header};
use crate::geometry::BBox;
use crate::rng::{rng, split};

pub const DATASET_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"NMSLABDS";

// Base fill color per class.
const CLASS_COLORS: [[f64; 3]; 3] = [[0.85, 0.2, 0.2], [0.2, 0.8, 0.25], [0.2, 0.3, 0.9]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Side length range in pixels, inclusive.
    pub min_size: usize,
    pub max_size: usize,
    pub class_names: Vec<String>,
    /// Amplitude of the per-pixel background noise.
    pub noise: f64,
    /// Draw every object from this class instead of uniformly.
    #[serde(default)]
    pub fixed_class: Option<usize>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            min_objects: 1,
            max_objects: 5,
            min_size: 6,
            max_size: 30,
            class_names: vec!["red".into(), "green".into(), "blue".into()],
            noise: 0.06,
            fixed_class: None,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(LabError::Config("image dimensions must be positive".into()));
        }
        if self.min_objects > self.max_objects {
            return Err(LabError::Config("min_objects exceeds max_objects".into()));
        }
        if self.min_size == 0 || self.min_size > self.max_size || self.max_size > self.height.min(self.width) {
            return Err(LabError::Config(format!(
                "object size range {}..={} invalid for a {}x{} image",
                self.min_size, self.max_size, self.height, self.width
            )));
        }
        if self.class_names.is_empty() || self.class_names.len() > CLASS_COLORS.len() {
            return Err(LabError::Config(format!("between 1 and {} classes supported", CLASS_COLORS.len())));
        }
        if let Some(c) = self.fixed_class {
            if c >= self.class_names.len() {
                return Err(LabError::Config(format!("fixed_class {c} out of range")));
            }
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(LabError::Config("noise must lie in [0, 0.5]".into()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

fn background(spec: &SceneSpec, rng: &mut impl Rng) -> Image {
    let mut img = Image::filled(spec.height, spec.width, 0.0);
    let base = rng.random_range(0.35..0.6);
    let fx = rng.random_range(0.1..0.4);
    let fy = rng.random_range(0.1..0.4);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let tint = [rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)];
    for y in 0..spec.height {
        for x in 0..spec.width {
            let wave = 0.08 * ((x as f64 * fx + y as f64 * fy + phase).sin());
            for c in 0..3 {
                let n = rng.random_range(-spec.noise..=spec.noise);
                let i = img.index(y, x, c);
                img.data[i] = base + wave + tint[c] + n;
            }
        }
    }
    img
}

fn overlaps(a: &[usize; 4], b: &[usize; 4]) -> bool {
    // One pixel of clearance between objects.
    a[0] <= b[2] && b[0] <= a[2] && a[1] <= b[3] && b[1] <= a[3]
}

/// One synthetic scene, fully determined by `seed`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Sample {
    let mut r = rng(seed);
    let mut image = background(spec, &mut r);
    let n = r.random_range(spec.min_objects..=spec.max_objects);
    let mut placed: Vec<([usize; 4], usize)> = Vec::new();
    for _ in 0..n {
        for _attempt in 0..100 {
            let w = r.random_range(spec.min_size..=spec.max_size);
            let h = r.random_range(spec.min_size..=spec.max_size);
            let x1 = r.random_range(0..=spec.width - w);
            let y1 = r.random_range(0..=spec.height - h);
            let rect = [x1, y1, x1 + w, y1 + h];
            if placed.iter().any(|(p, _)| overlaps(p, &rect)) {
                continue;
            }
            let class = spec.fixed_class.unwrap_or_else(|| r.random_range(0..spec.num_classes()));
            placed.push((rect, class));
            break;
        }
    }
    let mut objects = Vec::with_capacity(placed.len());
    for (rect, class) in placed {
        let color = CLASS_COLORS[class];
        let jitter = r.random_range(-0.06..0.06);
        for y in rect[1]..rect[3] {
            for x in rect[0]..rect[2] {
                for (c, &base) in color.iter().enumerate() {
                    let i = image.index(y, x, c);
                    image.data[i] = base + jitter + r.random_range(-0.5 * spec.noise..=0.5 * spec.noise);
                }
            }
        }
        objects.push(GtObject {
            bbox: BBox::from_corners(rect[0] as f64, rect[1] as f64, rect[2] as f64, rect[3] as f64),
            class_id: class,
        });
    }
    // Stored pixels are f32; quantize now so files round-trip exactly.
    for v in &mut image.data {
        *v = v.clamp(0.0, 1.0) as f32 as f64;
    }
    Sample { image, objects }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub height: usize,
    pub width: usize,
    pub class_names: Vec<String>,
    pub count: usize,
    pub seed: u64,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<Sample>,
}

#[derive(Serialize)]
struct GenKey<'a> {
    spec: &'a SceneSpec,
    seed: u64,
    count: usize,
}

/// `count` scenes; scene `i` uses sub-seed `split(seed, i)`.
pub fn generate_dataset(spec: &SceneSpec, seed: u64, count: usize) -> Result<Dataset> {
    spec.validate()?;
    if count == 0 {
        return Err(LabError::Precondition("dataset must contain at least one image".into()));
    }
    let samples = (0..count).map(|i| generate_scene(spec, split(seed, i as u64))).collect();
    Ok(Dataset {
        header: DatasetHeader {
            format_version: DATASET_FORMAT_VERSION,
            height: spec.height,
            width: spec.width,
            class_names: spec.class_names.clone(),
            count,
            seed,
            fingerprint: fingerprint(&GenKey { spec, seed, count }),
        },
        samples,
    })
}

impl Dataset {
    /// Wraps samples that did not come from the generator (e.g. attacked
    /// images) under a new fingerprint.
    pub fn from_samples(samples: Vec<Sample>, class_names: Vec<String>, seed: u64, fingerprint: String) -> Result<Self> {
        let first = samples.first().ok_or_else(|| LabError::Precondition("no samples".into()))?;
        let (height, width) = (first.image.height, first.image.width);
        if samples.iter().any(|s| s.image.height != height || s.image.width != width) {
            return Err(LabError::Shape { expected: format!("{height}x{width}"), got: "mixed image sizes".into() });
        }
        Ok(Self {
            header: DatasetHeader {
                format_version: DATASET_FORMAT_VERSION,
                height,
                width,
                class_names,
                count: samples.len(),
                seed,
                fingerprint,
            },
            samples,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::new();
        write_header(&mut out, MAGIC, &json);
        for s in &self.samples {
            for &v in &s.image.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
            out.extend_from_slice(&(s.objects.len() as u32).to_le_bytes());
            for o in &s.objects {
                for c in o.bbox.corners() {
                    out.extend_from_slice(&c.to_le_bytes());
                }
                out.extend_from_slice(&(o.class_id as u32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let (json, mut at) = read_header(path, bytes, MAGIC)?;
        let header: DatasetHeader = serde_json::from_slice(json).map_err(|e| LabError::format(path, e.to_string()))?;
        if header.format_version != DATASET_FORMAT_VERSION {
            return Err(LabError::format(
                path,
                format!("dataset format version {} (expected {DATASET_FORMAT_VERSION})", header.format_version),
            ));
        }
        let truncated = || LabError::format(path, "truncated dataset record");
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(at..at + n).ok_or_else(truncated)?;
            at += n;
            Ok(s)
        };
        let px = header.height * header.width * 3;
        let mut samples = Vec::with_capacity(header.count);
        for _ in 0..header.count {
            let data: Vec<f64> =
                take(4 * px)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
            let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let mut objects = Vec::with_capacity(n);
            for _ in 0..n {
                let c: Vec<f64> = take(32)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                let class_id = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
                if class_id >= header.class_names.len() {
                    return Err(LabError::format(path, format!("class id {class_id} out of range")));
                }
                objects.push(GtObject { bbox: BBox::from_corners(c[0], c[1], c[2], c[3]), class_id });
            }
            samples.push(Sample { image: Image::from_data(header.height, header.width, data)?, objects });
        }
        if at != bytes.len() {
            return Err(LabError::format(path, "trailing bytes after the declared image count"));
        }
        Ok(Self { header, samples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(path, &read_file(path)?)
    }
}
