//! Datasets: synthetic ID/OOD generators, the IDX image loader and
//! stratified splitting. Everything is a deterministic function of the
//! spec and the seed.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-sample tensor shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Flat(usize),
    /// channels, height, width
    Image(usize, usize, usize),
}

impl Shape {
    pub fn size(&self) -> usize {
        match *self {
            Shape::Flat(d) => d,
            Shape::Image(c, h, w) => c * h * w,
        }
    }

    pub fn from_dims(dims: &[usize]) -> Result<Self> {
        match *dims {
            [d] if d > 0 => Ok(Shape::Flat(d)),
            [c, h, w] if c > 0 && h > 0 && w > 0 => Ok(Shape::Image(c, h, w)),
            [h, w] if h > 0 && w > 0 => Ok(Shape::Image(1, h, w)),
            _ => Err(Error::InvalidParameter(format!("unsupported input shape {dims:?}"))),
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            Shape::Flat(d) => vec![d],
            Shape::Image(c, h, w) => vec![c, h, w],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Id,
    Ood,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub role: Role,
    pub shape: Shape,
    /// Row-major, `len() * shape.size()` values.
    pub inputs: Vec<f64>,
    /// Class labels; present for ID data and for labelled image files.
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len() / self.shape.size()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let d = self.shape.size();
        &self.inputs[i * d..(i + 1) * d]
    }

    pub fn class_count(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max().map(|m| m + 1))
            .unwrap_or(0)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut inputs = Vec::with_capacity(indices.len() * self.shape.size());
        for &i in indices {
            inputs.extend_from_slice(self.sample(i));
        }
        Dataset {
            name: self.name.clone(),
            role: self.role,
            shape: self.shape,
            inputs,
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    GaussianMixture,
    TwoMoons,
    UniformRing,
    ShiftedCluster,
    UniformNoise,
    IdxImages,
}

/// Description of one dataset, as read from the experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Explicit seed; when absent the pipeline derives one from the global seed.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_classes")]
    pub classes: usize,
    /// Radius of the circle carrying the mixture means.
    #[serde(default = "default_mean_radius")]
    pub mean_radius: f64,
    #[serde(default = "default_std")]
    pub std: f64,
    #[serde(default = "default_inner")]
    pub inner_radius: f64,
    #[serde(default = "default_outer")]
    pub outer_radius: f64,
    #[serde(default = "default_center")]
    pub center: Vec<f64>,
    /// Range for uniform noise.
    #[serde(default = "default_low")]
    pub low: f64,
    #[serde(default = "default_high")]
    pub high: f64,
    /// Sample shape for uniform noise; defaults to 2-D points.
    #[serde(default)]
    pub shape: Option<Vec<usize>>,
    #[serde(default)]
    pub images: Option<PathBuf>,
    #[serde(default)]
    pub labels: Option<PathBuf>,
    /// Keep only these labels (IDX files only).
    #[serde(default)]
    pub class_filter: Option<Vec<usize>>,
    /// Drop this many images (after filtering) before taking `samples`.
    #[serde(default)]
    pub skip: usize,
    /// Treat the data as ID (class labels kept) or OOD.
    #[serde(default)]
    pub role: Option<Role>,
}

fn default_samples() -> usize {
    1000
}
fn default_classes() -> usize {
    4
}
fn default_mean_radius() -> f64 {
    1.5
}
fn default_std() -> f64 {
    0.3
}
fn default_inner() -> f64 {
    5.0
}
fn default_outer() -> f64 {
    6.0
}
fn default_center() -> Vec<f64> {
    vec![3.5, 3.5]
}
fn default_low() -> f64 {
    -10.0
}
fn default_high() -> f64 {
    10.0
}

impl DatasetSpec {
    pub fn new(kind: DatasetKind) -> Self {
        DatasetSpec {
            kind,
            samples: default_samples(),
            seed: None,
            classes: default_classes(),
            mean_radius: default_mean_radius(),
            std: default_std(),
            inner_radius: default_inner(),
            outer_radius: default_outer(),
            center: default_center(),
            low: default_low(),
            high: default_high(),
            shape: None,
            images: None,
            labels: None,
            class_filter: None,
            skip: 0,
            role: None,
        }
    }

    pub fn role(&self) -> Role {
        self.role.unwrap_or(match self.kind {
            DatasetKind::GaussianMixture | DatasetKind::TwoMoons | DatasetKind::IdxImages => Role::Id,
            _ => Role::Ood,
        })
    }

    /// Resolves relative IDX paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.images, &mut self.labels].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// Draws a dataset from a synthetic spec, or loads it for `idx_images`.
pub fn generate(name: &str, spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    let seed = spec.seed.unwrap_or(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.samples;
    let role = spec.role();
    let positive = |what: &str, v: f64| {
        if v.is_finite() && v > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("{name}: {what} must be positive, got {v}")))
        }
    };

    let (shape, inputs, labels) = match spec.kind {
        DatasetKind::GaussianMixture => {
            if spec.classes < 2 {
                return Err(Error::InvalidParameter(format!("{name}: need at least 2 classes")));
            }
            positive("std", spec.std)?;
            let c = spec.classes;
            let mut inputs = Vec::with_capacity(2 * n);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let class = i % c;
                let angle = 2.0 * PI * class as f64 / c as f64;
                let (mx, my) = (spec.mean_radius * angle.cos(), spec.mean_radius * angle.sin());
                let dx: f64 = StandardNormal.sample(&mut rng);
                let dy: f64 = StandardNormal.sample(&mut rng);
                inputs.push(mx + spec.std * dx);
                inputs.push(my + spec.std * dy);
                labels.push(class);
            }
            (Shape::Flat(2), inputs, Some(labels))
        }
        DatasetKind::TwoMoons => {
            positive("std", spec.std)?;
            let mut inputs = Vec::with_capacity(2 * n);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let class = i % 2;
                let t: f64 = rng.random_range(0.0..PI);
                let (x, y) = if class == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                let dx: f64 = StandardNormal.sample(&mut rng);
                let dy: f64 = StandardNormal.sample(&mut rng);
                inputs.push(x + spec.std * dx);
                inputs.push(y + spec.std * dy);
                labels.push(class);
            }
            (Shape::Flat(2), inputs, Some(labels))
        }
        DatasetKind::UniformRing => {
            if !(spec.inner_radius >= 0.0 && spec.outer_radius > spec.inner_radius) {
                return Err(Error::InvalidParameter(format!(
                    "{name}: ring radii must satisfy 0 <= inner < outer"
                )));
            }
            let (r1, r2) = (spec.inner_radius.powi(2), spec.outer_radius.powi(2));
            let mut inputs = Vec::with_capacity(2 * n);
            for _ in 0..n {
                // Area-uniform radius.
                let r = rng.random_range(r1..r2).sqrt();
                let a: f64 = rng.random_range(0.0..2.0 * PI);
                inputs.push(r * a.cos());
                inputs.push(r * a.sin());
            }
            (Shape::Flat(2), inputs, None)
        }
        DatasetKind::ShiftedCluster => {
            positive("std", spec.std)?;
            if spec.center.is_empty() {
                return Err(Error::InvalidParameter(format!("{name}: empty center")));
            }
            let d = spec.center.len();
            let mut inputs = Vec::with_capacity(d * n);
            for _ in 0..n {
                for &c in &spec.center {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    inputs.push(c + spec.std * z);
                }
            }
            (Shape::Flat(d), inputs, None)
        }
        DatasetKind::UniformNoise => {
            if !(spec.high > spec.low) {
                return Err(Error::InvalidParameter(format!("{name}: need low < high")));
            }
            let shape = Shape::from_dims(spec.shape.as_deref().unwrap_or(&[2]))?;
            let inputs = (0..n * shape.size())
                .map(|_| rng.random_range(spec.low..spec.high))
                .collect();
            (shape, inputs, None)
        }
        DatasetKind::IdxImages => {
            let images = spec.images.as_ref().ok_or_else(|| {
                Error::InvalidParameter(format!("{name}: idx_images needs an `images` path"))
            })?;
            let mut ds = load_idx(images, spec.labels.as_deref())?;
            if let Some(filter) = &spec.class_filter {
                let labels = ds.labels.as_ref().ok_or_else(|| {
                    Error::InvalidParameter(format!("{name}: class_filter needs a labels file"))
                })?;
                let keep: Vec<usize> = (0..labels.len()).filter(|&i| filter.contains(&labels[i])).collect();
                ds = ds.subset(&keep);
            }
            let start = spec.skip.min(ds.len());
            let end = if spec.samples > 0 { (start + spec.samples).min(ds.len()) } else { ds.len() };
            if (start, end) != (0, ds.len()) {
                let keep: Vec<usize> = (start..end).collect();
                ds = ds.subset(&keep);
            }
            let labels = if role == Role::Id { ds.labels } else { None };
            (ds.shape, ds.inputs, labels)
        }
    };
    Ok(Dataset {
        name: name.to_string(),
        role,
        shape,
        inputs,
        labels,
    })
}

fn read_idx_header(bytes: &[u8], path: &Path) -> Result<(Vec<usize>, usize)> {
    let bad = |reason: String| Error::BadMagic {
        path: path.display().to_string(),
        reason,
    };
    if bytes.len() < 4 {
        return Err(bad("file shorter than 4-byte magic".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(bad(format!("leading bytes {:02x} {:02x}, expected 00 00", bytes[0], bytes[1])));
    }
    if bytes[2] != 0x08 {
        return Err(bad(format!("element type {:#04x}, only 0x08 (unsigned byte) supported", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(bad("zero dimensions".into()));
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::MalformedFile {
            path: path.display().to_string(),
            reason: "truncated header".into(),
        });
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|k| {
            let o = 4 + 4 * k;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let payload: usize = dims.iter().product();
    if bytes.len() - header < payload {
        return Err(Error::MalformedFile {
            path: path.display().to_string(),
            reason: format!("truncated payload: need {payload} bytes, found {}", bytes.len() - header),
        });
    }
    Ok((dims, header))
}

/// Raw IDX unsigned-byte tensor: dimensions and payload.
pub fn read_idx_bytes(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (dims, header) = read_idx_header(&bytes, path)?;
    let payload: usize = dims.iter().product();
    Ok((dims, bytes[header..header + payload].to_vec()))
}

pub fn write_idx_bytes(path: &Path, dims: &[usize], payload: &[u8]) -> Result<()> {
    if dims.is_empty() || dims.len() > 255 || dims.iter().product::<usize>() != payload.len() {
        return Err(Error::ShapeMismatch(format!(
            "dims {dims:?} do not match payload of {} bytes",
            payload.len()
        )));
    }
    let mut out = vec![0u8, 0, 0x08, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(payload);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads an IDX image file (and optional label file), scaling bytes to [0, 1].
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<Dataset> {
    let (dims, payload) = read_idx_bytes(images_path)?;
    let shape = match dims[..] {
        [_, h, w] => Shape::Image(1, h, w),
        [_, c, h, w] => Shape::Image(c, h, w),
        [_, d] => Shape::Flat(d),
        _ => {
            return Err(Error::MalformedFile {
                path: images_path.display().to_string(),
                reason: format!("unsupported image dimensions {dims:?}"),
            })
        }
    };
    let count = dims[0];
    let labels = match labels_path {
        Some(lp) => {
            let (ldims, lbytes) = read_idx_bytes(lp)?;
            if ldims.len() != 1 || ldims[0] != count {
                return Err(Error::CountMismatch(format!(
                    "{} holds {count} images but {} holds {} labels",
                    images_path.display(),
                    lp.display(),
                    ldims[0]
                )));
            }
            Some(lbytes.into_iter().map(usize::from).collect())
        }
        None => None,
    };
    Ok(Dataset {
        name: images_path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        role: Role::Id,
        shape,
        inputs: payload.iter().map(|&b| f64::from(b) / 255.0).collect(),
        labels,
    })
}

/// Splits into (train, test) with `train_fraction` of the samples in train.
/// Labelled data is stratified per class; per-class quotas use largest
/// remainders so the total equals `round(train_fraction * len)`.
pub fn split(dataset: &Dataset, fractions: (f64, f64), seed: u64) -> Result<(Dataset, Dataset)> {
    let (tr, te) = fractions;
    if !(tr >= 0.0 && te >= 0.0 && ((tr + te) - 1.0).abs() < 1e-9) {
        return Err(Error::InvalidParameter(format!(
            "split fractions ({tr}, {te}) must be non-negative and sum to 1"
        )));
    }
    let n = dataset.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<usize>> = match &dataset.labels {
        Some(labels) => {
            let mut g = vec![Vec::new(); dataset.class_count()];
            for (i, &l) in labels.iter().enumerate() {
                g[l].push(i);
            }
            g
        }
        None => vec![(0..n).collect()],
    };
    let target = (tr * n as f64).round() as usize;
    let exact: Vec<f64> = groups.iter().map(|g| tr * g.len() as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut missing = target.saturating_sub(quota.iter().sum());
    for &g in order.iter().cycle().take(order.len() * 2) {
        if missing == 0 {
            break;
        }
        if quota[g] < groups[g].len() {
            quota[g] += 1;
            missing -= 1;
        }
    }
    let mut train_idx = Vec::with_capacity(target);
    let mut test_idx = Vec::with_capacity(n - target);
    for (g, members) in groups.iter().enumerate() {
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        train_idx.extend_from_slice(&shuffled[..quota[g]]);
        test_idx.extend_from_slice(&shuffled[quota[g]..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((dataset.subset(&train_idx), dataset.subset(&test_idx)))
}
