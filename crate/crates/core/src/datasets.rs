//! Desk-scale datasets: a seeded Gaussian mixture with confusable class
//! pairs, a small CSV format, and the CIFAR-10 binary distribution.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, n_classes: usize, split: Split) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::data(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::data(format!("label {bad} >= n_classes {n_classes}")));
        }
        if !features.is_finite() {
            return Err(Error::data("feature values must be finite"));
        }
        Ok(Self {
            features,
            labels,
            n_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            split,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// CSV text: `# n_classes=<N> dim=<d>` then `<f1>,...,<fd>,<label>`.
    /// Floats use the shortest representation that parses back exactly.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# n_classes={} dim={}\n", self.n_classes, self.dim());
        for (s, &y) in self.labels.iter().enumerate() {
            for v in self.features.row(s) {
                let _ = write!(out, "{v:?},");
            }
            let _ = writeln!(out, "{y}");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn parse_header(line: &str) -> Option<(usize, usize)> {
    let rest = line.strip_prefix('#')?.trim();
    let mut n = None;
    let mut d = None;
    for kv in rest.split_whitespace() {
        match kv.split_once('=')? {
            ("n_classes", v) => n = v.parse().ok(),
            ("dim", v) => d = v.parse().ok(),
            _ => return None,
        }
    }
    Some((n?, d?))
}

pub fn parse_csv(text: &str, split: Split) -> Result<Dataset> {
    let mut lines = text.lines().enumerate();
    let (n_classes, dim) = lines
        .next()
        .and_then(|(_, l)| parse_header(l))
        .ok_or_else(|| Error::data("line 1: expected `# n_classes=<N> dim=<d>`"))?;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(Error::data(format!(
                "line {lineno}: expected {} fields, found {}",
                dim + 1,
                fields.len()
            )));
        }
        for f in &fields[..dim] {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| Error::data(format!("line {lineno}: bad number {f:?}")))?;
            if !v.is_finite() {
                return Err(Error::data(format!("line {lineno}: non-finite value")));
            }
            values.push(v);
        }
        let y: usize = fields[dim]
            .trim()
            .parse()
            .map_err(|_| Error::data(format!("line {lineno}: bad label {:?}", fields[dim])))?;
        if y >= n_classes {
            return Err(Error::data(format!(
                "line {lineno}: label {y} >= n_classes {n_classes}"
            )));
        }
        labels.push(y);
    }
    if labels.is_empty() {
        return Err(Error::data("dataset has no rows"));
    }
    let features = Matrix::new(labels.len(), dim, values)?;
    Dataset::new(features, labels, n_classes, split)
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, Split::Train).map_err(|e| match e {
        Error::Data(m) => Error::data(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Gaussian-mixture generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Radius of the sphere the class centers are drawn on.
    pub center_scale: f64,
    pub stddev: f64,
    /// Number of class pairs `(0,1), (2,3), ...` pulled close together.
    pub overlap_pairs: usize,
    /// Center distance within an overlapping pair.
    pub pair_separation: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// The 10-class, 32-dimensional benchmark task with two confusable pairs.
    pub fn reference(seed: u64) -> Self {
        Self {
            n_classes: 10,
            dim: 32,
            train_per_class: 500,
            test_per_class: 200,
            center_scale: 3.0,
            stddev: 1.0,
            overlap_pairs: 2,
            pair_separation: 1.5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::config(
                "n_classes must be at least 2: inter-class correlation needs two classes",
            ));
        }
        if self.dim == 0 || self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::config("dim and per-class counts must be at least 1"));
        }
        if !(self.stddev > 0.0) || !(self.center_scale >= 0.0) || !(self.pair_separation >= 0.0) {
            return Err(Error::config(
                "stddev must be positive; center_scale and pair_separation nonnegative",
            ));
        }
        if 2 * self.overlap_pairs > self.n_classes {
            return Err(Error::config("overlap_pairs exceeds n_classes / 2"));
        }
        Ok(())
    }

    /// Class centers after pair overlap has been applied.
    pub fn centers(&self) -> Matrix {
        let mut rng = Rng::derive(self.seed, 0xC3);
        let mut centers = Matrix::zeros(self.n_classes, self.dim);
        for c in 0..self.n_classes {
            let dir: Vec<f64> = (0..self.dim).map(|_| rng.standard_normal()).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            for (o, d) in centers.row_mut(c).iter_mut().zip(&dir) {
                *o = self.center_scale * d / norm;
            }
        }
        for p in 0..self.overlap_pairs {
            let (a, b) = (2 * p, 2 * p + 1);
            let dist: f64 = centers
                .row(a)
                .iter()
                .zip(centers.row(b))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            if dist <= self.pair_separation || dist == 0.0 {
                continue;
            }
            // Move both toward the midpoint until they sit pair_separation apart.
            let keep = self.pair_separation / dist;
            for j in 0..self.dim {
                let (x, y) = (centers.get(a, j), centers.get(b, j));
                let mid = 0.5 * (x + y);
                centers.set(a, j, mid + keep * (x - mid));
                centers.set(b, j, mid + keep * (y - mid));
            }
        }
        centers
    }
}

fn sample_split(spec: &SynthSpec, centers: &Matrix, per_class: usize, rng: &mut Rng, split: Split) -> Dataset {
    let n = per_class * spec.n_classes;
    let mut order: Vec<usize> = (0..n).map(|i| i % spec.n_classes).collect();
    rng.shuffle(&mut order);
    let mut data = Vec::with_capacity(n * spec.dim);
    for &c in &order {
        for &mu in centers.row(c) {
            data.push(rng.normal(mu, spec.stddev));
        }
    }
    let features = Matrix::new(n, spec.dim, data).expect("sized");
    Dataset::new(features, order, spec.n_classes, split).expect("valid by construction")
}

/// Seeded train/test draw from the mixture. Test samples come from an
/// independent stream, so the splits are disjoint draws.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let centers = spec.centers();
    let train = sample_split(spec, &centers, spec.train_per_class, &mut Rng::derive(spec.seed, 0x7A), Split::Train);
    let test = sample_split(spec, &centers, spec.test_per_class, &mut Rng::derive(spec.seed, 0x7E), Split::Test);
    Ok((train, test))
}

pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;
pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;
const CIFAR_CLASSES: usize = 10;

/// Parses raw CIFAR-10 records into pixels scaled to `[0, 1]`.
pub fn parse_cifar10_records(bytes: &[u8], split: Split) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::data(format!(
            "CIFAR-10 data must be a positive multiple of {CIFAR_RECORD_BYTES} bytes, got {}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD_BYTES - 1));
    for rec in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
        let y = rec[0] as usize;
        if y >= CIFAR_CLASSES {
            return Err(Error::data(format!("CIFAR-10 label byte {y} out of range")));
        }
        labels.push(y);
        data.extend(rec[1..].iter().map(|&p| p as f64 / 255.0));
    }
    Dataset::new(
        Matrix::new(n, CIFAR_RECORD_BYTES - 1, data)?,
        labels,
        CIFAR_CLASSES,
        split,
    )
}

/// Per-channel standardization with statistics from `train` only.
/// Channels are the three contiguous 1024-value planes (R, G, B).
pub fn standardize_channels(train: &mut Dataset, test: &mut Dataset) -> Result<[(f64, f64); 3]> {
    const PLANE: usize = 32 * 32;
    if train.dim() != 3 * PLANE || test.dim() != 3 * PLANE {
        return Err(Error::data("standardization expects 3x32x32 pixel rows"));
    }
    let mut stats = [(0.0, 0.0); 3];
    for (ch, st) in stats.iter_mut().enumerate() {
        let plane = ch * PLANE..(ch + 1) * PLANE;
        let count = (train.len() * PLANE) as f64;
        let mut sum = 0.0;
        for r in 0..train.len() {
            sum += train.features.row(r)[plane.clone()].iter().sum::<f64>();
        }
        let mean = sum / count;
        let mut sq = 0.0;
        for r in 0..train.len() {
            sq += train.features.row(r)[plane.clone()]
                .iter()
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>();
        }
        let std = (sq / count).sqrt();
        let std = if std > 0.0 { std } else { 1.0 };
        *st = (mean, std);
        for ds in [&mut *train, &mut *test] {
            for r in 0..ds.len() {
                for v in &mut ds.features.row_mut(r)[plane.clone()] {
                    *v = (*v - mean) / std;
                }
            }
        }
    }
    Ok(stats)
}

/// Loads `data_batch_{1..5}.bin` and `test_batch.bin`, standardized per channel.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    load_cifar10_sized(dir, CIFAR_RECORDS_PER_FILE)
}

pub(crate) fn load_cifar10_sized(dir: &Path, records_per_file: usize) -> Result<(Dataset, Dataset)> {
    let expected = records_per_file * CIFAR_RECORD_BYTES;
    let read = |name: &str| -> Result<Vec<u8>> {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != expected {
            return Err(Error::data(format!(
                "{}: expected {expected} bytes, found {}",
                path.display(),
                bytes.len()
            )));
        }
        Ok(bytes)
    };
    let mut train_bytes = Vec::with_capacity(5 * expected);
    for i in 1..=5 {
        train_bytes.extend(read(&format!("data_batch_{i}.bin"))?);
    }
    let mut train = parse_cifar10_records(&train_bytes, Split::Train)?;
    let mut test = parse_cifar10_records(&read("test_batch.bin")?, Split::Test)?;
    standardize_channels(&mut train, &mut test)?;
    Ok((train, test))
}

/// One shuffled mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

/// Epoch partition into shuffled index batches; the last one may be short.
pub fn batch_indices(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub fn batches(ds: &Dataset, batch_size: usize, rng: &mut Rng) -> Vec<Batch> {
    batch_indices(ds.len(), batch_size, rng)
        .into_iter()
        .map(|indices| Batch {
            inputs: ds.features.select_rows(&indices),
            labels: indices.iter().map(|&i| ds.labels[i]).collect(),
            indices,
        })
        .collect()
}
