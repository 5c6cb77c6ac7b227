//! Long-tailed datasets: exponential class profiles, Gaussian class
//! synthesis, the balanced meta split and the `LTDS` text format.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::SeedTree;

/// Labeled feature vectors. Class 0 is the head class by convention.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    classes: usize,
    counts: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if classes == 0 {
            return Err(Error::invalid("class count must be positive"));
        }
        if features.nrows() != labels.len() {
            return Err(Error::shape(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        let mut counts = vec![0; classes];
        for &label in &labels {
            if label >= classes {
                return Err(Error::LabelOutOfRange { label, classes });
            }
            counts[label] += 1;
        }
        Ok(Dataset {
            features,
            labels,
            classes,
            counts,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    /// Rows at `indices`, in that order (repeats allowed).
    pub fn batch(&self, indices: &[usize]) -> (Array2<f64>, Vec<usize>) {
        let x = self.features.select(Axis(0), indices);
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (features, labels) = self.batch(indices);
        Dataset::new(features, labels, self.classes).expect("subset of a valid dataset")
    }

    /// Indices of each class's samples, in row order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }
}

/// Per-class sample counts of a long-tailed training split.
#[derive(Debug, Clone, PartialEq)]
pub struct ImbalanceProfile {
    pub classes: usize,
    pub n_max: usize,
    /// Requested head-to-tail ratio.
    pub imbalance: f64,
    pub counts: Vec<usize>,
}

impl ImbalanceProfile {
    /// Realized max/min ratio after rounding.
    pub fn realized_ratio(&self) -> f64 {
        let max = *self.counts.iter().max().unwrap_or(&1) as f64;
        let min = *self.counts.iter().min().unwrap_or(&1) as f64;
        max / min
    }

    /// The same profile with `extra` samples added to every class.
    pub fn padded(&self, extra: usize) -> ImbalanceProfile {
        ImbalanceProfile {
            counts: self.counts.iter().map(|&n| n + extra).collect(),
            n_max: self.n_max + extra,
            ..self.clone()
        }
    }

    pub fn balanced(classes: usize, per_class: usize) -> ImbalanceProfile {
        ImbalanceProfile {
            classes,
            n_max: per_class,
            imbalance: 1.0,
            counts: vec![per_class; classes],
        }
    }
}

/// Exponentially decaying class counts, `n_max * imbalance^(-c/(C-1))`,
/// rounded half-up and clamped to at least one sample.
pub fn exp_profile(classes: usize, n_max: usize, imbalance: f64) -> Result<ImbalanceProfile> {
    if classes < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {classes}")));
    }
    if n_max < 1 {
        return Err(Error::invalid("n_max must be at least 1"));
    }
    if !(imbalance >= 1.0) || !imbalance.is_finite() {
        return Err(Error::invalid(format!("imbalance must be >= 1, got {imbalance}")));
    }
    let last = (classes - 1) as f64;
    let counts = (0..classes)
        .map(|c| {
            let raw = n_max as f64 * imbalance.powf(-(c as f64) / last);
            ((raw + 0.5).floor() as usize).max(1)
        })
        .collect();
    Ok(ImbalanceProfile {
        classes,
        n_max,
        imbalance,
        counts,
    })
}

/// Unit-variance isotropic Gaussian classes centered on seeded unit
/// directions scaled by `separation`.
#[derive(Debug, Clone)]
pub struct GaussianClasses {
    means: Array2<f64>,
}

impl GaussianClasses {
    pub fn new(classes: usize, dim: usize, separation: f64, seed: u64) -> Result<Self> {
        if dim < 1 {
            return Err(Error::invalid("feature dimension must be at least 1"));
        }
        if !(separation > 0.0) || !separation.is_finite() {
            return Err(Error::invalid(format!("separation must be > 0, got {separation}")));
        }
        if classes == 0 {
            return Err(Error::invalid("class count must be positive"));
        }
        let mut rng = SeedTree::new(seed).child("means").rng();
        let mut means = Array2::zeros((classes, dim));
        for mut row in means.rows_mut() {
            loop {
                row.iter_mut().for_each(|v: &mut f64| *v = rng.sample(StandardNormal));
                let norm = row.dot(&row).sqrt();
                if norm > 1e-8 {
                    row.mapv_inplace(|v| v / norm * separation);
                    break;
                }
            }
        }
        Ok(GaussianClasses { means })
    }

    pub fn means(&self) -> ArrayView2<'_, f64> {
        self.means.view()
    }

    /// Draws `counts[c]` samples of each class; rows are grouped by class.
    pub fn sample(&self, counts: &[usize], seed: u64) -> Result<Dataset> {
        let classes = self.means.nrows();
        if counts.len() != classes {
            return Err(Error::shape(format!(
                "{} counts for {} classes",
                counts.len(),
                classes
            )));
        }
        let dim = self.means.ncols();
        let total: usize = counts.iter().sum();
        let mut rng = SeedTree::new(seed).rng();
        let mut features = Array2::zeros((total, dim));
        let mut labels = Vec::with_capacity(total);
        let mut row = 0;
        for (c, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                for j in 0..dim {
                    let noise: f64 = rng.sample(StandardNormal);
                    features[[row, j]] = self.means[[c, j]] + noise;
                }
                labels.push(c);
                row += 1;
            }
        }
        Dataset::new(features, labels, classes)
    }
}

/// Seeded synthetic long-tailed dataset following `profile`.
pub fn synth_gaussian(
    profile: &ImbalanceProfile,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    let gen = GaussianClasses::new(profile.classes, dim, separation, seed)?;
    gen.sample(&profile.counts, SeedTree::new(seed).child("samples").root())
}

/// Splits `pool` into a training part and a balanced meta set holding
/// exactly `m_per_class` samples of every class. The meta set doubles as
/// the validation set.
pub fn split_meta(pool: &Dataset, m_per_class: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    for (class, &n) in pool.counts().iter().enumerate() {
        if n <= m_per_class {
            return Err(Error::InsufficientSamples {
                class,
                available: n,
                required: m_per_class + 1,
            });
        }
    }
    let tree = SeedTree::new(seed).child("meta-split");
    let mut in_meta = vec![false; pool.len()];
    let mut meta_idx = Vec::with_capacity(m_per_class * pool.classes());
    for (class, mut idx) in pool.class_indices().into_iter().enumerate() {
        let mut rng = tree.index(class as u64).rng();
        idx.shuffle(&mut rng);
        for &i in &idx[..m_per_class] {
            in_meta[i] = true;
            meta_idx.push(i);
        }
    }
    let train_idx: Vec<usize> = (0..pool.len()).filter(|&i| !in_meta[i]).collect();
    Ok((pool.subset(&train_idx), pool.subset(&meta_idx)))
}

const HEADER_TAG: &str = "#LTDS";

/// Serializes to the `LTDS` text format. Floats use the shortest
/// representation that parses back to the same bits.
pub fn to_ltds_string(d: &Dataset) -> String {
    let mut out = String::with_capacity(d.len() * (d.dim() * 20 + 4) + 32);
    let _ = writeln!(out, "{HEADER_TAG} C={} DIM={}", d.classes(), d.dim());
    for (row, &label) in d.features.rows().into_iter().zip(d.labels.iter()) {
        let _ = write!(out, "{label}");
        for v in row {
            let _ = write!(out, ",{v:?}");
        }
        out.push('\n');
    }
    out
}

pub fn save_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_ltds_string(d)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ltds(&text, path)
}

pub fn parse_ltds(text: &str, path: &Path) -> Result<Dataset> {
    let fail = |line: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| fail(1, "missing #LTDS header".into()))?;
    let (classes, dim) = parse_header(header).map_err(|m| fail(1, m))?;

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label_str = fields.next().unwrap_or_default().trim();
        let label: usize = label_str
            .parse()
            .map_err(|_| fail(lineno, format!("bad label `{label_str}`")))?;
        if label >= classes {
            return Err(fail(
                lineno,
                format!("label {label} out of range for header C={classes}"),
            ));
        }
        let before = values.len();
        for field in fields {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| fail(lineno, format!("bad feature value `{field}`")))?;
            values.push(v);
        }
        if values.len() - before != dim {
            return Err(fail(
                lineno,
                format!("expected {dim} features, found {}", values.len() - before),
            ));
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(fail(1, "dataset has no rows".into()));
    }
    let features = Array2::from_shape_vec((labels.len(), dim), values)
        .expect("row widths validated above");
    Dataset::new(features, labels, classes)
}

fn parse_header(header: &str) -> std::result::Result<(usize, usize), String> {
    let mut parts = header.split_whitespace();
    if parts.next() != Some(HEADER_TAG) {
        return Err(format!("expected `{HEADER_TAG} C=<int> DIM=<int>` header"));
    }
    let mut classes = None;
    let mut dim = None;
    for part in parts {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| format!("malformed header field `{part}`"))?;
        let n: usize = value
            .parse()
            .map_err(|_| format!("header field `{part}` is not an integer"))?;
        match key {
            "C" => classes = Some(n),
            "DIM" => dim = Some(n),
            _ => return Err(format!("unknown header field `{key}`")),
        }
    }
    match (classes, dim) {
        (Some(c), Some(d)) if c > 0 && d > 0 => Ok((c, d)),
        (Some(_), Some(_)) => Err("C and DIM must be positive".into()),
        _ => Err("header must define C and DIM".into()),
    }
}
