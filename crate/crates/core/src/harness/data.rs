//! Benchmark data: synthesis, files on disk, and loading for runs.

use std::path::{Path, PathBuf};

use crate::data::{exp_profile, load_dataset, save_dataset, split_meta, Dataset, GaussianClasses, ImbalanceProfile};
use crate::error::{Error, Result};
use crate::metatrain::Splits;
use crate::rng::SeedTree;

use super::config::{DataSpec, SyntheticSpec};

#[derive(Debug, Clone)]
pub struct BenchmarkData {
    pub train: Dataset,
    /// Balanced meta set, also used for the per-epoch accuracy refresh.
    pub meta: Dataset,
    /// Balanced held-out set for reporting; `None` reports on `meta`.
    pub test: Option<Dataset>,
}

impl BenchmarkData {
    pub fn splits(&self) -> Splits<'_> {
        let s = Splits::new(&self.train, &self.meta);
        match &self.test {
            Some(t) => s.with_eval(t),
            None => s,
        }
    }

    pub fn eval_set(&self) -> &Dataset {
        self.test.as_ref().unwrap_or(&self.meta)
    }

    /// Most frequent over least frequent training class.
    pub fn realized_ratio(&self) -> f64 {
        let counts = self.train.counts();
        let max = counts.iter().copied().max().unwrap_or(0);
        let min = counts.iter().copied().min().unwrap_or(0);
        if min == 0 {
            f64::INFINITY
        } else {
            max as f64 / min as f64
        }
    }
}

/// Training counts follow the exponential profile exactly: the pool holds
/// `m_per_class` extra samples of every class, which become the meta set.
pub fn synthesize(spec: &SyntheticSpec) -> Result<BenchmarkData> {
    let profile = exp_profile(spec.classes, spec.n_max, spec.imbalance)?;
    let pool = crate::data::synth_gaussian(&profile.padded(spec.m_per_class), spec.dim, spec.separation, spec.seed)?;
    let (train, meta) = split_meta(&pool, spec.m_per_class, spec.seed)?;
    let test = if spec.test_per_class > 0 {
        let gen = GaussianClasses::new(spec.classes, spec.dim, spec.separation, spec.seed)?;
        let counts = ImbalanceProfile::balanced(spec.classes, spec.test_per_class).counts;
        Some(gen.sample(&counts, SeedTree::new(spec.seed).child("test").root())?)
    } else {
        None
    };
    Ok(BenchmarkData { train, meta, test })
}

pub fn load_data(spec: &DataSpec) -> Result<BenchmarkData> {
    match spec {
        DataSpec::Synthetic(s) => synthesize(s),
        DataSpec::Files { train, meta, test } => {
            let train = load_dataset(train)?;
            let meta = load_dataset(meta)?;
            let test = test.as_ref().map(load_dataset).transpose()?;
            if meta.classes() != train.classes() || test.as_ref().is_some_and(|t| t.classes() != train.classes()) {
                return Err(Error::invalid("dataset files disagree on class count"));
            }
            Ok(BenchmarkData { train, meta, test })
        }
    }
}

pub const TRAIN_FILE: &str = "train.ltds";
pub const META_FILE: &str = "meta.ltds";
pub const TEST_FILE: &str = "test.ltds";

/// Writes the benchmark files into `dir` and returns their paths.
pub fn write_data(data: &BenchmarkData, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (name, set) in [(TRAIN_FILE, Some(&data.train)), (META_FILE, Some(&data.meta)), (TEST_FILE, data.test.as_ref())] {
        let path = dir.join(name);
        match set {
            Some(d) => {
                save_dataset(d, &path)?;
                written.push(path);
            }
            None if path.exists() => std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?,
            None => {}
        }
    }
    Ok(written)
}

/// Synthesizes a benchmark and writes it to `dir`.
pub fn gen_data(spec: &SyntheticSpec, dir: &Path) -> Result<BenchmarkData> {
    let data = synthesize(spec)?;
    write_data(&data, dir)?;
    Ok(data)
}
