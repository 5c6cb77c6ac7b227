//! Seeded runs of every (method, seed) pair and their on-disk artifacts.
//!
//! Layout of one run directory `<out_dir>/<method>/seed-<n>/`:
//! - `metrics.csv`: one row per epoch;
//! - `weights_trace.csv`: class-difficulty methods only;
//! - `classifier.ltnn`, and `dnet.ltnn` for learned difficulty methods;
//! - `metrics-cosine.csv`, `classifier-cosine.ltnn`, `ensemble.csv` when the
//!   ensemble is enabled;
//! - `classifier-crt.ltnn`, `crt.csv` after stage 2;
//! - `manifest.txt`: timestamps and wall time, the only file that differs
//!   between reruns.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;

use crate::baselines::{crt_retrain, ensemble_accuracy, train_baseline, CrtConfig};
use crate::error::{Error, Result};
use crate::metatrain::{
    dnet_for_variant, evaluate_splits, train, Aborted, OptimizerSettings, RunMetrics, SplitAccuracy,
    TrainConfig, TrainOutput,
};
use crate::nnet::{load_checkpoint, per_class_accuracy, save_checkpoint, Activation, DenseNet, OptimizerKind};
use crate::rng::SeedTree;

use super::config::{ExperimentConfig, Length, Method, Stage2};
use super::data::{load_data, BenchmarkData};

pub const METRICS_FILE: &str = "metrics.csv";
pub const TRACE_FILE: &str = "weights_trace.csv";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CLASSIFIER_FILE: &str = "classifier.ltnn";
pub const COSINE_CLASSIFIER_FILE: &str = "classifier-cosine.ltnn";
pub const COSINE_METRICS_FILE: &str = "metrics-cosine.csv";
pub const DNET_FILE: &str = "dnet.ltnn";
pub const CRT_CLASSIFIER_FILE: &str = "classifier-crt.ltnn";
pub const CRT_FILE: &str = "crt.csv";
pub const ENSEMBLE_FILE: &str = "ensemble.csv";

pub fn run_dir(out_dir: &Path, method: &Method, seed: u64) -> PathBuf {
    out_dir.join(method.name()).join(format!("seed-{seed}"))
}

/// Final-epoch summary of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub method: Method,
    pub seed: u64,
    pub dir: PathBuf,
    pub splits: Option<SplitAccuracy>,
    pub entropy: Option<f64>,
    pub crt: Option<SplitAccuracy>,
    /// Linear member, cosine member, ensemble.
    pub ensemble: Option<[SplitAccuracy; 3]>,
}

/// `LTLAB_THREADS` if set to a positive integer, else the number of CPUs.
pub fn thread_count() -> usize {
    std::env::var("LTLAB_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn fmt_f(v: f64) -> String {
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f).unwrap_or_default()
}

pub fn metrics_csv(metrics: &RunMetrics, classes: usize, with_difficulty: bool) -> String {
    let mut s = String::from("epoch,overall,many,medium,few");
    if with_difficulty {
        s.push_str(",entropy");
        for c in 0..classes {
            write!(s, ",d_{c}").unwrap();
        }
    }
    s.push('\n');
    for e in &metrics.epochs {
        let sp = &e.splits;
        write!(
            s,
            "{},{},{},{},{}",
            e.epoch,
            fmt_f(sp.overall),
            fmt_opt(sp.many),
            fmt_opt(sp.medium),
            fmt_opt(sp.few)
        )
        .unwrap();
        if with_difficulty {
            write!(s, ",{}", fmt_opt(e.entropy)).unwrap();
            for c in 0..classes {
                let d = e.difficulty.as_ref().and_then(|d| d.get(c).copied());
                write!(s, ",{}", fmt_opt(d)).unwrap();
            }
        }
        s.push('\n');
    }
    s
}

pub fn trace_csv(metrics: &RunMetrics) -> String {
    let mut s = String::from("step,class,normalized_weight\n");
    for p in &metrics.weight_trace {
        writeln!(s, "{},{},{}", p.step, p.class, fmt_f(p.normalized_weight)).unwrap();
    }
    s
}

fn splits_csv(header: &str, rows: &[(&str, SplitAccuracy)]) -> String {
    let mut s = format!("{header},overall,many,medium,few\n");
    for (name, sp) in rows {
        writeln!(
            s,
            "{name},{},{},{},{}",
            fmt_f(sp.overall),
            fmt_opt(sp.many),
            fmt_opt(sp.medium),
            fmt_opt(sp.few)
        )
        .unwrap();
    }
    s
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

impl ExperimentConfig {
    fn default_trace_classes(&self, classes: usize) -> Vec<usize> {
        if !self.trace_classes.is_empty() {
            return self.trace_classes.clone();
        }
        let mut t = vec![0, classes / 2, classes - 1];
        t.dedup();
        t
    }

    /// Training configuration of one run.
    pub fn run_config(&self, method: &Method, seed: u64, data: &BenchmarkData) -> TrainConfig {
        let mut cfg = self.train.clone();
        cfg.seed = seed;
        if let Method::Difficulty(v) = method {
            cfg.variant = *v;
        }
        cfg.iterations = match self.length {
            Length::Iterations(n) => n,
            Length::Epochs(e) => cfg.iterations_for_epochs(e, data.train.len()),
        };
        cfg.trace_classes = self.default_trace_classes(data.train.classes());
        cfg
    }

    /// Freshly initialized classifier `dim -> hidden -> classes`.
    pub fn classifier(&self, head: Activation, seed: u64, data: &BenchmarkData) -> Result<DenseNet> {
        let label = match head {
            Activation::Cosine { .. } => "classifier-cosine",
            _ => "classifier",
        };
        DenseNet::init(
            &[data.train.dim(), self.hidden, data.train.classes()],
            head,
            &mut SeedTree::new(seed).child(label).rng(),
        )
    }

    pub fn crt_config(&self, seed: u64) -> CrtConfig {
        CrtConfig {
            steps: self.crt_steps,
            batch_size: self.crt_batch_size,
            alpha: self.crt_alpha,
            optimizer: OptimizerSettings {
                kind: match self.train.classifier_opt.kind {
                    OptimizerKind::Adam { .. } => OptimizerKind::momentum(),
                    k => k,
                },
                weight_decay: self.train.classifier_opt.weight_decay,
            },
            seed: SeedTree::new(seed).child("stage2").root(),
        }
    }
}

/// Trains one classifier with `method`.
pub fn train_method(
    cfg: &ExperimentConfig,
    method: &Method,
    seed: u64,
    data: &BenchmarkData,
    head: Activation,
) -> std::result::Result<TrainOutput, Aborted> {
    let tc = cfg.run_config(method, seed, data);
    let classifier = cfg.classifier(head, seed, data)?;
    match method {
        Method::Baseline(scheme) => train_baseline(&tc, data.splits(), classifier, *scheme),
        Method::Difficulty(v) => {
            let dnet = dnet_for_variant(*v, data.train.classes(), tc.batch_size, seed)?;
            train(&tc, data.splits(), classifier, dnet)
        }
    }
}

fn eval_splits(cfg: &ExperimentConfig, net: &DenseNet, data: &BenchmarkData) -> Result<SplitAccuracy> {
    let acc = per_class_accuracy(net, data.eval_set())?;
    evaluate_splits(&acc, data.train.counts(), cfg.train.thresholds)
}

fn crt_stage(cfg: &ExperimentConfig, seed: u64, dir: &Path, data: &BenchmarkData) -> Result<SplitAccuracy> {
    let model = load_checkpoint(dir.join(CLASSIFIER_FILE))?;
    let before = eval_splits(cfg, &model, data)?;
    let retrained = crt_retrain(&model, &data.train, &cfg.crt_config(seed))?;
    let after = eval_splits(cfg, &retrained, data)?;
    save_checkpoint(&retrained, dir.join(CRT_CLASSIFIER_FILE))?;
    write(&dir.join(CRT_FILE), splits_csv("stage", &[("stage1", before), ("crt", after)]))?;
    Ok(after)
}

fn ensemble_stage(cfg: &ExperimentConfig, dir: &Path, data: &BenchmarkData) -> Result<[SplitAccuracy; 3]> {
    let linear = load_checkpoint(dir.join(CLASSIFIER_FILE))?;
    let cosine = load_checkpoint(dir.join(COSINE_CLASSIFIER_FILE))?;
    let a = eval_splits(cfg, &linear, data)?;
    let b = eval_splits(cfg, &cosine, data)?;
    let acc = ensemble_accuracy(&[linear, cosine], data.eval_set())?;
    let e = evaluate_splits(&acc, data.train.counts(), cfg.train.thresholds)?;
    write(
        &dir.join(ENSEMBLE_FILE),
        splits_csv("member", &[("linear", a), ("cosine", b), ("ensemble", e)]),
    )?;
    Ok([a, b, e])
}

fn write_training(
    dir: &Path,
    method: &Method,
    classes: usize,
    metrics: &RunMetrics,
    metrics_file: &str,
) -> Result<()> {
    let with_d = method.has_class_difficulty();
    write(&dir.join(metrics_file), metrics_csv(metrics, classes, with_d))?;
    if with_d && metrics_file == METRICS_FILE {
        write(&dir.join(TRACE_FILE), trace_csv(metrics))?;
    }
    Ok(())
}

/// Trains, evaluates and writes one (method, seed) run.
pub fn run_one(cfg: &ExperimentConfig, data: &BenchmarkData, method: &Method, seed: u64) -> Result<RunOutcome> {
    let started = unix_now();
    let clock = Instant::now();
    let dir = run_dir(&cfg.out_dir, method, seed);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let classes = data.train.classes();
    let manifest = |status: &str| {
        format!(
            "method = {method}\nseed = {seed}\nstatus = {status}\nstarted_unix = {started:.3}\nfinished_unix = {:.3}\nwall_seconds = {:.3}\n",
            unix_now(),
            clock.elapsed().as_secs_f64()
        )
    };

    let mut heads = vec![(cfg.head, METRICS_FILE, CLASSIFIER_FILE)];
    if cfg.ensemble {
        heads.push((
            Activation::Cosine { scale: cfg.cosine_scale },
            COSINE_METRICS_FILE,
            COSINE_CLASSIFIER_FILE,
        ));
    }
    let mut primary = None;
    for (head, metrics_file, classifier_file) in heads {
        match train_method(cfg, method, seed, data, head) {
            Ok(out) => {
                write_training(&dir, method, classes, &out.metrics, metrics_file)?;
                save_checkpoint(&out.classifier, dir.join(classifier_file))?;
                if primary.is_none() {
                    if let Some(d) = &out.dnet {
                        save_checkpoint(d.net(), dir.join(DNET_FILE))?;
                    }
                    primary = Some(out.metrics);
                }
            }
            Err(aborted) => {
                write_training(&dir, method, classes, &aborted.metrics, metrics_file)?;
                write(&dir.join(MANIFEST_FILE), manifest(&format!("aborted: {}", aborted.error)))?;
                return Err(aborted.error);
            }
        }
    }
    let metrics = primary.expect("at least one head");
    let last = metrics.epochs.last();
    let ensemble = if cfg.ensemble {
        Some(ensemble_stage(cfg, &dir, data)?)
    } else {
        None
    };
    let crt = match cfg.stage2 {
        Stage2::Crt => Some(crt_stage(cfg, seed, &dir, data)?),
        Stage2::None => None,
    };
    write(&dir.join(MANIFEST_FILE), manifest("ok"))?;
    Ok(RunOutcome {
        method: *method,
        seed,
        dir,
        splits: last.map(|e| e.splits),
        entropy: last.and_then(|e| e.entropy),
        crt,
        ensemble,
    })
}

fn jobs(cfg: &ExperimentConfig) -> Vec<(Method, u64)> {
    cfg.methods
        .iter()
        .flat_map(|m| cfg.seeds.iter().map(move |&s| (*m, s)))
        .collect()
}

fn on_pool<T: Send>(threads: usize, work: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker threads: {e}")))?;
    Ok(pool.install(work))
}

/// Results of every run in (method, seed) order. All runs are attempted;
/// failures are reported per run.
pub fn run_all(cfg: &ExperimentConfig, threads: usize) -> Result<Vec<Result<RunOutcome>>> {
    let data = load_data(&cfg.data)?;
    let jobs = jobs(cfg);
    on_pool(threads, || {
        jobs.par_iter()
            .map(|(m, s)| run_one(cfg, &data, m, *s))
            .collect()
    })
}

/// Like [`run_all`], failing with the first error in job order.
pub fn run(cfg: &ExperimentConfig, threads: usize) -> Result<Vec<RunOutcome>> {
    run_all(cfg, threads)?.into_iter().collect()
}

/// Stage 2 on the checkpoints of an earlier [`run`].
pub fn run_crt(cfg: &ExperimentConfig, threads: usize) -> Result<Vec<SplitAccuracy>> {
    let data = load_data(&cfg.data)?;
    let jobs = jobs(cfg);
    on_pool(threads, || {
        jobs.par_iter()
            .map(|(m, s)| crt_stage(cfg, *s, &run_dir(&cfg.out_dir, m, *s), &data))
            .collect::<Result<Vec<_>>>()
    })?
}

/// Ensemble evaluation on the checkpoints of an earlier [`run`] with the
/// ensemble enabled.
pub fn run_ensemble(cfg: &ExperimentConfig, threads: usize) -> Result<Vec<[SplitAccuracy; 3]>> {
    let data = load_data(&cfg.data)?;
    let jobs = jobs(cfg);
    on_pool(threads, || {
        jobs.par_iter()
            .map(|(m, s)| ensemble_stage(cfg, &run_dir(&cfg.out_dir, m, *s), &data))
            .collect::<Result<Vec<_>>>()
    })?
}
