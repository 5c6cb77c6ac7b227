//! Flat `key = value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::baselines::Scheme;
use crate::error::{Error, Result};
use crate::metatrain::{OptimizerSettings, SplitThresholds, TrainConfig, Variant};
use crate::nnet::{Activation, OptimizerKind};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Baseline(Scheme),
    Difficulty(Variant),
}

impl Method {
    pub const NAMES: [&'static str; 10] = [
        "ce",
        "invfreq",
        "effnum",
        "focal",
        "cdb",
        "dnet",
        "dnet-abs",
        "dnet-sample",
        "dnet-nodriver",
        "dnet-nometa",
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Baseline(s) => s.name(),
            Method::Difficulty(v) => v.name(),
        }
    }

    /// Whether runs of this method emit difficulty columns and a weight trace.
    pub fn has_class_difficulty(&self) -> bool {
        matches!(self, Method::Difficulty(v) if v.is_class_level())
    }

    fn parse(name: &str, params: &SchemeParams) -> Option<Method> {
        Some(match name {
            "ce" => Method::Baseline(Scheme::Uniform),
            "invfreq" => Method::Baseline(Scheme::InverseFrequency),
            "effnum" => Method::Baseline(Scheme::EffectiveNumber { beta: params.beta_en }),
            "focal" => Method::Baseline(Scheme::Focal { gamma: params.gamma }),
            "cdb" => Method::Baseline(Scheme::ClassDifficulty { tau: params.tau }),
            "dnet" => Method::Difficulty(Variant::DifficultyNet),
            "dnet-abs" => Method::Difficulty(Variant::Absolute),
            "dnet-sample" => Method::Difficulty(Variant::SampleLevel),
            "dnet-nodriver" => Method::Difficulty(Variant::NoDriver),
            "dnet-nometa" => Method::Difficulty(Variant::NoMeta),
            _ => return None,
        })
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

struct SchemeParams {
    tau: f64,
    gamma: f64,
    beta_en: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub n_max: usize,
    pub imbalance: f64,
    pub dim: usize,
    pub separation: f64,
    pub m_per_class: usize,
    /// Balanced test samples per class; 0 evaluates on the meta set.
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 10,
            n_max: 500,
            imbalance: 100.0,
            dim: 16,
            separation: 3.0,
            m_per_class: 10,
            test_per_class: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSpec {
    Files {
        train: PathBuf,
        meta: PathBuf,
        test: Option<PathBuf>,
    },
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Length {
    Iterations(usize),
    Epochs(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage2 {
    None,
    Crt,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSpec,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub length: Length,
    /// Template for every run; `seed`, `variant` and `iterations` are set
    /// per run.
    pub train: TrainConfig,
    pub hidden: usize,
    pub head: Activation,
    pub cosine_scale: f64,
    pub stage2: Stage2,
    pub crt_steps: usize,
    pub crt_alpha: f64,
    pub crt_batch_size: usize,
    /// Also train a cosine-head twin of every run and evaluate the
    /// two-member ensemble.
    pub ensemble: bool,
    pub out_dir: PathBuf,
    /// Empty selects the first, middle and last class.
    pub trace_classes: Vec<usize>,
}

const KEYS: &[&str] = &[
    "train_path",
    "meta_path",
    "test_path",
    "classes",
    "n_max",
    "imbalance",
    "dim",
    "separation",
    "m_per_class",
    "test_per_class",
    "data_seed",
    "methods",
    "seeds",
    "iterations",
    "epochs",
    "batch_size",
    "meta_batch_size",
    "alpha",
    "beta",
    "lambda",
    "momentum",
    "weight_decay",
    "dnet_optimizer",
    "dnet_weight_decay",
    "lr_milestones",
    "lr_decay",
    "many_min",
    "few_max",
    "trace_classes",
    "hidden",
    "head",
    "cosine_scale",
    "tau",
    "gamma",
    "beta_en",
    "stage2",
    "crt_steps",
    "crt_alpha",
    "crt_batch_size",
    "ensemble",
    "out_dir",
];

/// Raw key/value pairs before interpretation. Later assignments win.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut raw = RawConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
                path: origin.to_path_buf(),
                line: n + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            raw.set(k.trim(), v.trim())?;
        }
        Ok(raw)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KEYS.contains(&key) {
            return Err(Error::config(key, "unknown key"));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
        self.set(k.trim(), v.trim())
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::config(key, format!("cannot parse `{v}`"))),
        }
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse()
                            .map_err(|_| Error::config(key, format!("cannot parse `{s}`")))
                    })
                    .collect()
            })
            .transpose()
    }

    fn existing_path(&self, key: &str) -> Result<Option<PathBuf>> {
        match self.get(key) {
            None => Ok(None),
            Some(p) => {
                let path = PathBuf::from(p);
                if path.is_file() {
                    Ok(Some(path))
                } else {
                    Err(Error::config(key, format!("file `{p}` does not exist")))
                }
            }
        }
    }

    pub fn build(&self) -> Result<ExperimentConfig> {
        let data = match (self.existing_path("train_path")?, self.existing_path("meta_path")?) {
            (Some(train), Some(meta)) => DataSpec::Files {
                train,
                meta,
                test: self.existing_path("test_path")?,
            },
            (None, None) => {
                if self.get("test_path").is_some() {
                    return Err(Error::config("test_path", "needs train_path and meta_path"));
                }
                let d = SyntheticSpec::default();
                DataSpec::Synthetic(SyntheticSpec {
                    classes: self.parse_or("classes", d.classes)?,
                    n_max: self.parse_or("n_max", d.n_max)?,
                    imbalance: self.parse_or("imbalance", d.imbalance)?,
                    dim: self.parse_or("dim", d.dim)?,
                    separation: self.parse_or("separation", d.separation)?,
                    m_per_class: self.parse_or("m_per_class", d.m_per_class)?,
                    test_per_class: self.parse_or("test_per_class", d.test_per_class)?,
                    seed: self.parse_or("data_seed", d.seed)?,
                })
            }
            (Some(_), None) => return Err(Error::config("meta_path", "required with train_path")),
            (None, Some(_)) => return Err(Error::config("train_path", "required with meta_path")),
        };
        if let DataSpec::Files { .. } = data {
            for key in [
                "classes",
                "n_max",
                "imbalance",
                "dim",
                "separation",
                "m_per_class",
                "test_per_class",
                "data_seed",
            ] {
                if self.get(key).is_some() {
                    return Err(Error::config(key, "only valid for synthetic data"));
                }
            }
        }

        let params = SchemeParams {
            tau: self.parse_or("tau", 1.0)?,
            gamma: self.parse_or("gamma", 2.0)?,
            beta_en: self.parse_or("beta_en", 0.999)?,
        };
        let method_names: Vec<String> = self.list("methods")?.unwrap_or_else(|| vec!["dnet".into()]);
        if method_names.is_empty() {
            return Err(Error::config("methods", "no method selected"));
        }
        let mut methods = Vec::new();
        for name in &method_names {
            let m = Method::parse(name, &params).ok_or_else(|| {
                Error::config(
                    "methods",
                    format!("unknown method `{name}`; expected one of {}", Method::NAMES.join(", ")),
                )
            })?;
            if methods.contains(&m) {
                return Err(Error::config("methods", format!("`{name}` listed twice")));
            }
            methods.push(m);
        }
        let seeds: Vec<u64> = self.list("seeds")?.unwrap_or_else(|| vec![0]);
        if seeds.is_empty() {
            return Err(Error::config("seeds", "no seed given"));
        }
        let length = match (self.get("iterations"), self.get("epochs")) {
            (Some(_), Some(_)) => {
                return Err(Error::config("iterations", "set either iterations or epochs, not both"))
            }
            (Some(_), None) => Length::Iterations(self.parse_or("iterations", 0)?),
            (None, _) => Length::Epochs(self.parse_or("epochs", 30)?),
        };

        let batch_size: usize = self.parse_or("batch_size", 64)?;
        let momentum: f64 = self.parse_or("momentum", 0.9)?;
        let classifier_kind = if momentum == 0.0 {
            OptimizerKind::Sgd
        } else if (0.0..1.0).contains(&momentum) {
            OptimizerKind::Momentum { momentum }
        } else {
            return Err(Error::config("momentum", "must be in [0, 1)"));
        };
        let dnet_kind = match self.get("dnet_optimizer").unwrap_or("adam") {
            "adam" => OptimizerKind::adam(),
            "sgd" => OptimizerKind::Sgd,
            "momentum" => OptimizerKind::momentum(),
            other => {
                return Err(Error::config(
                    "dnet_optimizer",
                    format!("unknown optimizer `{other}`; expected adam, sgd or momentum"),
                ))
            }
        };
        let defaults = TrainConfig::default();
        let train = TrainConfig {
            iterations: 0,
            batch_size,
            meta_batch_size: self.parse_or("meta_batch_size", batch_size)?,
            alpha: self.parse_or("alpha", defaults.alpha)?,
            beta: self.parse_or("beta", defaults.beta)?,
            lambda: self.parse_or("lambda", defaults.lambda)?,
            classifier_opt: OptimizerSettings {
                kind: classifier_kind,
                weight_decay: self.parse_or("weight_decay", defaults.classifier_opt.weight_decay)?,
            },
            dnet_opt: OptimizerSettings {
                kind: dnet_kind,
                weight_decay: self.parse_or("dnet_weight_decay", defaults.dnet_opt.weight_decay)?,
            },
            lr_milestones: self.list("lr_milestones")?.unwrap_or_default(),
            lr_decay: self.parse_or("lr_decay", defaults.lr_decay)?,
            seed: 0,
            variant: Variant::DifficultyNet,
            thresholds: SplitThresholds {
                many_min: self.parse_or("many_min", 100)?,
                few_max: self.parse_or("few_max", 20)?,
            },
            trace_classes: Vec::new(),
        };
        train.validate()?;
        for (key, v) in [
            ("weight_decay", train.classifier_opt.weight_decay),
            ("dnet_weight_decay", train.dnet_opt.weight_decay),
        ] {
            if !(v >= 0.0) {
                return Err(Error::config(key, "must be >= 0"));
            }
        }

        let cosine_scale: f64 = self.parse_or("cosine_scale", 16.0)?;
        if !(cosine_scale > 0.0) {
            return Err(Error::config("cosine_scale", "must be > 0"));
        }
        let head = match self.get("head").unwrap_or("linear") {
            "linear" => Activation::Identity,
            "cosine" => Activation::Cosine { scale: cosine_scale },
            other => {
                return Err(Error::config("head", format!("unknown head `{other}`; expected linear or cosine")))
            }
        };
        let hidden: usize = self.parse_or("hidden", 64)?;
        if hidden == 0 {
            return Err(Error::config("hidden", "must be positive"));
        }
        let stage2 = match self.get("stage2").unwrap_or("none") {
            "none" => Stage2::None,
            "crt" => Stage2::Crt,
            other => {
                return Err(Error::config("stage2", format!("unknown stage `{other}`; expected none or crt")))
            }
        };
        let crt_alpha: f64 = self.parse_or("crt_alpha", 0.01)?;
        if !(crt_alpha > 0.0) {
            return Err(Error::config("crt_alpha", "must be > 0"));
        }
        let crt_batch_size: usize = self.parse_or("crt_batch_size", batch_size)?;
        if crt_batch_size == 0 {
            return Err(Error::config("crt_batch_size", "must be positive"));
        }
        let ensemble: bool = self.parse_or("ensemble", false)?;
        if ensemble && head != Activation::Identity {
            return Err(Error::config("ensemble", "the ensemble pairs a linear head with a cosine head; set head = linear"));
        }

        let cfg = ExperimentConfig {
            data,
            methods,
            seeds,
            length,
            train,
            hidden,
            head,
            cosine_scale,
            stage2,
            crt_steps: self.parse_or("crt_steps", 50)?,
            crt_alpha,
            crt_batch_size,
            ensemble,
            out_dir: self.get("out_dir").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs")),
            trace_classes: self.list("trace_classes")?.unwrap_or_default(),
        };
        for m in &cfg.methods {
            if let Method::Baseline(s) = m {
                s.validate().map_err(|e| {
                    let key = match s {
                        Scheme::EffectiveNumber { .. } => "beta_en",
                        Scheme::Focal { .. } => "gamma",
                        _ => "tau",
                    };
                    Error::config(key, e.to_string())
                })?;
            }
        }
        Ok(cfg)
    }
}

impl ExperimentConfig {
    /// Parses `text`, applies `overrides` in order and validates.
    pub fn from_text(text: &str, origin: &Path, overrides: &[String]) -> Result<Self> {
        let mut raw = RawConfig::parse(text, origin)?;
        for o in overrides {
            raw.apply_override(o)?;
        }
        raw.build()
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path, overrides)
    }
}
