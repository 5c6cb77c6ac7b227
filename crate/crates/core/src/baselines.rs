//! Reweighting baselines, classifier retraining and ensembling.

use std::fmt;

use ndarray::{Array2, ArrayView2};
use rand::Rng as _;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metatrain::{
    run_loop, OptimizerSettings, StepContext, StepRecord, StepWeights, Splits, TrainConfig,
    TrainResult, Weighting,
};
use crate::nnet::{loss_and_grad, softmax_rows, AccuracyVector, DenseNet, Loss, OptimizerState};
use crate::rng::{Rng, SeedTree};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scheme {
    /// Plain cross-entropy.
    Uniform,
    /// `w_c ∝ 1/n_c`, rescaled to mean 1 over classes.
    InverseFrequency,
    /// `w_c ∝ (1 - beta) / (1 - beta^n_c)`, rescaled to mean 1.
    EffectiveNumber { beta: f64 },
    /// Unweighted focal loss.
    Focal { gamma: f64 },
    /// `w_c = (1 - a_c)^tau` with accuracies refreshed every epoch.
    ClassDifficulty { tau: f64 },
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Uniform => "ce",
            Scheme::InverseFrequency => "invfreq",
            Scheme::EffectiveNumber { .. } => "effnum",
            Scheme::Focal { .. } => "focal",
            Scheme::ClassDifficulty { .. } => "cdb",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Scheme::EffectiveNumber { beta } if !(0.0..1.0).contains(&beta) => {
                Err(Error::invalid(format!("effective-number beta must be in [0, 1), got {beta}")))
            }
            Scheme::Focal { gamma } if !(gamma >= 0.0) => {
                Err(Error::invalid(format!("focal gamma must be >= 0, got {gamma}")))
            }
            Scheme::ClassDifficulty { tau } if !(tau > 0.0) => {
                Err(Error::invalid(format!("difficulty exponent tau must be > 0, got {tau}")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Class weights from training counts, rescaled to mean 1. Every count
/// must be positive.
pub fn frequency_weights(counts: &[usize], scheme: Scheme) -> Result<Vec<f64>> {
    scheme.validate()?;
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::MissingClass(c));
    }
    if counts.is_empty() {
        return Err(Error::invalid("no classes"));
    }
    let w: Vec<f64> = match scheme {
        Scheme::Uniform | Scheme::Focal { .. } => return Ok(vec![1.0; counts.len()]),
        Scheme::InverseFrequency => counts.iter().map(|&n| 1.0 / n as f64).collect(),
        Scheme::EffectiveNumber { beta } => counts
            .iter()
            .map(|&n| (1.0 - beta) / (1.0 - beta.powi(n as i32)))
            .collect(),
        Scheme::ClassDifficulty { .. } => {
            return Err(Error::invalid("class-difficulty weights depend on accuracies"))
        }
    };
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    Ok(w.into_iter().map(|v| v / mean).collect())
}

/// `(1 - a_c)^tau`, not normalized.
pub fn difficulty_weights(acc: &AccuracyVector, tau: f64) -> Result<Vec<f64>> {
    Scheme::ClassDifficulty { tau }.validate()?;
    Ok(acc.per_class.iter().map(|a| (1.0 - a).powf(tau)).collect())
}

struct SchemeWeighting {
    scheme: Scheme,
    class_weights: Vec<f64>,
}

impl Weighting for SchemeWeighting {
    fn on_epoch(&mut self, acc: &AccuracyVector) -> Result<()> {
        if let Scheme::ClassDifficulty { tau } = self.scheme {
            self.class_weights = difficulty_weights(acc, tau)?;
        }
        Ok(())
    }

    fn step(&mut self, ctx: StepContext<'_>) -> Result<StepWeights> {
        Ok(StepWeights {
            weights: ctx.train.y.iter().map(|&y| self.class_weights[y]).collect(),
            virtual_weights: None,
            class_weights: Some(self.class_weights.clone()),
        })
    }

    fn loss(&self) -> Loss {
        match self.scheme {
            Scheme::Focal { gamma } => Loss::Focal { gamma },
            _ => Loss::CrossEntropy,
        }
    }
}

/// Trains a classifier with a fixed or accuracy-driven reweighting.
/// `config.variant`, `beta` and `lambda` are ignored.
pub fn train_baseline(
    config: &TrainConfig,
    splits: Splits<'_>,
    classifier: DenseNet,
    scheme: Scheme,
) -> TrainResult {
    train_baseline_observed(config, splits, classifier, scheme, &mut |_| {})
}

pub fn train_baseline_observed(
    config: &TrainConfig,
    splits: Splits<'_>,
    classifier: DenseNet,
    scheme: Scheme,
    observer: &mut dyn FnMut(&StepRecord<'_>),
) -> TrainResult {
    let class_weights = match scheme {
        Scheme::ClassDifficulty { tau } => {
            Scheme::ClassDifficulty { tau }.validate()?;
            vec![1.0; splits.train.classes()]
        }
        s => frequency_weights(splits.train.counts(), s)?,
    };
    let weighting = SchemeWeighting {
        scheme,
        class_weights,
    };
    run_loop(config, splits, classifier, Box::new(weighting), observer)
}

/// Endless batches where each row is a uniformly drawn class, then a
/// uniformly drawn sample of that class.
pub struct ClassBalancedSampler {
    by_class: Vec<Vec<usize>>,
    batch_size: usize,
    rng: Rng,
}

impl ClassBalancedSampler {
    pub fn new(dataset: &Dataset, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        let by_class = dataset.class_indices();
        if let Some(c) = by_class.iter().position(|c| c.is_empty()) {
            return Err(Error::MissingClass(c));
        }
        Ok(ClassBalancedSampler {
            by_class,
            batch_size,
            rng: SeedTree::new(seed).child("class-balanced").rng(),
        })
    }
}

impl Iterator for ClassBalancedSampler {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let batch = (0..self.batch_size)
            .map(|_| {
                let class = &self.by_class[self.rng.random_range(0..self.by_class.len())];
                class[self.rng.random_range(0..class.len())]
            })
            .collect();
        Some(batch)
    }
}

pub fn class_balanced_batches(dataset: &Dataset, batch_size: usize, seed: u64) -> Result<ClassBalancedSampler> {
    ClassBalancedSampler::new(dataset, batch_size, seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrtConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub optimizer: OptimizerSettings,
    pub seed: u64,
}

/// Classifier retraining: the last layer is reinitialized and trained with
/// class-balanced batches while every earlier layer stays frozen. With
/// zero steps the model is returned as is.
pub fn crt_retrain(model: &DenseNet, train: &Dataset, config: &CrtConfig) -> Result<DenseNet> {
    if model.output_dim() != train.classes() {
        return Err(Error::shape(format!(
            "model has {} outputs for {} classes",
            model.output_dim(),
            train.classes()
        )));
    }
    if !(config.alpha > 0.0) {
        return Err(Error::config("crt_alpha", "must be > 0"));
    }
    if config.steps == 0 {
        return Ok(model.clone());
    }
    let seeds = SeedTree::new(config.seed).child("crt");
    let last = model.num_layers() - 1;
    let mut out = model.clone();
    out.reinit_layer(last, &mut seeds.child("head").rng());
    let mut head = DenseNet::from_layers(vec![(
        out.weights(last).to_owned(),
        out.bias(last).to_owned(),
        out.activations()[last],
    )])?;
    let mut opt = OptimizerState::new(config.optimizer.kind, config.alpha, config.optimizer.weight_decay, &head);
    let sampler = class_balanced_batches(train, config.batch_size, seeds.root())?;
    for (step, idx) in sampler.take(config.steps).enumerate() {
        let (x, y) = train.batch(&idx);
        let h = model.features(x.view())?;
        let (loss, grad) = loss_and_grad(&head, h.view(), &y, &vec![1.0; y.len()], Loss::CrossEntropy)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                what: format!("retraining loss {loss}"),
            });
        }
        opt.step(&mut head, &grad)?;
    }
    let range = out.layer_range(last);
    out.params_mut()[range].copy_from_slice(head.params());
    Ok(out)
}

/// Mean of the members' softmax probabilities.
pub fn ensemble_predict(models: &[DenseNet], inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let first = models
        .first()
        .ok_or_else(|| Error::invalid("ensemble needs at least one model"))?;
    let classes = first.output_dim();
    let mut sum = Array2::<f64>::zeros((inputs.nrows(), classes));
    for m in models {
        if m.output_dim() != classes {
            return Err(Error::shape(format!(
                "ensemble members disagree on class count: {} vs {classes}",
                m.output_dim()
            )));
        }
        sum += &softmax_rows(m.forward(inputs)?.view());
    }
    Ok(sum / models.len() as f64)
}

/// Per-class accuracy of the ensemble's argmax prediction.
pub fn ensemble_accuracy(models: &[DenseNet], eval_set: &Dataset) -> Result<AccuracyVector> {
    let probs = ensemble_predict(models, eval_set.features())?;
    let pred = crate::nnet::argmax_rows(probs.view());
    crate::nnet::accuracy_from_predictions(&pred, eval_set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{exp_profile, split_meta, synth_gaussian};
    use crate::metatrain::Variant;
    use crate::nnet::{per_class_accuracy, Activation};
    use proptest::prelude::*;

    #[test]
    fn inverse_frequency_two_classes() {
        let w = frequency_weights(&[90, 10], Scheme::InverseFrequency).unwrap();
        assert!((w[0] - 0.2).abs() < 1e-12 && (w[1] - 1.8).abs() < 1e-12);
        assert_eq!(frequency_weights(&[7, 7, 7], Scheme::InverseFrequency).unwrap(), vec![1.0; 3]);
        let scaled = frequency_weights(&[900, 100], Scheme::InverseFrequency).unwrap();
        assert!(w.iter().zip(&scaled).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(matches!(
            frequency_weights(&[5, 0], Scheme::InverseFrequency),
            Err(Error::MissingClass(1))
        ));
    }

    #[test]
    fn effective_number_ratio() {
        let w = frequency_weights(&[100, 1], Scheme::EffectiveNumber { beta: 0.99 }).unwrap();
        let ratio = (1.0 - 0.99f64.powi(100)) / (1.0 - 0.99);
        assert!((w[1] / w[0] - ratio).abs() < 1e-9);
        assert!((ratio - 63.4).abs() < 0.05);
    }

    #[test]
    fn inverse_frequency_values() {
        let w = frequency_weights(&[100, 10, 1], Scheme::InverseFrequency).unwrap();
        // raw 0.01, 0.1, 1 with mean 0.37
        let expected = [0.01 / 0.37, 0.1 / 0.37, 1.0 / 0.37];
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn effective_number_limits() {
        // beta -> 0 gives uniform weights
        let w = frequency_weights(&[100, 10, 1], Scheme::EffectiveNumber { beta: 0.0 }).unwrap();
        assert!(w.iter().all(|v| (v - 1.0).abs() < 1e-12));
        // beta close to one approaches inverse frequency
        let w = frequency_weights(&[100, 10, 1], Scheme::EffectiveNumber { beta: 1.0 - 1e-9 }).unwrap();
        let inv = frequency_weights(&[100, 10, 1], Scheme::InverseFrequency).unwrap();
        for (a, b) in w.iter().zip(&inv) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
        assert!(frequency_weights(&[1], Scheme::EffectiveNumber { beta: 1.0 }).is_err());
    }

    #[test]
    fn difficulty_weight_values() {
        let a = AccuracyVector::new(vec![1.0, 0.5, 0.0], "t").unwrap();
        assert_eq!(difficulty_weights(&a, 2.0).unwrap(), vec![0.0, 0.25, 1.0]);
        let a = AccuracyVector::new(vec![0.8, 0.2], "t").unwrap();
        let w1 = difficulty_weights(&a, 1.0).unwrap();
        assert!((w1[0] - 0.2).abs() < 1e-12 && (w1[1] - 0.8).abs() < 1e-12);
        let w2 = difficulty_weights(&a, 2.0).unwrap();
        assert!((w2[0] - 0.04).abs() < 1e-12 && (w2[1] - 0.64).abs() < 1e-12);
        let ones = AccuracyVector::new(vec![1.0; 4], "t").unwrap();
        assert_eq!(difficulty_weights(&ones, 0.5).unwrap(), vec![0.0; 4]);
        assert!(difficulty_weights(&a, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn frequency_weights_have_mean_one_and_decrease(counts in prop::collection::vec(1usize..500, 2..12), beta in 0.0f64..0.9999) {
            for scheme in [Scheme::InverseFrequency, Scheme::EffectiveNumber { beta }] {
                let w = frequency_weights(&counts, scheme).unwrap();
                let mean = w.iter().sum::<f64>() / w.len() as f64;
                prop_assert!((mean - 1.0).abs() < 1e-9);
                for i in 0..counts.len() {
                    for j in 0..counts.len() {
                        if counts[i] < counts[j] {
                            prop_assert!(w[i] >= w[j] - 1e-12);
                        }
                    }
                }
            }
        }
    }

    fn sets() -> (Dataset, Dataset) {
        let p = exp_profile(10, 200, 50.0).unwrap().padded(5);
        let pool = synth_gaussian(&p, 6, 3.0, 3).unwrap();
        split_meta(&pool, 5, 3).unwrap()
    }

    #[test]
    fn balanced_sampler_frequencies() {
        let (train, _) = sets();
        let sampler = class_balanced_batches(&train, 100, 17).unwrap();
        let mut hits = vec![0usize; 10];
        for batch in sampler.take(100) {
            for i in batch {
                hits[train.labels()[i]] += 1;
            }
        }
        assert!(class_balanced_batches(&train, 100, 17).unwrap().take(3).eq(class_balanced_batches(&train, 100, 17).unwrap().take(3)));
        for h in hits {
            let f = h as f64 / 10_000.0;
            assert!((0.07..=0.13).contains(&f), "frequency {f}");
        }
    }

    fn config() -> TrainConfig {
        TrainConfig {
            iterations: 30,
            batch_size: 32,
            meta_batch_size: 16,
            variant: Variant::DifficultyNet,
            ..TrainConfig::default()
        }
    }

    fn net(seed: u64, head: Activation) -> DenseNet {
        DenseNet::init(&[6, 12, 10], head, &mut SeedTree::new(seed).rng()).unwrap()
    }

    #[test]
    fn every_scheme_trains_and_is_deterministic() {
        let (train, meta) = sets();
        for scheme in [
            Scheme::Uniform,
            Scheme::InverseFrequency,
            Scheme::EffectiveNumber { beta: 0.999 },
            Scheme::Focal { gamma: 2.0 },
            Scheme::ClassDifficulty { tau: 1.5 },
        ] {
            let run = || train_baseline(&config(), Splits::new(&train, &meta), net(1, Activation::Identity), scheme).unwrap();
            let (a, b) = (run(), run());
            assert_eq!(a.classifier, b.classifier, "{scheme}");
            assert_eq!(a.metrics, b.metrics);
            assert!(a.metrics.epochs.iter().all(|e| e.difficulty.is_none()));
            assert!(a.dnet.is_none());
        }
    }

    #[test]
    fn ce_learns_something() {
        let (train, meta) = sets();
        let cfg = TrainConfig { iterations: 300, ..config() };
        let before = per_class_accuracy(&net(2, Activation::Identity), &meta).unwrap().balanced();
        let out = train_baseline(&cfg, Splits::new(&train, &meta), net(2, Activation::Identity), Scheme::Uniform).unwrap();
        let after = out.metrics.epochs.last().unwrap().splits.overall;
        assert!(after > before + 0.2, "{before} -> {after}");
    }

    fn crt_config(steps: usize) -> CrtConfig {
        CrtConfig {
            steps,
            batch_size: 32,
            alpha: 0.05,
            optimizer: OptimizerSettings {
                kind: crate::nnet::OptimizerKind::momentum(),
                weight_decay: 1e-4,
            },
            seed: 5,
        }
    }

    #[test]
    fn crt_freezes_features_and_changes_head() {
        let (train, _) = sets();
        for head in [Activation::Identity, Activation::Cosine { scale: 10.0 }] {
            let model = net(3, head);
            let out = crt_retrain(&model, &train, &crt_config(50)).unwrap();
            let last = model.num_layers() - 1;
            let frozen = 0..model.layer_range(last).start;
            assert_eq!(model.params()[frozen.clone()], out.params()[frozen]);
            assert_ne!(model.params()[model.layer_range(last)], out.params()[out.layer_range(last)]);
            assert_eq!(out, crt_retrain(&model, &train, &crt_config(50)).unwrap());
        }
    }

    #[test]
    fn crt_with_zero_steps_is_identity() {
        let (train, _) = sets();
        let model = net(4, Activation::Identity);
        assert_eq!(crt_retrain(&model, &train, &crt_config(0)).unwrap(), model);
    }

    #[test]
    fn ensemble_is_mean_of_probabilities() {
        let (_, meta) = sets();
        let a = net(5, Activation::Identity);
        let b = net(6, Activation::Cosine { scale: 8.0 });
        let p = ensemble_predict(&[a.clone(), b.clone()], meta.features()).unwrap();
        let pa = softmax_rows(a.forward(meta.features()).unwrap().view());
        let pb = softmax_rows(b.forward(meta.features()).unwrap().view());
        for ((x, y), z) in p.iter().zip(pa.iter()).zip(pb.iter()) {
            assert!((x - 0.5 * (y + z)).abs() < 1e-15);
        }
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let single = ensemble_predict(std::slice::from_ref(&a), meta.features()).unwrap();
        assert_eq!(single, pa);
        let wrong = DenseNet::init(&[6, 4, 3], Activation::Identity, &mut SeedTree::new(0).rng()).unwrap();
        assert!(ensemble_predict(&[a, wrong], meta.features()).is_err());
        assert!(ensemble_predict(&[], meta.features()).is_err());

        // opposite one-hot members average to uniform over the two classes
        let x = ndarray::array![[1.0]];
        let one_hot = |sign: f64| {
            DenseNet::from_layers(vec![(ndarray::array![[60.0 * sign], [-60.0 * sign]], ndarray::array![0.0, 0.0], Activation::Identity)]).unwrap()
        };
        let p = ensemble_predict(&[one_hot(1.0), one_hot(-1.0)], x.view()).unwrap();
        assert!((p[[0, 0]] - 0.5).abs() < 1e-12 && (p[[0, 1]] - 0.5).abs() < 1e-12);
    }
}
