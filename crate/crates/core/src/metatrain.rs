//! Bilevel training of a classifier with Difficulty-Net weights.
//!
//! Each iteration:
//! 1. weights `w_i = D(A; theta)[y_i]` for a training batch;
//! 2. a virtual plain-SGD step `phi_hat = phi - alpha * grad L_w(phi)`;
//! 3. a Difficulty-Net update on `lambda * L_driver + L_meta(phi_hat(theta))`;
//! 4. weights recomputed with the new `theta` and an actual classifier step
//!    on the same batch.
//!
//! Per-class accuracies `A` are refreshed on the meta set at every epoch
//! boundary and held fixed within the epoch.
//!
//! The meta-gradient uses the decomposition
//! `grad_theta = lambda * grad L_dr + sum_c v_c * grad D_c` with
//! `v_c = -(alpha/b) * sum_{i: y_i = c} <grad L_i(phi), grad L_meta(phi_hat)>`,
//! so no second-order autodiff is needed: one backward pass at `phi_hat`,
//! forward-mode per-sample dot products at `phi`, and one backward pass
//! through the Difficulty-Net.

use std::fmt;

use ndarray::ArrayView2;
use rand::seq::{index, SliceRandom};
use rand::Rng as _;

use crate::data::Dataset;
use crate::difficulty::{
    difficulty_entropy, driver_loss_against, driver_targets, normalized_accuracy,
    sample_driver_targets, DifficultyNet, Layout,
};
use crate::error::{Error, Result};
use crate::nnet::{
    backward, loss_and_grad, per_class_accuracy, per_sample_grad_dots, weighted_ce_loss,
    AccuracyVector, DenseNet, Loss, OptimizerKind, OptimizerState,
};
use crate::rng::SeedTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Class-level relative difficulty with driver loss and meta loss.
    DifficultyNet,
    /// Per-class scalar head (absolute difficulty).
    Absolute,
    /// Per-sample difficulties from the batch's losses.
    SampleLevel,
    /// Difficulty-Net trained by the meta loss alone (`lambda` ignored).
    NoDriver,
    /// No learned network: class weights `1 - a_hat_c` refreshed per epoch.
    NoMeta,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::DifficultyNet => "dnet",
            Variant::Absolute => "dnet-abs",
            Variant::SampleLevel => "dnet-sample",
            Variant::NoDriver => "dnet-nodriver",
            Variant::NoMeta => "dnet-nometa",
        }
    }

    /// Whether this variant produces one difficulty per class.
    pub fn is_class_level(self) -> bool {
        !matches!(self, Variant::SampleLevel)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerSettings {
    pub kind: OptimizerKind,
    pub weight_decay: f64,
}

/// Count thresholds for the many/medium/few buckets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitThresholds {
    /// Classes with more training samples than this are "many".
    pub many_min: usize,
    /// Classes with fewer training samples than this are "few".
    pub few_max: usize,
}

impl Default for SplitThresholds {
    fn default() -> Self {
        SplitThresholds {
            many_min: 100,
            few_max: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Maximum number of iterations `T`.
    pub iterations: usize,
    /// Training batch size `b`.
    pub batch_size: usize,
    /// Meta batch size `m`.
    pub meta_batch_size: usize,
    /// Classifier step size, also used by the virtual step.
    pub alpha: f64,
    /// Difficulty-Net step size.
    pub beta: f64,
    /// Driver-loss coefficient.
    pub lambda: f64,
    pub classifier_opt: OptimizerSettings,
    pub dnet_opt: OptimizerSettings,
    /// Epochs after which `alpha` is multiplied by `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub seed: u64,
    pub variant: Variant,
    pub thresholds: SplitThresholds,
    /// Classes whose normalized weights are traced every step.
    pub trace_classes: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 0,
            batch_size: 64,
            meta_batch_size: 64,
            alpha: 0.1,
            beta: 0.001,
            lambda: 0.3,
            classifier_opt: OptimizerSettings {
                kind: OptimizerKind::momentum(),
                weight_decay: 1e-4,
            },
            dnet_opt: OptimizerSettings {
                kind: OptimizerKind::adam(),
                weight_decay: 1e-4,
            },
            lr_milestones: Vec::new(),
            lr_decay: 0.1,
            seed: 0,
            variant: Variant::DifficultyNet,
            thresholds: SplitThresholds::default(),
            trace_classes: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: &str| Err(Error::config(k, m));
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.meta_batch_size == 0 {
            return bad("meta_batch_size", "must be positive");
        }
        if !(self.alpha > 0.0) {
            return bad("alpha", "must be > 0");
        }
        if !(self.beta > 0.0) {
            return bad("beta", "must be > 0");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda", "must be >= 0");
        }
        if self.thresholds.many_min <= self.thresholds.few_max {
            return bad("many_min", "must exceed few_max");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, train_len: usize) -> usize {
        train_len.div_ceil(self.batch_size).max(1)
    }

    /// Iterations covering `epochs` passes over `train_len` samples.
    pub fn iterations_for_epochs(&self, epochs: usize, train_len: usize) -> usize {
        epochs * self.steps_per_epoch(train_len)
    }

    fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let passed = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        self.alpha * self.lr_decay.powi(passed as i32)
    }
}

/// Training, meta and evaluation sets for one run.
#[derive(Debug, Clone, Copy)]
pub struct Splits<'a> {
    pub train: &'a Dataset,
    /// Balanced set for the meta objective and the accuracy refresh.
    pub meta: &'a Dataset,
    /// Set that per-epoch metrics are reported on.
    pub eval: &'a Dataset,
}

impl<'a> Splits<'a> {
    pub fn new(train: &'a Dataset, meta: &'a Dataset) -> Self {
        Splits {
            train,
            meta,
            eval: meta,
        }
    }

    pub fn with_eval(mut self, eval: &'a Dataset) -> Self {
        self.eval = eval;
        self
    }

    fn check(&self, classifier: &DenseNet) -> Result<()> {
        let c = self.train.classes();
        if self.meta.classes() != c || self.eval.classes() != c {
            return Err(Error::invalid("train, meta and eval sets disagree on class count"));
        }
        if classifier.output_dim() != c {
            return Err(Error::shape(format!(
                "classifier has {} outputs for {c} classes",
                classifier.output_dim()
            )));
        }
        if let Some(cl) = self.meta.counts().iter().position(|&n| n == 0) {
            return Err(Error::MissingClass(cl));
        }
        if self.train.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        Ok(())
    }
}

/// Mean accuracy per bucket; a bucket with no classes is `None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitAccuracy {
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
    pub overall: f64,
}

pub fn evaluate_splits(
    acc: &AccuracyVector,
    counts: &[usize],
    thresholds: SplitThresholds,
) -> Result<SplitAccuracy> {
    if thresholds.many_min <= thresholds.few_max {
        return Err(Error::invalid("many_min must exceed few_max"));
    }
    if counts.len() != acc.len() {
        return Err(Error::shape(format!(
            "{} counts for {} accuracies",
            counts.len(),
            acc.len()
        )));
    }
    let mut sums = [(0.0, 0usize); 3];
    for (&a, &n) in acc.per_class.iter().zip(counts) {
        let bucket = if n > thresholds.many_min {
            0
        } else if n >= thresholds.few_max {
            1
        } else {
            2
        };
        sums[bucket].0 += a;
        sums[bucket].1 += 1;
    }
    let mean = |(s, k): (f64, usize)| (k > 0).then(|| s / k as f64);
    Ok(SplitAccuracy {
        many: mean(sums[0]),
        medium: mean(sums[1]),
        few: mean(sums[2]),
        overall: acc.balanced(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub accuracy: AccuracyVector,
    pub splits: SplitAccuracy,
    /// Per-class difficulties at the end of the epoch, for class-level
    /// difficulty methods.
    pub difficulty: Option<Vec<f64>>,
    pub entropy: Option<f64>,
    /// Mean weighted training loss over the epoch's steps.
    pub train_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightTracePoint {
    pub step: usize,
    pub class: usize,
    /// `w_c / sum_k w_k`.
    pub normalized_weight: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub epochs: Vec<EpochRecord>,
    pub weight_trace: Vec<WeightTracePoint>,
    pub step_losses: Vec<f64>,
}

/// What one iteration did, for observers.
#[derive(Debug, Clone)]
pub struct StepRecord<'a> {
    pub step: usize,
    pub epoch: usize,
    pub batch: &'a [usize],
    pub accuracy: &'a AccuracyVector,
    /// Weights used by the virtual step, when there is one.
    pub virtual_weights: Option<&'a [f64]>,
    /// Weights used by the actual classifier update.
    pub weights: &'a [f64],
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub classifier: DenseNet,
    pub dnet: Option<DifficultyNet>,
    pub metrics: RunMetrics,
}

/// A run that stopped early, with the metrics gathered so far.
#[derive(Debug)]
pub struct Aborted {
    pub error: Error,
    pub metrics: RunMetrics,
}

impl fmt::Display for Aborted {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (after {} epochs)", self.error, self.metrics.epochs.len())
    }
}

impl std::error::Error for Aborted {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<Error> for Aborted {
    fn from(error: Error) -> Self {
        Aborted {
            error,
            metrics: RunMetrics::default(),
        }
    }
}

pub type TrainResult = std::result::Result<TrainOutput, Aborted>;

/// A borrowed batch of rows and labels.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub x: ArrayView2<'a, f64>,
    pub y: &'a [usize],
}

/// `phi - alpha * (1/b) sum_i w_i grad L_i(phi)`, always plain SGD.
pub fn virtual_step(phi: &DenseNet, batch: Batch<'_>, weights: &[f64], alpha: f64) -> Result<DenseNet> {
    let g = backward(phi, batch.x, batch.y, weights)?;
    let mut out = phi.clone();
    out.axpy(-alpha, &g)?;
    Ok(out)
}

/// Result of one meta-gradient evaluation.
#[derive(Debug, Clone)]
pub struct MetaGradient {
    /// Gradient of the meta objective with respect to the Difficulty-Net
    /// parameters.
    pub grad: DenseNet,
    /// Difficulty scores at the current parameters (per class, or per
    /// sample for the sample-level layout).
    pub scores: Vec<f64>,
    /// Per-sample weights used by the virtual step.
    pub weights: Vec<f64>,
    pub driver_loss: f64,
    /// Mean cross-entropy on the meta batch at `phi_hat`.
    pub meta_loss: f64,
}

/// Scores fed to the Difficulty-Net and the driver targets for them.
fn dnet_inputs(
    dnet: &DifficultyNet,
    classifier: &DenseNet,
    acc: &AccuracyVector,
    train: Batch<'_>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    match dnet.layout() {
        Layout::Sample { .. } => {
            let logits = classifier.forward(train.x)?;
            let (_, losses) = weighted_ce_loss(logits.view(), train.y, &vec![1.0; train.y.len()])?;
            let targets = sample_driver_targets(&losses);
            Ok((losses, targets))
        }
        _ => Ok((acc.per_class.clone(), driver_targets(&acc.per_class))),
    }
}

fn weights_for(layout: Layout, scores: &[f64], labels: &[usize]) -> Result<Vec<f64>> {
    match layout {
        Layout::Sample { .. } => Ok(scores.to_vec()),
        _ => crate::difficulty::weights_from_difficulty(scores, labels),
    }
}

/// Gradient over the Difficulty-Net parameters of
/// `lambda * L_driver(A, theta) + (1/m) sum_j L_meta_j(phi_hat(theta))`.
pub fn meta_gradient(
    dnet: &DifficultyNet,
    classifier: &DenseNet,
    acc: &AccuracyVector,
    train: Batch<'_>,
    meta: Batch<'_>,
    alpha: f64,
    lambda: f64,
) -> Result<MetaGradient> {
    if meta.y.is_empty() {
        return Err(Error::invalid("meta batch must not be empty"));
    }
    let b = train.y.len();
    if b == 0 {
        return Err(Error::invalid("training batch must not be empty"));
    }
    let layout = dnet.layout();
    let (inputs, targets) = dnet_inputs(dnet, classifier, acc, train)?;
    let (scores, trace) = dnet.forward_trace(&inputs)?;
    let weights = weights_for(layout, &scores, train.y)?;

    let phi_hat = virtual_step(classifier, train, &weights, alpha)?;
    let meta_ones = vec![1.0; meta.y.len()];
    let (meta_loss, meta_grad) = loss_and_grad(&phi_hat, meta.x, meta.y, &meta_ones, Loss::CrossEntropy)?;

    // d phi_hat / d w_i = -(alpha/b) grad L_i(phi)
    let dots = per_sample_grad_dots(classifier, train.x, train.y, &meta_grad)?;
    let scale = -alpha / b as f64;
    let mut cot = vec![0.0; scores.len()];
    match layout {
        Layout::Sample { .. } => {
            for (c, d) in cot.iter_mut().zip(&dots) {
                *c = scale * d;
            }
        }
        _ => {
            for (&y, d) in train.y.iter().zip(&dots) {
                cot[y] += scale * d;
            }
        }
    }

    let (driver_loss, driver_cot) = driver_loss_against(&scores, &targets)?;
    if lambda != 0.0 {
        for (c, d) in cot.iter_mut().zip(&driver_cot) {
            *c += lambda * d;
        }
    }
    let grad = dnet.backward(&trace, &cot)?;
    Ok(MetaGradient {
        grad,
        scores,
        weights,
        driver_loss,
        meta_loss,
    })
}

/// Per-epoch batch order and per-step meta batches, all seeded.
pub(crate) struct BatchPlan {
    order: Vec<usize>,
    steps_per_epoch: usize,
    batch_size: usize,
    epoch: Option<usize>,
    batch_seeds: SeedTree,
    meta_seeds: SeedTree,
    meta_len: usize,
    meta_batch: usize,
}

impl BatchPlan {
    pub(crate) fn new(config: &TrainConfig, train_len: usize, meta_len: usize) -> Self {
        let seeds = SeedTree::new(config.seed);
        BatchPlan {
            order: (0..train_len).collect(),
            steps_per_epoch: config.steps_per_epoch(train_len),
            batch_size: config.batch_size,
            epoch: None,
            batch_seeds: seeds.child("batches"),
            meta_seeds: seeds.child("meta-batches"),
            meta_len,
            meta_batch: config.meta_batch_size,
        }
    }

    pub(crate) fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub(crate) fn train_batch(&mut self, step: usize) -> Vec<usize> {
        let epoch = step / self.steps_per_epoch;
        if self.epoch != Some(epoch) {
            self.order.sort_unstable();
            self.order
                .shuffle(&mut self.batch_seeds.index(epoch as u64).rng());
            self.epoch = Some(epoch);
        }
        let start = (step % self.steps_per_epoch) * self.batch_size;
        let end = (start + self.batch_size).min(self.order.len());
        self.order[start..end].to_vec()
    }

    pub(crate) fn meta_batch(&self, step: usize) -> Vec<usize> {
        let mut rng = self.meta_seeds.index(step as u64).rng();
        if self.meta_batch <= self.meta_len {
            index::sample(&mut rng, self.meta_len, self.meta_batch).into_vec()
        } else {
            (0..self.meta_batch)
                .map(|_| rng.random_range(0..self.meta_len))
                .collect()
        }
    }
}

/// Per-method weighting strategy plugged into [`run_loop`].
pub(crate) trait Weighting {
    /// Called at each epoch start with accuracies refreshed on the meta set.
    fn on_epoch(&mut self, _acc: &AccuracyVector) -> Result<()> {
        Ok(())
    }

    /// Weights for the actual update of this step; may update internal
    /// parameters first.
    fn step(&mut self, ctx: StepContext<'_>) -> Result<StepWeights>;

    fn loss(&self) -> Loss {
        Loss::CrossEntropy
    }

    /// Current per-class difficulties for the epoch record.
    fn difficulty(&self, _acc: &AccuracyVector) -> Result<Option<Vec<f64>>> {
        Ok(None)
    }

    fn into_dnet(self: Box<Self>) -> Option<DifficultyNet> {
        None
    }
}

pub(crate) struct StepContext<'a> {
    pub classifier: &'a DenseNet,
    pub acc: &'a AccuracyVector,
    pub train: Batch<'a>,
    pub meta: Batch<'a>,
    pub alpha: f64,
    pub step: usize,
}

pub(crate) struct StepWeights {
    pub weights: Vec<f64>,
    pub virtual_weights: Option<Vec<f64>>,
    /// Per-class weights for the trace, when the method has them.
    pub class_weights: Option<Vec<f64>>,
}

fn nonfinite(step: usize, what: impl Into<String>) -> Error {
    Error::NonFinite {
        step,
        what: what.into(),
    }
}

fn epoch_record(
    epoch: usize,
    classifier: &DenseNet,
    splits: &Splits<'_>,
    config: &TrainConfig,
    difficulty: Option<Vec<f64>>,
    train_loss: f64,
) -> Result<EpochRecord> {
    let mut accuracy = per_class_accuracy(classifier, splits.eval)?;
    accuracy.evaluated_on = "eval".into();
    let split = evaluate_splits(&accuracy, splits.train.counts(), config.thresholds)?;
    let entropy = difficulty.as_deref().map(difficulty_entropy);
    Ok(EpochRecord {
        epoch,
        accuracy,
        splits: split,
        difficulty,
        entropy,
        train_loss,
    })
}

/// Shared epoch/batch loop for every method.
pub(crate) fn run_loop(
    config: &TrainConfig,
    splits: Splits<'_>,
    mut classifier: DenseNet,
    mut weighting: Box<dyn Weighting + '_>,
    observer: &mut dyn FnMut(&StepRecord<'_>),
) -> TrainResult {
    config.validate()?;
    splits.check(&classifier)?;
    let mut metrics = RunMetrics::default();
    if config.iterations == 0 {
        return Ok(TrainOutput {
            classifier,
            dnet: weighting.into_dnet(),
            metrics,
        });
    }
    let mut plan = BatchPlan::new(config, splits.train.len(), splits.meta.len());
    let spe = plan.steps_per_epoch();
    let mut opt = OptimizerState::new(
        config.classifier_opt.kind,
        config.alpha,
        config.classifier_opt.weight_decay,
        &classifier,
    );
    let mut acc = AccuracyVector {
        per_class: vec![0.0; splits.train.classes()],
        evaluated_on: String::new(),
    };
    let mut epoch_loss = 0.0;
    let mut epoch_steps = 0usize;

    for step in 0..config.iterations {
        let epoch = step / spe;
        let result = (|| -> Result<()> {
            if step % spe == 0 {
                opt.lr = config.lr_at_epoch(epoch);
                acc = per_class_accuracy(&classifier, splits.meta)?;
                acc.evaluated_on = "meta".into();
                weighting.on_epoch(&acc)?;
            }
            let idx = plan.train_batch(step);
            let midx = plan.meta_batch(step);
            let (x, y) = splits.train.batch(&idx);
            let (xm, ym) = splits.meta.batch(&midx);
            let sw = weighting.step(StepContext {
                classifier: &classifier,
                acc: &acc,
                train: Batch { x: x.view(), y: &y },
                meta: Batch { x: xm.view(), y: &ym },
                alpha: opt.lr,
                step,
            })?;
            let (loss, grad) = loss_and_grad(&classifier, x.view(), &y, &sw.weights, weighting.loss())?;
            if !loss.is_finite() {
                return Err(nonfinite(step, format!("training loss {loss}")));
            }
            opt.step(&mut classifier, &grad)?;
            if !classifier.is_finite() {
                return Err(nonfinite(step, "classifier parameters"));
            }
            if let Some(cw) = &sw.class_weights {
                let total: f64 = cw.iter().sum();
                for &c in &config.trace_classes {
                    if let Some(&w) = cw.get(c) {
                        metrics.weight_trace.push(WeightTracePoint {
                            step,
                            class: c,
                            normalized_weight: if total > 0.0 { w / total } else { 0.0 },
                        });
                    }
                }
            }
            metrics.step_losses.push(loss);
            epoch_loss += loss;
            epoch_steps += 1;
            observer(&StepRecord {
                step,
                epoch,
                batch: &idx,
                accuracy: &acc,
                virtual_weights: sw.virtual_weights.as_deref(),
                weights: &sw.weights,
                loss,
            });
            if (step + 1) % spe == 0 || step + 1 == config.iterations {
                let difficulty = weighting.difficulty(&acc)?;
                let record = epoch_record(
                    epoch + 1,
                    &classifier,
                    &splits,
                    config,
                    difficulty,
                    epoch_loss / epoch_steps as f64,
                )?;
                metrics.epochs.push(record);
                epoch_loss = 0.0;
                epoch_steps = 0;
            }
            Ok(())
        })();
        if let Err(error) = result {
            return Err(Aborted { error, metrics });
        }
    }
    Ok(TrainOutput {
        classifier,
        dnet: weighting.into_dnet(),
        metrics,
    })
}

/// Learned difficulty weighting (every variant except [`Variant::NoMeta`]).
struct DnetWeighting {
    dnet: DifficultyNet,
    opt: OptimizerState,
    lambda: f64,
}

impl Weighting for DnetWeighting {
    fn step(&mut self, ctx: StepContext<'_>) -> Result<StepWeights> {
        let mg = meta_gradient(
            &self.dnet,
            ctx.classifier,
            ctx.acc,
            ctx.train,
            ctx.meta,
            ctx.alpha,
            self.lambda,
        )?;
        if !mg.grad.is_finite() {
            return Err(nonfinite(ctx.step, "difficulty-net gradient"));
        }
        self.opt.step(self.dnet.net_mut(), &mg.grad)?;
        let (inputs, _) = dnet_inputs(&self.dnet, ctx.classifier, ctx.acc, ctx.train)?;
        let scores = self.dnet.scores(&inputs)?;
        let weights = weights_for(self.dnet.layout(), &scores, ctx.train.y)?;
        let class_level = !matches!(self.dnet.layout(), Layout::Sample { .. });
        Ok(StepWeights {
            weights,
            virtual_weights: Some(mg.weights),
            class_weights: class_level.then_some(scores),
        })
    }

    fn difficulty(&self, acc: &AccuracyVector) -> Result<Option<Vec<f64>>> {
        match self.dnet.layout() {
            Layout::Sample { .. } => Ok(None),
            _ => self.dnet.scores(&acc.per_class).map(Some),
        }
    }

    fn into_dnet(self: Box<Self>) -> Option<DifficultyNet> {
        Some(self.dnet)
    }
}

/// Direct weighting `w_c = 1 - a_hat_c`, no learned parameters.
struct DirectWeighting {
    class_weights: Vec<f64>,
}

impl Weighting for DirectWeighting {
    fn on_epoch(&mut self, acc: &AccuracyVector) -> Result<()> {
        self.class_weights = normalized_accuracy(&acc.per_class)
            .into_iter()
            .map(|a| 1.0 - a)
            .collect();
        Ok(())
    }

    fn step(&mut self, ctx: StepContext<'_>) -> Result<StepWeights> {
        Ok(StepWeights {
            weights: crate::difficulty::weights_from_difficulty(&self.class_weights, ctx.train.y)?,
            virtual_weights: None,
            class_weights: Some(self.class_weights.clone()),
        })
    }

    fn difficulty(&self, _acc: &AccuracyVector) -> Result<Option<Vec<f64>>> {
        Ok(Some(self.class_weights.clone()))
    }
}

/// Builds the Difficulty-Net that `variant` expects.
pub fn dnet_for_variant(
    variant: Variant,
    classes: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Option<DifficultyNet>> {
    let mut rng = SeedTree::new(seed).child("dnet").rng();
    Ok(match variant {
        Variant::DifficultyNet | Variant::NoDriver => Some(DifficultyNet::relative(classes, &mut rng)?),
        Variant::Absolute => Some(DifficultyNet::absolute(classes, &mut rng)?),
        Variant::SampleLevel => Some(DifficultyNet::sample_level(batch_size, &mut rng)?),
        Variant::NoMeta => None,
    })
}

fn weighting_for(
    config: &TrainConfig,
    classes: usize,
    dnet: Option<DifficultyNet>,
) -> Result<Box<dyn Weighting>> {
    if config.variant == Variant::NoMeta {
        return Ok(Box::new(DirectWeighting {
            class_weights: vec![1.0; classes],
        }));
    }
    let dnet = dnet.ok_or_else(|| Error::invalid(format!("variant {} needs a difficulty net", config.variant)))?;
    let layout_ok = match (config.variant, dnet.layout()) {
        (Variant::DifficultyNet | Variant::NoDriver, Layout::Relative { classes: c }) => c == classes,
        (Variant::Absolute, Layout::Absolute) => true,
        (Variant::SampleLevel, Layout::Sample { batch }) => batch >= config.batch_size,
        _ => false,
    };
    if !layout_ok {
        return Err(Error::invalid(format!(
            "difficulty net layout {:?} does not fit variant {}",
            dnet.layout(),
            config.variant
        )));
    }
    let lambda = if config.variant == Variant::NoDriver {
        0.0
    } else {
        config.lambda
    };
    let opt = OptimizerState::new(config.dnet_opt.kind, config.beta, config.dnet_opt.weight_decay, dnet.net());
    Ok(Box::new(DnetWeighting { dnet, opt, lambda }))
}

/// Runs the bilevel loop for `config.iterations` steps.
pub fn train(
    config: &TrainConfig,
    splits: Splits<'_>,
    classifier: DenseNet,
    dnet: Option<DifficultyNet>,
) -> TrainResult {
    train_observed(config, splits, classifier, dnet, &mut |_| {})
}

/// [`train`] with a callback after every iteration.
pub fn train_observed(
    config: &TrainConfig,
    splits: Splits<'_>,
    classifier: DenseNet,
    dnet: Option<DifficultyNet>,
    observer: &mut dyn FnMut(&StepRecord<'_>),
) -> TrainResult {
    let weighting = weighting_for(config, splits.train.classes(), dnet)?;
    run_loop(config, splits, classifier, weighting, observer)
}
