//! Difficulty-Net and the difficulty/weight computations around it.
//!
//! The network maps per-class accuracies to per-class difficulties in
//! `(0, 1)`, which are used directly as loss weights. Two ablation layouts
//! share the same machinery: an absolute head that scores each class from
//! its own accuracy, and a sample-level head that scores a batch of samples
//! from their losses.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nnet::{Activation, AccuracyVector, DenseNet};
use crate::rng::{Rng, SeedTree};

/// Clamp applied to difficulties before taking logs.
pub const ENTROPY_CLAMP: f64 = 1e-12;

/// `H = 2^n` with `2^(n-1) <= C < 2^n`.
pub fn hidden_width(classes: usize) -> usize {
    (classes + 1).next_power_of_two()
}

/// Per-class difficulties, each strictly inside `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DifficultyVector(Vec<f64>);

impl DifficultyVector {
    pub fn new(d: Vec<f64>) -> Result<Self> {
        if d.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
            return Err(Error::invalid("difficulties must lie strictly in (0, 1)"));
        }
        Ok(DifficultyVector(d))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// How scores are laid out against the network's input and output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// One row holding every class's accuracy; every output sees every input.
    Relative { classes: usize },
    /// One row per class with a single accuracy feature.
    Absolute,
    /// One row of `batch` per-sample losses; short batches are padded with
    /// their mean and the padded outputs dropped.
    Sample { batch: usize },
}

/// Two-hidden-layer ReLU network with a sigmoid output.
#[derive(Debug, Clone, PartialEq)]
pub struct DifficultyNet {
    net: DenseNet,
    layout: Layout,
    hidden: usize,
}

/// Forward state kept for [`DifficultyNet::backward`].
pub struct DifficultyTrace {
    trace: crate::nnet::Trace,
    len: usize,
}

impl DifficultyNet {
    fn build(inputs: usize, hidden: usize, outputs: usize, layout: Layout, rng: &mut Rng) -> Result<Self> {
        let net = DenseNet::init(&[inputs, hidden, hidden, outputs], Activation::Sigmoid, rng)?;
        Ok(DifficultyNet { net, layout, hidden })
    }

    /// Class-level relative Difficulty-Net for `classes` classes.
    pub fn relative(classes: usize, rng: &mut Rng) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid(format!("need at least 2 classes, got {classes}")));
        }
        let h = hidden_width(classes);
        Self::build(classes, h, classes, Layout::Relative { classes }, rng)
    }

    /// Scalar-in/scalar-out head applied independently per class. Uses the
    /// same hidden width as the relative net for `classes`.
    pub fn absolute(classes: usize, rng: &mut Rng) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid(format!("need at least 2 classes, got {classes}")));
        }
        Self::build(1, hidden_width(classes), 1, Layout::Absolute, rng)
    }

    /// Batch-in/batch-out head over per-sample losses.
    pub fn sample_level(batch: usize, rng: &mut Rng) -> Result<Self> {
        if batch < 1 {
            return Err(Error::invalid("batch width must be positive"));
        }
        Self::build(batch, hidden_width(batch), batch, Layout::Sample { batch }, rng)
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut DenseNet {
        &mut self.net
    }

    /// Zeroes the output layer so every score is `sigmoid(0) = 0.5`.
    pub fn zero_output_layer(&mut self) {
        let last = self.net.num_layers() - 1;
        self.net.weights_mut(last).fill(0.0);
        self.net.bias_mut(last).fill(0.0);
    }

    fn input(&self, values: &[f64]) -> Result<Array2<f64>> {
        match self.layout {
            Layout::Relative { classes } => {
                if values.len() != classes {
                    return Err(Error::shape(format!(
                        "{} accuracies for {classes} classes",
                        values.len()
                    )));
                }
                Ok(Array2::from_shape_vec((1, classes), values.to_vec()).expect("row"))
            }
            Layout::Absolute => {
                Ok(Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("column"))
            }
            Layout::Sample { batch } => {
                if values.len() > batch {
                    return Err(Error::shape(format!(
                        "batch of {} exceeds configured width {batch}",
                        values.len()
                    )));
                }
                if values.is_empty() {
                    return Err(Error::invalid("empty batch"));
                }
                let mean = values.iter().sum::<f64>() / values.len() as f64;
                let mut row = values.to_vec();
                row.resize(batch, mean);
                Ok(Array2::from_shape_vec((1, batch), row).expect("row"))
            }
        }
    }

    fn flatten_output(&self, out: &Array2<f64>, len: usize) -> Vec<f64> {
        match self.layout {
            Layout::Absolute => out.column(0).to_vec(),
            _ => out.row(0).iter().take(len).copied().collect(),
        }
    }

    /// Scores for `values` (accuracies or per-sample losses).
    pub fn scores(&self, values: &[f64]) -> Result<Vec<f64>> {
        let out = self.net.forward(self.input(values)?.view())?;
        Ok(self.flatten_output(&out, values.len()))
    }

    pub fn forward_trace(&self, values: &[f64]) -> Result<(Vec<f64>, DifficultyTrace)> {
        let trace = self.net.forward_trace(self.input(values)?.view())?;
        let scores = self.flatten_output(trace.output(), values.len());
        Ok((
            scores,
            DifficultyTrace {
                trace,
                len: values.len(),
            },
        ))
    }

    /// Parameter gradient of `sum_k cotangent[k] * score[k]`.
    pub fn backward(&self, trace: &DifficultyTrace, cotangent: &[f64]) -> Result<DenseNet> {
        if cotangent.len() != trace.len {
            return Err(Error::shape(format!(
                "{} cotangents for {} scores",
                cotangent.len(),
                trace.len
            )));
        }
        let dims = trace.trace.output().dim();
        let mut cot = Array2::zeros(dims);
        match self.layout {
            Layout::Absolute => cot.column_mut(0).iter_mut().zip(cotangent).for_each(|(c, &v)| *c = v),
            _ => cot.row_mut(0).iter_mut().zip(cotangent).for_each(|(c, &v)| *c = v),
        }
        self.net.vjp(&trace.trace, cot.view())
    }

    /// Difficulty vector for an accuracy vector (class-level layouts only).
    pub fn difficulties(&self, acc: &AccuracyVector) -> Result<DifficultyVector> {
        if let Layout::Sample { .. } = self.layout {
            return Err(Error::invalid("sample-level net does not score accuracies"));
        }
        Ok(DifficultyVector(self.scores(&acc.per_class)?))
    }
}

/// Relative Difficulty-Net with the hidden-width rule applied to `classes`.
pub fn dnet_init(classes: usize, seed: u64) -> Result<DifficultyNet> {
    DifficultyNet::relative(classes, &mut SeedTree::new(seed).child("dnet").rng())
}

pub fn dnet_forward(net: &DifficultyNet, acc: &AccuracyVector) -> Result<DifficultyVector> {
    net.difficulties(acc)
}

/// Absolute difficulty of one class from its own accuracy.
pub fn abs_dnet_forward(net: &DifficultyNet, accuracy: f64) -> Result<f64> {
    if net.layout() != Layout::Absolute {
        return Err(Error::invalid("not an absolute-difficulty net"));
    }
    Ok(net.scores(&[accuracy])?[0])
}

pub fn sample_dnet_forward(net: &DifficultyNet, losses: &[f64]) -> Result<Vec<f64>> {
    match net.layout() {
        Layout::Sample { .. } => net.scores(losses),
        _ => Err(Error::invalid("not a sample-level net")),
    }
}

/// `a_c / sum_k a_k`, or `1/C` everywhere when every accuracy is zero.
pub fn normalized_accuracy(acc: &[f64]) -> Vec<f64> {
    let total: f64 = acc.iter().sum();
    if total <= 0.0 {
        return vec![1.0 / acc.len() as f64; acc.len()];
    }
    acc.iter().map(|a| a / total).collect()
}

/// Driver targets `1 - a_hat_c`.
pub fn driver_targets(acc: &[f64]) -> Vec<f64> {
    normalized_accuracy(acc).into_iter().map(|a| 1.0 - a).collect()
}

/// Driver targets for per-sample losses: each sample's probability of its
/// label, `exp(-loss)`, plays the role of an accuracy.
pub fn sample_driver_targets(losses: &[f64]) -> Vec<f64> {
    let conf: Vec<f64> = losses.iter().map(|l| (-l).exp()).collect();
    driver_targets(&conf)
}

/// Mean squared distance between difficulties and `targets`, and its
/// gradient with respect to the difficulties.
pub fn driver_loss_against(d: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    if d.len() != targets.len() {
        return Err(Error::shape(format!(
            "{} difficulties for {} targets",
            d.len(),
            targets.len()
        )));
    }
    let c = d.len() as f64;
    let value = d
        .iter()
        .zip(targets)
        .map(|(d, t)| (t - d).powi(2))
        .sum::<f64>()
        / c;
    let cot = d.iter().zip(targets).map(|(d, t)| -2.0 / c * (t - d)).collect();
    Ok((value, cot))
}

/// Driver loss `(1/C) sum_c ((1 - a_hat_c) - d_c)^2` and `d value / d d_c`.
pub fn driver_loss(d: &[f64], acc: &AccuracyVector) -> Result<(f64, Vec<f64>)> {
    driver_loss_against(d, &driver_targets(&acc.per_class))
}

/// `w_i = d[y_i]`.
pub fn weights_from_difficulty(d: &[f64], labels: &[usize]) -> Result<Vec<f64>> {
    labels
        .iter()
        .map(|&y| {
            d.get(y).copied().ok_or(Error::LabelOutOfRange {
                label: y,
                classes: d.len(),
            })
        })
        .collect()
}

/// `-(1/C) sum_c ln(C d_c / sum_k d_k)`; zero iff the difficulties are
/// uniform, positive otherwise.
pub fn difficulty_entropy(d: &[f64]) -> f64 {
    let c = d.len() as f64;
    let clamped: Vec<f64> = d.iter().map(|v| v.max(ENTROPY_CLAMP)).collect();
    let total: f64 = clamped.iter().sum();
    -clamped.iter().map(|v| (c * v / total).ln()).sum::<f64>() / c
}
