use ndarray::ArrayView2;

use super::DenseNet;
use crate::data::Dataset;
use crate::error::{Error, Result};

/// Per-class accuracies `a_c` of a classifier on a labeled set.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyVector {
    pub per_class: Vec<f64>,
    pub evaluated_on: String,
}

impl AccuracyVector {
    pub fn new(per_class: Vec<f64>, evaluated_on: impl Into<String>) -> Result<Self> {
        if per_class.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::invalid("accuracies must lie in [0, 1]"));
        }
        Ok(AccuracyVector {
            per_class,
            evaluated_on: evaluated_on.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.per_class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_class.is_empty()
    }

    /// Mean of the per-class accuracies.
    pub fn balanced(&self) -> f64 {
        self.per_class.iter().sum::<f64>() / self.per_class.len().max(1) as f64
    }
}

/// Index of the largest entry per row; ties go to the lowest index.
pub fn argmax_rows(scores: ArrayView2<'_, f64>) -> Vec<usize> {
    scores
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn predict(net: &DenseNet, inputs: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    Ok(argmax_rows(net.forward(inputs)?.view()))
}

pub fn per_class_accuracy(net: &DenseNet, eval_set: &Dataset) -> Result<AccuracyVector> {
    accuracy_from_predictions(&predict(net, eval_set.features())?, eval_set)
}

pub(crate) fn accuracy_from_predictions(pred: &[usize], eval_set: &Dataset) -> Result<AccuracyVector> {
    if let Some(c) = eval_set.counts().iter().position(|&n| n == 0) {
        return Err(Error::MissingClass(c));
    }
    let mut correct = vec![0usize; eval_set.classes()];
    for (&p, &y) in pred.iter().zip(eval_set.labels()) {
        if p == y {
            correct[y] += 1;
        }
    }
    let per_class = correct
        .iter()
        .zip(eval_set.counts())
        .map(|(&k, &n)| k as f64 / n as f64)
        .collect();
    Ok(AccuracyVector {
        per_class,
        evaluated_on: String::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::Activation;
    use ndarray::{array, Array1, Array2};

    fn labeled(points: Array2<f64>, labels: Vec<usize>, c: usize) -> Dataset {
        Dataset::new(points, labels, c).unwrap()
    }

    #[test]
    fn perfect_and_constant_classifiers() {
        let d = labeled(array![[1.0, 0.0], [0.0, 1.0], [2.0, 0.0]], vec![0, 1, 0], 2);
        let ident = DenseNet::from_layers(vec![(
            array![[1.0, 0.0], [0.0, 1.0]],
            Array1::zeros(2),
            Activation::Identity,
        )])
        .unwrap();
        assert_eq!(per_class_accuracy(&ident, &d).unwrap().per_class, vec![1.0, 1.0]);
        let constant = DenseNet::from_layers(vec![(
            Array2::zeros((2, 2)),
            array![1.0, 0.0],
            Activation::Identity,
        )])
        .unwrap();
        assert_eq!(per_class_accuracy(&constant, &d).unwrap().per_class, vec![1.0, 0.0]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        assert_eq!(argmax_rows(array![[0.5, 0.5, 0.1], [0.0, 1.0, 1.0]].view()), vec![0, 1]);
        let zero = DenseNet::zeros(&[2, 3], &[Activation::Identity]).unwrap();
        let d = labeled(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]], vec![0, 1, 2], 3);
        assert_eq!(per_class_accuracy(&zero, &d).unwrap().per_class, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn missing_class_is_an_error() {
        let zero = DenseNet::zeros(&[1, 3], &[Activation::Identity]).unwrap();
        let d = labeled(array![[1.0], [2.0]], vec![0, 2], 3);
        assert!(matches!(per_class_accuracy(&zero, &d), Err(Error::MissingClass(1))));
    }

    #[test]
    fn balanced_is_mean() {
        let a = AccuracyVector::new(vec![1.0, 0.5, 0.0], "x").unwrap();
        assert_eq!(a.balanced(), 0.5);
        assert!(AccuracyVector::new(vec![1.5], "x").is_err());
    }
}
