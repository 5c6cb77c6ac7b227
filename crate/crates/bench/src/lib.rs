//! Shared fixtures for the criterion benches under `benches/`.

use ltlab_core::data::Dataset;
use ltlab_core::difficulty::DifficultyNet;
use ltlab_core::harness::{synthesize, BenchmarkData, SyntheticSpec};
use ltlab_core::metatrain::Batch;
use ltlab_core::nnet::{per_class_accuracy, AccuracyVector, Activation, DenseNet};
use ltlab_core::rng::SeedTree;
use ltlab_core::Result;

/// One meta step's worth of inputs on a synthetic benchmark.
pub struct Fixture {
    pub data: BenchmarkData,
    pub classifier: DenseNet,
    pub dnet: DifficultyNet,
    pub acc: AccuracyVector,
    pub train_batch: Dataset,
    pub meta_batch: Dataset,
}

impl Fixture {
    pub fn new(classes: usize, hidden: usize, batch: usize) -> Result<Self> {
        let spec = SyntheticSpec {
            classes,
            test_per_class: 0,
            ..SyntheticSpec::default()
        };
        let data = synthesize(&spec)?;
        let seeds = SeedTree::new(0);
        let classifier = DenseNet::init(&[spec.dim, hidden, classes], Activation::Identity, &mut seeds.child("clf").rng())?;
        let dnet = DifficultyNet::relative(classes, &mut seeds.child("dnet").rng())?;
        let acc = per_class_accuracy(&classifier, &data.meta)?;
        let stride = |n: usize| (0..batch).map(|i| (i * 7919) % n).collect::<Vec<_>>();
        let train_batch = data.train.subset(&stride(data.train.len()));
        let meta_batch = data.meta.subset(&stride(data.meta.len()));
        Ok(Fixture {
            data,
            classifier,
            dnet,
            acc,
            train_batch,
            meta_batch,
        })
    }

    pub fn train(&self) -> Batch<'_> {
        Batch {
            x: self.train_batch.features(),
            y: self.train_batch.labels(),
        }
    }

    pub fn meta(&self) -> Batch<'_> {
        Batch {
            x: self.meta_batch.features(),
            y: self.meta_batch.labels(),
        }
    }
}
