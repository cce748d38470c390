//! Datasets: in-memory image tensors with labels, split helpers, and the
//! synthetic and CIFAR sources.

pub mod cifar;
pub mod synthetic;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::SeededRng;

/// Images stored `[N, C, H, W]` with integer labels in `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Per-sample pixel-noise standard deviation (0 where not applicable).
    pub noise: Vec<f64>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, noise: Vec<f64>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::InvalidTensor(format!("images must be [N, C, H, W], got {:?}", images.shape())));
        }
        if images.batch() != labels.len() || noise.len() != labels.len() {
            return Err(Error::Config(format!(
                "{} images, {} labels, {} noise levels",
                images.batch(),
                labels.len(),
                noise.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Config(format!("label {l} out of range for {num_classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            noise,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `[C, H, W]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            noise: idx.iter().map(|&i| self.noise[i]).collect(),
        }
    }

    /// Splits off the last `n` samples.
    pub fn split_tail(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n >= self.len() {
            return Err(Error::Config(format!("cannot carve {n} samples from {}", self.len())));
        }
        let cut = self.len() - n;
        let head: Vec<usize> = (0..cut).collect();
        let tail: Vec<usize> = (cut..self.len()).collect();
        Ok((self.subset(&head), self.subset(&tail)))
    }

    /// Shuffled minibatch index lists covering every sample once.
    pub fn batches(&self, batch: usize, rng: &mut SeededRng) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
    }
}

/// Train, validation and test splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn num_classes(&self) -> usize {
        self.train.num_classes
    }
}
