//! Labeled image datasets, partitions and on-disk formats.
//!
//! Images are stored as `(N, C, H, W)` float64 arrays in the normalized
//! input range `[-1, 1]`. Real datasets and model-inverted proxy sets share
//! one packed format (see [`packed`]) so downstream stages do not care where
//! a dataset came from.

pub mod cifar;
pub mod image_dir;
pub mod packed;
pub mod shapes;

use ndarray::{s, Array4, ArrayView4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Valid range of normalized pixel values.
pub const INPUT_RANGE: (f64, f64) = (-1.0, 1.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    /// Full training set `D`.
    Train,
    Test,
    /// Training samples of the forgotten class.
    Forget,
    /// Training samples of every other class.
    Retain,
    ForgetTest,
    RetainTest,
    /// Stand-in for the retained set (inverted or sampled).
    Proxy,
}

/// A batch of images with optional labels.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub data: Array4<f64>,
    pub labels: Option<Vec<usize>>,
}

impl ImageBatch {
    pub fn new(data: Array4<f64>, labels: Option<Vec<usize>>, num_classes: usize) -> Result<Self> {
        let n = data.len_of(Axis(0));
        if n == 0 {
            return Err(Error::EmptyDataset("image batch has no samples".into()));
        }
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(Error::shape(format!("{n} labels"), format!("{} labels", labels.len())));
            }
            if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
                return Err(Error::Label { label: bad, num_classes });
            }
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("image batch contains non-finite values".into()));
        }
        Ok(Self { data, labels })
    }

    pub fn len(&self) -> usize {
        self.data.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub partition: Partition,
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    /// Set for model-inverted data.
    pub synthetic: bool,
}

impl LabeledDataset {
    pub fn new(
        partition: Partition,
        images: Array4<f64>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if images.len_of(Axis(0)) != labels.len() {
            return Err(Error::shape(
                format!("{} labels", images.len_of(Axis(0))),
                format!("{} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Label { label: bad, num_classes });
        }
        Ok(Self {
            partition,
            images,
            labels,
            num_classes,
            class_names: (0..num_classes).map(|c| format!("class_{c}")).collect(),
            synthetic: false,
        })
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Self {
        if names.len() == self.num_classes {
            self.class_names = names;
        }
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let (_, c, h, w) = self.images.dim();
        [c, h, w]
    }

    pub fn select(&self, indices: &[usize], partition: Partition) -> LabeledDataset {
        let images = self.images.select(Axis(0), indices);
        LabeledDataset {
            partition,
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
            synthetic: self.synthetic,
        }
    }

    /// Samples whose label satisfies `keep`.
    pub fn filter(&self, partition: Partition, keep: impl Fn(usize) -> bool) -> LabeledDataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.labels[i])).collect();
        self.select(&idx, partition)
    }

    pub fn concat(&self, other: &LabeledDataset, partition: Partition) -> Result<LabeledDataset> {
        if self.image_shape() != other.image_shape() || self.num_classes != other.num_classes {
            return Err(Error::shape(
                format!("{:?}/{}", self.image_shape(), self.num_classes),
                format!("{:?}/{}", other.image_shape(), other.num_classes),
            ));
        }
        let images = ndarray::concatenate(Axis(0), &[self.images.view(), other.images.view()])
            .expect("shapes checked");
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(LabeledDataset {
            partition,
            images,
            labels,
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
            synthetic: self.synthetic || other.synthetic,
        })
    }

    /// Deterministic random subset of at most `n` samples, keeping original order.
    pub fn subsample(&self, n: usize, seed: u64, partition: Partition) -> LabeledDataset {
        if n >= self.len() {
            let mut d = self.clone();
            d.partition = partition;
            return d;
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n);
        idx.sort_unstable();
        self.select(&idx, partition)
    }

    /// The first `n` samples of every class, in dataset order.
    pub fn first_per_class(&self, n: usize) -> LabeledDataset {
        let mut seen = vec![0usize; self.num_classes];
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let c = &mut seen[self.labels[i]];
                *c += 1;
                *c <= n
            })
            .collect();
        self.select(&idx, self.partition)
    }

    /// A seeded random choice of up to `n` samples from every class present,
    /// keeping original order.
    pub fn per_class_subsample(&self, n: usize, seed: u64, partition: Partition) -> LabeledDataset {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut seen = vec![0usize; self.num_classes];
        idx.retain(|&i| {
            let c = &mut seen[self.labels[i]];
            *c += 1;
            *c <= n
        });
        idx.sort_unstable();
        self.select(&idx, partition)
    }

    pub fn batch_view(&self, start: usize, end: usize) -> (ArrayView4<'_, f64>, &[usize]) {
        (self.images.slice(s![start..end, .., .., ..]), &self.labels[start..end])
    }

    /// Contiguous `(images, labels)` chunks in dataset order.
    pub fn chunks(&self, batch_size: usize) -> impl Iterator<Item = (ArrayView4<'_, f64>, &[usize])> {
        let n = self.len();
        let bs = batch_size.max(1);
        (0..n).step_by(bs).map(move |start| self.batch_view(start, (start + bs).min(n)))
    }

    /// Stable content hash over image bits and labels.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for d in self.images.shape() {
            hasher.update((*d as u64).to_le_bytes());
        }
        for v in self.images.iter() {
            hasher.update(v.to_bits().to_le_bytes());
        }
        for &y in &self.labels {
            hasher.update((y as u64).to_le_bytes());
        }
        hex_prefix(&hasher.finalize(), 16)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// Train/test data partitioned around the forgotten class.
#[derive(Debug, Clone)]
pub struct Splits {
    pub forget_class: usize,
    pub train: LabeledDataset,
    pub forget: LabeledDataset,
    pub retain: LabeledDataset,
    pub forget_test: LabeledDataset,
    pub retain_test: LabeledDataset,
}

impl Splits {
    pub fn new(train: &LabeledDataset, test: &LabeledDataset, forget_class: usize) -> Result<Self> {
        if forget_class >= train.num_classes {
            return Err(Error::Label {
                label: forget_class,
                num_classes: train.num_classes,
            });
        }
        let splits = Self {
            forget_class,
            train: train.clone(),
            forget: train.filter(Partition::Forget, |y| y == forget_class),
            retain: train.filter(Partition::Retain, |y| y != forget_class),
            forget_test: test.filter(Partition::ForgetTest, |y| y == forget_class),
            retain_test: test.filter(Partition::RetainTest, |y| y != forget_class),
        };
        if splits.forget.is_empty() {
            return Err(Error::EmptyDataset(format!(
                "no training samples of forget class {forget_class}"
            )));
        }
        Ok(splits)
    }
}

pub(crate) fn hex_prefix(bytes: &[u8], n: usize) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s.truncate(n);
    s
}
