//! Labelled image sets: in-memory storage, batching, splits and loaders.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::array::Array;
use crate::error::{Error, Result};

/// Inputs `[N, C, H, W]` in `[0, 1]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Array,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(inputs: Array, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let s = inputs.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("dataset inputs must be [N, C, H, W], got {s:?}")));
        }
        if s[0] != labels.len() {
            return Err(Error::Shape(format!("{} inputs, {} labels", s[0], labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelRange { label: l, classes });
        }
        if let Some(v) = inputs.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("input value {v} outside [0, 1]")));
        }
        Ok(Self { inputs, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Shape of one example, `[C, H, W]`.
    pub fn example_shape(&self) -> [usize; 3] {
        let s = self.inputs.shape();
        [s[1], s[2], s[3]]
    }

    pub fn inputs(&self) -> &Array {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Array, Vec<usize>)> {
        let x = self.inputs.select_rows(indices)?;
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let (inputs, labels) = self.batch(indices)?;
        Ok(Self { inputs, labels, classes: self.classes })
    }

    /// The first `n` examples (all of them if fewer).
    pub fn head(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Shuffles once and splits off `test` examples.
    pub fn split(&self, test: usize, rng: &mut impl Rng) -> Result<(Self, Self)> {
        if test >= self.len() {
            return Err(Error::Invalid(format!("test split {test} leaves no training data out of {}", self.len())));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        let (te, tr) = idx.split_at(test);
        Ok((self.subset(tr)?, self.subset(te)?))
    }

    /// Index batches for one epoch: shuffled, the last batch possibly short.
    pub fn epoch_batches(&self, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }

    /// Index batches in storage order.
    pub fn sequential_batches(&self, batch_size: usize) -> Vec<Vec<usize>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }
}

/// Parameters of the synthetic Gaussian-mixture image set.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSpec {
    pub examples: usize,
    pub classes: usize,
    pub shape: [usize; 3],
    /// Spread of class centers around 0.5.
    pub separation: f64,
    /// Per-pixel noise standard deviation.
    pub noise: f64,
}

/// Class `c` has center `0.5 + separation·u_c` with `u_c` uniform on
/// `[-0.5, 0.5]^D`; examples add Gaussian noise and clip to `[0, 1]`.
/// Labels cycle through the classes, so the set is balanced.
pub fn gaussian_mixture(spec: &MixtureSpec, rng: &mut impl Rng) -> Result<Dataset> {
    if spec.examples == 0 || spec.classes == 0 || spec.shape.contains(&0) {
        return Err(Error::Empty("mixture dataset".into()));
    }
    let d: usize = spec.shape.iter().product();
    let centers: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..d).map(|_| 0.5 + spec.separation * (rng.random::<f64>() - 0.5)).collect())
        .collect();
    let mut data = Vec::with_capacity(spec.examples * d);
    let mut labels = Vec::with_capacity(spec.examples);
    for i in 0..spec.examples {
        let c = i % spec.classes;
        labels.push(c);
        for &m in &centers[c] {
            let z: f64 = StandardNormal.sample(rng);
            data.push((m + spec.noise * z).clamp(0.0, 1.0));
        }
    }
    let [ch, h, w] = spec.shape;
    Dataset::new(Array::new(vec![spec.examples, ch, h, w], data)?, labels, spec.classes)
}

/// Label layout of the CIFAR binary formats.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarKind {
    /// One label byte per record.
    Ten,
    /// Coarse then fine label byte; the fine label is used.
    Hundred,
}

const CIFAR_PIXELS: usize = 3 * 32 * 32;

/// Parses CIFAR binary records (label bytes, then 3072 channel-major pixel bytes).
pub fn parse_cifar(bytes: &[u8], kind: CifarKind) -> Result<Dataset> {
    let (label_bytes, classes) = match kind {
        CifarKind::Ten => (1, 10),
        CifarKind::Hundred => (2, 100),
    };
    let rec = label_bytes + CIFAR_PIXELS;
    if bytes.is_empty() {
        return Err(Error::Empty("CIFAR file".into()));
    }
    if bytes.len() % rec != 0 {
        return Err(Error::Format(format!("{} bytes is not a whole number of {rec}-byte records", bytes.len())));
    }
    let n = bytes.len() / rec;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * CIFAR_PIXELS);
    for r in bytes.chunks_exact(rec) {
        labels.push(usize::from(r[label_bytes - 1]));
        data.extend(r[label_bytes..].iter().map(|&b| f64::from(b) / 255.0));
    }
    Dataset::new(Array::new(vec![n, 3, 32, 32], data)?, labels, classes)
}

/// Loads and concatenates CIFAR binary batch files.
pub fn load_cifar(paths: &[impl AsRef<Path>], kind: CifarKind) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for p in paths {
        bytes.extend(fs::read(p)?);
    }
    parse_cifar(&bytes, kind)
}
