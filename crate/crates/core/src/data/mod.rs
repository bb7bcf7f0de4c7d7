//! Datasets, upstream/downstream task construction, and noisy batches.

mod idx;
mod noise;
mod synth;

use std::collections::BTreeMap;

pub use idx::{load_idx, load_idx_pair, write_idx};
pub use noise::{sample_noisy_batch, NoiseSpec, NoisyBatch};
pub use synth::{synth_shapes, Glyph, GLYPHS, MAX_SYNTH_CLASSES};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Images in [0, 1] with integer labels in `[0, num_classes)`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, split: Split, images: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Shape(format!("images must be [N,C,H,W], got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Label { label: bad, classes: num_classes });
        }
        Ok(Self {
            name: name.into(),
            split,
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn sample_len(&self) -> usize {
        self.images.len() / self.len().max(1)
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let d = self.sample_len();
        &self.images.data()[i * d..(i + 1) * d]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Every class must be represented at least once.
    pub fn check_coverage(&self) -> Result<()> {
        match self.class_counts().iter().position(|&c| c == 0) {
            Some(c) => Err(Error::Domain(format!("{} {} split has no samples of class {c}", self.name, self.split.name()))),
            None => Ok(()),
        }
    }

    /// Keep samples whose labels are in `classes`, relabeled by position in `classes`.
    pub fn select_classes(&self, classes: &[usize], name: impl Into<String>) -> Result<Dataset> {
        let map: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let rows: Vec<usize> = (0..self.len()).filter(|&i| map.contains_key(&self.labels[i])).collect();
        if rows.is_empty() {
            return Err(Error::Domain("class selection is empty".into()));
        }
        let labels = rows.iter().map(|&i| map[&self.labels[i]]).collect();
        Dataset::new(name, self.split, self.images.gather_outer(&rows)?, labels, classes.len())
    }
}

impl Dataset {
    /// The first `per_class` samples of every class, original order kept.
    pub fn take_per_class(&self, per_class: usize) -> Result<Dataset> {
        let mut seen = vec![0usize; self.num_classes];
        let rows: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let c = &mut seen[self.labels[i]];
                *c += 1;
                *c <= per_class
            })
            .collect();
        if rows.is_empty() {
            return Err(Error::Domain("per-class limit leaves no samples".into()));
        }
        let labels = rows.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(self.name.clone(), self.split, self.images.gather_outer(&rows)?, labels, self.num_classes)
    }
}

/// Split one labelled pool into an upstream task and a downstream task over
/// disjoint class sets. Downstream (and upstream) labels are re-indexed from
/// 0 in the order the classes are listed; sample order is preserved.
pub fn make_transfer_pair(dataset: &Dataset, upstream: &[usize], downstream: &[usize]) -> Result<(Dataset, Dataset)> {
    if upstream.is_empty() || downstream.is_empty() {
        return Err(Error::Domain("transfer class sets must be non-empty".into()));
    }
    for set in [upstream, downstream] {
        let mut sorted = set.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != set.len() {
            return Err(Error::Domain("duplicate class in transfer split".into()));
        }
        if let Some(&c) = set.iter().find(|&&c| c >= dataset.num_classes) {
            return Err(Error::Label { label: c, classes: dataset.num_classes });
        }
    }
    if let Some(c) = upstream.iter().find(|c| downstream.contains(c)) {
        return Err(Error::Domain(format!("class {c} appears in both upstream and downstream sets")));
    }
    let up = dataset.select_classes(upstream, format!("{}-upstream", dataset.name))?;
    let down = dataset.select_classes(downstream, format!("{}-downstream", dataset.name))?;
    Ok((up, down))
}
