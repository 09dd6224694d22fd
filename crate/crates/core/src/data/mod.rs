//! Datasets, client partitioning and episode sampling.

mod blobs;
mod episode;
mod partition;

pub use blobs::{make_synthetic_blobs, BlobSpec};
pub use episode::{sample_batch, sample_episode, Episode, EpisodeShape, LabelOrder};
pub use partition::{partition, PartitionPlan, PartitionScheme};

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::diffcore::Matrix;
use crate::{Error, Result};

/// Labeled samples with a base/novel class split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Matrix,
    classes: Vec<u32>,
    base: Vec<u32>,
    novel: Vec<u32>,
}

impl Dataset {
    /// Every class present becomes a base class.
    pub fn new(inputs: Matrix, classes: Vec<u32>) -> Result<Self> {
        if classes.len() != inputs.rows() {
            return Err(Error::Dimension {
                what: "dataset class ids",
                expected: inputs.rows(),
                got: classes.len(),
            });
        }
        let mut base = classes.clone();
        base.sort_unstable();
        base.dedup();
        Ok(Self {
            inputs,
            classes,
            base,
            novel: Vec::new(),
        })
    }

    /// Reassigns classes to the base and novel splits. The splits must be
    /// disjoint, name only classes that occur, and together cover every
    /// class that occurs.
    pub fn with_split(mut self, base: &[u32], novel: &[u32]) -> Result<Self> {
        let present = self.class_ids();
        let mut b = base.to_vec();
        b.sort_unstable();
        b.dedup();
        let mut n = novel.to_vec();
        n.sort_unstable();
        n.dedup();
        if let Some(&c) = b.iter().find(|c| n.binary_search(c).is_ok()) {
            return Err(Error::OverlappingSplit(c));
        }
        if let Some(&c) = b.iter().chain(&n).find(|c| present.binary_search(c).is_err()) {
            return Err(Error::UnknownClass(c));
        }
        if let Some(&c) = present.iter().find(|c| b.binary_search(c).is_err() && n.binary_search(c).is_err()) {
            return Err(Error::Config(alloc::format!("class {c} is in neither the base nor the novel split")));
        }
        self.base = b;
        self.novel = n;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn input(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    pub fn class_of(&self, i: usize) -> u32 {
        self.classes[i]
    }

    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    /// Distinct class ids, ascending.
    pub fn class_ids(&self) -> Vec<u32> {
        let mut c = self.classes.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn base_classes(&self) -> &[u32] {
        &self.base
    }

    pub fn novel_classes(&self) -> &[u32] {
        &self.novel
    }

    pub fn is_base(&self, class: u32) -> bool {
        self.base.binary_search(&class).is_ok()
    }

    pub fn is_novel(&self, class: u32) -> bool {
        self.novel.binary_search(&class).is_ok()
    }

    pub fn base_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_base(self.classes[i])).collect()
    }

    pub fn novel_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_novel(self.classes[i])).collect()
    }

    /// Shared test pool: every novel-class sample.
    pub fn novel_pool(&self) -> Shard {
        Shard::from_indices(self, &self.novel_indices())
    }

    /// All base-class samples as one shard (centralized training).
    pub fn base_pool(&self) -> Shard {
        Shard::from_indices(self, &self.base_indices())
    }

    /// Rows `indices` as a matrix.
    pub fn gather(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.input_dim());
        for &i in indices {
            data.extend_from_slice(self.input(i));
        }
        Matrix::from_vec(indices.len(), self.input_dim(), data)
    }
}

/// Sample indices grouped by class, classes ascending.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Shard {
    by_class: Vec<(u32, Vec<usize>)>,
}

impl Shard {
    pub fn from_indices(dataset: &Dataset, indices: &[usize]) -> Self {
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for &i in indices {
            map.entry(dataset.class_of(i)).or_default().push(i);
        }
        Self {
            by_class: map.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.by_class.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.by_class.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.by_class.len()
    }

    pub fn classes(&self) -> impl Iterator<Item = u32> + '_ {
        self.by_class.iter().map(|(c, _)| *c)
    }

    pub fn samples_of(&self, class: u32) -> &[usize] {
        self.by_class
            .binary_search_by_key(&class, |(c, _)| *c)
            .map_or(&[], |i| self.by_class[i].1.as_slice())
    }

    pub(crate) fn groups(&self) -> &[(u32, Vec<usize>)] {
        &self.by_class
    }

    pub fn indices(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.by_class.iter().flat_map(|(_, s)| s.iter().copied()).collect();
        v.sort_unstable();
        v
    }
}
