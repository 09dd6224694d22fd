use alloc::vec::Vec;

use rand::seq::index;

use super::{Dataset, Shard};
use crate::diffcore::{Batch, Matrix};
use crate::rng::Rng;
use crate::{Error, Result};

/// How drawn classes map to episode labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LabelOrder {
    /// Label `i` is the `i`-th class drawn (a random permutation).
    #[default]
    Drawn,
    /// Labels follow ascending class id. With `n_way` equal to the number
    /// of classes every episode uses the same labeling, i.e. episodes
    /// become stratified minibatches of an ordinary classifier.
    Sorted,
}

/// N-way P-shot Q-query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeShape {
    pub n_way: usize,
    pub p_shot: usize,
    pub q_query: usize,
    pub label_order: LabelOrder,
}

impl EpisodeShape {
    pub fn new(n_way: usize, p_shot: usize, q_query: usize) -> Self {
        Self {
            n_way,
            p_shot,
            q_query,
            label_order: LabelOrder::Drawn,
        }
    }

    pub fn with_label_order(mut self, order: LabelOrder) -> Self {
        self.label_order = order;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way == 0 || self.p_shot == 0 || self.q_query == 0 {
            return Err(Error::Config("n_way, p_shot and q_query must be positive".into()));
        }
        Ok(())
    }

    /// `(P + Q)·N`.
    pub fn instances(&self) -> usize {
        (self.p_shot + self.q_query) * self.n_way
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub support: Batch,
    pub query: Batch,
    /// `class_map[label]` is the dataset class id behind episode label `label`.
    pub class_map: Vec<u32>,
    pub support_indices: Vec<usize>,
    pub query_indices: Vec<usize>,
}

impl Episode {
    /// Support rows followed by query rows (labels are irrelevant to the
    /// output-matching losses that use this).
    pub fn all_inputs(&self) -> Matrix {
        self.support.inputs.vstack(&self.query.inputs)
    }
}

/// Draws one episode from `shard`.
///
/// Classes are drawn without replacement among the shard's classes that
/// hold at least `P + Q` samples; samples within a class are drawn without
/// replacement and split into support and query.
pub fn sample_episode(dataset: &Dataset, shard: &Shard, shape: EpisodeShape, rng: &mut Rng) -> Result<Episode> {
    shape.validate()?;
    let need = shape.p_shot + shape.q_query;
    if shard.num_classes() < shape.n_way {
        return Err(Error::InfeasibleClasses {
            need: shape.n_way,
            have: shard.num_classes(),
        });
    }
    let eligible: Vec<&(u32, Vec<usize>)> = shard.groups().iter().filter(|(_, s)| s.len() >= need).collect();
    if eligible.len() < shape.n_way {
        return Err(Error::InfeasibleSamples {
            need: shape.n_way,
            per_class: need,
            have: eligible.len(),
        });
    }
    let mut chosen: Vec<usize> = index::sample(rng, eligible.len(), shape.n_way).into_vec();
    if shape.label_order == LabelOrder::Sorted {
        chosen.sort_unstable();
    }

    let mut support_indices = Vec::with_capacity(shape.n_way * shape.p_shot);
    let mut query_indices = Vec::with_capacity(shape.n_way * shape.q_query);
    let mut support_labels = Vec::with_capacity(support_indices.capacity());
    let mut query_labels = Vec::with_capacity(query_indices.capacity());
    let mut class_map = Vec::with_capacity(shape.n_way);
    for (label, &ci) in chosen.iter().enumerate() {
        let (class, members) = eligible[ci];
        class_map.push(*class);
        let picks = index::sample(rng, members.len(), need);
        for (j, p) in picks.iter().enumerate() {
            if j < shape.p_shot {
                support_indices.push(members[p]);
                support_labels.push(label);
            } else {
                query_indices.push(members[p]);
                query_labels.push(label);
            }
        }
    }
    let support = Batch::new(dataset.gather(&support_indices), support_labels, shape.n_way)?;
    let query = Batch::new(dataset.gather(&query_indices), query_labels, shape.n_way)?;
    Ok(Episode {
        support,
        query,
        class_map,
        support_indices,
        query_indices,
    })
}

/// `batch_size` independent episodes from one stream.
pub fn sample_batch(dataset: &Dataset, shard: &Shard, batch_size: usize, shape: EpisodeShape, rng: &mut Rng) -> Result<Vec<Episode>> {
    (0..batch_size).map(|_| sample_episode(dataset, shard, shape, rng)).collect()
}
