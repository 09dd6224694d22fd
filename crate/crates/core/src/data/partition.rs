use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};

use super::{Dataset, Shard};
use crate::rng::{self, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartitionScheme {
    /// Each class spread evenly over the clients.
    Iid,
    /// Per-class client proportions drawn from `Dirichlet(concentration·1_K)`.
    Dirichlet { concentration: f64 },
}

/// Client assignment of every base-class sample. Novel-class samples are
/// never assigned.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    assignments: Vec<Option<usize>>,
    clients: usize,
    scheme: PartitionScheme,
    /// `(class, per-client proportion)` in ascending class order.
    proportions: Vec<(u32, Vec<f64>)>,
}

impl PartitionPlan {
    pub fn clients(&self) -> usize {
        self.clients
    }

    pub fn scheme(&self) -> PartitionScheme {
        self.scheme
    }

    pub fn assignment(&self, sample: usize) -> Option<usize> {
        self.assignments[sample]
    }

    pub fn assignments(&self) -> &[Option<usize>] {
        &self.assignments
    }

    pub fn proportions(&self) -> &[(u32, Vec<f64>)] {
        &self.proportions
    }

    pub fn client_indices(&self, client: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter_map(|(i, a)| (*a == Some(client)).then_some(i))
            .collect()
    }

    pub fn shard(&self, dataset: &Dataset, client: usize) -> Shard {
        Shard::from_indices(dataset, &self.client_indices(client))
    }

    pub fn shards(&self, dataset: &Dataset) -> Vec<Shard> {
        (0..self.clients).map(|k| self.shard(dataset, k)).collect()
    }

    /// Sample count per client, `n_k`.
    pub fn client_sizes(&self) -> Vec<usize> {
        let mut n = vec![0; self.clients];
        for k in self.assignments.iter().flatten() {
            n[*k] += 1;
        }
        n
    }
}

/// Converts proportions to integer counts summing to `total` by the
/// largest-remainder method (ties go to the lower client id).
pub(crate) fn largest_remainder(props: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| libm::floor(*e) as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - libm::floor(exact[a]);
        let rb = exact[b] - libm::floor(exact[b]);
        rb.partial_cmp(&ra).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &k in order.iter().take(total.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

fn dirichlet<R: rand::Rng + ?Sized>(k: usize, concentration: f64, rng: &mut R) -> Result<Vec<f64>> {
    if k == 1 {
        return Ok(vec![1.0]);
    }
    let gamma = Gamma::new(concentration, 1.0).map_err(|_| Error::Config("invalid Dirichlet concentration".into()))?;
    let mut draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.iter_mut().for_each(|d| *d /= sum);
    } else {
        // every draw underflowed (tiny concentration): all mass on one client
        let pick = rng.random_range(0..k);
        draws = vec![0.0; k];
        draws[pick] = 1.0;
    }
    Ok(draws)
}

/// Assigns every base-class sample of `dataset` to one of `clients` clients.
pub fn partition(dataset: &Dataset, clients: usize, scheme: PartitionScheme, seed: u64) -> Result<PartitionPlan> {
    if clients == 0 {
        return Err(Error::Config("client count must be at least 1".into()));
    }
    if let PartitionScheme::Dirichlet { concentration } = scheme {
        if !(concentration > 0.0 && concentration.is_finite()) {
            return Err(Error::Config("Dirichlet concentration must be positive and finite".into()));
        }
    }
    let pool = dataset.base_pool();
    if clients > pool.len() {
        return Err(Error::TooManyClients {
            clients,
            samples: pool.len(),
        });
    }
    let mut rng = rng::stream(seed, Stream::Partition, &[clients as u64]);
    let mut assignments = vec![None; dataset.len()];
    let mut proportions = Vec::with_capacity(pool.num_classes());
    let mut next_client = 0;
    for (class, members) in pool.groups() {
        let mut members = members.clone();
        members.shuffle(&mut rng);
        match scheme {
            PartitionScheme::Iid => {
                for &i in &members {
                    assignments[i] = Some(next_client);
                    next_client = (next_client + 1) % clients;
                }
                proportions.push((*class, vec![1.0 / clients as f64; clients]));
            }
            PartitionScheme::Dirichlet { concentration } => {
                let props = dirichlet(clients, concentration, &mut rng)?;
                let counts = largest_remainder(&props, members.len());
                let mut it = members.iter();
                for (k, &n) in counts.iter().enumerate() {
                    for &i in it.by_ref().take(n) {
                        assignments[i] = Some(k);
                    }
                }
                proportions.push((*class, props));
            }
        }
    }
    Ok(PartitionPlan {
        assignments,
        clients,
        scheme,
        proportions,
    })
}
