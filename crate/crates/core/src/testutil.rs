use alloc::vec::Vec;

use rand::Rng as _;

use crate::data::{make_synthetic_blobs, partition, sample_batch, Dataset, Episode, EpisodeShape, PartitionPlan, PartitionScheme, Shard};
use crate::diffcore::{ModelSpec, ParamVector};
use crate::rng::{stream, Stream};

pub fn central_diff(f: impl Fn(&[f64]) -> f64, w: &[f64], h: f64) -> Vec<f64> {
    let mut x = w.to_vec();
    (0..w.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-4))
        .fold(0.0, f64::max)
}

/// Initialization plus small noise on every coordinate, biases included.
pub fn random_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let p = ParamVector::init(spec, &mut stream(seed, Stream::Init, &[]));
    let mut rng = stream(seed, Stream::Init, &[1]);
    let values = p.values().iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
    p.with_values(values)
}

/// 10 blob classes in 4-D: base 0..=6, novel 7..=9.
pub fn small_dataset() -> Dataset {
    make_synthetic_blobs(10, 15, 4, 0.5, 11)
        .unwrap()
        .with_split(&[0, 1, 2, 3, 4, 5, 6], &[7, 8, 9])
        .unwrap()
}

pub fn small_spec() -> ModelSpec {
    ModelSpec::new(4, &[5], 3, 3)
}

pub fn small_shape() -> EpisodeShape {
    EpisodeShape::new(3, 1, 2)
}

pub fn small_plan(d: &Dataset, clients: usize) -> PartitionPlan {
    partition(d, clients, PartitionScheme::Iid, 5).unwrap()
}

pub fn small_episodes(d: &Dataset, shard: &Shard, n: usize, seed: u64) -> Vec<Episode> {
    sample_batch(d, shard, n, small_shape(), &mut stream(seed, Stream::Dataset, &[])).unwrap()
}
