use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use super::Dataset;
use crate::diffcore::Matrix;
use crate::rng::{self, Stream};
use crate::{Error, Result};

/// Gaussian class clusters.
///
/// Class means are drawn from `N(0, mean_scale²)`; when `latent_dim` is set
/// they are confined to a random `latent_dim`-dimensional subspace of the
/// input space, so only a few directions carry class information and the
/// rest is isotropic noise.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobSpec {
    pub n_classes: usize,
    pub per_class: usize,
    pub input_dim: usize,
    pub spread: f64,
    pub seed: u64,
    pub latent_dim: Option<usize>,
    pub mean_scale: f64,
}

impl BlobSpec {
    pub fn new(n_classes: usize, per_class: usize, input_dim: usize, spread: f64, seed: u64) -> Self {
        Self {
            n_classes,
            per_class,
            input_dim,
            spread,
            seed,
            latent_dim: None,
            mean_scale: 1.0,
        }
    }

    pub fn latent_dim(mut self, d: usize) -> Self {
        self.latent_dim = Some(d);
        self
    }

    pub fn mean_scale(mut self, s: f64) -> Self {
        self.mean_scale = s;
        self
    }

    pub fn build(&self) -> Result<Dataset> {
        if self.n_classes < 2 {
            return Err(Error::Config("synthetic blobs need at least two classes".into()));
        }
        if self.per_class == 0 || self.input_dim == 0 {
            return Err(Error::Config("per_class and input_dim must be positive".into()));
        }
        if !(self.spread >= 0.0) || !(self.mean_scale >= 0.0) {
            return Err(Error::Config("spread and mean_scale must be non-negative".into()));
        }
        let mut rng = rng::stream(self.seed, Stream::Dataset, &[]);
        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
        let d = self.input_dim;

        let means: Vec<Vec<f64>> = match self.latent_dim {
            Some(0) => return Err(Error::Config("latent_dim must be positive".into())),
            Some(k) => {
                let basis: Vec<f64> = (0..d * k).map(|_| normal() / libm::sqrt(k as f64)).collect();
                (0..self.n_classes)
                    .map(|_| {
                        let z: Vec<f64> = (0..k).map(|_| normal() * self.mean_scale).collect();
                        (0..d)
                            .map(|r| basis[r * k..(r + 1) * k].iter().zip(&z).map(|(a, b)| a * b).sum())
                            .collect()
                    })
                    .collect()
            }
            None => (0..self.n_classes)
                .map(|_| (0..d).map(|_| normal() * self.mean_scale).collect())
                .collect(),
        };

        let total = self.n_classes * self.per_class;
        let mut data = Vec::with_capacity(total * d);
        let mut classes = Vec::with_capacity(total);
        for (c, mean) in means.iter().enumerate() {
            for _ in 0..self.per_class {
                for &m in mean {
                    let noise = normal();
                    data.push(m + self.spread * noise);
                }
                classes.push(c as u32);
            }
        }
        Dataset::new(Matrix::from_vec(total, d, data), classes)
    }
}

/// Isotropic Gaussian blobs with unit-scale means; all classes are base.
pub fn make_synthetic_blobs(n_classes: usize, per_class: usize, input_dim: usize, spread: f64, seed: u64) -> Result<Dataset> {
    BlobSpec::new(n_classes, per_class, input_dim, spread, seed).build()
}
