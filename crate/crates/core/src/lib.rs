//! Federated few-shot meta-learning, desk scale.
//!
//! The crate is `no_std` (it needs `alloc`) and contains only pure numerics:
//!
//! * [`diffcore`]: a small MLP split into a feature generator and a linear
//!   classifier, its losses, exact reverse-mode gradients and exact
//!   meta-gradients through the inner adaptation step.
//! * [`data`]: datasets, IID / Dirichlet partitioning and N-way P-shot
//!   Q-query episode sampling.
//! * [`fsl`]: adaptation, episode losses and the outer meta-update.
//! * [`federation`]: client updates (naive, MI-regularized, proximal, local),
//!   aggregation and the round loop.
//! * [`adversarial`]: the two-stage dual-classifier local update.
//! * [`eval`]: few-shot evaluation on novel classes and feature export.
//!
//! File formats, configuration and the command line live in the `fedfsl`
//! companion crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod adversarial;
pub mod data;
pub mod diffcore;
mod error;
pub mod eval;
pub mod federation;
pub mod fsl;
pub mod rng;
#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
