//! Differentiable numerical core.
//!
//! Gradients are computed by hand-written reverse passes over the MLP.
//! The same reverse pass is generic over [`Scalar`], so running it on
//! [`Dual`] numbers seeded with a direction `v` yields the Hessian-vector
//! product `H·v` exactly (forward-over-reverse). Meta-gradients through
//! the inner adaptation step are assembled from those products.

mod loss;
mod matrix;
mod meta;
mod model;
mod params;
mod scalar;

pub use loss::{kl_divergence, softmax_probs, EPS_PROB};
pub use matrix::Matrix;
pub use meta::{meta_grad, AdaptScope, Adaptation, MetaMode};
pub use model::{Batch, ModelSpec, TaskLoss};
pub use params::{ParamVector, Segment};
pub use scalar::{Dual, Scalar};

pub(crate) use loss::{logit_kl_grad, pair_kl_grad, soft_target_grad};
pub(crate) use meta::{adapt_slice, adapted_grad_with, adapted_value_grad, hvp};
pub(crate) use model::{backward, check_inputs, forward_layers, forward_trace};

use alloc::vec::Vec;

use crate::{Error, Result};

/// Loss selector for [`grad`] and [`loss`].
#[derive(Debug, Clone, Copy)]
pub enum LossKind<'a> {
    /// The model's configured task loss (cross-entropy with optional L2, or
    /// the quadratic probe).
    Task,
    /// Plain mean cross-entropy.
    CrossEntropy,
    /// `KL(targets ‖ softmax(logits))`, targets held constant.
    SoftTargets(&'a Matrix),
}

fn check(spec: &ModelSpec, w: &ParamVector, inputs: &Matrix) -> Result<()> {
    spec.validate()?;
    w.check_spec(spec)?;
    check_inputs(spec, inputs)
}

pub(crate) fn logits_of(spec: &ModelSpec, params: &[f64], inputs: &Matrix) -> Vec<f64> {
    forward_trace(spec, params, inputs).acts.pop().unwrap()
}

/// `f_θ ∘ f_Θ(x)` for every row of the batch.
pub fn forward_logits(spec: &ModelSpec, w: &ParamVector, batch: &Batch) -> Result<Matrix> {
    check(spec, w, &batch.inputs)?;
    Ok(Matrix::from_vec(batch.len(), spec.n_way, logits_of(spec, w.model(), &batch.inputs)))
}

/// Generator output `f_Θ(x)` for every row.
pub fn features(spec: &ModelSpec, w: &ParamVector, inputs: &Matrix) -> Result<Matrix> {
    check(spec, w, inputs)?;
    let layers = spec.generator_layers();
    let mut trace = forward_layers(&layers, w.model(), inputs);
    Ok(Matrix::from_vec(inputs.rows(), spec.feature_dim, trace.acts.pop().unwrap()))
}

/// Mean of `−ln softmax(logits)[label]`.
pub fn cross_entropy_loss(spec: &ModelSpec, w: &ParamVector, batch: &Batch) -> Result<f64> {
    check(spec, w, &batch.inputs)?;
    let z = logits_of(spec, w.model(), &batch.inputs);
    Ok(loss::cross_entropy_grad(&z, &batch.labels, spec.n_way).0)
}

/// Value and parameter gradient of the task loss over `[generator | classifier]`.
pub(crate) fn task_value_grad<T: Scalar>(spec: &ModelSpec, params: &[T], batch: &Batch) -> (T, Vec<T>) {
    match spec.task_loss {
        TaskLoss::Quadratic { curvature } => {
            let mut v = T::zero();
            for &p in params {
                v += p * p;
            }
            (v.scale(0.5 * curvature), params.iter().map(|p| p.scale(curvature)).collect())
        }
        TaskLoss::CrossEntropy { l2 } => {
            let trace = forward_trace(spec, params, &batch.inputs);
            let (mut value, d) = loss::cross_entropy_grad(trace.logits(), &batch.labels, spec.n_way);
            let mut g = backward(spec, params, &trace, d);
            if l2 > 0.0 {
                let mut sq = T::zero();
                for (gi, &p) in g.iter_mut().zip(params) {
                    *gi += p.scale(l2);
                    sq += p * p;
                }
                value += sq.scale(0.5 * l2);
            }
            (value, g)
        }
    }
}

pub(crate) fn task_value(spec: &ModelSpec, params: &[f64], batch: &Batch) -> f64 {
    match spec.task_loss {
        TaskLoss::Quadratic { curvature } => 0.5 * curvature * params.iter().map(|p| p * p).sum::<f64>(),
        TaskLoss::CrossEntropy { l2 } => {
            let z = logits_of(spec, params, &batch.inputs);
            let ce = loss::cross_entropy_grad(&z, &batch.labels, spec.n_way).0;
            ce + 0.5 * l2 * params.iter().map(|p| p * p).sum::<f64>()
        }
    }
}

pub(crate) fn kind_value_grad(spec: &ModelSpec, params: &[f64], batch: &Batch, kind: LossKind<'_>) -> Result<(f64, Vec<f64>)> {
    match kind {
        LossKind::Task => Ok(task_value_grad(spec, params, batch)),
        LossKind::CrossEntropy => {
            let trace = forward_trace(spec, params, &batch.inputs);
            let (v, d) = loss::cross_entropy_grad(trace.logits(), &batch.labels, spec.n_way);
            Ok((v, backward(spec, params, &trace, d)))
        }
        LossKind::SoftTargets(t) => {
            if (t.rows(), t.cols()) != (batch.len(), spec.n_way) {
                return Err(Error::Dimension {
                    what: "soft targets",
                    expected: batch.len() * spec.n_way,
                    got: t.rows() * t.cols(),
                });
            }
            let trace = forward_trace(spec, params, &batch.inputs);
            let (v, d) = soft_target_grad(t.as_slice(), trace.logits(), spec.n_way);
            Ok((v, backward(spec, params, &trace, d)))
        }
    }
}

/// Value of the selected loss at `w`.
pub fn loss(spec: &ModelSpec, w: &ParamVector, batch: &Batch, kind: LossKind<'_>) -> Result<f64> {
    check(spec, w, &batch.inputs)?;
    match kind {
        LossKind::Task => Ok(task_value(spec, w.model(), batch)),
        _ => kind_value_grad(spec, w.model(), batch, kind).map(|(v, _)| v),
    }
}

/// Exact gradient of the selected loss. Coordinates of an alternative
/// classifier (if `w` carries one) are zero.
pub fn grad(spec: &ModelSpec, w: &ParamVector, batch: &Batch, kind: LossKind<'_>) -> Result<ParamVector> {
    check(spec, w, &batch.inputs)?;
    let (_, g) = kind_value_grad(spec, w.model(), batch, kind)?;
    Ok(embed(w, &g))
}

/// Hessian of the task loss at `w` applied to `v`.
pub fn hessian_vector_product(spec: &ModelSpec, w: &ParamVector, batch: &Batch, v: &ParamVector) -> Result<ParamVector> {
    check(spec, w, &batch.inputs)?;
    if !w.same_layout(v) {
        return Err(Error::Dimension {
            what: "hessian-vector direction",
            expected: w.len(),
            got: v.len(),
        });
    }
    Ok(embed(w, &hvp(spec, w.model(), batch, v.model())))
}

/// Writes a `[generator | classifier]` vector into a zero vector shaped like `like`.
pub(crate) fn embed(like: &ParamVector, model_part: &[f64]) -> ParamVector {
    let mut values = alloc::vec![0.0; like.len()];
    values[..model_part.len()].copy_from_slice(model_part);
    like.with_values(values)
}
