use alloc::vec::Vec;

use super::model::{Batch, ModelSpec};
use super::params::ParamVector;
use super::scalar::Dual;
use super::{check, embed, task_value_grad};
use crate::{Error, Result};

/// How the outer gradient treats the inner adaptation step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MetaMode {
    /// Differentiate through the adaptation, Hessian term included.
    #[default]
    Exact,
    /// Drop second-order terms: the query gradient at the adapted point.
    FirstOrder,
}

/// Segments the inner step is allowed to move.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdaptScope {
    pub generator: bool,
    pub classifier: bool,
}

impl AdaptScope {
    pub const ALL: Self = Self {
        generator: true,
        classifier: true,
    };
    pub const GENERATOR: Self = Self {
        generator: true,
        classifier: false,
    };
    pub const CLASSIFIER: Self = Self {
        generator: false,
        classifier: true,
    };

    pub(crate) fn apply(&self, spec: &ModelSpec, g: &mut [f64]) {
        let split = spec.generator_len();
        if !self.generator {
            g[..split].iter_mut().for_each(|v| *v = 0.0);
        }
        if !self.classifier {
            g[split..].iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Inner-loop settings as the gradient engine sees them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adaptation {
    pub alpha: f64,
    pub steps: usize,
    pub mode: MetaMode,
    pub scope: AdaptScope,
}

impl Adaptation {
    pub fn one_step(alpha: f64, mode: MetaMode) -> Self {
        Self {
            alpha,
            steps: 1,
            mode,
            scope: AdaptScope::ALL,
        }
    }
}

/// `H(params)·v` for the task loss on `batch`.
pub(crate) fn hvp(spec: &ModelSpec, params: &[f64], batch: &Batch, v: &[f64]) -> Vec<f64> {
    let duals: Vec<Dual> = params.iter().zip(v).map(|(&p, &d)| Dual::new(p, d)).collect();
    let (_, g) = task_value_grad(spec, &duals, batch);
    g.into_iter().map(|d| d.eps).collect()
}

/// Parameter trajectory `w_0, …, w_steps` of in-scope gradient steps on
/// the support loss.
fn trajectory(spec: &ModelSpec, params: &[f64], support: &Batch, a: &Adaptation) -> Vec<Vec<f64>> {
    let mut traj = Vec::with_capacity(a.steps + 1);
    traj.push(params.to_vec());
    for _ in 0..a.steps {
        let cur = traj.last().unwrap();
        let (_, mut g) = task_value_grad(spec, cur.as_slice(), support);
        a.scope.apply(spec, &mut g);
        let next = cur.iter().zip(&g).map(|(w, gi)| w - a.alpha * gi).collect();
        traj.push(next);
    }
    traj
}

pub(crate) fn adapt_slice(spec: &ModelSpec, params: &[f64], support: &Batch, a: &Adaptation) -> Vec<f64> {
    if a.steps == 0 || a.alpha == 0.0 {
        return params.to_vec();
    }
    trajectory(spec, params, support, a).pop().unwrap()
}

/// Outer loss at the adapted parameters and its gradient with respect to
/// the pre-adaptation parameters. `outer` returns value and gradient at
/// the adapted point.
///
/// With `w_{i+1} = w_i − α·M·∇f_s(w_i)` (M the scope mask) the chain rule
/// gives `∇ℓ = Π_i (I − α·H_s(w_i)·M) · ∇g(w_n)`, evaluated right to left
/// with one Hessian-vector product per step.
pub(crate) fn adapted_grad_with(
    spec: &ModelSpec,
    params: &[f64],
    support: &Batch,
    a: &Adaptation,
    outer: impl FnOnce(&[f64]) -> (f64, Vec<f64>),
) -> (f64, Vec<f64>) {
    if a.steps == 0 || a.alpha == 0.0 {
        return outer(params);
    }
    let traj = trajectory(spec, params, support, a);
    let (value, mut g) = outer(traj.last().unwrap());
    if a.mode == MetaMode::Exact {
        for w in traj[..traj.len() - 1].iter().rev() {
            let mut masked = g.clone();
            a.scope.apply(spec, &mut masked);
            let hv = hvp(spec, w, support, &masked);
            for (gi, h) in g.iter_mut().zip(&hv) {
                *gi -= a.alpha * h;
            }
        }
    }
    (value, g)
}

/// Query task loss at the adapted parameters and its meta-gradient.
pub(crate) fn adapted_value_grad(
    spec: &ModelSpec,
    params: &[f64],
    support: &Batch,
    query: &Batch,
    a: &Adaptation,
) -> (f64, Vec<f64>) {
    adapted_grad_with(spec, params, support, a, |w| task_value_grad(spec, w, query))
}

/// Gradient of `f_query(w − α·∇f_support(w))` with respect to `w` (one
/// inner step over all segments).
pub fn meta_grad(
    spec: &ModelSpec,
    w: &ParamVector,
    support: &Batch,
    query: &Batch,
    alpha: f64,
    mode: MetaMode,
) -> Result<ParamVector> {
    if !(alpha > 0.0) {
        return Err(Error::Config("alpha must be positive".into()));
    }
    check(spec, w, &support.inputs)?;
    check(spec, w, &query.inputs)?;
    let (_, g) = adapted_value_grad(spec, w.model(), support, query, &Adaptation::one_step(alpha, mode));
    Ok(embed(w, &g))
}
