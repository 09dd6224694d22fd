//! Centralized few-shot meta-learning: adaptation on the support set,
//! query loss at the adapted parameters, and the outer update.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::data::Episode;
use crate::diffcore::{self, adapted_value_grad, AdaptScope, Adaptation, Batch, MetaMode, ModelSpec, ParamVector};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerLoopConfig {
    /// Inner step size. Zero disables adaptation.
    pub alpha: f64,
    pub inner_steps: usize,
    pub meta_mode: MetaMode,
}

impl Default for InnerLoopConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            inner_steps: 1,
            meta_mode: MetaMode::Exact,
        }
    }
}

impl InnerLoopConfig {
    pub fn new(alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config("alpha must be finite and non-negative".into()));
        }
        if self.inner_steps == 0 {
            return Err(Error::Config("inner_steps must be at least 1".into()));
        }
        if self.meta_mode == MetaMode::Exact && self.inner_steps != 1 {
            return Err(Error::Config("exact meta-gradients require inner_steps = 1".into()));
        }
        Ok(())
    }

    pub fn adaptation(&self, scope: AdaptScope) -> Adaptation {
        Adaptation {
            alpha: self.alpha,
            steps: self.inner_steps,
            mode: self.meta_mode,
            scope,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    #[default]
    Sgd,
    /// Adam-style first/second moment scaling.
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuterLoopConfig {
    pub beta: f64,
    pub optimizer: OptimizerKind,
    /// Rescale the gradient to at most this norm before stepping.
    pub clip_norm: Option<f64>,
}

impl Default for OuterLoopConfig {
    fn default() -> Self {
        Self {
            beta: 1e-3,
            optimizer: OptimizerKind::Sgd,
            clip_norm: None,
        }
    }
}

impl OuterLoopConfig {
    pub fn new(beta: f64) -> Self {
        Self {
            beta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("beta must be positive".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("clip_norm must be positive".into()));
            }
        }
        Ok(())
    }
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Outer optimizer with its moment state; one per local update.
#[derive(Debug, Clone)]
pub struct OuterOptimizer {
    cfg: OuterLoopConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OuterOptimizer {
    pub fn new(cfg: OuterLoopConfig, len: usize) -> Self {
        let moments = if cfg.optimizer == OptimizerKind::Adaptive { len } else { 0 };
        Self {
            cfg,
            m: vec![0.0; moments],
            v: vec![0.0; moments],
            t: 0,
        }
    }

    /// Updates `w` in place on the coordinates in `active`.
    pub fn step(&mut self, w: &mut [f64], grad: &[f64], active: &[Range<usize>]) {
        let mut scale = 1.0;
        if let Some(c) = self.cfg.clip_norm {
            let norm = libm::sqrt(active.iter().flat_map(|r| grad[r.clone()].iter()).map(|g| g * g).sum());
            if norm > c {
                scale = c / norm;
            }
        }
        let beta = self.cfg.beta;
        match self.cfg.optimizer {
            OptimizerKind::Sgd => {
                for r in active {
                    for i in r.clone() {
                        w[i] -= beta * scale * grad[i];
                    }
                }
            }
            OptimizerKind::Adaptive => {
                self.t += 1;
                let c1 = 1.0 - libm::pow(ADAM_B1, self.t as f64);
                let c2 = 1.0 - libm::pow(ADAM_B2, self.t as f64);
                for r in active {
                    for i in r.clone() {
                        let g = grad[i] * scale;
                        self.m[i] = ADAM_B1 * self.m[i] + (1.0 - ADAM_B1) * g;
                        self.v[i] = ADAM_B2 * self.v[i] + (1.0 - ADAM_B2) * g * g;
                        w[i] -= beta * (self.m[i] / c1) / (libm::sqrt(self.v[i] / c2) + ADAM_EPS);
                    }
                }
            }
        }
    }
}

fn check_episode(spec: &ModelSpec, w: &ParamVector, ep: &Episode) -> Result<()> {
    for b in [&ep.support, &ep.query] {
        diffcore::check_inputs(spec, &b.inputs)?;
    }
    w.check_spec(spec)
}

/// `w′` after `inner_steps` gradient steps on the support loss.
pub fn adapt(spec: &ModelSpec, w: &ParamVector, support: &Batch, cfg: &InnerLoopConfig) -> Result<ParamVector> {
    cfg.validate()?;
    spec.validate()?;
    w.check_spec(spec)?;
    diffcore::check_inputs(spec, &support.inputs)?;
    let adapted = diffcore::adapt_slice(spec, w.model(), support, &cfg.adaptation(AdaptScope::ALL));
    let mut values = w.values().to_vec();
    values[..adapted.len()].copy_from_slice(&adapted);
    w.with_values(values).ensure_finite("adapt")
}

/// Query loss at the support-adapted parameters.
pub fn episode_loss(spec: &ModelSpec, w: &ParamVector, episode: &Episode, cfg: &InnerLoopConfig) -> Result<f64> {
    let adapted = adapt(spec, w, &episode.support, cfg)?;
    Ok(diffcore::task_value(spec, adapted.model(), &episode.query))
}

/// Mean episode loss over a batch of episodes.
pub fn local_fsl_loss(spec: &ModelSpec, w: &ParamVector, episodes: &[Episode], cfg: &InnerLoopConfig) -> Result<f64> {
    if episodes.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for ep in episodes {
        total += episode_loss(spec, w, ep, cfg)?;
    }
    Ok(total / episodes.len() as f64)
}

/// Mean of episode losses and meta-gradients over `episodes` on the model
/// slice `params`, reduced in episode order.
pub(crate) fn batch_value_grad(spec: &ModelSpec, params: &[f64], episodes: &[Episode], a: &Adaptation) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; params.len()];
    let mut value = 0.0;
    for ep in episodes {
        let (v, g) = adapted_value_grad(spec, params, &ep.support, &ep.query, a);
        value += v;
        for (acc, gi) in grad.iter_mut().zip(&g) {
            *acc += gi;
        }
    }
    let inv = 1.0 / episodes.len() as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    (value * inv, grad)
}

/// Mean meta-gradient of the batch.
pub fn meta_gradient(spec: &ModelSpec, w: &ParamVector, episodes: &[Episode], cfg: &InnerLoopConfig) -> Result<ParamVector> {
    cfg.validate()?;
    spec.validate()?;
    if episodes.is_empty() {
        return Err(Error::EmptyBatch);
    }
    for ep in episodes {
        check_episode(spec, w, ep)?;
    }
    let (_, g) = batch_value_grad(spec, w.model(), episodes, &cfg.adaptation(AdaptScope::ALL));
    Ok(diffcore::embed(w, &g))
}

/// One outer update `w ← w − β·mean ∇ℓ_T(w)` (a fresh optimizer state
/// when the adaptive optimizer is selected).
pub fn meta_step(
    spec: &ModelSpec,
    w: &ParamVector,
    episodes: &[Episode],
    inner: &InnerLoopConfig,
    outer: &OuterLoopConfig,
) -> Result<ParamVector> {
    outer.validate()?;
    let g = meta_gradient(spec, w, episodes, inner)?;
    let mut values = w.values().to_vec();
    let model = 0..w.model().len();
    OuterOptimizer::new(*outer, values.len()).step(&mut values, g.values(), &[model]);
    w.with_values(values).ensure_finite("meta_step")
}
