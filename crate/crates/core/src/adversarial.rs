//! Two-classifier adversarial local update: the classifiers are pushed to
//! disagree on the shared features, then the generator is trained to remove
//! the disagreement.

use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use crate::data::Episode;
use crate::diffcore::{self, AdaptScope, Adaptation, ModelSpec, ParamVector, Segment};
use crate::federation::{
    check_client, check_gamma, discrepancy_grad, mean_model_loss, prepare, ClientData, ClientOutcome, Divergence,
    LocalConfig, Prepared,
};
use crate::fsl::{InnerLoopConfig, OuterLoopConfig, OuterOptimizer};
use crate::rng::{self, Stream};
use crate::{Error, Result};

/// How the second classifier is initialized at the start of each round.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum AltInit {
    /// Fresh draw, seeded per (client, round).
    #[default]
    Random,
    /// The received classifier plus `scale·N(0, 1)` noise.
    PerturbedCopy { scale: f64 },
}

/// Segments the inner adaptation may move during a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AdvInnerScope {
    /// The segment being trained in the stage.
    ActiveSegment,
    /// Every segment, so the generator's meta-gradient sees head adaptation.
    #[default]
    All,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvConfig {
    /// Weight of the discrepancy subtracted in the classifier stage.
    pub eta: f64,
    /// Weight of the discrepancy added in the generator stage.
    pub lambda: f64,
    /// Outer steps per local epoch; `None` is one pass over the batch.
    pub stage1_steps: Option<usize>,
    pub stage2_steps: Option<usize>,
    pub alt_init: AltInit,
    /// Add the divergence term to each per-classifier loss of both stages.
    pub mi_in_adv_stages: bool,
    pub inner_scope: AdvInnerScope,
}

impl Default for AdvConfig {
    fn default() -> Self {
        Self {
            eta: 0.1,
            lambda: 0.1,
            stage1_steps: None,
            stage2_steps: None,
            alt_init: AltInit::Random,
            mi_in_adv_stages: true,
            inner_scope: AdvInnerScope::All,
        }
    }
}

impl AdvConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eta", self.eta), ("lambda", self.lambda)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(alloc::format!("{name} must be finite and non-negative")));
            }
        }
        if self.stage1_steps == Some(0) || self.stage2_steps == Some(0) {
            return Err(Error::Config("stage steps must be at least 1".into()));
        }
        if let AltInit::PerturbedCopy { scale } = self.alt_init {
            if !(scale >= 0.0 && scale.is_finite()) {
                return Err(Error::Config("alt_init scale must be finite and non-negative".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Both classifiers train on `L(θ) + L(θ′) − η·adv`; generator frozen.
    Classifiers,
    /// The generator trains on `L(θ) + L(θ′) + λ·adv`; classifiers frozen.
    Generator,
}

/// Everything a stage needs besides the model, the data and its weight.
#[derive(Debug, Clone, Copy)]
pub struct StageContext<'a> {
    pub inner: InnerLoopConfig,
    pub outer: OuterLoopConfig,
    pub meta_batch: usize,
    pub inner_scope: AdvInnerScope,
    /// `(w_ref, γ)` for the divergence term inside each per-classifier loss.
    pub reference: Option<(&'a ParamVector, f64)>,
    pub mi_at_adapted: bool,
}

impl<'a> StageContext<'a> {
    pub fn new(inner: InnerLoopConfig, outer: OuterLoopConfig) -> Self {
        Self {
            inner,
            outer,
            meta_batch: 1,
            inner_scope: AdvInnerScope::All,
            reference: None,
            mi_at_adapted: false,
        }
    }

    fn adaptation(&self, stage: Stage) -> Adaptation {
        let scope = match (self.inner_scope, stage) {
            (AdvInnerScope::All, _) => AdaptScope::ALL,
            (AdvInnerScope::ActiveSegment, Stage::Classifiers) => AdaptScope::CLASSIFIER,
            (AdvInnerScope::ActiveSegment, Stage::Generator) => AdaptScope::GENERATOR,
        };
        self.inner.adaptation(scope)
    }

    fn divergence(&self) -> Option<Divergence> {
        self.reference.filter(|(_, g)| *g != 0.0).map(|(_, gamma)| Divergence {
            gamma,
            at_adapted: self.mi_at_adapted,
        })
    }

    fn validate(&self, spec: &ModelSpec) -> Result<()> {
        self.inner.validate()?;
        self.outer.validate()?;
        if self.meta_batch == 0 {
            return Err(Error::Config("meta_batch must be at least 1".into()));
        }
        if let Some((r, gamma)) = self.reference {
            r.check_spec(spec)?;
            check_gamma(gamma)?;
        }
        Ok(())
    }
}

fn check_split(spec: &ModelSpec, split: &ParamVector, episodes: &[Episode]) -> Result<()> {
    spec.validate()?;
    split.check_spec(spec)?;
    if !split.has_alt() {
        return Err(Error::Config("adversarial model needs a second classifier".into()));
    }
    if episodes.is_empty() {
        return Err(Error::EmptyBatch);
    }
    for ep in episodes {
        diffcore::check_inputs(spec, &ep.support.inputs)?;
        diffcore::check_inputs(spec, &ep.query.inputs)?;
    }
    Ok(())
}

/// Mean over episode samples of `KL(p(Θ,θ) ‖ p(Θ,θ′))`.
pub fn adv_loss(spec: &ModelSpec, split: &ParamVector, episodes: &[Episode]) -> Result<f64> {
    check_split(spec, split, episodes)?;
    let prepared = prepare(spec, episodes, None);
    let mut total = 0.0;
    for p in &prepared {
        total += discrepancy_grad(spec, split.generator(), split.classifier(), split.classifier_alt(), core::slice::from_ref(p)).0;
    }
    Ok(total / episodes.len() as f64)
}

/// Stage objective over all three segments. Returns the objective, its
/// gradient and the main-classifier loss `L(θ)`.
fn stage_value_grad(
    spec: &ModelSpec,
    values: &[f64],
    chunk: &[Prepared<'_>],
    stage: Stage,
    weight: f64,
    ctx: &StageContext<'_>,
) -> (f64, Vec<f64>, f64) {
    let g = spec.generator_len();
    let c = spec.classifier_len();
    let (main, alt) = (&values[..g + c], &values[g + c..]);
    let alt_model: Vec<f64> = values[..g].iter().chain(alt).copied().collect();
    let a = ctx.adaptation(stage);
    let div = ctx.divergence();
    let (v1, g1) = mean_model_loss(spec, main, chunk, &a, div);
    let (v2, g2) = mean_model_loss(spec, &alt_model, chunk, &a, div);
    let mut grad = g1;
    for i in 0..g {
        grad[i] += g2[i];
    }
    grad.extend_from_slice(&g2[g..]);
    let mut value = v1 + v2;
    if weight != 0.0 {
        let s = match stage {
            Stage::Classifiers => -weight,
            Stage::Generator => weight,
        };
        let (d, dg, da, db) = discrepancy_grad(spec, &values[..g], &values[g..g + c], alt, chunk);
        value += s * d;
        for (gi, d) in grad.iter_mut().zip(dg.iter().chain(&da).chain(&db)) {
            *gi += s * d;
        }
    }
    (value, grad, v1)
}

/// Objective of `stage` at `split` over `episodes`, with the gradient on
/// every segment (frozen ones included).
pub fn stage_objective(
    spec: &ModelSpec,
    split: &ParamVector,
    episodes: &[Episode],
    stage: Stage,
    weight: f64,
    ctx: &StageContext<'_>,
) -> Result<(f64, ParamVector)> {
    check_split(spec, split, episodes)?;
    ctx.validate(spec)?;
    let prepared = prepare(spec, episodes, ctx.reference.map(|(r, _)| r.model()));
    let (v, g, _) = stage_value_grad(spec, split.values(), &prepared, stage, weight, ctx);
    Ok((v, split.with_values(g)))
}

/// `steps` outer steps cycling over `meta_batch`-sized chunks; only the
/// stage's segments move. Returns the mean main-classifier loss.
fn run_stage(
    spec: &ModelSpec,
    split: &mut ParamVector,
    prepared: &[Prepared<'_>],
    stage: Stage,
    weight: f64,
    steps: usize,
    ctx: &StageContext<'_>,
) -> f64 {
    let active = match stage {
        Stage::Classifiers => [split.range(Segment::Classifier), split.range(Segment::ClassifierAlt)],
        Stage::Generator => [split.range(Segment::Generator), 0..0],
    };
    let mut values = split.values().to_vec();
    let mut opt = OuterOptimizer::new(ctx.outer, values.len());
    let chunks: Vec<&[Prepared<'_>]> = prepared.chunks(ctx.meta_batch).collect();
    let mut total = 0.0;
    for i in 0..steps {
        let (_, g, main) = stage_value_grad(spec, &values, chunks[i % chunks.len()], stage, weight, ctx);
        opt.step(&mut values, &g, &active);
        total += main;
    }
    *split = split.with_values(values);
    total / steps as f64
}

fn stage_update(
    spec: &ModelSpec,
    split: &ParamVector,
    episodes: &[Episode],
    stage: Stage,
    weight: f64,
    steps: usize,
    ctx: &StageContext<'_>,
) -> Result<ParamVector> {
    check_split(spec, split, episodes)?;
    ctx.validate(spec)?;
    if !(weight >= 0.0 && weight.is_finite()) {
        return Err(Error::Config("stage weight must be finite and non-negative".into()));
    }
    let prepared = prepare(spec, episodes, ctx.reference.map(|(r, _)| r.model()));
    let mut out = split.clone();
    run_stage(spec, &mut out, &prepared, stage, weight, steps, ctx);
    out.ensure_finite("adversarial stage")
}

/// Classifier stage: `steps` outer steps on `L(θ) + L(θ′) − η·adv`.
pub fn stage1_update(
    spec: &ModelSpec,
    split: &ParamVector,
    episodes: &[Episode],
    eta: f64,
    steps: usize,
    ctx: &StageContext<'_>,
) -> Result<ParamVector> {
    stage_update(spec, split, episodes, Stage::Classifiers, eta, steps, ctx)
}

/// Generator stage: `steps` outer steps on `L(θ) + L(θ′) + λ·adv`.
pub fn stage2_update(
    spec: &ModelSpec,
    split: &ParamVector,
    episodes: &[Episode],
    lambda: f64,
    steps: usize,
    ctx: &StageContext<'_>,
) -> Result<ParamVector> {
    stage_update(spec, split, episodes, Stage::Generator, lambda, steps, ctx)
}

/// The second classifier for `(client, round)`.
pub fn init_alt(spec: &ModelSpec, w: &ParamVector, alt_init: AltInit, seed: u64, client: usize, round: usize) -> Vec<f64> {
    let mut rng = rng::stream(seed, Stream::AltClassifier, &[client as u64, round as u64]);
    match alt_init {
        AltInit::Random => ParamVector::init_classifier(spec, &mut rng),
        AltInit::PerturbedCopy { scale } => w
            .classifier()
            .iter()
            .map(|&v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                v + scale * z
            })
            .collect(),
    }
}

/// Per local epoch: sample a batch, run the classifier stage then the
/// generator stage on it. The second classifier is dropped before returning.
pub fn client_update_adv(
    spec: &ModelSpec,
    w_global: &ParamVector,
    reference: Option<&ParamVector>,
    client: &ClientData<'_>,
    gamma: f64,
    adv: &AdvConfig,
    local: &LocalConfig,
) -> Result<ClientOutcome> {
    check_client(spec, w_global, client, local)?;
    adv.validate()?;
    check_gamma(gamma)?;
    let ctx = StageContext {
        inner: local.inner,
        outer: local.outer,
        meta_batch: local.meta_batch,
        inner_scope: adv.inner_scope,
        reference: reference.filter(|_| adv.mi_in_adv_stages).map(|r| (r, gamma)),
        mi_at_adapted: local.mi_at_adapted,
    };
    ctx.validate(spec)?;
    let alt = init_alt(spec, w_global, adv.alt_init, client.seed, client.id, client.round);
    let mut split = w_global.clone().without_alt().with_alt(&alt)?;
    let steps1 = adv.stage1_steps.unwrap_or(local.steps_per_epoch());
    let steps2 = adv.stage2_steps.unwrap_or(local.steps_per_epoch());
    let mut final_loss = 0.0;
    for epoch in 0..local.local_epochs {
        let episodes = local.batch(client, epoch)?;
        let prepared = prepare(spec, &episodes, ctx.reference.map(|(r, _)| r.model()));
        run_stage(spec, &mut split, &prepared, Stage::Classifiers, adv.eta, steps1, &ctx);
        final_loss = run_stage(spec, &mut split, &prepared, Stage::Generator, adv.lambda, steps2, &ctx);
    }
    let model = split.without_alt().ensure_finite("adversarial client update")?;
    Ok(ClientOutcome {
        model,
        batch_weight: local.local_epochs * local.episodes_per_round,
        final_loss,
    })
}
