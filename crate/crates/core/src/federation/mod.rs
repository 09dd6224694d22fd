//! Simulated client/server training: local updates, weighted aggregation,
//! the divergence-regularized objective and the algorithm variants.

mod objective;

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::adversarial::{self, AdvConfig};
use crate::data::{sample_batch, Dataset, Episode, EpisodeShape, PartitionPlan, Shard};
use crate::diffcore::{self, AdaptScope, ModelSpec, ParamVector};
use crate::eval::{evaluate_models, EvalConfig, EvalReport};
use crate::fsl::{InnerLoopConfig, OuterLoopConfig, OuterOptimizer};
use crate::rng::{self, Stream};
use crate::{Error, Result};

pub(crate) use objective::{discrepancy_grad, mean_model_loss, prepare, Divergence, Prepared};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algorithm {
    /// Each client meta-trains alone; no aggregation.
    Local,
    Naive,
    /// Naive plus a proximal pull toward the round's global model.
    Prox,
    /// Naive plus `γ·KL(p_ref ‖ p_k)`.
    Mi,
    /// Divergence term plus two-stage adversarial feature alignment.
    MiAdv,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [Self::Local, Self::Naive, Self::Prox, Self::Mi, Self::MiAdv];

    pub fn name(self) -> &'static str {
        match self {
            Self::Local => "local",
            Self::Naive => "naive",
            Self::Prox => "prox",
            Self::Mi => "mi",
            Self::MiAdv => "mi_adv",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    pub fn uses_divergence(self) -> bool {
        matches!(self, Self::Mi | Self::MiAdv)
    }
}

impl core::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// Reference model for the divergence term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MiReference {
    /// The aggregated model of the current round.
    #[default]
    Global,
    /// Weighted average of the other clients' previous local models.
    KExclusive,
}

impl MiReference {
    pub fn name(self) -> &'static str {
        match self {
            Self::Global => "global",
            Self::KExclusive => "k_exclusive",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Global, Self::KExclusive].into_iter().find(|r| r.name() == s)
    }
}

/// Settings of one client's local training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalConfig {
    pub shape: EpisodeShape,
    /// Episodes sampled per local epoch (`|B_k|` per epoch).
    pub episodes_per_round: usize,
    /// Episodes per outer step.
    pub meta_batch: usize,
    pub local_epochs: usize,
    pub inner: InnerLoopConfig,
    pub outer: OuterLoopConfig,
    /// Evaluate the divergence term at the adapted parameters instead of
    /// the client model itself.
    pub mi_at_adapted: bool,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self {
            shape: EpisodeShape::new(5, 1, 15),
            episodes_per_round: 4,
            meta_batch: 1,
            local_epochs: 1,
            inner: InnerLoopConfig::default(),
            outer: OuterLoopConfig::default(),
            mi_at_adapted: false,
        }
    }
}

impl LocalConfig {
    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        self.inner.validate()?;
        self.outer.validate()?;
        if self.episodes_per_round == 0 {
            return Err(Error::Config("episodes_per_round must be at least 1".into()));
        }
        if self.meta_batch == 0 {
            return Err(Error::Config("meta_batch must be at least 1".into()));
        }
        Ok(())
    }

    pub(crate) fn batch(&self, client: &ClientData<'_>, epoch: usize) -> Result<Vec<Episode>> {
        let mut rng = rng::stream(client.seed, Stream::ClientEpisodes, &[client.id as u64, client.round as u64, epoch as u64]);
        sample_batch(client.dataset, client.shard, self.episodes_per_round, self.shape, &mut rng)
    }

    pub(crate) fn steps_per_epoch(&self) -> usize {
        self.episodes_per_round.div_ceil(self.meta_batch)
    }
}

/// What a client update needs to know about its client.
#[derive(Debug, Clone, Copy)]
pub struct ClientData<'a> {
    pub id: usize,
    pub round: usize,
    /// Run seed; episode streams are keyed by `(id, round, epoch)`.
    pub seed: u64,
    pub dataset: &'a Dataset,
    pub shard: &'a Shard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientOutcome {
    pub model: ParamVector,
    /// Episodes sampled during the update.
    pub batch_weight: usize,
    /// Mean pre-step objective over the last local epoch.
    pub final_loss: f64,
}

pub(crate) fn check_client(spec: &ModelSpec, w: &ParamVector, client: &ClientData<'_>, cfg: &LocalConfig) -> Result<()> {
    spec.validate()?;
    w.check_spec(spec)?;
    cfg.validate()?;
    if client.dataset.input_dim() != spec.input_dim {
        return Err(Error::Dimension {
            what: "dataset input_dim",
            expected: spec.input_dim,
            got: client.dataset.input_dim(),
        });
    }
    if cfg.shape.n_way != spec.n_way {
        return Err(Error::Dimension {
            what: "episode n_way",
            expected: spec.n_way,
            got: cfg.shape.n_way,
        });
    }
    Ok(())
}

/// Adds `(μ/2)·‖w − anchor‖²` to a value/gradient pair.
pub(crate) fn add_prox(value: &mut f64, grad: &mut [f64], w: &[f64], anchor: &[f64], mu: f64) {
    let mut sq = 0.0;
    for ((g, x), a) in grad.iter_mut().zip(w).zip(anchor) {
        let d = x - a;
        sq += d * d;
        *g += mu * d;
    }
    *value += 0.5 * mu * sq;
}

/// Shared local loop of the naive, divergence and proximal updates. A zero
/// `gamma` or `mu` removes its term entirely, so the reductions hold bitwise.
fn local_training(
    spec: &ModelSpec,
    start: &ParamVector,
    client: &ClientData<'_>,
    cfg: &LocalConfig,
    reference: Option<(&ParamVector, f64)>,
    prox: Option<(&ParamVector, f64)>,
) -> Result<ClientOutcome> {
    check_client(spec, start, client, cfg)?;
    let reference = reference.filter(|(_, g)| *g != 0.0);
    let prox = prox.filter(|(_, m)| *m != 0.0);
    let div = reference.map(|(_, gamma)| Divergence {
        gamma,
        at_adapted: cfg.mi_at_adapted,
    });
    let a = cfg.inner.adaptation(AdaptScope::ALL);
    let mut values = start.model().to_vec();
    let mut opt = OuterOptimizer::new(cfg.outer, values.len());
    let active = [0..values.len()];
    let mut final_loss = 0.0;
    for epoch in 0..cfg.local_epochs {
        let episodes = cfg.batch(client, epoch)?;
        let prepared = prepare(spec, &episodes, reference.map(|(r, _)| r.model()));
        let mut total = 0.0;
        for chunk in prepared.chunks(cfg.meta_batch) {
            let (mut v, mut g) = mean_model_loss(spec, &values, chunk, &a, div);
            if let Some((anchor, mu)) = prox {
                add_prox(&mut v, &mut g, &values, anchor.model(), mu);
            }
            opt.step(&mut values, &g, &active);
            total += v;
        }
        final_loss = total / cfg.steps_per_epoch() as f64;
    }
    let model = ParamVector::from_values(spec, values).map_err(|_| Error::NonFinite("client update"))?;
    Ok(ClientOutcome {
        model,
        batch_weight: cfg.local_epochs * cfg.episodes_per_round,
        final_loss,
    })
}

/// `local_epochs` passes of meta-steps on freshly sampled episodes.
pub fn client_update_naive(spec: &ModelSpec, w_global: &ParamVector, client: &ClientData<'_>, cfg: &LocalConfig) -> Result<ClientOutcome> {
    local_training(spec, w_global, client, cfg, None, None)
}

/// Meta-steps on `L_k(w) + γ·KL(p(w_ref) ‖ p(w))`; `w_ref` is a constant.
pub fn client_update_mi(
    spec: &ModelSpec,
    w_global: &ParamVector,
    w_ref: &ParamVector,
    client: &ClientData<'_>,
    gamma: f64,
    cfg: &LocalConfig,
) -> Result<ClientOutcome> {
    check_gamma(gamma)?;
    w_ref.check_spec(spec)?;
    local_training(spec, w_global, client, cfg, Some((w_ref, gamma)), None)
}

/// Meta-steps on `L_k(w) + (μ/2)·‖w − w_global‖²`.
pub fn client_update_prox(
    spec: &ModelSpec,
    w_global: &ParamVector,
    client: &ClientData<'_>,
    mu_prox: f64,
    cfg: &LocalConfig,
) -> Result<ClientOutcome> {
    if !(mu_prox >= 0.0 && mu_prox.is_finite()) {
        return Err(Error::Config("mu_prox must be finite and non-negative".into()));
    }
    local_training(spec, w_global, client, cfg, None, Some((w_global, mu_prox)))
}

pub(crate) fn check_gamma(gamma: f64) -> Result<()> {
    if gamma >= 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::Config("gamma must be finite and non-negative".into()))
    }
}

/// The local objective as a function of the model, for inspection and
/// gradient checks.
#[derive(Debug, Clone, Copy)]
pub struct LocalObjective<'a> {
    pub spec: &'a ModelSpec,
    pub inner: InnerLoopConfig,
    /// `(w_ref, γ)`.
    pub reference: Option<(&'a ParamVector, f64)>,
    pub mi_at_adapted: bool,
    /// `(anchor, μ)`.
    pub prox: Option<(&'a ParamVector, f64)>,
}

impl<'a> LocalObjective<'a> {
    pub fn new(spec: &'a ModelSpec, inner: InnerLoopConfig) -> Self {
        Self {
            spec,
            inner,
            reference: None,
            mi_at_adapted: false,
            prox: None,
        }
    }

    /// Mean objective over `episodes` and its gradient.
    pub fn value_grad(&self, w: &ParamVector, episodes: &[Episode]) -> Result<(f64, ParamVector)> {
        self.inner.validate()?;
        self.spec.validate()?;
        w.check_spec(self.spec)?;
        if episodes.is_empty() {
            return Err(Error::EmptyBatch);
        }
        for ep in episodes {
            diffcore::check_inputs(self.spec, &ep.support.inputs)?;
            diffcore::check_inputs(self.spec, &ep.query.inputs)?;
        }
        let div = self.reference.map(|(_, gamma)| Divergence {
            gamma,
            at_adapted: self.mi_at_adapted,
        });
        let prepared = prepare(self.spec, episodes, self.reference.map(|(r, _)| r.model()));
        let a = self.inner.adaptation(AdaptScope::ALL);
        let (mut v, mut g) = mean_model_loss(self.spec, w.model(), &prepared, &a, div);
        if let Some((anchor, mu)) = self.prox {
            add_prox(&mut v, &mut g, w.model(), anchor.model(), mu);
        }
        Ok((v, diffcore::embed(w, &g)))
    }
}

/// Mean over episodes (support ∪ query inputs) of `KL(p(w_ref) ‖ p(w_k))`.
pub fn mi_loss(spec: &ModelSpec, w_ref: &ParamVector, w_k: &ParamVector, episodes: &[Episode]) -> Result<f64> {
    spec.validate()?;
    w_ref.check_spec(spec)?;
    w_k.check_spec(spec)?;
    if episodes.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for p in prepare(spec, episodes, Some(w_ref.model())) {
        diffcore::check_inputs(spec, &p.inputs)?;
        total += objective::divergence_grad(spec, w_k.model(), &p.inputs, p.reference.as_deref().unwrap()).0;
    }
    Ok(total / episodes.len() as f64)
}

/// `Σ (w_k/W)·x_k`, computed as `x_0 + Σ (w_k/W)·(x_k − x_0)` so that
/// identical inputs come back bitwise.
pub fn aggregate(models: &[(&ParamVector, f64)]) -> Result<ParamVector> {
    let (first, _) = models.first().ok_or(Error::NothingToAggregate)?;
    let total: f64 = models.iter().map(|(_, w)| w).sum();
    if models.iter().any(|(_, w)| !(*w >= 0.0 && w.is_finite())) || !(total > 0.0) {
        return Err(Error::Config("aggregation weights must be non-negative with a positive sum".into()));
    }
    let mut out = first.values().to_vec();
    for (m, w) in &models[1..] {
        if !first.same_layout(m) {
            return Err(Error::Dimension {
                what: "aggregated model",
                expected: first.len(),
                got: m.len(),
            });
        }
        let s = w / total;
        for ((o, x), x0) in out.iter_mut().zip(m.values()).zip(first.values()) {
            *o += s * (x - x0);
        }
    }
    Ok(first.with_values(out))
}

/// Weighted average of every model except client `k`.
pub fn k_exclusive(models: &[&ParamVector], weights: &[f64], k: usize) -> Result<ParamVector> {
    if models.len() < 2 {
        return Err(Error::KExclusiveUndefined);
    }
    if weights.len() != models.len() {
        return Err(Error::Dimension {
            what: "k-exclusive weights",
            expected: models.len(),
            got: weights.len(),
        });
    }
    if k >= models.len() {
        return Err(Error::Config("k-exclusive client index out of range".to_string()));
    }
    let rest: Vec<(&ParamVector, f64)> = models
        .iter()
        .zip(weights)
        .enumerate()
        .filter(|(i, _)| *i != k)
        .map(|(_, (m, w))| (*m, *w))
        .collect();
    aggregate(&rest)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub clients: usize,
    pub rounds: usize,
    pub algorithm: Algorithm,
    /// Divergence weight; used by the divergence algorithms only.
    pub gamma: f64,
    /// Proximal weight; used by the proximal algorithm only.
    pub mu_prox: f64,
    pub mi_reference: MiReference,
    pub local: LocalConfig,
    /// Outer step size at round `t` is `β / (1 + lr_decay·t)`.
    pub lr_decay: f64,
    pub adv: AdvConfig,
    pub eval: EvalConfig,
    /// Evaluate after every `eval_every` rounds and after the last one;
    /// zero disables evaluation.
    pub eval_every: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            clients: 10,
            rounds: 100,
            algorithm: Algorithm::MiAdv,
            gamma: 0.2,
            mu_prox: 0.01,
            mi_reference: MiReference::Global,
            local: LocalConfig::default(),
            lr_decay: 0.0,
            adv: AdvConfig::default(),
            eval: EvalConfig::default(),
            eval_every: 0,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::Config("clients must be at least 1".into()));
        }
        if self.local.local_epochs == 0 {
            return Err(Error::Config("local_epochs must be at least 1".into()));
        }
        self.local.validate()?;
        check_gamma(self.gamma)?;
        if !(self.mu_prox >= 0.0 && self.mu_prox.is_finite()) {
            return Err(Error::Config("mu_prox must be finite and non-negative".into()));
        }
        if !(self.lr_decay >= 0.0 && self.lr_decay.is_finite()) {
            return Err(Error::Config("lr_decay must be finite and non-negative".into()));
        }
        if self.algorithm.uses_divergence() && self.mi_reference == MiReference::KExclusive && self.clients < 2 {
            return Err(Error::KExclusiveUndefined);
        }
        if self.algorithm == Algorithm::MiAdv {
            self.adv.validate()?;
        }
        if self.eval_every > 0 {
            self.eval.shape.validate()?;
            if self.eval.episodes == 0 {
                return Err(Error::NoEpisodes);
            }
        }
        Ok(())
    }

    pub(crate) fn local_for_round(&self, round: usize) -> LocalConfig {
        let mut local = self.local;
        local.outer.beta = self.local.outer.beta / (1.0 + self.lr_decay * round as f64);
        local
    }
}

/// Server-side view between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct FederationState {
    /// Rounds completed.
    pub round: usize,
    pub global: ParamVector,
    /// Each client's model after its last update (the initialization before
    /// the first round). For the local-training baseline these are the
    /// models being trained.
    pub clients: Vec<ParamVector>,
    /// Batch weights of the last round.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    /// Zero-based index of the completed round; also its snapshot id.
    pub round: usize,
    pub client_losses: Vec<f64>,
    pub batch_weights: Vec<usize>,
    /// Batch-weighted mean of the client losses.
    pub train_loss: f64,
    pub eval: Option<EvalReport>,
}

/// Executes the independent client updates of a round. Results must come
/// back in client order.
pub trait ClientRunner {
    fn run(&self, clients: usize, job: &(dyn Fn(usize) -> Result<ClientOutcome> + Sync)) -> Vec<Result<ClientOutcome>>;
}

/// Runs clients one after another.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl ClientRunner for Sequential {
    fn run(&self, clients: usize, job: &(dyn Fn(usize) -> Result<ClientOutcome> + Sync)) -> Vec<Result<ClientOutcome>> {
        (0..clients).map(job).collect()
    }
}

/// A configured simulation over a partitioned dataset.
#[derive(Debug, Clone)]
pub struct Federation<'a> {
    pub spec: &'a ModelSpec,
    pub dataset: &'a Dataset,
    pub shards: Vec<Shard>,
    pub config: FederationConfig,
    pub seed: u64,
}

impl<'a> Federation<'a> {
    pub fn new(spec: &'a ModelSpec, dataset: &'a Dataset, plan: &PartitionPlan, config: FederationConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        spec.validate()?;
        if plan.clients() != config.clients {
            return Err(Error::Dimension {
                what: "partition clients",
                expected: config.clients,
                got: plan.clients(),
            });
        }
        Ok(Self {
            spec,
            dataset,
            shards: plan.shards(dataset),
            config,
            seed,
        })
    }

    pub fn init_state(&self) -> FederationState {
        let global = ParamVector::init(self.spec, &mut rng::stream(self.seed, Stream::Init, &[]));
        FederationState {
            round: 0,
            clients: vec![global.clone(); self.config.clients],
            weights: vec![1.0; self.config.clients],
            global,
        }
    }

    fn reference(&self, state: &FederationState, k: usize) -> Result<ParamVector> {
        match self.config.mi_reference {
            MiReference::Global => Ok(state.global.clone()),
            MiReference::KExclusive => {
                let models: Vec<&ParamVector> = state.clients.iter().collect();
                k_exclusive(&models, &state.weights, k)
            }
        }
    }

    /// One client's update for the coming round, dispatched on the algorithm.
    pub fn client_update(&self, state: &FederationState, k: usize) -> Result<ClientOutcome> {
        let cfg = &self.config;
        let local = cfg.local_for_round(state.round);
        let client = ClientData {
            id: k,
            round: state.round,
            seed: self.seed,
            dataset: self.dataset,
            shard: &self.shards[k],
        };
        let spec = self.spec;
        match cfg.algorithm {
            Algorithm::Local => client_update_naive(spec, &state.clients[k], &client, &local),
            Algorithm::Naive => client_update_naive(spec, &state.global, &client, &local),
            Algorithm::Prox => client_update_prox(spec, &state.global, &client, cfg.mu_prox, &local),
            Algorithm::Mi => {
                let r = self.reference(state, k)?;
                client_update_mi(spec, &state.global, &r, &client, cfg.gamma, &local)
            }
            Algorithm::MiAdv => {
                let r = self.reference(state, k)?;
                adversarial::client_update_adv(spec, &state.global, Some(&r), &client, cfg.gamma, &cfg.adv, &local)
            }
        }
        .map_err(|e| Error::Client {
            client: k,
            round: state.round,
            cause: alloc::boxed::Box::new(e),
        })
    }

    /// Client updates, aggregation and broadcast; evaluation if scheduled.
    pub fn run_round(&self, state: &mut FederationState, runner: &dyn ClientRunner) -> Result<RoundRecord> {
        let snapshot: &FederationState = state;
        let outcomes = runner
            .run(self.config.clients, &|k| self.client_update(snapshot, k))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let weights: Vec<f64> = outcomes.iter().map(|o| o.batch_weight as f64).collect();
        let total: f64 = weights.iter().sum();
        let train_loss = outcomes.iter().zip(&weights).map(|(o, w)| o.final_loss * w).sum::<f64>() / total;
        if self.config.algorithm != Algorithm::Local {
            let pairs: Vec<(&ParamVector, f64)> = outcomes.iter().map(|o| &o.model).zip(weights.iter().copied()).collect();
            state.global = aggregate(&pairs)?;
        }
        let round = state.round;
        state.clients = outcomes.iter().map(|o| o.model.clone()).collect();
        state.weights = weights;
        state.round += 1;
        let e = self.config.eval_every;
        let eval = if e > 0 && (state.round % e == 0 || state.round == self.config.rounds) {
            Some(self.evaluate(state)?)
        } else {
            None
        };
        Ok(RoundRecord {
            round,
            client_losses: outcomes.iter().map(|o| o.final_loss).collect(),
            batch_weights: outcomes.iter().map(|o| o.batch_weight).collect(),
            train_loss,
            eval,
        })
    }

    /// Few-shot accuracy on the novel classes: of the global model, or the
    /// client average for the local-training baseline.
    pub fn evaluate(&self, state: &FederationState) -> Result<EvalReport> {
        let pool = self.dataset.novel_pool();
        let models: Vec<&ParamVector> = if self.config.algorithm == Algorithm::Local {
            state.clients.iter().collect()
        } else {
            vec![&state.global]
        };
        evaluate_models(self.spec, &models, self.dataset, &pool, &self.config.eval, self.seed)
    }

    /// All rounds from the seeded initialization. `observer` sees every
    /// record with the state after that round.
    pub fn run_training(
        &self,
        runner: &dyn ClientRunner,
        mut observer: impl FnMut(&RoundRecord, &FederationState) -> Result<()>,
    ) -> Result<(FederationState, Vec<RoundRecord>)> {
        let mut state = self.init_state();
        let mut records = Vec::with_capacity(self.config.rounds);
        for _ in 0..self.config.rounds {
            let record = self.run_round(&mut state, runner)?;
            observer(&record, &state)?;
            records.push(record);
        }
        Ok((state, records))
    }
}

/// Sequential training run with no observer.
pub fn run_training(
    spec: &ModelSpec,
    dataset: &Dataset,
    plan: &PartitionPlan,
    config: FederationConfig,
    seed: u64,
) -> Result<(FederationState, Vec<RoundRecord>)> {
    Federation::new(spec, dataset, plan, config, seed)?.run_training(&Sequential, |_, _| Ok(()))
}
