//! Run lifecycle: dataset, partition, training per seed, artifacts.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use fedfsl_core::data::{partition, Dataset};
use fedfsl_core::diffcore::{ModelSpec, ParamVector};
use fedfsl_core::eval::{dump_features, EvalReport, FeatureDump};
use fedfsl_core::federation::{Algorithm, ClientRunner, Federation, FederationState, RoundRecord};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::dataset::build_dataset;
use crate::metrics::{self, MetricsRow};
use crate::runner::ParallelClients;

/// Everything one seeded training run produced.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub spec: ModelSpec,
    pub records: Vec<RoundRecord>,
    pub state: FederationState,
    pub final_eval: Option<EvalReport>,
    pub features: Option<FeatureDump>,
    pub wall_times: Vec<f64>,
}

impl SeedRun {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.final_eval.as_ref().map(|r| r.mean_accuracy)
    }

    pub fn metrics_rows(&self, run_name: &str, algorithm: Algorithm) -> Vec<MetricsRow> {
        self.records
            .iter()
            .map(|r| MetricsRow {
                run_id: format!("{run_name}-s{}", self.seed),
                seed: self.seed,
                round: r.round + 1,
                algorithm: algorithm.name().to_string(),
                train_loss: r.train_loss,
                eval_accuracy: r.eval.as_ref().map(|e| e.mean_accuracy),
                ci95: r.eval.as_ref().map(|e| e.ci95_halfwidth),
                wall_time: None,
            })
            .collect()
    }
}

/// The model whose features and checkpoint represent a run: the global
/// model, or client 0 for the local-training baseline.
pub fn representative(state: &FederationState, algorithm: Algorithm) -> &ParamVector {
    if algorithm == Algorithm::Local {
        &state.clients[0]
    } else {
        &state.global
    }
}

pub fn model_spec(cfg: &ExperimentConfig, dataset: &Dataset) -> ModelSpec {
    cfg.model.spec(dataset.input_dim(), cfg.federation.local.shape.n_way)
}

/// Trains one seed in memory. `on_round` sees each record and the state
/// after that round.
pub fn train_seed(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    seed: u64,
    runner: &dyn ClientRunner,
    mut on_round: impl FnMut(&RoundRecord, &FederationState) -> anyhow::Result<()>,
) -> anyhow::Result<SeedRun> {
    let spec = model_spec(cfg, dataset);
    let plan = partition(dataset, cfg.federation.clients, cfg.data.partition, seed)?;
    let fed = Federation::new(&spec, dataset, &plan, cfg.federation.clone(), seed)?;
    let mut state = fed.init_state();
    let mut records = Vec::with_capacity(cfg.federation.rounds);
    let mut wall_times = Vec::with_capacity(cfg.federation.rounds);
    for _ in 0..cfg.federation.rounds {
        let t = Instant::now();
        let record = fed.run_round(&mut state, runner)?;
        wall_times.push(t.elapsed().as_secs_f64());
        on_round(&record, &state)?;
        records.push(record);
    }
    let final_eval = records.last().and_then(|r| r.eval.clone());
    let features = if cfg.run.dump_features {
        let idx = dataset.novel_indices();
        Some(dump_features(&spec, representative(&state, cfg.federation.algorithm), dataset, &idx)?)
    } else {
        None
    };
    Ok(SeedRun {
        seed,
        spec,
        records,
        state,
        final_eval,
        features,
        wall_times,
    })
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub run_dir: PathBuf,
    pub runs: Vec<SeedRun>,
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Runs every configured seed and writes its artifacts under
/// `<output_dir>/<name>/seed-<s>/`.
pub fn run_experiment(cfg: &ExperimentConfig, output_root: Option<&Path>) -> anyhow::Result<ExperimentOutcome> {
    let dataset = build_dataset(&cfg.data, cfg.federation.local.shape.n_way)?;
    let runner = ParallelClients::new(cfg.run.threads)?;
    let run_dir = cfg.run.run_dir(output_root);
    std::fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    write(&run_dir.join("config.txt"), &cfg.to_text())?;
    let algorithm = cfg.federation.algorithm;
    let mut runs = Vec::new();
    for &seed in &cfg.run.seeds {
        let dir = run_dir.join(format!("seed-{seed}"));
        let ckpt_dir = dir.join("checkpoints");
        std::fs::create_dir_all(&ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;
        let spec = model_spec(cfg, &dataset);
        let every = cfg.run.checkpoint_every;
        let run = train_seed(cfg, &dataset, seed, &runner, |rec, state| {
            if every > 0 && (rec.round + 1) % every == 0 {
                let c = Checkpoint {
                    spec: spec.clone(),
                    round: (rec.round + 1) as u64,
                    algorithm,
                    params: representative(state, algorithm).clone(),
                };
                c.save(&ckpt_dir.join(format!("round-{:05}.bin", rec.round + 1)))?;
            }
            Ok(())
        })
        .with_context(|| format!("seed {seed}"))?;
        Checkpoint {
            spec: run.spec.clone(),
            round: run.records.len() as u64,
            algorithm,
            params: representative(&run.state, algorithm).clone(),
        }
        .save(&ckpt_dir.join("final.bin"))?;
        write(&dir.join("metrics.csv"), &metrics::format_metrics(&run.metrics_rows(&cfg.run.name, algorithm)))?;
        write(&dir.join("timings.csv"), &metrics::format_timings(&run.wall_times))?;
        if let Some(r) = &run.final_eval {
            write(&dir.join("confusion.csv"), &metrics::format_confusion(r))?;
            write(&dir.join("episodes.csv"), &metrics::format_episodes(r))?;
        }
        if let Some(f) = &run.features {
            write(&dir.join("features.csv"), &metrics::format_features(f))?;
            write(&dir.join("classifier.csv"), &metrics::format_classifier(f))?;
        }
        runs.push(run);
    }
    Ok(ExperimentOutcome { run_dir, runs })
}

/// Few-shot evaluation of a stored model on the configured novel classes,
/// seeded with the first configured seed.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, ckpt: &Checkpoint) -> anyhow::Result<EvalReport> {
    let dataset = build_dataset(&cfg.data, ckpt.spec.n_way)?;
    let eval = cfg.federation.eval;
    anyhow::ensure!(
        eval.shape.n_way == ckpt.spec.n_way,
        "checkpoint is {}-way but n_way = {}",
        ckpt.spec.n_way,
        eval.shape.n_way
    );
    let pool = dataset.novel_pool();
    Ok(fedfsl_core::eval::evaluate(&ckpt.spec, &ckpt.params, &dataset, &pool, &eval, cfg.run.seeds[0])?)
}

/// Generator features of the configured novel samples under a stored model.
pub fn checkpoint_features(cfg: &ExperimentConfig, ckpt: &Checkpoint) -> anyhow::Result<FeatureDump> {
    let dataset = build_dataset(&cfg.data, ckpt.spec.n_way)?;
    Ok(dump_features(&ckpt.spec, &ckpt.params, &dataset, &dataset.novel_indices())?)
}
