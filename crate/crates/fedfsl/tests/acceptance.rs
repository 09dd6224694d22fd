//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each and exits non-zero if any failed. Built with `harness = false`
//! so the lines show up in a plain `cargo test` run.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use fedfsl::config::ExperimentConfig;
use fedfsl::dataset::build_dataset;
use fedfsl::experiment::{run_experiment, train_seed, SeedRun};
use fedfsl_core::adversarial::{adv_loss, init_alt, stage1_update, stage2_update, stage_objective, AltInit, Stage, StageContext};
use fedfsl_core::data::{make_synthetic_blobs, partition, sample_batch, sample_episode, Dataset, Episode, EpisodeShape, LabelOrder, PartitionScheme};
use fedfsl_core::diffcore::{grad, kl_divergence, loss, softmax_probs, Batch, LossKind, Matrix, ModelSpec, ParamVector, TaskLoss};
use fedfsl_core::eval::{argmax, ci95_halfwidth};
use fedfsl_core::federation::{
    aggregate, k_exclusive, mi_loss, run_training, Algorithm, Federation, FederationConfig, LocalConfig, LocalObjective,
    Sequential,
};
use fedfsl_core::fsl::{local_fsl_loss, meta_gradient, meta_step, InnerLoopConfig, OuterLoopConfig};
use fedfsl_core::rng::{stream, Stream};
use rand::Rng as _;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// shared helpers

fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let h = 1e-5;
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let x0 = x[i];
            x[i] = x0 + h;
            let up = f(&x);
            x[i] = x0 - h;
            let down = f(&x);
            x[i] = x0;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / ‖b‖`.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-12)
}

fn bits(w: &ParamVector) -> Vec<u64> {
    w.values().iter().map(|v| v.to_bits()).collect()
}

/// Initialization plus noise on every coordinate. Zero-initialized biases
/// can leave a ReLU pre-activation exactly on its kink, where no finite
/// difference applies.
fn random_model(spec: &ModelSpec, seed: u64) -> ParamVector {
    let p = ParamVector::init(spec, &mut stream(seed, Stream::Init, &[]));
    let mut rng = stream(seed, Stream::Init, &[1]);
    let values = p.values().iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
    p.with_values(values)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn blob_dataset(classes: usize, per_class: usize, dim: usize, seed: u64) -> Dataset {
    let d = make_synthetic_blobs(classes, per_class, dim, 1.0, seed).unwrap();
    let base: Vec<u32> = (0..classes as u32 * 2 / 3).collect();
    let novel: Vec<u32> = (classes as u32 * 2 / 3..classes as u32).collect();
    d.with_split(&base, &novel).unwrap()
}

// ---------------------------------------------------------------------------
// 1. gradient oracles

fn criterion_gradients() -> Outcome {
    let specs = [
        ModelSpec::new(4, &[6], 3, 3).with_task_loss(TaskLoss::CrossEntropy { l2: 0.01 }),
        ModelSpec::new(4, &[8, 6], 4, 3),
    ];
    let d = blob_dataset(9, 12, 4, 3);
    let shape = EpisodeShape::new(3, 1, 2);
    let inner = InnerLoopConfig::new(0.3);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut max_params = 0;
    let seeds = 50;
    for seed in 0..seeds {
        let spec = &specs[seed as usize % 2];
        let w = random_model(spec, seed);
        let w_ref = random_model(spec, seed + 100);
        let alt = random_model(spec, seed + 200).classifier().to_vec();
        let split = w.clone().with_alt(&alt).unwrap();
        max_params = max_params.max(split.len());
        let eps = sample_batch(&d, &d.base_pool(), 2, shape, &mut stream(seed, Stream::ClientEpisodes, &[])).unwrap();
        let mut note = |name, e: f64| {
            let slot = worst.entry(name).or_insert(0.0);
            *slot = slot.max(e);
        };

        let q = &eps[0].query;
        let fd = central_diff(|x| loss(spec, &w.with_values(x.to_vec()), q, LossKind::Task).unwrap(), w.values());
        note("task", rel_err(grad(spec, &w, q, LossKind::Task).unwrap().values(), &fd));

        let plain = LocalObjective::new(spec, inner);
        let with_mi = LocalObjective {
            reference: Some((&w_ref, 1.0)),
            ..plain
        };
        let (v0, g0) = plain.value_grad(&w, &eps).unwrap();
        let (v1, g1) = with_mi.value_grad(&w, &eps).unwrap();
        let mi = mi_loss(spec, &w_ref, &w, &eps).unwrap();
        let g_mi: Vec<f64> = g1.values().iter().zip(g0.values()).map(|(a, b)| a - b).collect();
        let fd = central_diff(|x| mi_loss(spec, &w_ref, &w.with_values(x.to_vec()), &eps).unwrap(), w.values());
        note("mi", rel_err(&g_mi, &fd).max((v1 - v0 - mi).abs()));

        let ctx = StageContext::new(inner, OuterLoopConfig::new(0.1));
        let (a0, ga0) = stage_objective(spec, &split, &eps, Stage::Classifiers, 0.0, &ctx).unwrap();
        let (a1, ga1) = stage_objective(spec, &split, &eps, Stage::Classifiers, 1.0, &ctx).unwrap();
        let adv = adv_loss(spec, &split, &eps).unwrap();
        let g_adv: Vec<f64> = ga0.values().iter().zip(ga1.values()).map(|(a, b)| a - b).collect();
        let fd = central_diff(|x| adv_loss(spec, &split.with_values(x.to_vec()), &eps).unwrap(), split.values());
        note("adversarial", rel_err(&g_adv, &fd).max((a0 - a1 - adv).abs()));

        let ctx = StageContext {
            reference: Some((&w_ref, 0.2)),
            ..ctx
        };
        for (stage, weight, name) in [(Stage::Classifiers, 0.1, "stage1"), (Stage::Generator, 0.1, "stage2")] {
            let (_, g) = stage_objective(spec, &split, &eps, stage, weight, &ctx).unwrap();
            let fd = central_diff(
                |x| stage_objective(spec, &split.with_values(x.to_vec()), &eps, stage, weight, &ctx).unwrap().0,
                split.values(),
            );
            note(name, rel_err(g.values(), &fd));
        }

        let g = meta_gradient(spec, &w, &eps, &inner).unwrap();
        let fd = central_diff(|x| local_fsl_loss(spec, &w.with_values(x.to_vec()), &eps, &inner).unwrap(), w.values());
        note("meta", rel_err(g.values(), &fd));
    }
    let max = worst.values().cloned().fold(0.0, f64::max);
    let detail = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", ");
    check(
        max < 1e-4 && max_params <= 200,
        format!("{seeds} seeds, <= {max_params} params, worst relative error: {detail}"),
    )
}

// ---------------------------------------------------------------------------
// 2. algebraic reductions

fn small_federation(clients: usize, algorithm: Algorithm) -> FederationConfig {
    FederationConfig {
        clients,
        rounds: 3,
        algorithm,
        local: LocalConfig {
            shape: EpisodeShape::new(3, 1, 2),
            episodes_per_round: 3,
            local_epochs: 2,
            inner: InnerLoopConfig::new(0.2),
            outer: OuterLoopConfig::new(0.05),
            ..LocalConfig::default()
        },
        ..FederationConfig::default()
    }
}

fn criterion_reductions() -> Outcome {
    let spec = ModelSpec::new(4, &[6], 3, 3);
    let d = blob_dataset(12, 20, 4, 7);
    let mut failures = Vec::new();
    for seed in 0..5 {
        let plan = partition(&d, 3, PartitionScheme::Dirichlet { concentration: 1.0 }, seed).unwrap();
        let naive = run_training(&spec, &d, &plan, small_federation(3, Algorithm::Naive), seed).unwrap();
        let mi = run_training(
            &spec,
            &d,
            &plan,
            FederationConfig {
                gamma: 0.0,
                ..small_federation(3, Algorithm::Mi)
            },
            seed,
        )
        .unwrap();
        let prox = run_training(
            &spec,
            &d,
            &plan,
            FederationConfig {
                mu_prox: 0.0,
                ..small_federation(3, Algorithm::Prox)
            },
            seed,
        )
        .unwrap();
        let same = |a: &(fedfsl_core::federation::FederationState, Vec<_>)| {
            bits(&a.0.global) == bits(&naive.0.global)
                && a.0.clients.iter().zip(&naive.0.clients).all(|(x, y)| bits(x) == bits(y))
                && a.1 == naive.1
        };
        if !same(&mi) {
            failures.push(format!("seed {seed}: gamma = 0 differs from naive"));
        }
        if !same(&prox) {
            failures.push(format!("seed {seed}: mu = 0 differs from naive"));
        }

        // one client against plain meta-training on the same episode streams
        let plan1 = partition(&d, 1, PartitionScheme::Iid, seed).unwrap();
        let cfg = small_federation(1, Algorithm::Naive);
        let (state, _) = run_training(&spec, &d, &plan1, cfg.clone(), seed).unwrap();
        let fed = Federation::new(&spec, &d, &plan1, cfg.clone(), seed).unwrap();
        let mut w = fed.init_state().global;
        let shard = plan1.shard(&d, 0);
        for round in 0..cfg.rounds as u64 {
            for epoch in 0..cfg.local.local_epochs as u64 {
                let mut rng = stream(seed, Stream::ClientEpisodes, &[0, round, epoch]);
                let eps = sample_batch(&d, &shard, cfg.local.episodes_per_round, cfg.local.shape, &mut rng).unwrap();
                for ep in &eps {
                    w = meta_step(&spec, &w, std::slice::from_ref(ep), &cfg.local.inner, &cfg.local.outer).unwrap();
                }
            }
        }
        if bits(&state.global) != bits(&w) {
            failures.push(format!("seed {seed}: one client differs from centralized meta-training"));
        }

        // k-exclusive against the explicit sublist
        let mut rng = stream(seed, Stream::Init, &[9]);
        let k_total = 2 + seed as usize;
        let models: Vec<ParamVector> = (0..k_total).map(|i| ParamVector::init(&spec, &mut stream(seed, Stream::Init, &[i as u64]))).collect();
        let weights: Vec<f64> = (0..k_total).map(|_| rng.random_range(0.5..5.0)).collect();
        let refs: Vec<&ParamVector> = models.iter().collect();
        for k in 0..k_total {
            let sub: Vec<(&ParamVector, f64)> = (0..k_total).filter(|&i| i != k).map(|i| (&models[i], weights[i])).collect();
            if bits(&k_exclusive(&refs, &weights, k).unwrap()) != bits(&aggregate(&sub).unwrap()) {
                failures.push(format!("seed {seed}: k-exclusive {k} differs from the sublist aggregate"));
            }
        }
    }
    check(failures.is_empty(), if failures.is_empty() { "5 seeds, all four reductions bitwise".into() } else { failures.join("; ") })
}

// ---------------------------------------------------------------------------
// 3. convex convergence

/// Multinomial logistic regression written out independently of the crate:
/// `W` row-major `[class][dim]` followed by the biases.
struct Logistic<'a> {
    x: &'a Matrix,
    y: &'a [usize],
    classes: usize,
    l2: f64,
}

impl Logistic<'_> {
    fn value_grad(&self, w: &[f64]) -> (f64, Vec<f64>) {
        let (n, dim, c) = (self.x.rows(), self.x.cols(), self.classes);
        let mut g = vec![0.0; w.len()];
        let mut value = 0.0;
        for i in 0..n {
            let xi = self.x.row(i);
            let z: Vec<f64> = (0..c).map(|k| w[c * dim + k] + (0..dim).map(|j| w[k * dim + j] * xi[j]).sum::<f64>()).collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            value += lse - z[self.y[i]];
            for k in 0..c {
                let r = ((z[k] - lse).exp() - if k == self.y[i] { 1.0 } else { 0.0 }) / n as f64;
                for j in 0..dim {
                    g[k * dim + j] += r * xi[j];
                }
                g[c * dim + k] += r;
            }
        }
        value /= n as f64;
        value += 0.5 * self.l2 * w.iter().map(|v| v * v).sum::<f64>();
        for (gi, wi) in g.iter_mut().zip(w) {
            *gi += self.l2 * wi;
        }
        (value, g)
    }

    /// Full-batch gradient descent to a tight gradient norm.
    fn minimum(&self) -> (f64, f64) {
        let dim = self.x.cols();
        let lip = 0.5 * self.x.iter_rows().map(|r| 1.0 + r.iter().map(|v| v * v).sum::<f64>()).fold(0.0, f64::max) + self.l2;
        let mut w = vec![0.0; self.classes * (dim + 1)];
        let mut gnorm = f64::INFINITY;
        for _ in 0..200_000 {
            let (_, g) = self.value_grad(&w);
            gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if gnorm < 1e-10 {
                break;
            }
            for (wi, gi) in w.iter_mut().zip(&g) {
                *wi -= gi / lip;
            }
        }
        (self.value_grad(&w).0, gnorm)
    }
}

fn criterion_convex() -> Outcome {
    let classes = 5;
    let l2 = 0.01;
    let raw = make_synthetic_blobs(classes, 60, 4, 1.0, 21).unwrap();
    let all: Vec<u32> = (0..classes as u32).collect();
    let d = raw.with_split(&all, &[]).unwrap();
    let spec = ModelSpec::logistic(4, classes).with_task_loss(TaskLoss::CrossEntropy { l2 });
    let labels: Vec<usize> = d.classes().iter().map(|&c| c as usize).collect();
    let pooled = Logistic {
        x: d.inputs(),
        y: &labels,
        classes,
        l2,
    };
    let (optimum, gnorm) = pooled.minimum();
    // the crate's task loss agrees with the oracle on the pooled batch
    let batch = Batch::new(d.inputs().clone(), labels.clone(), classes).unwrap();

    let cfg = FederationConfig {
        clients: 3,
        rounds: 200,
        algorithm: Algorithm::Naive,
        lr_decay: CONVEX_LR_DECAY,
        local: LocalConfig {
            shape: EpisodeShape::new(classes, 5, 10).with_label_order(LabelOrder::Sorted),
            episodes_per_round: 4,
            inner: InnerLoopConfig::new(0.01),
            outer: OuterLoopConfig::new(CONVEX_BETA),
            ..LocalConfig::default()
        },
        ..FederationConfig::default()
    };
    let plan = partition(&d, 3, PartitionScheme::Iid, 0).unwrap();
    let fed = Federation::new(&spec, &d, &plan, cfg, 0).map_err(|e| e.to_string())?;
    let mut curve = Vec::new();
    let mut agree = 0.0f64;
    fed.run_training(&Sequential, |_, state| {
        let v = pooled.value_grad(state.global.model()).0;
        agree = agree.max((v - loss(&spec, &state.global, &batch, LossKind::Task)?).abs());
        curve.push(v);
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    let last = *curve.last().unwrap();
    let gap = (last - optimum) / optimum;
    let violations = curve[10..].windows(2).filter(|w| w[1] > w[0]).count();
    check(
        gap <= 0.05 && gap >= -1e-9 && violations <= 3 && agree < 1e-9 && gnorm < 1e-8,
        format!(
            "final pooled loss {last:.5} vs optimum {optimum:.5} (gap {:.2}%), {violations} increases after round 10",
            100.0 * gap
        ),
    )
}

/// Outer step `β / (1 + t)`: the harmonic schedule under which SGD on a
/// strongly convex loss settles at the `O(1/T)` rate.
const CONVEX_BETA: f64 = 1.5;
const CONVEX_LR_DECAY: f64 = 1.0;

// ---------------------------------------------------------------------------
// 4-7. desk-scale experiments

/// The blob task shared by the ordering, device-count and reference
/// experiments.
const BLOB_TASK: &str = "
[data]
n_classes = 30
per_class = 100
input_dim = 16
partition = dirichlet
concentration = 1

[model]
hidden = 32
feature_dim = 8

[federation]
clients = 5
rounds = 100
gamma = 1
local_epochs = 1
episodes_per_round = 20

[fsl]
n_way = 5
p_shot = 1
q_query = 5
alpha = 0.5
beta = 0.05
clip_norm = 20

[adversarial]
stage2_steps = 5

[eval]
eval_every = 1000
eval_episodes = 600
eval_alpha = 0.5

[run]
seeds = 0-4
";

fn config(text: &str, flags: &[&str]) -> ExperimentConfig {
    let mut raw = ExperimentConfig::parse_str(text).unwrap().raw().clone();
    raw.apply_flags(flags).unwrap();
    ExperimentConfig::from_raw(raw).unwrap()
}

fn train_all(cfg: &ExperimentConfig) -> Result<Vec<SeedRun>, String> {
    let dataset = build_dataset(&cfg.data, cfg.federation.local.shape.n_way).map_err(|e| e.to_string())?;
    cfg.run
        .seeds
        .iter()
        .map(|&s| train_seed(cfg, &dataset, s, &Sequential, |_, _| Ok(())).map_err(|e| format!("{e:#}")))
        .collect()
}

struct Summary {
    accs: Vec<f64>,
}

impl Summary {
    fn mean(&self) -> f64 {
        mean(&self.accs)
    }
    fn ci95(&self) -> f64 {
        ci95_halfwidth(&self.accs)
    }
}

fn accuracy(text: &str, flags: &[&str]) -> Result<Summary, String> {
    let runs = train_all(&config(text, flags))?;
    let accs = runs.iter().map(|r| r.final_accuracy().ok_or("no final evaluation")).collect::<Result<Vec<_>, _>>()?;
    Ok(Summary { accs })
}

const ORDER: [&str; 4] = ["mi_adv", "mi", "naive", "local"];

fn ordering(text: &str, extra: &[&str]) -> Result<Vec<Summary>, String> {
    ORDER
        .iter()
        .map(|alg| {
            let mut flags = vec!["--algorithm", alg];
            flags.extend_from_slice(extra);
            accuracy(text, &flags)
        })
        .collect()
}

fn pct(s: &Summary) -> String {
    format!("{:.2}±{:.2}", 100.0 * s.mean(), 100.0 * s.ci95())
}

fn criterion_ordering() -> Outcome {
    let r = ordering(BLOB_TASK, &[])?;
    let sorted = r.windows(2).all(|w| w[0].mean() >= w[1].mean());
    let margin = r[0].mean() - r[2].mean();
    let detail = ORDER.iter().zip(&r).map(|(a, s)| format!("{a} {}", pct(s))).collect::<Vec<_>>().join(", ");
    check(sorted && margin >= 0.02, format!("{detail}; mi_adv - naive {:.2} points", 100.0 * margin))
}

fn criterion_digits() -> Outcome {
    let digits = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/digits.txt");
    let text = format!("{DIGITS_TASK}\npath = {}\n", digits.display());
    let mut seeds = Vec::new();
    for alg in ["mi_adv", "mi"] {
        let runs = train_all(&config(&text, &["--algorithm", alg]))?;
        seeds.push(runs);
    }
    let acc = |runs: &[SeedRun]| mean(&runs.iter().map(|r| r.final_accuracy().unwrap()).collect::<Vec<_>>());
    let ratio = |runs: &[SeedRun]| mean(&runs.iter().map(|r| r.features.as_ref().unwrap().separation_ratio()).collect::<Vec<_>>());
    let (a_adv, a_mi) = (acc(&seeds[0]), acc(&seeds[1]));
    let (r_adv, r_mi) = (ratio(&seeds[0]), ratio(&seeds[1]));
    check(
        a_adv > a_mi && r_adv > r_mi,
        format!(
            "accuracy mi_adv {:.2}% vs mi {:.2}%, separation ratio {r_adv:.3} vs {r_mi:.3}",
            100.0 * a_adv,
            100.0 * a_mi
        ),
    )
}

/// Digits with the data section left open for the fixture path.
const DIGITS_TASK: &str = "
[model]
hidden = 128
feature_dim = 2

[federation]
clients = 2
rounds = 100

[fsl]
q_query = 5
alpha = 0.5
beta = 0.02

[eval]
eval_every = 1000
eval_episodes = 600
eval_alpha = 0.5

[run]
seeds = 0-19
dump_features = true

[data]
dataset = file
scale = 0.0625
base_classes = 0-4
novel_classes = 5-9
partition = iid
";

fn criterion_devices() -> Outcome {
    let mut by_k = Vec::new();
    for k in ["2", "5", "10"] {
        by_k.push(ordering(BLOB_TASK, &["--clients", k])?);
    }
    let mut problems = Vec::new();
    for (i, alg) in ORDER.iter().enumerate() {
        let (two, ten) = (&by_k[0][i], &by_k[2][i]);
        let noise = (two.ci95().powi(2) + ten.ci95().powi(2)).sqrt();
        if ten.mean() > two.mean() + noise {
            problems.push(format!("{alg} gains {:.2} points from K=2 to K=10", 100.0 * (ten.mean() - two.mean())));
        }
    }
    for (k, r) in ["2", "5", "10"].iter().zip(&by_k) {
        if r[1..].iter().any(|s| s.mean() > r[0].mean()) {
            problems.push(format!("mi_adv not best at K={k}"));
        }
    }
    let table = ["2", "5", "10"]
        .iter()
        .zip(&by_k)
        .map(|(k, r)| format!("K={k}: {}", ORDER.iter().zip(r).map(|(a, s)| format!("{a} {}", pct(s))).collect::<Vec<_>>().join(" ")))
        .collect::<Vec<_>>()
        .join(" | ");
    let ok = problems.is_empty();
    problems.push(table);
    check(ok, problems.join("; "))
}

fn criterion_reference() -> Outcome {
    let global = accuracy(BLOB_TASK, &["--algorithm", "mi", "--mi_reference", "global"])?;
    let excl = accuracy(BLOB_TASK, &["--algorithm", "mi", "--mi_reference", "k_exclusive"])?;
    let diff = (global.mean() - excl.mean()).abs();
    check(
        diff < 0.03,
        format!("global {} vs k_exclusive {}, difference {:.2} points", pct(&global), pct(&excl), 100.0 * diff),
    )
}

// ---------------------------------------------------------------------------
// 8. determinism and invariants

fn criterion_invariants() -> Outcome {
    let mut failures = Vec::new();
    let d = blob_dataset(15, 20, 5, 2);

    // episode counting
    for seed in 0..50u64 {
        let shape = EpisodeShape::new(2 + seed as usize % 4, 1 + seed as usize % 3, 1 + seed as usize % 5);
        let pool = d.base_pool();
        let ep = sample_episode(&d, &pool, shape, &mut stream(seed, Stream::ClientEpisodes, &[])).unwrap();
        let mut classes = ep.class_map.clone();
        classes.sort_unstable();
        classes.dedup();
        let mut used: Vec<usize> = ep.support_indices.iter().chain(&ep.query_indices).cloned().collect();
        used.sort_unstable();
        used.dedup();
        let counts_ok = |b: &Batch, per: usize, idx: &[usize]| {
            (0..shape.n_way).all(|l| b.labels.iter().filter(|&&x| x == l).count() == per)
                && b.labels.iter().zip(idx).all(|(&l, &i)| d.class_of(i) == ep.class_map[l] && d.is_base(d.class_of(i)))
        };
        if ep.support.len() != shape.n_way * shape.p_shot
            || ep.query.len() != shape.n_way * shape.q_query
            || classes.len() != shape.n_way
            || used.len() != shape.instances()
            || !counts_ok(&ep.support, shape.p_shot, &ep.support_indices)
            || !counts_ok(&ep.query, shape.q_query, &ep.query_indices)
        {
            failures.push(format!("episode {seed} miscounted"));
        }
    }

    // partition conservation
    for (k, scheme) in [(1, PartitionScheme::Iid), (4, PartitionScheme::Iid), (3, PartitionScheme::Dirichlet { concentration: 0.3 }), (7, PartitionScheme::Dirichlet { concentration: 1.0 })] {
        let plan = partition(&d, k, scheme, 5).unwrap();
        let mut seen: Vec<usize> = (0..k).flat_map(|c| plan.client_indices(c)).collect();
        seen.sort_unstable();
        let novel_free = d.novel_indices().iter().all(|&i| plan.assignment(i).is_none());
        if seen != d.base_indices() || !novel_free || plan.client_sizes().iter().sum::<usize>() != d.base_indices().len() {
            failures.push(format!("partition {scheme:?} over {k} clients loses or duplicates samples"));
        }
    }

    // KL non-negativity, softmax normalization, argmax invariance
    let mut rng = stream(1, Stream::Init, &[77]);
    for _ in 0..200 {
        let scale = 10f64.powi(rng.random_range(-2..4));
        let a = Matrix::from_vec(3, 5, (0..15).map(|_| scale * rng.random_range(-1.0..1.0)).collect());
        let b = Matrix::from_vec(3, 5, (0..15).map(|_| scale * rng.random_range(-1.0..1.0)).collect());
        let (p, q) = (softmax_probs(&a), softmax_probs(&b));
        if p.iter_rows().any(|r| (r.iter().sum::<f64>() - 1.0).abs() > 1e-12 || r.iter().any(|&v| !(0.0..=1.0).contains(&v))) {
            failures.push("softmax row off the simplex".into());
        }
        if kl_divergence(&p, &q) < 0.0 || kl_divergence(&p, &p).abs() > 1e-12 {
            failures.push("KL negative or non-zero on itself".into());
        }
        for (row, prob) in a.iter_rows().zip(p.iter_rows()) {
            let shifted: Vec<f64> = row.iter().map(|v| 3.0 * v - 7.0).collect();
            if argmax(row) != argmax(prob) || argmax(row) != argmax(&shifted) {
                failures.push("argmax moved under a monotone transform".into());
            }
        }
    }

    // stage freeze guarantees
    let spec = ModelSpec::new(5, &[6], 3, 3);
    let eps: Vec<Episode> = sample_batch(&d, &d.base_pool(), 3, EpisodeShape::new(3, 1, 2), &mut stream(3, Stream::ClientEpisodes, &[])).unwrap();
    for seed in 0..10 {
        let w = ParamVector::init(&spec, &mut stream(seed, Stream::Init, &[]));
        let split = w.clone().with_alt(&init_alt(&spec, &w, AltInit::Random, seed, 0, 0)).unwrap();
        let ctx = StageContext::new(InnerLoopConfig::new(0.2), OuterLoopConfig::new(0.1));
        let s1 = stage1_update(&spec, &split, &eps, 0.1, 3, &ctx).unwrap();
        let s2 = stage2_update(&spec, &split, &eps, 0.1, 3, &ctx).unwrap();
        let same = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        if !same(s1.generator(), split.generator())
            || !same(s2.classifier(), split.classifier())
            || !same(s2.classifier_alt(), split.classifier_alt())
            || same(s1.classifier(), split.classifier())
            || same(s2.generator(), split.generator())
        {
            failures.push(format!("stage freeze broken at seed {seed}"));
        }
    }

    // repeated seeded runs
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut files = 0;
    for alg in ["local", "naive", "prox", "mi", "mi_adv"] {
        let cfg = config(
            "[data]\nn_classes = 12\nper_class = 15\ninput_dim = 6\npartition = iid\n[model]\nhidden = 8\nfeature_dim = 4\n\
             [federation]\nclients = 3\nrounds = 3\n[fsl]\nq_query = 2\nalpha = 0.3\nbeta = 0.05\n\
             [eval]\neval_every = 2\neval_episodes = 30\neval_q_query = 2\n[run]\nseeds = 0-1\ndump_features = true\ncheckpoint_every = 1\n",
            &["--algorithm", alg, "--name", alg],
        );
        for root in [a.path(), b.path()] {
            run_experiment(&cfg, Some(root)).map_err(|e| format!("{e:#}"))?;
        }
    }
    for path in walk(a.path()) {
        if path.file_name().is_some_and(|n| n == "timings.csv") {
            continue;
        }
        let rel = path.strip_prefix(a.path()).unwrap();
        let other = b.path().join(rel);
        if std::fs::read(&path).ok() != std::fs::read(&other).ok() {
            failures.push(format!("{} differs between identical runs", rel.display()));
        }
        files += 1;
    }
    if files == 0 {
        failures.push("no artifacts written".into());
    }
    check(
        failures.is_empty(),
        if failures.is_empty() {
            format!("invariant suites hold; {files} artifacts byte-identical across reruns")
        } else {
            failures.join("; ")
        },
    )
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(u32, &str, u64, fn() -> Outcome); 8] = [
        (1, "gradient oracles", 60, criterion_gradients),
        (2, "algebraic reductions", 60, criterion_reductions),
        (3, "convex convergence", 120, criterion_convex),
        (4, "blob ordering", 900, criterion_ordering),
        (5, "digits features", 600, criterion_digits),
        (6, "device count", 1800, criterion_devices),
        (7, "reference ablation", 900, criterion_reference),
        (8, "determinism and invariants", 120, criterion_invariants),
    ];
    // `cargo test -- <filter>` selects criteria by number or name
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (n, name, limit, run) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| f == &n.to_string() || name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        let over = took > Duration::from_secs(limit);
        let (status, detail) = match (&outcome, over) {
            (Ok(d), false) => ("PASS", d.clone()),
            (Ok(d), true) => ("FAIL", format!("{d}; over the {limit}s budget")),
            (Err(d), _) => ("FAIL", d.clone()),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!("criterion {n} {name}: {status} ({:.1}s) {detail}", took.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
