//! Few-shot evaluation on novel classes and feature export.

use alloc::vec;
use alloc::vec::Vec;

use crate::data::{sample_episode, Dataset, EpisodeShape, Shard};
use crate::diffcore::{self, AdaptScope, Adaptation, MetaMode, ModelSpec, ParamVector};
use crate::fsl::InnerLoopConfig;
use crate::rng::{self, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub shape: EpisodeShape,
    pub episodes: usize,
    /// Adaptation used on each test support set. Multi-step adaptation is
    /// allowed here regardless of the meta-gradient mode.
    pub inner: InnerLoopConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            shape: EpisodeShape::new(5, 1, 15),
            episodes: 600,
            inner: InnerLoopConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mean_accuracy: f64,
    pub ci95_halfwidth: f64,
    /// Pool classes, ascending; indexes the rows/columns of `confusion`.
    pub classes: Vec<u32>,
    pub per_class_accuracy: Vec<(u32, f64)>,
    /// `confusion[true][predicted]` query counts over the pool classes.
    pub confusion: Vec<Vec<u64>>,
    pub episodes_evaluated: usize,
    pub episode_accuracies: Vec<f64>,
}

/// `1.96 · sample stdev / √n`.
pub fn ci95_halfwidth(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    1.96 * libm::sqrt(var) / libm::sqrt(n as f64)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Adapts each model on every test episode's support set and classifies its
/// query set. Accuracy and confusion are averaged over the models (one
/// model is the usual case; several is the per-client average of the
/// local-training baseline). Test episode `i` is drawn from its own stream,
/// so every model and every algorithm sees the same test tasks for a seed.
pub fn evaluate_models(
    spec: &ModelSpec,
    models: &[&ParamVector],
    dataset: &Dataset,
    pool: &Shard,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<EvalReport> {
    if cfg.episodes == 0 {
        return Err(Error::NoEpisodes);
    }
    if models.is_empty() {
        return Err(Error::NothingToAggregate);
    }
    spec.validate()?;
    for m in models {
        m.check_spec(spec)?;
    }
    cfg.shape.validate()?;
    if cfg.shape.n_way != spec.n_way {
        return Err(Error::Dimension {
            what: "evaluation n_way",
            expected: spec.n_way,
            got: cfg.shape.n_way,
        });
    }
    let classes: Vec<u32> = pool.classes().collect();
    let pos = |c: u32| classes.binary_search(&c).expect("episode class from pool");
    let mut confusion = vec![vec![0u64; classes.len()]; classes.len()];
    let mut episode_accuracies = Vec::with_capacity(cfg.episodes);
    let adaptation = Adaptation {
        alpha: cfg.inner.alpha,
        steps: cfg.inner.inner_steps,
        mode: MetaMode::FirstOrder,
        scope: AdaptScope::ALL,
    };

    for e in 0..cfg.episodes {
        let mut rng = rng::stream(seed, Stream::Evaluation, &[e as u64]);
        let ep = sample_episode(dataset, pool, cfg.shape, &mut rng)?;
        diffcore::check_inputs(spec, &ep.query.inputs)?;
        let mut correct = 0usize;
        for m in models {
            let adapted = diffcore::adapt_slice(spec, m.model(), &ep.support, &adaptation);
            let logits = diffcore::logits_of(spec, &adapted, &ep.query.inputs);
            for (row, &label) in logits.chunks_exact(spec.n_way).zip(&ep.query.labels) {
                let pred = argmax(row);
                correct += usize::from(pred == label);
                confusion[pos(ep.class_map[label])][pos(ep.class_map[pred])] += 1;
            }
        }
        episode_accuracies.push(correct as f64 / (ep.query.len() * models.len()) as f64);
    }

    let total: u64 = confusion.iter().flatten().sum();
    let trace: u64 = (0..classes.len()).map(|i| confusion[i][i]).sum();
    let per_class_accuracy = classes
        .iter()
        .enumerate()
        .filter_map(|(i, &c)| {
            let row: u64 = confusion[i].iter().sum();
            (row > 0).then(|| (c, confusion[i][i] as f64 / row as f64))
        })
        .collect();
    Ok(EvalReport {
        mean_accuracy: trace as f64 / total as f64,
        ci95_halfwidth: ci95_halfwidth(&episode_accuracies),
        classes,
        per_class_accuracy,
        confusion,
        episodes_evaluated: cfg.episodes,
        episode_accuracies,
    })
}

/// Few-shot accuracy of a single model on `pool`.
pub fn evaluate(spec: &ModelSpec, w: &ParamVector, dataset: &Dataset, pool: &Shard, cfg: &EvalConfig, seed: u64) -> Result<EvalReport> {
    evaluate_models(spec, &[w], dataset, pool, cfg, seed)
}

/// Generator outputs of selected samples plus the classifier parameters
/// needed to redraw its decision boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDump {
    pub feature_dim: usize,
    pub n_way: usize,
    pub rows: Vec<(u32, Vec<f64>)>,
    /// Classifier weights (`n_way × feature_dim`, row-major) then biases.
    pub classifier: Vec<f64>,
}

pub fn dump_features(spec: &ModelSpec, w: &ParamVector, dataset: &Dataset, indices: &[usize]) -> Result<FeatureDump> {
    let inputs = dataset.gather(indices);
    let feats = diffcore::features(spec, w, &inputs)?;
    Ok(FeatureDump {
        feature_dim: spec.feature_dim,
        n_way: spec.n_way,
        rows: indices
            .iter()
            .zip(feats.iter_rows())
            .map(|(&i, f)| (dataset.class_of(i), f.to_vec()))
            .collect(),
        classifier: w.classifier().to_vec(),
    })
}

impl FeatureDump {
    /// `(class, centroid)` in ascending class order.
    pub fn centroids(&self) -> Vec<(u32, Vec<f64>)> {
        let mut out: Vec<(u32, Vec<f64>, usize)> = Vec::new();
        for (c, f) in &self.rows {
            let slot = match out.binary_search_by_key(c, |(k, _, _)| *k) {
                Ok(i) => i,
                Err(i) => {
                    out.insert(i, (*c, vec![0.0; self.feature_dim], 0));
                    i
                }
            };
            for (acc, v) in out[slot].1.iter_mut().zip(f) {
                *acc += v;
            }
            out[slot].2 += 1;
        }
        out.into_iter()
            .map(|(c, sum, n)| (c, sum.into_iter().map(|s| s / n as f64).collect()))
            .collect()
    }

    /// Mean pairwise distance between class centroids divided by the mean
    /// distance of samples to their own centroid. Larger means classes are
    /// better separated relative to their spread.
    pub fn separation_ratio(&self) -> f64 {
        let cents = self.centroids();
        let dist = |a: &[f64], b: &[f64]| libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum());
        let mut inter = 0.0;
        let mut pairs = 0usize;
        for i in 0..cents.len() {
            for j in i + 1..cents.len() {
                inter += dist(&cents[i].1, &cents[j].1);
                pairs += 1;
            }
        }
        let intra: f64 = self
            .rows
            .iter()
            .map(|(c, f)| {
                let k = cents.binary_search_by_key(c, |(k, _)| *k).unwrap();
                dist(f, &cents[k].1)
            })
            .sum::<f64>()
            / self.rows.len().max(1) as f64;
        if pairs == 0 {
            return 0.0;
        }
        (inter / pairs as f64) / intra
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic_blobs;
    use crate::diffcore::Matrix;

    fn pool_dataset() -> Dataset {
        make_synthetic_blobs(8, 20, 8, 0.0, 3)
            .unwrap()
            .with_split(&[0, 1, 2], &[3, 4, 5, 6, 7])
            .unwrap()
    }

    fn small_cfg(episodes: usize) -> EvalConfig {
        EvalConfig {
            shape: EpisodeShape::new(5, 1, 3),
            episodes,
            inner: InnerLoopConfig::new(0.01),
        }
    }

    #[test]
    fn no_episodes_is_an_error() {
        let d = pool_dataset();
        let spec = ModelSpec::new(8, &[], 4, 5);
        let w = ParamVector::zeros(&spec);
        assert_eq!(evaluate(&spec, &w, &d, &d.novel_pool(), &small_cfg(0), 0), Err(Error::NoEpisodes));
    }

    #[test]
    fn one_hot_features_give_perfect_accuracy() {
        // inputs are one-hot class indicators; with the identity generator a
        // large-alpha adaptation step copies the support samples into the
        // classifier, so each query lands on its own class
        let classes: Vec<u32> = (0..10).flat_map(|c| core::iter::repeat_n(c, 5)).collect();
        let data: Vec<f64> = classes
            .iter()
            .flat_map(|&c| (0..10).map(move |j| if j == c as usize { 1.0 } else { 0.0 }))
            .collect();
        let d = Dataset::new(Matrix::from_vec(50, 10, data), classes)
            .unwrap()
            .with_split(&[0, 1, 2, 3, 4], &[5, 6, 7, 8, 9])
            .unwrap();
        let spec = ModelSpec::logistic(10, 5);
        let w = ParamVector::zeros(&spec);
        let cfg = EvalConfig {
            inner: InnerLoopConfig::new(10.0),
            ..small_cfg(20)
        };
        let r = evaluate(&spec, &w, &d, &d.novel_pool(), &cfg, 1).unwrap();
        assert_eq!(r.mean_accuracy, 1.0);
        assert_eq!(r.ci95_halfwidth, 0.0);
    }

    #[test]
    fn untrained_model_is_at_chance() {
        let d = make_synthetic_blobs(10, 40, 6, 1.0, 5)
            .unwrap()
            .with_split(&[0, 1, 2, 3, 4], &[5, 6, 7, 8, 9])
            .unwrap();
        let spec = ModelSpec::new(6, &[8], 4, 5);
        let w = ParamVector::init(&spec, &mut rng::stream(1, Stream::Init, &[]));
        let cfg = EvalConfig {
            shape: EpisodeShape::new(5, 1, 15),
            episodes: 600,
            inner: InnerLoopConfig::new(0.01),
        };
        let r = evaluate(&spec, &w, &d, &d.novel_pool(), &cfg, 2).unwrap();
        // episode labels are a random permutation, so an untrained model
        // scores 1/N in expectation; the bound uses the episode-level spread
        let se = r.ci95_halfwidth / 1.96;
        assert!((r.mean_accuracy - 0.2).abs() < 3.0 * se, "{} ± {}", r.mean_accuracy, se);
    }

    #[test]
    fn report_invariants() {
        let d = pool_dataset();
        let spec = ModelSpec::new(8, &[6], 3, 5);
        let w = ParamVector::init(&spec, &mut rng::stream(4, Stream::Init, &[]));
        let r = evaluate(&spec, &w, &d, &d.novel_pool(), &small_cfg(30), 9).unwrap();
        let total: u64 = r.confusion.iter().flatten().sum();
        assert_eq!(total, 30 * 15);
        let trace: u64 = (0..r.classes.len()).map(|i| r.confusion[i][i]).sum();
        assert!((r.mean_accuracy - trace as f64 / total as f64).abs() < 1e-12);
        let mean_ep = r.episode_accuracies.iter().sum::<f64>() / 30.0;
        assert!((mean_ep - r.mean_accuracy).abs() < 1e-12);
        assert!((ci95_halfwidth(&r.episode_accuracies) - r.ci95_halfwidth).abs() < 1e-9);
        // evaluation works on a copy
        let before = w.clone();
        let _ = evaluate(&spec, &w, &d, &d.novel_pool(), &small_cfg(3), 9).unwrap();
        assert_eq!(before, w);
    }

    #[test]
    fn accuracy_invariant_under_monotone_logit_transform() {
        // scaling the classifier by c > 0 scales logits; with alpha = 0 the
        // argmax is unchanged
        let d = pool_dataset();
        let spec = ModelSpec::new(8, &[6], 3, 5);
        let w = ParamVector::init(&spec, &mut rng::stream(5, Stream::Init, &[]));
        let cfg = EvalConfig {
            inner: InnerLoopConfig::new(0.0),
            ..small_cfg(20)
        };
        let a = evaluate(&spec, &w, &d, &d.novel_pool(), &cfg, 1).unwrap();
        let mut v = w.values().to_vec();
        v[spec.generator_len()..].iter_mut().for_each(|x| *x *= 3.7);
        let b = evaluate(&spec, &w.with_values(v), &d, &d.novel_pool(), &cfg, 1).unwrap();
        assert_eq!(a.confusion, b.confusion);
    }

    #[test]
    fn argmax_ties_take_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn features_from_identity_and_oracle() {
        let d = make_synthetic_blobs(3, 4, 2, 1.0, 1).unwrap();
        let spec = ModelSpec::new(2, &[], 2, 3);
        let mut values = vec![0.0; spec.param_count()];
        values[0] = 1.0;
        values[3] = 1.0;
        let w = ParamVector::from_values(&spec, values).unwrap();
        let idx: Vec<usize> = (0..d.len()).collect();
        let dump = dump_features(&spec, &w, &d, &idx).unwrap();
        for (i, (c, f)) in dump.rows.iter().enumerate() {
            assert_eq!(*c, d.class_of(i));
            assert_eq!(f.as_slice(), d.input(i));
        }
        assert_eq!(dump.classifier, w.classifier());

        let spec = ModelSpec::new(2, &[3], 2, 3);
        let w = ParamVector::init(&spec, &mut rng::stream(2, Stream::Init, &[]));
        let dump = dump_features(&spec, &w, &d, &idx).unwrap();
        let p = w.values();
        for (i, (_, f)) in dump.rows.iter().enumerate() {
            let x = d.input(i);
            let h: Vec<f64> = (0..3).map(|o| (p[6 + o] + p[o * 2] * x[0] + p[o * 2 + 1] * x[1]).max(0.0)).collect();
            for o in 0..2 {
                let expect = p[9 + 6 + o] + (0..3).map(|j| p[9 + o * 3 + j] * h[j]).sum::<f64>();
                assert!((f[o] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn separation_ratio_by_hand() {
        let dump = FeatureDump {
            feature_dim: 1,
            n_way: 2,
            rows: vec![(0, vec![-1.0]), (0, vec![1.0]), (1, vec![9.0]), (1, vec![11.0])],
            classifier: vec![],
        };
        // centroids 0 and 10, every sample 1 away from its centroid
        assert!((dump.separation_ratio() - 10.0).abs() < 1e-12);
    }
}
