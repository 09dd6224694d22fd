//! Experiment configuration: a flat `key = value` file with `[section]`
//! headers, command-line overrides, and the resolved typed configuration.
//!
//! Precedence is flags over file over defaults. Every key has a unique bare
//! name, so a flag may be written `--gamma 0.5` or `--federation.gamma=0.5`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fedfsl_core::adversarial::{AdvConfig, AdvInnerScope, AltInit};
use fedfsl_core::data::{EpisodeShape, LabelOrder, PartitionScheme};
use fedfsl_core::diffcore::{MetaMode, ModelSpec, TaskLoss};
use fedfsl_core::eval::EvalConfig;
use fedfsl_core::federation::{Algorithm, FederationConfig, LocalConfig, MiReference};
use fedfsl_core::fsl::{InnerLoopConfig, OptimizerKind, OuterLoopConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{origin} line {line}: {msg}")]
    Syntax { origin: String, line: usize, msg: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("`{key}`: {msg}")]
    Invalid { key: String, msg: String },
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

type Result<T, E = ConfigError> = std::result::Result<T, E>;

/// `(section, key, default, description)`.
pub const KEYS: &[(&str, &str, &str, &str)] = &[
    ("data", "dataset", "blobs", "blobs | file"),
    ("data", "path", "", "labelled text file for dataset = file"),
    ("data", "scale", "1", "multiplier applied to every loaded input value"),
    ("data", "n_classes", "30", "blob classes"),
    ("data", "per_class", "40", "blob samples per class"),
    ("data", "input_dim", "16", "blob input dimension"),
    ("data", "spread", "1", "blob standard deviation around each mean"),
    ("data", "latent_dim", "0", "blob means in a random subspace of this dimension (0 = full)"),
    ("data", "mean_scale", "1", "standard deviation of blob means"),
    ("data", "data_seed", "0", "seed of the generated dataset, shared by all run seeds"),
    ("data", "base_classes", "auto", "class list such as 0-19,25; auto takes all but the novel classes"),
    ("data", "novel_classes", "auto", "class list; auto takes the last max(n_way, classes/3)"),
    ("data", "partition", "dirichlet", "iid | dirichlet"),
    ("data", "concentration", "1", "Dirichlet concentration"),
    ("model", "hidden", "32", "hidden widths of the feature generator, comma separated"),
    ("model", "feature_dim", "8", "generator output dimension"),
    ("model", "l2", "0", "weight decay inside the task loss"),
    ("model", "logistic", "false", "skip the generator: multinomial logistic regression"),
    ("federation", "algorithm", "mi_adv", "local | naive | prox | mi | mi_adv"),
    ("federation", "clients", "10", "client count K"),
    ("federation", "rounds", "100", "communication rounds T"),
    ("federation", "gamma", "0.2", "divergence weight"),
    ("federation", "mu_prox", "0.01", "proximal weight"),
    ("federation", "mi_reference", "global", "global | k_exclusive"),
    ("federation", "mi_at_adapted", "false", "evaluate the divergence at adapted parameters"),
    ("federation", "local_epochs", "1", "local passes per round"),
    ("federation", "episodes_per_round", "4", "episodes sampled per local pass"),
    ("federation", "meta_batch", "1", "episodes per outer step"),
    ("federation", "lr_decay", "0", "outer step size at round t is beta / (1 + lr_decay t)"),
    ("fsl", "n_way", "5", "classes per episode"),
    ("fsl", "p_shot", "1", "support samples per class"),
    ("fsl", "q_query", "15", "query samples per class during training"),
    ("fsl", "label_order", "drawn", "drawn | sorted"),
    ("fsl", "alpha", "0.01", "inner step size"),
    ("fsl", "inner_steps", "1", "inner steps"),
    ("fsl", "meta_mode", "exact", "exact | first_order"),
    ("fsl", "beta", "0.001", "outer step size"),
    ("fsl", "optimizer", "sgd", "sgd | adam"),
    ("fsl", "clip_norm", "0", "outer gradient norm cap (0 = none)"),
    ("adversarial", "eta", "0.1", "classifier-stage discrepancy weight"),
    ("adversarial", "lambda", "0.1", "generator-stage discrepancy weight"),
    ("adversarial", "stage1_steps", "0", "classifier-stage steps per pass (0 = one pass)"),
    ("adversarial", "stage2_steps", "0", "generator-stage steps per pass (0 = one pass)"),
    ("adversarial", "alt_init", "random", "random | perturbed_copy"),
    ("adversarial", "alt_scale", "0.01", "noise scale for perturbed_copy"),
    ("adversarial", "mi_in_adv_stages", "true", "keep the divergence term inside both stages"),
    ("adversarial", "inner_scope", "all", "all | active"),
    ("eval", "eval_every", "10", "evaluate every this many rounds and after the last (0 = never)"),
    ("eval", "eval_episodes", "600", "test episodes per evaluation"),
    ("eval", "eval_alpha", "0.01", "adaptation step size at test time"),
    ("eval", "eval_inner_steps", "1", "adaptation steps at test time"),
    ("eval", "eval_q_query", "15", "query samples per class at test time"),
    ("run", "seeds", "0", "seed list such as 0-4"),
    ("run", "output_dir", "runs", "relative paths resolve under $FEDFSL_OUTPUT_ROOT when set"),
    ("run", "name", "experiment", "run directory name"),
    ("run", "threads", "0", "client worker threads (0 = all cores)"),
    ("run", "dump_features", "false", "write generator features of the novel samples"),
    ("run", "checkpoint_every", "0", "also checkpoint every this many rounds (0 = final only)"),
];

pub const OUTPUT_ROOT_ENV: &str = "FEDFSL_OUTPUT_ROOT";

fn lookup(name: &str) -> Option<&'static (&'static str, &'static str, &'static str, &'static str)> {
    match name.split_once('.') {
        Some((s, k)) => KEYS.iter().find(|(sec, key, _, _)| *sec == s && *key == k),
        None => KEYS.iter().find(|(_, key, _, _)| *key == name),
    }
}

fn path_of(e: &(&str, &str, &str, &str)) -> String {
    format!("{}.{}", e.0, e.1)
}

/// Raw key/value layers before typing.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn defaults() -> Self {
        Self {
            values: KEYS.iter().map(|e| (path_of(e), e.2.to_string())).collect(),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let e = lookup(key).ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
        self.values.insert(path_of(e), value.trim().to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        lookup(key).and_then(|e| self.values.get(&path_of(e))).map(String::as_str)
    }

    /// Applies a config file's entries.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let syntax = |msg: &str| ConfigError::Syntax {
                origin: origin.to_string(),
                line: i + 1,
                msg: msg.to_string(),
            };
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| syntax("unterminated section header"))?.trim();
                if !KEYS.iter().any(|e| e.0 == name) {
                    return Err(syntax(&format!("unknown section `{name}`")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| syntax("expected `key = value`"))?;
            let k = k.trim();
            let full = match (&section, k.contains('.')) {
                (_, true) => k.to_string(),
                (Some(s), false) => format!("{s}.{k}"),
                (None, false) => return Err(syntax(&format!("key `{k}` outside a section"))),
            };
            if lookup(&full).is_none() {
                return Err(ConfigError::UnknownKey(full));
            }
            self.set(&full, v)?;
        }
        Ok(())
    }

    /// Applies `--key value` / `--key=value` pairs.
    pub fn apply_flags<S: AsRef<str>>(&mut self, args: &[S]) -> Result<()> {
        let mut it = args.iter().map(AsRef::as_ref);
        while let Some(a) = it.next() {
            let body = a.strip_prefix("--").ok_or_else(|| ConfigError::Invalid {
                key: a.to_string(),
                msg: "expected a `--key value` override".into(),
            })?;
            let (k, v) = match body.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => {
                    let v = it.next().ok_or_else(|| ConfigError::Invalid {
                        key: body.to_string(),
                        msg: "missing value".into(),
                    })?;
                    (body.to_string(), v.to_string())
                }
            };
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Canonical text: every key, in table order, under its section.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for e in KEYS {
            if e.0 != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = e.0;
                writeln!(out, "[{section}]").unwrap();
            }
            writeln!(out, "{} = {}", e.1, self.values[&path_of(e)]).unwrap();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Blobs,
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DatasetSource,
    pub scale: f64,
    pub n_classes: usize,
    pub per_class: usize,
    pub input_dim: usize,
    pub spread: f64,
    pub latent_dim: Option<usize>,
    pub mean_scale: f64,
    pub data_seed: u64,
    /// `None` is the automatic split.
    pub base_classes: Option<Vec<u32>>,
    pub novel_classes: Option<Vec<u32>>,
    pub partition: PartitionScheme,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub l2: f64,
    pub logistic: bool,
}

impl ModelConfig {
    pub fn spec(&self, input_dim: usize, n_way: usize) -> ModelSpec {
        let spec = if self.logistic {
            ModelSpec::logistic(input_dim, n_way)
        } else {
            ModelSpec::new(input_dim, &self.hidden, self.feature_dim, n_way)
        };
        spec.with_task_loss(TaskLoss::CrossEntropy { l2: self.l2 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub name: String,
    pub threads: usize,
    pub dump_features: bool,
    pub checkpoint_every: usize,
}

impl RunConfig {
    /// `output_dir/name`, with a relative `output_dir` placed under the
    /// output root when one is given.
    pub fn run_dir(&self, root: Option<&Path>) -> PathBuf {
        let base = match root {
            Some(r) if self.output_dir.is_relative() => r.join(&self.output_dir),
            _ => self.output_dir.clone(),
        };
        base.join(&self.name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub federation: FederationConfig,
    pub run: RunConfig,
    raw: RawConfig,
}

impl PartialEq for RawConfig {
    fn eq(&self, other: &Self) -> bool {
        self.values == other.values
    }
}

impl ExperimentConfig {
    /// Defaults, then `file` (if any), then `flags`.
    pub fn load<S: AsRef<str>>(file: Option<&Path>, flags: &[S]) -> Result<Self> {
        let mut raw = RawConfig::defaults();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            raw.apply_text(&text, &path.display().to_string())?;
        }
        raw.apply_flags(flags)?;
        Self::from_raw(raw)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut raw = RawConfig::defaults();
        raw.apply_text(text, "<config>")?;
        Self::from_raw(raw)
    }

    pub fn raw(&self) -> &RawConfig {
        &self.raw
    }

    pub fn to_text(&self) -> String {
        self.raw.to_text()
    }

    pub fn from_raw(raw: RawConfig) -> Result<Self> {
        let r = Reader { raw: &raw };
        let source = match r.str("dataset") {
            "blobs" => DatasetSource::Blobs,
            "file" => {
                let p = r.str("path");
                if p.is_empty() {
                    return Err(r.invalid("path", "required when dataset = file"));
                }
                DatasetSource::File(PathBuf::from(p))
            }
            other => return Err(r.invalid("dataset", &format!("expected blobs or file, got `{other}`"))),
        };
        let partition = match r.str("partition") {
            "iid" => PartitionScheme::Iid,
            "dirichlet" => PartitionScheme::Dirichlet {
                concentration: r.positive("concentration")?,
            },
            other => return Err(r.invalid("partition", &format!("expected iid or dirichlet, got `{other}`"))),
        };
        let latent = r.usize("latent_dim")?;
        let data = DataConfig {
            source,
            scale: r.finite("scale")?,
            n_classes: r.at_least("n_classes", 1)?,
            per_class: r.at_least("per_class", 1)?,
            input_dim: r.at_least("input_dim", 1)?,
            spread: r.non_negative("spread")?,
            latent_dim: (latent > 0).then_some(latent),
            mean_scale: r.non_negative("mean_scale")?,
            data_seed: r.u64("data_seed")?,
            base_classes: r.class_list("base_classes")?,
            novel_classes: r.class_list("novel_classes")?,
            partition,
        };
        let model = ModelConfig {
            hidden: r.usize_list("hidden")?,
            feature_dim: r.at_least("feature_dim", 1)?,
            l2: r.non_negative("l2")?,
            logistic: r.bool("logistic")?,
        };

        let n_way = r.at_least("n_way", 1)?;
        let p_shot = r.at_least("p_shot", 1)?;
        let label_order = match r.str("label_order") {
            "drawn" => LabelOrder::Drawn,
            "sorted" => LabelOrder::Sorted,
            other => return Err(r.invalid("label_order", &format!("expected drawn or sorted, got `{other}`"))),
        };
        let inner = InnerLoopConfig {
            alpha: r.non_negative("alpha")?,
            inner_steps: r.at_least("inner_steps", 1)?,
            meta_mode: match r.str("meta_mode") {
                "exact" => MetaMode::Exact,
                "first_order" => MetaMode::FirstOrder,
                other => return Err(r.invalid("meta_mode", &format!("expected exact or first_order, got `{other}`"))),
            },
        };
        inner.validate().map_err(|e| r.invalid("inner_steps", &e.to_string()))?;
        let clip = r.non_negative("clip_norm")?;
        let outer = OuterLoopConfig {
            beta: r.positive("beta")?,
            optimizer: match r.str("optimizer") {
                "sgd" => OptimizerKind::Sgd,
                "adam" => OptimizerKind::Adaptive,
                other => return Err(r.invalid("optimizer", &format!("expected sgd or adam, got `{other}`"))),
            },
            clip_norm: (clip > 0.0).then_some(clip),
        };
        let local = LocalConfig {
            shape: EpisodeShape::new(n_way, p_shot, r.at_least("q_query", 1)?).with_label_order(label_order),
            episodes_per_round: r.at_least("episodes_per_round", 1)?,
            meta_batch: r.at_least("meta_batch", 1)?,
            local_epochs: r.at_least("local_epochs", 1)?,
            inner,
            outer,
            mi_at_adapted: r.bool("mi_at_adapted")?,
        };
        let steps = |key: &str| r.usize(key).map(|s| (s > 0).then_some(s));
        let adv = AdvConfig {
            eta: r.non_negative("eta")?,
            lambda: r.non_negative("lambda")?,
            stage1_steps: steps("stage1_steps")?,
            stage2_steps: steps("stage2_steps")?,
            alt_init: match r.str("alt_init") {
                "random" => AltInit::Random,
                "perturbed_copy" => AltInit::PerturbedCopy {
                    scale: r.non_negative("alt_scale")?,
                },
                other => return Err(r.invalid("alt_init", &format!("expected random or perturbed_copy, got `{other}`"))),
            },
            mi_in_adv_stages: r.bool("mi_in_adv_stages")?,
            inner_scope: match r.str("inner_scope") {
                "active" => AdvInnerScope::ActiveSegment,
                "all" => AdvInnerScope::All,
                other => return Err(r.invalid("inner_scope", &format!("expected active or all, got `{other}`"))),
            },
        };
        let eval = EvalConfig {
            shape: EpisodeShape::new(n_way, p_shot, r.at_least("eval_q_query", 1)?),
            episodes: r.at_least("eval_episodes", 1)?,
            inner: InnerLoopConfig {
                alpha: r.non_negative("eval_alpha")?,
                inner_steps: r.at_least("eval_inner_steps", 1)?,
                meta_mode: MetaMode::FirstOrder,
            },
        };
        let algorithm = Algorithm::parse(r.str("algorithm")).ok_or_else(|| {
            r.invalid("algorithm", &format!("expected one of local, naive, prox, mi, mi_adv, got `{}`", r.str("algorithm")))
        })?;
        let mi_reference = MiReference::parse(r.str("mi_reference"))
            .ok_or_else(|| r.invalid("mi_reference", "expected global or k_exclusive"))?;
        let federation = FederationConfig {
            clients: r.at_least("clients", 1)?,
            rounds: r.usize("rounds")?,
            algorithm,
            gamma: r.non_negative("gamma")?,
            mu_prox: r.non_negative("mu_prox")?,
            mi_reference,
            local,
            lr_decay: r.non_negative("lr_decay")?,
            adv,
            eval,
            eval_every: r.usize("eval_every")?,
        };
        federation.validate().map_err(|e| r.invalid("federation", &e.to_string()))?;

        let seeds = r.u64_list("seeds")?;
        if seeds.is_empty() {
            return Err(r.invalid("seeds", "at least one seed required"));
        }
        let name = r.str("name");
        if name.is_empty() || name.contains(['/', '\\']) {
            return Err(r.invalid("name", "must be a non-empty single path component"));
        }
        let run = RunConfig {
            seeds,
            output_dir: PathBuf::from(r.str("output_dir")),
            name: name.to_string(),
            threads: r.usize("threads")?,
            dump_features: r.bool("dump_features")?,
            checkpoint_every: r.usize("checkpoint_every")?,
        };
        if let (Some(b), Some(n)) = (&data.base_classes, &data.novel_classes) {
            if let Some(c) = b.iter().find(|c| n.contains(c)) {
                return Err(r.invalid("novel_classes", &format!("class {c} is also a base class")));
            }
        }
        Ok(Self {
            data,
            model,
            federation,
            run,
            raw,
        })
    }
}

struct Reader<'a> {
    raw: &'a RawConfig,
}

impl Reader<'_> {
    fn str(&self, key: &str) -> &str {
        self.raw.get(key).expect("every key has a default")
    }

    fn invalid(&self, key: &str, msg: &str) -> ConfigError {
        ConfigError::Invalid {
            key: lookup(key).map(path_of).unwrap_or_else(|| key.to_string()),
            msg: msg.to_string(),
        }
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<T> {
        let v = self.str(key);
        v.parse().map_err(|_| self.invalid(key, &format!("expected {what}, got `{v}`")))
    }

    fn finite(&self, key: &str) -> Result<f64> {
        let v: f64 = self.parsed(key, "a number")?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.invalid(key, "must be finite"))
        }
    }

    fn non_negative(&self, key: &str) -> Result<f64> {
        let v = self.finite(key)?;
        if v >= 0.0 {
            Ok(v)
        } else {
            Err(self.invalid(key, &format!("must be non-negative, got {v}")))
        }
    }

    fn positive(&self, key: &str) -> Result<f64> {
        let v = self.finite(key)?;
        if v > 0.0 {
            Ok(v)
        } else {
            Err(self.invalid(key, &format!("must be positive, got {v}")))
        }
    }

    fn usize(&self, key: &str) -> Result<usize> {
        self.parsed(key, "a non-negative integer")
    }

    fn at_least(&self, key: &str, min: usize) -> Result<usize> {
        let v = self.usize(key)?;
        if v >= min {
            Ok(v)
        } else {
            Err(self.invalid(key, &format!("must be at least {min}")))
        }
    }

    fn u64(&self, key: &str) -> Result<u64> {
        self.parsed(key, "a non-negative integer")
    }

    fn bool(&self, key: &str) -> Result<bool> {
        self.parsed(key, "true or false")
    }

    fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        let v = self.str(key);
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| self.invalid(key, &format!("bad entry `{s}`"))))
            .collect()
    }

    fn u64_list(&self, key: &str) -> Result<Vec<u64>> {
        parse_ranges(self.str(key)).map_err(|m| self.invalid(key, &m))
    }

    fn class_list(&self, key: &str) -> Result<Option<Vec<u32>>> {
        let v = self.str(key);
        if v == "auto" {
            return Ok(None);
        }
        let list = parse_ranges(v).map_err(|m| self.invalid(key, &m))?;
        list.into_iter()
            .map(|c| u32::try_from(c).map_err(|_| self.invalid(key, "class id out of range")))
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }
}

/// `"0-3,7"` → `[0, 1, 2, 3, 7]`.
pub fn parse_ranges(s: &str) -> Result<Vec<u64>, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let bad = || format!("bad entry `{part}`");
        match part.split_once('-') {
            Some((a, b)) => {
                let a: u64 = a.trim().parse().map_err(|_| bad())?;
                let b: u64 = b.trim().parse().map_err(|_| bad())?;
                if b < a {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    Ok(out)
}
