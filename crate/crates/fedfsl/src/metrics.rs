//! CSV artifacts: per-round metrics, evaluation details, feature dumps and
//! the cross-run summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fedfsl_core::eval::{ci95_halfwidth, EvalReport, FeatureDump};

pub const SCHEMA_LINE: &str = "#schema=1";
pub const METRICS_HEADER: &str = "run_id,seed,round,algorithm,train_loss,eval_accuracy,ci95,wall_time";
pub const SUMMARY_HEADER: &str = "algorithm,runs,mean_accuracy,ci95";

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("{path}: schema mismatch: {msg}")]
    Schema { path: PathBuf, msg: String },
    #[error("{path} line {line}: {msg}")]
    Row { path: PathBuf, line: usize, msg: String },
    #[error("{path}: no evaluated rounds")]
    NoEvaluation { path: PathBuf },
    #[error("no metrics files given")]
    NoFiles,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// One line of `metrics.csv`. `round` counts completed rounds (from 1).
/// Wall time is left empty here so the file is byte-identical across
/// reruns; timings go to a sidecar file.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub seed: u64,
    pub round: usize,
    pub algorithm: String,
    pub train_loss: f64,
    pub eval_accuracy: Option<f64>,
    pub ci95: Option<f64>,
    pub wall_time: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn format_metrics(rows: &[MetricsRow]) -> String {
    let mut out = format!("{SCHEMA_LINE}\n{METRICS_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.run_id,
            r.seed,
            r.round,
            r.algorithm,
            r.train_loss,
            opt(r.eval_accuracy),
            opt(r.ci95),
            opt(r.wall_time)
        )
        .unwrap();
    }
    out
}

pub fn parse_metrics(text: &str, path: &Path) -> Result<Vec<MetricsRow>, MetricsError> {
    let mut lines = text.lines();
    let schema = |msg: &str| MetricsError::Schema {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    if lines.next() != Some(SCHEMA_LINE) {
        return Err(schema("missing `#schema=1` line"));
    }
    if lines.next() != Some(METRICS_HEADER) {
        return Err(schema("unexpected header"));
    }
    let mut rows: Vec<MetricsRow> = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| MetricsError::Row {
            path: path.to_path_buf(),
            line: i + 3,
            msg,
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(bad(format!("{} fields, expected 8", f.len())));
        }
        let num = |s: &str| -> Result<Option<f64>, MetricsError> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(format!("bad number `{s}`")))
            }
        };
        let row = MetricsRow {
            run_id: f[0].to_string(),
            seed: f[1].parse().map_err(|_| bad(format!("bad seed `{}`", f[1])))?,
            round: f[2].parse().map_err(|_| bad(format!("bad round `{}`", f[2])))?,
            algorithm: f[3].to_string(),
            train_loss: num(f[4])?.ok_or_else(|| bad("missing train_loss".into()))?,
            eval_accuracy: num(f[5])?,
            ci95: num(f[6])?,
            wall_time: num(f[7])?,
        };
        if let Some(prev) = rows.last() {
            if row.run_id == prev.run_id && row.round <= prev.round {
                return Err(bad("rounds must increase within a run".into()));
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, MetricsError> {
    let text = std::fs::read_to_string(path).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_metrics(&text, path)
}

/// `round,wall_time` in seconds.
pub fn format_timings(times: &[f64]) -> String {
    let mut out = String::from("round,wall_time\n");
    for (i, t) in times.iter().enumerate() {
        writeln!(out, "{},{t:.6}", i + 1).unwrap();
    }
    out
}

/// `true_class,<pred_c ...>,queries,accuracy` over the pool classes.
pub fn format_confusion(r: &EvalReport) -> String {
    let mut out = String::from("true_class");
    for c in &r.classes {
        write!(out, ",pred_{c}").unwrap();
    }
    out.push_str(",queries,accuracy\n");
    for (i, c) in r.classes.iter().enumerate() {
        let row = &r.confusion[i];
        let n: u64 = row.iter().sum();
        write!(out, "{c}").unwrap();
        for v in row {
            write!(out, ",{v}").unwrap();
        }
        let acc = if n > 0 { (row[i] as f64 / n as f64).to_string() } else { String::new() };
        writeln!(out, ",{n},{acc}").unwrap();
    }
    out
}

pub fn format_episodes(r: &EvalReport) -> String {
    let mut out = String::from("episode,accuracy\n");
    for (i, a) in r.episode_accuracies.iter().enumerate() {
        writeln!(out, "{i},{a}").unwrap();
    }
    out
}

/// `class,f1,...,fD`.
pub fn format_features(d: &FeatureDump) -> String {
    let mut out = String::from("class");
    for j in 1..=d.feature_dim {
        write!(out, ",f{j}").unwrap();
    }
    out.push('\n');
    for (c, f) in &d.rows {
        write!(out, "{c}").unwrap();
        for v in f {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// `label,w1,...,wD,bias`: one line per output of the classifier.
pub fn format_classifier(d: &FeatureDump) -> String {
    let mut out = String::from("label");
    for j in 1..=d.feature_dim {
        write!(out, ",w{j}").unwrap();
    }
    out.push_str(",bias\n");
    let (w, b) = d.classifier.split_at(d.n_way * d.feature_dim);
    for k in 0..d.n_way {
        write!(out, "{k}").unwrap();
        for v in &w[k * d.feature_dim..(k + 1) * d.feature_dim] {
            write!(out, ",{v}").unwrap();
        }
        writeln!(out, ",{}", b[k]).unwrap();
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub algorithm: String,
    pub runs: usize,
    pub mean_accuracy: f64,
    /// `1.96 · sample stdev / √runs` of the final accuracies.
    pub ci95: f64,
}

/// Final-round accuracy of every run in every file, grouped by algorithm.
pub fn compare_runs(paths: &[PathBuf]) -> Result<Vec<SummaryRow>, MetricsError> {
    if paths.is_empty() {
        return Err(MetricsError::NoFiles);
    }
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for p in paths {
        let rows = read_metrics(p)?;
        let mut finals: BTreeMap<&str, &MetricsRow> = BTreeMap::new();
        for r in rows.iter().filter(|r| r.eval_accuracy.is_some()) {
            finals.insert(&r.run_id, r);
        }
        if finals.is_empty() {
            return Err(MetricsError::NoEvaluation { path: p.clone() });
        }
        for r in finals.values() {
            groups.entry(r.algorithm.clone()).or_default().push(r.eval_accuracy.unwrap());
        }
    }
    Ok(groups
        .into_iter()
        .map(|(algorithm, accs)| SummaryRow {
            runs: accs.len(),
            mean_accuracy: accs.iter().sum::<f64>() / accs.len() as f64,
            ci95: ci95_halfwidth(&accs),
            algorithm,
        })
        .collect())
}

pub fn format_summary(rows: &[SummaryRow]) -> String {
    let mut out = format!("{SCHEMA_LINE}\n{SUMMARY_HEADER}\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.algorithm, r.runs, r.mean_accuracy, r.ci95).unwrap();
    }
    out
}

/// Fixed-width table for terminals.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let mut out = format!("{:<10} {:>5} {:>10} {:>8}\n", "algorithm", "runs", "accuracy", "ci95");
    for r in rows {
        writeln!(out, "{:<10} {:>5} {:>9.2}% {:>7.2}%", r.algorithm, r.runs, 100.0 * r.mean_accuracy, 100.0 * r.ci95).unwrap();
    }
    out
}
