//! Loading and building the datasets named by a configuration.

use std::io::BufRead;
use std::path::Path;

use anyhow::{bail, Context};
use fedfsl_core::data::{BlobSpec, Dataset};
use fedfsl_core::diffcore::Matrix;

use crate::config::{DataConfig, DatasetSource};

/// Reads `label,v1,...,vD` lines; `#` starts a comment, blank lines are
/// skipped. Every row must have the same width.
pub fn read_labeled_text(reader: impl BufRead, scale: f64) -> anyhow::Result<Dataset> {
    let mut values = Vec::new();
    let mut classes = Vec::new();
    let mut width = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let label = fields.next().unwrap();
        let label: u32 = label.parse().with_context(|| format!("line {}: bad label `{label}`", i + 1))?;
        let start = values.len();
        for f in fields {
            let v: f64 = f.parse().with_context(|| format!("line {}: bad value `{f}`", i + 1))?;
            values.push(v * scale);
        }
        let w = values.len() - start;
        match width {
            None if w == 0 => bail!("line {}: no feature values", i + 1),
            None => width = Some(w),
            Some(expected) if expected != w => bail!("line {}: {w} values, expected {expected}", i + 1),
            _ => {}
        }
        classes.push(label);
    }
    let Some(width) = width else { bail!("no samples") };
    Ok(Dataset::new(Matrix::from_vec(classes.len(), width, values), classes)?)
}

pub fn load_labeled_text(path: &Path, scale: f64) -> anyhow::Result<Dataset> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_labeled_text(std::io::BufReader::new(file), scale).with_context(|| format!("reading {}", path.display()))
}

/// The configured dataset with its base/novel split applied.
pub fn build_dataset(cfg: &DataConfig, n_way: usize) -> anyhow::Result<Dataset> {
    let d = match &cfg.source {
        DatasetSource::Blobs => {
            let mut spec = BlobSpec::new(cfg.n_classes, cfg.per_class, cfg.input_dim, cfg.spread, cfg.data_seed).mean_scale(cfg.mean_scale);
            if let Some(k) = cfg.latent_dim {
                spec = spec.latent_dim(k);
            }
            spec.build()?
        }
        DatasetSource::File(p) => load_labeled_text(p, cfg.scale)?,
    };
    let ids = d.class_ids();
    let (base, novel) = match (&cfg.base_classes, &cfg.novel_classes) {
        (Some(b), Some(n)) => (b.clone(), n.clone()),
        (Some(b), None) => (b.clone(), ids.iter().copied().filter(|c| !b.contains(c)).collect()),
        (None, Some(n)) => (ids.iter().copied().filter(|c| !n.contains(c)).collect(), n.clone()),
        (None, None) => {
            let novel = n_way.max(ids.len() / 3).min(ids.len());
            let split = ids.len() - novel;
            (ids[..split].to_vec(), ids[split..].to_vec())
        }
    };
    Ok(d.with_split(&base, &novel)?)
}
