use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chanfuse::ingest::{load_dataset, pad_channels, popularity_order, DatasetPaths, LoadOptions, LoadReport};
use chanfuse::{Dataset, PersonalizedWeights, WeightVector};
use serde::{Deserialize, Serialize};

use crate::config::{read_json, DataConfig};
use crate::Invalid;

pub const MANIFEST: &str = "manifest.json";

/// File list of a dataset directory, relative to the directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub channels: Vec<PathBuf>,
    pub truth: PathBuf,
    #[serde(default)]
    pub history: Option<PathBuf>,
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
}

impl Manifest {
    /// Paths of `written` made relative to `dir`.
    pub fn relative_to(written: &DatasetPaths, dir: &Path) -> Self {
        let rel = |p: &Path| p.strip_prefix(dir).unwrap_or(p).to_path_buf();
        Manifest {
            channels: written.channels.iter().map(|p| rel(p)).collect(),
            truth: rel(&written.truth),
            history: written.history.as_deref().map(rel),
            embeddings: written.embeddings.as_deref().map(rel),
        }
    }
}

fn dataset_paths(cfg: &DataConfig) -> Result<DatasetPaths> {
    if let Some(dir) = &cfg.dir {
        let m: Manifest = read_json(&dir.join(MANIFEST))?;
        return Ok(DatasetPaths {
            channels: m.channels.iter().map(|p| dir.join(p)).collect(),
            truth: dir.join(m.truth),
            history: m.history.map(|p| dir.join(p)),
            embeddings: m.embeddings.map(|p| dir.join(p)),
        });
    }
    let truth = cfg
        .truth
        .clone()
        .ok_or_else(|| Invalid("no dataset: pass --data DIR or set data.channels and data.truth".into()))?;
    if cfg.channels.is_empty() {
        return Err(Invalid("data.channels is empty".into()).into());
    }
    Ok(DatasetPaths {
        channels: cfg.channels.clone(),
        truth,
        history: cfg.history.clone(),
        embeddings: cfg.embeddings.clone(),
    })
}

pub fn load(cfg: &DataConfig) -> Result<(Dataset, LoadReport)> {
    let paths = dataset_paths(cfg)?;
    let (ds, report) = load_dataset(&paths, LoadOptions { strict: cfg.strict })?;
    if report.dropped_truth_only + report.dropped_partial + report.dropped_no_truth > 0 {
        log::warn!(
            "dropped users: {} truth-only, {} missing from some channels, {} without relevant items",
            report.dropped_truth_only,
            report.dropped_partial,
            report.dropped_no_truth
        );
    }
    let ds = if cfg.pad {
        pad_channels(&ds, &popularity_order(&ds))?
    } else {
        ds
    };
    Ok((ds, report))
}

/// The weights file exchanged between commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsFile {
    pub weights: Vec<f64>,
    #[serde(default)]
    pub channel_names: Vec<String>,
    #[serde(default)]
    pub source: String,
}

impl WeightsFile {
    pub fn new(w: &WeightVector, ds: &Dataset, source: &str) -> Self {
        WeightsFile {
            weights: w.as_slice().to_vec(),
            channel_names: ds.channel_names(),
            source: source.to_string(),
        }
    }

    /// Validate against `ds`; the entries must already sum to one.
    pub fn to_weights(&self, ds: &Dataset) -> Result<WeightVector> {
        if self.weights.len() != ds.n_channels() {
            return Err(Invalid(format!(
                "weights file has {} entries for {} channels",
                self.weights.len(),
                ds.n_channels()
            ))
            .into());
        }
        if !self.channel_names.is_empty() && self.channel_names != ds.channel_names() {
            return Err(Invalid(format!(
                "weights are for channels {:?} but the dataset has {:?}",
                self.channel_names,
                ds.channel_names()
            ))
            .into());
        }
        Ok(WeightVector::new(self.weights.clone())?)
    }
}

pub fn read_weights(path: &Path, ds: &Dataset) -> Result<WeightVector> {
    let file: WeightsFile = read_json(path)?;
    file.to_weights(ds).with_context(|| format!("in {}", path.display()))
}

#[derive(Debug, Serialize, Deserialize)]
struct UserWeightsLine {
    user: String,
    weights: Vec<f64>,
}

pub fn read_personalized(path: &Path) -> Result<PersonalizedWeights> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut per_user = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: UserWeightsLine =
            serde_json::from_str(&line).map_err(|e| Invalid(format!("{}:{}: {e}", path.display(), i + 1)))?;
        let w = WeightVector::new(parsed.weights).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        per_user.insert(parsed.user, w);
    }
    Ok(PersonalizedWeights { per_user })
}

pub fn write_personalized(path: &Path, weights: &PersonalizedWeights) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for (user, w) in &weights.per_user {
        let line = UserWeightsLine {
            user: user.clone(),
            weights: w.as_slice().to_vec(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

/// RFC 4180 table with a header row.
pub fn write_table(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}
