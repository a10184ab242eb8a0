use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chanfuse::bayesopt::BoConfig;
use chanfuse::cem::CemConfig;
use chanfuse::policy::PgConfig;
use chanfuse::Metric;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::Invalid;

pub const THREADS_ENV: &str = "FUSE_THREADS";

/// Where the dataset lives. Either `dir` (holding a `manifest.json` written by
/// `fuse synth`) or explicit file paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dir: Option<PathBuf>,
    pub channels: Vec<PathBuf>,
    pub truth: Option<PathBuf>,
    pub history: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    /// Reject channels that disagree on the user set.
    pub strict: bool,
    /// Pad short lists with items in training popularity order.
    pub pad: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            channels: Vec::new(),
            truth: None,
            history: None,
            embeddings: None,
            strict: false,
            pad: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    /// Merge budget L.
    pub l: usize,
    pub metric: Metric,
    /// `(w_min, w_max)` applied to CEM samples.
    pub bounds: Option<(f64, f64)>,
    /// Master seed, copied into every optimizer section.
    pub seed: u64,
    pub out: PathBuf,
    pub threads: Option<usize>,
    /// User split fractions: `[train, eval]` or `[train, select, eval]`.
    /// Absent means every user is used for everything.
    pub split: Option<Vec<f64>>,
    /// CEM checkpoint whose best parameters seed Bayesian refinement.
    pub start: Option<PathBuf>,
    /// Weights file used as the policy's global anchor.
    pub global: Option<PathBuf>,
    pub cem: Option<CemConfig>,
    pub bayes: Option<BoConfig>,
    pub pg: Option<PgConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            l: 50,
            metric: Metric::Recall,
            bounds: None,
            seed: 0,
            out: PathBuf::from("out"),
            threads: None,
            split: None,
            start: None,
            global: None,
            cem: None,
            bayes: None,
            pg: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Cem,
    Bayes,
    Pg,
}

impl Optimizer {
    pub fn name(self) -> &'static str {
        match self {
            Optimizer::Cem => "cem",
            Optimizer::Bayes => "bayes",
            Optimizer::Pg => "pg",
        }
    }
}

/// Flag values; `None` leaves the config or default in place.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub data: Option<PathBuf>,
    pub l: Option<usize>,
    pub metric: Option<Metric>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub split: Option<Vec<f64>>,
    pub start: Option<PathBuf>,
    pub global: Option<PathBuf>,
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| Invalid(format!("{}: {e}", path.display())).into())
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let mut cfg: RunConfig = read_json(p)?;
                cfg.resolve_paths(p.parent().unwrap_or(Path::new("")));
                Ok(cfg)
            }
            None => Ok(RunConfig::default()),
        }
    }

    /// Paths in a config file are relative to the file.
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let d = &mut self.data;
        d.dir.as_mut().map(fix);
        d.channels.iter_mut().for_each(fix);
        d.truth.as_mut().map(fix);
        d.history.as_mut().map(fix);
        d.embeddings.as_mut().map(fix);
        self.start.as_mut().map(fix);
        self.global.as_mut().map(fix);
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(d) = &o.data {
            self.data.dir = Some(d.clone());
            self.data.channels.clear();
            self.data.truth = None;
        }
        if let Some(l) = o.l {
            self.l = l;
        }
        if let Some(m) = o.metric {
            self.metric = m;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(t) = o.threads {
            self.threads = Some(t);
        }
        if let Some(s) = &o.split {
            self.split = Some(s.clone());
        }
        if let Some(s) = &o.start {
            self.start = Some(s.clone());
        }
        if let Some(g) = &o.global {
            self.global = Some(g.clone());
        }
    }

    /// Check the sections against the chosen optimizer and fill in defaults.
    /// The master seed and bounds are pushed into every section.
    pub fn resolve_for(&mut self, opt: Option<Optimizer>) -> Result<()> {
        if self.l == 0 {
            return Err(Invalid("L must be at least 1".into()).into());
        }
        if let Some(opt) = opt {
            let present = [
                (Optimizer::Cem, self.cem.is_some()),
                (Optimizer::Bayes, self.bayes.is_some()),
                (Optimizer::Pg, self.pg.is_some()),
            ];
            if let Some((other, _)) = present.iter().find(|(o, p)| *p && *o != opt) {
                return Err(Invalid(format!(
                    "config has a `{}` section but the command is `optimize {}`",
                    other.name(),
                    opt.name()
                ))
                .into());
            }
        }
        let mut cem = self.cem.take().unwrap_or_default();
        cem.seed = self.seed;
        if self.bounds.is_some() {
            cem.bounds = self.bounds;
        }
        let mut bayes = self.bayes.take().unwrap_or_default();
        bayes.seed = self.seed;
        let mut pg = self.pg.take().unwrap_or_default();
        pg.seed = self.seed;
        pg.metric = self.metric;
        self.cem = Some(cem);
        self.bayes = Some(bayes);
        self.pg = Some(pg);
        Ok(())
    }

    /// Flag, then config, then the environment.
    pub fn thread_count(&self) -> Result<Option<usize>> {
        if let Some(t) = self.threads {
            return Ok(Some(t));
        }
        match std::env::var(THREADS_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map(Some)
                .map_err(|_| Invalid(format!("{THREADS_ENV}=`{v}` is not a thread count")).into()),
            Err(_) => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_config_which_beats_defaults() {
        let mut cfg: RunConfig = serde_json::from_str(r#"{"l": 20, "seed": 4, "cem": {"samples": 30}}"#).unwrap();
        cfg.apply(&Overrides {
            l: Some(7),
            ..Default::default()
        });
        cfg.resolve_for(Some(Optimizer::Cem)).unwrap();
        assert_eq!(cfg.l, 7);
        assert_eq!(cfg.seed, 4);
        let cem = cfg.cem.unwrap();
        assert_eq!((cem.samples, cem.seed, cem.patience), (30, 4, 5));
        assert_eq!(cfg.metric, Metric::Recall);
    }

    #[test]
    fn foreign_sections_are_rejected() {
        let mut cfg: RunConfig = serde_json::from_str(r#"{"pg": {}}"#).unwrap();
        let err = cfg.resolve_for(Some(Optimizer::Cem)).unwrap_err();
        assert!(err.downcast_ref::<Invalid>().is_some());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"budget": 3}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"cem": {"sample": 3}}"#).is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut cfg: RunConfig = serde_json::from_str(r#"{"data": {"dir": "data"}, "global": "/abs/w.json"}"#).unwrap();
        cfg.resolve_paths(Path::new("runs"));
        assert_eq!(cfg.data.dir, Some(PathBuf::from("runs/data")));
        assert_eq!(cfg.global, Some(PathBuf::from("/abs/w.json")));
    }
}
