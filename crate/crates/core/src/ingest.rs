//! Loading, validating and padding channel rankings.
//!
//! External ids are opaque UTF-8 strings. Inside a [`Dataset`] users and items
//! are dense indices into the sorted id tables `users` and `items`, so the hot
//! merge and metric loops work on integers only.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FuseError, Result};

pub type ItemId = u32;

/// One channel's ranked lists, indexed by the dataset's user index.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRanking {
    pub id: usize,
    pub name: String,
    pub lists: Vec<Vec<ItemId>>,
    /// Number of padded tail items per user.
    pub pad_flags: Vec<usize>,
}

impl ChannelRanking {
    pub fn new(id: usize, name: impl Into<String>, lists: Vec<Vec<ItemId>>) -> Self {
        let pad_flags = vec![0; lists.len()];
        ChannelRanking {
            id,
            name: name.into(),
            lists,
            pad_flags,
        }
    }

    pub fn list(&self, user: usize) -> &[ItemId] {
        &self.lists[user]
    }
}

/// Relevant items per user, each set stored sorted ascending.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub relevant: Vec<Vec<ItemId>>,
}

impl GroundTruth {
    pub fn new(mut relevant: Vec<Vec<ItemId>>) -> Self {
        for set in &mut relevant {
            set.sort_unstable();
            set.dedup();
        }
        GroundTruth { relevant }
    }

    #[inline]
    pub fn contains(&self, user: usize, item: ItemId) -> bool {
        self.relevant[user].binary_search(&item).is_ok()
    }

    pub fn set(&self, user: usize) -> &[ItemId] {
        &self.relevant[user]
    }

    /// Number of items of `list` that are relevant for `user`.
    pub fn hits(&self, user: usize, list: &[ItemId]) -> usize {
        list.iter().filter(|&&i| self.contains(user, i)).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub user_vecs: Vec<Option<Vec<f64>>>,
    pub item_vecs: Vec<Option<Vec<f64>>>,
}

/// Immutable, validated collection of channel rankings and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Sorted, unique user ids.
    pub users: Vec<String>,
    /// Sorted, unique item ids; its length is the item universe size M.
    pub items: Vec<String>,
    pub channels: Vec<ChannelRanking>,
    /// Evaluation targets.
    pub truth: GroundTruth,
    /// Optional training-split interactions, used for channel recall features
    /// and popularity padding. Falls back to `truth` when absent.
    pub history: Option<GroundTruth>,
    pub embeddings: Option<EmbeddingTable>,
}

impl Dataset {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn item_universe_size(&self) -> usize {
        self.items.len()
    }

    pub fn user_index(&self, id: &str) -> Option<usize> {
        self.users.binary_search_by(|u| u.as_str().cmp(id)).ok()
    }

    pub fn item_index(&self, id: &str) -> Option<ItemId> {
        self.items
            .binary_search_by(|i| i.as_str().cmp(id))
            .ok()
            .map(|i| i as ItemId)
    }

    pub fn channel_names(&self) -> Vec<String> {
        self.channels.iter().map(|c| c.name.clone()).collect()
    }

    /// Truth used for features and popularity: history if present.
    pub fn training_truth(&self) -> &GroundTruth {
        self.history.as_ref().unwrap_or(&self.truth)
    }

    /// Longest per-user list over all channels.
    pub fn max_depth(&self) -> usize {
        self.channels
            .iter()
            .flat_map(|c| c.lists.iter().map(Vec::len))
            .max()
            .unwrap_or(0)
    }

    pub fn all_users(&self) -> Vec<usize> {
        (0..self.n_users()).collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct DatasetPaths {
    pub channels: Vec<PathBuf>,
    pub truth: PathBuf,
    pub history: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Reject channels that do not cover the same user set.
    pub strict: bool,
}

/// What happened to users during loading.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LoadReport {
    pub users_kept: usize,
    /// Users in the truth file but in no channel file.
    pub dropped_truth_only: usize,
    /// Users present in some channels but not all.
    pub dropped_partial: usize,
    /// Users present in every channel but without relevant items.
    pub dropped_no_truth: usize,
    pub channel_users: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct ChannelLine {
    pub user: String,
    pub items: Vec<String>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub padded: usize,
}

fn is_zero(n: &usize) -> bool {
    *n == 0
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct TruthLine {
    pub user: String,
    pub relevant: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub(crate) enum EmbeddingKind {
    User,
    Item,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct EmbeddingLine {
    pub id: String,
    pub kind: EmbeddingKind,
    pub vec: Vec<f64>,
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = File::open(path).map_err(|source| FuseError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| FuseError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| FuseError::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push((n + 1, value));
    }
    Ok(out)
}

struct RawChannel {
    name: String,
    lists: HashMap<String, (Vec<String>, usize)>,
}

fn channel_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn parse_channel(path: &Path) -> Result<RawChannel> {
    let name = channel_name(path);
    let mut lists = HashMap::new();
    for (line, rec) in read_jsonl::<ChannelLine>(path)? {
        let mut seen = HashSet::with_capacity(rec.items.len());
        if let Some(dup) = rec.items.iter().find(|i| !seen.insert(i.as_str())) {
            return Err(FuseError::validation(format!(
                "channel `{name}`, user `{}`: duplicate item `{dup}` (line {line})",
                rec.user
            )));
        }
        if rec.padded > rec.items.len() {
            return Err(FuseError::validation(format!(
                "channel `{name}`, user `{}`: padded count exceeds list length",
                rec.user
            )));
        }
        if lists
            .insert(rec.user.clone(), (rec.items, rec.padded))
            .is_some()
        {
            return Err(FuseError::validation(format!(
                "channel `{name}`: user `{}` listed twice (line {line})",
                rec.user
            )));
        }
    }
    Ok(RawChannel { name, lists })
}

fn parse_truth(path: &Path) -> Result<HashMap<String, Vec<String>>> {
    let mut map: HashMap<String, Vec<String>> = HashMap::new();
    for (_, rec) in read_jsonl::<TruthLine>(path)? {
        map.entry(rec.user).or_default().extend(rec.relevant);
    }
    Ok(map)
}

struct RawEmbeddings {
    dim: usize,
    users: HashMap<String, Vec<f64>>,
    items: HashMap<String, Vec<f64>>,
}

fn parse_embeddings(path: &Path) -> Result<RawEmbeddings> {
    let mut dim = None;
    let mut users = HashMap::new();
    let mut items = HashMap::new();
    for (line, rec) in read_jsonl::<EmbeddingLine>(path)? {
        let d = *dim.get_or_insert(rec.vec.len());
        if rec.vec.len() != d || d == 0 {
            return Err(FuseError::validation(format!(
                "{}:{line}: embedding `{}` has dimension {}, expected {d}",
                path.display(),
                rec.id,
                rec.vec.len()
            )));
        }
        if rec.vec.iter().any(|v| !v.is_finite()) {
            return Err(FuseError::validation(format!(
                "{}:{line}: embedding `{}` has a non-finite entry",
                path.display(),
                rec.id
            )));
        }
        match rec.kind {
            EmbeddingKind::User => users.insert(rec.id, rec.vec),
            EmbeddingKind::Item => items.insert(rec.id, rec.vec),
        };
    }
    Ok(RawEmbeddings {
        dim: dim.unwrap_or(0),
        users,
        items,
    })
}

/// Load channel rankings, ground truth and optional history/embeddings.
///
/// Users kept are those covered by every channel and having at least one
/// relevant item. With `strict`, channels covering different user sets are
/// an error instead.
pub fn load_dataset(paths: &DatasetPaths, opts: LoadOptions) -> Result<(Dataset, LoadReport)> {
    if paths.channels.is_empty() {
        return Err(FuseError::validation("at least one channel file is required"));
    }
    let raw: Vec<RawChannel> = paths
        .channels
        .par_iter()
        .map(|p| parse_channel(p))
        .collect::<Result<_>>()?;
    let truth = parse_truth(&paths.truth)?;
    let history = paths.history.as_deref().map(parse_truth).transpose()?;
    let embeddings = paths.embeddings.as_deref().map(parse_embeddings).transpose()?;

    let mut names = HashSet::new();
    for c in &raw {
        if !names.insert(c.name.as_str()) {
            return Err(FuseError::validation(format!("duplicate channel name `{}`", c.name)));
        }
    }

    let union: BTreeSet<&str> = raw
        .iter()
        .flat_map(|c| c.lists.keys().map(String::as_str))
        .collect();
    let mut report = LoadReport {
        channel_users: raw.iter().map(|c| c.lists.len()).collect(),
        ..Default::default()
    };
    let mut users = Vec::new();
    for &u in &union {
        let covered = raw.iter().all(|c| c.lists.contains_key(u));
        if !covered {
            if opts.strict {
                let missing = raw.iter().find(|c| !c.lists.contains_key(u)).unwrap();
                return Err(FuseError::validation(format!(
                    "strict mode: user `{u}` missing from channel `{}`",
                    missing.name
                )));
            }
            report.dropped_partial += 1;
            continue;
        }
        if truth.get(u).is_none_or(|t| t.is_empty()) {
            report.dropped_no_truth += 1;
            continue;
        }
        users.push(u.to_string());
    }
    report.dropped_truth_only = truth.keys().filter(|u| !union.contains(u.as_str())).count();
    report.users_kept = users.len();
    if users.is_empty() {
        return Err(FuseError::validation("no user is covered by every channel and the truth file"));
    }
    if report.dropped_truth_only + report.dropped_partial + report.dropped_no_truth > 0 {
        log::warn!(
            "dropped users: {} truth-only, {} partial coverage, {} without truth",
            report.dropped_truth_only,
            report.dropped_partial,
            report.dropped_no_truth
        );
    }

    let mut item_set: BTreeSet<&str> = BTreeSet::new();
    for c in &raw {
        for (items, _) in c.lists.values() {
            item_set.extend(items.iter().map(String::as_str));
        }
    }
    for map in std::iter::once(&truth).chain(history.as_ref()) {
        for items in map.values() {
            item_set.extend(items.iter().map(String::as_str));
        }
    }
    if let Some(e) = &embeddings {
        item_set.extend(e.items.keys().map(String::as_str));
    }
    let items: Vec<String> = item_set.into_iter().map(str::to_string).collect();
    let index: HashMap<&str, ItemId> = items
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i as ItemId))
        .collect();
    let to_ids = |xs: &[String]| -> Vec<ItemId> { xs.iter().map(|s| index[s.as_str()]).collect() };

    let channels = raw
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let mut lists = Vec::with_capacity(users.len());
            let mut pads = Vec::with_capacity(users.len());
            for u in &users {
                let (list, padded) = &c.lists[u];
                lists.push(to_ids(list));
                pads.push(*padded);
            }
            ChannelRanking {
                id: k,
                name: c.name.clone(),
                lists,
                pad_flags: pads,
            }
        })
        .collect();
    let truth_for = |map: &HashMap<String, Vec<String>>| {
        GroundTruth::new(
            users
                .iter()
                .map(|u| map.get(u).map(|v| to_ids(v)).unwrap_or_default())
                .collect(),
        )
    };
    let truth_gt = truth_for(&truth);
    let history_gt = history.as_ref().map(truth_for);
    let embeddings = embeddings.map(|e| EmbeddingTable {
        dim: e.dim,
        user_vecs: users.iter().map(|u| e.users.get(u).cloned()).collect(),
        item_vecs: items.iter().map(|i| e.items.get(i).cloned()).collect(),
    });

    let ds = Dataset {
        users,
        items,
        channels,
        truth: truth_gt,
        history: history_gt,
        embeddings,
    };
    Ok((ds, report))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| FuseError::Io {
            path: path.to_path_buf(),
            source,
        })
}

fn write_lines<T: Serialize>(path: &Path, rows: impl Iterator<Item = T>) -> Result<()> {
    let io = |source| FuseError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = create(path)?;
    for row in rows {
        serde_json::to_writer(&mut w, &row).map_err(|e| io(e.into()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Write `ds` in the JSON Lines formats read by [`load_dataset`].
///
/// Channel files are named `<channel name>.jsonl`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<DatasetPaths> {
    std::fs::create_dir_all(dir).map_err(|source| FuseError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let names = |ids: &[ItemId]| -> Vec<String> {
        ids.iter().map(|&i| ds.items[i as usize].clone()).collect()
    };
    let mut paths = DatasetPaths::default();
    for c in &ds.channels {
        let path = dir.join(format!("{}.jsonl", c.name));
        write_lines(
            &path,
            ds.users.iter().enumerate().map(|(u, id)| ChannelLine {
                user: id.clone(),
                items: names(&c.lists[u]),
                padded: c.pad_flags[u],
            }),
        )?;
        paths.channels.push(path);
    }
    let write_truth = |gt: &GroundTruth, path: PathBuf| -> Result<PathBuf> {
        write_lines(
            &path,
            ds.users.iter().enumerate().map(|(u, id)| TruthLine {
                user: id.clone(),
                relevant: names(gt.set(u)),
            }),
        )?;
        Ok(path)
    };
    paths.truth = write_truth(&ds.truth, dir.join("truth.jsonl"))?;
    if let Some(h) = &ds.history {
        paths.history = Some(write_truth(h, dir.join("history.jsonl"))?);
    }
    if let Some(e) = &ds.embeddings {
        let path = dir.join("embeddings.jsonl");
        let users = ds.users.iter().zip(&e.user_vecs).filter_map(|(id, v)| {
            v.as_ref().map(|v| EmbeddingLine {
                id: id.clone(),
                kind: EmbeddingKind::User,
                vec: v.clone(),
            })
        });
        let items = ds.items.iter().zip(&e.item_vecs).filter_map(|(id, v)| {
            v.as_ref().map(|v| EmbeddingLine {
                id: id.clone(),
                kind: EmbeddingKind::Item,
                vec: v.clone(),
            })
        });
        write_lines(&path, users.chain(items))?;
        paths.embeddings = Some(path);
    }
    Ok(paths)
}

/// Items ordered by descending interaction count in the training truth,
/// ties by item index. Every item of the universe appears once.
pub fn popularity_order(ds: &Dataset) -> Vec<ItemId> {
    let mut counts = vec![0usize; ds.item_universe_size()];
    for set in &ds.training_truth().relevant {
        for &i in set {
            counts[i as usize] += 1;
        }
    }
    let mut order: Vec<ItemId> = (0..counts.len() as ItemId).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(counts[i as usize]), i));
    order
}

/// Extend every list to the longest list length C by appending items of
/// `fallback` (in order) that the list does not already contain.
pub fn pad_channels(ds: &Dataset, fallback: &[ItemId]) -> Result<Dataset> {
    let mut seen = HashSet::with_capacity(fallback.len());
    if let Some(dup) = fallback.iter().find(|i| !seen.insert(**i)) {
        return Err(FuseError::validation(format!(
            "fallback order repeats item `{}`",
            ds.items.get(*dup as usize).map_or("?", String::as_str)
        )));
    }
    let depth = ds.max_depth();
    let mut out = ds.clone();
    for channel in &mut out.channels {
        for (u, list) in channel.lists.iter_mut().enumerate() {
            if list.len() >= depth {
                continue;
            }
            let present: HashSet<ItemId> = list.iter().copied().collect();
            let before = list.len();
            list.extend(
                fallback
                    .iter()
                    .filter(|i| !present.contains(i))
                    .take(depth - before),
            );
            if list.len() < depth {
                return Err(FuseError::FallbackExhausted {
                    user: ds.users[u].clone(),
                    channel: channel.name.clone(),
                    needed: depth - list.len(),
                });
            }
            channel.pad_flags[u] += depth - before;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Finding {
    pub severity: Severity,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelSummary {
    pub name: String,
    pub min_depth: usize,
    pub max_depth: usize,
    pub pad_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub user_count: usize,
    pub item_universe_size: usize,
    pub channels: Vec<ChannelSummary>,
    /// Padded items over all list entries.
    pub pad_fraction: f64,
    /// Fraction of users with a non-empty relevant set.
    pub truth_coverage: f64,
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn error_count(&self) -> usize {
        self.findings
            .iter()
            .filter(|f| f.severity == Severity::Error)
            .count()
    }

    pub fn is_ok(&self) -> bool {
        self.error_count() == 0
    }
}

/// Check every dataset invariant. Violations become findings; in strict mode
/// a user missing from a channel (empty list) is an error, otherwise a warning.
pub fn validate_dataset(ds: &Dataset, strict: bool) -> ValidationReport {
    let mut findings = Vec::new();
    let mut error = |m: String| {
        findings.push(Finding {
            severity: Severity::Error,
            message: m,
        })
    };
    let n = ds.n_users();
    let m = ds.item_universe_size();
    if ds.channels.is_empty() {
        error("dataset has no channels".into());
    }
    if n == 0 {
        error("dataset has no users".into());
    }
    if ds.users.windows(2).any(|w| w[0] >= w[1]) {
        error("user ids are not sorted and unique".into());
    }
    if ds.items.windows(2).any(|w| w[0] >= w[1]) {
        error("item ids are not sorted and unique".into());
    }

    let mut summaries = Vec::new();
    let mut warnings = Vec::new();
    let (mut total, mut padded) = (0usize, 0usize);
    for c in &ds.channels {
        if c.lists.len() != n || c.pad_flags.len() != n {
            error(format!(
                "channel `{}` covers {} users, dataset has {n}",
                c.name,
                c.lists.len()
            ));
            continue;
        }
        let mut missing = 0;
        for (u, list) in c.lists.iter().enumerate() {
            if list.is_empty() {
                missing += 1;
            }
            let mut seen = HashSet::with_capacity(list.len());
            if list.iter().any(|i| !seen.insert(*i)) {
                error(format!("channel `{}`, user `{}`: duplicate item", c.name, ds.users[u]));
            }
            if list.iter().any(|&i| i as usize >= m) {
                error(format!("channel `{}`, user `{}`: item index out of range", c.name, ds.users[u]));
            }
            if c.pad_flags[u] > list.len() {
                error(format!("channel `{}`, user `{}`: pad count exceeds list length", c.name, ds.users[u]));
            }
        }
        if missing > 0 {
            let msg = format!("channel `{}` does not cover {missing} user(s)", c.name);
            if strict {
                error(msg);
            } else {
                warnings.push(msg);
            }
        }
        let lens = c.lists.iter().map(Vec::len);
        let ch_total: usize = c.lists.iter().map(Vec::len).sum();
        let ch_pad: usize = c.pad_flags.iter().sum();
        total += ch_total;
        padded += ch_pad;
        summaries.push(ChannelSummary {
            name: c.name.clone(),
            min_depth: lens.clone().min().unwrap_or(0),
            max_depth: lens.max().unwrap_or(0),
            pad_fraction: if ch_total == 0 { 0.0 } else { ch_pad as f64 / ch_total as f64 },
        });
    }
    let depths: BTreeSet<usize> = summaries
        .iter()
        .flat_map(|s| [s.min_depth, s.max_depth])
        .collect();
    if depths.len() > 1 {
        warnings.push(format!("uneven list depths {depths:?}; consider padding"));
    }

    let truth_users = ds.truth.relevant.len();
    if truth_users != n {
        error(format!("ground truth covers {truth_users} users, dataset has {n}"));
    }
    let with_truth = ds.truth.relevant.iter().filter(|s| !s.is_empty()).count();
    if with_truth < truth_users {
        error(format!("{} user(s) have no relevant items", truth_users - with_truth));
    }
    if let Some(h) = &ds.history {
        if h.relevant.len() != n {
            error(format!("history covers {} users, dataset has {n}", h.relevant.len()));
        }
    }
    if let Some(e) = &ds.embeddings {
        let bad = e
            .user_vecs
            .iter()
            .chain(&e.item_vecs)
            .flatten()
            .filter(|v| v.len() != e.dim || v.iter().any(|x| !x.is_finite()))
            .count();
        if e.dim == 0 || bad > 0 {
            error(format!("{bad} embedding(s) with wrong dimension or non-finite entries"));
        }
        if e.user_vecs.len() != n || e.item_vecs.len() != m {
            error("embedding table shape does not match users/items".into());
        }
    }

    findings.extend(warnings.into_iter().map(|message| Finding {
        severity: Severity::Warning,
        message,
    }));
    ValidationReport {
        user_count: n,
        item_universe_size: m,
        channels: summaries,
        pad_fraction: if total == 0 { 0.0 } else { padded as f64 / total as f64 },
        truth_coverage: if n == 0 { 0.0 } else { with_truth as f64 / n as f64 },
        findings,
    }
}

/// Build a dataset from string-keyed lists. Mostly for fixtures and tests;
/// users absent from a channel get an empty list.
pub fn dataset_from_lists(
    channels: &[(&str, BTreeMap<&str, Vec<&str>>)],
    truth: &BTreeMap<&str, Vec<&str>>,
) -> Result<Dataset> {
    let users: BTreeSet<&str> = channels
        .iter()
        .flat_map(|(_, m)| m.keys().copied())
        .chain(truth.keys().copied())
        .collect();
    let items: BTreeSet<&str> = channels
        .iter()
        .flat_map(|(_, m)| m.values().flatten().copied())
        .chain(truth.values().flatten().copied())
        .collect();
    let users: Vec<String> = users.into_iter().map(str::to_string).collect();
    let items: Vec<String> = items.into_iter().map(str::to_string).collect();
    let idx = |s: &str| items.binary_search_by(|i| i.as_str().cmp(s)).unwrap() as ItemId;
    let channels = channels
        .iter()
        .enumerate()
        .map(|(k, (name, m))| {
            let lists = users
                .iter()
                .map(|u| {
                    m.get(u.as_str())
                        .map(|l| l.iter().map(|s| idx(s)).collect())
                        .unwrap_or_default()
                })
                .collect();
            ChannelRanking::new(k, *name, lists)
        })
        .collect();
    let truth = GroundTruth::new(
        users
            .iter()
            .map(|u| {
                truth
                    .get(u.as_str())
                    .map(|l| l.iter().map(|s| idx(s)).collect())
                    .unwrap_or_default()
            })
            .collect(),
    );
    Ok(Dataset {
        users,
        items,
        channels,
        truth,
        history: None,
        embeddings: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    fn map<'a>(pairs: &[(&'a str, Vec<&'a str>)]) -> BTreeMap<&'a str, Vec<&'a str>> {
        pairs.iter().cloned().collect()
    }

    #[test]
    fn loads_two_channels() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(
            dir.path(),
            "pop.jsonl",
            "{\"user\":\"u1\",\"items\":[\"i1\",\"i2\"]}\n{\"user\":\"u2\",\"items\":[\"i2\",\"i3\"]}\n",
        );
        let b = write(
            dir.path(),
            "knn.jsonl",
            "{\"user\":\"u2\",\"items\":[\"i4\",\"i1\"]}\n\n{\"user\":\"u1\",\"items\":[\"i3\",\"i4\"]}\n",
        );
        let t = write(
            dir.path(),
            "truth.jsonl",
            "{\"user\":\"u1\",\"relevant\":[\"i1\"]}\n{\"user\":\"u2\",\"relevant\":[\"i4\"]}\n",
        );
        let paths = DatasetPaths {
            channels: vec![a, b],
            truth: t,
            ..Default::default()
        };
        let (ds, report) = load_dataset(&paths, LoadOptions::default()).unwrap();
        assert_eq!(ds.n_channels(), 2);
        assert_eq!(ds.channel_names(), vec!["pop", "knn"]);
        assert_eq!(ds.users, vec!["u1", "u2"]);
        assert_eq!(ds.item_universe_size(), 4);
        let u2 = ds.user_index("u2").unwrap();
        let names: Vec<&str> = ds.channels[1].lists[u2]
            .iter()
            .map(|&i| ds.items[i as usize].as_str())
            .collect();
        assert_eq!(names, vec!["i4", "i1"]);
        assert_eq!(report.users_kept, 2);
        assert!(validate_dataset(&ds, true).is_ok());
    }

    #[test]
    fn duplicate_item_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(
            dir.path(),
            "a.jsonl",
            "{\"user\":\"u1\",\"items\":[\"i5\",\"i2\",\"i5\"]}\n",
        );
        let t = write(dir.path(), "t.jsonl", "{\"user\":\"u1\",\"relevant\":[\"i5\"]}\n");
        let err = load_dataset(
            &DatasetPaths {
                channels: vec![a],
                truth: t,
                ..Default::default()
            },
            LoadOptions::default(),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(err.is_validation());
        assert!(msg.contains("`a`") && msg.contains("`u1`") && msg.contains("i5"), "{msg}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(
            dir.path(),
            "a.jsonl",
            "{\"user\":\"u1\",\"items\":[\"i1\"]}\n{\"user\":\"u2\",\"items\":\n",
        );
        let t = write(dir.path(), "t.jsonl", "{\"user\":\"u1\",\"relevant\":[\"i1\"]}\n");
        let err = load_dataset(
            &DatasetPaths {
                channels: vec![a],
                truth: t,
                ..Default::default()
            },
            LoadOptions::default(),
        )
        .unwrap_err();
        match err {
            FuseError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truth_only_user_is_dropped_and_counted() {
        // three users in truth, two in channels
        let dir = tempfile::tempdir().unwrap();
        let a = write(
            dir.path(),
            "a.jsonl",
            "{\"user\":\"u1\",\"items\":[\"i1\",\"i2\"]}\n{\"user\":\"u2\",\"items\":[\"i2\",\"i3\"]}\n",
        );
        let t = write(
            dir.path(),
            "t.jsonl",
            "{\"user\":\"u1\",\"relevant\":[\"i1\"]}\n{\"user\":\"u2\",\"relevant\":[\"i3\"]}\n{\"user\":\"u3\",\"relevant\":[\"i9\"]}\n",
        );
        let (ds, report) = load_dataset(
            &DatasetPaths {
                channels: vec![a],
                truth: t,
                ..Default::default()
            },
            LoadOptions::default(),
        )
        .unwrap();
        assert_eq!(ds.users, vec!["u1", "u2"]);
        assert_eq!(report.dropped_truth_only, 1);
        assert_eq!(report.users_kept, 2);
    }

    #[test]
    fn ragged_users_intersect_or_fail_strictly() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(
            dir.path(),
            "a.jsonl",
            "{\"user\":\"u1\",\"items\":[\"i1\"]}\n{\"user\":\"u2\",\"items\":[\"i2\"]}\n",
        );
        let b = write(dir.path(), "b.jsonl", "{\"user\":\"u1\",\"items\":[\"i2\"]}\n");
        let t = write(
            dir.path(),
            "t.jsonl",
            "{\"user\":\"u1\",\"relevant\":[\"i1\"]}\n{\"user\":\"u2\",\"relevant\":[\"i2\"]}\n",
        );
        let paths = DatasetPaths {
            channels: vec![a, b],
            truth: t,
            ..Default::default()
        };
        let (ds, report) = load_dataset(&paths, LoadOptions::default()).unwrap();
        assert_eq!(ds.users, vec!["u1"]);
        assert_eq!(report.dropped_partial, 1);
        let err = load_dataset(&paths, LoadOptions { strict: true }).unwrap_err();
        assert!(err.to_string().contains("strict"));
    }

    #[test]
    fn embedding_dimension_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "a.jsonl", "{\"user\":\"u1\",\"items\":[\"i1\"]}\n");
        let t = write(dir.path(), "t.jsonl", "{\"user\":\"u1\",\"relevant\":[\"i1\"]}\n");
        let e = write(
            dir.path(),
            "e.jsonl",
            "{\"id\":\"u1\",\"kind\":\"user\",\"vec\":[0.1,0.2]}\n{\"id\":\"i1\",\"kind\":\"item\",\"vec\":[0.3]}\n",
        );
        let err = load_dataset(
            &DatasetPaths {
                channels: vec![a],
                truth: t,
                embeddings: Some(e),
                ..Default::default()
            },
            LoadOptions::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("dimension"), "{err}");
    }

    fn ragged() -> Dataset {
        dataset_from_lists(
            &[
                ("a", map(&[("u1", vec!["i1"]), ("u2", vec!["i1", "i2", "i3"])])),
                ("b", map(&[("u1", vec!["i2", "i3", "i4"]), ("u2", vec!["i4", "i2", "i1"])])),
            ],
            &map(&[("u1", vec!["i1"]), ("u2", vec!["i2"])]),
        )
        .unwrap()
    }

    #[test]
    fn padding_follows_fallback_order() {
        let ds = ragged();
        let id = |s: &str| ds.item_index(s).unwrap();
        let fallback: Vec<ItemId> = ["i1", "i2", "i3", "i4"].iter().map(|s| id(s)).collect();
        let padded = pad_channels(&ds, &fallback).unwrap();
        let u1 = ds.user_index("u1").unwrap();
        assert_eq!(padded.channels[0].lists[u1], vec![id("i1"), id("i2"), id("i3")]);
        assert_eq!(padded.channels[0].pad_flags[u1], 2);
        assert_eq!(padded.channels[1].pad_flags, vec![0, 0]);
        // idempotent
        assert_eq!(pad_channels(&padded, &fallback).unwrap(), padded);
    }

    #[test]
    fn full_lists_are_unchanged_by_padding() {
        let ds = dataset_from_lists(
            &[("a", map(&[("u1", vec!["i1", "i2"])])), ("b", map(&[("u1", vec!["i3", "i2"])]))],
            &map(&[("u1", vec!["i1"])]),
        )
        .unwrap();
        let padded = pad_channels(&ds, &[0, 1, 2]).unwrap();
        assert_eq!(padded, ds);
    }

    #[test]
    fn exhausted_fallback_is_an_error() {
        let ds = dataset_from_lists(
            &[
                ("a", map(&[("u1", vec!["i1", "i2"])])),
                ("b", map(&[("u1", vec!["i1", "i2", "i3", "i4"])])),
            ],
            &map(&[("u1", vec!["i1"])]),
        )
        .unwrap();
        let fallback = vec![ds.item_index("i1").unwrap(), ds.item_index("i2").unwrap()];
        match pad_channels(&ds, &fallback).unwrap_err() {
            FuseError::FallbackExhausted { user, channel, needed } => {
                assert_eq!((user.as_str(), channel.as_str(), needed), ("u1", "a", 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_fallback_is_rejected() {
        assert!(pad_channels(&ragged(), &[0, 1, 0]).is_err());
    }

    #[test]
    fn validation_flags_missing_users_in_strict_mode() {
        let ds = dataset_from_lists(
            &[
                ("a", map(&[("u1", vec!["i1", "i2"]), ("u2", vec!["i2", "i3"])])),
                ("b", map(&[("u1", vec!["i3", "i2"])])),
            ],
            &map(&[("u1", vec!["i1"]), ("u2", vec!["i3"])]),
        )
        .unwrap();
        assert_eq!(validate_dataset(&ds, true).error_count(), 1);
        let lax = validate_dataset(&ds, false);
        assert_eq!(lax.error_count(), 0);
        assert!(!lax.findings.is_empty());
    }

    #[test]
    fn pad_fraction_is_counted() {
        // 2 channels x 1 user x depth 5 = 10 entries, 3 of them padded
        let ds = dataset_from_lists(
            &[
                ("a", map(&[("u1", vec!["i1", "i2", "i3", "i4"])])),
                ("b", map(&[("u1", vec!["i5", "i6", "i7"])])),
            ],
            &map(&[("u1", vec!["i1"])]),
        )
        .unwrap();
        let fallback: Vec<ItemId> = (0..ds.item_universe_size() as ItemId).collect();
        // depth is 4: a needs 0, b needs 1; extend a to 5 by hand to reach 3/10
        let mut ds = pad_channels(&ds, &fallback).unwrap();
        let (i7, i3) = (ds.item_index("i7").unwrap(), ds.item_index("i3").unwrap());
        ds.channels[0].lists[0].push(i7);
        ds.channels[0].pad_flags[0] = 1;
        ds.channels[1].lists[0].push(i3);
        ds.channels[1].pad_flags[0] = 2;
        let report = validate_dataset(&ds, true);
        assert!(report.is_ok(), "{:?}", report.findings);
        assert!((report.pad_fraction - 0.30).abs() < 1e-12);
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = ragged();
        let fallback: Vec<ItemId> = (0..ds.item_universe_size() as ItemId).collect();
        ds = pad_channels(&ds, &fallback).unwrap();
        ds.history = Some(GroundTruth::new(vec![vec![1], vec![0, 3]]));
        ds.embeddings = Some(EmbeddingTable {
            dim: 2,
            user_vecs: vec![Some(vec![0.5, -1.25]), Some(vec![1e-3, 2.0])],
            item_vecs: (0..4).map(|i| Some(vec![i as f64, 0.1 * i as f64])).collect(),
        });
        let paths = write_dataset(&ds, dir.path()).unwrap();
        let (back, _) = load_dataset(&paths, LoadOptions { strict: true }).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn popularity_prefers_frequent_items() {
        let ds = dataset_from_lists(
            &[("a", map(&[("u1", vec!["i1"]), ("u2", vec!["i2"])]))],
            &map(&[("u1", vec!["i2", "i3"]), ("u2", vec!["i2"])]),
        )
        .unwrap();
        let order: Vec<&str> = popularity_order(&ds)
            .iter()
            .map(|&i| ds.items[i as usize].as_str())
            .collect();
        assert_eq!(order, vec!["i2", "i3", "i1"]);
    }
}
