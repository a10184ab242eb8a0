//! Set-based retrieval metrics, the optimization objective, and channel
//! diversity diagnostics.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FuseError, Result};
use crate::fusion::{merge_user_with, MergeScratch, MergedSet, WeightVector, Weights};
use crate::ingest::{Dataset, GroundTruth, ItemId};

/// Default RBO persistence.
pub const DEFAULT_PERSISTENCE: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Recall,
    Precision,
    F1,
}

impl std::str::FromStr for Metric {
    type Err = FuseError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "recall" => Ok(Metric::Recall),
            "precision" => Ok(Metric::Precision),
            "f1" => Ok(Metric::F1),
            other => Err(FuseError::validation(format!("unknown metric `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UserScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl UserScores {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Recall => self.recall,
            Metric::Precision => self.precision,
            Metric::F1 => self.f1,
        }
    }
}

fn scores_from_counts(hits: usize, retrieved: usize, relevant: usize) -> UserScores {
    let precision = if retrieved == 0 {
        0.0
    } else {
        hits as f64 / retrieved as f64
    };
    let recall = hits as f64 / relevant as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    UserScores {
        precision,
        recall,
        f1,
    }
}

fn score_items(items: &[ItemId], user: usize, truth: &GroundTruth) -> Result<UserScores> {
    let relevant = truth.set(user).len();
    if relevant == 0 {
        return Err(FuseError::validation(format!(
            "user #{user} has no relevant items"
        )));
    }
    Ok(scores_from_counts(truth.hits(user, items), items.len(), relevant))
}

/// Precision, recall and guarded F1 of one merged set.
pub fn evaluate_user(merged: &MergedSet, truth: &GroundTruth) -> Result<UserScores> {
    score_items(&merged.items, merged.user, truth)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UserEval {
    pub user: String,
    #[serde(flatten)]
    pub scores: UserScores,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub l: usize,
    pub user_count: usize,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_f1: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub per_user: Vec<UserEval>,
}

impl EvalReport {
    pub fn mean(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Recall => self.mean_recall,
            Metric::Precision => self.mean_precision,
            Metric::F1 => self.mean_f1,
        }
    }
}

fn per_user_scores(
    ds: &Dataset,
    weights: Weights<'_>,
    l: usize,
    users: &[usize],
) -> Result<Vec<UserScores>> {
    let universe = ds.item_universe_size();
    users
        .par_iter()
        .map_init(
            || MergeScratch::new(universe),
            |scratch, &u| {
                let merged = merge_user_with(ds, u, weights.for_user(ds, u)?, l, scratch)?;
                evaluate_user(&merged, &ds.truth)
            },
        )
        .collect()
}

/// Sum in index order, then divide once.
fn ordered_mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    values.fold(0.0, |acc, v| acc + v) / n as f64
}

/// Full report over `users`.
pub fn evaluate(ds: &Dataset, weights: Weights<'_>, l: usize, users: &[usize]) -> Result<EvalReport> {
    if users.is_empty() {
        return Err(FuseError::validation("no users to evaluate"));
    }
    let scores = per_user_scores(ds, weights, l, users)?;
    let n = scores.len();
    Ok(EvalReport {
        l,
        user_count: n,
        mean_precision: ordered_mean(scores.iter().map(|s| s.precision), n),
        mean_recall: ordered_mean(scores.iter().map(|s| s.recall), n),
        mean_f1: ordered_mean(scores.iter().map(|s| s.f1), n),
        per_user: users
            .iter()
            .zip(scores)
            .map(|(&u, scores)| UserEval {
                user: ds.users[u].clone(),
                scores,
            })
            .collect(),
    })
}

/// Mean per-user metric of the merged sets over every user.
pub fn evaluate_objective(ds: &Dataset, weights: Weights<'_>, l: usize, metric: Metric) -> Result<f64> {
    evaluate_objective_on(ds, weights, l, metric, &ds.all_users())
}

/// Mean per-user metric over the given user subset.
pub fn evaluate_objective_on(
    ds: &Dataset,
    weights: Weights<'_>,
    l: usize,
    metric: Metric,
    users: &[usize],
) -> Result<f64> {
    if users.is_empty() {
        return Err(FuseError::validation("no users to evaluate"));
    }
    let scores = per_user_scores(ds, weights, l, users)?;
    Ok(ordered_mean(scores.iter().map(|s| s.get(metric)), scores.len()))
}

/// A black-box score over global weight vectors.
pub trait Objective: Sync {
    fn n_channels(&self) -> usize;
    fn score(&self, w: &WeightVector) -> Result<f64>;
}

/// The fusion objective: mean metric of merged sets over a fixed user subset.
#[derive(Debug, Clone)]
pub struct FusionObjective<'a> {
    pub ds: &'a Dataset,
    pub users: Vec<usize>,
    pub l: usize,
    pub metric: Metric,
}

impl<'a> FusionObjective<'a> {
    pub fn new(ds: &'a Dataset, users: Vec<usize>, l: usize, metric: Metric) -> Self {
        FusionObjective { ds, users, l, metric }
    }

    pub fn all_users(ds: &'a Dataset, l: usize, metric: Metric) -> Self {
        Self::new(ds, ds.all_users(), l, metric)
    }
}

impl Objective for FusionObjective<'_> {
    fn n_channels(&self) -> usize {
        self.ds.n_channels()
    }

    fn score(&self, w: &WeightVector) -> Result<f64> {
        evaluate_objective_on(self.ds, Weights::Global(w), self.l, self.metric, &self.users)
    }
}

/// Wraps a closure as an [`Objective`].
pub struct FnObjective<F> {
    pub k: usize,
    pub f: F,
}

impl<F> Objective for FnObjective<F>
where
    F: Fn(&WeightVector) -> f64 + Sync,
{
    fn n_channels(&self) -> usize {
        self.k
    }

    fn score(&self, w: &WeightVector) -> Result<f64> {
        Ok((self.f)(w))
    }
}

/// Recall of one channel's full list for `user`.
pub fn channel_recall(ds: &Dataset, channel: usize, user: usize, truth: &GroundTruth) -> f64 {
    let relevant = truth.set(user).len();
    if relevant == 0 {
        return 0.0;
    }
    truth.hits(user, ds.channels[channel].list(user)) as f64 / relevant as f64
}

/// Mean pairwise Jaccard similarity of the channels' lists, averaged over users.
pub fn jaccard_matrix(ds: &Dataset) -> Vec<Vec<f64>> {
    let k = ds.n_channels();
    let n = ds.n_users();
    let mut out = vec![vec![1.0; k]; k];
    for a in 0..k {
        for b in a + 1..k {
            let per_user: Vec<f64> = (0..n)
                .into_par_iter()
                .map(|u| {
                    let la: HashSet<ItemId> = ds.channels[a].list(u).iter().copied().collect();
                    let lb = ds.channels[b].list(u);
                    let inter = lb.iter().filter(|i| la.contains(i)).count();
                    let union = la.len() + lb.len() - inter;
                    if union == 0 {
                        1.0
                    } else {
                        inter as f64 / union as f64
                    }
                })
                .collect();
            let v = ordered_mean(per_user.into_iter(), n);
            out[a][b] = v;
            out[b][a] = v;
        }
    }
    out
}

/// Users ordered by one channel's per-user recall.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelUserRanking {
    pub channel: usize,
    /// Dataset user indices, best recall first; ties by ascending index.
    pub users_ranked: Vec<usize>,
}

pub fn channel_user_ranking(ds: &Dataset, channel: usize, truth: &GroundTruth) -> ChannelUserRanking {
    let recalls: Vec<f64> = (0..ds.n_users())
        .map(|u| channel_recall(ds, channel, u, truth))
        .collect();
    let mut users: Vec<usize> = (0..ds.n_users()).collect();
    users.sort_by(|&a, &b| recalls[b].total_cmp(&recalls[a]).then(a.cmp(&b)));
    ChannelUserRanking {
        channel,
        users_ranked: users,
    }
}

/// Truncated rank-biased overlap
/// `(1 − p) Σ_{d=1..D} p^{d−1} |prefix_d(r1) ∩ prefix_d(r2)| / d`.
pub fn rbo_pair(r1: &ChannelUserRanking, r2: &ChannelUserRanking, p: f64, depth: usize) -> Result<f64> {
    rbo(&r1.users_ranked, &r2.users_ranked, p, depth)
}

/// [`rbo_pair`] on plain rankings.
pub fn rbo<T: std::hash::Hash + Eq + Copy>(r1: &[T], r2: &[T], p: f64, depth: usize) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(FuseError::validation(format!("RBO persistence must lie in (0, 1), got {p}")));
    }
    if depth == 0 || depth > r1.len().min(r2.len()) {
        return Err(FuseError::validation(format!(
            "RBO depth {depth} outside 1..={}",
            r1.len().min(r2.len())
        )));
    }
    let mut seen1 = HashSet::with_capacity(depth);
    let mut seen2 = HashSet::with_capacity(depth);
    let mut overlap = 0usize;
    let mut weight = 1.0;
    let mut sum = 0.0;
    for d in 0..depth {
        let (a, b) = (r1[d], r2[d]);
        if a == b {
            overlap += 1;
        } else {
            overlap += usize::from(seen2.contains(&a)) + usize::from(seen1.contains(&b));
        }
        seen1.insert(a);
        seen2.insert(b);
        sum += weight * overlap as f64 / (d + 1) as f64;
        weight *= p;
    }
    Ok((1.0 - p) * sum)
}

/// K×K RBO matrix of the channels' user rankings.
pub fn rbo_matrix(ds: &Dataset, truth: &GroundTruth, p: f64, depth: usize) -> Result<Vec<Vec<f64>>> {
    let rankings: Vec<ChannelUserRanking> = (0..ds.n_channels())
        .into_par_iter()
        .map(|k| channel_user_ranking(ds, k, truth))
        .collect();
    let k = rankings.len();
    let mut out = vec![vec![0.0; k]; k];
    for a in 0..k {
        for b in a..k {
            let v = rbo_pair(&rankings[a], &rankings[b], p, depth)?;
            out[a][b] = v;
            out[b][a] = v;
        }
    }
    Ok(out)
}

/// Fraction of the item universe recommended to at least one user.
pub fn item_coverage(merged: &[MergedSet], universe: usize) -> Result<f64> {
    if universe == 0 {
        return Err(FuseError::validation("item universe is empty"));
    }
    let distinct: HashSet<ItemId> = merged.iter().flat_map(|m| m.items.iter().copied()).collect();
    Ok(distinct.len() as f64 / universe as f64)
}
