//! Quota-based merging of channel lists.
//!
//! A weight vector `w` on the simplex gives every channel a quota of
//! `nearest_int(w_k * L)` items. The quota prefixes are unioned without
//! duplicates; contested items belong to the heavier channel. Items lost to
//! de-duplication are replaced round-robin from the channels' next unused
//! ranks so that the merged set has exactly `L` items whenever the channels
//! hold enough distinct items.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FuseError, Result};
use crate::ingest::{Dataset, GroundTruth, ItemId};

/// Tolerance on `Σ w = 1`.
pub const SUM_TOL: f64 = 1e-9;

/// Weights closer than this are treated as tied when ordering channels or
/// apportioning quota units.
const TIE_TOL: f64 = 1e-9;

/// A point on the K-simplex, optionally restricted to `[w_min, w_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    w: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bounds: Option<(f64, f64)>,
}

impl WeightVector {
    /// Validates non-negativity and `|Σ w − 1| ≤ 1e-9`.
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(FuseError::validation("weight vector is empty"));
        }
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(FuseError::validation(format!(
                "weights must be finite and non-negative: {w:?}"
            )));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(FuseError::validation(format!(
                "weights must sum to 1 (got {sum})"
            )));
        }
        Ok(WeightVector { w, bounds: None })
    }

    /// Scale a non-negative vector with positive mass onto the simplex.
    pub fn normalized(raw: &[f64]) -> Result<Self> {
        let sum: f64 = raw.iter().sum();
        if !(sum > 0.0) || raw.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(FuseError::validation(format!(
                "cannot normalize {raw:?}"
            )));
        }
        let mut w: Vec<f64> = raw.iter().map(|x| x / sum).collect();
        renormalize(&mut w);
        Self::new(w)
    }

    pub fn uniform(k: usize) -> Self {
        WeightVector {
            w: vec![1.0 / k as f64; k],
            bounds: None,
        }
    }

    pub fn one_hot(k: usize, index: usize) -> Self {
        let mut w = vec![0.0; k];
        w[index] = 1.0;
        WeightVector { w, bounds: None }
    }

    /// Attach bounds; fails if the vector violates them.
    pub fn with_bounds(mut self, w_min: f64, w_max: f64) -> Result<Self> {
        check_bounds(self.len(), w_min, w_max)?;
        if self
            .w
            .iter()
            .any(|&x| x < w_min - SUM_TOL || x > w_max + SUM_TOL)
        {
            return Err(FuseError::validation(format!(
                "weights {:?} violate bounds [{w_min}, {w_max}]",
                self.w
            )));
        }
        self.bounds = Some((w_min, w_max));
        Ok(self)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn bounds(&self) -> Option<(f64, f64)> {
        self.bounds
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.w
    }
}

/// Put the rounding error of a sum onto the largest coordinate.
fn renormalize(w: &mut [f64]) {
    let sum: f64 = w.iter().sum();
    let (imax, _) = w
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc });
    w[imax] += 1.0 - sum;
    if w[imax] < 0.0 {
        w[imax] = 0.0;
    }
}

fn check_bounds(k: usize, w_min: f64, w_max: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&w_min) || !(0.0..=1.0).contains(&w_max) || w_min > w_max {
        return Err(FuseError::Infeasible(format!(
            "bounds must satisfy 0 <= w_min <= w_max <= 1, got [{w_min}, {w_max}]"
        )));
    }
    let k = k as f64;
    if k * w_min > 1.0 + SUM_TOL || k * w_max < 1.0 - SUM_TOL {
        return Err(FuseError::Infeasible(format!(
            "no point of the {k}-simplex lies in [{w_min}, {w_max}]"
        )));
    }
    Ok(())
}

/// Per-user weight vectors, keyed by user id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PersonalizedWeights {
    pub per_user: BTreeMap<String, WeightVector>,
}

impl PersonalizedWeights {
    pub fn get(&self, user: &str) -> Option<&WeightVector> {
        self.per_user.get(user)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Weights<'a> {
    Global(&'a WeightVector),
    Personalized(&'a PersonalizedWeights),
}

impl<'a> Weights<'a> {
    /// Weight vector for `user`, or an error naming the uncovered user.
    pub fn for_user(&self, ds: &Dataset, user: usize) -> Result<&'a WeightVector> {
        match *self {
            Weights::Global(w) => Ok(w),
            Weights::Personalized(p) => p.get(&ds.users[user]).ok_or_else(|| {
                FuseError::validation(format!(
                    "personalized weights do not cover user `{}`",
                    ds.users[user]
                ))
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub channel: usize,
    /// Zero-based rank within the channel's list.
    pub rank: usize,
    pub backfilled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergedSet {
    pub user: usize,
    pub items: Vec<ItemId>,
    pub provenance: Vec<Provenance>,
    /// Set when every channel ran out before `L` distinct items were found.
    pub exhausted: bool,
}

impl MergedSet {
    pub fn backfilled(&self) -> usize {
        self.provenance.iter().filter(|p| p.backfilled).count()
    }
}

#[inline]
fn nearest_int(x: f64) -> usize {
    // half away from zero; x >= 0
    (x + 0.5 + TIE_TOL).floor().max(0.0) as usize
}

#[inline]
fn tie_key(x: f64) -> i64 {
    (x / TIE_TOL).round() as i64
}

/// Integer quotas `nearest_int(w_k · L)` repaired to sum to exactly `L`,
/// each capped at `caps[k]` (the channel's list length).
///
/// Repair adds one unit to the channel whose residual `w_k·L − quota_k` is
/// largest (or removes one from the smallest), ties to the lower index.
pub fn quotas_from_weights(w: &WeightVector, l: usize, caps: &[usize]) -> Result<Vec<usize>> {
    if caps.len() != w.len() {
        return Err(FuseError::validation(format!(
            "{} caps for {} channels",
            caps.len(),
            w.len()
        )));
    }
    let available = caps.iter().fold(0usize, |a, &c| a.saturating_add(c));
    if l > available {
        return Err(FuseError::validation(format!(
            "L = {l} exceeds the {available} items available across channels"
        )));
    }
    let target: Vec<f64> = w.as_slice().iter().map(|x| x * l as f64).collect();
    let mut quota: Vec<usize> = target
        .iter()
        .zip(caps)
        .map(|(&t, &c)| nearest_int(t).min(c))
        .collect();
    let mut total: usize = quota.iter().sum();
    while total < l {
        let k = (0..quota.len())
            .filter(|&k| quota[k] < caps[k])
            .max_by_key(|&k| (tie_key(target[k] - quota[k] as f64), std::cmp::Reverse(k)))
            .expect("capacity checked above");
        quota[k] += 1;
        total += 1;
    }
    while total > l {
        let k = (0..quota.len())
            .filter(|&k| quota[k] > 0)
            .min_by_key(|&k| (tie_key(target[k] - quota[k] as f64), k))
            .expect("positive total");
        quota[k] -= 1;
        total -= 1;
    }
    Ok(quota)
}

/// Channel indices by descending weight, ties by ascending index.
pub fn scan_order(w: &WeightVector) -> Vec<usize> {
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by_key(|&k| (std::cmp::Reverse(tie_key(w.as_slice()[k])), k));
    order
}

/// Reusable membership marks over the item universe.
#[derive(Debug, Clone, Default)]
pub struct MergeScratch {
    marks: Vec<u32>,
    stamp: u32,
}

impl MergeScratch {
    pub fn new(universe: usize) -> Self {
        MergeScratch {
            marks: vec![0; universe],
            stamp: 0,
        }
    }

    fn reset(&mut self, universe: usize) {
        if self.marks.len() < universe {
            self.marks.resize(universe, 0);
        }
        self.stamp = self.stamp.wrapping_add(1);
        if self.stamp == 0 {
            self.marks.iter_mut().for_each(|m| *m = 0);
            self.stamp = 1;
        }
    }

    /// Marks `item` as taken; false if it already was.
    #[inline]
    fn insert(&mut self, item: ItemId) -> bool {
        let slot = &mut self.marks[item as usize];
        if *slot == self.stamp {
            false
        } else {
            *slot = self.stamp;
            true
        }
    }
}

/// Merge one user's channel lists under weights `w` into at most `l` items.
pub fn merge_user(ds: &Dataset, user: usize, w: &WeightVector, l: usize) -> Result<MergedSet> {
    let mut scratch = MergeScratch::new(ds.item_universe_size());
    merge_user_with(ds, user, w, l, &mut scratch)
}

/// [`merge_user`] with caller-provided scratch space.
pub fn merge_user_with(
    ds: &Dataset,
    user: usize,
    w: &WeightVector,
    l: usize,
    scratch: &mut MergeScratch,
) -> Result<MergedSet> {
    if user >= ds.n_users() {
        return Err(FuseError::UnknownUser(format!("#{user}")));
    }
    if w.len() != ds.n_channels() {
        return Err(FuseError::validation(format!(
            "{} weights for {} channels",
            w.len(),
            ds.n_channels()
        )));
    }
    let lists: Vec<&[ItemId]> = ds.channels.iter().map(|c| c.list(user)).collect();
    let caps: Vec<usize> = lists.iter().map(|l| l.len()).collect();
    // more requested than listed: take everything and flag exhaustion below
    let budget = l.min(caps.iter().sum());
    let quota = quotas_from_weights(w, budget, &caps)?;
    let order = scan_order(w);

    scratch.reset(ds.item_universe_size());
    let mut items = Vec::with_capacity(l);
    let mut provenance = Vec::with_capacity(l);
    for &k in &order {
        for (rank, &item) in lists[k][..quota[k]].iter().enumerate() {
            if scratch.insert(item) {
                items.push(item);
                provenance.push(Provenance {
                    channel: k,
                    rank,
                    backfilled: false,
                });
            }
        }
    }

    let mut cursor = quota;
    let mut live = true;
    while items.len() < l && live {
        live = false;
        for &k in &order {
            if items.len() >= l {
                break;
            }
            let list = lists[k];
            while cursor[k] < list.len() {
                let rank = cursor[k];
                cursor[k] += 1;
                if scratch.insert(list[rank]) {
                    items.push(list[rank]);
                    provenance.push(Provenance {
                        channel: k,
                        rank,
                        backfilled: true,
                    });
                    break;
                }
            }
            live |= cursor[k] < list.len();
        }
    }
    Ok(MergedSet {
        user,
        exhausted: items.len() < l,
        items,
        provenance,
    })
}

/// Merge every user, in user order. Evaluation may run in parallel; the
/// output does not depend on the thread count.
pub fn merge_all(ds: &Dataset, weights: Weights<'_>, l: usize) -> Result<Vec<MergedSet>> {
    let universe = ds.item_universe_size();
    (0..ds.n_users())
        .into_par_iter()
        .map_init(
            || MergeScratch::new(universe),
            |scratch, u| merge_user_with(ds, u, weights.for_user(ds, u)?, l, scratch),
        )
        .collect()
}

/// Clip to `[w_min, w_max]` and hand the resulting surplus or deficit to the
/// coordinates that are not clipped, proportionally to their value. Repeats
/// until no new coordinate is clipped.
pub fn project_to_bounded_simplex(raw: &[f64], w_min: f64, w_max: f64) -> Result<WeightVector> {
    check_bounds(raw.len(), w_min, w_max)?;
    if raw.iter().any(|x| !x.is_finite()) {
        return Err(FuseError::validation(format!("non-finite weights {raw:?}")));
    }
    let k = raw.len();
    let mut x: Vec<f64> = raw.iter().map(|v| v.max(0.0)).collect();
    let feasible = |x: &[f64]| {
        (x.iter().sum::<f64>() - 1.0).abs() <= SUM_TOL
            && x.iter().all(|&v| v >= w_min && v <= w_max)
    };
    if feasible(&x) {
        return Ok(WeightVector {
            w: x,
            bounds: Some((w_min, w_max)),
        });
    }

    let mut fixed = vec![false; k];
    for _ in 0..=k {
        for i in 0..k {
            if !fixed[i] && (x[i] <= w_min || x[i] >= w_max) {
                x[i] = x[i].clamp(w_min, w_max);
                fixed[i] = true;
            }
        }
        let residual = 1.0 - x.iter().sum::<f64>();
        if residual.abs() <= 1e-15 {
            break;
        }
        let free: Vec<usize> = (0..k).filter(|&i| !fixed[i]).collect();
        let mass: f64 = free.iter().map(|&i| x[i]).sum();
        if free.is_empty() || mass <= 0.0 {
            break;
        }
        for &i in &free {
            x[i] += residual * x[i] / mass;
        }
    }

    // Whatever mass is still off goes to the coordinates with room left.
    let residual = 1.0 - x.iter().sum::<f64>();
    if residual.abs() > 1e-15 {
        let room: Vec<f64> = x
            .iter()
            .map(|&v| if residual > 0.0 { w_max - v } else { v - w_min })
            .collect();
        let total: f64 = room.iter().sum();
        if total < residual.abs() - SUM_TOL {
            return Err(FuseError::Infeasible(format!(
                "cannot place mass {residual} within [{w_min}, {w_max}]"
            )));
        }
        for (v, r) in x.iter_mut().zip(&room) {
            *v += residual * r / total;
        }
    }
    for v in &mut x {
        *v = v.clamp(w_min, w_max);
    }
    Ok(WeightVector {
        w: x,
        bounds: Some((w_min, w_max)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMode {
    Equal,
    /// Weights proportional to each channel's hits on validation truth.
    Statistical,
}

/// Equal weights, or weights proportional to `Σ_u |L_uk ∩ T_u|` over `users`.
/// All-zero hits fall back to equal weights.
pub fn baseline_weights(
    ds: &Dataset,
    mode: BaselineMode,
    validation: &GroundTruth,
    users: &[usize],
) -> WeightVector {
    let k = ds.n_channels();
    match mode {
        BaselineMode::Equal => WeightVector::uniform(k),
        BaselineMode::Statistical => {
            let hits: Vec<f64> = ds
                .channels
                .iter()
                .map(|c| {
                    users
                        .iter()
                        .map(|&u| validation.hits(u, c.list(u)))
                        .sum::<usize>() as f64
                })
                .collect();
            weights_from_hits(&hits)
        }
    }
}

/// Normalize hit counts; zero total gives equal weights.
pub fn weights_from_hits(hits: &[f64]) -> WeightVector {
    WeightVector::normalized(hits).unwrap_or_else(|_| WeightVector::uniform(hits.len()))
}
