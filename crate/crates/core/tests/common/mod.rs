#![allow(dead_code)]

use chanfuse::ingest::ChannelRanking;
use chanfuse::{Dataset, GroundTruth, ItemId, WeightVector};
use rand::seq::SliceRandom;
use rand::Rng;

/// Weights given as integer counts so the oracle can work in exact
/// arithmetic: `w_k = counts[k] / Σ counts`.
#[derive(Debug, Clone)]
pub struct CountWeights {
    pub counts: Vec<u64>,
}

impl CountWeights {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn to_weights(&self) -> WeightVector {
        let total = self.total() as f64;
        let w: Vec<f64> = self.counts.iter().map(|&c| c as f64 / total).collect();
        WeightVector::normalized(&w).unwrap()
    }
}

/// Random dataset with `users` users, `k` channels of depth between
/// `min_depth` and `max_depth`, over `items` items.
pub fn random_dataset<R: Rng>(
    rng: &mut R,
    users: usize,
    k: usize,
    items: usize,
    min_depth: usize,
    max_depth: usize,
) -> Dataset {
    let mut universe: Vec<ItemId> = (0..items as ItemId).collect();
    let channels = (0..k)
        .map(|c| {
            let lists = (0..users)
                .map(|_| {
                    universe.shuffle(rng);
                    let depth = rng.random_range(min_depth..=max_depth);
                    universe[..depth].to_vec()
                })
                .collect();
            ChannelRanking::new(c, format!("c{c}"), lists)
        })
        .collect();
    let truth = (0..users)
        .map(|_| {
            universe.shuffle(rng);
            let n = rng.random_range(1..=items.min(8));
            universe[..n].to_vec()
        })
        .collect();
    Dataset {
        users: (0..users).map(|u| format!("u{u:03}")).collect(),
        items: (0..items).map(|i| format!("i{i:03}")).collect(),
        channels,
        truth: GroundTruth::new(truth),
        history: None,
        embeddings: None,
    }
}

pub fn random_counts<R: Rng>(rng: &mut R, k: usize) -> CountWeights {
    loop {
        let counts: Vec<u64> = (0..k).map(|_| rng.random_range(0..=12)).collect();
        if counts.iter().any(|&c| c > 0) {
            return CountWeights { counts };
        }
    }
}

/// Quotas in exact integer arithmetic: `w_k L = counts_k L / S`.
pub fn naive_quotas(w: &CountWeights, l: usize, caps: &[usize]) -> Vec<usize> {
    let s = w.total() as i128;
    let l = l as i128;
    let k = w.counts.len();
    // nearest integer, halves up: floor((2cL + S) / 2S)
    let mut q: Vec<i128> = w
        .counts
        .iter()
        .zip(caps)
        .map(|(&c, &cap)| ((2 * c as i128 * l + s) / (2 * s)).min(cap as i128))
        .collect();
    // residual in units of 1/S
    let resid = |q: &[i128], j: usize| w.counts[j] as i128 * l - q[j] * s;
    while q.iter().sum::<i128>() < l {
        let mut pick: Option<usize> = None;
        for j in 0..k {
            if q[j] < caps[j] as i128 && pick.is_none_or(|p| resid(&q, j) > resid(&q, p)) {
                pick = Some(j);
            }
        }
        q[pick.unwrap()] += 1;
    }
    while q.iter().sum::<i128>() > l {
        let mut pick: Option<usize> = None;
        for j in 0..k {
            if q[j] > 0 && pick.is_none_or(|p| resid(&q, j) < resid(&q, p)) {
                pick = Some(j);
            }
        }
        q[pick.unwrap()] -= 1;
    }
    q.into_iter().map(|x| x as usize).collect()
}

/// Merge from scratch with vectors and linear membership scans.
pub fn naive_merge(ds: &Dataset, user: usize, w: &CountWeights, l: usize) -> Vec<ItemId> {
    let lists: Vec<Vec<ItemId>> = ds.channels.iter().map(|c| c.lists[user].clone()).collect();
    let caps: Vec<usize> = lists.iter().map(Vec::len).collect();
    let budget = l.min(caps.iter().sum());
    let quota = naive_quotas(w, budget, &caps);
    let mut order: Vec<usize> = (0..lists.len()).collect();
    order.sort_by(|&a, &b| w.counts[b].cmp(&w.counts[a]).then(a.cmp(&b)));
    let mut out: Vec<ItemId> = Vec::new();
    for &k in &order {
        for &item in &lists[k][..quota[k]] {
            if !out.contains(&item) {
                out.push(item);
            }
        }
    }
    let mut next = quota.clone();
    loop {
        let mut progressed = false;
        for &k in &order {
            if out.len() >= l {
                break;
            }
            while next[k] < lists[k].len() {
                let item = lists[k][next[k]];
                next[k] += 1;
                if !out.contains(&item) {
                    out.push(item);
                    progressed = true;
                    break;
                }
            }
        }
        if out.len() >= l || !progressed {
            break;
        }
    }
    out
}

/// Mean recall over all users, recomputing intersections from scratch.
pub fn naive_recall(ds: &Dataset, w: &CountWeights, l: usize) -> f64 {
    let mut sum = 0.0;
    for u in 0..ds.n_users() {
        let merged = naive_merge(ds, u, w, l);
        let truth = ds.truth.set(u);
        let hits = merged.iter().filter(|i| truth.contains(i)).count();
        sum += hits as f64 / truth.len() as f64;
    }
    sum / ds.n_users() as f64
}
