//! Seeded synthetic benchmarks with controllable channel quality, overlap
//! and user segments.
//!
//! Users and items get latent vectors drawn from N(0, 1/d). A user's relevant
//! pool is the top items by latent dot product plus Gaussian noise. With
//! history enabled the pool has `2 · truth_size` items split at random into
//! the evaluation truth and a disjoint history set.
//!
//! Channel k includes each pool item with probability `q_k` (raised by
//! `boost` for a segment's favored channel). The uniforms behind these draws
//! are shared across channels, so a better channel's relevant items are a
//! superset of a worse one's. Included items sit in the first
//! `n + (1 − q)(C − n)` slots; the rest of the list is channel-specific
//! Zipf-skewed distractors.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FuseError, Result};
use crate::ingest::{ChannelRanking, Dataset, EmbeddingTable, GroundTruth, ItemId};
use crate::rng::{stream, Domain};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelProfile {
    #[serde(default)]
    pub name: Option<String>,
    pub quality: f64,
    /// Copy distractors from an earlier channel at this rate.
    #[serde(default)]
    pub overlap_with: Option<Overlap>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overlap {
    pub channel: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub fraction: f64,
    pub favored: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    /// List depth C of every channel.
    pub depth: usize,
    pub truth_size: usize,
    pub dim: usize,
    pub channels: Vec<ChannelProfile>,
    #[serde(default)]
    pub segments: Vec<Segment>,
    /// Quality added to a segment's favored channel.
    #[serde(default = "default_boost")]
    pub boost: f64,
    /// Emit a history set disjoint from the truth.
    #[serde(default)]
    pub history: bool,
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Zipf exponent of the distractor popularity.
    #[serde(default = "default_zipf")]
    pub zipf: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_boost() -> f64 {
    0.5
}
fn default_noise() -> f64 {
    0.1
}
fn default_zipf() -> f64 {
    0.8
}

fn profiles(quality: &[f64]) -> Vec<ChannelProfile> {
    quality
        .iter()
        .map(|&q| ChannelProfile {
            name: None,
            quality: q,
            overlap_with: None,
        })
        .collect()
}

pub const PRESETS: [&str; 3] = ["dominant-channel", "two-segment", "uniform-noise"];

impl SyntheticSpec {
    /// Channel 0 ranks every relevant item first; eight weak channels.
    pub fn dominant_channel(seed: u64) -> Self {
        let mut quality = vec![0.2; 9];
        quality[0] = 1.0;
        SyntheticSpec {
            n_users: 1000,
            n_items: 3000,
            depth: 200,
            truth_size: 180,
            dim: 32,
            channels: profiles(&quality),
            segments: Vec::new(),
            boost: default_boost(),
            history: false,
            noise: default_noise(),
            zipf: default_zipf(),
            seed,
        }
    }

    /// Two halves of the users, each best served by a different channel.
    pub fn two_segment(seed: u64) -> Self {
        SyntheticSpec {
            n_users: 1000,
            n_items: 2000,
            depth: 100,
            truth_size: 30,
            dim: 32,
            channels: profiles(&[0.2, 0.2, 0.1, 0.1]),
            segments: vec![
                Segment {
                    fraction: 0.5,
                    favored: 0,
                },
                Segment {
                    fraction: 0.5,
                    favored: 1,
                },
            ],
            boost: default_boost(),
            history: true,
            noise: default_noise(),
            zipf: default_zipf(),
            seed,
        }
    }

    /// Four interchangeable mediocre channels.
    pub fn uniform_noise(seed: u64) -> Self {
        SyntheticSpec {
            n_users: 500,
            n_items: 2000,
            depth: 100,
            truth_size: 30,
            dim: 16,
            channels: profiles(&[0.3; 4]),
            segments: Vec::new(),
            boost: default_boost(),
            history: true,
            noise: default_noise(),
            zipf: default_zipf(),
            seed,
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "dominant-channel" => Ok(Self::dominant_channel(seed)),
            "two-segment" => Ok(Self::two_segment(seed)),
            "uniform-noise" => Ok(Self::uniform_noise(seed)),
            other => Err(FuseError::validation(format!(
                "unknown preset `{other}` (expected one of {})",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    fn pool_size(&self) -> usize {
        if self.history {
            2 * self.truth_size
        } else {
            self.truth_size
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.n_channels();
        if self.n_users == 0 || self.n_items == 0 || k == 0 || self.dim == 0 {
            return Err(FuseError::validation("users, items, channels and dim must be positive"));
        }
        if self.depth == 0 || self.truth_size == 0 {
            return Err(FuseError::validation("depth and truth_size must be positive"));
        }
        if self.depth > self.n_items {
            return Err(FuseError::Infeasible(format!(
                "depth {} exceeds the item count {}",
                self.depth, self.n_items
            )));
        }
        if self.pool_size() + self.depth > self.n_items {
            return Err(FuseError::Infeasible(format!(
                "{} relevant items plus depth {} exceed the item count {}",
                self.pool_size(),
                self.depth,
                self.n_items
            )));
        }
        for (i, c) in self.channels.iter().enumerate() {
            if !(0.0..=1.0).contains(&c.quality) {
                return Err(FuseError::validation(format!("channel {i}: quality must lie in [0, 1]")));
            }
            if let Some(o) = c.overlap_with {
                if o.channel >= i || !(0.0..=1.0).contains(&o.rate) {
                    return Err(FuseError::validation(format!(
                        "channel {i}: overlap must name an earlier channel with a rate in [0, 1]"
                    )));
                }
            }
        }
        let total: f64 = self.segments.iter().map(|s| s.fraction).sum();
        if self.segments.iter().any(|s| !(s.fraction >= 0.0) || s.favored >= k) || total > 1.0 + 1e-9 {
            return Err(FuseError::validation(
                "segment fractions must be non-negative, sum to at most 1, and favor existing channels",
            ));
        }
        if !(self.boost >= 0.0) || !(self.noise >= 0.0) || !(self.zipf >= 0.0) {
            return Err(FuseError::validation("boost, noise and zipf must be non-negative"));
        }
        Ok(())
    }

    /// Segment index of each user; users past the covered fraction get none.
    pub fn segment_of(&self) -> Vec<Option<usize>> {
        let n = self.n_users as f64;
        let mut bounds = Vec::with_capacity(self.segments.len());
        let mut acc = 0.0;
        for s in &self.segments {
            acc += s.fraction;
            bounds.push((acc * n).round() as usize);
        }
        (0..self.n_users)
            .map(|u| bounds.iter().position(|&b| u < b))
            .collect()
    }

    fn effective_quality(&self, segment: Option<usize>, k: usize) -> f64 {
        let q = self.channels[k].quality;
        match segment {
            Some(s) if self.segments[s].favored == k => (q + self.boost).min(1.0),
            _ => q,
        }
    }
}

pub fn user_id(u: usize) -> String {
    format!("u{u:05}")
}

pub fn item_id(i: usize) -> String {
    format!("i{i:05}")
}

fn gaussian_vec<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    let scale = 1.0 / (dim as f64).sqrt();
    (0..dim)
        .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect()
}

struct UserDraw {
    truth: Vec<ItemId>,
    history: Vec<ItemId>,
    lists: Vec<Vec<ItemId>>,
    latent: Vec<f64>,
}

/// Per-channel log popularity weights over items.
fn popularity(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    (0..spec.n_channels())
        .map(|k| {
            let mut rank: Vec<usize> = (0..spec.n_items).collect();
            rank.shuffle(&mut stream(spec.seed, Domain::SynthItems, 1 + k as u64));
            let mut weight = vec![0.0; spec.n_items];
            for (r, &item) in rank.iter().enumerate() {
                weight[item] = -spec.zipf * ((r + 1) as f64).ln();
            }
            weight
        })
        .collect()
}

fn draw_user(
    spec: &SyntheticSpec,
    u: usize,
    segment: Option<usize>,
    item_vecs: &[Vec<f64>],
    log_pop: &[Vec<f64>],
) -> UserDraw {
    let mut rng = stream(spec.seed, Domain::SynthUser, u as u64);
    let latent = gaussian_vec(spec.dim, &mut rng);
    let noise = Normal::new(0.0, spec.noise).expect("validated noise");
    let scores: Vec<f64> = item_vecs
        .iter()
        .map(|v| v.iter().zip(&latent).map(|(a, b)| a * b).sum::<f64>() + noise.sample(&mut rng))
        .collect();
    let mut order: Vec<usize> = (0..spec.n_items).collect();
    let pool_n = spec.pool_size();
    order.select_nth_unstable_by(pool_n - 1, |&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut pool: Vec<usize> = order[..pool_n].to_vec();
    pool.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let (truth, history): (Vec<usize>, Vec<usize>) = if spec.history {
        let mut shuffled = pool.clone();
        shuffled.shuffle(&mut rng);
        let (t, h) = shuffled.split_at(spec.truth_size);
        let rank = |xs: &[usize]| {
            let set: HashSet<usize> = xs.iter().copied().collect();
            pool.iter().copied().filter(|i| set.contains(i)).collect::<Vec<_>>()
        };
        (rank(t), rank(h))
    } else {
        (pool.clone(), Vec::new())
    };
    let in_pool: HashSet<usize> = pool.iter().copied().collect();
    // Shared across channels so that inclusion sets nest by quality.
    let coupling: HashMap<usize, f64> = pool.iter().map(|&i| (i, rng.random::<f64>())).collect();
    let coupled = |i: usize| coupling[&i];

    let c = spec.depth;
    let k_n = spec.n_channels();
    let mut lists: Vec<Vec<ItemId>> = Vec::with_capacity(k_n);
    let mut distractors: Vec<Vec<usize>> = Vec::with_capacity(k_n);
    for k in 0..k_n {
        let mut crng = stream(spec.seed, Domain::SynthChannel, (u * k_n + k) as u64);
        let q = spec.effective_quality(segment, k);
        let included: Vec<usize> = truth
            .iter()
            .chain(&history)
            .copied()
            .filter(|&i| coupled(i) < q)
            .take(c)
            .collect();
        let n = included.len();
        let spread = ((n as f64 + (1.0 - q) * (c - n) as f64).round() as usize).clamp(n, c);
        let mut slot_perm: Vec<usize> = (0..c).collect();
        slot_perm.shuffle(&mut crng);
        let mut slots: Vec<usize> = slot_perm.into_iter().filter(|&s| s < spread).take(n).collect();
        slots.sort_unstable();

        // Efraimidis–Spirakis keys: log(U) / weight, largest first.
        let mut keyed: Vec<(f64, usize)> = (0..spec.n_items)
            .map(|i| {
                let uni: f64 = crng.random::<f64>().max(f64::MIN_POSITIVE);
                (uni.ln() * (-log_pop[k][i]).exp(), i)
            })
            .filter(|&(_, i)| !in_pool.contains(&i))
            .collect();
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let own: Vec<usize> = keyed.into_iter().map(|(_, i)| i).take(c).collect();

        let mut list: Vec<Option<usize>> = vec![None; c];
        for (&s, &i) in slots.iter().zip(&included) {
            list[s] = Some(i);
        }
        let mut used: HashSet<usize> = included.iter().copied().collect();
        let mut own_iter = own.iter().copied();
        let mut copy_iter = spec.channels[k]
            .overlap_with
            .map(|o| (o.rate, distractors[o.channel].clone().into_iter()));
        let mut mine = Vec::with_capacity(c - n);
        for slot in list.iter_mut().filter(|s| s.is_none()) {
            let copy_draw: f64 = crng.random();
            let mut pick = None;
            if let Some((rate, it)) = copy_iter.as_mut() {
                if copy_draw < *rate {
                    pick = it.by_ref().find(|i| !used.contains(i));
                }
            }
            let pick = pick.or_else(|| own_iter.by_ref().find(|i| !used.contains(i)));
            let pick = pick.expect("validated item count leaves enough distractors");
            used.insert(pick);
            mine.push(pick);
            *slot = Some(pick);
        }
        distractors.push(mine);
        lists.push(list.into_iter().map(|s| s.expect("filled") as ItemId).collect());
    }
    UserDraw {
        truth: truth.into_iter().map(|i| i as ItemId).collect(),
        history: history.into_iter().map(|i| i as ItemId).collect(),
        lists,
        latent,
    }
}

/// Generate the dataset described by `spec`. Identical specs give identical
/// datasets.
pub fn generate_benchmark(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut irng = stream(spec.seed, Domain::SynthItems, 0);
    let item_vecs: Vec<Vec<f64>> = (0..spec.n_items).map(|_| gaussian_vec(spec.dim, &mut irng)).collect();
    let log_pop = popularity(spec);
    let segments = spec.segment_of();
    let draws: Vec<UserDraw> = (0..spec.n_users)
        .into_par_iter()
        .map(|u| draw_user(spec, u, segments[u], &item_vecs, &log_pop))
        .collect();

    let k_n = spec.n_channels();
    let mut per_channel: Vec<Vec<Vec<ItemId>>> = vec![Vec::with_capacity(spec.n_users); k_n];
    let mut truth = Vec::with_capacity(spec.n_users);
    let mut history = Vec::with_capacity(spec.n_users);
    let mut user_vecs = Vec::with_capacity(spec.n_users);
    for d in draws {
        for (k, list) in d.lists.into_iter().enumerate() {
            per_channel[k].push(list);
        }
        truth.push(d.truth);
        history.push(d.history);
        user_vecs.push(Some(d.latent));
    }
    let channels = per_channel
        .into_iter()
        .enumerate()
        .map(|(k, lists)| {
            let name = spec.channels[k].name.clone().unwrap_or_else(|| format!("ch{k}"));
            ChannelRanking::new(k, name, lists)
        })
        .collect();
    Ok(Dataset {
        users: (0..spec.n_users).map(user_id).collect(),
        items: (0..spec.n_items).map(item_id).collect(),
        channels,
        truth: GroundTruth::new(truth),
        history: spec.history.then(|| GroundTruth::new(history)),
        embeddings: Some(EmbeddingTable {
            dim: spec.dim,
            user_vecs,
            item_vecs: item_vecs.into_iter().map(Some).collect(),
        }),
    })
}

/// Shuffle `0..n` and cut it into consecutive parts with the given
/// fractions; the last part takes the remainder.
pub fn split_users(n: usize, fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    if fractions.is_empty() || fractions.iter().any(|f| !(*f >= 0.0)) || fractions.iter().sum::<f64>() > 1.0 + 1e-9 {
        return Err(FuseError::validation("split fractions must be non-negative and sum to at most 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, Domain::Split, 0));
    let mut parts = Vec::with_capacity(fractions.len());
    let mut start = 0;
    for (i, f) in fractions.iter().enumerate() {
        let end = if i + 1 == fractions.len() {
            n
        } else {
            (start + (f * n as f64).round() as usize).min(n)
        };
        let mut part = order[start..end].to_vec();
        part.sort_unstable();
        parts.push(part);
        start = end;
    }
    Ok(parts)
}
