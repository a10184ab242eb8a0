//! Personalized channel weights from a small policy network.
//!
//! The network maps a user state (user vector `u`, per-channel recall `r`,
//! per-channel pooled item vectors `c_k`) to Dirichlet parameters:
//!
//! ```text
//! h_u  = ReLU(W_u u + b_u)
//! h_ck = ReLU(W_c c_k + b_c)
//! e_k  = h_u · h_ck + r_k
//! α_k  = ReLU(δ_max tanh(e_k)) + ε
//! ```
//!
//! Training samples weights from Dirichlet(α), scores the merged sets, and
//! follows the score-function gradient `E[A ∇θ log π(w | s)]`. The gradient
//! through the network is written out by hand.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dirichlet::{grad_alpha_raw, log_pdf_raw, mean_raw, sample_raw};
use crate::error::{FuseError, Result};
use crate::fusion::{merge_user_with, MergeScratch, PersonalizedWeights, WeightVector};
use crate::ingest::Dataset;
use crate::metrics::{channel_recall, evaluate_user, Metric};
use crate::rng::{stream, Domain};

/// Policy input for one user.
#[derive(Debug, Clone, PartialEq)]
pub struct UserState {
    pub user: usize,
    pub u_vec: Vec<f64>,
    /// Per-channel recall on the training truth, in [0, 1].
    pub recall: Vec<f64>,
    /// Mean embedding of each channel's top-m items, K × d.
    pub channel_vecs: Vec<Vec<f64>>,
}

/// Build the state of `user` from the dataset embeddings.
pub fn build_user_state(ds: &Dataset, user: usize, top_m: usize) -> Result<UserState> {
    let emb = ds
        .embeddings
        .as_ref()
        .ok_or_else(|| FuseError::validation("policy training needs embeddings"))?;
    if top_m == 0 {
        return Err(FuseError::validation("top_m must be positive"));
    }
    let u_vec = emb.user_vecs[user]
        .clone()
        .ok_or_else(|| FuseError::validation(format!("missing embedding for user `{}`", ds.users[user])))?;
    let truth = ds.training_truth();
    let mut channel_vecs = Vec::with_capacity(ds.n_channels());
    let mut recall = Vec::with_capacity(ds.n_channels());
    for (k, channel) in ds.channels.iter().enumerate() {
        let top = &channel.list(user)[..top_m.min(channel.list(user).len())];
        if top.is_empty() {
            return Err(FuseError::validation(format!(
                "channel `{}` has no items for user `{}`",
                channel.name, ds.users[user]
            )));
        }
        let mut pooled = vec![0.0; emb.dim];
        for &item in top {
            let v = emb.item_vecs[item as usize].as_ref().ok_or_else(|| {
                FuseError::validation(format!("missing embedding for item `{}`", ds.items[item as usize]))
            })?;
            pooled.iter_mut().zip(v).for_each(|(p, x)| *p += x);
        }
        pooled.iter_mut().for_each(|p| *p /= top.len() as f64);
        channel_vecs.push(pooled);
        recall.push(channel_recall(ds, k, user, truth));
    }
    Ok(UserState {
        user,
        u_vec,
        recall,
        channel_vecs,
    })
}

/// States for every user of the dataset, in user order.
pub fn build_states(ds: &Dataset, top_m: usize) -> Result<Vec<UserState>> {
    (0..ds.n_users())
        .into_par_iter()
        .map(|u| build_user_state(ds, u, top_m))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub dim: usize,
    pub hidden: usize,
    pub delta_max: f64,
    pub eps: f64,
}

/// Network weights θ. Also used for gradients and momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    pub w_u: DMatrix<f64>,
    pub b_u: DVector<f64>,
    pub w_c: DMatrix<f64>,
    pub b_c: DVector<f64>,
}

impl Theta {
    pub fn zeros(hidden: usize, dim: usize) -> Self {
        Theta {
            w_u: DMatrix::zeros(hidden, dim),
            b_u: DVector::zeros(hidden),
            w_c: DMatrix::zeros(hidden, dim),
            b_c: DVector::zeros(hidden),
        }
    }

    fn parts(&self) -> [&[f64]; 4] {
        [
            self.w_u.as_slice(),
            self.b_u.as_slice(),
            self.w_c.as_slice(),
            self.b_c.as_slice(),
        ]
    }

    fn parts_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w_u.as_mut_slice(),
            self.b_u.as_mut_slice(),
            self.w_c.as_mut_slice(),
            self.b_c.as_mut_slice(),
        ]
    }

    pub fn len(&self) -> usize {
        self.parts().iter().map(|p| p.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat view in the order w_u, b_u, w_c, b_c (matrices column-major).
    pub fn flat(&self) -> Vec<f64> {
        self.parts().concat()
    }

    pub fn get(&self, mut i: usize) -> f64 {
        for p in self.parts() {
            if i < p.len() {
                return p[i];
            }
            i -= p.len();
        }
        panic!("parameter index out of range")
    }

    pub fn set(&mut self, mut i: usize, v: f64) {
        for p in self.parts_mut() {
            if i < p.len() {
                p[i] = v;
                return;
            }
            i -= p.len();
        }
        panic!("parameter index out of range")
    }

    /// self += scale · other
    pub fn axpy(&mut self, scale: f64, other: &Theta) {
        for (dst, src) in self.parts_mut().into_iter().zip(other.parts()) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += scale * s);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for p in self.parts_mut() {
            p.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.parts()
            .iter()
            .flat_map(|p| p.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.parts().iter().all(|p| p.iter().all(|x| x.is_finite()))
    }
}

/// The policy network.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaGenerator {
    pub shape: PolicyShape,
    pub theta: Theta,
}

struct Forward {
    a_u: DVector<f64>,
    h_u: DVector<f64>,
    a_c: Vec<DVector<f64>>,
    h_c: Vec<DVector<f64>>,
    tanh: Vec<f64>,
    pre: Vec<f64>,
    alpha: Vec<f64>,
}

fn relu(v: &DVector<f64>) -> DVector<f64> {
    v.map(|x| x.max(0.0))
}

fn relu_mask(pre: &DVector<f64>, grad: &DVector<f64>) -> DVector<f64> {
    pre.zip_map(grad, |a, g| if a > 0.0 { g } else { 0.0 })
}

impl AlphaGenerator {
    /// Gaussian weights with standard deviation `init_scale / sqrt(dim)`,
    /// zero biases.
    pub fn init(shape: PolicyShape, init_scale: f64, seed: u64) -> Result<Self> {
        if !(shape.delta_max > 0.0 && shape.eps > 0.0) || shape.dim == 0 || shape.hidden == 0 {
            return Err(FuseError::validation("policy needs δ_max > 0, ε > 0 and non-empty layers"));
        }
        let normal = Normal::new(0.0, init_scale / (shape.dim as f64).sqrt())
            .map_err(|e| FuseError::validation(e.to_string()))?;
        let mut rng = stream(seed, Domain::PgInit, 0);
        let mut theta = Theta::zeros(shape.hidden, shape.dim);
        theta.w_u.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
        theta.w_c.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
        Ok(AlphaGenerator { shape, theta })
    }

    fn check(&self, s: &UserState) -> Result<()> {
        let d = self.shape.dim;
        if s.u_vec.len() != d || s.channel_vecs.iter().any(|c| c.len() != d) {
            return Err(FuseError::validation(format!(
                "state dimensions do not match the network (d = {d})"
            )));
        }
        if s.recall.len() != s.channel_vecs.len() {
            return Err(FuseError::validation("recall and channel vectors differ in length"));
        }
        Ok(())
    }

    fn forward(&self, s: &UserState) -> Result<Forward> {
        self.check(s)?;
        let t = &self.theta;
        let PolicyShape { delta_max, eps, .. } = self.shape;
        let a_u = &t.w_u * DVector::from_column_slice(&s.u_vec) + &t.b_u;
        let h_u = relu(&a_u);
        let a_c: Vec<DVector<f64>> = s
            .channel_vecs
            .iter()
            .map(|c| &t.w_c * DVector::from_column_slice(c) + &t.b_c)
            .collect();
        let h_c: Vec<DVector<f64>> = a_c.iter().map(relu).collect();
        let mut tanh = Vec::with_capacity(h_c.len());
        let mut pre = Vec::with_capacity(h_c.len());
        let mut alpha = Vec::with_capacity(h_c.len());
        for (k, hc) in h_c.iter().enumerate() {
            let e = h_u.dot(hc) + s.recall[k];
            let th = e.tanh();
            let p = delta_max * th;
            tanh.push(th);
            pre.push(p);
            alpha.push((p.max(0.0) + eps).clamp(eps, delta_max + eps));
        }
        if let Some(k) = alpha.iter().position(|a| !a.is_finite()) {
            return Err(FuseError::Numerical(format!(
                "non-finite α for channel {k}: h_u norm {}, h_c norm {}",
                h_u.norm(),
                h_c[k].norm()
            )));
        }
        Ok(Forward {
            a_u,
            h_u,
            a_c,
            h_c,
            tanh,
            pre,
            alpha,
        })
    }

    /// Dirichlet parameters for state `s`, each in `[ε, δ_max + ε]`.
    pub fn forward_alpha(&self, s: &UserState) -> Result<Vec<f64>> {
        Ok(self.forward(s)?.alpha)
    }

    /// Accumulate `scale · ∂ log π(w | s) / ∂θ` into `grad`, given
    /// `dlogpi_dalpha = ∂ log π / ∂α`.
    fn backward(&self, s: &UserState, f: &Forward, dlogpi_dalpha: &[f64], scale: f64, grad: &mut Theta) {
        let delta_max = self.shape.delta_max;
        let de: Vec<f64> = (0..f.alpha.len())
            .map(|k| {
                if f.pre[k] > 0.0 {
                    scale * dlogpi_dalpha[k] * delta_max * (1.0 - f.tanh[k] * f.tanh[k])
                } else {
                    0.0
                }
            })
            .collect();
        let mut dh_u = DVector::zeros(self.shape.hidden);
        for (k, hc) in f.h_c.iter().enumerate() {
            if de[k] == 0.0 {
                continue;
            }
            dh_u.axpy(de[k], hc, 1.0);
            let da_c = relu_mask(&f.a_c[k], &(&f.h_u * de[k]));
            let c = DVector::from_column_slice(&s.channel_vecs[k]);
            grad.w_c.ger(1.0, &da_c, &c, 1.0);
            grad.b_c += &da_c;
        }
        let da_u = relu_mask(&f.a_u, &dh_u);
        grad.w_u.ger(1.0, &da_u, &DVector::from_column_slice(&s.u_vec), 1.0);
        grad.b_u += &da_u;
    }

    pub fn to_checkpoint(&self) -> PolicyCheckpoint {
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            m.row_iter().map(|r| r.iter().copied().collect()).collect()
        };
        PolicyCheckpoint {
            shape: self.shape,
            w_u: rows(&self.theta.w_u),
            b_u: self.theta.b_u.as_slice().to_vec(),
            w_c: rows(&self.theta.w_c),
            b_c: self.theta.b_c.as_slice().to_vec(),
        }
    }

    pub fn from_checkpoint(c: &PolicyCheckpoint) -> Result<Self> {
        let (h, d) = (c.shape.hidden, c.shape.dim);
        let matrix = |rows: &[Vec<f64>], name: &str| -> Result<DMatrix<f64>> {
            if rows.len() != h || rows.iter().any(|r| r.len() != d) {
                return Err(FuseError::validation(format!("`{name}` must be {h}×{d}")));
            }
            Ok(DMatrix::from_fn(h, d, |i, j| rows[i][j]))
        };
        let vector = |v: &[f64], name: &str| -> Result<DVector<f64>> {
            if v.len() != h {
                return Err(FuseError::validation(format!("`{name}` must have {h} entries")));
            }
            Ok(DVector::from_column_slice(v))
        };
        Ok(AlphaGenerator {
            shape: c.shape,
            theta: Theta {
                w_u: matrix(&c.w_u, "w_u")?,
                b_u: vector(&c.b_u, "b_u")?,
                w_c: matrix(&c.w_c, "w_c")?,
                b_c: vector(&c.b_c, "b_c")?,
            },
        })
    }
}

/// JSON form of the network: named row-major matrices plus the shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub shape: PolicyShape,
    pub w_u: Vec<Vec<f64>>,
    pub b_u: Vec<f64>,
    pub w_c: Vec<Vec<f64>>,
    pub b_c: Vec<f64>,
}

/// A drawn weight vector with a fixed loss coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenSample {
    /// Index into the state slice.
    pub state: usize,
    pub w: Vec<f64>,
    pub coef: f64,
}

/// `Σ coef · log π_θ(w | s)` over frozen samples.
pub fn frozen_loss(generator: &AlphaGenerator, states: &[UserState], samples: &[FrozenSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let alpha = generator.forward_alpha(&states[s.state])?;
        total += s.coef * log_pdf_raw(&alpha, &s.w);
    }
    Ok(total)
}

/// Analytic gradient of [`frozen_loss`] in θ.
pub fn frozen_grad(generator: &AlphaGenerator, states: &[UserState], samples: &[FrozenSample]) -> Result<Theta> {
    let mut grad = Theta::zeros(generator.shape.hidden, generator.shape.dim);
    for s in samples {
        let state = &states[s.state];
        let f = generator.forward(state)?;
        let g = grad_alpha_raw(&f.alpha, &s.w);
        generator.backward(state, &f, &g, s.coef, &mut grad);
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PgConfig {
    /// Learning rate η₂.
    pub lr: f64,
    pub momentum: f64,
    /// Regularization weight λ towards the global weights.
    pub lambda: f64,
    /// Weight samples per user and step (S).
    pub samples: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Subtract the batch-mean return from every sample's return.
    pub baseline: bool,
    pub seed: u64,
    /// Items pooled per channel for the channel representation.
    pub top_m: usize,
    pub hidden: usize,
    pub delta_max: f64,
    pub eps: f64,
    pub init_scale: f64,
    /// Reward metric of the merged set.
    pub metric: Metric,
    /// Optional rescaling of the step gradient to this L2 norm.
    pub max_grad_norm: Option<f64>,
}

impl Default for PgConfig {
    fn default() -> Self {
        PgConfig {
            lr: 1e-4,
            momentum: 0.9,
            lambda: 1.0,
            samples: 1,
            batch_size: 64,
            epochs: 10,
            baseline: true,
            seed: 0,
            top_m: 10,
            hidden: 64,
            delta_max: 10.0,
            eps: 1e-6,
            init_scale: 0.1,
            metric: Metric::Recall,
            max_grad_norm: None,
        }
    }
}

impl PgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.lambda < 0.0 || self.samples == 0 || self.batch_size == 0 {
            return Err(FuseError::validation(
                "policy config needs lr > 0, λ >= 0, samples >= 1 and batch_size >= 1",
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(FuseError::validation("momentum must lie in [0, 1)"));
        }
        if !(self.delta_max > 0.0 && self.eps > 0.0) {
            return Err(FuseError::validation("δ_max and ε must be positive"));
        }
        if let Some(n) = self.max_grad_norm {
            if !(n > 0.0) {
                return Err(FuseError::validation("max_grad_norm must be positive"));
            }
        }
        Ok(())
    }

    pub fn shape(&self, dim: usize) -> PolicyShape {
        PolicyShape {
            dim,
            hidden: self.hidden,
            delta_max: self.delta_max,
            eps: self.eps,
        }
    }
}

/// Per-step summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    /// `−mean R + λ · mean ‖w − w_global‖²` over the drawn samples.
    pub loss: f64,
    pub mean_reward: f64,
    pub mean_penalty: f64,
    pub grad_norm: f64,
}

/// Optimizer state carried across steps.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub generator: AlphaGenerator,
    pub velocity: Theta,
    pub steps: u64,
}

impl Trainer {
    pub fn new(generator: AlphaGenerator) -> Self {
        let velocity = Theta::zeros(generator.shape.hidden, generator.shape.dim);
        Trainer {
            generator,
            velocity,
            steps: 0,
        }
    }
}

/// A drawn weight vector and the reward of its merged set.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    /// Index into the state slice.
    pub state: usize,
    pub w: Vec<f64>,
    pub reward: f64,
}

/// Squared L2 distance to the global weights.
pub fn penalty(w: &[f64], w_global: &WeightVector) -> f64 {
    w.iter()
        .zip(w_global.as_slice())
        .map(|(a, b)| (a - b).powi(2))
        .sum()
}

/// Score-function gradient of the training loss over `samples`.
///
/// Each sample's return is `R − λ‖w − w_global‖²`; with `baseline` the mean
/// return is subtracted. The result is `−(1/n) Σ A ∇θ log π(w | s)`.
pub fn reinforce_grad(
    generator: &AlphaGenerator,
    states: &[UserState],
    samples: &[ScoredSample],
    w_global: &WeightVector,
    lambda: f64,
    baseline: bool,
) -> Result<Theta> {
    if samples.is_empty() {
        return Err(FuseError::validation("no samples"));
    }
    let n = samples.len() as f64;
    let returns: Vec<f64> = samples
        .iter()
        .map(|s| s.reward - lambda * penalty(&s.w, w_global))
        .collect();
    let b = if baseline { returns.iter().sum::<f64>() / n } else { 0.0 };
    let frozen: Vec<FrozenSample> = samples
        .iter()
        .zip(&returns)
        .map(|(s, r)| FrozenSample {
            state: s.state,
            w: s.w.clone(),
            coef: -(r - b) / n,
        })
        .collect();
    frozen_grad(generator, states, &frozen)
}

/// Draw `cfg.samples` weight vectors for one state and score their merged sets.
fn draw_user(
    generator: &AlphaGenerator,
    states: &[UserState],
    si: usize,
    ds: &Dataset,
    l: usize,
    cfg: &PgConfig,
    stream_index: u64,
    scratch: &mut MergeScratch,
) -> Result<Vec<ScoredSample>> {
    let state = &states[si];
    let alpha = generator.forward_alpha(state)?;
    let mut rng = stream(cfg.seed, Domain::PgSample, stream_index);
    (0..cfg.samples)
        .map(|_| {
            let w = sample_raw(&alpha, &mut rng);
            let merged = merge_user_with(ds, state.user, &WeightVector::new(w.clone())?, l, scratch)?;
            let reward = evaluate_user(&merged, &ds.truth)?.get(cfg.metric);
            Ok(ScoredSample { state: si, w, reward })
        })
        .collect()
}

/// One REINFORCE step on `batch` (indices into `states`) followed by a
/// momentum SGD update.
pub fn policy_grad_step(
    trainer: &mut Trainer,
    states: &[UserState],
    batch: &[usize],
    cfg: &PgConfig,
    w_global: &WeightVector,
    ds: &Dataset,
    l: usize,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(FuseError::validation("empty batch"));
    }
    let generator = &trainer.generator;
    let universe = ds.item_universe_size();
    let step_key = trainer.steps << 32;
    let drawn: Vec<Vec<ScoredSample>> = batch
        .par_iter()
        .enumerate()
        .map_init(
            || MergeScratch::new(universe),
            |scratch, (pos, &si)| draw_user(generator, states, si, ds, l, cfg, step_key | pos as u64, scratch),
        )
        .collect::<Result<_>>()?;
    let samples: Vec<ScoredSample> = drawn.into_iter().flatten().collect();
    let n = samples.len() as f64;
    let mean_reward = samples.iter().map(|s| s.reward).sum::<f64>() / n;
    let mean_penalty = samples.iter().map(|s| penalty(&s.w, w_global)).sum::<f64>() / n;

    let mut grad = reinforce_grad(generator, states, &samples, w_global, cfg.lambda, cfg.baseline)?;
    if !grad.is_finite() {
        return Err(FuseError::Numerical("policy gradient is not finite".into()));
    }
    let grad_norm = grad.norm();
    if let Some(max) = cfg.max_grad_norm {
        if grad_norm > max {
            grad.scale(max / grad_norm);
        }
    }

    trainer.velocity.scale(cfg.momentum);
    trainer.velocity.axpy(1.0, &grad);
    let velocity = trainer.velocity.clone();
    trainer.generator.theta.axpy(-cfg.lr, &velocity);
    trainer.steps += 1;
    Ok(StepReport {
        loss: -mean_reward + cfg.lambda * mean_penalty,
        mean_reward,
        mean_penalty,
        grad_norm,
    })
}

/// Deterministic per-user weights: the mean of Dirichlet(α_u).
pub fn infer_weights(generator: &AlphaGenerator, ds: &Dataset, states: &[UserState]) -> Result<PersonalizedWeights> {
    let per_user = states
        .par_iter()
        .map(|s| Ok((ds.users[s.user].clone(), mean_raw(&generator.forward_alpha(s)?))))
        .collect::<Result<Vec<_>>>()?;
    Ok(PersonalizedWeights {
        per_user: per_user.into_iter().collect(),
    })
}

/// Deterministic policy quality over a user subset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PolicyEval {
    /// Mean metric of the merged sets.
    pub metric: f64,
    /// Mean `‖w_u − w_global‖²`.
    pub penalty: f64,
}

impl PolicyEval {
    /// The regularized objective `metric − λ · penalty`.
    pub fn objective(&self, lambda: f64) -> f64 {
        self.metric - lambda * self.penalty
    }
}

/// Score the mean-weight policy over `users` (indices into `states`).
pub fn policy_eval(
    generator: &AlphaGenerator,
    ds: &Dataset,
    states: &[UserState],
    users: &[usize],
    l: usize,
    metric: Metric,
    w_global: &WeightVector,
) -> Result<PolicyEval> {
    if users.is_empty() {
        return Err(FuseError::validation("no users to score"));
    }
    let universe = ds.item_universe_size();
    let scores: Vec<(f64, f64)> = users
        .par_iter()
        .map_init(
            || MergeScratch::new(universe),
            |scratch, &si| {
                let s = &states[si];
                let w = mean_raw(&generator.forward_alpha(s)?);
                let merged = merge_user_with(ds, s.user, &w, l, scratch)?;
                Ok((evaluate_user(&merged, &ds.truth)?.get(metric), penalty(w.as_slice(), w_global)))
            },
        )
        .collect::<Result<_>>()?;
    let n = scores.len() as f64;
    Ok(PolicyEval {
        metric: scores.iter().fold(0.0, |a, s| a + s.0) / n,
        penalty: scores.iter().fold(0.0, |a, s| a + s.1) / n,
    })
}

/// Mean metric of the mean-weight policy over `users`.
pub fn policy_score(
    generator: &AlphaGenerator,
    ds: &Dataset,
    states: &[UserState],
    users: &[usize],
    l: usize,
    metric: Metric,
) -> Result<f64> {
    let k = ds.n_channels();
    Ok(policy_eval(generator, ds, states, users, l, metric, &WeightVector::uniform(k))?.metric)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PgEpoch {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_reward: f64,
    pub select: PolicyEval,
    /// `select.metric − λ · select.penalty`, the model-selection criterion.
    pub select_score: f64,
}

#[derive(Debug, Clone)]
pub struct PgOutcome {
    pub generator: AlphaGenerator,
    pub best_epoch: usize,
    pub best_score: f64,
    pub history: Vec<PgEpoch>,
}

/// Train on `train` and keep the epoch whose mean-weight policy has the best
/// regularized objective on `select`. Both are indices into `states`.
pub fn train_pg(
    ds: &Dataset,
    states: &[UserState],
    train: &[usize],
    select: &[usize],
    w_global: &WeightVector,
    cfg: &PgConfig,
    l: usize,
) -> Result<PgOutcome> {
    cfg.validate()?;
    if train.is_empty() || select.is_empty() {
        return Err(FuseError::validation("policy training needs training and selection users"));
    }
    if w_global.len() != ds.n_channels() {
        return Err(FuseError::validation("global weights do not match the channel count"));
    }
    let dim = states
        .first()
        .map(|s| s.u_vec.len())
        .ok_or_else(|| FuseError::validation("no user states"))?;
    let mut trainer = Trainer::new(AlphaGenerator::init(cfg.shape(dim), cfg.init_scale, cfg.seed)?);
    let mut best: Option<(f64, usize, AlphaGenerator)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order = train.to_vec();
    for epoch in 1..=cfg.epochs {
        order.copy_from_slice(train);
        order.shuffle(&mut stream(cfg.seed, Domain::PgShuffle, epoch as u64));
        let (mut loss, mut reward, mut batches) = (0.0, 0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let r = policy_grad_step(&mut trainer, states, batch, cfg, w_global, ds, l)?;
            loss += r.loss;
            reward += r.mean_reward;
            batches += 1;
        }
        let eval = policy_eval(&trainer.generator, ds, states, select, l, cfg.metric, w_global)?;
        let score = eval.objective(cfg.lambda);
        history.push(PgEpoch {
            epoch,
            mean_loss: loss / batches as f64,
            mean_reward: reward / batches as f64,
            select: eval,
            select_score: score,
        });
        log::debug!("pg epoch {epoch}: loss {:.6} select {:.6}", loss / batches as f64, score);
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, epoch, trainer.generator.clone()));
        }
    }
    let (best_score, best_epoch, generator) = match best {
        Some(b) => b,
        None => {
            let eval = policy_eval(&trainer.generator, ds, states, select, l, cfg.metric, w_global)?;
            (eval.objective(cfg.lambda), 0, trainer.generator)
        }
    };
    Ok(PgOutcome {
        generator,
        best_epoch,
        best_score,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(dim: usize, hidden: usize) -> PolicyShape {
        PolicyShape {
            dim,
            hidden,
            delta_max: 10.0,
            eps: 1e-6,
        }
    }

    fn state(recall: Vec<f64>, dim: usize) -> UserState {
        UserState {
            user: 0,
            u_vec: vec![0.3; dim],
            channel_vecs: vec![vec![-0.2; dim]; recall.len()],
            recall,
        }
    }

    #[test]
    fn zero_network_reads_recall_through_tanh() {
        let g = AlphaGenerator {
            shape: shape(3, 4),
            theta: Theta::zeros(4, 3),
        };
        let alpha = g.forward_alpha(&state(vec![0.5, 0.5], 3)).unwrap();
        for a in alpha {
            assert!((a - 4.621_172).abs() < 1e-6, "{a}");
        }
    }

    #[test]
    fn non_positive_scores_collapse_to_eps() {
        let g = AlphaGenerator {
            shape: shape(3, 4),
            theta: Theta::zeros(4, 3),
        };
        let alpha = g.forward_alpha(&state(vec![-1.0, 1e9], 3)).unwrap();
        assert_eq!(alpha[0], 1e-6);
        assert!((alpha[1] - (10.0 + 1e-6)).abs() < 1e-9);
    }

    #[test]
    fn alpha_stays_in_range_for_random_networks() {
        for seed in 0..20 {
            let g = AlphaGenerator::init(shape(5, 7), 3.0, seed).unwrap();
            let mut s = state(vec![0.0, 0.2, 0.9, 1.0], 5);
            s.u_vec = (0..5).map(|i| (i as f64 - 2.0) * 0.7).collect();
            for a in g.forward_alpha(&s).unwrap() {
                assert!((1e-6..=10.0 + 1e-6).contains(&a));
            }
        }
    }

    #[test]
    fn mean_weights_at_the_clamps() {
        let w = mean_raw(&[1e-6, 1e-6, 10.0 + 1e-6]);
        assert!((w.as_slice()[2] - 1.0).abs() < 1e-5);
        assert!(w.as_slice()[0] < 1e-5);
        assert_eq!(mean_raw(&[2.0, 2.0]).as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let g = AlphaGenerator::init(shape(3, 2), 1.0, 4).unwrap();
        let json = serde_json::to_string(&g.to_checkpoint()).unwrap();
        let back = AlphaGenerator::from_checkpoint(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let g = AlphaGenerator::init(shape(3, 2), 1.0, 4).unwrap();
        assert!(g.forward_alpha(&state(vec![0.1], 4)).is_err());
    }

    #[test]
    fn flat_indexing_matches_parts() {
        let mut t = Theta::zeros(2, 3);
        let n = t.len();
        assert_eq!(n, 2 * 3 * 2 + 2 * 2);
        for i in 0..n {
            t.set(i, i as f64);
        }
        assert_eq!(t.flat(), (0..n).map(|i| i as f64).collect::<Vec<_>>());
        assert_eq!(t.get(7), 7.0);
    }
}
