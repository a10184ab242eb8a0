//! Cross-entropy search for global channel weights.
//!
//! Each iteration samples `Q` weight vectors from Dirichlet(α_t), scores
//! them, keeps the samples at or above the elite threshold, refits α* to the
//! elites by maximum likelihood and moves α_t towards it with rate η.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dirichlet::{fit_mle, DirichletParams};
use crate::error::{FuseError, Result};
use crate::fusion::{project_to_bounded_simplex, WeightVector};
use crate::metrics::Objective;
use crate::rng::{stream, Domain};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CemConfig {
    /// Samples per iteration (Q).
    pub samples: usize,
    /// Elite fraction q in (0, 1].
    pub elite_frac: f64,
    /// Smoothing rate η₁.
    pub eta: f64,
    /// Multiplier applied to η₁ after an iteration without improvement.
    pub eta_decay: f64,
    /// Stop after this many consecutive iterations without improvement.
    pub patience: usize,
    pub max_iters: usize,
    /// Initial parameters; all-ones when absent.
    pub alpha0: Option<Vec<f64>>,
    /// Optional `(w_min, w_max)`; samples are projected before scoring.
    pub bounds: Option<(f64, f64)>,
    pub seed: u64,
}

impl Default for CemConfig {
    fn default() -> Self {
        CemConfig {
            samples: 60,
            elite_frac: 0.1,
            eta: 0.1,
            eta_decay: 0.95,
            patience: 5,
            max_iters: 50,
            alpha0: None,
            bounds: None,
            seed: 0,
        }
    }
}

impl CemConfig {
    pub fn elite_count(&self) -> usize {
        elite_count(self.samples, self.elite_frac)
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.samples < 2 {
            return Err(FuseError::validation("CEM needs at least 2 samples per iteration"));
        }
        if !(self.elite_frac > 0.0 && self.elite_frac <= 1.0) {
            return Err(FuseError::validation("elite fraction must lie in (0, 1]"));
        }
        if self.elite_count() < 2 {
            return Err(FuseError::validation(format!(
                "ceil(q·Q) = {} elites; the refit needs at least 2",
                self.elite_count()
            )));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(FuseError::validation("η₁ must lie in (0, 1]"));
        }
        if !(self.eta_decay > 0.0 && self.eta_decay <= 1.0) {
            return Err(FuseError::validation("η₁ decay must lie in (0, 1]"));
        }
        if self.max_iters == 0 {
            return Err(FuseError::validation("max_iters must be positive"));
        }
        if let Some(a) = &self.alpha0 {
            if a.len() != k {
                return Err(FuseError::validation(format!(
                    "alpha0 has {} entries for {k} channels",
                    a.len()
                )));
            }
            DirichletParams::new(a.clone())?;
        }
        if let Some((lo, hi)) = self.bounds {
            project_to_bounded_simplex(&vec![1.0 / k as f64; k], lo, hi)?;
        }
        Ok(())
    }

    pub fn initial_params(&self, k: usize) -> Result<DirichletParams> {
        match &self.alpha0 {
            Some(a) => DirichletParams::new(a.clone()),
            None => Ok(DirichletParams::ones(k)),
        }
    }
}

fn elite_count(q_total: usize, frac: f64) -> usize {
    ((frac * q_total as f64 - 1e-9).ceil() as usize).clamp(1, q_total.max(1))
}

/// Elite threshold γ̂ = S_(Q−Qᵉ+1) with Qᵉ = ⌈qQ⌉, and every index scoring
/// at least γ̂ (ties can push the elite set above Qᵉ).
pub fn select_elites(scores: &[f64], elite_frac: f64) -> (f64, Vec<usize>) {
    if scores.is_empty() {
        return (f64::NAN, Vec::new());
    }
    let n_elite = elite_count(scores.len(), elite_frac);
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let gamma = sorted[scores.len() - n_elite];
    let elites = (0..scores.len()).filter(|&i| scores[i] >= gamma).collect();
    (gamma, elites)
}

/// `(1 − η) α_t + η α*`.
pub fn update_params(alpha: &DirichletParams, target: &DirichletParams, eta: f64) -> DirichletParams {
    let mixed = alpha
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(a, b)| (1.0 - eta) * a + eta * b)
        .collect();
    DirichletParams::new(mixed).expect("convex combination of valid parameters")
}

/// `ξ α⁽⁰⁾ + (1 − ξ) α⁽ᵗ⁾`.
pub fn interpolate_params(alpha0: &DirichletParams, alpha_t: &DirichletParams, xi: f64) -> Result<DirichletParams> {
    if !(0.0..=1.0).contains(&xi) {
        return Err(FuseError::validation(format!("ξ must lie in [0, 1], got {xi}")));
    }
    if alpha0.len() != alpha_t.len() {
        return Err(FuseError::validation("parameter vectors differ in length"));
    }
    DirichletParams::new(
        alpha0
            .as_slice()
            .iter()
            .zip(alpha_t.as_slice())
            .map(|(a0, at)| xi * a0 + (1.0 - xi) * at)
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CemIteration {
    pub iter: usize,
    pub mean_score: f64,
    pub best_score: f64,
    pub gamma: f64,
    pub elites: usize,
    pub eta: f64,
    pub alpha: Vec<f64>,
}

/// Resumable optimizer state; also the checkpoint file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CemState {
    /// Completed iterations.
    pub iteration: usize,
    pub alpha: DirichletParams,
    pub best_alpha: DirichletParams,
    pub best_score: f64,
    /// Best mean sample score so far; drives step-size decay and early stopping.
    #[serde(default)]
    pub best_mean: Option<f64>,
    pub eta: f64,
    pub stall: usize,
    /// Index of the next sample stream; streams are keyed by the master seed.
    pub rng_position: u64,
    pub history: Vec<CemIteration>,
}

impl CemState {
    pub fn start(cfg: &CemConfig, k: usize) -> Result<Self> {
        let alpha = cfg.initial_params(k)?;
        Ok(CemState {
            iteration: 0,
            best_alpha: alpha.clone(),
            alpha,
            best_score: f64::NEG_INFINITY,
            best_mean: None,
            eta: cfg.eta,
            stall: 0,
            rng_position: 0,
            history: Vec::new(),
        })
    }

    pub fn finished(&self, cfg: &CemConfig) -> bool {
        self.iteration >= cfg.max_iters || (self.iteration > 0 && self.stall >= cfg.patience)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CemOutcome {
    pub state: CemState,
    pub weights: WeightVector,
}

/// Run the search from scratch.
pub fn run_cem(objective: &dyn Objective, cfg: &CemConfig) -> Result<CemOutcome> {
    let state = CemState::start(cfg, objective.n_channels())?;
    resume_cem(objective, cfg, state)
}

/// Continue from a saved state.
pub fn resume_cem(objective: &dyn Objective, cfg: &CemConfig, mut state: CemState) -> Result<CemOutcome> {
    let k = objective.n_channels();
    cfg.validate(k)?;
    if state.alpha.len() != k {
        return Err(FuseError::validation("checkpoint does not match the channel count"));
    }
    while !state.finished(cfg) {
        step(objective, cfg, &mut state)?;
    }
    let weights = state.best_alpha.mean_weights();
    Ok(CemOutcome { state, weights })
}

/// One sample–score–select–refit iteration.
pub fn step(objective: &dyn Objective, cfg: &CemConfig, state: &mut CemState) -> Result<()> {
    let base = state.rng_position;
    let scored: Vec<(WeightVector, f64)> = (0..cfg.samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(cfg.seed, Domain::CemSample, base + i as u64);
            let mut w = state.alpha.sample(&mut rng);
            if let Some((lo, hi)) = cfg.bounds {
                w = project_to_bounded_simplex(w.as_slice(), lo, hi)?;
            }
            let s = objective.score(&w)?;
            if !s.is_finite() {
                return Err(FuseError::Numerical(format!("objective returned {s}")));
            }
            Ok((w, s))
        })
        .collect::<Result<_>>()?;
    let scores: Vec<f64> = scored.iter().map(|(_, s)| *s).collect();
    let (gamma, elite_idx) = select_elites(&scores, cfg.elite_frac);
    let elites: Vec<WeightVector> = elite_idx.iter().map(|&i| scored[i].0.clone()).collect();
    let refit = fit_mle(&elites)?;
    let next = update_params(&state.alpha, &refit.params, state.eta);

    let iter_best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    // Ties keep the later, more refined distribution.
    if iter_best >= state.best_score {
        state.best_score = iter_best;
        state.best_alpha = next.clone();
    }
    if state.best_mean.is_none_or(|m| mean > m) {
        state.best_mean = Some(mean);
        state.stall = 0;
    } else {
        state.stall += 1;
        state.eta *= cfg.eta_decay;
    }
    state.iteration += 1;
    state.rng_position = base + cfg.samples as u64;
    state.history.push(CemIteration {
        iter: state.iteration,
        mean_score: mean,
        best_score: state.best_score,
        gamma,
        elites: elites.len(),
        eta: state.eta,
        alpha: next.as_slice().to_vec(),
    });
    log::debug!(
        "cem iter {}: best {:.6} gamma {:.6}",
        state.iteration,
        state.best_score,
        gamma
    );
    state.alpha = next;
    Ok(())
}
