//! Dirichlet distribution over channel weights: sampling, density, the
//! gradient of the log-density in α, the mean, and maximum-likelihood fitting.
//!
//! The slice-level functions (`sample_raw`, `log_pdf_raw`, `grad_alpha_raw`)
//! accept any positive α; [`DirichletParams`] additionally enforces the
//! `[ALPHA_MIN, ALPHA_MAX]` clamp used by the global optimizers.

use rand::Rng;
use rand_distr::{Open01, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FuseError, Result};
use crate::fusion::WeightVector;
use crate::special::{digamma, inv_digamma, ln_gamma};

pub const ALPHA_MIN: f64 = 1e-3;
/// Ceiling reached by zero-variance fits.
pub const ALPHA_MAX: f64 = 1e6;
/// Weights are clamped to this before taking logs.
pub const W_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DirichletParams(Vec<f64>);

impl DirichletParams {
    /// Values are clamped into `[ALPHA_MIN, ALPHA_MAX]`; non-finite or
    /// non-positive entries are rejected.
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(FuseError::validation("Dirichlet parameters are empty"));
        }
        if alpha.iter().any(|a| !a.is_finite() || *a <= 0.0) {
            return Err(FuseError::validation(format!(
                "Dirichlet parameters must be finite and positive: {alpha:?}"
            )));
        }
        Ok(DirichletParams(
            alpha.into_iter().map(|a| a.clamp(ALPHA_MIN, ALPHA_MAX)).collect(),
        ))
    }

    pub fn ones(k: usize) -> Self {
        DirichletParams(vec![1.0; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn concentration(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> WeightVector {
        WeightVector::new(sample_raw(&self.0, rng)).expect("Dirichlet draw lies on the simplex")
    }

    pub fn log_pdf(&self, w: &WeightVector) -> f64 {
        log_pdf_raw(&self.0, w.as_slice())
    }

    pub fn log_pdf_grad_alpha(&self, w: &WeightVector) -> Vec<f64> {
        grad_alpha_raw(&self.0, w.as_slice())
    }

    pub fn mean_weights(&self) -> WeightVector {
        mean_raw(&self.0)
    }
}

/// Log of a Gamma(shape, 1) draw.
///
/// Marsaglia–Tsang squeeze/acceptance for shape ≥ 1; for shape < 1 the
/// boost `G(a) = G(a + 1) · U^{1/a}`, kept in log space so tiny shapes do
/// not underflow.
fn ln_gamma_variate<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    if shape < 1.0 {
        let u: f64 = rng.sample(Open01);
        return ln_gamma_variate(shape + 1.0, rng) + u.ln() / shape;
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u: f64 = rng.sample(Open01);
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return (d * v).ln();
        }
    }
}

/// One Dirichlet(α) draw: independent Gamma(α_k, 1) variates normalized by
/// their sum.
pub fn sample_raw<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Vec<f64> {
    let logs: Vec<f64> = alpha.iter().map(|&a| ln_gamma_variate(a, rng)).collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= sum);
    let drift = 1.0 - w.iter().sum::<f64>();
    let imax = w
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    w[imax] += drift;
    w
}

/// `log Γ(Σα) − Σ log Γ(α_k) + Σ (α_k − 1) log w_k`, with `w` floored at
/// `W_FLOOR`.
pub fn log_pdf_raw(alpha: &[f64], w: &[f64]) -> f64 {
    let total: f64 = alpha.iter().sum();
    let mut out = ln_gamma(total);
    for (&a, &x) in alpha.iter().zip(w) {
        out += (a - 1.0) * x.max(W_FLOOR).ln() - ln_gamma(a);
    }
    out
}

/// ∂ log f / ∂α_i = ψ(Σα) − ψ(α_i) + log w_i.
pub fn grad_alpha_raw(alpha: &[f64], w: &[f64]) -> Vec<f64> {
    let psi_total = digamma(alpha.iter().sum());
    alpha
        .iter()
        .zip(w)
        .map(|(&a, &x)| psi_total - digamma(a) + x.max(W_FLOOR).ln())
        .collect()
}

/// `α / Σα`.
pub fn mean_raw(alpha: &[f64]) -> WeightVector {
    WeightVector::normalized(alpha).expect("positive concentration")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MleFit {
    pub params: DirichletParams,
    pub iterations: usize,
    /// False when the iteration cap was hit or a component sits at the
    /// `ALPHA_MAX` ceiling (zero-variance samples).
    pub converged: bool,
}

const MLE_MAX_ITERS: usize = 1000;
const MLE_REL_TOL: f64 = 1e-8;

/// Maximum-likelihood α for equally weighted samples.
///
/// Starts from a moment-matching estimate and runs the fixed point
/// `α_k ← ψ⁻¹(ψ(Σα) + mean log w_k)`.
pub fn fit_mle(samples: &[WeightVector]) -> Result<MleFit> {
    if samples.len() < 2 {
        return Err(FuseError::validation(format!(
            "Dirichlet MLE needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let k = samples[0].len();
    if samples.iter().any(|s| s.len() != k) {
        return Err(FuseError::validation("samples have different dimensions"));
    }
    let n = samples.len() as f64;
    let mut mean = vec![0.0; k];
    let mut mean_sq = vec![0.0; k];
    let mut mean_log = vec![0.0; k];
    for s in samples {
        for (i, &x) in s.as_slice().iter().enumerate() {
            let x = x.max(W_FLOOR);
            mean[i] += x / n;
            mean_sq[i] += x * x / n;
            mean_log[i] += x.ln() / n;
        }
    }

    // precision estimates m(1 − m)/var − 1 per component; take the median
    let mut precisions: Vec<f64> = (0..k)
        .filter_map(|i| {
            let var = mean_sq[i] - mean[i] * mean[i];
            (var > 1e-300).then(|| mean[i] * (1.0 - mean[i]) / var - 1.0)
        })
        .filter(|s| s.is_finite() && *s > 0.0)
        .collect();
    precisions.sort_by(f64::total_cmp);
    let precision = if precisions.is_empty() {
        ALPHA_MAX * k as f64
    } else {
        precisions[precisions.len() / 2]
    };
    let mut alpha: Vec<f64> = mean
        .iter()
        .map(|m| (m * precision).clamp(ALPHA_MIN, ALPHA_MAX))
        .collect();

    let mut converged = false;
    let mut iterations = 0;
    while iterations < MLE_MAX_ITERS {
        iterations += 1;
        let psi_total = digamma(alpha.iter().sum());
        let mut max_rel: f64 = 0.0;
        for (a, &ml) in alpha.iter_mut().zip(&mean_log) {
            let next = inv_digamma(psi_total + ml).clamp(ALPHA_MIN, ALPHA_MAX);
            if !next.is_finite() {
                return Err(FuseError::Numerical("Dirichlet MLE diverged".into()));
            }
            max_rel = max_rel.max((next - *a).abs() / *a);
            *a = next;
        }
        if max_rel < MLE_REL_TOL {
            converged = true;
            break;
        }
    }
    let at_ceiling = alpha.iter().any(|&a| a >= ALPHA_MAX);
    Ok(MleFit {
        params: DirichletParams(alpha),
        iterations,
        converged: converged && !at_ceiling,
    })
}
