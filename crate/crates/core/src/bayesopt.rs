//! Gaussian-process refinement of Dirichlet parameters.
//!
//! Searches β in the box `[0.5 α, 1.5 α]` around the cross-entropy result.
//! Inputs are mapped to the unit box and targets standardized before the GP
//! fit; the next query maximizes expected improvement over random candidates.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dirichlet::DirichletParams;
use crate::error::{FuseError, Result};
use crate::fusion::WeightVector;
use crate::metrics::Objective;
use crate::rng::{stream, Domain};
use crate::special::{normal_cdf, normal_pdf};

pub const DEFAULT_JITTER: f64 = 1e-6;
const MIN_LENGTH_SCALE: f64 = 1e-2;

/// Matérn-5/2 with one length scale per input dimension.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Matern52 {
    pub length_scales: Vec<f64>,
    pub signal_variance: f64,
    pub jitter: f64,
}

impl Matern52 {
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let r2: f64 = a
            .iter()
            .zip(b)
            .zip(&self.length_scales)
            .map(|((x, y), l)| ((x - y) / l).powi(2))
            .sum();
        let r = (5.0 * r2).sqrt();
        self.signal_variance * (1.0 + r + 5.0 * r2 / 3.0) * (-r).exp()
    }

    /// Per-dimension median of absolute pairwise differences, floored at
    /// 1e-2; 1.0 when there are fewer than two points.
    pub fn median_heuristic(xs: &[Vec<f64>], dim: usize, jitter: f64) -> Self {
        let length_scales = (0..dim)
            .map(|j| {
                let mut diffs: Vec<f64> = Vec::new();
                for a in 0..xs.len() {
                    for b in a + 1..xs.len() {
                        diffs.push((xs[a][j] - xs[b][j]).abs());
                    }
                }
                if diffs.is_empty() {
                    return 1.0;
                }
                diffs.sort_by(f64::total_cmp);
                let mid = diffs.len() / 2;
                let med = if diffs.len() % 2 == 0 {
                    0.5 * (diffs[mid - 1] + diffs[mid])
                } else {
                    diffs[mid]
                };
                med.max(MIN_LENGTH_SCALE)
            })
            .collect();
        Matern52 {
            length_scales,
            signal_variance: 1.0,
            jitter,
        }
    }
}

#[derive(Debug, Clone)]
struct Fitted {
    train_x: Vec<Vec<f64>>,
    chol: DMatrix<f64>,
    /// (K + jitter I)⁻¹ y
    weights: DVector<f64>,
}

/// GP regression on already normalized inputs and standardized targets.
#[derive(Debug, Clone)]
pub struct GpModel {
    pub kernel: Matern52,
    fitted: Option<Fitted>,
}

impl GpModel {
    pub fn new(kernel: Matern52) -> Self {
        GpModel { kernel, fitted: None }
    }

    pub fn fit(&mut self, xs: &[Vec<f64>], ys: &[f64]) -> Result<()> {
        if xs.len() != ys.len() {
            return Err(FuseError::validation("GP inputs and targets differ in length"));
        }
        if self.kernel.jitter < 1e-6 || self.kernel.length_scales.iter().any(|l| !(*l > 0.0)) {
            return Err(FuseError::validation("GP needs jitter >= 1e-6 and positive length scales"));
        }
        let n = xs.len();
        let gram = DMatrix::from_fn(n, n, |i, j| {
            self.kernel.eval(&xs[i], &xs[j]) + if i == j { self.kernel.jitter } else { 0.0 }
        });
        let chol = gram
            .cholesky()
            .ok_or_else(|| FuseError::Numerical("GP Gram matrix is not positive definite".into()))?;
        let weights = chol.solve(&DVector::from_column_slice(ys));
        self.fitted = Some(Fitted {
            train_x: xs.to_vec(),
            chol: chol.l(),
            weights,
        });
        Ok(())
    }

    /// Posterior mean and variance (clamped at 0) at `x`.
    pub fn posterior(&self, x: &[f64]) -> Result<(f64, f64)> {
        let fit = self.fitted.as_ref().ok_or(FuseError::NotFitted)?;
        let prior = self.kernel.eval(x, x);
        if fit.train_x.is_empty() {
            return Ok((0.0, prior));
        }
        let kstar = DVector::from_iterator(
            fit.train_x.len(),
            fit.train_x.iter().map(|t| self.kernel.eval(t, x)),
        );
        let mean = kstar.dot(&fit.weights);
        let v = fit
            .chol
            .solve_lower_triangular(&kstar)
            .ok_or_else(|| FuseError::Numerical("singular Cholesky factor".into()))?;
        Ok((mean, (prior - v.norm_squared()).max(0.0)))
    }
}

/// `E[max(S − s_best, 0)]` under N(μ, σ²), with σ a standard deviation.
pub fn expected_improvement(mu: f64, sigma: f64, s_best: f64) -> f64 {
    let gain = mu - s_best;
    if sigma <= 0.0 {
        return gain.max(0.0);
    }
    let z = gain / sigma;
    (gain * normal_cdf(z) + sigma * normal_pdf(z)).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoConfig {
    /// Acquisition calls after the initial design (T).
    pub calls: usize,
    /// Initial design size, including the starting point.
    pub n_init: usize,
    pub n_candidates: usize,
    /// Box is `[lo_scale α, hi_scale α]`.
    pub lo_scale: f64,
    pub hi_scale: f64,
    pub jitter: f64,
    pub seed: u64,
}

impl Default for BoConfig {
    fn default() -> Self {
        BoConfig {
            calls: 10,
            n_init: 5,
            n_candidates: 2048,
            lo_scale: 0.5,
            hi_scale: 1.5,
            jitter: DEFAULT_JITTER,
            seed: 0,
        }
    }
}

impl BoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_candidates == 0 || self.n_init == 0 {
            return Err(FuseError::validation("n_init and n_candidates must be positive"));
        }
        if !(self.lo_scale > 0.0 && self.lo_scale < self.hi_scale) {
            return Err(FuseError::validation("box needs 0 < lo_scale < hi_scale"));
        }
        if self.jitter < 1e-6 {
            return Err(FuseError::validation("jitter must be at least 1e-6"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoCall {
    pub beta: Vec<f64>,
    pub score: f64,
    /// EI (standardized units) at selection; absent for the initial design.
    pub ei: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoOutcome {
    pub beta: DirichletParams,
    pub weights: WeightVector,
    pub best_score: f64,
    pub box_lo: Vec<f64>,
    pub box_hi: Vec<f64>,
    pub trace: Vec<BoCall>,
}

struct SearchBox {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl SearchBox {
    fn to_params(&self, unit: &[f64]) -> Vec<f64> {
        unit.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(u, (l, h))| (l + u * (h - l)).clamp(*l, *h))
            .collect()
    }

    fn to_unit(&self, beta: &[f64]) -> Vec<f64> {
        beta.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(b, (l, h))| (b - l) / (h - l))
            .collect()
    }
}

fn standardize(ys: &[f64]) -> (Vec<f64>, f64, f64) {
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
    let sd = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    (ys.iter().map(|y| (y - mean) / sd).collect(), mean, sd)
}

fn uniform_point<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    (0..k).map(|_| rng.random::<f64>()).collect()
}

/// Refine `alpha_cem` inside its box. The starting point is always part of
/// the design, so the returned score never falls below its score.
pub fn run_bayesopt(objective: &dyn Objective, alpha_cem: &DirichletParams, cfg: &BoConfig) -> Result<BoOutcome> {
    cfg.validate()?;
    let k = objective.n_channels();
    if alpha_cem.len() != k {
        return Err(FuseError::validation("starting parameters do not match the channel count"));
    }
    let bounds = SearchBox {
        lo: alpha_cem.as_slice().iter().map(|a| a * cfg.lo_scale).collect(),
        hi: alpha_cem.as_slice().iter().map(|a| a * cfg.hi_scale).collect(),
    };
    let score_of = |beta: &[f64]| -> Result<f64> {
        let params = DirichletParams::new(beta.to_vec())?;
        let s = objective.score(&params.mean_weights())?;
        if s.is_finite() {
            Ok(s)
        } else {
            Err(FuseError::Numerical(format!("objective returned {s}")))
        }
    };

    let start = alpha_cem.as_slice().to_vec();
    let mut trace = vec![BoCall {
        score: score_of(&start)?,
        beta: start,
        ei: None,
    }];

    if cfg.calls > 0 {
        let mut design = stream(cfg.seed, Domain::BoDesign, 0);
        for _ in 1..cfg.n_init {
            let beta = bounds.to_params(&uniform_point(&mut design, k));
            trace.push(BoCall {
                score: score_of(&beta)?,
                beta,
                ei: None,
            });
        }
        for t in 0..cfg.calls {
            let xs: Vec<Vec<f64>> = trace.iter().map(|c| bounds.to_unit(&c.beta)).collect();
            let (ys, _, _) = standardize(&trace.iter().map(|c| c.score).collect::<Vec<_>>());
            let y_best = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut gp = GpModel::new(Matern52::median_heuristic(&xs, k, cfg.jitter));
            gp.fit(&xs, &ys)?;

            let mut cand_rng = stream(cfg.seed, Domain::BoCandidates, t as u64);
            let candidates: Vec<Vec<f64>> = (0..cfg.n_candidates)
                .map(|_| uniform_point(&mut cand_rng, k))
                .collect();
            let eis: Vec<f64> = candidates
                .par_iter()
                .map(|x| {
                    gp.posterior(x)
                        .map(|(mu, var)| expected_improvement(mu, var.sqrt(), y_best))
                })
                .collect::<Result<_>>()?;
            let (pick, ei) = eis
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &e)| if e > acc.1 { (i, e) } else { acc });
            let beta = bounds.to_params(&candidates[pick]);
            trace.push(BoCall {
                score: score_of(&beta)?,
                beta,
                ei: Some(ei),
            });
        }
    }

    let best = trace
        .iter()
        .enumerate()
        .fold(0, |b, (i, c)| if c.score > trace[b].score { i } else { b });
    let beta = DirichletParams::new(trace[best].beta.clone())?;
    Ok(BoOutcome {
        weights: beta.mean_weights(),
        best_score: trace[best].score,
        beta,
        box_lo: bounds.lo,
        box_hi: bounds.hi,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::FnObjective;

    fn kernel(dim: usize) -> Matern52 {
        Matern52 {
            length_scales: vec![0.3; dim],
            signal_variance: 1.0,
            jitter: DEFAULT_JITTER,
        }
    }

    #[test]
    fn interpolates_training_points() {
        let xs = vec![vec![0.1, 0.2], vec![0.7, 0.4], vec![0.4, 0.9]];
        let ys = vec![-1.0, 0.5, 0.5];
        let mut gp = GpModel::new(kernel(2));
        gp.fit(&xs, &ys).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            let (mu, var) = gp.posterior(x).unwrap();
            assert!((mu - y).abs() < 1e-3);
            assert!(var <= 1e-3);
        }
    }

    #[test]
    fn prior_and_unfitted() {
        let gp = GpModel::new(kernel(2));
        assert!(matches!(gp.posterior(&[0.5, 0.5]), Err(FuseError::NotFitted)));
        let mut gp = GpModel::new(kernel(2));
        gp.fit(&[], &[]).unwrap();
        assert_eq!(gp.posterior(&[0.5, 0.5]).unwrap(), (0.0, 1.0));
    }

    #[test]
    fn midpoint_of_symmetric_points() {
        // standardized targets of a two-point design are +1 and -1
        let mut gp = GpModel::new(kernel(1));
        gp.fit(&[vec![0.2], vec![0.8]], &[1.0, -1.0]).unwrap();
        let (mu, _) = gp.posterior(&[0.5]).unwrap();
        assert!(mu.abs() < 1e-12);
    }

    #[test]
    fn ei_closed_forms() {
        assert_eq!(expected_improvement(0.3, 0.0, 0.5), 0.0);
        assert!((expected_improvement(0.7, 0.0, 0.5) - 0.2).abs() < 1e-15);
        assert!((expected_improvement(0.5, 1.0, 0.5) - 0.398_942_280_401_432_7).abs() < 1e-12);
        assert!(expected_improvement(-3.0, 1e-9, 0.0) < 1e-12);
    }

    #[test]
    fn zero_budget_returns_start() {
        let obj = FnObjective { k: 3, f: |w: &WeightVector| w.as_slice()[0] };
        let alpha = DirichletParams::new(vec![2.0, 1.0, 1.0]).unwrap();
        let cfg = BoConfig {
            calls: 0,
            ..Default::default()
        };
        let out = run_bayesopt(&obj, &alpha, &cfg).unwrap();
        assert_eq!(out.beta, alpha);
        assert_eq!(out.weights, alpha.mean_weights());
        assert_eq!(out.trace.len(), 1);
    }

    #[test]
    fn never_worse_than_start_and_inside_box() {
        let obj = FnObjective { k: 3, f: |w: &WeightVector| w.as_slice()[1] };
        let alpha = DirichletParams::new(vec![1.0, 2.0, 0.5]).unwrap();
        let start_score = obj.score(&alpha.mean_weights()).unwrap();
        for seed in 0..5 {
            let cfg = BoConfig {
                seed,
                n_candidates: 256,
                ..Default::default()
            };
            let out = run_bayesopt(&obj, &alpha, &cfg).unwrap();
            assert!(out.best_score >= start_score);
            for ((b, lo), hi) in out.beta.as_slice().iter().zip(&out.box_lo).zip(&out.box_hi) {
                assert!(lo <= b && b <= hi);
            }
            let best: Vec<f64> = out
                .trace
                .iter()
                .scan(f64::NEG_INFINITY, |m, c| {
                    *m = m.max(c.score);
                    Some(*m)
                })
                .collect();
            assert!(best.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
