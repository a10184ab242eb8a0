//! Special functions used by the Dirichlet toolkit and the GP acquisition.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Shift point for the asymptotic expansions.
const ASYMPTOTIC_FROM: f64 = 10.0;

/// Euler–Mascheroni constant; `digamma(1) = -EULER_GAMMA`.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Digamma function ψ(x) for x > 0.
///
/// Upward recurrence ψ(x) = ψ(x + 1) − 1/x until x ≥ 10, then the
/// Bernoulli asymptotic series. Absolute error stays below 1e-12 on
/// [1e-3, 1e6].
pub fn digamma(x: f64) -> f64 {
    if !(x > 0.0) || !x.is_finite() {
        return f64::NAN;
    }
    let mut acc = 0.0;
    let mut x = x;
    while x < ASYMPTOTIC_FROM {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv2 = 1.0 / (x * x);
    // B2k / (2k x^2k) for k = 1..7
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2
                                        * (1.0 / 132.0
                                            - inv2 * (691.0 / 32760.0 - inv2 / 12.0))))));
    acc + x.ln() - 0.5 / x - series
}

/// Trigamma function ψ'(x) for x > 0.
pub fn trigamma(x: f64) -> f64 {
    if !(x > 0.0) || !x.is_finite() {
        return f64::NAN;
    }
    let mut acc = 0.0;
    let mut x = x;
    while x < ASYMPTOTIC_FROM {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        + 0.5 * inv2
        + inv
            * inv2
            * (1.0 / 6.0
                - inv2
                    * (1.0 / 30.0
                        - inv2
                            * (1.0 / 42.0
                                - inv2 * (1.0 / 30.0 - inv2 * (5.0 / 66.0 - inv2 * 691.0 / 2730.0)))));
    acc + series
}

/// Inverse of the digamma function on (0, ∞) by Newton's method.
pub fn inv_digamma(y: f64) -> f64 {
    if !y.is_finite() {
        return f64::NAN;
    }
    let mut x = if y >= -2.22 {
        y.exp() + 0.5
    } else {
        -1.0 / (y + EULER_GAMMA)
    };
    for _ in 0..60 {
        let step = (digamma(x) - y) / trigamma(x);
        let mut next = x - step;
        if next <= 0.0 {
            next = x * 0.5;
        }
        let done = (next - x).abs() <= 1e-15 * x.max(1e-300);
        x = next;
        if done {
            break;
        }
    }
    x
}

/// Natural log of the gamma function.
pub fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Standard normal CDF through the error function.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + statrs::function::erf::erf(z * FRAC_1_SQRT_2))
}
