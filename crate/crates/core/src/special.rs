//! Special functions used by the conjugate-exponential expectations.

use std::f64::consts::PI;

pub use statrs::function::gamma::{digamma, ln_gamma};

pub const LN_2PI: f64 = 1.8378770664093453;

/// Multivariate log-gamma, `log Γ_D(a)`.
pub fn ln_mvgamma(a: f64, dim: usize) -> f64 {
    let d = dim as f64;
    let mut acc = 0.25 * d * (d - 1.0) * PI.ln();
    for j in 1..=dim {
        acc += ln_gamma(a + (1.0 - j as f64) / 2.0);
    }
    acc
}

/// Multivariate digamma, `Σ_{d=1..D} ψ(a + (1 − d)/2)`.
pub fn mvdigamma(a: f64, dim: usize) -> f64 {
    (1..=dim).map(|j| digamma(a + (1.0 - j as f64) / 2.0)).sum()
}

/// `log Σ exp(xs)`, returning `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
