//! Hyperparameters, Dirichlet posteriors over the latent-process parameters,
//! and their geometric-mean ("starred") surrogates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{digamma, ln_gamma};

/// Smallest concentration a posterior update may produce.
pub const CONCENTRATION_FLOOR: f64 = 1e-8;

/// Default Dirichlet prior concentration.
pub const DEFAULT_CONCENTRATION: f64 = 1e-3;

/// Default Normal-Wishart mean-precision scaling.
pub const DEFAULT_NW_LAMBDA: f64 = 0.25;

/// Fixed hyperparameters of a model: sizes plus every prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHyper {
    pub n_states: usize,
    pub n_components: usize,
    pub max_lag: usize,
    pub dim: usize,
    /// Prior on the initial lag distribution, length `max_lag`.
    pub alpha0: Vec<f64>,
    /// Prior rows of the lag transition matrix, `max_lag × max_lag`.
    pub alpha: Vec<Vec<f64>>,
    /// Prior on the initial emitting-state distribution, length `n_states`.
    pub eta0: Vec<f64>,
    /// Prior rows of each lag-conditional transition matrix, `max_lag × n_states × n_states`.
    pub eta_dep: Vec<Vec<Vec<f64>>>,
    /// Prior mixture weights, `n_states × n_components`.
    pub w: Vec<Vec<f64>>,
    pub nw_lambda: f64,
    #[serde(with = "crate::serde_mat::vector")]
    pub nw_mean: DVector<f64>,
    pub nw_dof: f64,
    #[serde(with = "crate::serde_mat::matrix")]
    pub nw_scale: DMatrix<f64>,
}

/// Hyperparameters with every Dirichlet concentration at `1e-3`,
/// `λ = 0.25`, `η = D + 2`, the prior mean at the data mean and the
/// Wishart scale chosen so the prior expected precision equals the
/// inverse of `data_cov`.
pub fn default_hyper(
    n_states: usize,
    n_components: usize,
    max_lag: usize,
    dim: usize,
    data_mean: &DVector<f64>,
    data_cov: &DMatrix<f64>,
) -> Result<ModelHyper> {
    if n_states == 0 || n_components == 0 || max_lag == 0 || dim == 0 {
        return Err(Error::InvalidArgument(
            "states, components, lags and dimension must all be >= 1".into(),
        ));
    }
    if data_mean.len() != dim || data_cov.shape() != (dim, dim) {
        return Err(Error::Shape(format!(
            "data mean/covariance do not match dimension {dim}"
        )));
    }
    if !is_spd(data_cov) {
        return Err(Error::DegenerateData(
            "data covariance is not symmetric positive-definite".into(),
        ));
    }
    let c = DEFAULT_CONCENTRATION;
    let dof = dim as f64 + 2.0;
    let hyper = ModelHyper {
        n_states,
        n_components,
        max_lag,
        dim,
        alpha0: vec![c; max_lag],
        alpha: vec![vec![c; max_lag]; max_lag],
        eta0: vec![c; n_states],
        eta_dep: vec![vec![vec![c; n_states]; n_states]; max_lag],
        w: vec![vec![c; n_components]; n_states],
        nw_lambda: DEFAULT_NW_LAMBDA,
        nw_mean: data_mean.clone(),
        nw_dof: dof,
        nw_scale: data_cov * dof,
    };
    Ok(hyper)
}

pub(crate) fn is_spd(m: &DMatrix<f64>) -> bool {
    if !m.is_square() || m.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    if (m - m.transpose()).iter().any(|v| v.abs() > 1e-10 * scale) {
        return false;
    }
    m.clone().cholesky().is_some()
}

impl ModelHyper {
    pub fn validate(&self) -> Result<()> {
        let (n, m, k, d) = (self.n_states, self.n_components, self.max_lag, self.dim);
        if n == 0 || m == 0 || k == 0 || d == 0 {
            return Err(Error::InvalidArgument("model sizes must be >= 1".into()));
        }
        let shapes_ok = self.alpha0.len() == k
            && self.alpha.len() == k
            && self.alpha.iter().all(|r| r.len() == k)
            && self.eta0.len() == n
            && self.eta_dep.len() == k
            && self
                .eta_dep
                .iter()
                .all(|a| a.len() == n && a.iter().all(|r| r.len() == n))
            && self.w.len() == n
            && self.w.iter().all(|r| r.len() == m)
            && self.nw_mean.len() == d
            && self.nw_scale.shape() == (d, d);
        if !shapes_ok {
            return Err(Error::Shape("hyperparameter shapes are inconsistent".into()));
        }
        let all_conc = self
            .alpha0
            .iter()
            .chain(self.alpha.iter().flatten())
            .chain(self.eta0.iter())
            .chain(self.eta_dep.iter().flatten().flatten())
            .chain(self.w.iter().flatten());
        for &c in all_conc {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "concentration {c} is not strictly positive"
                )));
            }
        }
        if !(self.nw_lambda > 0.0) {
            return Err(Error::InvalidArgument("nw_lambda must be positive".into()));
        }
        if !(self.nw_dof > d as f64 - 1.0) {
            return Err(Error::InvalidArgument(format!(
                "nw_dof {} must exceed D - 1 = {}",
                self.nw_dof,
                d - 1
            )));
        }
        if !is_spd(&self.nw_scale) {
            return Err(Error::InvalidArgument(
                "nw_scale must be symmetric positive-definite".into(),
            ));
        }
        Ok(())
    }
}

/// Dirichlet distribution over one probability vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DirichletPosterior {
    pub concentration: Vec<f64>,
}

impl DirichletPosterior {
    pub fn new(concentration: Vec<f64>) -> Result<Self> {
        if concentration.is_empty() || concentration.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::InvalidArgument(
                "Dirichlet concentrations must be finite and strictly positive".into(),
            ));
        }
        Ok(DirichletPosterior { concentration })
    }

    /// Conjugate update: prior concentration plus expected counts,
    /// floored at [`CONCENTRATION_FLOOR`].
    pub fn from_counts(prior: &[f64], counts: &[f64]) -> Self {
        debug_assert_eq!(prior.len(), counts.len());
        let concentration = prior
            .iter()
            .zip(counts)
            .map(|(a, c)| (a + c).max(CONCENTRATION_FLOOR))
            .collect();
        DirichletPosterior { concentration }
    }

    pub fn len(&self) -> usize {
        self.concentration.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concentration.is_empty()
    }

    /// `E[log p_i] = ψ(ω_i) − ψ(Σ ω)`.
    pub fn expected_log_probs(&self) -> Vec<f64> {
        let total = digamma(self.concentration.iter().sum());
        self.concentration.iter().map(|&c| digamma(c) - total).collect()
    }

    /// `exp(E[log p_i])`; entries sum to at most one.
    pub fn geometric_means(&self) -> Vec<f64> {
        self.expected_log_probs().into_iter().map(f64::exp).collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        let total: f64 = self.concentration.iter().sum();
        self.concentration.iter().map(|c| c / total).collect()
    }
}

/// `KL(Dir(post) ‖ Dir(prior))`.
pub fn dirichlet_kl(post: &DirichletPosterior, prior: &[f64]) -> Result<f64> {
    let w = &post.concentration;
    if w.len() != prior.len() {
        return Err(Error::Shape(format!(
            "posterior has {} entries, prior has {}",
            w.len(),
            prior.len()
        )));
    }
    let w_sum: f64 = w.iter().sum();
    let a_sum: f64 = prior.iter().sum();
    let psi_sum = digamma(w_sum);
    let mut kl = ln_gamma(w_sum) - ln_gamma(a_sum);
    for (&wi, &ai) in w.iter().zip(prior) {
        kl += ln_gamma(ai) - ln_gamma(wi) + (wi - ai) * (digamma(wi) - psi_sum);
    }
    Ok(kl.max(0.0))
}

/// Variational posteriors over the parameters of both latent chains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentPosteriors {
    /// Initial lag distribution.
    pub q_pi_hat: DirichletPosterior,
    /// Rows of the lag transition matrix (row = previous lag).
    pub q_a_hat: Vec<DirichletPosterior>,
    /// Initial emitting-state distribution.
    pub q_pi: DirichletPosterior,
    /// `q_a_dep[k][i]` is the row for "state i, k+1 frames back".
    pub q_a_dep: Vec<Vec<DirichletPosterior>>,
}

impl LatentPosteriors {
    /// Posteriors equal to the priors.
    pub fn from_prior(hyper: &ModelHyper) -> Self {
        let d = |v: &Vec<f64>| DirichletPosterior { concentration: v.clone() };
        LatentPosteriors {
            q_pi_hat: d(&hyper.alpha0),
            q_a_hat: hyper.alpha.iter().map(d).collect(),
            q_pi: d(&hyper.eta0),
            q_a_dep: hyper
                .eta_dep
                .iter()
                .map(|rows| rows.iter().map(d).collect())
                .collect(),
        }
    }

    pub fn max_lag(&self) -> usize {
        self.q_pi_hat.len()
    }

    pub fn n_states(&self) -> usize {
        self.q_pi.len()
    }

    pub fn check_shape(&self, hyper: &ModelHyper) -> Result<()> {
        let (n, k) = (hyper.n_states, hyper.max_lag);
        let ok = self.q_pi_hat.len() == k
            && self.q_a_hat.len() == k
            && self.q_a_hat.iter().all(|r| r.len() == k)
            && self.q_pi.len() == n
            && self.q_a_dep.len() == k
            && self
                .q_a_dep
                .iter()
                .all(|a| a.len() == n && a.iter().all(|r| r.len() == n));
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("latent posteriors do not match hyperparameters".into()))
        }
    }

    /// Geometric-mean surrogates used by the message passing.
    pub fn starred(&self) -> StarredParams {
        self.collapse(DirichletPosterior::geometric_means)
    }

    /// Posterior-mean point estimates, in the same layout as [`starred`](Self::starred).
    pub fn mean_params(&self) -> StarredParams {
        self.collapse(DirichletPosterior::mean)
    }

    fn collapse(&self, f: impl Fn(&DirichletPosterior) -> Vec<f64>) -> StarredParams {
        let k = self.max_lag();
        let n = self.n_states();
        let mut a_hat = Vec::with_capacity(k * k);
        for row in &self.q_a_hat {
            a_hat.extend(f(row));
        }
        let mut a_dep = Vec::with_capacity(k * n * n);
        for rows in &self.q_a_dep {
            for row in rows {
                a_dep.extend(f(row));
            }
        }
        StarredParams {
            n_states: n,
            max_lag: k,
            pi_hat: f(&self.q_pi_hat),
            a_hat,
            pi: f(&self.q_pi),
            a_dep,
        }
    }

    /// Sum of every Dirichlet KL against the matching prior.
    pub fn kl(&self, hyper: &ModelHyper) -> Result<f64> {
        let mut acc = dirichlet_kl(&self.q_pi_hat, &hyper.alpha0)?;
        for (q, a) in self.q_a_hat.iter().zip(&hyper.alpha) {
            acc += dirichlet_kl(q, a)?;
        }
        acc += dirichlet_kl(&self.q_pi, &hyper.eta0)?;
        for (qs, es) in self.q_a_dep.iter().zip(&hyper.eta_dep) {
            for (q, e) in qs.iter().zip(es) {
                acc += dirichlet_kl(q, e)?;
            }
        }
        Ok(acc)
    }

    /// Row-normalised posterior mean of the lag transition matrix.
    pub fn dependence_matrix(&self) -> Vec<Vec<f64>> {
        self.q_a_hat.iter().map(DirichletPosterior::mean).collect()
    }
}

/// Nonnegative chain parameters consumed by the forward-backward pass.
///
/// Produced either as geometric means `exp(E[log θ])` (subnormalised rows)
/// or as posterior means. Matrices are flat and row-major:
/// `a_hat[prev * K + next]`, `a_dep[(k * N + from) * N + to]` with `k`
/// the zero-based lag.
#[derive(Debug, Clone, PartialEq)]
pub struct StarredParams {
    pub n_states: usize,
    pub max_lag: usize,
    pub pi_hat: Vec<f64>,
    pub a_hat: Vec<f64>,
    pub pi: Vec<f64>,
    pub a_dep: Vec<f64>,
}

impl StarredParams {
    #[inline]
    pub fn a_hat(&self, prev: usize, next: usize) -> f64 {
        self.a_hat[prev * self.max_lag + next]
    }

    #[inline]
    pub fn a_dep(&self, lag: usize, from: usize, to: usize) -> f64 {
        self.a_dep[(lag * self.n_states + from) * self.n_states + to]
    }

    /// Shape and sign checks; rows must be subnormalised.
    pub fn validate(&self) -> Result<()> {
        let (n, k) = (self.n_states, self.max_lag);
        if self.pi_hat.len() != k
            || self.a_hat.len() != k * k
            || self.pi.len() != n
            || self.a_dep.len() != k * n * n
        {
            return Err(Error::Shape("chain parameter shapes are inconsistent".into()));
        }
        let rows = std::iter::once(&self.pi_hat[..])
            .chain(self.a_hat.chunks(k))
            .chain(std::iter::once(&self.pi[..]))
            .chain(self.a_dep.chunks(n));
        for row in rows {
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidArgument("chain parameter outside [0, 1]".into()));
            }
            if row.iter().sum::<f64>() > 1.0 + 1e-12 {
                return Err(Error::InvalidArgument("chain parameter row sums above one".into()));
            }
        }
        Ok(())
    }
}
