//! Gaussian-mixture emissions with Normal-Wishart posteriors.
//!
//! The precision of each component follows a Wishart whose scale is the
//! inverse of `scale`, so `E[R] = dof · scale⁻¹`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{dirichlet_kl, DirichletPosterior, ModelHyper};
use crate::special::{ln_mvgamma, log_sum_exp, mvdigamma, LN_2PI};

/// States whose total responsibility falls below this keep prior-valued
/// Normal-Wishart posteriors.
pub const EMPTY_COMPONENT_MASS: f64 = 1e-6;

/// One observation: a D-vector, or a whole missing frame (`null` on disk).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Frame(pub Option<Vec<f64>>);

impl Frame {
    pub fn present(values: Vec<f64>) -> Self {
        Frame(Some(values))
    }

    pub fn missing() -> Self {
        Frame(None)
    }

    pub fn is_missing(&self) -> bool {
        self.0.is_none()
    }

    pub fn values(&self) -> Option<&[f64]> {
        self.0.as_deref()
    }
}

/// Normal-Wishart distribution over a component mean and precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NWPosterior {
    pub lambda: f64,
    #[serde(with = "crate::serde_mat::vector")]
    pub mean: DVector<f64>,
    pub dof: f64,
    #[serde(with = "crate::serde_mat::matrix")]
    pub scale: DMatrix<f64>,
}

impl NWPosterior {
    pub fn prior(hyper: &ModelHyper) -> Self {
        NWPosterior {
            lambda: hyper.nw_lambda,
            mean: hyper.nw_mean.clone(),
            dof: hyper.nw_dof,
            scale: hyper.nw_scale.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Cholesky factor with a single jittered retry.
pub(crate) fn robust_cholesky(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = m.clone().cholesky() {
        return Ok(c);
    }
    let d = m.nrows();
    let trace = m.trace();
    if !(trace > 0.0 && trace.is_finite()) {
        return Err(Error::Numeric("degenerate component: scale matrix is singular".into()));
    }
    let jitter = 1e-8 * trace / d as f64;
    let shifted = m + DMatrix::identity(d, d) * jitter;
    shifted
        .cholesky()
        .ok_or_else(|| Error::Numeric("degenerate component: scale matrix is singular".into()))
}

fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Squared Mahalanobis norm `xᵀ M⁻¹ x` for the factored `M`.
fn mahalanobis(chol: &Cholesky<f64, Dyn>, x: &DVector<f64>) -> f64 {
    let l = chol.l_dirty();
    let z = l
        .solve_lower_triangular(x)
        .expect("cholesky factor has positive diagonal");
    z.norm_squared()
}

/// A component reduced to `constant − ½·precision_scale·(y−m)ᵀ S⁻¹ (y−m)`.
#[derive(Debug, Clone)]
struct PreparedComponent {
    mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    precision_scale: f64,
    constant: f64,
}

impl PreparedComponent {
    fn expected(comp: &NWPosterior) -> Result<Self> {
        let d = comp.dim() as f64;
        let chol = robust_cholesky(&comp.scale)?;
        let constant = 0.5
            * (mvdigamma(comp.dof / 2.0, comp.dim()) + d * std::f64::consts::LN_2 - log_det(&chol))
            - d / (2.0 * comp.lambda)
            - 0.5 * d * LN_2PI;
        Ok(PreparedComponent {
            mean: comp.mean.clone(),
            chol,
            precision_scale: comp.dof,
            constant,
        })
    }

    /// Plug-in Gaussian at the posterior-mean precision `dof · S⁻¹`.
    fn plug_in(comp: &NWPosterior) -> Result<Self> {
        let d = comp.dim() as f64;
        let chol = robust_cholesky(&comp.scale)?;
        let constant = 0.5 * (d * comp.dof.ln() - log_det(&chol)) - 0.5 * d * LN_2PI;
        Ok(PreparedComponent {
            mean: comp.mean.clone(),
            chol,
            precision_scale: comp.dof,
            constant,
        })
    }

    fn eval(&self, y: &[f64]) -> f64 {
        let diff = DVector::from_column_slice(y) - &self.mean;
        self.constant - 0.5 * self.precision_scale * mahalanobis(&self.chol, &diff)
    }
}

/// `E_q[log N(y | μ, R)]` under a Normal-Wishart posterior.
pub fn expected_log_gauss(comp: &NWPosterior, y: &[f64]) -> Result<f64> {
    if y.len() != comp.dim() {
        return Err(Error::Shape(format!(
            "frame has {} values, component expects {}",
            y.len(),
            comp.dim()
        )));
    }
    Ok(PreparedComponent::expected(comp)?.eval(y))
}

/// Per-state mixture emissions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionModel {
    /// `components[state][component]`.
    pub components: Vec<Vec<NWPosterior>>,
    /// Mixture-weight posterior per state.
    pub mix_weights: Vec<DirichletPosterior>,
}

impl EmissionModel {
    pub fn from_prior(hyper: &ModelHyper) -> Self {
        let prior = NWPosterior::prior(hyper);
        EmissionModel {
            components: vec![vec![prior; hyper.n_components]; hyper.n_states],
            mix_weights: hyper
                .w
                .iter()
                .map(|w| DirichletPosterior { concentration: w.clone() })
                .collect(),
        }
    }

    pub fn n_states(&self) -> usize {
        self.components.len()
    }

    pub fn n_components(&self) -> usize {
        self.components.first().map_or(0, Vec::len)
    }

    pub fn dim(&self) -> usize {
        self.components
            .first()
            .and_then(|c| c.first())
            .map_or(0, NWPosterior::dim)
    }

    pub fn check_shape(&self, hyper: &ModelHyper) -> Result<()> {
        let ok = self.components.len() == hyper.n_states
            && self.mix_weights.len() == hyper.n_states
            && self.components.iter().all(|row| {
                row.len() == hyper.n_components
                    && row
                        .iter()
                        .all(|c| c.dim() == hyper.dim && c.scale.shape() == (hyper.dim, hyper.dim))
            })
            && self.mix_weights.iter().all(|w| w.len() == hyper.n_components);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("emission model does not match hyperparameters".into()))
        }
    }

    /// Geometric-mean weights and expected log-densities, ready for evaluation.
    pub fn prepare(&self) -> Result<PreparedEmissions> {
        self.prepare_with(
            DirichletPosterior::expected_log_probs,
            PreparedComponent::expected,
        )
    }

    /// Posterior-mean weights with plug-in Gaussians.
    pub fn prepare_mean(&self) -> Result<PreparedEmissions> {
        self.prepare_with(
            |d| d.mean().into_iter().map(f64::ln).collect(),
            PreparedComponent::plug_in,
        )
    }

    fn prepare_with(
        &self,
        weights: impl Fn(&DirichletPosterior) -> Vec<f64>,
        comp: impl Fn(&NWPosterior) -> Result<PreparedComponent>,
    ) -> Result<PreparedEmissions> {
        let mut comps = Vec::with_capacity(self.n_states() * self.n_components());
        let mut log_weights = Vec::with_capacity(comps.capacity());
        let mut mean_weights = Vec::with_capacity(comps.capacity());
        for (row, w) in self.components.iter().zip(&self.mix_weights) {
            for c in row {
                comps.push(comp(c)?);
            }
            log_weights.extend(weights(w));
            mean_weights.extend(w.mean());
        }
        Ok(PreparedEmissions {
            n_states: self.n_states(),
            n_components: self.n_components(),
            dim: self.dim(),
            comps,
            log_weights,
            mean_weights,
        })
    }

    /// Sum of Normal-Wishart and mixture-weight KL divergences.
    pub fn kl(&self, hyper: &ModelHyper) -> Result<f64> {
        let prior = NWPosterior::prior(hyper);
        let mut acc = 0.0;
        for row in &self.components {
            for c in row {
                acc += nw_kl(c, &prior)?;
            }
        }
        for (q, w) in self.mix_weights.iter().zip(&hyper.w) {
            acc += dirichlet_kl(q, w)?;
        }
        Ok(acc)
    }
}

/// Emission evaluator with cached factorisations.
#[derive(Debug, Clone)]
pub struct PreparedEmissions {
    n_states: usize,
    n_components: usize,
    dim: usize,
    comps: Vec<PreparedComponent>,
    log_weights: Vec<f64>,
    mean_weights: Vec<f64>,
}

/// Log emission values, `T × N`, row-major by time.
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionTable {
    pub n_states: usize,
    pub log: Vec<f64>,
}

impl EmissionTable {
    pub fn from_log(n_states: usize, log: Vec<f64>) -> Self {
        debug_assert_eq!(log.len() % n_states, 0);
        EmissionTable { n_states, log }
    }

    pub fn len(&self) -> usize {
        self.log.len() / self.n_states
    }

    pub fn is_empty(&self) -> bool {
        self.log.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.log[t * self.n_states..(t + 1) * self.n_states]
    }
}

impl PreparedEmissions {
    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn component_logs(&self, y: &[f64], state: usize, out: &mut [f64]) {
        let base = state * self.n_components;
        for (m, o) in out.iter_mut().enumerate() {
            *o = self.log_weights[base + m] + self.comps[base + m].eval(y);
        }
    }

    /// `log p*(y | state)`; zero for a missing frame.
    pub fn log_emission(&self, frame: &Frame, state: usize) -> Result<f64> {
        let Some(y) = frame.values() else {
            return Ok(0.0);
        };
        self.check_frame(y)?;
        let mut buf = vec![0.0; self.n_components];
        self.component_logs(y, state, &mut buf);
        Ok(log_sum_exp(&buf))
    }

    fn check_frame(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.dim {
            return Err(Error::Shape(format!(
                "frame has {} values, model expects {}",
                y.len(),
                self.dim
            )));
        }
        Ok(())
    }

    pub fn log_table(&self, frames: &[Frame]) -> Result<EmissionTable> {
        let n = self.n_states;
        let mut log = vec![0.0; frames.len() * n];
        let mut buf = vec![0.0; self.n_components];
        for (t, frame) in frames.iter().enumerate() {
            if let Some(y) = frame.values() {
                self.check_frame(y)?;
                for i in 0..n {
                    self.component_logs(y, i, &mut buf);
                    log[t * n + i] = log_sum_exp(&buf);
                }
            }
        }
        Ok(EmissionTable { n_states: n, log })
    }

    /// Splits each state's marginal over its mixture components.
    ///
    /// Returns an `N × M` row-major matrix and a flag set when a state's
    /// component likelihoods all underflowed (that state is split uniformly).
    /// Missing frames use the posterior-mean mixture weights.
    pub fn component_responsibilities(
        &self,
        frame: &Frame,
        state_marginals: &[f64],
    ) -> Result<(Vec<f64>, bool)> {
        let (n, m) = (self.n_states, self.n_components);
        let mut out = vec![0.0; n * m];
        let mut underflow = false;
        match frame.values() {
            None => {
                for i in 0..n {
                    for k in 0..m {
                        out[i * m + k] = state_marginals[i] * self.mean_weights[i * m + k];
                    }
                }
            }
            Some(y) => {
                self.check_frame(y)?;
                let mut buf = vec![0.0; m];
                for i in 0..n {
                    self.component_logs(y, i, &mut buf);
                    let lse = log_sum_exp(&buf);
                    let row = &mut out[i * m..(i + 1) * m];
                    if lse.is_finite() {
                        for (o, l) in row.iter_mut().zip(&buf) {
                            *o = state_marginals[i] * (l - lse).exp();
                        }
                    } else {
                        underflow = true;
                        row.fill(state_marginals[i] / m as f64);
                    }
                }
            }
        }
        Ok((out, underflow))
    }
}

/// `p*(y | state)` in scalar form.
pub fn starred_emission(model: &EmissionModel, frame: &Frame, state: usize) -> Result<f64> {
    if state >= model.n_states() {
        return Err(Error::InvalidArgument(format!("state {state} out of range")));
    }
    Ok(model.prepare()?.log_emission(frame, state)?.exp())
}

/// Sufficient statistics of a weighted point set.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedStats {
    pub count: f64,
    pub mean: DVector<f64>,
    /// `Σ w (y − mean)(y − mean)ᵀ`.
    pub scatter: DMatrix<f64>,
}

impl WeightedStats {
    pub fn empty(dim: usize) -> Self {
        WeightedStats {
            count: 0.0,
            mean: DVector::zeros(dim),
            scatter: DMatrix::zeros(dim, dim),
        }
    }

    /// Two-pass weighted mean and scatter.
    pub fn from_weighted(points: &[&[f64]], weights: &[f64], dim: usize) -> Self {
        debug_assert_eq!(points.len(), weights.len());
        let count: f64 = weights.iter().sum();
        if count <= 0.0 {
            return Self::empty(dim);
        }
        let mut mean = DVector::zeros(dim);
        for (p, &w) in points.iter().zip(weights) {
            if w != 0.0 {
                for (m, v) in mean.iter_mut().zip(p.iter()) {
                    *m += w * v;
                }
            }
        }
        mean /= count;
        let mut scatter = DMatrix::zeros(dim, dim);
        let mut diff = DVector::zeros(dim);
        for (p, &w) in points.iter().zip(weights) {
            if w != 0.0 {
                for d in 0..dim {
                    diff[d] = p[d] - mean[d];
                }
                scatter.ger(w, &diff, &diff, 1.0);
            }
        }
        WeightedStats { count, mean, scatter }
    }

    /// Pools the statistics of two disjoint point sets.
    pub fn merge(&self, other: &WeightedStats) -> WeightedStats {
        if self.count == 0.0 {
            return other.clone();
        }
        if other.count == 0.0 {
            return self.clone();
        }
        let count = self.count + other.count;
        let delta = &other.mean - &self.mean;
        let mean = &self.mean + &delta * (other.count / count);
        let scatter = &self.scatter
            + &other.scatter
            + &delta * delta.transpose() * (self.count * other.count / count);
        WeightedStats { count, mean, scatter }
    }
}

/// Conjugate Normal-Wishart update.
pub fn update_nw(prior: &NWPosterior, stats: &WeightedStats) -> NWPosterior {
    if stats.count <= 0.0 {
        return prior.clone();
    }
    let w = stats.count;
    let lambda = prior.lambda + w;
    let mean = (&prior.mean * prior.lambda + &stats.mean * w) / lambda;
    let dev = &stats.mean - &prior.mean;
    let mut scale = &prior.scale + &stats.scatter;
    scale.ger(prior.lambda * w / lambda, &dev, &dev, 1.0);
    // keep exact symmetry
    let scale = (&scale + scale.transpose()) * 0.5;
    NWPosterior {
        lambda,
        mean,
        dof: prior.dof + w,
        scale,
    }
}

/// `KL(post ‖ prior)` between Normal-Wishart distributions.
pub fn nw_kl(post: &NWPosterior, prior: &NWPosterior) -> Result<f64> {
    let dim = post.dim();
    if prior.dim() != dim || post.scale.shape() != prior.scale.shape() {
        return Err(Error::Shape("Normal-Wishart dimensions differ".into()));
    }
    let d = dim as f64;
    let chol_post = robust_cholesky(&post.scale)?;
    let chol_prior = robust_cholesky(&prior.scale)?;
    let ratio = prior.lambda / post.lambda;
    let dm = &post.mean - &prior.mean;
    let gauss = 0.5
        * (d * (ratio - 1.0 - ratio.ln()) + prior.lambda * post.dof * mahalanobis(&chol_post, &dm));
    let trace = chol_post.solve(&prior.scale).trace();
    let wishart = -0.5 * prior.dof * (log_det(&chol_prior) - log_det(&chol_post))
        + 0.5 * post.dof * (trace - d)
        + ln_mvgamma(prior.dof / 2.0, dim)
        - ln_mvgamma(post.dof / 2.0, dim)
        + 0.5 * (post.dof - prior.dof) * mvdigamma(post.dof / 2.0, dim);
    Ok((gauss + wishart).max(0.0))
}
