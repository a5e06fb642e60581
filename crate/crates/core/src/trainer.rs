//! Variational EM: initialisation, E-step, M-step, ELBO and the fit loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::emission::{
    update_nw, EmissionModel, Frame, NWPosterior, PreparedEmissions, WeightedStats,
    EMPTY_COMPONENT_MASS,
};
use crate::error::{Error, Result};
use crate::kmeans::kmeans;
use crate::lattice::{self, Responsibilities};
use crate::model::{DirichletPosterior, LatentPosteriors, ModelHyper, StarredParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub seed: u64,
    pub min_iters: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { max_iters: 200, rel_tol: 1e-6, seed: 0, min_iters: 3 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0) {
            return Err(Error::InvalidArgument("rel_tol must be positive".into()));
        }
        if self.max_iters == 0 || self.max_iters < self.min_iters {
            return Err(Error::InvalidArgument(format!(
                "max_iters ({}) must be >= max(1, min_iters = {})",
                self.max_iters, self.min_iters
            )));
        }
        Ok(())
    }
}

/// A fitted model together with its training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub hyper: ModelHyper,
    #[serde(rename = "latent_posteriors")]
    pub posteriors: LatentPosteriors,
    pub emissions: EmissionModel,
    /// ELBO after each M-step.
    pub elbo_trace: Vec<f64>,
    pub converged: bool,
}

impl TrainedModel {
    /// Model whose posteriors equal the priors.
    pub fn from_prior(hyper: ModelHyper) -> Self {
        TrainedModel {
            posteriors: LatentPosteriors::from_prior(&hyper),
            emissions: EmissionModel::from_prior(&hyper),
            hyper,
            elbo_trace: Vec::new(),
            converged: false,
        }
    }

    pub fn final_elbo(&self) -> Option<f64> {
        self.elbo_trace.last().copied()
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        self.posteriors.check_shape(&self.hyper)?;
        self.emissions.check_shape(&self.hyper)
    }
}

fn check_sequences<S: AsRef<[Frame]>>(sequences: &[S]) -> Result<()> {
    if sequences.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if let Some(i) = sequences.iter().position(|s| s.as_ref().is_empty()) {
        return Err(Error::InvalidArgument(format!("sequence {i} has no frames")));
    }
    Ok(())
}

/// Seeds the posteriors from hard k-means assignments.
///
/// Emitting states come from an N-way clustering of all present frames and
/// mixture components from an M-way clustering within each state. The
/// lag-`k` transition rows count hard transitions between frames `k` steps
/// apart. Lag-chain posteriors are the prior plus a random perturbation.
pub fn kmeans_init<S: AsRef<[Frame]>>(
    sequences: &[S],
    hyper: &ModelHyper,
    seed: u64,
) -> Result<(LatentPosteriors, EmissionModel)> {
    hyper.validate()?;
    check_sequences(sequences)?;
    let (n, m, k) = (hyper.n_states, hyper.n_components, hyper.max_lag);

    let mut points: Vec<&[f64]> = Vec::new();
    let mut owners: Vec<(usize, usize)> = Vec::new();
    for (s, seq) in sequences.iter().enumerate() {
        for (t, frame) in seq.as_ref().iter().enumerate() {
            if let Some(y) = frame.values() {
                if y.len() != hyper.dim {
                    return Err(Error::Shape(format!(
                        "sequence {s} frame {t} has {} values, expected {}",
                        y.len(),
                        hyper.dim
                    )));
                }
                points.push(y);
                owners.push((s, t));
            }
        }
    }
    if points.len() < n * m {
        return Err(Error::DegenerateData(format!(
            "{} present frames are too few for {n} states x {m} components",
            points.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states = kmeans(&points, n, &mut rng)?;

    let mut labels: Vec<Vec<Option<usize>>> =
        sequences.iter().map(|s| vec![None; s.as_ref().len()]).collect();
    for (&(s, t), &a) in owners.iter().zip(&states.assignments) {
        labels[s][t] = Some(a);
    }

    let prior = NWPosterior::prior(hyper);
    let mut components = Vec::with_capacity(n);
    let mut mix_weights = Vec::with_capacity(n);
    for i in 0..n {
        let members: Vec<&[f64]> = points
            .iter()
            .zip(&states.assignments)
            .filter(|(_, &a)| a == i)
            .map(|(p, _)| *p)
            .collect();
        let comp_of: Vec<usize> = if members.len() >= m {
            kmeans(&members, m, &mut rng)?.assignments
        } else {
            (0..members.len()).map(|j| j % m).collect()
        };
        let mut row = Vec::with_capacity(m);
        let mut counts = vec![0.0; m];
        for c in 0..m {
            let pts: Vec<&[f64]> = members
                .iter()
                .zip(&comp_of)
                .filter(|(_, &a)| a == c)
                .map(|(p, _)| *p)
                .collect();
            counts[c] = pts.len() as f64;
            let stats = WeightedStats::from_weighted(&pts, &vec![1.0; pts.len()], hyper.dim);
            row.push(update_nw(&prior, &stats));
        }
        components.push(row);
        mix_weights.push(DirichletPosterior::from_counts(&hyper.w[i], &counts));
    }

    let mut pi_counts = vec![0.0; n];
    let mut dep_counts = vec![vec![vec![0.0; n]; n]; k];
    for seq in &labels {
        if let Some(Some(x)) = seq.first() {
            pi_counts[*x] += 1.0;
        }
        for (lag, counts) in dep_counts.iter_mut().enumerate() {
            for t in (lag + 1)..seq.len() {
                if let (Some(from), Some(to)) = (seq[t - lag - 1], seq[t]) {
                    counts[from][to] += 1.0;
                }
            }
        }
    }

    let mut perturbed = |prior: &[f64]| {
        let counts: Vec<f64> = prior.iter().map(|_| 1.0 + 0.1 * rng.random::<f64>()).collect();
        DirichletPosterior::from_counts(prior, &counts)
    };
    let q_pi_hat = perturbed(&hyper.alpha0);
    let q_a_hat = hyper.alpha.iter().map(|row| perturbed(row)).collect();

    let posteriors = LatentPosteriors {
        q_pi_hat,
        q_a_hat,
        q_pi: DirichletPosterior::from_counts(&hyper.eta0, &pi_counts),
        q_a_dep: hyper
            .eta_dep
            .iter()
            .zip(&dep_counts)
            .map(|(rows, counts)| {
                rows.iter()
                    .zip(counts)
                    .map(|(r, c)| DirichletPosterior::from_counts(r, c))
                    .collect()
            })
            .collect(),
    };
    Ok((posteriors, EmissionModel { components, mix_weights }))
}

/// Result of an E-step over a training set.
#[derive(Debug, Clone)]
pub struct EStep {
    pub responsibilities: Vec<Responsibilities>,
    /// Sum of per-sequence forward log-normalisers.
    pub loglik: f64,
}

fn sequence_pass(
    params: &StarredParams,
    prepared: &PreparedEmissions,
    frames: &[Frame],
) -> Result<(Responsibilities, f64)> {
    let table = prepared.log_table(frames)?;
    let (fwd, mut resp) = lattice::smooth(params, &table)?;
    let (n, _) = (resp.n_states, resp.max_lag);
    let mut comp = Vec::new();
    let mut underflow = false;
    for (t, frame) in frames.iter().enumerate() {
        let (row, flag) = prepared.component_responsibilities(frame, &resp.gamma_x[t * n..(t + 1) * n])?;
        underflow |= flag;
        comp.extend(row);
    }
    if underflow {
        log::warn!("component likelihoods underflowed; split uniformly");
    }
    resp.n_components = comp.len() / (n * frames.len());
    resp.gamma_comp = comp;
    Ok((resp, lattice::loglik(&fwd)))
}

/// Runs forward-backward on every sequence under the current posteriors.
pub fn e_step<S: AsRef<[Frame]> + Sync>(
    posteriors: &LatentPosteriors,
    emissions: &EmissionModel,
    sequences: &[S],
) -> Result<EStep> {
    let params = posteriors.starred();
    let prepared = emissions.prepare()?;
    let results: Vec<Result<(Responsibilities, f64)>> = sequences
        .par_iter()
        .map(|s| sequence_pass(&params, &prepared, s.as_ref()))
        .collect();
    let mut responsibilities = Vec::with_capacity(results.len());
    let mut loglik = 0.0;
    for r in results {
        let (resp, ll) = r?;
        loglik += ll;
        responsibilities.push(resp);
    }
    Ok(EStep { responsibilities, loglik })
}

/// Conjugate posterior updates from summed responsibilities.
///
/// Missing frames contribute to the transition statistics only; they are
/// excluded from the mixture-weight and Normal-Wishart statistics.
pub fn m_step<S: AsRef<[Frame]>>(
    hyper: &ModelHyper,
    responsibilities: &[Responsibilities],
    sequences: &[S],
) -> Result<(LatentPosteriors, EmissionModel)> {
    if responsibilities.len() != sequences.len() {
        return Err(Error::Shape("one responsibility set per sequence is required".into()));
    }
    let (n, m, k, d) = (hyper.n_states, hyper.n_components, hyper.max_lag, hyper.dim);

    let mut pi_hat = vec![0.0; k];
    let mut a_hat = vec![vec![0.0; k]; k];
    let mut pi = vec![0.0; n];
    let mut a_dep = vec![vec![vec![0.0; n]; n]; k];
    let mut mix = vec![vec![0.0; m]; n];
    let mut points: Vec<&[f64]> = Vec::new();
    let mut weights: Vec<Vec<f64>> = vec![Vec::new(); n * m];

    for (r, seq) in responsibilities.iter().zip(sequences) {
        let frames = seq.as_ref();
        if r.steps != frames.len() || r.n_states != n || r.max_lag != k || r.n_components != m {
            return Err(Error::Shape("responsibilities do not match the model".into()));
        }
        for (acc, g) in pi_hat.iter_mut().zip(r.gamma_z(0)) {
            *acc += g;
        }
        for (acc, g) in pi.iter_mut().zip(r.gamma_x(0)) {
            *acc += g;
        }
        for t in 1..r.steps {
            for (prev, row) in a_hat.iter_mut().enumerate() {
                for (next, acc) in row.iter_mut().enumerate() {
                    *acc += r.gamma_zz(t, prev, next);
                }
            }
            for (lag, rows) in a_dep.iter_mut().enumerate() {
                for (from, row) in rows.iter_mut().enumerate() {
                    for (to, acc) in row.iter_mut().enumerate() {
                        *acc += r.gamma_xx(t, lag, from, to);
                    }
                }
            }
        }
        for (t, frame) in frames.iter().enumerate() {
            let Some(y) = frame.values() else { continue };
            let gc = r.gamma_comp(t);
            points.push(y);
            for i in 0..n {
                for c in 0..m {
                    mix[i][c] += gc[i * m + c];
                    weights[i * m + c].push(gc[i * m + c]);
                }
            }
        }
    }

    let posteriors = LatentPosteriors {
        q_pi_hat: DirichletPosterior::from_counts(&hyper.alpha0, &pi_hat),
        q_a_hat: hyper
            .alpha
            .iter()
            .zip(&a_hat)
            .map(|(p, c)| DirichletPosterior::from_counts(p, c))
            .collect(),
        q_pi: DirichletPosterior::from_counts(&hyper.eta0, &pi),
        q_a_dep: hyper
            .eta_dep
            .iter()
            .zip(&a_dep)
            .map(|(rows, counts)| {
                rows.iter()
                    .zip(counts)
                    .map(|(p, c)| DirichletPosterior::from_counts(p, c))
                    .collect()
            })
            .collect(),
    };

    let prior = NWPosterior::prior(hyper);
    let mut components = Vec::with_capacity(n);
    for i in 0..n {
        let state_mass: f64 = mix[i].iter().sum();
        let row = (0..m)
            .map(|c| {
                let stats = WeightedStats::from_weighted(&points, &weights[i * m + c], d);
                if state_mass < EMPTY_COMPONENT_MASS {
                    prior.clone()
                } else {
                    update_nw(&prior, &stats)
                }
            })
            .collect();
        components.push(row);
    }
    let mix_weights = hyper
        .w
        .iter()
        .zip(&mix)
        .map(|(p, c)| DirichletPosterior::from_counts(p, c))
        .collect();
    Ok((posteriors, EmissionModel { components, mix_weights }))
}

/// Evidence lower bound: summed forward log-normalisers under the starred
/// parameters minus every KL divergence to the priors.
pub fn elbo<S: AsRef<[Frame]> + Sync>(
    posteriors: &LatentPosteriors,
    emissions: &EmissionModel,
    hyper: &ModelHyper,
    sequences: &[S],
) -> Result<f64> {
    let params = posteriors.starred();
    let prepared = emissions.prepare()?;
    let lls: Vec<Result<f64>> = sequences
        .par_iter()
        .map(|s| {
            let table = prepared.log_table(s.as_ref())?;
            Ok(lattice::loglik(&lattice::forward(&params, &table)?))
        })
        .collect();
    let mut total = 0.0;
    for ll in lls {
        total += ll?;
    }
    Ok(total - posteriors.kl(hyper)? - emissions.kl(hyper)?)
}

/// Trains a model from k-means initialisation.
pub fn fit<S: AsRef<[Frame]> + Sync>(
    sequences: &[S],
    hyper: &ModelHyper,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    config.validate()?;
    let init = kmeans_init(sequences, hyper, config.seed)?;
    fit_from(sequences, hyper, config, init)
}

/// Trains a model from the given initial posteriors.
pub fn fit_from<S: AsRef<[Frame]> + Sync>(
    sequences: &[S],
    hyper: &ModelHyper,
    config: &TrainConfig,
    init: (LatentPosteriors, EmissionModel),
) -> Result<TrainedModel> {
    config.validate()?;
    hyper.validate()?;
    check_sequences(sequences)?;
    let (mut posteriors, mut emissions) = init;
    posteriors.check_shape(hyper)?;
    emissions.check_shape(hyper)?;

    let mut trace = Vec::new();
    let mut converged = false;
    let mut est = e_step(&posteriors, &emissions, sequences)?;
    for _ in 0..config.max_iters {
        (posteriors, emissions) = m_step(hyper, &est.responsibilities, sequences)?;
        // The next E-step's evidence is the current ELBO's data term.
        est = e_step(&posteriors, &emissions, sequences)?;
        let value = est.loglik - posteriors.kl(hyper)? - emissions.kl(hyper)?;
        if !value.is_finite() {
            return Err(Error::Numeric("ELBO is not finite".into()));
        }
        trace.push(value);
        if trace.len() >= config.min_iters.max(2) {
            let prev = trace[trace.len() - 2];
            if ((value - prev) / value.abs().max(f64::MIN_POSITIVE)).abs() < config.rel_tol {
                converged = true;
                break;
            }
        }
    }
    log::debug!(
        "fit finished after {} iterations (converged: {converged})",
        trace.len()
    );
    Ok(TrainedModel {
        hyper: hyper.clone(),
        posteriors,
        emissions,
        elbo_trace: trace,
        converged,
    })
}
