//! Variational Bayesian conditional-dependence hidden Markov models.
//!
//! A two-layer latent process: a first-order chain over lag indicators
//! `z_t ∈ {1..K}` selects which past emitting state `x_{t-z_t}` the current
//! state `x_t` is conditioned on. Emissions are Gaussian mixtures with
//! Normal-Wishart posteriors. Training is conjugate variational EM driven by
//! a forward-backward pass over windows of the last `K` states.

pub mod classifier;
pub mod data;
pub mod emission;
pub mod error;
pub mod kmeans;
pub mod lattice;
pub mod model;
mod serde_mat;
pub mod special;
pub mod trainer;

pub use classifier::{ModelBank, PredictiveParams};
pub use emission::{EmissionModel, EmissionTable, Frame, NWPosterior, WeightedStats};
pub use error::{Error, Result};
pub use lattice::{MessageLattice, Responsibilities, WindowLayout};
pub use model::{default_hyper, DirichletPosterior, LatentPosteriors, ModelHyper, StarredParams};
pub use trainer::{fit, TrainConfig, TrainedModel};
