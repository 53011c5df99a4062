//! Coupled hidden Markov models.
//!
//! Several observation streams, each driven by its own latent Markov chain,
//! are modelled jointly on the Cartesian product of the chain state spaces.
//! The crate covers the interchangeable coupling structures for the joint
//! transition matrix, normal, beta and normal-regression emissions, likelihood
//! evaluation and maximum-likelihood fitting, Viterbi and posterior decoding,
//! and simulation tools including a misspecification study harness.
//!
//! Chain states are 1-based in user-facing values (`StateSpace::encode`,
//! decoded per-chain paths) and 0-based everywhere else.

pub mod coupling;
pub mod decoding;
pub mod emissions;
pub mod error;
pub mod inference;
pub mod model;
pub mod numfmt;
pub mod optim;
pub mod simulation;
pub mod state_space;
pub mod tpm;

pub use coupling::{CouplingKind, CouplingSpec};
pub use decoding::{decode, decoding_error, disagreement_intervals, local_decode, viterbi, StatePath};
pub use emissions::{ChainEmissions, Covariates, EmissionFamily, EmissionSpec, ObservationSet};
pub use error::{ChmmError, Result};
pub use inference::{aic, compare_models, fit, log_likelihood, standard_errors, FitOptions, FitResult};
pub use model::{Model, ModelSpec, WorkingParameters};
pub use simulation::{forecast_score, run_study, simulate, SimConfig, SimReport};
pub use state_space::StateSpace;
pub use tpm::{stationary_distribution, StationaryDistribution, TransitionMatrix};
