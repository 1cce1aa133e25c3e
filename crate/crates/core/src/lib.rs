//! Probabilistic programming on a small reverse-mode tensor engine.
//!
//! Models are written as ordinary functions that register named stochastic
//! nodes in a [`bayesnet::BayesianNet`]; re-running the function with a
//! different observation map reuses the model. Inference is provided by the
//! variational estimators in [`variational`], and by importance sampling and
//! adaptive Hamiltonian Monte Carlo in [`monte_carlo`].

pub mod bayesnet;
pub mod distributions;
pub mod error;
pub mod experiments;
pub mod monte_carlo;
pub mod rng;
pub mod tensor;
pub mod variational;

pub use bayesnet::{BayesianNet, ModelBuilder, Observed};
pub use distributions::Distribution;
pub use error::{Error, Result};
pub use rng::RngState;
pub use tensor::{Array, Tape, Tensor};
