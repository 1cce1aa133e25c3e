//! Importance-sampling evaluation and multi-chain Hamiltonian Monte Carlo.

mod hmc;
mod importance;

pub use hmc::{
    evaluate_log_joint, hmc_sample, hmc_transition, kinetic_energy, leapfrog, DualAveraging,
    Evaluation, HmcChainState, HmcConfig, HmcInfo, HmcRun, Positions, Trajectory,
};
pub use importance::is_loglikelihood;
