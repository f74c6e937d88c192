//! Energy sharing among prosumers with capacity limits.
//!
//! Solvers for the centralized social optimum, the sharing-market generalized
//! Nash equilibrium and stand-alone self-sufficiency; the iterative bidding
//! process between prosumers and the platform; efficiency and participation
//! metrics; brute-force oracles; and experiment drivers behind a small CLI.

pub mod bidding;
pub mod cli;
pub mod equilibrium;
pub mod error;
pub mod metrics;
mod numeric;
pub mod oracle;
pub mod prosumer;
pub mod scenarios;

pub use bidding::{run_bidding, Behavior, BiddingConfig, BiddingTrace, Schedule, Termination};
pub use equilibrium::{
    kkt_residual, solve_gne_direct, solve_self_sufficiency_profile, solve_social_optimum,
    EquilibriumSolution, MarketInstance, SolutionMode,
};
pub use error::{Result, SharingError};
pub use prosumer::{CurvePair, Prosumer, QuadraticCurves};
