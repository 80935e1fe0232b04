//! Deterministic federated-learning simulator with contribution-weighted
//! aggregation (FedCE), brute-force client valuation, fairness metrics,
//! free-rider scoring and empirical checks of value stability and convergence.

// Negated comparisons like `!(x >= 0.0)` are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod contribution;
pub mod error;
pub mod fl_engine;
pub mod metrics;
pub mod models;
pub mod oracles;
pub mod synthdata;
pub mod theory_checks;

pub use contribution::{Combination, ContributionLedger, RoundContributions};
pub use error::{Error, Result};
pub use fl_engine::{run_experiment, Algorithm, PseudoGradient, RoundLog, RunOutput, TrainingConfig};
pub use metrics::FairnessReport;
pub use models::{Label, ModelSpec, ParamVector, Sample};
pub use synthdata::{generate_federation, ClientDataset, FederationSpec, Task};
