//! Sequential joint detection and estimation.
//!
//! Observations arrive one at a time; a sequential policy must decide when to
//! stop, which of `M` composite hypotheses generated the data, and what the
//! hypothesis parameter is. The crate provides the Bayesian machinery for two
//! bundled scenarios, the cost-optimal policy and a two-step baseline, a
//! deterministic Monte Carlo harness, and the coefficient design loop that
//! tunes the policy to target error levels.

pub mod cli_io;
pub mod design;
pub mod error;
pub mod model;
pub mod montecarlo;
pub mod msprt;
pub mod policy;
pub mod qam;
pub mod quadrature;
pub mod shift_in_mean;
pub mod special;

pub use error::{Error, Result};
pub use model::{
    hypothesis_posteriors, prior_summary, summarize, summarize_into, HypothesisEvidence, HypothesisId,
    Param, PosteriorSummary, ScenarioModel,
};
pub use montecarlo::{evaluate, evaluate_objective, objective_difference, split_seed, PerformanceEstimate, SimulationConfig};
pub use design::{design, design_with, estimate_gradient, gradient_from_performance, qn_step, DesignConfig, DesignOutcome, DesignState};
pub use msprt::{msprt_step, run_two_step, thresholds_for, thresholds_from_levels, MsprtThresholds, ThresholdRule, TwoStepPolicy};
pub use policy::{
    ao_should_stop, cost_g, cost_path, decide, decision_cost, normalized_cost_limit, run_policy, AoPolicy,
    CostCoefficients, StoppingRule, Trajectory,
};
pub use qam::{ConjugateState, Qam, QamConfig};
pub use shift_in_mean::{SiMConfig, ShiftInMean, ShiftStatistic};
