//! Two-step baseline: a matrix sequential probability ratio test (MSPRT)
//! on the prior-integrated likelihoods, followed by the posterior mean of
//! the accepted hypothesis.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HypothesisId, PosteriorSummary, ScenarioModel};
use crate::policy::{run_trajectory, sample_hypothesis, Stop, StoppingRule, Trajectory};

/// Per-hypothesis acceptance thresholds on the pairwise log-likelihood ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct MsprtThresholds {
    pub a: Vec<f64>,
}

impl MsprtThresholds {
    pub fn new(a: Vec<f64>) -> Result<Self> {
        if a.len() < 2 || a.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::validation("thresholds", "need M >= 2 positive finite entries"));
        }
        Ok(MsprtThresholds { a })
    }
}

/// `A_m = ln((M - 1) / alpha_bar_m)`.
pub fn thresholds_from_levels(alpha_bar: &[f64]) -> Result<MsprtThresholds> {
    if alpha_bar.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
        return Err(Error::validation("alpha_bar", "must lie in (0,1)"));
    }
    let k = (alpha_bar.len() as f64 - 1.0).max(0.0);
    MsprtThresholds::new(alpha_bar.iter().map(|&a| (k / a).ln()).collect())
}

/// How nominal error levels are turned into thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    /// `ln((M - 1) / alpha_bar_m)`: a union bound over the `M - 1` alternatives.
    #[default]
    Union,
    /// `ln(1 / alpha_bar_m)`: the pairwise Wald bound without the union factor.
    Single,
}

pub fn thresholds_for(rule: ThresholdRule, alpha_bar: &[f64]) -> Result<MsprtThresholds> {
    match rule {
        ThresholdRule::Union => thresholds_from_levels(alpha_bar),
        ThresholdRule::Single => {
            if alpha_bar.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
                return Err(Error::validation("alpha_bar", "must lie in (0,1)"));
            }
            MsprtThresholds::new(alpha_bar.iter().map(|&a| (1.0 / a).ln()).collect())
        }
    }
}

/// Stop when some `m` beats every other hypothesis by at least `A_m` in
/// log marginal likelihood. Returns the accepted hypothesis, if any.
pub fn msprt_step(summary: &PosteriorSummary, thresholds: &MsprtThresholds) -> (bool, Option<HypothesisId>) {
    let lm = &summary.log_marginal;
    // only the leader can dominate every other entry
    let mut top = 0;
    for (i, &v) in lm.iter().enumerate() {
        if v > lm[top] {
            top = i;
        }
    }
    let runner_up = lm
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if lm[top] - runner_up >= thresholds.a[top] {
        (true, Some(HypothesisId::new(top)))
    } else {
        (false, None)
    }
}

/// The MSPRT as a [`StoppingRule`]. A capped run decides for the posterior mode.
#[derive(Debug, Clone)]
pub struct TwoStepPolicy {
    pub thresholds: MsprtThresholds,
}

impl TwoStepPolicy {
    pub fn new(thresholds: MsprtThresholds) -> Self {
        TwoStepPolicy { thresholds }
    }
}

impl StoppingRule for TwoStepPolicy {
    fn first_check(&self) -> usize {
        1
    }

    fn check(&self, summary: &PosteriorSummary) -> Option<Stop> {
        msprt_step(summary, &self.thresholds)
            .1
            .map(|decision| Stop { decision, cost: 0.0 })
    }

    fn forced(&self, summary: &PosteriorSummary) -> Stop {
        Stop {
            decision: summary.map_hypothesis(),
            cost: 0.0,
        }
    }
}

/// One two-step trajectory with the hypothesis and parameter drawn from the prior.
pub fn run_two_step<S: ScenarioModel>(
    model: &S,
    thresholds: &MsprtThresholds,
    seed: u64,
    n_max: usize,
) -> Result<Trajectory> {
    if n_max < 1 {
        return Err(Error::validation("n_max", "must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = sample_hypothesis(model, &mut rng);
    run_trajectory(model, &TwoStepPolicy::new(thresholds.clone()), m, &mut rng, n_max)
}
