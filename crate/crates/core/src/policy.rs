//! Decision costs, the asymptotically optimal (AO) stopping rule, and
//! trajectory execution.
//!
//! The AO policy stops at the first `n >= 0` with `g(x_{1:n}) <= n + 1`,
//! where `g = min_m D_m` and
//! `D_m = sum_{i != m} lambda_det[i] p(H_i | x) + lambda_est[m] p(H_m | x) Tr(Sigma_m)`.
//! It then decides for `argmin_m D_m` and reports the posterior mean of
//! the decided hypothesis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{summarize_into, HypothesisId, Param, PosteriorSummary, ScenarioModel};

/// Projection floor for cost coefficients.
pub const EPSILON: f64 = 1e-12;

/// The `2M` positive cost coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostCoefficients {
    pub lambda_det: Vec<f64>,
    pub lambda_est: Vec<f64>,
}

impl CostCoefficients {
    pub fn new(lambda_det: Vec<f64>, lambda_est: Vec<f64>) -> Result<Self> {
        let c = CostCoefficients { lambda_det, lambda_est };
        c.validate()?;
        Ok(c)
    }

    /// All `2M` coefficients equal to `value`.
    pub fn uniform(num: usize, value: f64) -> Self {
        CostCoefficients {
            lambda_det: vec![value; num],
            lambda_est: vec![value; num],
        }
    }

    /// Rebuild from the stacked `[lambda_det; lambda_est]` layout.
    pub fn from_stacked(v: &[f64]) -> Self {
        let m = v.len() / 2;
        CostCoefficients {
            lambda_det: v[..m].to_vec(),
            lambda_est: v[m..].to_vec(),
        }
    }

    pub fn stacked(&self) -> Vec<f64> {
        self.lambda_det.iter().chain(&self.lambda_est).copied().collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_det.len() != self.lambda_est.len() || self.lambda_det.len() < 2 {
            return Err(Error::validation(
                "coefficients",
                "need matching lambda_det and lambda_est of length M >= 2",
            ));
        }
        if self.stacked().iter().any(|&c| !(c >= EPSILON && c.is_finite())) {
            return Err(Error::validation("coefficients", "must be finite and at least 1e-12"));
        }
        Ok(())
    }

    pub fn num_hypotheses(&self) -> usize {
        self.lambda_det.len()
    }

    /// Sum of all `2M` coefficients.
    pub fn total(&self) -> f64 {
        self.lambda_det.iter().chain(&self.lambda_est).sum()
    }

    pub fn c_bar(&self) -> f64 {
        1.0 / self.total()
    }

    pub fn normalized_det(&self, m: HypothesisId) -> f64 {
        self.lambda_det[m.index()] / self.total()
    }

    pub fn normalized_est(&self, m: HypothesisId) -> f64 {
        self.lambda_est[m.index()] / self.total()
    }

    pub fn scaled(&self, gamma: f64) -> Self {
        CostCoefficients {
            lambda_det: self.lambda_det.iter().map(|c| c * gamma).collect(),
            lambda_est: self.lambda_est.iter().map(|c| c * gamma).collect(),
        }
    }
}

/// Cost `D_m` of deciding for `m` at the current posterior.
pub fn decision_cost(m: HypothesisId, summary: &PosteriorSummary, coeffs: &CostCoefficients) -> f64 {
    let i = m.index();
    let miss: f64 = summary
        .hyp_post
        .iter()
        .zip(&coeffs.lambda_det)
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, (p, l))| l * p)
        .sum();
    miss + coeffs.lambda_est[i] * summary.hyp_post[i] * summary.post_var_trace[i]
}

/// Smallest decision cost and its hypothesis (smallest index on ties).
fn best_decision(summary: &PosteriorSummary, coeffs: &CostCoefficients) -> (HypothesisId, f64) {
    let mut best = (HypothesisId::new(0), f64::INFINITY);
    for i in 0..summary.num_hypotheses() {
        let m = HypothesisId::new(i);
        let d = decision_cost(m, summary, coeffs);
        if d < best.1 {
            best = (m, d);
        }
    }
    best
}

/// Instantaneous cost `g = min_m D_m`.
pub fn cost_g(summary: &PosteriorSummary, coeffs: &CostCoefficients) -> f64 {
    best_decision(summary, coeffs).1
}

/// AO stopping test `g <= n + 1`.
pub fn ao_should_stop(g: f64, n: usize) -> bool {
    g <= (n + 1) as f64
}

/// `argmin_m D_m`, ties toward the smallest index.
pub fn decide(summary: &PosteriorSummary, coeffs: &CostCoefficients) -> HypothesisId {
    best_decision(summary, coeffs).0
}

/// Limit of `n * g / sum(lambda)` under `H_m` with parameter `theta`.
pub fn normalized_cost_limit<S: ScenarioModel>(
    model: &S,
    m: HypothesisId,
    theta: &[f64],
    coeffs: &CostCoefficients,
) -> f64 {
    coeffs.normalized_est(m) * model.fisher_info_trace_inv(m, theta)
}

/// Outcome of one simulated run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub true_m: HypothesisId,
    pub true_theta: Param,
    /// Number of samples used.
    pub tau: usize,
    pub decision: HypothesisId,
    pub estimate: Param,
    /// Instantaneous cost `g` at the stopping time; zero for rules without one.
    pub cost: f64,
    /// The run reached `n_max` without the rule stopping.
    pub capped: bool,
}

impl Trajectory {
    pub fn correct(&self) -> bool {
        self.decision == self.true_m
    }

    /// `||estimate - theta||^2` if the decision is correct, else zero.
    pub fn squared_error(&self) -> f64 {
        if !self.correct() {
            return 0.0;
        }
        self.estimate
            .iter()
            .zip(&self.true_theta)
            .map(|(e, t)| (e - t) * (e - t))
            .sum()
    }
}

/// A stop signal from a sequential rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stop {
    pub decision: HypothesisId,
    pub cost: f64,
}

/// Stopping and decision rule evaluated on posterior summaries.
pub trait StoppingRule: Send + Sync {
    /// Smallest sample count at which the rule is consulted.
    fn first_check(&self) -> usize;

    /// `Some` to stop at the summary's sample count.
    fn check(&self, summary: &PosteriorSummary) -> Option<Stop>;

    /// Decision forced at the sample cap.
    fn forced(&self, summary: &PosteriorSummary) -> Stop;
}

/// The AO stopping rule for fixed coefficients.
#[derive(Debug, Clone)]
pub struct AoPolicy {
    pub coeffs: CostCoefficients,
}

impl AoPolicy {
    pub fn new(coeffs: CostCoefficients) -> Self {
        AoPolicy { coeffs }
    }
}

impl StoppingRule for AoPolicy {
    fn first_check(&self) -> usize {
        0
    }

    fn check(&self, summary: &PosteriorSummary) -> Option<Stop> {
        let (decision, g) = best_decision(summary, &self.coeffs);
        ao_should_stop(g, summary.n).then_some(Stop { decision, cost: g })
    }

    fn forced(&self, summary: &PosteriorSummary) -> Stop {
        let (decision, cost) = best_decision(summary, &self.coeffs);
        Stop { decision, cost }
    }
}

/// Draw a hypothesis from the prior.
pub fn sample_hypothesis<S: ScenarioModel, R: Rng + ?Sized>(model: &S, rng: &mut R) -> HypothesisId {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for m in model.hypotheses() {
        acc += model.prior(m);
        if u < acc {
            return m;
        }
    }
    HypothesisId::new(model.num_hypotheses() - 1)
}

/// Run `rule` on data generated under `true_m` with a parameter drawn from its prior.
pub fn run_trajectory<S, P, R>(model: &S, rule: &P, true_m: HypothesisId, rng: &mut R, n_max: usize) -> Result<Trajectory>
where
    S: ScenarioModel,
    P: StoppingRule + ?Sized,
    R: Rng + ?Sized,
{
    let theta = model.sample_param(true_m, rng);
    let log_prior = model.log_priors();
    let mut stat = model.empty_statistic();
    let mut summary = PosteriorSummary::with_hypotheses(model.num_hypotheses());
    let mut n = 0;
    loop {
        if n >= rule.first_check() || n == n_max {
            summarize_into(model, &stat, &log_prior, &mut summary)?;
            let stop = if n >= rule.first_check() { rule.check(&summary) } else { None };
            if stop.is_some() || n == n_max {
                let capped = stop.is_none();
                let stop = stop.unwrap_or_else(|| rule.forced(&summary));
                return Ok(Trajectory {
                    true_m,
                    estimate: summary.post_mean[stop.decision.index()].clone(),
                    true_theta: theta,
                    tau: n,
                    decision: stop.decision,
                    cost: stop.cost,
                    capped,
                });
            }
        }
        let x = model.sample_observation(true_m, &theta, rng);
        model.update_statistic(&mut stat, &x);
        n += 1;
    }
}

/// One AO trajectory with the hypothesis and parameter drawn from the prior.
pub fn run_policy<S: ScenarioModel>(model: &S, coeffs: &CostCoefficients, seed: u64, n_max: usize) -> Result<Trajectory> {
    if n_max < 1 {
        return Err(Error::validation("n_max", "must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = sample_hypothesis(model, &mut rng);
    run_trajectory(model, &AoPolicy::new(coeffs.clone()), m, &mut rng, n_max)
}

/// `g(x_{1:n})` for `n = 0..=len` on one path generated under `(m, theta)`,
/// ignoring the stopping rule.
pub fn cost_path<S: ScenarioModel, R: Rng + ?Sized>(
    model: &S,
    coeffs: &CostCoefficients,
    m: HypothesisId,
    theta: &[f64],
    rng: &mut R,
    len: usize,
) -> Result<Vec<f64>> {
    let log_prior = model.log_priors();
    let mut stat = model.empty_statistic();
    let mut summary = PosteriorSummary::with_hypotheses(model.num_hypotheses());
    let mut out = Vec::with_capacity(len + 1);
    for n in 0..=len {
        if n > 0 {
            let x = model.sample_observation(m, theta, rng);
            model.update_statistic(&mut stat, &x);
        }
        summarize_into(model, &stat, &log_prior, &mut summary)?;
        out.push(cost_g(&summary, coeffs));
    }
    Ok(out)
}
