//! Projected quasi-Newton design of the cost coefficients.
//!
//! The coefficients maximise
//! `E[tau + g(x_tau)] - sum_m p(H_m) (lambda_det[m] alpha_bar[m] + lambda_est[m] beta_bar[m])`,
//! whose gradient is `p(H_m) (alpha_m - alpha_bar[m])` and
//! `p(H_m) (beta_m - beta_bar[m])`. Both are estimated by Monte Carlo.
//! Each iteration takes a BFGS step on the negated problem, projects onto
//! `[epsilon, inf)`, and stops once every constraint is met within tolerance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ScenarioModel;
use crate::montecarlo::{evaluate, split_seed, PerformanceEstimate, SimulationConfig};
use crate::policy::{AoPolicy, CostCoefficients, EPSILON};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignConfig {
    pub alpha_bar: Vec<f64>,
    pub beta_bar: Vec<f64>,
    pub tol_det: f64,
    pub tol_est: f64,
    /// Projection floor.
    pub epsilon: f64,
    pub runs_per_iter: u64,
    pub max_iters: usize,
    pub step_size: f64,
    /// Optional trust region: the step is shrunk so that no coefficient
    /// moves by more than this fraction of its current value.
    pub max_relative_step: Option<f64>,
    /// Iterations of the tied two-scale warm start; 0 disables it.
    pub warm_start_iters: usize,
    /// Run the full update on coefficients relative to their starting values.
    pub precondition: bool,
    pub n_max: usize,
    pub stratify_by_hypothesis: bool,
    /// Starting coefficients; `2 / alpha_bar` and `2 / beta_bar` when absent.
    pub initial: Option<CostCoefficients>,
}

impl Default for DesignConfig {
    fn default() -> Self {
        DesignConfig {
            alpha_bar: Vec::new(),
            beta_bar: Vec::new(),
            tol_det: 0.005,
            tol_est: 0.005,
            epsilon: EPSILON,
            runs_per_iter: 1_000_000,
            max_iters: 200,
            step_size: 1.0,
            max_relative_step: None,
            warm_start_iters: 0,
            precondition: false,
            n_max: 10_000,
            stratify_by_hypothesis: true,
            initial: None,
        }
    }
}

impl DesignConfig {
    pub fn validate(&self, num_hypotheses: usize) -> Result<()> {
        if self.alpha_bar.len() != num_hypotheses || self.beta_bar.len() != num_hypotheses {
            return Err(Error::validation(
                "alpha_bar",
                format!("alpha_bar and beta_bar need {num_hypotheses} entries"),
            ));
        }
        if self.alpha_bar.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
            return Err(Error::validation("alpha_bar", "must lie in (0,1)"));
        }
        if self.beta_bar.iter().any(|&b| !(b > 0.0 && b.is_finite())) {
            return Err(Error::validation("beta_bar", "must be positive"));
        }
        if !(self.tol_det > 0.0) || !(self.tol_est > 0.0) {
            return Err(Error::validation("design.tol_det", "tolerances must be positive"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::validation("design.epsilon", "must be positive"));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::validation("design.step_size", "must be positive"));
        }
        if self.max_relative_step.is_some_and(|r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::validation("design.max_relative_step", "must be positive"));
        }
        if self.runs_per_iter < 1 {
            return Err(Error::validation("design.runs_per_iter", "must be at least 1"));
        }
        if self.max_iters < 1 {
            return Err(Error::validation("design.max_iters", "must be at least 1"));
        }
        if let Some(c) = &self.initial {
            c.validate()?;
            if c.num_hypotheses() != num_hypotheses {
                return Err(Error::validation("design.initial", "has the wrong number of hypotheses"));
            }
        }
        Ok(())
    }

    pub fn initial_coefficients(&self) -> CostCoefficients {
        self.initial.clone().unwrap_or_else(|| CostCoefficients {
            lambda_det: self.alpha_bar.iter().map(|a| 2.0 / a).collect(),
            lambda_est: self.beta_bar.iter().map(|b| 2.0 / b).collect(),
        })
    }

    /// Largest constraint violation in units of the tolerances.
    pub fn violation(&self, est: &PerformanceEstimate) -> f64 {
        let det = est
            .alpha_hat
            .iter()
            .zip(&self.alpha_bar)
            .map(|(a, b)| (a - b).abs() / self.tol_det);
        let est_v = est
            .beta_hat
            .iter()
            .zip(&self.beta_bar)
            .map(|(a, b)| (a - b).abs() / self.tol_est);
        det.chain(est_v).fold(0.0, f64::max)
    }

    pub fn converged(&self, est: &PerformanceEstimate) -> bool {
        est.alpha_hat.iter().zip(&self.alpha_bar).all(|(a, b)| (a - b).abs() <= self.tol_det)
            && est.beta_hat.iter().zip(&self.beta_bar).all(|(a, b)| (a - b).abs() <= self.tol_est)
    }
}

/// Stacked gradient `[p (alpha_hat - alpha_bar); p (beta_hat - beta_bar)]` of the
/// maximisation objective.
pub fn gradient_from_performance(priors: &[f64], est: &PerformanceEstimate, alpha_bar: &[f64], beta_bar: &[f64]) -> Vec<f64> {
    let det = priors.iter().zip(&est.alpha_hat).zip(alpha_bar).map(|((p, a), ab)| p * (a - ab));
    let est_part = priors.iter().zip(&est.beta_hat).zip(beta_bar).map(|((p, b), bb)| p * (b - bb));
    det.chain(est_part).collect()
}

/// Simulate the AO policy at `coeffs` and return the objective gradient with
/// the estimate it came from.
pub fn estimate_gradient<S: ScenarioModel>(
    model: &S,
    coeffs: &CostCoefficients,
    cfg: &DesignConfig,
    seed: u64,
) -> Result<(Vec<f64>, PerformanceEstimate)> {
    let sim = SimulationConfig {
        runs: cfg.runs_per_iter,
        master_seed: seed,
        n_max: cfg.n_max,
        stratify_by_hypothesis: cfg.stratify_by_hypothesis,
    };
    let est = evaluate(model, &AoPolicy::new(coeffs.clone()), &sim)?;
    est.check_cap()?;
    let priors: Vec<f64> = model.hypotheses().map(|m| model.prior(m)).collect();
    Ok((gradient_from_performance(&priors, &est, &cfg.alpha_bar, &cfg.beta_bar), est))
}

/// Dense symmetric matrix in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn scaled_identity(dim: usize, scale: f64) -> Self {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = scale;
        }
        Matrix { dim, data }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|i| (0..self.dim).map(|j| self.get(i, j) * v[j]).sum())
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// BFGS inverse-Hessian update
/// `(I - rho s y^T) H (I - rho y s^T) + rho s s^T` with `rho = 1 / (y^T s)`.
pub fn bfgs_update(h: &Matrix, s: &[f64], y: &[f64]) -> Matrix {
    let n = h.dim;
    let rho = 1.0 / dot(y, s);
    // expanded form: H - rho (s (Hy)^T + (Hy) s^T) + (rho^2 y^T H y + rho) s s^T
    let hy = h.mul_vec(y);
    let yhy = dot(y, &hy);
    let c = rho * rho * yhy + rho;
    let mut out = h.clone();
    for i in 0..n {
        for j in 0..n {
            out.data[i * n + j] += -rho * (s[i] * hy[j] + hy[i] * s[j]) + c * s[i] * s[j];
        }
    }
    // symmetrise against rounding drift
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (out.data[i * n + j] + out.data[j * n + i]);
            out.data[i * n + j] = v;
            out.data[j * n + i] = v;
        }
    }
    out
}

/// Quasi-Newton iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignState {
    pub k: usize,
    /// Stacked coefficients `[lambda_det; lambda_est]` at iteration `k`.
    pub coeffs: Vec<f64>,
    /// Inverse-Hessian approximation used for the last step.
    pub h: Matrix,
    pub prev_coeffs: Option<Vec<f64>>,
    /// Descent-direction gradient of the previous iteration.
    pub prev_gradient: Option<Vec<f64>>,
    /// Whether a secant pair has already rescaled the initial `H`.
    pub rescaled: bool,
    pub epsilon: f64,
    pub step_size: f64,
    pub max_relative_step: Option<f64>,
}

impl DesignState {
    pub fn new(coeffs: &CostCoefficients, epsilon: f64, step_size: f64) -> Self {
        Self::from_vec(coeffs.stacked(), epsilon, step_size)
    }

    pub fn from_vec(stacked: Vec<f64>, epsilon: f64, step_size: f64) -> Self {
        DesignState {
            k: 0,
            h: Matrix::scaled_identity(stacked.len(), 1.0),
            coeffs: stacked,
            prev_coeffs: None,
            prev_gradient: None,
            rescaled: false,
            epsilon,
            step_size,
            max_relative_step: None,
        }
    }

    pub fn with_max_relative_step(mut self, r: Option<f64>) -> Self {
        self.max_relative_step = r;
        self
    }

    pub fn coefficients(&self) -> CostCoefficients {
        CostCoefficients::from_stacked(&self.coeffs)
    }
}

/// One projected quasi-Newton step. `gradient` is the descent-direction
/// gradient at `state.coeffs` (the negated objective gradient).
///
/// Secant pairs with `y^T s <= 1e-12 |y| |s|` are skipped and the previous
/// `H` is kept; the first accepted pair rescales `H` to `(y^T s / y^T y) I`
/// before its BFGS update.
pub fn qn_step(state: &DesignState, gradient: &[f64]) -> DesignState {
    let dim = state.coeffs.len();
    let h = match (&state.prev_coeffs, &state.prev_gradient) {
        (Some(pc), Some(pg)) => {
            let s: Vec<f64> = state.coeffs.iter().zip(pc).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = gradient.iter().zip(pg).map(|(a, b)| a - b).collect();
            let ys = dot(&y, &s);
            if ys > 1e-12 * norm(&y) * norm(&s) {
                let base = if state.rescaled {
                    state.h.clone()
                } else {
                    Matrix::scaled_identity(dim, ys / dot(&y, &y))
                };
                (bfgs_update(&base, &s, &y), true)
            } else {
                (state.h.clone(), state.rescaled)
            }
        }
        _ => {
            let g = norm(gradient);
            (Matrix::scaled_identity(dim, if g > 0.0 { 1.0 / g } else { 1.0 }), false)
        }
    };
    let (h, rescaled) = h;
    let mut step: Vec<f64> = h.mul_vec(gradient).iter().map(|d| state.step_size * d).collect();
    if let Some(r) = state.max_relative_step {
        let shrink = state
            .coeffs
            .iter()
            .zip(&step)
            .filter(|(_, d)| **d != 0.0)
            .map(|(c, d)| r * c / d.abs())
            .fold(1.0, f64::min);
        step.iter_mut().for_each(|d| *d *= shrink);
    }
    let coeffs = state
        .coeffs
        .iter()
        .zip(&step)
        .map(|(c, d)| (c - d).max(state.epsilon))
        .collect();
    DesignState {
        k: state.k + 1,
        coeffs,
        h,
        prev_coeffs: Some(state.coeffs.clone()),
        prev_gradient: Some(gradient.to_vec()),
        rescaled,
        epsilon: state.epsilon,
        step_size: state.step_size,
        max_relative_step: state.max_relative_step,
    }
}

/// One evaluated iterate of the design loop.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub k: usize,
    /// Whether the iterate belongs to the tied warm-start phase.
    pub tied: bool,
    pub coefficients: CostCoefficients,
    pub alpha_hat: Vec<f64>,
    pub beta_hat: Vec<f64>,
    pub violation: f64,
}

#[derive(Debug, Clone)]
pub struct DesignOutcome {
    pub coefficients: CostCoefficients,
    pub converged: bool,
    /// Number of Monte Carlo evaluations performed.
    pub iterations: usize,
    /// Iteration whose coefficients are returned.
    pub selected: usize,
    pub estimate: PerformanceEstimate,
    pub history: Vec<IterationRecord>,
}

impl DesignOutcome {
    pub fn violation(&self) -> f64 {
        self.history[self.selected].violation
    }
}

/// Evaluations so far and the best iterate among them.
struct Progress<'a, F> {
    cfg: &'a DesignConfig,
    master_seed: u64,
    eval: F,
    history: Vec<IterationRecord>,
    best: Option<(usize, PerformanceEstimate)>,
}

impl<F> Progress<'_, F>
where
    F: FnMut(&CostCoefficients, u64) -> Result<PerformanceEstimate>,
{
    /// Evaluate `coeffs` with the next fresh seed. Returns the estimate and
    /// whether it meets every tolerance.
    fn step(&mut self, coeffs: CostCoefficients, tied: bool) -> Result<(PerformanceEstimate, bool)> {
        let k = self.history.len();
        let est = (self.eval)(&coeffs, split_seed(self.master_seed, k as u64))?;
        let violation = self.cfg.violation(&est);
        self.history.push(IterationRecord {
            k,
            tied,
            coefficients: coeffs,
            alpha_hat: est.alpha_hat.clone(),
            beta_hat: est.beta_hat.clone(),
            violation,
        });
        if self.best.as_ref().is_none_or(|(i, _)| violation < self.history[*i].violation) {
            self.best = Some((k, est.clone()));
        }
        Ok((est.clone(), self.cfg.converged(&est)))
    }

    fn finish(self, converged: bool) -> DesignOutcome {
        let (selected, estimate) = if converged {
            let k = self.history.len() - 1;
            let est = self.best.filter(|(i, _)| *i == k).expect("a converged iterate is the best one").1;
            (k, est)
        } else {
            self.best.expect("at least one iteration")
        };
        DesignOutcome {
            coefficients: self.history[selected].coefficients.clone(),
            converged,
            iterations: self.history.len(),
            selected,
            estimate,
            history: self.history,
        }
    }
}

/// Run the design loop with an arbitrary evaluator `eval(coeffs, seed)`.
///
/// With `warm_start_iters > 0` the loop first runs the same quasi-Newton
/// update on two scale factors `(t_det, t_est)` applied to the initial
/// coefficients, using the chain-rule gradient
/// `sum_m lambda0[m] * d/d lambda[m]`, and then starts the full loop from
/// the best tied iterate. With `precondition` the full loop works on
/// `x = lambda / lambda_start`, a fixed diagonal rescaling.
pub fn design_with<F>(priors: &[f64], cfg: &DesignConfig, master_seed: u64, eval: F) -> Result<DesignOutcome>
where
    F: FnMut(&CostCoefficients, u64) -> Result<PerformanceEstimate>,
{
    cfg.validate(priors.len())?;
    let mut progress = Progress {
        cfg,
        master_seed,
        eval,
        history: Vec::new(),
        best: None,
    };
    let start = cfg.initial_coefficients();
    let gradient = |est: &PerformanceEstimate| gradient_from_performance(priors, est, &cfg.alpha_bar, &cfg.beta_bar);

    let mut full_start = start.clone();
    if cfg.warm_start_iters > 0 {
        let tied = |t: &[f64]| CostCoefficients {
            lambda_det: start.lambda_det.iter().map(|l| (l * t[0]).max(cfg.epsilon)).collect(),
            lambda_est: start.lambda_est.iter().map(|l| (l * t[1]).max(cfg.epsilon)).collect(),
        };
        let m = priors.len();
        let mut state = DesignState::from_vec(vec![1.0, 1.0], cfg.epsilon, cfg.step_size)
            .with_max_relative_step(cfg.max_relative_step);
        let mut best_tied = (f64::INFINITY, start.clone());
        for _ in 0..cfg.warm_start_iters {
            let coeffs = tied(&state.coeffs);
            let (est, done) = progress.step(coeffs.clone(), true)?;
            if done {
                return Ok(progress.finish(true));
            }
            let v = cfg.violation(&est);
            if v < best_tied.0 {
                best_tied = (v, coeffs);
            }
            let g = gradient(&est);
            let descent = [
                -(0..m).map(|i| start.lambda_det[i] * g[i]).sum::<f64>(),
                -(0..m).map(|i| start.lambda_est[i] * g[m + i]).sum::<f64>(),
            ];
            state = qn_step(&state, &descent);
        }
        full_start = best_tied.1;
    }

    // with preconditioning the update runs on x = lambda / lambda_start
    let stacked_start = full_start.stacked();
    let reference = if cfg.precondition {
        stacked_start.clone()
    } else {
        vec![1.0; stacked_start.len()]
    };
    let floor = cfg.epsilon / reference.iter().cloned().fold(1.0, f64::max);
    let x0: Vec<f64> = stacked_start.iter().zip(&reference).map(|(l, r)| l / r).collect();
    let mut state = DesignState::from_vec(x0, floor, cfg.step_size).with_max_relative_step(cfg.max_relative_step);
    for _ in 0..cfg.max_iters {
        let lambda: Vec<f64> = state.coeffs.iter().zip(&reference).map(|(x, r)| (x * r).max(cfg.epsilon)).collect();
        let (est, done) = progress.step(CostCoefficients::from_stacked(&lambda), false)?;
        if done {
            return Ok(progress.finish(true));
        }
        let descent: Vec<f64> = gradient(&est).iter().zip(&reference).map(|(g, r)| -g * r).collect();
        state = qn_step(&state, &descent);
    }
    Ok(progress.finish(false))
}

/// Design coefficients for `model` by Monte Carlo; iteration `k` simulates
/// with the fresh seed `split_seed(master_seed, k)`.
pub fn design<S: ScenarioModel>(model: &S, cfg: &DesignConfig, master_seed: u64) -> Result<DesignOutcome> {
    let priors: Vec<f64> = model.hypotheses().map(|m| model.prior(m)).collect();
    design_with(&priors, cfg, master_seed, |coeffs, seed| {
        estimate_gradient(model, coeffs, cfg, seed).map(|(_, est)| est)
    })
}
