//! Reproducible parallel Monte Carlo evaluation of sequential policies.
//!
//! Run `i` draws all of its randomness from a ChaCha8 stream seeded with
//! `split_seed(master_seed, i)`, so any run can be replayed in isolation.
//! Runs are processed in fixed-size chunks; chunk partial sums are combined
//! in index order, which makes every estimate bit-identical regardless of
//! the number of worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HypothesisId, ScenarioModel};
use crate::policy::{run_trajectory, sample_hypothesis, AoPolicy, CostCoefficients, StoppingRule, Trajectory};

/// Runs per work item of the parallel map.
const CHUNK: u64 = 256;

/// Largest tolerated fraction of runs that reach `n_max`.
pub const MAX_CAP_RATE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub runs: u64,
    pub master_seed: u64,
    pub n_max: usize,
    pub stratify_by_hypothesis: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            runs: 1_000_000,
            master_seed: 0,
            n_max: 10_000,
            stratify_by_hypothesis: true,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs < 1 {
            return Err(Error::validation("simulation.runs", "must be at least 1"));
        }
        if self.n_max < 1 {
            return Err(Error::validation("simulation.n_max", "must be at least 1"));
        }
        Ok(())
    }
}

/// Seed of run `index` derived from `master`; a bijection of `index` for
/// fixed `master`, so distinct runs never share a stream seed.
pub fn split_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs per hypothesis under exact proportional allocation (largest remainder).
pub fn allocate_runs(priors: &[f64], runs: u64) -> Vec<u64> {
    let exact: Vec<f64> = priors.iter().map(|p| p * runs as f64).collect();
    let mut alloc: Vec<u64> = exact.iter().map(|e| e.floor() as u64).collect();
    let mut left = runs - alloc.iter().sum::<u64>();
    let mut order: Vec<usize> = (0..priors.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        alloc[i] += 1;
        left -= 1;
    }
    alloc
}

/// Monte Carlo estimates of the performance measures.
#[derive(Debug, Clone, PartialEq)]
pub struct PerformanceEstimate {
    /// `P(decision != m | H_m)`.
    pub alpha_hat: Vec<f64>,
    pub alpha_se: Vec<f64>,
    /// `E[1{decision = m} ||estimate - theta||^2 | H_m]`.
    pub beta_hat: Vec<f64>,
    pub beta_se: Vec<f64>,
    /// `E[tau | H_m]`.
    pub rl_per_hyp: Vec<f64>,
    pub rl_se: Vec<f64>,
    pub rl_overall: f64,
    pub rl_overall_se: f64,
    /// `E[tau + g(x_tau)]` over the prior mixture.
    pub objective: f64,
    pub objective_se: f64,
    pub runs_per_hyp: Vec<u64>,
    pub runs: u64,
    pub capped_count: u64,
}

impl PerformanceEstimate {
    pub fn cap_rate(&self) -> f64 {
        self.capped_count as f64 / self.runs as f64
    }

    /// The cap was active in too many runs for the estimates to be trusted.
    pub fn cap_failure(&self) -> bool {
        self.cap_rate() > MAX_CAP_RATE
    }

    pub fn check_cap(&self) -> Result<()> {
        if self.cap_failure() {
            return Err(Error::CapHit {
                capped: self.capped_count,
                runs: self.runs,
                rate: self.cap_rate(),
            });
        }
        Ok(())
    }
}

/// First and second moments of one per-run quantity.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.sum += x;
        self.sum_sq += x * x;
    }

    fn merge(&mut self, o: &Moments) {
        self.sum += o.sum;
        self.sum_sq += o.sum_sq;
    }

    /// Sample mean and standard error of the mean.
    fn mean_se(&self, n: u64) -> (f64, f64) {
        if n == 0 {
            return (f64::NAN, f64::NAN);
        }
        let nf = n as f64;
        let mean = self.sum / nf;
        let var = if n > 1 { ((self.sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0) } else { 0.0 };
        (mean, (var / nf).sqrt())
    }
}

#[derive(Debug, Clone, Default)]
struct HypAccumulator {
    count: u64,
    miss: Moments,
    sq_err: Moments,
    tau: Moments,
    objective: Moments,
    capped: u64,
}

impl HypAccumulator {
    fn push(&mut self, t: &Trajectory) {
        self.count += 1;
        self.miss.push(if t.correct() { 0.0 } else { 1.0 });
        self.sq_err.push(t.squared_error());
        self.tau.push(t.tau as f64);
        self.objective.push(t.tau as f64 + t.cost);
        self.capped += u64::from(t.capped);
    }

    fn merge(&mut self, o: &HypAccumulator) {
        self.count += o.count;
        self.miss.merge(&o.miss);
        self.sq_err.merge(&o.sq_err);
        self.tau.merge(&o.tau);
        self.objective.merge(&o.objective);
        self.capped += o.capped;
    }
}

/// Run plan shared by every evaluation: which hypothesis run `i` uses.
struct Plan {
    /// Cumulative run counts per hypothesis when stratified.
    bounds: Option<Vec<u64>>,
    runs: u64,
}

impl Plan {
    fn new<S: ScenarioModel>(model: &S, sim: &SimulationConfig) -> Self {
        let bounds = sim.stratify_by_hypothesis.then(|| {
            let priors: Vec<f64> = model.hypotheses().map(|m| model.prior(m)).collect();
            allocate_runs(&priors, sim.runs)
                .iter()
                .scan(0, |acc, &c| {
                    *acc += c;
                    Some(*acc)
                })
                .collect()
        });
        Plan { bounds, runs: sim.runs }
    }

    fn hypothesis<S: ScenarioModel>(&self, model: &S, index: u64, rng: &mut ChaCha8Rng) -> HypothesisId {
        match &self.bounds {
            Some(b) => HypothesisId::new(b.iter().position(|&end| index < end).expect("index below runs")),
            None => sample_hypothesis(model, rng),
        }
    }
}

/// Simulate every run and reduce with `fold`, combining chunks in index order.
fn map_runs<S, T, F, G>(model: &S, sim: &SimulationConfig, init: T, per_run: F, merge: G) -> Result<T>
where
    S: ScenarioModel,
    T: Clone + Send + Sync,
    F: Fn(&mut T, HypothesisId, &mut ChaCha8Rng) -> Result<()> + Sync,
    G: Fn(&mut T, &T),
{
    sim.validate()?;
    let plan = Plan::new(model, sim);
    let chunks = plan.runs.div_ceil(CHUNK);
    let partials: Vec<T> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = init.clone();
            for i in c * CHUNK..((c + 1) * CHUNK).min(plan.runs) {
                let mut rng = ChaCha8Rng::seed_from_u64(split_seed(sim.master_seed, i));
                let m = plan.hypothesis(model, i, &mut rng);
                per_run(&mut acc, m, &mut rng)?;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = init;
    for p in &partials {
        merge(&mut total, p);
    }
    Ok(total)
}

/// Estimate the performance measures of `rule` on `model`.
pub fn evaluate<S: ScenarioModel, P: StoppingRule>(model: &S, rule: &P, sim: &SimulationConfig) -> Result<PerformanceEstimate> {
    let num = model.num_hypotheses();
    let acc = map_runs(
        model,
        sim,
        vec![HypAccumulator::default(); num],
        |acc, m, rng| {
            let t = run_trajectory(model, rule, m, rng, sim.n_max)?;
            acc[m.index()].push(&t);
            Ok(())
        },
        |total, part| {
            for (t, p) in total.iter_mut().zip(part) {
                t.merge(p);
            }
        },
    )?;

    let mut est = PerformanceEstimate {
        alpha_hat: vec![0.0; num],
        alpha_se: vec![0.0; num],
        beta_hat: vec![0.0; num],
        beta_se: vec![0.0; num],
        rl_per_hyp: vec![0.0; num],
        rl_se: vec![0.0; num],
        rl_overall: 0.0,
        rl_overall_se: 0.0,
        objective: 0.0,
        objective_se: 0.0,
        runs_per_hyp: acc.iter().map(|a| a.count).collect(),
        runs: sim.runs,
        capped_count: acc.iter().map(|a| a.capped).sum(),
    };
    for (i, a) in acc.iter().enumerate() {
        (est.alpha_hat[i], est.alpha_se[i]) = a.miss.mean_se(a.count);
        (est.beta_hat[i], est.beta_se[i]) = a.sq_err.mean_se(a.count);
        (est.rl_per_hyp[i], est.rl_se[i]) = a.tau.mean_se(a.count);
    }
    if sim.stratify_by_hypothesis {
        // prior-weighted combination of the conditional estimates
        let (mut rl, mut rl_var, mut obj, mut obj_var) = (0.0, 0.0, 0.0, 0.0);
        for (m, a) in model.hypotheses().zip(&acc) {
            let p = model.prior(m);
            let (t, t_se) = a.tau.mean_se(a.count);
            let (o, o_se) = a.objective.mean_se(a.count);
            rl += p * t;
            rl_var += (p * t_se).powi(2);
            obj += p * o;
            obj_var += (p * o_se).powi(2);
        }
        (est.rl_overall, est.rl_overall_se) = (rl, rl_var.sqrt());
        (est.objective, est.objective_se) = (obj, obj_var.sqrt());
    } else {
        let mut tau = Moments::default();
        let mut obj = Moments::default();
        for a in &acc {
            tau.merge(&a.tau);
            obj.merge(&a.objective);
        }
        (est.rl_overall, est.rl_overall_se) = tau.mean_se(sim.runs);
        (est.objective, est.objective_se) = obj.mean_se(sim.runs);
    }
    Ok(est)
}

/// `E[tau + g(x_tau)]` of the AO policy with its standard error.
pub fn evaluate_objective<S: ScenarioModel>(model: &S, coeffs: &CostCoefficients, sim: &SimulationConfig) -> Result<(f64, f64)> {
    let est = evaluate(model, &AoPolicy::new(coeffs.clone()), sim)?;
    Ok((est.objective, est.objective_se))
}

/// `J(plus) - J(minus)` of the AO objective with common random numbers:
/// both coefficient sets see identical run seeds. Returns the difference
/// and its standard error.
pub fn objective_difference<S: ScenarioModel>(
    model: &S,
    plus: &CostCoefficients,
    minus: &CostCoefficients,
    sim: &SimulationConfig,
) -> Result<(f64, f64)> {
    let num = model.num_hypotheses();
    let (rp, rm) = (AoPolicy::new(plus.clone()), AoPolicy::new(minus.clone()));
    let acc = map_runs(
        model,
        sim,
        vec![(0u64, Moments::default()); num],
        |acc, m, rng| {
            let mut replay = rng.clone();
            let a = run_trajectory(model, &rp, m, rng, sim.n_max)?;
            let b = run_trajectory(model, &rm, m, &mut replay, sim.n_max)?;
            let slot = &mut acc[m.index()];
            slot.0 += 1;
            slot.1.push((a.tau as f64 + a.cost) - (b.tau as f64 + b.cost));
            Ok(())
        },
        |total, part| {
            for (t, p) in total.iter_mut().zip(part) {
                t.0 += p.0;
                t.1.merge(&p.1);
            }
        },
    )?;
    if sim.stratify_by_hypothesis {
        let (mut d, mut var) = (0.0, 0.0);
        for (m, (count, mom)) in model.hypotheses().zip(&acc) {
            let (mean, se) = mom.mean_se(*count);
            d += model.prior(m) * mean;
            var += (model.prior(m) * se).powi(2);
        }
        Ok((d, var.sqrt()))
    } else {
        let mut all = Moments::default();
        for (_, mom) in &acc {
            all.merge(mom);
        }
        Ok(all.mean_se(sim.runs))
    }
}
