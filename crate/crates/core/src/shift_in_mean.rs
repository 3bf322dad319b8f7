//! Three-hypothesis Gaussian shift-in-mean scenario.
//!
//! Observations are `N(mu, sigma2)` under every hypothesis; the hypotheses
//! differ only in the prior of `mu`, and the priors have disjoint supports:
//!
//! * `H1`: `mu = -(offset + G)`, `G ~ Gam(shape, scale)`, support `(-inf, -offset]`
//! * `H2`: `mu ~ U(lo, hi)`
//! * `H3`: `mu = offset + G`, support `[offset, inf)`
//!
//! The running mean is sufficient. Log evidence is reported as the log
//! density of the running mean, which differs from the log density of the
//! raw record by a term common to all hypotheses.
//!
//! For the shifted-Gamma hypotheses the product of the Gamma density and
//! the Gaussian likelihood of the running mean is completed to a square,
//! which leaves the one-dimensional integral
//! `F(z) = int_0^inf t^(shape-1) exp(-(t - z)^2 / 2) dt` and its first two
//! moments. `F` is evaluated with Gauss–Jacobi rules (weight `t^(shape-1)`)
//! on a window whose tails are below `tail_mass_cut`, doubling the node
//! count until two successive rules agree to `rel_tol`.

use std::sync::OnceLock;

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use smallvec::smallvec;

use crate::error::{Error, Result};
use crate::model::{validate_priors, HypothesisEvidence, HypothesisId, Param, ScenarioModel};
use crate::quadrature::{gauss_jacobi, GaussRule, QuadratureSpec};
use crate::special::{ln_gamma, log_norm_interval, truncated_normal_moments};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SiMConfig {
    /// Observation variance.
    pub sigma2: f64,
    pub gamma_shape: f64,
    pub gamma_scale: f64,
    /// Distance of the Gamma-tail supports from the origin.
    pub offset: f64,
    pub uniform_lo: f64,
    pub uniform_hi: f64,
    pub priors: Vec<f64>,
}

impl Default for SiMConfig {
    fn default() -> Self {
        SiMConfig {
            sigma2: 4.0,
            gamma_shape: 1.7,
            gamma_scale: 1.0,
            offset: 1.3,
            uniform_lo: -1.0,
            uniform_hi: 1.0,
            priors: vec![1.0 / 3.0; 3],
        }
    }
}

impl SiMConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::validation(field, "must be positive"))
            }
        };
        pos("shift_in_mean.sigma2", self.sigma2)?;
        pos("shift_in_mean.gamma_shape", self.gamma_shape)?;
        pos("shift_in_mean.gamma_scale", self.gamma_scale)?;
        if !(self.uniform_lo < self.uniform_hi) {
            return Err(Error::validation(
                "shift_in_mean.uniform_lo",
                "must be below uniform_hi",
            ));
        }
        if !(self.offset >= self.uniform_hi && -self.offset <= self.uniform_lo) {
            return Err(Error::validation(
                "shift_in_mean.offset",
                "must keep the prior supports disjoint (offset >= uniform_hi and -offset <= uniform_lo)",
            ));
        }
        if self.priors.len() != 3 {
            return Err(Error::validation("shift_in_mean.priors", "needs exactly three entries"));
        }
        validate_priors("shift_in_mean.priors", &self.priors)
    }
}

/// Running mean of the observations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftStatistic {
    pub n: usize,
    pub mean: f64,
}

impl ShiftStatistic {
    pub fn new(n: usize, mean: f64) -> Self {
        ShiftStatistic { n, mean }
    }
}

struct RuleLevel {
    jacobi: GaussRule,
    legendre: GaussRule,
    max_ln_w_jacobi: f64,
    max_ln_w_legendre: f64,
}

/// Moments of the density proportional to `t^beta exp(-(t - z)^2 / 2)` on `t > 0`.
#[derive(Debug, Clone, Copy)]
struct TailMoments {
    log_f0: f64,
    mean: f64,
    var: f64,
}

pub struct ShiftInMean {
    config: SiMConfig,
    quad: QuadratureSpec,
    ln_gamma_shape: f64,
    log_priors: Vec<f64>,
    levels: Vec<OnceLock<RuleLevel>>,
    gamma: Gamma<f64>,
}

impl std::fmt::Debug for ShiftInMean {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ShiftInMean")
            .field("config", &self.config)
            .field("quad", &self.quad)
            .finish()
    }
}

impl ShiftInMean {
    pub fn new(config: SiMConfig, quad: QuadratureSpec) -> Result<Self> {
        config.validate()?;
        quad.validate()?;
        let levels = (0..=quad.max_refinements).map(|_| OnceLock::new()).collect();
        let gamma = Gamma::new(config.gamma_shape, config.gamma_scale)
            .map_err(|e| Error::validation("shift_in_mean.gamma_shape", e.to_string()))?;
        let model = ShiftInMean {
            ln_gamma_shape: ln_gamma(config.gamma_shape),
            log_priors: config.priors.iter().map(|p| p.ln()).collect(),
            config,
            quad,
            levels,
            gamma,
        };
        // the two coarsest rules are needed on every call
        model.rules(0);
        model.rules(1);
        Ok(model)
    }

    pub fn with_defaults() -> Self {
        Self::new(SiMConfig::default(), QuadratureSpec::default()).expect("defaults are valid")
    }

    pub fn config(&self) -> &SiMConfig {
        &self.config
    }

    pub fn quadrature(&self) -> &QuadratureSpec {
        &self.quad
    }

    fn rules(&self, level: usize) -> &RuleLevel {
        self.levels[level].get_or_init(|| {
            let n = self.quad.nodes_at(level);
            let jacobi = gauss_jacobi(n, 0.0, self.config.gamma_shape - 1.0);
            let legendre = gauss_jacobi(n, 0.0, 0.0);
            let max_ln = |r: &GaussRule| r.ln_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            RuleLevel {
                max_ln_w_jacobi: max_ln(&jacobi),
                max_ln_w_legendre: max_ln(&legendre),
                jacobi,
                legendre,
            }
        })
    }

    fn tail_moments_at(&self, level: usize, z: f64, lower: f64, upper: f64) -> TailMoments {
        let rules = self.rules(level);
        let beta = self.config.gamma_shape - 1.0;
        let center = z.max(0.0);
        // upper bound on the log integrand over the window, used as the shift
        let peak_gauss = if z < lower {
            -0.5 * (lower - z).powi(2)
        } else if z > upper {
            -0.5 * (z - upper).powi(2)
        } else {
            0.0
        };
        let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
        let (shift, log_scale);
        if lower == 0.0 {
            let rule = &rules.jacobi;
            shift = rules.max_ln_w_jacobi + peak_gauss;
            for (u, lw) in rule.unit_nodes.iter().zip(&rule.ln_weights) {
                let t = upper * u;
                let f = (lw - 0.5 * (t - z) * (t - z) - shift).exp();
                let d = t - center;
                s0 += f;
                s1 += f * d;
                s2 += f * d * d;
            }
            log_scale = (beta + 1.0) * (0.5 * upper).ln();
        } else {
            let rule = &rules.legendre;
            let width = upper - lower;
            let peak_pow = if beta >= 0.0 { beta * upper.ln() } else { beta * lower.ln() };
            shift = rules.max_ln_w_legendre + peak_gauss + peak_pow;
            for (u, lw) in rule.unit_nodes.iter().zip(&rule.ln_weights) {
                let t = lower + width * u;
                let f = (lw + beta * t.ln() - 0.5 * (t - z) * (t - z) - shift).exp();
                let d = t - center;
                s0 += f;
                s1 += f * d;
                s2 += f * d * d;
            }
            log_scale = (0.5 * width).ln();
        }
        let m1 = s1 / s0;
        TailMoments {
            log_f0: shift + s0.ln() + log_scale,
            mean: center + m1,
            var: (s2 / s0 - m1 * m1).max(0.0),
        }
    }

    fn tail_moments(&self, z: f64) -> Result<TailMoments> {
        let q = &self.quad;
        let d = (-2.0 * q.tail_mass_cut.ln()).sqrt();
        let upper = if z >= 0.0 { z + d } else { z + (z * z + d * d).sqrt() };
        let lower = if z > 2.0 * d { z - d } else { 0.0 };
        let close = |a: f64, b: f64| (a - b).abs() <= q.rel_tol * b.abs().max(f64::MIN_POSITIVE);
        let mut prev = self.tail_moments_at(0, z, lower, upper);
        for level in 1..=q.max_refinements {
            let cur = self.tail_moments_at(level, z, lower, upper);
            if (cur.log_f0 - prev.log_f0).abs() <= q.rel_tol
                && close(prev.mean, cur.mean)
                && close(prev.var, cur.var)
            {
                return Ok(cur);
            }
            prev = cur;
        }
        Err(Error::QuadratureFailed {
            z,
            rel_tol: q.rel_tol,
            refinements: q.max_refinements,
        })
    }

    /// Evidence of the `H3`-type hypothesis (`mu = offset + G`) at running mean `xbar`.
    fn gamma_tail_evidence(&self, n: usize, xbar: f64) -> Result<(f64, f64, f64)> {
        let cfg = &self.config;
        let (a, scale) = (cfg.gamma_shape, cfg.gamma_scale);
        if n == 0 {
            return Ok((0.0, cfg.offset + a * scale, a * scale * scale));
        }
        let v = cfg.sigma2 / n as f64;
        let sv = v.sqrt();
        let y = xbar - cfg.offset;
        let c = y - v / scale;
        let tm = self.tail_moments(c / sv)?;
        let log_marginal = -y / scale + v / (2.0 * scale * scale)
            - self.ln_gamma_shape
            - a * scale.ln()
            - 0.5 * (LN_2PI + v.ln())
            + a * sv.ln()
            + tm.log_f0;
        Ok((log_marginal, cfg.offset + sv * tm.mean, v * tm.var))
    }

    fn uniform_evidence(&self, n: usize, xbar: f64) -> (f64, f64, f64) {
        let cfg = &self.config;
        let (lo, hi) = (cfg.uniform_lo, cfg.uniform_hi);
        if n == 0 {
            return (0.0, 0.5 * (lo + hi), (hi - lo).powi(2) / 12.0);
        }
        let sv = (cfg.sigma2 / n as f64).sqrt();
        let log_marginal = log_norm_interval((lo - xbar) / sv, (hi - xbar) / sv) - (hi - lo).ln();
        let (mean, var) = truncated_normal_moments(xbar, sv, lo, hi);
        (log_marginal, mean, var)
    }
}

impl ScenarioModel for ShiftInMean {
    type Observation = f64;
    type Statistic = ShiftStatistic;

    fn num_hypotheses(&self) -> usize {
        3
    }

    fn prior(&self, m: HypothesisId) -> f64 {
        self.config.priors[m.index()]
    }

    fn log_priors(&self) -> Vec<f64> {
        self.log_priors.clone()
    }

    fn param_dim(&self, _m: HypothesisId) -> usize {
        1
    }

    fn sample_param<R: Rng + ?Sized>(&self, m: HypothesisId, rng: &mut R) -> Param {
        let cfg = &self.config;
        let mu = match m.index() {
            0 => -(cfg.offset + self.gamma.sample(rng)),
            1 => rng.random_range(cfg.uniform_lo..cfg.uniform_hi),
            _ => cfg.offset + self.gamma.sample(rng),
        };
        smallvec![mu]
    }

    fn sample_observation<R: Rng + ?Sized>(&self, _m: HypothesisId, theta: &[f64], rng: &mut R) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        theta[0] + self.config.sigma2.sqrt() * z
    }

    fn empty_statistic(&self) -> ShiftStatistic {
        ShiftStatistic::new(0, 0.0)
    }

    fn update_statistic(&self, stat: &mut ShiftStatistic, x: &f64) {
        stat.n += 1;
        stat.mean += (x - stat.mean) / stat.n as f64;
    }

    fn statistic_from(&self, xs: &[f64]) -> ShiftStatistic {
        if xs.is_empty() {
            return self.empty_statistic();
        }
        ShiftStatistic::new(xs.len(), xs.iter().sum::<f64>() / xs.len() as f64)
    }

    fn sample_count(&self, stat: &ShiftStatistic) -> usize {
        stat.n
    }

    fn evidence(&self, m: HypothesisId, stat: &ShiftStatistic) -> Result<HypothesisEvidence> {
        let (log_marginal, mean, var) = match m.index() {
            0 => {
                let (lm, mean, var) = self.gamma_tail_evidence(stat.n, -stat.mean)?;
                (lm, -mean, var)
            }
            1 => self.uniform_evidence(stat.n, stat.mean),
            _ => self.gamma_tail_evidence(stat.n, stat.mean)?,
        };
        Ok(HypothesisEvidence {
            log_marginal,
            mean: smallvec![mean],
            var_trace: var,
        })
    }

    fn prior_mean(&self, m: HypothesisId) -> Param {
        let cfg = &self.config;
        let tail = cfg.offset + cfg.gamma_shape * cfg.gamma_scale;
        let mu = match m.index() {
            0 => -tail,
            1 => 0.5 * (cfg.uniform_lo + cfg.uniform_hi),
            _ => tail,
        };
        smallvec![mu]
    }

    fn prior_var_trace(&self, m: HypothesisId) -> f64 {
        let cfg = &self.config;
        match m.index() {
            1 => (cfg.uniform_hi - cfg.uniform_lo).powi(2) / 12.0,
            _ => cfg.gamma_shape * cfg.gamma_scale * cfg.gamma_scale,
        }
    }

    fn fisher_info_trace_inv(&self, _m: HypothesisId, _theta: &[f64]) -> f64 {
        self.config.sigma2
    }

    fn kl_divergence(&self, _m: HypothesisId, theta_m: &[f64], _k: HypothesisId, theta_k: &[f64]) -> f64 {
        (theta_m[0] - theta_k[0]).powi(2) / (2.0 * self.config.sigma2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{prior_summary, summarize};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const H1: HypothesisId = HypothesisId::new(0);
    const H2: HypothesisId = HypothesisId::new(1);
    const H3: HypothesisId = HypothesisId::new(2);

    fn model() -> ShiftInMean {
        ShiftInMean::with_defaults()
    }

    #[test]
    fn prior_summary_values() {
        let s = prior_summary(&model());
        for p in &s.hyp_post {
            assert_relative_eq!(*p, 1.0 / 3.0, max_relative = 1e-15);
        }
        assert_relative_eq!(s.post_var_trace[1], 1.0 / 3.0, max_relative = 1e-15);
        assert_relative_eq!(s.post_var_trace[0], 1.7, max_relative = 1e-15);
        assert_relative_eq!(s.post_mean[2][0], 3.0, max_relative = 1e-15);
    }

    #[test]
    fn summarize_at_zero_is_prior_summary() {
        let m = model();
        let s = summarize(&m, &m.empty_statistic()).unwrap();
        assert_eq!(s, prior_summary(&m));
    }

    #[test]
    fn deep_h3_statistic_is_decisive() {
        let m = model();
        let s = summarize(&m, &ShiftStatistic::new(50, 2.5)).unwrap();
        assert!(s.hyp_post[2] > 0.99, "{:?}", s.hyp_post);
        let s = summarize(&m, &ShiftStatistic::new(40, 2.0)).unwrap();
        assert!(s.hyp_post[2] >= 0.95, "{:?}", s.hyp_post);
    }

    #[test]
    fn central_statistic_favours_uniform_hypothesis() {
        let m = model();
        let stat = ShiftStatistic::new(20, 0.0);
        let l: Vec<f64> = [H1, H2, H3].iter().map(|&h| m.log_marginal(h, &stat).unwrap()).collect();
        assert!(l[1] > l[0] && l[1] > l[2], "{l:?}");
    }

    #[test]
    fn mirror_symmetry() {
        let m = model();
        for n in [1, 7, 40, 300] {
            for t in [0.5, 2.0, 4.0] {
                let a = m.evidence(H1, &ShiftStatistic::new(n, -t)).unwrap();
                let b = m.evidence(H3, &ShiftStatistic::new(n, t)).unwrap();
                assert!((a.log_marginal - b.log_marginal).abs() <= 1e-9);
                assert!((a.mean[0] + b.mean[0]).abs() <= 1e-9);
                assert!((a.var_trace - b.var_trace).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn uniform_posterior_mean_near_data() {
        let m = model();
        let e = m.evidence(H2, &ShiftStatistic::new(100, 0.2)).unwrap();
        assert!(e.mean[0] > -1.0 && e.mean[0] < 1.0);
        assert!((e.mean[0] - 0.2).abs() < 0.05);
    }

    #[test]
    fn large_sample_variance_matches_fisher_limit() {
        let m = model();
        let n = 10_000;
        let e = m.evidence(H3, &ShiftStatistic::new(n, 2.6)).unwrap();
        let scaled = e.var_trace * n as f64;
        assert!((scaled / 4.0 - 1.0).abs() < 0.1, "n var = {scaled}");
    }

    #[test]
    fn posterior_means_stay_in_support() {
        let m = model();
        for n in [1, 3, 10, 100, 1000] {
            for i in -60..=60 {
                let stat = ShiftStatistic::new(n, i as f64 * 0.1);
                let e1 = m.evidence(H1, &stat).unwrap();
                let e2 = m.evidence(H2, &stat).unwrap();
                let e3 = m.evidence(H3, &stat).unwrap();
                assert!(e1.mean[0] <= -1.3);
                assert!((-1.0..=1.0).contains(&e2.mean[0]));
                assert!(e3.mean[0] >= 1.3);
                assert!(e1.var_trace >= 0.0 && e2.var_trace >= 0.0 && e3.var_trace >= 0.0);
            }
        }
    }

    #[test]
    fn h3_posterior_monotone_in_mean() {
        let m = model();
        for n in [1, 5, 20, 80] {
            let mut last = 0.0;
            for i in -80..=80 {
                let s = summarize(&m, &ShiftStatistic::new(n, i as f64 * 0.05)).unwrap();
                assert!(s.hyp_post[2] >= last - 1e-12, "n={n} xbar={}", i as f64 * 0.05);
                last = s.hyp_post[2];
            }
        }
    }

    #[test]
    fn extreme_statistics_stay_finite() {
        let m = model();
        for n in [1, 10, 1000, 100_000] {
            for xbar in [-50.0, -8.0, -1.3, 0.0, 1.3, 1.31, 8.0, 50.0] {
                let s = summarize(&m, &ShiftStatistic::new(n, xbar)).unwrap();
                assert!(s.log_marginal.iter().all(|v| v.is_finite()), "n={n} xbar={xbar}");
                assert!(s.post_var_trace.iter().all(|v| v.is_finite() && *v >= 0.0));
            }
        }
    }

    #[test]
    fn incremental_statistic_matches_recompute() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let theta = m.sample_param(H3, &mut rng);
        let xs: Vec<f64> = (0..500).map(|_| m.sample_observation(H3, &theta, &mut rng)).collect();
        let mut stat = m.empty_statistic();
        for x in &xs {
            m.update_statistic(&mut stat, x);
        }
        let fresh = m.statistic_from(&xs);
        assert_eq!(stat.n, fresh.n);
        assert!((stat.mean - fresh.mean).abs() <= 1e-12 * fresh.mean.abs().max(1.0));
        let a = summarize(&m, &stat).unwrap();
        let b = summarize(&m, &fresh).unwrap();
        for i in 0..3 {
            assert!((a.hyp_post[i] - b.hyp_post[i]).abs() <= 1e-10);
            assert!((a.post_var_trace[i] - b.post_var_trace[i]).abs() <= 1e-10 * b.post_var_trace[i]);
        }
    }

    #[test]
    fn sampled_parameters() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let mut sum1 = 0.0;
        let (mut s2, mut ss2) = (0.0, 0.0);
        for _ in 0..n {
            sum1 += m.sample_param(H1, &mut rng)[0];
            let u = m.sample_param(H2, &mut rng)[0];
            s2 += u;
            ss2 += u * u;
            assert!(m.sample_param(H3, &mut rng)[0] >= 1.3);
        }
        let nf = n as f64;
        assert!((sum1 / nf + 3.0).abs() < 0.01, "H1 mean {}", sum1 / nf);
        let var2 = ss2 / nf - (s2 / nf).powi(2);
        assert!((var2 - 1.0 / 3.0).abs() < 0.005, "H2 var {var2}");
    }

    #[test]
    fn fisher_and_kl() {
        let m = model();
        assert_eq!(m.fisher_info_trace_inv(H2, &[0.3]), 4.0);
        let one = ShiftInMean::new(SiMConfig { sigma2: 1.0, ..Default::default() }, QuadratureSpec::default()).unwrap();
        assert_eq!(one.fisher_info_trace_inv(H1, &[-2.0]), 1.0);
        assert_eq!(m.kl_divergence(H1, &[0.4], H2, &[0.4]), 0.0);
        assert_relative_eq!(m.kl_divergence(H2, &[0.0], H3, &[1.3]), 0.211_25, max_relative = 1e-12);
    }

    #[test]
    fn fisher_information_by_monte_carlo() {
        // -E[d^2/dtheta^2 log p(x | theta)] by central differences of the log density
        let m = model();
        let theta = 1.7;
        let h = 1e-3;
        let logp = |x: f64, t: f64| -0.5 * (LN_2PI + 4f64.ln()) - (x - t).powi(2) / 8.0;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let x = m.sample_observation(H3, &[theta], &mut rng);
            acc -= (logp(x, theta + h) - 2.0 * logp(x, theta) + logp(x, theta - h)) / (h * h);
        }
        let info = acc / n as f64;
        let expected = 1.0 / m.fisher_info_trace_inv(H3, &[theta]);
        assert!((info / expected - 1.0).abs() < 0.02, "{info}");
    }

    #[test]
    fn kl_by_monte_carlo() {
        let m = model();
        let (tm, tk) = (0.0, 1.3);
        let logp = |x: f64, t: f64| -(x - t).powi(2) / 8.0;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let x = m.sample_observation(H2, &[tm], &mut rng);
            acc += logp(x, tm) - logp(x, tk);
        }
        let mc = acc / n as f64;
        let exact = m.kl_divergence(H2, &[tm], H3, &[tk]);
        assert!((mc / exact - 1.0).abs() < 0.01, "{mc} vs {exact}");
    }

    #[test]
    fn rejects_overlapping_supports() {
        let cfg = SiMConfig { offset: 0.5, ..Default::default() };
        let err = ShiftInMean::new(cfg, QuadratureSpec::default()).unwrap_err();
        assert!(err.to_string().contains("offset"));
    }
}
