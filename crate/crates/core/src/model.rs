//! The scenario contract and the Bayesian combination shared by all policies.
//!
//! A [`ScenarioModel`] describes `M` composite hypotheses. Under hypothesis
//! `m` the observations are i.i.d. given a random parameter whose prior is
//! known. Everything a sequential policy needs at time `n` is collected in a
//! [`PosteriorSummary`]: per-hypothesis log evidence, hypothesis posteriors,
//! and the posterior mean and error-covariance trace of each parameter.

use std::fmt;

use rand::Rng;
use smallvec::SmallVec;

use crate::error::{Error, Result};

/// A parameter vector; both bundled scenarios are scalar.
pub type Param = SmallVec<[f64; 2]>;

/// Zero-based hypothesis index. Displays one-based (`H1`, `H2`, ...).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HypothesisId(usize);

impl HypothesisId {
    pub const fn new(index: usize) -> Self {
        HypothesisId(index)
    }

    /// From the one-based label used in reports.
    pub fn from_label(label: usize) -> Option<Self> {
        label.checked_sub(1).map(HypothesisId)
    }

    pub const fn index(self) -> usize {
        self.0
    }

    pub const fn label(self) -> usize {
        self.0 + 1
    }
}

impl fmt::Display for HypothesisId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "H{}", self.label())
    }
}

/// Posterior quantities of one hypothesis at the current sample count.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisEvidence {
    /// `log p(x_{1:n} | H_m)` up to a data-dependent constant shared by all hypotheses.
    pub log_marginal: f64,
    pub mean: Param,
    /// Trace of the posterior error covariance.
    pub var_trace: f64,
}

/// Generative and inference contract implemented by every scenario.
///
/// Implementations are immutable after construction and shared freely
/// across worker threads.
pub trait ScenarioModel: Send + Sync {
    type Observation: Copy + Send + Sync + fmt::Debug;
    type Statistic: Clone + Send + Sync + fmt::Debug;

    fn num_hypotheses(&self) -> usize;

    fn prior(&self, m: HypothesisId) -> f64;

    fn param_dim(&self, m: HypothesisId) -> usize;

    fn sample_param<R: Rng + ?Sized>(&self, m: HypothesisId, rng: &mut R) -> Param;

    fn sample_observation<R: Rng + ?Sized>(
        &self,
        m: HypothesisId,
        theta: &[f64],
        rng: &mut R,
    ) -> Self::Observation;

    fn empty_statistic(&self) -> Self::Statistic;

    /// Fold one observation into the running statistic.
    fn update_statistic(&self, stat: &mut Self::Statistic, x: &Self::Observation);

    /// Build the statistic from a full record without the incremental path.
    fn statistic_from(&self, xs: &[Self::Observation]) -> Self::Statistic;

    fn sample_count(&self, stat: &Self::Statistic) -> usize;

    /// Log evidence and posterior moments of hypothesis `m`.
    ///
    /// At `n = 0` the log evidence is `0` and the moments are the prior's.
    fn evidence(&self, m: HypothesisId, stat: &Self::Statistic) -> Result<HypothesisEvidence>;

    fn log_marginal(&self, m: HypothesisId, stat: &Self::Statistic) -> Result<f64> {
        Ok(self.evidence(m, stat)?.log_marginal)
    }

    fn posterior_mean(&self, m: HypothesisId, stat: &Self::Statistic) -> Result<Param> {
        Ok(self.evidence(m, stat)?.mean)
    }

    fn posterior_var_trace(&self, m: HypothesisId, stat: &Self::Statistic) -> Result<f64> {
        Ok(self.evidence(m, stat)?.var_trace)
    }

    fn prior_mean(&self, m: HypothesisId) -> Param;

    fn prior_var_trace(&self, m: HypothesisId) -> f64;

    /// `Tr(I(theta)^-1)` for a single observation under `H_m`.
    fn fisher_info_trace_inv(&self, m: HypothesisId, theta: &[f64]) -> f64;

    /// `KL(p(x | H_m, theta_m) || p(x | H_k, theta_k))`.
    fn kl_divergence(&self, m: HypothesisId, theta_m: &[f64], k: HypothesisId, theta_k: &[f64])
        -> f64;

    fn hypotheses(&self) -> HypothesisIter {
        HypothesisIter {
            next: 0,
            end: self.num_hypotheses(),
        }
    }

    fn log_priors(&self) -> Vec<f64> {
        self.hypotheses().map(|m| self.prior(m).ln()).collect()
    }
}

/// Iterator over `H1..HM`.
#[derive(Debug, Clone)]
pub struct HypothesisIter {
    next: usize,
    end: usize,
}

impl Iterator for HypothesisIter {
    type Item = HypothesisId;

    fn next(&mut self) -> Option<HypothesisId> {
        (self.next < self.end).then(|| {
            self.next += 1;
            HypothesisId(self.next - 1)
        })
    }
}

/// Posterior state at sample count `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSummary {
    pub n: usize,
    pub log_marginal: Vec<f64>,
    pub hyp_post: Vec<f64>,
    pub post_mean: Vec<Param>,
    pub post_var_trace: Vec<f64>,
}

impl PosteriorSummary {
    pub fn with_hypotheses(num: usize) -> Self {
        PosteriorSummary {
            n: 0,
            log_marginal: vec![0.0; num],
            hyp_post: vec![0.0; num],
            post_mean: vec![Param::new(); num],
            post_var_trace: vec![0.0; num],
        }
    }

    pub fn num_hypotheses(&self) -> usize {
        self.hyp_post.len()
    }

    /// Index of the largest hypothesis posterior (smallest index on ties).
    pub fn map_hypothesis(&self) -> HypothesisId {
        let mut best = 0;
        for (i, &p) in self.hyp_post.iter().enumerate() {
            if p > self.hyp_post[best] {
                best = i;
            }
        }
        HypothesisId(best)
    }
}

/// Normalise `log_marginal + log_prior` onto the probability simplex.
pub fn hypothesis_posteriors(log_marginal: &[f64], log_prior: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; log_marginal.len()];
    hypothesis_posteriors_into(log_marginal, log_prior, &mut out)?;
    Ok(out)
}

pub(crate) fn hypothesis_posteriors_into(
    log_marginal: &[f64],
    log_prior: &[f64],
    out: &mut [f64],
) -> Result<()> {
    debug_assert_eq!(log_marginal.len(), log_prior.len());
    let mut max = f64::NEG_INFINITY;
    for ((o, lm), lp) in out.iter_mut().zip(log_marginal).zip(log_prior) {
        *o = lm + lp;
        max = max.max(*o);
    }
    if max == f64::NEG_INFINITY || max.is_nan() {
        return Err(Error::DegenerateEvidence);
    }
    let mut total = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    Ok(())
}

/// Posterior summary for the statistic `stat`.
pub fn summarize<S: ScenarioModel>(model: &S, stat: &S::Statistic) -> Result<PosteriorSummary> {
    let mut summary = PosteriorSummary::with_hypotheses(model.num_hypotheses());
    let log_prior = model.log_priors();
    summarize_into(model, stat, &log_prior, &mut summary)?;
    Ok(summary)
}

/// In-place variant of [`summarize`] that reuses the summary's buffers.
pub fn summarize_into<S: ScenarioModel>(
    model: &S,
    stat: &S::Statistic,
    log_prior: &[f64],
    summary: &mut PosteriorSummary,
) -> Result<()> {
    summary.n = model.sample_count(stat);
    for m in model.hypotheses() {
        let ev = model.evidence(m, stat)?;
        let i = m.index();
        summary.log_marginal[i] = ev.log_marginal;
        summary.post_mean[i] = ev.mean;
        summary.post_var_trace[i] = ev.var_trace.max(0.0);
    }
    hypothesis_posteriors_into(&summary.log_marginal, log_prior, &mut summary.hyp_post)
}

/// Summary before any data: priors, prior means and prior variance traces.
pub fn prior_summary<S: ScenarioModel>(model: &S) -> PosteriorSummary {
    let num = model.num_hypotheses();
    let mut summary = PosteriorSummary::with_hypotheses(num);
    for m in model.hypotheses() {
        let i = m.index();
        summary.hyp_post[i] = model.prior(m);
        summary.post_mean[i] = model.prior_mean(m);
        summary.post_var_trace[i] = model.prior_var_trace(m);
    }
    summary
}

/// Check that `priors` are positive and sum to one within `1e-12`.
pub fn validate_priors(field: &str, priors: &[f64]) -> Result<()> {
    if priors.len() < 2 {
        return Err(Error::validation(field, "needs at least two hypotheses"));
    }
    if priors.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
        return Err(Error::validation(field, "entries must be positive"));
    }
    let total: f64 = priors.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::validation(field, format!("must sum to 1 (got {total})")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn uniform_evidence_returns_uniform_posterior() {
        let lp = vec![(1.0f64 / 3.0).ln(); 3];
        let post = hypothesis_posteriors(&[0.0, 0.0, 0.0], &lp).unwrap();
        for p in post {
            assert_relative_eq!(p, 1.0 / 3.0, max_relative = 1e-15);
        }
    }

    #[test]
    fn no_data_returns_prior() {
        let priors = [0.5, 0.3, 0.2];
        let lp: Vec<f64> = priors.iter().map(|p: &f64| p.ln()).collect();
        let post = hypothesis_posteriors(&[0.0; 3], &lp).unwrap();
        for (p, q) in post.iter().zip(priors) {
            assert_relative_eq!(*p, q, max_relative = 1e-14);
        }
    }

    #[test]
    fn extreme_shift_does_not_overflow() {
        let lp = vec![(1.0f64 / 3.0).ln(); 3];
        let post = hypothesis_posteriors(&[-1000.0, 0.0, -1000.0], &lp).unwrap();
        assert!(post[1] >= 1.0 - 1e-300);
        assert!(post[0] < 1e-300 && post[2] < 1e-300);
        let post = hypothesis_posteriors(&[700.0, -700.0, 0.0], &lp).unwrap();
        assert!(post.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn degenerate_evidence_is_an_error() {
        let lp = vec![0.5f64.ln(); 2];
        let err = hypothesis_posteriors(&[f64::NEG_INFINITY; 2], &lp).unwrap_err();
        assert!(matches!(err, Error::DegenerateEvidence));
        assert!(err.to_string().contains("degenerate evidence"));
        // a single finite entry is fine
        let post = hypothesis_posteriors(&[f64::NEG_INFINITY, 3.0], &lp).unwrap();
        assert_eq!(post, vec![0.0, 1.0]);
    }

    #[test]
    fn hypothesis_labels() {
        let h = HypothesisId::new(2);
        assert_eq!(h.label(), 3);
        assert_eq!(h.to_string(), "H3");
        assert_eq!(HypothesisId::from_label(3), Some(h));
        assert_eq!(HypothesisId::from_label(0), None);
    }

    #[test]
    fn prior_validation() {
        assert!(validate_priors("p", &[0.5, 0.5]).is_ok());
        assert!(validate_priors("p", &[0.5, 0.6]).is_err());
        assert!(validate_priors("p", &[1.0]).is_err());
        assert!(validate_priors("p", &[1.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn posteriors_lie_on_simplex(
            lm in prop::collection::vec(-700.0f64..700.0, 2..20),
            seed in 0u64..1000,
        ) {
            let k = lm.len();
            let mut raw: Vec<f64> = (0..k).map(|i| 1.0 + ((seed + i as u64) % 7) as f64).collect();
            let total: f64 = raw.iter().sum();
            raw.iter_mut().for_each(|r| *r /= total);
            let lp: Vec<f64> = raw.iter().map(|p| p.ln()).collect();
            let post = hypothesis_posteriors(&lm, &lp).unwrap();
            prop_assert!(post.iter().all(|&p| p >= 0.0));
            prop_assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }
}
