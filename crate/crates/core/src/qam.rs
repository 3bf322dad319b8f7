//! Square QAM symbol detection with unknown noise variance.
//!
//! Under hypothesis `m` every observation is the constellation point `s_m`
//! in circular complex Gaussian noise `CN(0, sigma2)`; the noise variance has
//! an inverse-gamma prior shared by all hypotheses, so each hypothesis is
//! conjugate and everything is closed form.
//!
//! Symbol `m` has in-phase level `levels[m % k]` and quadrature level
//! `levels[m / k]`, where `k = sqrt(order)` and the levels are the odd
//! integers `-(k-1), ..., k-1` scaled to unit average symbol energy.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use smallvec::smallvec;

use crate::error::{Error, Result};
use crate::model::{validate_priors, HypothesisEvidence, HypothesisId, Param, ScenarioModel};
use crate::special::ln_gamma;

const LN_PI: f64 = 1.144_729_885_849_400_2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QamConfig {
    /// Constellation size, a perfect square.
    pub order: usize,
    /// Inverse-gamma shape of the noise-variance prior.
    pub igam_shape: f64,
    /// Inverse-gamma scale of the noise-variance prior.
    pub igam_scale: f64,
    /// Hypothesis priors; uniform when empty.
    pub priors: Vec<f64>,
    /// Explicit constellation as `[re, im]` pairs; the scaled square grid when empty.
    pub constellation: Vec<[f64; 2]>,
}

impl Default for QamConfig {
    fn default() -> Self {
        QamConfig {
            order: 16,
            igam_shape: 2.1,
            igam_scale: 0.9,
            priors: Vec::new(),
            constellation: Vec::new(),
        }
    }
}

impl QamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.constellation.is_empty() {
            let k = (self.order as f64).sqrt().round() as usize;
            if self.order < 4 || k * k != self.order {
                return Err(Error::validation("qam.order", "must be a perfect square of at least 4"));
            }
        } else {
            if self.constellation.len() != self.order {
                return Err(Error::validation("qam.constellation", "needs one point per symbol"));
            }
            for (i, p) in self.constellation.iter().enumerate() {
                if !(p[0].is_finite() && p[1].is_finite()) {
                    return Err(Error::validation("qam.constellation", "points must be finite"));
                }
                if self.constellation[..i].contains(p) {
                    return Err(Error::validation("qam.constellation", "points must be pairwise distinct"));
                }
            }
        }
        if !(self.igam_shape > 2.0 && self.igam_shape.is_finite()) {
            return Err(Error::validation(
                "qam.igam_shape",
                "must exceed 2 (finite prior variance of the noise power)",
            ));
        }
        if !(self.igam_scale > 0.0 && self.igam_scale.is_finite()) {
            return Err(Error::validation("qam.igam_scale", "must be positive"));
        }
        if !self.priors.is_empty() {
            if self.priors.len() != self.order {
                return Err(Error::validation("qam.priors", "needs one entry per symbol"));
            }
            validate_priors("qam.priors", &self.priors)?;
        }
        Ok(())
    }
}

/// Sufficient statistic: count, running sums, and the accumulated squared
/// distance of the record to every constellation point.
#[derive(Debug, Clone, PartialEq)]
pub struct ConjugateState {
    pub n: usize,
    pub sum: Complex64,
    pub sum_sq: f64,
    pub dist: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Qam {
    config: QamConfig,
    points: Vec<Complex64>,
    priors: Vec<f64>,
    log_priors: Vec<f64>,
    ln_gamma_shape: f64,
    shape_ln_scale: f64,
    precision: Gamma<f64>,
}

/// Square grid with `k = sqrt(order)` levels per axis and unit average energy.
fn square_constellation(order: usize) -> Vec<Complex64> {
    let k = (order as f64).sqrt().round() as usize;
    let norm = (2.0 * (order as f64 - 1.0) / 3.0).sqrt();
    let levels: Vec<f64> = (0..k).map(|i| (2.0 * i as f64 - (k as f64 - 1.0)) / norm).collect();
    (0..order).map(|m| Complex64::new(levels[m % k], levels[m / k])).collect()
}

impl Qam {
    pub fn new(config: QamConfig) -> Result<Self> {
        config.validate()?;
        let points = if config.constellation.is_empty() {
            square_constellation(config.order)
        } else {
            config.constellation.iter().map(|p| Complex64::new(p[0], p[1])).collect()
        };
        let priors = if config.priors.is_empty() {
            vec![1.0 / config.order as f64; config.order]
        } else {
            config.priors.clone()
        };
        let precision = Gamma::new(config.igam_shape, 1.0 / config.igam_scale)
            .map_err(|e| Error::validation("qam.igam_shape", e.to_string()))?;
        Ok(Qam {
            log_priors: priors.iter().map(|p| p.ln()).collect(),
            priors,
            points,
            ln_gamma_shape: ln_gamma(config.igam_shape),
            shape_ln_scale: config.igam_shape * config.igam_scale.ln(),
            precision,
            config,
        })
    }

    pub fn with_defaults() -> Self {
        Self::new(QamConfig::default()).expect("defaults are valid")
    }

    pub fn config(&self) -> &QamConfig {
        &self.config
    }

    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    /// Posterior inverse-gamma shape and scale of the noise variance under `m`.
    pub fn posterior_params(&self, m: HypothesisId, stat: &ConjugateState) -> (f64, f64) {
        (
            self.config.igam_shape + stat.n as f64,
            self.config.igam_scale + stat.dist[m.index()],
        )
    }
}

impl ScenarioModel for Qam {
    type Observation = Complex64;
    type Statistic = ConjugateState;

    fn num_hypotheses(&self) -> usize {
        self.points.len()
    }

    fn prior(&self, m: HypothesisId) -> f64 {
        self.priors[m.index()]
    }

    fn log_priors(&self) -> Vec<f64> {
        self.log_priors.clone()
    }

    fn param_dim(&self, _m: HypothesisId) -> usize {
        1
    }

    fn sample_param<R: Rng + ?Sized>(&self, _m: HypothesisId, rng: &mut R) -> Param {
        smallvec![1.0 / self.precision.sample(rng)]
    }

    fn sample_observation<R: Rng + ?Sized>(&self, m: HypothesisId, theta: &[f64], rng: &mut R) -> Complex64 {
        let sd = (0.5 * theta[0]).sqrt();
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        self.points[m.index()] + Complex64::new(sd * re, sd * im)
    }

    fn empty_statistic(&self) -> ConjugateState {
        ConjugateState {
            n: 0,
            sum: Complex64::new(0.0, 0.0),
            sum_sq: 0.0,
            dist: vec![0.0; self.points.len()],
        }
    }

    fn update_statistic(&self, stat: &mut ConjugateState, x: &Complex64) {
        stat.n += 1;
        stat.sum += x;
        stat.sum_sq += x.norm_sqr();
        for (d, s) in stat.dist.iter_mut().zip(&self.points) {
            *d += (x - s).norm_sqr();
        }
    }

    fn statistic_from(&self, xs: &[Complex64]) -> ConjugateState {
        ConjugateState {
            n: xs.len(),
            sum: xs.iter().sum(),
            sum_sq: xs.iter().map(|x| x.norm_sqr()).sum(),
            dist: self
                .points
                .iter()
                .map(|s| xs.iter().map(|x| (x - s).norm_sqr()).sum())
                .collect(),
        }
    }

    fn sample_count(&self, stat: &ConjugateState) -> usize {
        stat.n
    }

    fn evidence(&self, m: HypothesisId, stat: &ConjugateState) -> Result<HypothesisEvidence> {
        let (a_n, b_n) = self.posterior_params(m, stat);
        if a_n <= 2.0 {
            return Err(Error::PriorTooHeavyTailed { shape: a_n });
        }
        let log_marginal = if stat.n == 0 {
            0.0
        } else {
            -(stat.n as f64) * LN_PI + self.shape_ln_scale - a_n * b_n.ln() + ln_gamma(a_n)
                - self.ln_gamma_shape
        };
        let mean = b_n / (a_n - 1.0);
        Ok(HypothesisEvidence {
            log_marginal,
            mean: smallvec![mean],
            var_trace: mean * mean / (a_n - 2.0),
        })
    }

    fn prior_mean(&self, _m: HypothesisId) -> Param {
        let a = self.config.igam_shape;
        let mean = if a > 1.0 { self.config.igam_scale / (a - 1.0) } else { f64::INFINITY };
        smallvec![mean]
    }

    fn prior_var_trace(&self, _m: HypothesisId) -> f64 {
        let a = self.config.igam_shape;
        if a > 2.0 {
            let mean = self.config.igam_scale / (a - 1.0);
            mean * mean / (a - 2.0)
        } else {
            f64::INFINITY
        }
    }

    fn fisher_info_trace_inv(&self, _m: HypothesisId, theta: &[f64]) -> f64 {
        theta[0] * theta[0]
    }

    fn kl_divergence(&self, m: HypothesisId, theta_m: &[f64], k: HypothesisId, theta_k: &[f64]) -> f64 {
        let (vm, vk) = (theta_m[0], theta_k[0]);
        let d2 = (self.points[m.index()] - self.points[k.index()]).norm_sqr();
        (vk / vm).ln() + (vm + d2) / vk - 1.0
    }
}
