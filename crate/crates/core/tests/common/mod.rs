//! Independent reference computations shared by integration and acceptance tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqjde::special::ln_gamma;
use seqjde::{ConjugateState, HypothesisId, Qam, ScenarioModel, ShiftInMean, ShiftStatistic};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Log evidence, posterior mean and posterior variance.
#[derive(Debug, Clone, Copy)]
pub struct Reference {
    pub log_marginal: f64,
    pub mean: f64,
    pub var: f64,
}

/// Composite trapezoid over `nodes` equally spaced points of a log integrand,
/// returning the log integral and the first two central moments of `h(u)`.
fn trapezoid_log(lo: f64, hi: f64, nodes: usize, log_f: impl Fn(f64) -> f64, h: impl Fn(f64) -> f64) -> Reference {
    let step = (hi - lo) / (nodes - 1) as f64;
    let logs: Vec<f64> = (0..nodes).map(|i| log_f(lo + step * i as f64)).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut s0, mut s1) = (0.0, 0.0);
    for (i, l) in logs.iter().enumerate() {
        let w = if i == 0 || i == nodes - 1 { 0.5 } else { 1.0 };
        let f = w * (l - max).exp();
        s0 += f;
        s1 += f * h(lo + step * i as f64);
    }
    let mean = s1 / s0;
    let mut s2 = 0.0;
    for (i, l) in logs.iter().enumerate() {
        let w = if i == 0 || i == nodes - 1 { 0.5 } else { 1.0 };
        let d = h(lo + step * i as f64) - mean;
        s2 += w * (l - max).exp() * d * d;
    }
    Reference {
        log_marginal: max + (s0 * step).ln(),
        mean,
        var: s2 / s0,
    }
}

/// Density of the running mean under `mu = offset + G`, `G ~ Gam(shape, scale)`,
/// integrated in `g = u^2` to remove the endpoint singularity.
pub fn shift_gamma_tail(n: usize, xbar: f64, sigma2: f64, shape: f64, scale: f64, offset: f64) -> Reference {
    let v = sigma2 / n as f64;
    let sv = v.sqrt();
    let y = xbar - offset;
    // the integrand is exp(-(g - c)^2 / 2v) g^(shape-1) up to constants
    let c = y - v / scale;
    let (g_lo, g_hi) = if c > 0.0 {
        ((c - 40.0 * sv).max(0.0), c + 40.0 * sv)
    } else {
        (0.0, (40.0 * sv).min(80.0 * v / -c))
    };
    let log_prior_const = -ln_gamma(shape) - shape * scale.ln();
    let log_f = |u: f64| {
        if u <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let g = u * u;
        // Gam(g) dg = g^(shape-1) e^(-g/scale) / norm * 2u du
        let log_prior = log_prior_const + (2.0 * shape - 1.0) * u.ln() + std::f64::consts::LN_2 - g / scale;
        let log_lik = -0.5 * (LN_2PI + v.ln()) - (y - g).powi(2) / (2.0 * v);
        log_prior + log_lik
    };
    let r = trapezoid_log(g_lo.sqrt(), g_hi.sqrt(), 100_000, log_f, |u| u * u);
    Reference {
        mean: offset + r.mean,
        ..r
    }
}

/// Density of the running mean under `mu ~ U(lo, hi)`.
pub fn shift_uniform(n: usize, xbar: f64, sigma2: f64, lo: f64, hi: f64) -> Reference {
    let v = sigma2 / n as f64;
    let log_f = |mu: f64| -(hi - lo).ln() - 0.5 * (LN_2PI + v.ln()) - (xbar - mu).powi(2) / (2.0 * v);
    let sv = v.sqrt();
    let c = xbar.clamp(lo, hi);
    let rate = (xbar - c).abs() / v;
    let width = if rate > 0.0 { (40.0 * sv).min(40.0 / rate) } else { 40.0 * sv };
    trapezoid_log((c - width).max(lo), (c + width).min(hi), 100_000, log_f, |mu| mu)
}

/// Log evidence of `n` circular complex Gaussian observations with sufficient
/// squared distance `s` under an inverse-gamma noise prior, plus posterior
/// mean and variance of the noise variance, all by brute-force quadrature
/// over the log variance on a fine grid.
pub fn qam_inverse_gamma(n: usize, s: f64, a: f64, b: f64) -> Reference {
    // work in w = ln sigma2 so that the grid covers many decades evenly
    let log_f = |w: f64| {
        let sigma2 = w.exp();
        // IG(sigma2; a, b) d sigma2 = b^a / Gamma(a) sigma2^(-a-1) e^(-b/sigma2) sigma2 dw
        let log_prior = a * b.ln() - ln_gamma(a) - a * w - b / sigma2;
        let log_lik = -(n as f64) * (std::f64::consts::PI.ln() + w) - s / sigma2;
        log_prior + log_lik
    };
    // posterior mode of w sits at ln((b + s) / (a + n))
    let centre = ((b + s) / (a + n as f64)).ln();
    let spread = 40.0 / (a + n as f64).sqrt() + 4.0;
    let lo = centre - spread;
    let hi = centre + spread * 6.0;
    // grid of ~2e5 nodes keeps the trapezoid error near 1e-12 for these smooth integrands
    trapezoid_log(lo, hi, 200_001, log_f, |w| w.exp())
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Compare the shift-in-mean evidence of all three hypotheses with the
/// trapezoid references on random `(n, xbar)`; panics above `tol` and
/// returns the worst deviation.
pub fn check_shift_in_mean_oracle(cases: usize, seed: u64, tol: f64) -> f64 {
    let model = ShiftInMean::with_defaults();
    let cfg = model.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let n = (10f64.powf(rng.random_range(0.0..3.7))).round().max(1.0) as usize;
        let xbar = rng.random_range(-6.0..6.0);
        let stat = ShiftStatistic::new(n, xbar);

        let h3 = model.evidence(HypothesisId::new(2), &stat).unwrap();
        let r3 = shift_gamma_tail(n, xbar, cfg.sigma2, cfg.gamma_shape, cfg.gamma_scale, cfg.offset);
        let h1 = model.evidence(HypothesisId::new(0), &stat).unwrap();
        let r1 = shift_gamma_tail(n, -xbar, cfg.sigma2, cfg.gamma_shape, cfg.gamma_scale, cfg.offset);
        let h2 = model.evidence(HypothesisId::new(1), &stat).unwrap();
        let r2 = shift_uniform(n, xbar, cfg.sigma2, cfg.uniform_lo, cfg.uniform_hi);

        for (label, got, want, sign) in [("H1", &h1, r1, -1.0), ("H2", &h2, r2, 1.0), ("H3", &h3, r3, 1.0)] {
            // absolute error of the log evidence is the relative error of the evidence
            let e_lm = (got.log_marginal - want.log_marginal).abs();
            let e_mean = rel(got.mean[0], sign * want.mean);
            let e_var = rel(got.var_trace, want.var);
            worst = worst.max(e_lm).max(e_mean).max(e_var);
            assert!(
                e_lm <= tol && e_mean <= tol && e_var <= tol,
                "case {case} {label} n={n} xbar={xbar}: lm {e_lm:e} mean {e_mean:e} var {e_var:e}"
            );
        }
    }
    worst
}

/// Compare the conjugate QAM evidence with grid quadrature over the
/// noise variance; panics above `tol` and returns the worst deviation.
pub fn check_qam_oracle(cases: usize, seed: u64, tol: f64) -> f64 {
    let model = Qam::with_defaults();
    let cfg = model.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let n = (10f64.powf(rng.random_range(0.0..4.0))).round().max(1.0) as usize;
        // squared distance per observation between 0.01 and 10
        let s = n as f64 * 10f64.powf(rng.random_range(-2.0..1.0));
        let m = rng.random_range(0..16);
        let mut stat: ConjugateState = model.empty_statistic();
        stat.n = n;
        stat.dist[m] = s;
        let got = model.evidence(HypothesisId::new(m), &stat).unwrap();
        let want = qam_inverse_gamma(n, s, cfg.igam_shape, cfg.igam_scale);
        let e_lm = rel(got.log_marginal, want.log_marginal);
        let e_mean = rel(got.mean[0], want.mean);
        let e_var = rel(got.var_trace, want.var);
        worst = worst.max(e_lm).max(e_mean).max(e_var);
        assert!(
            e_lm <= tol && e_mean <= tol && e_var <= tol,
            "case {case} n={n} s={s}: lm {e_lm:e} mean {e_mean:e} var {e_var:e}"
        );
    }
    worst
}
