//! Log-domain normal CDF helpers, Mills ratios and truncated-normal moments.

use libm::erfc;

/// `ln Gamma(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// `log(sum(exp(v)))` with a max shift. Returns `-inf` for an empty or all `-inf` slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    if max == f64::INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn log_norm_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

/// Continued-fraction pieces of the upper-tail Mills ratio at `t > 0`.
///
/// `m(t) = 1/(t + c)` with `c = 1/(t + 2/d)` and `d = t + 3/(t + 4/(...))`.
fn mills_fraction(t: f64) -> (f64, f64) {
    let depth = if t > 10.0 { 40 } else { 160 };
    let mut d = t;
    for k in (3..=depth).rev() {
        d = t + k as f64 / d;
    }
    let c = 1.0 / (t + 2.0 / d);
    (c, d)
}

/// Upper-tail Mills ratio `(1 - Phi(t)) / phi(t)`.
pub fn mills_ratio(t: f64) -> f64 {
    if t < 5.0 {
        0.5 * erfc(t / std::f64::consts::SQRT_2) / log_norm_pdf(t).exp()
    } else {
        let (c, _) = mills_fraction(t);
        1.0 / (t + c)
    }
}

/// `log Phi(x)`, accurate far into both tails.
pub fn log_norm_cdf(x: f64) -> f64 {
    if x < -5.0 {
        log_norm_pdf(x) + mills_ratio(-x).ln()
    } else if x > 0.0 {
        (-0.5 * erfc(x / std::f64::consts::SQRT_2)).ln_1p()
    } else {
        (0.5 * erfc(-x / std::f64::consts::SQRT_2)).ln()
    }
}

/// `log(Phi(hi) - Phi(lo))` for `lo < hi`.
pub fn log_norm_interval(lo: f64, hi: f64) -> f64 {
    debug_assert!(lo <= hi);
    if lo >= 0.0 {
        // mirror into the lower tail
        return log_norm_interval(-hi, -lo);
    }
    if hi <= 0.0 {
        let lh = log_norm_cdf(hi);
        let ll = log_norm_cdf(lo);
        lh + log1m_exp(ll - lh)
    } else {
        let tails = log_norm_cdf(lo).exp() + log_norm_cdf(-hi).exp();
        (-tails).ln_1p()
    }
}

/// `log(1 - exp(x))` for `x <= 0`.
pub fn log1m_exp(x: f64) -> f64 {
    if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

/// Mean and variance of `N(loc, scale^2)` truncated to `[lo, hi]`.
pub fn truncated_normal_moments(loc: f64, scale: f64, lo: f64, hi: f64) -> (f64, f64) {
    let a = (lo - loc) / scale;
    let b = (hi - loc) / scale;
    // One-sided regimes: the bulk sits against a single boundary and the
    // far boundary carries no weight. Closed forms via the Mills fraction
    // avoid the cancellation in the textbook expression.
    if b < -5.0 && 0.5 * (a * a - b * b) > 40.0 {
        let (c, d) = mills_fraction(-b);
        let var = scale * scale * c * (2.0 / d - c);
        return (hi - scale * c, var.max(0.0));
    }
    if a > 5.0 && 0.5 * (b * b - a * a) > 40.0 {
        let (c, d) = mills_fraction(a);
        let var = scale * scale * c * (2.0 / d - c);
        return (lo + scale * c, var.max(0.0));
    }
    let log_z = log_norm_interval(a, b);
    let ra = (log_norm_pdf(a) - log_z).exp();
    let rb = (log_norm_pdf(b) - log_z).exp();
    let mean = loc + scale * (ra - rb);
    let diff = ra - rb;
    let var = scale * scale * (1.0 + a * ra - b * rb - diff * diff);
    (mean.clamp(lo, hi), var.max(0.0))
}
