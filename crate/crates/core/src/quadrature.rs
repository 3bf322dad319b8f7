//! Gauss–Jacobi rules computed with the Golub–Welsch eigenvalue method.
//!
//! The symmetric tridiagonal Jacobi matrix is diagonalised with implicit QL,
//! tracking only the first component of each eigenvector, so building an
//! `n`-point rule costs `O(n^2)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::ln_gamma;

/// Controls for the adaptive posterior quadrature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadratureSpec {
    /// Nodes of the coarsest rule.
    pub node_count: usize,
    /// Integrand mass beyond the window, relative to its peak.
    pub tail_mass_cut: f64,
    pub refinement_factor: usize,
    pub max_refinements: usize,
    /// Agreement required between two successive rules.
    pub rel_tol: f64,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec {
            node_count: 32,
            tail_mass_cut: 1e-12,
            refinement_factor: 2,
            max_refinements: 6,
            rel_tol: 1e-9,
        }
    }
}

impl QuadratureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.node_count < 16 {
            return Err(Error::validation("quadrature.node_count", "must be at least 16"));
        }
        if !(self.tail_mass_cut > 0.0 && self.tail_mass_cut < 1e-6) {
            return Err(Error::validation("quadrature.tail_mass_cut", "must lie in (0, 1e-6)"));
        }
        if self.refinement_factor < 2 {
            return Err(Error::validation("quadrature.refinement_factor", "must be at least 2"));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::validation("quadrature.rel_tol", "must be positive"));
        }
        Ok(())
    }

    /// Node count of refinement level `level`.
    pub fn nodes_at(&self, level: usize) -> usize {
        self.node_count * self.refinement_factor.pow(level as u32)
    }
}

/// An `n`-point rule on `[-1, 1]` for the weight `(1 - x)^alpha (1 + x)^beta`.
#[derive(Debug, Clone)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    /// `(1 + x_i) / 2`, the node mapped to `[0, 1]`.
    pub unit_nodes: Vec<f64>,
    pub ln_weights: Vec<f64>,
}

impl GaussRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Integrate `f` against the rule's weight function on `[-1, 1]`.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

/// Gauss–Legendre rule with `n` nodes.
pub fn gauss_legendre(n: usize) -> GaussRule {
    gauss_jacobi(n, 0.0, 0.0)
}

/// Gauss–Jacobi rule with `n` nodes, `alpha, beta > -1`.
pub fn gauss_jacobi(n: usize, alpha: f64, beta: f64) -> GaussRule {
    assert!(n >= 1, "rule needs at least one node");
    assert!(alpha > -1.0 && beta > -1.0, "Jacobi exponents must exceed -1");
    let ab = alpha + beta;

    let mut diag = vec![0.0; n];
    let mut off = vec![0.0; n];
    for (k, d) in diag.iter_mut().enumerate() {
        let kf = k as f64;
        let denom = (2.0 * kf + ab) * (2.0 * kf + ab + 2.0);
        *d = if denom.abs() < 1e-300 {
            (beta - alpha) / (ab + 2.0)
        } else {
            (beta * beta - alpha * alpha) / denom
        };
    }
    for k in 1..n {
        let kf = k as f64;
        let s = 2.0 * kf + ab;
        let num = 4.0 * kf * (kf + alpha) * (kf + beta) * (kf + ab);
        let den = s * s * (s + 1.0) * (s - 1.0);
        off[k - 1] = (num / den).sqrt();
    }

    let ln_mu0 = (ab + 1.0) * std::f64::consts::LN_2 + ln_gamma(alpha + 1.0) + ln_gamma(beta + 1.0)
        - ln_gamma(ab + 2.0);
    let mu0 = ln_mu0.exp();

    let mut first = vec![0.0; n];
    first[0] = 1.0;
    implicit_ql(&mut diag, &mut off, &mut first);

    let mut pairs: Vec<(f64, f64)> = diag
        .into_iter()
        .zip(first)
        .map(|(x, z)| (x, mu0 * z * z))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    let nodes: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let weights: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    GaussRule {
        unit_nodes: nodes.iter().map(|x| 0.5 * (1.0 + x)).collect(),
        ln_weights: weights.iter().map(|w| w.ln()).collect(),
        nodes,
        weights,
    }
}

/// Eigenvalues of a symmetric tridiagonal matrix (diagonal `d`, sub-diagonal
/// `e` with `e[n-1]` unused) by implicit QL with Wilkinson shifts. `z` holds
/// the first row of the eigenvector matrix and is rotated alongside.
fn implicit_ql(d: &mut [f64], e: &mut [f64], z: &mut [f64]) {
    let n = d.len();
    if n == 1 {
        return;
    }
    e[n - 1] = 0.0;
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m < n - 1 {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            assert!(iter <= 100, "implicit QL failed to converge");

            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut underflow = false;
            let mut i = m;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;

                let zf = z[i + 1];
                z[i + 1] = s * z[i] + c * zf;
                z[i] = c * z[i] - s * zf;
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn legendre_five_points() {
        let r = gauss_legendre(5);
        let expected = [
            -0.906_179_845_938_664,
            -0.538_469_310_105_683,
            0.0,
            0.538_469_310_105_683,
            0.906_179_845_938_664,
        ];
        for (x, e) in r.nodes.iter().zip(expected) {
            assert!((x - e).abs() < 1e-14, "{x} vs {e}");
        }
        assert_relative_eq!(r.weights[2], 128.0 / 225.0, max_relative = 1e-13);
        assert_relative_eq!(r.weights.iter().sum::<f64>(), 2.0, max_relative = 1e-14);
    }

    #[test]
    fn legendre_is_exact_to_degree_2n_minus_1() {
        let n = 40;
        let r = gauss_legendre(n);
        for k in [0, 10, 2 * n - 2, 2 * n - 1] {
            let exact = if k % 2 == 1 { 0.0 } else { 2.0 / (k as f64 + 1.0) };
            let got = r.integrate(|x| x.powi(k as i32));
            assert!((got - exact).abs() < 1e-13, "k={k}: {got} vs {exact}");
        }
    }

    #[test]
    fn jacobi_moments_match_beta_function() {
        // int_{-1}^{1} (1+x)^beta (1+x)^k dx = 2^(beta+k+1) / (beta+k+1)
        let beta = 0.7;
        let r = gauss_jacobi(24, 0.0, beta);
        for k in [0, 1, 5, 20, 47] {
            let exact = 2f64.powf(beta + k as f64 + 1.0) / (beta + k as f64 + 1.0);
            let got = r.integrate(|x| (1.0 + x).powi(k));
            assert_relative_eq!(got, exact, max_relative = 1e-12);
        }
    }

    #[test]
    fn large_rules_stay_accurate() {
        let r = gauss_jacobi(1024, 0.0, -0.3);
        let exact = 2f64.powf(0.7) / 0.7;
        assert_relative_eq!(r.weights.iter().sum::<f64>(), exact, max_relative = 1e-11);
        assert!(r.nodes.windows(2).all(|w| w[0] < w[1]));
        assert!(r.weights.iter().all(|&w| w > 0.0));
    }

    #[test]
    fn spec_validation() {
        assert!(QuadratureSpec::default().validate().is_ok());
        let bad = QuadratureSpec { node_count: 8, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = QuadratureSpec { tail_mass_cut: 1e-3, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
