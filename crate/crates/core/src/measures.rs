//! Closed-form measures: the invariant measure `ρ_N`, the conditional family
//! `ρ^t_N`, the extended measure on the unit square, and `ζ(2, a)`.

use serde::{Deserialize, Serialize};

use crate::error::{check_unit, Error, Result};
use crate::expansion::{ExpansionParams, Interval};

/// `ρ_N`, with density `(1/L) / (x + N - 1)` where `L = log(N/(N-1))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvariantMeasure {
    params: ExpansionParams,
    normalizer: f64,
}

impl InvariantMeasure {
    pub fn new(params: ExpansionParams) -> Self {
        InvariantMeasure {
            params,
            normalizer: 1.0 / params.log_ratio(),
        }
    }

    pub fn params(&self) -> ExpansionParams {
        self.params
    }

    /// `1 / log(N/(N-1))`.
    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    /// `G_N(s) = ρ_N([0, s])`.
    pub fn rho_cdf(&self, s: f64) -> Result<f64> {
        check_unit("s", s)?;
        Ok(self.cdf(s))
    }

    #[inline]
    pub(crate) fn cdf(&self, s: f64) -> f64 {
        if s >= 1.0 {
            return 1.0;
        }
        (s / (self.params.nf() - 1.0)).ln_1p() * self.normalizer
    }

    /// The density `ν_N(x)`.
    pub fn rho_density(&self, x: f64) -> Result<f64> {
        check_unit("x", x)?;
        Ok(self.density(x))
    }

    #[inline]
    pub(crate) fn density(&self, x: f64) -> f64 {
        self.normalizer / (x + self.params.nf() - 1.0)
    }

    /// `ρ_N([lo, hi))`, accurate relative to the interval length.
    #[inline]
    pub fn mass_between(&self, lo: f64, hi: f64) -> f64 {
        ((hi - lo) / (lo + self.params.nf() - 1.0)).ln_1p() * self.normalizer
    }

    pub fn mass(&self, a: Interval) -> f64 {
        self.mass_between(a.lo, a.hi)
    }

    /// Inverse of `G_N`.
    pub fn quantile(&self, p: f64) -> f64 {
        let v = (self.params.nf() - 1.0) * (p / self.normalizer).exp_m1();
        v.clamp(0.0, 1.0)
    }
}

/// `ρ^t_N`, with cdf `N x / (N - (1-x)(1-t))`. At `t = 1` this is Lebesgue measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionalMeasure {
    params: ExpansionParams,
    t: f64,
}

impl ConditionalMeasure {
    pub fn new(params: ExpansionParams, t: f64) -> Result<Self> {
        check_unit("t", t)?;
        Ok(ConditionalMeasure { params, t })
    }

    pub fn params(&self) -> ExpansionParams {
        self.params
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    #[inline]
    fn denom(&self, x: f64) -> f64 {
        let n = self.params.nf();
        (n - 1.0 + self.t) + x * (1.0 - self.t)
    }

    pub fn rho_t_cdf(&self, x: f64) -> Result<f64> {
        check_unit("x", x)?;
        Ok(self.cdf(x))
    }

    #[inline]
    pub(crate) fn cdf(&self, x: f64) -> f64 {
        if x >= 1.0 {
            return 1.0;
        }
        self.params.nf() * x / self.denom(x)
    }

    /// The density `h^t_N(x) = N(N-1+t) / (N - (1-x)(1-t))^2`.
    pub fn rho_t_density(&self, x: f64) -> Result<f64> {
        check_unit("x", x)?;
        Ok(self.density(x))
    }

    #[inline]
    pub(crate) fn density(&self, x: f64) -> f64 {
        let d = self.denom(x);
        self.params.nf() * (self.params.nf() - 1.0 + self.t) / (d * d)
    }

    /// `ρ^t_N([lo, hi))` without subtracting two cdf values.
    #[inline]
    pub fn mass_between(&self, lo: f64, hi: f64) -> f64 {
        let n = self.params.nf();
        n * (hi - lo) * (n - 1.0 + self.t) / (self.denom(lo) * self.denom(hi))
    }

    pub fn mass(&self, a: Interval) -> f64 {
        self.mass_between(a.lo, a.hi)
    }
}

/// The extended measure `ρ̄_N` on the square, density `(1/L) N / (N - (1-x)(1-y))^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtendedMeasure {
    params: ExpansionParams,
}

impl ExtendedMeasure {
    pub fn new(params: ExpansionParams) -> Self {
        ExtendedMeasure { params }
    }

    pub fn density(&self, x: f64, y: f64) -> f64 {
        let n = self.params.nf();
        let d = n - (1.0 - x) * (1.0 - y);
        n / (d * d) / self.params.log_ratio()
    }

    /// `ρ̄_N(a × b)` in closed form.
    ///
    /// With `α = 1 - x` and `β = 1 - y` the double integral of `N/(N - αβ)^2`
    /// over a rectangle collapses to
    /// `log(1 + N Δα Δβ / ((N - α₁β₁)(N - α₀β₀)))`. The pole of the partial
    /// antiderivatives at `y = 1` cancels before evaluation, so no endpoint
    /// needs special casing.
    pub fn rho_bar_rect(&self, a: Interval, b: Interval) -> f64 {
        let n = self.params.nf();
        let (a0, a1) = (1.0 - a.hi, 1.0 - a.lo);
        let (b0, b1) = (1.0 - b.hi, 1.0 - b.lo);
        let ratio = n * (a.hi - a.lo) * (b.hi - b.lo) / ((n - a1 * b1) * (n - a0 * b0));
        ratio.ln_1p() / self.params.log_ratio()
    }
}

/// Terms summed directly before the Euler-Maclaurin tail.
const ZETA_TERMS: usize = 50;

/// The Hurwitz zeta value `ζ(2, a) = Σ_{n≥0} (n + a)^{-2}` for `a > 0`.
pub fn hurwitz_zeta2(a: f64) -> Result<f64> {
    if !(a.is_finite() && a > 0.0) {
        return Err(Error::Domain {
            what: "a",
            value: a,
            expected: "a > 0",
        });
    }
    Ok(zeta2(a))
}

pub(crate) fn zeta2(a: f64) -> f64 {
    let x = ZETA_TERMS as f64 + a;
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let tail = inv + 0.5 * inv2 + inv * inv2 * (1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 / 42.0));
    let mut sum = tail;
    for k in (0..ZETA_TERMS).rev() {
        let y = k as f64 + a;
        sum += 1.0 / (y * y);
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::{adaptive_simpson, adaptive_simpson_2d, DEFAULT_BUDGET};
    use std::f64::consts::PI;

    fn p(n: u32) -> ExpansionParams {
        ExpansionParams::new(n).unwrap()
    }

    #[test]
    fn invariant_cdf_values() {
        let m = InvariantMeasure::new(p(2));
        assert_eq!(m.rho_cdf(0.0).unwrap(), 0.0);
        assert_eq!(m.rho_cdf(1.0).unwrap(), 1.0);
        let want = (4.0f64 / 3.0).ln() / 2f64.ln();
        assert!((m.rho_cdf(1.0 / 3.0).unwrap() - want).abs() < 1e-15);
        assert!((want - 0.4150375).abs() < 1e-7);
        assert!(m.rho_cdf(1.2).is_err());
        for n in 2..40 {
            let m = InvariantMeasure::new(p(n));
            assert!((m.rho_cdf(1.0 - 1e-300).unwrap() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn invariant_density_values() {
        let m = InvariantMeasure::new(p(2));
        assert!((m.rho_density(0.0).unwrap() - std::f64::consts::LOG2_E).abs() < 1e-15);
        assert!((m.rho_density(1.0).unwrap() - 0.7213475).abs() < 1e-7);
        let m3 = InvariantMeasure::new(p(3));
        assert!((m3.rho_density(0.0).unwrap() - 1.0 / (2.0 * 1.5f64.ln())).abs() < 1e-15);
        let total = adaptive_simpson(|x| m3.density(x), 0.0, 1.0, 1e-13, DEFAULT_BUDGET).unwrap();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quantile_inverts_cdf() {
        let m = InvariantMeasure::new(p(5));
        for k in 0..=20 {
            let q = k as f64 / 20.0;
            assert!((m.cdf(m.quantile(q)) - q).abs() < 1e-14);
        }
    }

    #[test]
    fn conditional_values() {
        for n in [2, 3, 7] {
            let c = ConditionalMeasure::new(p(n), 1.0).unwrap();
            assert!((c.rho_t_cdf(0.37).unwrap() - 0.37).abs() < 1e-16);
            assert_eq!(c.rho_t_cdf(1.0).unwrap(), 1.0);
            assert_eq!(c.rho_t_cdf(0.0).unwrap(), 0.0);
        }
        let c = ConditionalMeasure::new(p(2), 0.0).unwrap();
        assert!((c.rho_t_cdf(0.5).unwrap() - 2.0 / 3.0).abs() < 1e-16);
        assert_eq!(c.rho_t_density(0.0).unwrap(), 2.0);
        assert_eq!(c.rho_t_density(1.0).unwrap(), 0.5);
        let c1 = ConditionalMeasure::new(p(2), 1.0).unwrap();
        assert_eq!(c1.rho_t_density(0.5).unwrap(), 1.0);
        assert!(ConditionalMeasure::new(p(2), -0.5).is_err());
    }

    #[test]
    fn conditional_mass_matches_cdf_difference() {
        let c = ConditionalMeasure::new(p(3), 0.3).unwrap();
        for (lo, hi) in [(0.0, 0.2), (0.1, 0.9), (0.5, 1.0)] {
            let d = c.cdf(hi) - c.cdf(lo);
            assert!((c.mass_between(lo, hi) - d).abs() < 1e-15);
        }
    }

    #[test]
    fn derivatives_match_densities() {
        let h = 1e-5;
        for n in [2, 3, 6] {
            let m = InvariantMeasure::new(p(n));
            for t in [0.0, 0.4, 1.0] {
                let c = ConditionalMeasure::new(p(n), t).unwrap();
                for k in 1..20 {
                    let x = k as f64 / 20.0;
                    let fd = (m.cdf(x + h) - m.cdf(x - h)) / (2.0 * h);
                    assert!((fd - m.density(x)).abs() < 1e-6);
                    let fd = (c.cdf(x + h) - c.cdf(x - h)) / (2.0 * h);
                    assert!((fd - c.density(x)).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn extended_total_and_marginals() {
        for n in [2, 3, 10] {
            let e = ExtendedMeasure::new(p(n));
            let m = InvariantMeasure::new(p(n));
            assert!((e.rho_bar_rect(Interval::UNIT, Interval::UNIT) - 1.0).abs() < 1e-12);
            for x in [0.25, 0.5, 0.75] {
                let a = Interval::new(0.0, x).unwrap();
                assert!((e.rho_bar_rect(a, Interval::UNIT) - m.cdf(x)).abs() < 1e-12);
                assert!((e.rho_bar_rect(Interval::UNIT, a) - m.cdf(x)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn extended_rect_matches_quadrature() {
        let e = ExtendedMeasure::new(p(2));
        let half = Interval::new(0.0, 0.5).unwrap();
        let q = adaptive_simpson_2d(
            |x, y| e.density(x, y),
            (0.0, 0.5),
            (0.0, 0.5),
            1e-11,
            DEFAULT_BUDGET,
        )
        .unwrap();
        assert!((e.rho_bar_rect(half, half) - q).abs() < 1e-9);
        let a = Interval::new(0.6, 1.0).unwrap();
        let b = Interval::new(0.2, 0.9).unwrap();
        let q = adaptive_simpson_2d(
            |x, y| e.density(x, y),
            (0.6, 1.0),
            (0.2, 0.9),
            1e-11,
            DEFAULT_BUDGET,
        )
        .unwrap();
        assert!((e.rho_bar_rect(a, b) - q).abs() < 1e-9);
    }

    #[test]
    fn zeta_values() {
        let z2 = PI * PI / 6.0;
        assert!((hurwitz_zeta2(1.0).unwrap() - z2).abs() < 1e-14);
        assert!((hurwitz_zeta2(2.0).unwrap() - (z2 - 1.0)).abs() < 1e-14);
        assert!((hurwitz_zeta2(3.0).unwrap() - (z2 - 1.25)).abs() < 1e-14);
        assert!((hurwitz_zeta2(0.5).unwrap() - PI * PI / 2.0).abs() < 1e-13);
        assert!(hurwitz_zeta2(0.0).is_err());
        assert!(hurwitz_zeta2(-1.0).is_err());
    }

    #[test]
    fn zeta_matches_recurrence() {
        for k in 1..40 {
            let a = 0.3 + k as f64 * 0.7;
            let lhs = zeta2(a);
            let rhs = zeta2(a + 1.0) + 1.0 / (a * a);
            assert!((lhs - rhs).abs() < 1e-14);
        }
    }
}
