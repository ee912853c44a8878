//! Geometric convergence of `G^t_{N,n}` and `F^t_{N,n}` to `G_N`.
//!
//! The constants `β_N`, `δ_N`, `c_N`, the kernel-variation function
//! `β_N(i, θ)`, certified suprema of the cdf distances, and a checker that
//! compares them with the geometric bounds `δ_N c_N^{n-1}` and
//! `β_N δ_N c_N^{n-1}`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::Bounds;
use crate::chain::{prob, AtomicDistribution, PropagationSettings};
use crate::error::{check_unit, Error, Result};
use crate::expansion::ExpansionParams;
use crate::measures::InvariantMeasure;

/// `β_N = 2N - 1 - 2√(N(N-1)) = sup_x x(1-x)/(N-1+x)`.
pub fn beta_const(params: ExpansionParams) -> f64 {
    let n = params.nf();
    // (√N - √(N-1))² avoids the cancellation in the expanded form
    let d = n.sqrt() - (n - 1.0).sqrt();
    d * d
}

/// `δ_N = 2/(N+1) - log(N²/(N²-1)) / log(N/(N-1))`.
pub fn delta_const(params: ExpansionParams) -> f64 {
    let n = params.nf();
    2.0 / (n + 1.0) - (1.0 / (n * n - 1.0)).ln_1p() / params.log_ratio()
}

/// Contraction factor `c_N`; for `N = 2` the sharper `9 - 1/6 - 6√2`.
pub fn rate_const(params: ExpansionParams) -> f64 {
    if params.n() == 2 {
        9.0 - 1.0 / 6.0 - 6.0 * std::f64::consts::SQRT_2
    } else {
        let n = params.nf();
        beta_const(params) + (n - 1.0) / (n * (n + 1.0))
    }
}

/// Geometric bound on `sup |G^t_{N,n} - G_N|`.
pub fn g_bound(params: ExpansionParams, n: u32) -> f64 {
    delta_const(params) * rate_const(params).powi(n as i32 - 1)
}

/// Geometric bound on `sup |F^t_{N,n} - G_N|`.
pub fn f_bound(params: ExpansionParams, n: u32) -> f64 {
    beta_const(params) * g_bound(params, n)
}

/// Stationary point `1 - N + √((i+1-N)(i+2-N))` of `θ ↦ P_{N,i+1}(θ)`.
pub fn theta_star(params: ExpansionParams, i: u64) -> Result<f64> {
    if i <= params.min_digit() {
        return Err(Error::Domain {
            what: "i",
            value: i as f64,
            expected: "i >= N + 1",
        });
    }
    Ok(stationary(params, i))
}

#[inline]
fn stationary(params: ExpansionParams, i: u64) -> f64 {
    let a = (i + 1 - params.min_digit()) as f64;
    1.0 - params.nf() + (a * (a + 1.0)).sqrt()
}

/// `β_N(i, θ) = ∫_0^θ |P'_{N,i+1}| + P_{N,i+1}(θ)`.
///
/// `θ = 1` gives the left limit. `P_{N,i+1}` increases up to its stationary
/// point and decreases after, so the integral collapses to endpoint values.
pub fn beta_kernel(params: ExpansionParams, i: u64, theta: f64) -> Result<f64> {
    params.check_digit(i)?;
    check_unit("theta", theta)?;
    Ok(kernel_variation(params, i, theta))
}

fn kernel_variation(params: ExpansionParams, i: u64, theta: f64) -> f64 {
    let peak = stationary(params, i).clamp(0.0, theta);
    2.0 * prob(params, i + 1, peak) - prob(params, i + 1, 0.0)
}

/// Closed-form `sup_{i >= N, θ ∈ [0,1)} β_N(i, θ)`.
pub fn sup_beta_kernel(params: ExpansionParams) -> f64 {
    let n = params.nf();
    if params.n() == 2 {
        6.0 - 4.0 * std::f64::consts::SQRT_2 - 1.0 / 6.0
    } else {
        (n - 1.0) / (n * (n + 1.0))
    }
}

/// Largest `β_N(i, θ)` over `N <= i <= i_max` on a θ grid plus the clamped
/// stationary points. Returns `(value, i, θ)`.
pub fn sup_beta_kernel_search(params: ExpansionParams, i_max: u64, grid: usize) -> (f64, u64, f64) {
    let mut best = (f64::NEG_INFINITY, 0, 0.0);
    for i in params.min_digit()..=i_max {
        let star = stationary(params, i);
        let thetas = (0..=grid)
            .map(|k| k as f64 / grid as f64)
            .chain((0.0..=1.0).contains(&star).then_some(star));
        for th in thetas {
            let v = kernel_variation(params, i, th);
            if v > best.0 {
                best = (v, i, th);
            }
        }
    }
    best
}

/// Enclosure of `sup_s |G^t_{N,n}(s) - G_N(s)|` for a propagated law.
///
/// The supremum of a monotone step function against the continuous `G_N`
/// is attained at one-sided limits at atom endpoints, or at `s = 0, 1`.
pub fn alpha_sup(dist: &AtomicDistribution) -> Bounds {
    let g = InvariantMeasure::new(dist.params);
    let e = dist.tv_error;
    let extra = dist.certified_error();

    let mut by_lo: Vec<(f64, f64)> = dist.atoms.iter().map(|a| (a.lo, a.weight)).collect();
    let mut by_hi: Vec<(f64, f64)> = dist.atoms.iter().map(|a| (a.hi, a.weight)).collect();
    by_lo.sort_by(|a, b| a.0.total_cmp(&b.0));
    by_hi.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = by_lo.iter().map(|a| a.1).sum();

    // The upper cdf G_hi jumps at lower endpoints, G_lo at upper endpoints.
    let mut upper = extra.max(1.0 - total + e);
    let mut lower: f64 = 0.0;
    let mut cum = 0.0;
    for &(lo, w) in &by_lo {
        let gn = g.cdf(lo);
        // G_N - G_hi just before the jump, G_hi - G_N just after
        lower = lower.max(gn - (cum + extra));
        cum += w;
        upper = upper.max(cum + extra - gn);
    }
    cum = 0.0;
    for &(hi, w) in &by_hi {
        let gn = g.cdf(hi);
        upper = upper.max(gn - (cum - e));
        cum += w;
        lower = lower.max(cum - e - gn);
    }
    Bounds::new(lower.min(upper), upper.min(1.0))
}

/// Enclosure of `sup_x |F(x) - G_N(x)|` from a uniform grid of `points` cells.
///
/// Grid values come from a coarsened copy of `dist` with `sketch_cells`
/// cells; the gap between grid points is covered by a curvature bound.
/// The largest grid values are then re-evaluated on the full law.
pub fn f_distance_sup(dist: &AtomicDistribution, points: usize, sketch_cells: usize) -> Bounds {
    let params = dist.params;
    let g = InvariantMeasure::new(params);
    let sketch = dist.coarsened(1.0 / sketch_cells as f64);
    let h = 1.0 / points as f64;
    let vals: Vec<(f64, Bounds)> = (0..=points)
        .map(|k| {
            let x = k as f64 * h;
            (x, distance_enclosure(sketch.f_cdf(x), g.cdf(x)))
        })
        .collect();
    let mut upper = vals.iter().map(|v| v.1.upper).fold(0.0, f64::max);
    let mut lower = vals.iter().map(|v| v.1.lower).fold(0.0, f64::max);

    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&a, &b| vals[b].1.upper.total_cmp(&vals[a].1.upper));
    for &k in order.iter().take(8) {
        let x = vals[k].0;
        lower = lower.max(distance_enclosure(dist.f_cdf(x), g.cdf(x)).lower);
        // local refinement between neighbours on the full law
        for j in 1..8 {
            for side in [-1.0, 1.0] {
                let y = (x + side * h * j as f64 / 8.0).clamp(0.0, 1.0);
                lower = lower.max(distance_enclosure(dist.f_cdf(y), g.cdf(y)).lower);
            }
        }
    }
    let n = params.nf();
    let m1 = n - 1.0;
    let curvature = 2.0 * n / (m1 * m1) + 1.0 / (params.log_ratio() * m1 * m1);
    upper += curvature * h * h / 8.0;
    Bounds::new(lower.min(upper), upper.min(1.0))
}

/// Enclosure of `|v - target|` when `v` lies in `b`.
fn distance_enclosure(b: Bounds, target: f64) -> Bounds {
    let upper = (b.upper - target).max(target - b.lower);
    Bounds::new(b.distance_to(target), upper.max(0.0))
}

/// Outcome of comparing an enclosure with a bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheckStatus {
    /// The whole enclosure lies below the bound.
    Pass,
    /// The enclosure straddles the bound.
    Inconclusive,
    /// Even the lower end of the enclosure exceeds the bound.
    Violation,
}

impl CheckStatus {
    pub fn classify(observed: Bounds, bound: f64) -> Self {
        if observed.upper <= bound {
            CheckStatus::Pass
        } else if observed.lower > bound {
            CheckStatus::Violation
        } else {
            CheckStatus::Inconclusive
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            CheckStatus::Pass => "pass",
            CheckStatus::Inconclusive => "inconclusive",
            CheckStatus::Violation => "violation",
        }
    }
}

/// Which distance a row of a [`BoundsReport`] refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Quantity {
    /// `sup_s |G^t_{N,n}(s) - G_N(s)|`
    G,
    /// `sup_x |F^t_{N,n}(x) - G_N(x)|`
    F,
}

impl Quantity {
    pub fn as_str(&self) -> &'static str {
        match self {
            Quantity::G => "G",
            Quantity::F => "F",
        }
    }
}

/// One `(t, n, quantity)` comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundsCell {
    pub t: f64,
    pub n: u32,
    pub quantity: Quantity,
    pub observed: Bounds,
    pub bound: f64,
    pub status: CheckStatus,
}

impl BoundsCell {
    /// `bound - observed.upper`; negative when the bound is not certified.
    pub fn margin(&self) -> f64 {
        self.bound - self.observed.upper
    }
}

/// Worst case over `t` for one level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub n: u32,
    pub observed_sup_g: Bounds,
    pub bound_g: f64,
    pub observed_sup_f: Bounds,
    pub bound_f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub params: ExpansionParams,
    pub beta: f64,
    pub delta: f64,
    pub rate: f64,
    pub per_n: Vec<LevelSummary>,
    pub cells: Vec<BoundsCell>,
}

impl BoundsReport {
    pub fn violations(&self, quantity: Quantity) -> usize {
        self.count(quantity, CheckStatus::Violation)
    }

    pub fn count(&self, quantity: Quantity, status: CheckStatus) -> usize {
        self.cells
            .iter()
            .filter(|c| c.quantity == quantity && c.status == status)
            .count()
    }

    /// Worst `(observed.lower - bound)` over the cells of one quantity.
    pub fn worst_excess(&self, quantity: Quantity) -> f64 {
        self.cells
            .iter()
            .filter(|c| c.quantity == quantity)
            .map(|c| c.observed.lower - c.bound)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn all_pass(&self) -> bool {
        self.cells.iter().all(|c| c.status == CheckStatus::Pass)
    }
}

/// Grid resolution used for the F distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FGrid {
    pub points: usize,
    pub sketch_cells: usize,
}

impl Default for FGrid {
    fn default() -> Self {
        FGrid {
            points: 10_000,
            sketch_cells: 512,
        }
    }
}

/// Compare observed G and F distances with the geometric bounds for every
/// `t` in `t_grid` and `1 <= n <= n_max`.
pub fn verify_geometric_bounds(
    params: ExpansionParams,
    t_grid: &[f64],
    n_max: u32,
    settings: &PropagationSettings,
    grid: FGrid,
) -> Result<BoundsReport> {
    if n_max == 0 {
        return Err(Error::Config("n_max must be at least 1".into()));
    }
    for &t in t_grid {
        check_unit("t", t)?;
    }
    settings.validate(params)?;
    let per_t: Vec<Vec<BoundsCell>> = t_grid
        .par_iter()
        .map(|&t| -> Result<Vec<BoundsCell>> {
            let mut dist = AtomicDistribution::initial(params, t)?;
            let mut cells = Vec::with_capacity(2 * n_max as usize);
            for n in 1..=n_max {
                dist = dist.propagate(settings)?;
                let bg = g_bound(params, n);
                let bf = f_bound(params, n);
                let og = alpha_sup(&dist);
                let of = f_distance_sup(&dist, grid.points, grid.sketch_cells);
                for (quantity, observed, bound) in [(Quantity::G, og, bg), (Quantity::F, of, bf)] {
                    cells.push(BoundsCell {
                        t,
                        n,
                        quantity,
                        observed,
                        bound,
                        status: CheckStatus::classify(observed, bound),
                    });
                }
            }
            Ok(cells)
        })
        .collect::<Result<_>>()?;
    let cells: Vec<BoundsCell> = per_t.into_iter().flatten().collect();
    let per_n = (1..=n_max)
        .map(|n| {
            let worst = |q: Quantity| {
                cells.iter().filter(|c| c.n == n && c.quantity == q).fold(
                    Bounds::exact(0.0),
                    |acc, c| {
                        Bounds::new(
                            acc.lower.max(c.observed.lower),
                            acc.upper.max(c.observed.upper),
                        )
                    },
                )
            };
            LevelSummary {
                n,
                observed_sup_g: worst(Quantity::G),
                bound_g: g_bound(params, n),
                observed_sup_f: worst(Quantity::F),
                bound_f: f_bound(params, n),
            }
        })
        .collect();
    Ok(BoundsReport {
        params,
        beta: beta_const(params),
        delta: delta_const(params),
        rate: rate_const(params),
        per_n,
        cells,
    })
}

/// `t` values `0, 1/(k-1), ..., 1`.
pub fn uniform_grid(k: usize) -> Vec<f64> {
    match k {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..k).map(|j| j as f64 / (k - 1) as f64).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(n: u32) -> ExpansionParams {
        ExpansionParams::new(n).unwrap()
    }

    #[test]
    fn constants() {
        assert!((beta_const(p(2)) - (3.0 - 2.0 * 2f64.sqrt())).abs() < 1e-15);
        assert!((beta_const(p(3)) - (5.0 - 2.0 * 6f64.sqrt())).abs() < 1e-14);
        assert!((delta_const(p(2)) - (2.0 / 3.0 - (4.0f64 / 3.0).ln() / 2f64.ln())).abs() < 1e-15);
        assert!((delta_const(p(3)) - 0.209511).abs() < 1e-6);
        assert!((rate_const(p(2)) - 0.3480520).abs() < 1e-7);
        assert!((rate_const(p(3)) - (5.0 - 2.0 * 6f64.sqrt() + 2.0 / 12.0)).abs() < 1e-15);
        assert!((rate_const(p(4)) - (7.0 - 4.0 * 3f64.sqrt() + 3.0 / 20.0)).abs() < 1e-14);
    }

    #[test]
    fn bound_arithmetic() {
        assert!((g_bound(p(2), 3) - delta_const(p(2)) * 0.3480520f64.powi(2)).abs() < 1e-7);
        assert!((g_bound(p(3), 2) - 0.056084).abs() < 1e-6);
        assert_eq!(f_bound(p(2), 1), beta_const(p(2)) * delta_const(p(2)));
    }

    #[test]
    fn kernel_values() {
        let r2 = 2f64.sqrt();
        let v = beta_kernel(p(2), 2, r2 - 1.0).unwrap();
        assert!((v - (6.0 - 4.0 * r2 - 1.0 / 6.0)).abs() < 1e-15);
        for th in [0.0, 0.3, 0.99] {
            assert!((beta_kernel(p(3), 3, th).unwrap() - 1.0 / 6.0).abs() < 1e-15);
        }
        assert!((beta_kernel(p(2), 3, 1.0).unwrap() - 7.0 / 60.0).abs() < 1e-15);
        assert!(beta_kernel(p(3), 2, 0.5).is_err());
    }

    #[test]
    fn stationary_points() {
        assert!((theta_star(p(3), 4).unwrap() - (6f64.sqrt() - 2.0)).abs() < 1e-15);
        assert!((theta_star(p(2), 3).unwrap() - (6f64.sqrt() - 1.0)).abs() < 1e-15);
        assert!((theta_star(p(4), 5).unwrap() - (6f64.sqrt() - 3.0)).abs() < 1e-15);
        assert!(theta_star(p(3), 3).is_err());
    }

    #[test]
    fn level_zero_alpha() {
        let g = InvariantMeasure::new(p(2));
        for t in [0.0, 0.3, 0.9, 1.0] {
            let d = AtomicDistribution::initial(p(2), t).unwrap();
            let a = alpha_sup(&d);
            let expect = g.cdf(t).max(1.0 - g.cdf(t));
            assert!((a.lower - expect).abs() < 1e-15 && (a.upper - expect).abs() < 1e-15);
        }
        let t = 2f64.sqrt() - 1.0;
        let a = alpha_sup(&AtomicDistribution::initial(p(2), t).unwrap());
        assert!((a.mid() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn status_classification() {
        assert_eq!(
            CheckStatus::classify(Bounds::new(0.1, 0.2), 0.3),
            CheckStatus::Pass
        );
        assert_eq!(
            CheckStatus::classify(Bounds::new(0.1, 0.4), 0.3),
            CheckStatus::Inconclusive
        );
        assert_eq!(
            CheckStatus::classify(Bounds::new(0.35, 0.4), 0.3),
            CheckStatus::Violation
        );
    }

    #[test]
    fn grid_helper() {
        assert_eq!(uniform_grid(3), vec![0.0, 0.5, 1.0]);
        assert_eq!(uniform_grid(21).len(), 21);
    }
}
