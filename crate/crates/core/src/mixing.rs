//! ψ-mixing coefficients of the digit process.
//!
//! Exact `ε_{N,1}`, `ε_{N,2}`, grid estimates of `ε_{N,n}` from the density of
//! `F^t_{N,n-1}`, the geometric upper bounds through `K_N`, bounds on ψ under
//! `ρ^t_N` and `ρ_N`, and brute-force cylinder estimates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::Bounds;
use crate::chain::{AtomicDistribution, PropagationSettings, Resolution, TailPolicy};
use crate::error::{Error, Result};
use crate::expansion::{BranchComposition, ExpansionParams, Interval};
use crate::levy::{delta_const, rate_const};
use crate::measures::{zeta2, ConditionalMeasure, ExtendedMeasure, InvariantMeasure};
use crate::quadrature::adaptive_simpson;

/// `ε_{N,1} = N log(N/(N-1)) - 1`.
pub fn epsilon1_exact(params: ExpansionParams) -> f64 {
    params.nf() * params.log_ratio() - 1.0
}

/// `ε_{N,2}` from the two extreme corners of the ratio, via `ζ(2, ·)`.
pub fn epsilon2_exact(params: ExpansionParams) -> f64 {
    let n = params.nf();
    let l = params.log_ratio();
    let upper = (1.0 + (n - 1.0) * (n - 1.0) * zeta2(n)) * l - 1.0;
    let lower = (1.0 + n * n * zeta2(n + 1.0) - n * zeta2(n)) * l - 1.0;
    upper.abs().max(lower.abs())
}

/// `K_N = N + N³/(N-1)² - (N-1)[(2N-1)N/((N-1)²+N²) + (2N+1)/(2N)]`.
#[allow(non_snake_case)]
pub fn K_const(params: ExpansionParams) -> f64 {
    let n = params.nf();
    let m = n - 1.0;
    n + n * n * n / (m * m)
        - m * ((2.0 * n - 1.0) * n / (m * m + n * n) + (2.0 * n + 1.0) / (2.0 * n))
}

/// A number together with whether it exceeds 1 (and so says nothing about a
/// quantity confined to `[0, 1]`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundValue {
    pub value: f64,
    pub vacuous: bool,
}

impl BoundValue {
    fn new(value: f64) -> Self {
        BoundValue {
            value,
            vacuous: !(value < 1.0),
        }
    }
}

/// `log(N/(N-1)) K_N δ_N c_N^{n-2}`, an upper bound on `ε_{N,n}` for `n >= 2`.
pub fn epsilon_bound(params: ExpansionParams, n: u32) -> Result<BoundValue> {
    if n < 2 {
        return Err(Error::Config("epsilon bound needs n >= 2".into()));
    }
    let v = params.log_ratio()
        * K_const(params)
        * delta_const(params)
        * rate_const(params).powi(n as i32 - 2);
    Ok(BoundValue::new(v))
}

/// Whether a value is known exactly or only bounded above.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    Exact,
    Estimate,
    Bound,
}

impl ValueKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ValueKind::Exact => "exact",
            ValueKind::Estimate => "estimate",
            ValueKind::Bound => "bound",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaggedValue {
    pub kind: ValueKind,
    pub value: f64,
    pub vacuous: bool,
}

/// `ε_{N,n}`: exact for `n <= 2`, the geometric bound otherwise.
pub fn epsilon_value(params: ExpansionParams, n: u32) -> Result<TaggedValue> {
    match n {
        0 => Err(Error::Config("n must be at least 1".into())),
        1 => Ok(exact(epsilon1_exact(params))),
        2 => Ok(exact(epsilon2_exact(params))),
        _ => {
            let b = epsilon_bound(params, n)?;
            Ok(TaggedValue {
                kind: ValueKind::Bound,
                value: b.value,
                vacuous: b.vacuous,
            })
        }
    }
}

fn exact(value: f64) -> TaggedValue {
    TaggedValue {
        kind: ValueKind::Exact,
        value,
        vacuous: false,
    }
}

/// `ψ_{ρ_N}(n)`, which equals `ε_{N,n}`.
pub fn psi_rho_values(params: ExpansionParams, n: u32) -> Result<TaggedValue> {
    epsilon_value(params, n)
}

/// `(ε_n + ε_{n+1}) / (1 - ε_{n+1})`, an upper bound on `ψ_{ρ^t_N}(n)` for every `t`.
///
/// Exact ε are used where known and upper bounds elsewhere; the expression
/// is increasing in both. Flagged vacuous if `ε_{n+1} >= 1` or the value exceeds 1.
pub fn psi_t_bound(params: ExpansionParams, n: u32) -> Result<TaggedValue> {
    let a = epsilon_value(params, n)?;
    let b = epsilon_value(params, n + 1)?;
    let kind = if a.kind == ValueKind::Exact && b.kind == ValueKind::Exact {
        ValueKind::Exact
    } else {
        ValueKind::Bound
    };
    if b.value >= 1.0 {
        return Ok(TaggedValue {
            kind: ValueKind::Bound,
            value: f64::INFINITY,
            vacuous: true,
        });
    }
    let v = (a.value + b.value) / (1.0 - b.value);
    Ok(TaggedValue {
        kind,
        value: v,
        vacuous: !(v < 1.0),
    })
}

/// `L K δ c^{n-2} (1 + c) / (1 - L K δ c^{n-1})` for `n >= 2`, the closed form
/// obtained by inserting the geometric ε bounds for both arguments.
pub fn psi_t_bound_geometric(params: ExpansionParams, n: u32) -> Result<BoundValue> {
    let a = epsilon_bound(params, n)?;
    let b = epsilon_bound(params, n + 1)?;
    if b.value >= 1.0 {
        return Ok(BoundValue {
            value: f64::INFINITY,
            vacuous: true,
        });
    }
    Ok(BoundValue::new((a.value + b.value) / (1.0 - b.value)))
}

/// Grid estimate of `ε_{N,n} = sup_{t,x} |f^t_{n-1}(x)/ν_N(x) - 1|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonEstimate {
    pub n: u32,
    /// Lattice maximum of the nominal deviation.
    pub estimate: f64,
    /// Certified enclosure of the supremum over the whole square.
    pub certified: Bounds,
}

impl EpsilonEstimate {
    /// Distance from the estimate to the far end of the enclosure.
    pub fn slack(&self) -> f64 {
        (self.certified.upper - self.estimate).max(self.estimate - self.certified.lower)
    }
}

/// Laws with more atoms are coarsened before density evaluation.
const DENSITY_ATOMS: usize = 20_000;
const DENSITY_CELL: f64 = 1e-4;

/// Lattice estimate of `ε_{N,n}` on `t_grid × x_grid` (both sorted, covering `[0, 1]`).
///
/// The certified upper end extends the lattice to the square using
/// log-Lipschitz bounds on the ratio in `t` and `x`.
pub fn epsilon_prime_estimate(
    params: ExpansionParams,
    n: u32,
    t_grid: &[f64],
    x_grid: &[f64],
    settings: &PropagationSettings,
) -> Result<EpsilonEstimate> {
    if n == 0 {
        return Err(Error::Config("n must be at least 1".into()));
    }
    check_grid(t_grid, "t grid")?;
    check_grid(x_grid, "x grid")?;
    let nf = params.nf();
    let l = params.log_ratio();
    let ct = 1.0 / (nf - 1.0);
    let cx = 2.0 / (nf - 1.0) - 1.0 / nf;
    let half_gap = |g: &[f64], k: usize| {
        let left = if k > 0 { g[k] - g[k - 1] } else { 0.0 };
        let right = if k + 1 < g.len() {
            g[k + 1] - g[k]
        } else {
            0.0
        };
        0.5 * left.max(right)
    };

    let rows: Vec<(f64, f64, f64)> = t_grid
        .par_iter()
        .enumerate()
        .map(|(ti, &t)| -> Result<(f64, f64, f64)> {
            let mut dist = AtomicDistribution::at_level(params, t, n - 1, settings)?;
            if dist.atoms.len() > DENSITY_ATOMS {
                dist = dist.coarsened(DENSITY_CELL);
            }
            let mut nominal: f64 = 0.0;
            let mut lower: f64 = 0.0;
            let mut upper: f64 = 0.0;
            for (xi, &x) in x_grid.iter().enumerate() {
                let scale = l * (x + nf - 1.0);
                let d = dist.f_density(x);
                let (r_lo, r_hi) = (d.lower * scale, d.upper * scale);
                nominal = nominal.max((dist.f_density_nominal(x) * scale - 1.0).abs());
                lower = lower.max(Bounds::new(r_lo, r_hi).distance_to(1.0));
                let spread = (ct * half_gap(t_grid, ti) + cx * half_gap(x_grid, xi)).exp();
                upper = upper.max(r_hi * spread - 1.0).max(1.0 - r_lo / spread);
            }
            Ok((nominal, lower, upper))
        })
        .collect::<Result<_>>()?;
    let estimate = rows.iter().map(|r| r.0).fold(0.0, f64::max);
    let lower = rows.iter().map(|r| r.1).fold(0.0, f64::max);
    let upper = rows.iter().map(|r| r.2).fold(0.0, f64::max);
    Ok(EpsilonEstimate {
        n,
        estimate,
        certified: Bounds::new(lower.min(upper), upper),
    })
}

fn check_grid(g: &[f64], what: &str) -> Result<()> {
    let ok = g.len() >= 2
        && g[0] == 0.0
        && *g.last().unwrap() == 1.0
        && g.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{what} must be increasing with at least two points from 0 to 1"
        )))
    }
}

/// Brute-force cylinder estimate of `ψ_{ρ_N}(n)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsiEstimate {
    /// Largest certified deviation over the enumerated pairs; a lower bound on `ψ`.
    pub estimate: f64,
    /// Largest deviation computed from truncated sums alone.
    pub nominal: f64,
    /// `ρ_N` mass of intermediate blocks containing a digit above the cap.
    pub gap_mass: f64,
}

/// `ρ_N` mass of the image of `[a, 1]` under a branch composition.
fn image_mass(g: &InvariantMeasure, c: &BranchComposition, a: f64) -> f64 {
    let lo = c.eval(a);
    let w = c.span(a, 1.0);
    (w / (lo + g.params().nf() - 1.0)).ln_1p() * g.normalizer()
}

fn blocks(params: ExpansionParams, len: u32, cap: u64) -> Vec<Vec<u64>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|b| {
                (params.min_digit()..=cap).map(move |d| {
                    let mut c = b.clone();
                    c.push(d);
                    c
                })
            })
            .collect();
    }
    out
}

/// Compare `ρ_N(A ∩ B)` with `ρ_N(A) ρ_N(B)` for every rank-`k` cylinder `A`
/// and every event `B = {(a_{k+n}, ..., a_{k+n+l-1}) = j}`, digits up to `cap`.
///
/// `ρ_N(A ∩ B)` sums over intermediate blocks with digits up to `cap`. The
/// missing intermediate mass is at most `ρ_N(A ∩ {some intermediate digit >
/// cap})` times `Π max_s P_{N,j_k}(s)`; the reported estimate is the largest
/// distance from 1 to the resulting ratio interval.
pub fn psi_bruteforce(
    params: ExpansionParams,
    n: u32,
    k: u32,
    l: u32,
    cap: u64,
) -> Result<PsiEstimate> {
    if n == 0 || k == 0 || l == 0 {
        return Err(Error::Config("n, k and l must be at least 1".into()));
    }
    if cap < params.min_digit() {
        return Err(Error::Config(format!("digit cap {cap} is below N")));
    }
    let g = InvariantMeasure::new(params);
    let id = BranchComposition::identity(params);
    let cut = 1.0 - params.nf() / (cap as f64 + 1.0);

    let compose = |c: &BranchComposition, digits: &[u64]| {
        let mut c = *c;
        for &d in digits {
            c.push(d);
        }
        c
    };
    let bs: Vec<(Vec<u64>, f64, f64)> = blocks(params, l, cap)
        .into_iter()
        .map(|b| {
            let mass = image_mass(&g, &compose(&id, &b), 0.0);
            let peak: f64 = b.iter().map(|&j| max_transition(params, j)).product();
            (b, mass, peak)
        })
        .collect();
    if let Some(b) = bs.iter().find(|b| !(b.1 > 1e-300)) {
        return Err(Error::Underflow { mass: b.1 });
    }
    let a_blocks = blocks(params, k, cap);
    let mids = blocks(params, n - 1, cap);

    let per_a: Vec<Result<(f64, f64)>> = a_blocks
        .par_iter()
        .map(|a| {
            let ca = compose(&id, a);
            let ma = image_mass(&g, &ca, 0.0);
            if !(ma > 1e-300) {
                return Err(Error::Underflow { mass: ma });
            }
            let mut joint = vec![0.0; bs.len()];
            for mid in &mids {
                let cm = compose(&ca, mid);
                for (jb, (b, _, _)) in bs.iter().enumerate() {
                    joint[jb] += image_mass(&g, &compose(&cm, b), 0.0);
                }
            }
            let gap = overflow_mass(&g, &ca, n - 1, cap, cut);
            let mut best: f64 = 0.0;
            let mut nominal: f64 = 0.0;
            for (jb, (_, mb, peak)) in bs.iter().enumerate() {
                let denom = ma * mb;
                let lo = joint[jb] / denom;
                let hi = (joint[jb] + gap * peak) / denom;
                nominal = nominal.max((lo - 1.0).abs());
                best = best.max(Bounds::new(lo, hi).distance_to(1.0));
            }
            Ok((best, nominal))
        })
        .collect();
    let mut estimate: f64 = 0.0;
    let mut nominal: f64 = 0.0;
    for r in per_a {
        let (e, nm) = r?;
        estimate = estimate.max(e);
        nominal = nominal.max(nm);
    }
    Ok(PsiEstimate {
        estimate,
        nominal,
        gap_mass: (n - 1) as f64 * (1.0 - g.cdf(cut)),
    })
}

/// `ρ_N` mass of the points of `c([0,1])` whose next `depth` digits include one above the cap.
fn overflow_mass(
    g: &InvariantMeasure,
    c: &BranchComposition,
    depth: u32,
    cap: u64,
    cut: f64,
) -> f64 {
    if depth == 0 {
        return 0.0;
    }
    let mut total = image_mass(g, c, cut);
    if depth > 1 {
        for d in g.params().min_digit()..=cap {
            total += overflow_mass(g, &c.then(d), depth - 1, cap, cut);
        }
    }
    total
}

/// `max_{s ∈ [0,1]} P_{N,j}(s)`.
fn max_transition(params: ExpansionParams, j: u64) -> f64 {
    let a = (j + 1 - params.min_digit()) as f64;
    // P_{N,j} increases up to 1 - N + √(a(a-1)) and decreases after
    let peak = (1.0 - params.nf() + (a * (a - 1.0)).sqrt()).clamp(0.0, 1.0);
    crate::chain::prob(params, j, peak)
}

/// Extended-process estimate and the agreement between the two ways of computing it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtendedEstimate {
    /// Largest `|ρ̄_N(A × B)/(ρ_N(A) ρ_N(B)) - 1|` over the families.
    pub estimate: f64,
    /// Largest difference between the quadrature and cylinder-sum values of `ρ̄_N(A × B)`.
    pub dual_discrepancy: f64,
    /// Mass left out by the digit cap (zero for `n = 1`).
    pub truncation: f64,
}

/// `sup |ρ̄_N(A × B)/(ρ_N(A) ρ_N(B)) - 1|` with `A = R_N^{-(n-1)}(A₀)` in the
/// future coordinate and `B` in the past coordinate.
///
/// `ρ̄_N(A × B) = ∫_B ρ^u_N(A) ρ_N(du)` is integrated with adaptive Simpson,
/// using the level-`(n-1)` law of the chain started at `u`. The same quantity
/// is also summed as `Σ ρ̄_N(u_block(A₀) × B)` over admissible blocks with
/// digits up to `settings.digit_cap`, in closed form.
pub fn psi_extended_estimate(
    params: ExpansionParams,
    n: u32,
    a_family: &[Interval],
    b_family: &[Interval],
    settings: &PropagationSettings,
    tol: f64,
    budget: usize,
) -> Result<ExtendedEstimate> {
    if n == 0 {
        return Err(Error::Config("n must be at least 1".into()));
    }
    let g = InvariantMeasure::new(params);
    let ext = ExtendedMeasure::new(params);
    let cap = settings.digit_cap;
    let truncation = if n == 1 {
        0.0
    } else {
        (n - 1) as f64 * (1.0 - g.cdf(1.0 - params.nf() / (cap as f64 + 1.0)))
    };
    let mids: Vec<BranchComposition> = blocks(params, n - 1, cap)
        .into_iter()
        .map(|b| {
            let mut c = BranchComposition::identity(params);
            for d in b {
                c.push(d);
            }
            c
        })
        .collect();
    let pairs: Vec<(Interval, Interval)> = a_family
        .iter()
        .flat_map(|&a| b_family.iter().map(move |&b| (a, b)))
        .collect();

    let results: Vec<Result<(f64, f64)>> = pairs
        .par_iter()
        .map(|&(a0, b)| {
            let integrand = |u: f64| -> f64 {
                let mass = if n == 1 {
                    let c = ConditionalMeasure::new(params, u).expect("u in [0,1]");
                    c.cdf(a0.hi) - c.cdf(a0.lo)
                } else {
                    match AtomicDistribution::at_level(params, u, n - 1, settings) {
                        Ok(d) => d.f_cdf_nominal(a0.hi) - d.f_cdf_nominal(a0.lo),
                        Err(_) => f64::NAN,
                    }
                };
                g.density(u) * mass
            };
            let primary = adaptive_simpson(integrand, b.lo, b.hi, tol, budget)?;
            if !primary.is_finite() {
                return Err(Error::QuadratureBudget { budget });
            }
            let dual: f64 = mids
                .iter()
                .map(|c| {
                    let lo = c.eval(a0.lo);
                    let hi = lo + c.span(a0.lo, a0.hi);
                    ext.rho_bar_rect(Interval { lo, hi }, b)
                })
                .sum();
            let denom = g.mass(a0) * g.mass(b);
            let ratio = primary / denom;
            Ok(((ratio - 1.0).abs(), (primary - dual).abs()))
        })
        .collect();
    let mut estimate: f64 = 0.0;
    let mut discrepancy: f64 = 0.0;
    for r in results {
        let (e, d) = r?;
        estimate = estimate.max(e);
        discrepancy = discrepancy.max(d);
    }
    Ok(ExtendedEstimate {
        estimate,
        dual_discrepancy: discrepancy,
        truncation,
    })
}

/// Dyadic intervals `[j 2^{-m}, (j+1) 2^{-m})` for `1 <= m <= depth`.
pub fn dyadic_family(depth: u32) -> Vec<Interval> {
    (1..=depth)
        .flat_map(|m| {
            let k = 1u32 << m;
            (0..k).map(move |j| Interval {
                lo: j as f64 / k as f64,
                hi: (j + 1) as f64 / k as f64,
            })
        })
        .collect()
}

/// One line of a [`MixingReport`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixingRow {
    pub n: u32,
    pub quantity: MixingQuantity,
    pub kind: ValueKind,
    pub value: f64,
    pub slack: f64,
    pub vacuous: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixingQuantity {
    /// `ε_{N,n}`
    Epsilon,
    /// `ψ_{ρ^t_N}(n)`, uniformly in `t`
    PsiT,
    /// `ψ_{ρ_N}(n)`
    PsiRho,
    /// Brute-force cylinder estimate of `ψ_{ρ_N}(n)`
    PsiCylinder,
}

impl MixingQuantity {
    pub fn as_str(&self) -> &'static str {
        match self {
            MixingQuantity::Epsilon => "epsilon",
            MixingQuantity::PsiT => "psi_t",
            MixingQuantity::PsiRho => "psi_rho",
            MixingQuantity::PsiCylinder => "psi_cylinder",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct MixingReport {
    pub params: ExpansionParams,
    pub K: f64,
    pub rows: Vec<MixingRow>,
}

/// What to compute for a [`MixingReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingConfig {
    pub n_max: u32,
    /// Points per axis of the `(t, x)` lattice; no estimates when `None`.
    pub grid: Option<usize>,
    /// Largest `n` for the lattice estimates.
    pub estimate_n_max: u32,
    pub settings: PropagationSettings,
    /// Digit cap for the brute-force estimates; skipped when `None`.
    pub bruteforce_cap: Option<u64>,
}

impl Default for MixingConfig {
    fn default() -> Self {
        MixingConfig {
            n_max: 6,
            grid: Some(101),
            estimate_n_max: 3,
            settings: PropagationSettings {
                tail: TailPolicy::Lump { width: 1e-4 },
                resolution: Resolution::Auto {
                    width: 1e-4,
                    exact_limit: 1_000_000,
                },
                ..Default::default()
            },
            bruteforce_cap: Some(40),
        }
    }
}

impl MixingReport {
    pub fn build(params: ExpansionParams, cfg: &MixingConfig) -> Result<Self> {
        if cfg.n_max == 0 {
            return Err(Error::Config("n_max must be at least 1".into()));
        }
        let mut rows = Vec::new();
        let row = |n, quantity, v: TaggedValue| MixingRow {
            n,
            quantity,
            kind: v.kind,
            value: v.value,
            slack: 0.0,
            vacuous: v.vacuous,
        };
        for n in 1..=cfg.n_max {
            let eps = epsilon_value(params, n)?;
            rows.push(row(n, MixingQuantity::Epsilon, eps));
            rows.push(row(n, MixingQuantity::PsiRho, psi_rho_values(params, n)?));
            rows.push(row(n, MixingQuantity::PsiT, psi_t_bound(params, n)?));
        }
        if let Some(points) = cfg.grid {
            let grid = crate::levy::uniform_grid(points);
            for n in 1..=cfg.estimate_n_max.min(cfg.n_max) {
                let e = epsilon_prime_estimate(params, n, &grid, &grid, &cfg.settings)?;
                rows.push(MixingRow {
                    n,
                    quantity: MixingQuantity::Epsilon,
                    kind: ValueKind::Estimate,
                    value: e.estimate,
                    slack: e.slack(),
                    vacuous: false,
                });
            }
        }
        if let Some(cap) = cfg.bruteforce_cap {
            for n in 1..=2.min(cfg.n_max) {
                let e = psi_bruteforce(params, n, 1, 1, cap)?;
                rows.push(MixingRow {
                    n,
                    quantity: MixingQuantity::PsiCylinder,
                    kind: ValueKind::Estimate,
                    value: e.estimate,
                    slack: e.gap_mass,
                    vacuous: false,
                });
            }
        }
        Ok(MixingReport {
            params,
            K: K_const(params),
            rows,
        })
    }

    /// Rows whose value exceeds a known exact value or bound for the same `n`
    /// beyond their slack.
    pub fn dominance_violations(&self) -> Vec<MixingRow> {
        let limit = |n: u32| {
            self.rows
                .iter()
                .filter(|r| {
                    r.n == n
                        && r.quantity == MixingQuantity::Epsilon
                        && r.kind != ValueKind::Estimate
                })
                .map(|r| r.value)
                .fold(f64::INFINITY, f64::min)
        };
        self.rows
            .iter()
            .filter(|r| r.kind == ValueKind::Estimate)
            .filter(|r| r.value - r.slack > limit(r.n) + 1e-12)
            .copied()
            .collect()
    }
}
