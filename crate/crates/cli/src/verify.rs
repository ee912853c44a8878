//! Invariant suites run by `renyi-mix verify`.
//!
//! Each suite computes its worst residual against a fixed tolerance. Suites
//! are deterministic given the seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use renyi_mix::chain::{self, AtomicDistribution, PropagationSettings, Resolution, TailPolicy};
use renyi_mix::levy::{self, FGrid, Quantity};
use renyi_mix::mixing;
use renyi_mix::{
    ConditionalMeasure, DigitBlock, Error, ExpansionParams, ExtendedMeasure, Interval,
    InvariantMeasure, SquarePoint,
};

pub const SUITES: [&str; 15] = [
    "expansion",
    "extension",
    "measures",
    "kernel",
    "cylinders",
    "bbl",
    "monte_carlo",
    "stationarity",
    "cdf_relation",
    "constants",
    "levy_f_bound",
    "levy_g_bound",
    "mixing_exact",
    "mixing_bruteforce",
    "mixing_extended",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub suite: String,
    pub status: Status,
    pub worst_residual: f64,
    pub tolerance: f64,
}

type Outcome = Result<(f64, f64), Error>;

fn p(n: u32) -> ExpansionParams {
    ExpansionParams::new(n).expect("N >= 2")
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Run every suite in order. `fault` names a suite whose computed values are
/// perturbed before comparison.
pub fn run_all(seed: u64, fault: Option<&str>) -> Result<Vec<SuiteResult>, Error> {
    SUITES
        .iter()
        .enumerate()
        .map(|(k, &name)| {
            let shift = if fault == Some(name) { 1e-2 } else { 0.0 };
            let (residual, tolerance) = run_suite(name, seed, k as u64, shift)?;
            Ok(SuiteResult {
                suite: name.to_string(),
                status: if residual <= tolerance {
                    Status::Pass
                } else {
                    Status::Fail
                },
                worst_residual: residual,
                tolerance,
            })
        })
        .collect()
}

fn run_suite(name: &str, seed: u64, stream: u64, shift: f64) -> Outcome {
    let mut r = rng(seed, stream);
    match name {
        "expansion" => expansion(&mut r, shift),
        "extension" => extension(&mut r, shift),
        "measures" => measures(shift),
        "kernel" => kernel(shift),
        "cylinders" => cylinders(shift),
        "bbl" => bbl(&mut r, shift),
        "monte_carlo" => monte_carlo(seed, shift),
        "stationarity" => stationarity(shift),
        "cdf_relation" => cdf_relation(shift),
        "constants" => constants(shift),
        "levy_f_bound" => levy_bound(Quantity::F, shift),
        "levy_g_bound" => levy_bound(Quantity::G, shift),
        "mixing_exact" => mixing_exact(shift),
        "mixing_bruteforce" => mixing_bruteforce(shift),
        "mixing_extended" => mixing_extended(shift),
        other => Err(Error::Config(format!("unknown suite `{other}`"))),
    }
}

/// Digits followed by reconstruction returns the starting point.
fn expansion(r: &mut ChaCha8Rng, shift: f64) -> Outcome {
    let mut worst: f64 = 0.0;
    for n in [2, 3, 5, 10] {
        let params = p(n);
        for _ in 0..1000 {
            let x: f64 = r.gen();
            let e = params.digits_of(x, 12)?;
            let back = e.block.eval_forward(e.remainder) + shift;
            worst = worst.max((back - x).abs());
            let cyl = e.block.cylinder_interval();
            worst = worst.max((cyl.lo - x).max(x - cyl.hi));
        }
    }
    Ok((worst, 1e-12))
}

/// The natural extension and its inverse undo each other.
fn extension(r: &mut ChaCha8Rng, shift: f64) -> Outcome {
    let mut worst: f64 = 0.0;
    for n in [2, 3, 7] {
        let params = p(n);
        for _ in 0..2000 {
            let q = SquarePoint::new(r.gen(), r.gen())?;
            let back = params.extension_inverse(params.extension_step(q)?)?;
            // y passes through u_d, whose slope N/(y+d)^2 loses digits for large d
            let d = params.first_digit(q.x)? as f64;
            let cond = ((q.y + d).powi(2) / params.nf()).max(1.0);
            worst = worst
                .max((back.x + shift - q.x).abs())
                .max((back.y - q.y).abs() / cond);
        }
    }
    Ok((worst, 1e-12))
}

/// Preimage decomposition of `ρ_N` and cdf/density consistency.
fn measures(shift: f64) -> Outcome {
    let mut worst: f64 = 0.0;
    for n in [2, 3, 5] {
        let params = p(n);
        let g = InvariantMeasure::new(params);
        let l = params.log_ratio();
        let m = 2000u64;
        for k in 0..=50 {
            let x = k as f64 / 50.0;
            let mut sum = 0.0;
            for i in params.min_digit()..=m {
                let fi = i as f64;
                sum += (x / ((x + fi) * (fi - 1.0))).ln_1p() / l;
            }
            sum += (x / m as f64).ln_1p() / l;
            worst = worst.max((sum + shift - g.rho_cdf(x)?).abs());
        }
        let h = 1e-5;
        for k in 1..20 {
            let x = k as f64 / 20.0;
            let fd = (g.rho_cdf(x + h)? - g.rho_cdf(x - h)?) / (2.0 * h);
            worst = worst.max((fd - g.rho_density(x)?).abs() * 1e-2);
            let c = ConditionalMeasure::new(params, 0.3)?;
            let fd = (c.rho_t_cdf(x + h)? - c.rho_t_cdf(x - h)?) / (2.0 * h);
            worst = worst.max((fd - c.rho_t_density(x)?).abs() * 1e-2);
        }
    }
    // finite differences are compared at 1e-6, the decomposition at 1e-8
    Ok((worst, 1e-8))
}

/// Partial sums of the kernel plus the closed-form tail equal 1.
fn kernel(shift: f64) -> Outcome {
    let mut worst: f64 = 0.0;
    for n in [2, 3, 6] {
        let params = p(n);
        for k in 0..=10 {
            let s = k as f64 / 10.0;
            let mut partial = 0.0;
            for j in params.min_digit()..=10_000 {
                partial += chain::transition_prob(params, j, s)?;
                if j % 997 == 0 || j == 10_000 {
                    let total = partial + chain::transition_tail(params, j, s)? + shift;
                    worst = worst.max((total - 1.0).abs());
                }
            }
        }
    }
    Ok((worst, 1e-13))
}

/// Block probabilities equal `ρ^t_N` masses of cylinders.
fn cylinders(shift: f64) -> Outcome {
    let mut worst: f64 = 0.0;
    for n in [2, 3] {
        let params = p(n);
        let digits: Vec<u64> = (params.min_digit()..=12).collect();
        let mut blocks: Vec<Vec<u64>> = digits.iter().map(|&d| vec![d]).collect();
        for len in 2..=3 {
            let step: Vec<Vec<u64>> = blocks
                .iter()
                .filter(|b| b.len() == len - 1)
                .flat_map(|b| {
                    digits.iter().step_by(2).map(move |&d| {
                        let mut c = b.clone();
                        c.push(d);
                        c
                    })
                })
                .collect();
            blocks.extend(step);
        }
        for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
            for b in &blocks {
                let block = DigitBlock::new(params, b.clone())?;
                let bp = chain::block_probability(params, t, &block)?;
                let (lo, w) = block.mobius().image();
                // width kept separate so the difference of endpoints is not rounded
                let d = |y: f64| (params.nf() - 1.0 + t) + y * (1.0 - t);
                let mass = params.nf() * w * (params.nf() - 1.0 + t) / (d(lo) * d(lo + w));
                worst = worst.max((bp * (1.0 + shift) - mass).abs() / mass);
            }
        }
    }
    Ok((worst, 1e-11))
}

/// Conditional-law identity on random cylinders.
fn bbl(r: &mut ChaCha8Rng, shift: f64) -> Outcome {
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let n = r.gen_range(2..=6u32);
        let params = p(n);
        let len = r.gen_range(1..=4);
        let digits: Vec<u64> = (0..len)
            .map(|_| params.min_digit() + r.gen_range(0..30))
            .collect();
        let block = DigitBlock::new(params, digits)?;
        let t: f64 = r.gen();
        let x: f64 = r.gen();
        worst = worst.max(chain::verify_bbl(params, &block, t, x)? + shift);
    }
    Ok((worst, 1e-10))
}

fn fine_settings() -> PropagationSettings {
    PropagationSettings {
        tail: TailPolicy::Lump { width: 1e-4 },
        resolution: Resolution::Auto {
            width: 1e-5,
            exact_limit: 1_000_000,
        },
        ..Default::default()
    }
}

/// Simulated chain against the propagated law (N=2, t=0, four steps).
fn monte_carlo(seed: u64, shift: f64) -> Outcome {
    let params = p(2);
    let dist = AtomicDistribution::at_level(params, 0.0, 4, &fine_settings())?;
    let mut samples = chain::simulate(params, 0.0, 4, 1_000_000, seed)?;
    let ks = dist.ks_distance(&mut samples) + shift;
    Ok((ks, 0.002 + dist.discarded_mass))
}

/// One step from a quantile discretisation of `ρ_N` stays close to `G_N`.
fn stationarity(shift: f64) -> Outcome {
    let mut worst: f64 = 0.0;
    for n in [2, 4] {
        let params = p(n);
        let g = InvariantMeasure::new(params);
        let k = 10_000;
        let pts: Vec<(f64, f64)> = (0..k)
            .map(|j| (g.quantile((j as f64 + 0.5) / k as f64), 1.0 / k as f64))
            .collect();
        let d0 = AtomicDistribution::from_points(params, 0.0, 0, &pts)?;
        let d1 = d0.propagate(&fine_settings())?;
        for j in 0..=1000 {
            let s = j as f64 / 1000.0;
            let b = d1.g_cdf(s);
            worst = worst.max(b.distance_to(g.rho_cdf(s)? + shift) - d1.discarded_mass);
        }
    }
    Ok((worst, 1e-3))
}

/// `F` at level n and `G` at level n+1 agree at the points `1 - N/(i+1)`.
fn cdf_relation(shift: f64) -> Outcome {
    let mut worst: f64 = 0.0;
    let params = p(2);
    let settings = fine_settings();
    for t in [0.0, 0.5] {
        let mut d = AtomicDistribution::initial(params, t)?;
        for _ in 0..=3 {
            let next = d.propagate(&settings)?;
            for i in 2..=20u64 {
                let x = 1.0 - params.nf() / (i as f64 + 1.0);
                let f = d.f_cdf(x);
                let g = next.g_cdf(x);
                let gap = (f.lower - g.upper).max(g.lower - f.upper).max(0.0);
                worst = worst.max(gap + shift);
            }
            d = next;
        }
    }
    Ok((worst, 1e-12))
}

/// Closed-form constants against independent evaluations.
fn constants(shift: f64) -> Outcome {
    let mut pairs = Vec::new();
    let mut check = |a: f64, b: f64| pairs.push((a, b));
    let r2 = 2f64.sqrt();
    check(levy::beta_const(p(2)) + shift, 3.0 - 2.0 * r2);
    check(
        levy::delta_const(p(2)),
        2.0 / 3.0 - (4.0f64 / 3.0).ln() / 2f64.ln(),
    );
    check(levy::rate_const(p(2)), 9.0 - 1.0 / 6.0 - 6.0 * r2);
    check(mixing::K_const(p(2)), 7.55);
    for n in 2..=6 {
        let params = p(n);
        let grid_sup = (0..=100_000)
            .map(|k| {
                let x = k as f64 / 100_000.0;
                x * (1.0 - x) / (params.nf() - 1.0 + x)
            })
            .fold(0.0, f64::max);
        check(grid_sup, levy::beta_const(params));
        let (found, _, _) = levy::sup_beta_kernel_search(params, 200, 1000);
        check(found, levy::sup_beta_kernel(params));
    }
    let worst = pairs.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok((worst, 1e-9))
}

/// Certified cdf distances against the geometric bounds on a small grid.
fn levy_bound(quantity: Quantity, shift: f64) -> Outcome {
    let settings = PropagationSettings {
        tail: TailPolicy::Lump { width: 1e-4 },
        resolution: Resolution::Auto {
            width: 1e-4,
            exact_limit: 1_000_000,
        },
        ..Default::default()
    };
    let mut worst = f64::NEG_INFINITY;
    for n in [2, 3] {
        let rep = levy::verify_geometric_bounds(
            p(n),
            &levy::uniform_grid(5),
            4,
            &settings,
            FGrid::default(),
        )?;
        for c in rep.cells.iter().filter(|c| c.quantity == quantity) {
            worst = worst.max(c.observed.upper + shift - c.bound);
        }
    }
    Ok((worst, 0.0))
}

/// Exact ε values against lattice estimates.
fn mixing_exact(shift: f64) -> Outcome {
    let params = p(2);
    let grid = levy::uniform_grid(21);
    let s = PropagationSettings::default().with_tail(TailPolicy::Lump { width: 1e-4 });
    let e1 = mixing::epsilon_prime_estimate(params, 1, &grid, &grid, &s)?;
    let e2 = mixing::epsilon_prime_estimate(params, 2, &grid, &grid, &s)?;
    let worst = (e1.estimate + shift - mixing::epsilon1_exact(params))
        .abs()
        .max((e2.estimate - mixing::epsilon2_exact(params)).abs());
    let psi = (mixing::psi_t_bound(params, 1)?.value - 0.6123).abs();
    Ok((worst.max(psi * 1e-3), 1e-4))
}

/// Cylinder lower bounds stay below the exact coefficients.
fn mixing_bruteforce(shift: f64) -> Outcome {
    let params = p(2);
    let mut worst = f64::NEG_INFINITY;
    for (n, exact) in [
        (1, mixing::epsilon1_exact(params)),
        (2, mixing::epsilon2_exact(params)),
    ] {
        let e = mixing::psi_bruteforce(params, n, 1, 1, 40)?;
        worst = worst.max(e.estimate + shift - exact);
    }
    Ok((worst, 0.0))
}

/// The quadrature and cylinder-sum values of `ρ̄_N(A × B)` coincide.
fn mixing_extended(shift: f64) -> Outcome {
    let params = p(2);
    let fam = mixing::dyadic_family(2);
    let mut worst: f64 = 0.0;
    for n in 1..=2 {
        let s = PropagationSettings::exact(100);
        let e = mixing::psi_extended_estimate(params, n, &fam, &fam, &s, 1e-11, 200_000)?;
        worst = worst.max(e.dual_discrepancy + shift);
    }
    let ext = ExtendedMeasure::new(params);
    worst = worst.max((ext.rho_bar_rect(Interval::UNIT, Interval::UNIT) - 1.0).abs());
    Ok((worst, 1e-8))
}
