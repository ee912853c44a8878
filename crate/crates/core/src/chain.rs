//! The past-state Markov chain `s_n = 1 - N/(a_n + s_{n-1})`.
//!
//! Transition probabilities, exact and binned propagation of the law of
//! `s_n` with certified error bookkeeping, the induced distribution of
//! `R_N^n`, Monte Carlo simulation, and the conditional-law identity for
//! cylinders.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::Bounds;
use crate::error::{check_unit, Error, Result};
use crate::expansion::{DigitBlock, ExpansionParams};
use crate::measures::ConditionalMeasure;

/// `P_{N,i}(s) = (s + N - 1) / ((s + i)(s + i - 1))`.
pub fn transition_prob(params: ExpansionParams, i: u64, s: f64) -> Result<f64> {
    params.check_digit(i)?;
    check_unit("s", s)?;
    Ok(prob(params, i, s))
}

#[inline]
pub(crate) fn prob(params: ExpansionParams, i: u64, s: f64) -> f64 {
    let i = i as f64;
    (s + params.nf() - 1.0) / ((s + i) * (s + i - 1.0))
}

/// `Σ_{i > j} P_{N,i}(s) = (s + N - 1)/(s + j)`.
pub fn transition_tail(params: ExpansionParams, j: u64, s: f64) -> Result<f64> {
    if j + 1 < params.min_digit() {
        return Err(Error::Domain {
            what: "j",
            value: j as f64,
            expected: "j >= N - 1",
        });
    }
    check_unit("s", s)?;
    Ok(tail(params, j, s))
}

#[inline]
pub(crate) fn tail(params: ExpansionParams, j: u64, s: f64) -> f64 {
    (s + params.nf() - 1.0) / (s + j as f64)
}

/// Smallest digit `i >= N` with `1 - (s+N-1)/(s+i) > u`.
pub fn sample_digit(params: ExpansionParams, s: f64, u: f64) -> u64 {
    let n = params.min_digit();
    let c = s + params.nf() - 1.0;
    // 1 - c/(s+i) > u  <=>  i > c/(1-u) - s
    let guess = c / (1.0 - u) - s;
    let mut i = if guess.is_finite() && guess < 1e18 {
        (guess.floor() as u64 + 1).max(n)
    } else {
        return u64::MAX;
    };
    let below = |i: u64| 1.0 - tail(params, i, s) > u;
    while i > n && below(i - 1) {
        i -= 1;
    }
    while !below(i) {
        i += 1;
    }
    i
}

/// One trajectory of the chain started at `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub params: ExpansionParams,
    pub t: f64,
    pub s: f64,
    pub step: u64,
}

impl ChainState {
    pub fn start(params: ExpansionParams, t: f64) -> Result<Self> {
        check_unit("t", t)?;
        Ok(ChainState {
            params,
            t,
            s: t,
            step: 0,
        })
    }

    /// Deterministic update with digit `i`.
    pub fn chain_step(self, i: u64) -> Result<Self> {
        self.params.check_digit(i)?;
        Ok(self.advance(i))
    }

    #[inline]
    fn advance(self, i: u64) -> Self {
        ChainState {
            s: self.params.branch(i, self.s),
            step: self.step + 1,
            ..self
        }
    }

    /// Step driven by a given uniform variate; returns the digit drawn.
    pub fn step_with_uniform(self, u: f64) -> (u64, Self) {
        let i = sample_digit(self.params, self.s, u);
        (i, self.advance(i))
    }

    pub fn sample_step<R: Rng + ?Sized>(self, rng: &mut R) -> Self {
        self.step_with_uniform(rng.gen::<f64>()).1
    }
}

/// Paths simulated per random stream.
const PATHS_PER_STREAM: usize = 1 << 14;

/// Final states of `paths` independent trajectories of length `steps`.
///
/// Paths are split into fixed blocks, each driven by its own ChaCha stream
/// derived from `seed`, so the output does not depend on the thread count.
pub fn simulate(
    params: ExpansionParams,
    t: f64,
    steps: usize,
    paths: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let start = ChainState::start(params, t)?;
    let blocks = paths.div_ceil(PATHS_PER_STREAM);
    let out: Vec<Vec<f64>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let len = PATHS_PER_STREAM.min(paths - b * PATHS_PER_STREAM);
            (0..len)
                .map(|_| {
                    let mut st = start;
                    for _ in 0..steps {
                        st = st.sample_step(&mut rng);
                    }
                    st.s
                })
                .collect()
        })
        .collect();
    Ok(out.concat())
}

/// Product of transition probabilities along `block`, i.e. `ρ^t_N(I(block))`.
pub fn block_probability(params: ExpansionParams, t: f64, block: &DigitBlock) -> Result<f64> {
    check_unit("t", t)?;
    if block.is_empty() {
        return Err(Error::Config("block must be nonempty".into()));
    }
    let mut s = t;
    let mut p = 1.0;
    for &d in block.digits() {
        p *= prob(params, d, s);
        s = params.branch(d, s);
    }
    Ok(p)
}

/// Residual of the conditional-law identity on the cylinder of `block`:
/// `ρ^t([M(0), M(x))) / ρ^t(I(block))` against `N x / (N - (1-x)(1-s))`,
/// where `s = eval_backward(block, t)`.
pub fn verify_bbl(params: ExpansionParams, block: &DigitBlock, t: f64, x: f64) -> Result<f64> {
    check_unit("t", t)?;
    check_unit("x", x)?;
    if block.is_empty() {
        return Err(Error::Config("block must be nonempty".into()));
    }
    let m = block.mobius();
    let c = ConditionalMeasure::new(params, t)?;
    let (lo, width) = m.image();
    let mass = c.mass_between(lo, lo + width);
    if !(mass > 1e-300) {
        return Err(Error::DegenerateCylinder { mass });
    }
    let n = params.nf();
    let d = |y: f64| (n - 1.0 + t) + y * (1.0 - t);
    // ρ^t mass is N(b-a)(N-1+t)/(D(a)D(b)); the common factors cancel.
    let lhs = m.relative_position(x) * d(m.eval(1.0)) / d(m.eval(x));
    let s = block.eval_backward(t);
    let rhs = n * x / (n - (1.0 - x) * (1.0 - s));
    Ok((lhs - rhs).abs())
}

/// A piece of probability mass supported in `[lo, hi]`.
///
/// `moment` is the first moment `∫ s dμ`; point atoms have `lo == hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub lo: f64,
    pub hi: f64,
    pub weight: f64,
    pub moment: f64,
}

impl Atom {
    pub fn point(position: f64, weight: f64) -> Self {
        Atom {
            lo: position,
            hi: position,
            weight,
            moment: weight * position,
        }
    }

    /// Mean position.
    #[inline]
    pub fn position(&self) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            (self.moment / self.weight).clamp(self.lo, self.hi)
        }
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    #[inline]
    fn absorb(&mut self, other: &Atom) {
        self.lo = self.lo.min(other.lo);
        self.hi = self.hi.max(other.hi);
        self.weight += other.weight;
        self.moment += other.moment;
    }
}

/// How digits beyond the cap are handled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TailPolicy {
    /// Tail mass goes to `discarded_mass` (position unknown).
    Discard,
    /// Runs of tail digits whose images span at most `width` become interval atoms.
    Lump { width: f64 },
}

/// Output representation of a propagation step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Resolution {
    /// Every child is kept (up to merging of coincident positions).
    Exact,
    /// Parents and children are aggregated on a grid of the given width.
    Binned { width: f64 },
    /// Exact while the child count stays below `exact_limit`, binned otherwise.
    Auto { width: f64, exact_limit: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropagationSettings {
    pub digit_cap: u64,
    pub weight_floor: f64,
    pub merge_tol: f64,
    pub resolution: Resolution,
    pub tail: TailPolicy,
    pub max_atoms: usize,
}

impl Default for PropagationSettings {
    fn default() -> Self {
        PropagationSettings {
            digit_cap: 400,
            weight_floor: 1e-12,
            merge_tol: 1e-13,
            resolution: Resolution::Auto {
                width: 1e-5,
                exact_limit: 1_000_000,
            },
            tail: TailPolicy::Discard,
            max_atoms: 50_000_000,
        }
    }
}

impl PropagationSettings {
    /// Exact propagation with the given cap, discarding the digit tail.
    pub fn exact(digit_cap: u64) -> Self {
        PropagationSettings {
            digit_cap,
            resolution: Resolution::Exact,
            ..Default::default()
        }
    }

    pub fn with_tail(mut self, tail: TailPolicy) -> Self {
        self.tail = tail;
        self
    }

    pub fn with_resolution(mut self, resolution: Resolution) -> Self {
        self.resolution = resolution;
        self
    }

    pub fn validate(&self, params: ExpansionParams) -> Result<()> {
        if self.digit_cap < params.min_digit() {
            return Err(Error::Config(format!(
                "digit cap {} is below N = {}",
                self.digit_cap,
                params.n()
            )));
        }
        if !(self.weight_floor >= 0.0 && self.weight_floor.is_finite()) {
            return Err(Error::Config("weight floor must be nonnegative".into()));
        }
        if !(self.merge_tol >= 0.0) {
            return Err(Error::Config("merge tolerance must be nonnegative".into()));
        }
        let width_ok = |w: f64| w > 0.0 && w <= 0.5;
        match self.resolution {
            Resolution::Binned { width } | Resolution::Auto { width, .. } if !width_ok(width) => {
                return Err(Error::Config(format!(
                    "bin width {width} must lie in (0, 0.5]"
                )))
            }
            _ => {}
        }
        if let TailPolicy::Lump { width } = self.tail {
            if !width_ok(width) {
                return Err(Error::Config(format!(
                    "lump width {width} must lie in (0, 0.5]"
                )));
            }
        }
        Ok(())
    }
}

/// Per-`N` constants of the error bookkeeping.
#[derive(Debug, Clone, Copy)]
struct ErrorConstants {
    /// Pointwise bound on `Σ_i |P_i''|`.
    mass_curvature: f64,
    /// Pointwise bound on `Σ_i |(u_i P_i)''|`.
    moment_curvature: f64,
    /// Bound on `Σ_i |P_i'|`.
    mass_lipschitz: f64,
    /// Bound on `Σ_i |(u_i P_i)'|`.
    moment_lipschitz: f64,
}

impl ErrorConstants {
    fn new(params: ExpansionParams) -> Self {
        let n = params.nf();
        let m1 = n - 1.0;
        let mass_curvature = 4.0 * n / (m1 * m1);
        ErrorConstants {
            mass_curvature,
            moment_curvature: 2.0 / (n * n) + 4.0 / (n * m1) + mass_curvature,
            mass_lipschitz: 2.0 / m1,
            moment_lipschitz: 1.0 / n + 2.0 / m1,
        }
    }
}

/// The law of `s^t_{N,n}` as interval atoms plus certified error terms.
///
/// The true law equals `Σ μ_j + ζ + δ`, where each `μ_j` is a positive
/// measure on `[lo_j, hi_j]` of mass `weight_j`, `δ` is a positive measure of
/// mass `discarded_mass` with unknown support, and `ζ` is a signed measure of
/// total variation at most `tv_error`. The first moments of the `μ_j` differ
/// from the recorded ones by at most `moment_error` in total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomicDistribution {
    pub params: ExpansionParams,
    pub t: f64,
    pub level: u32,
    pub atoms: Vec<Atom>,
    pub discarded_mass: f64,
    pub tv_error: f64,
    pub moment_error: f64,
}

#[derive(Default)]
struct StepErrors {
    mass: f64,
    moment: f64,
}

impl AtomicDistribution {
    /// The level-0 law: a unit point mass at `t`.
    pub fn initial(params: ExpansionParams, t: f64) -> Result<Self> {
        check_unit("t", t)?;
        Ok(AtomicDistribution {
            params,
            t,
            level: 0,
            atoms: vec![Atom::point(t, 1.0)],
            discarded_mass: 0.0,
            tv_error: 0.0,
            moment_error: 0.0,
        })
    }

    /// Build from explicit point atoms (sorted and merged).
    pub fn from_points(
        params: ExpansionParams,
        t: f64,
        level: u32,
        points: &[(f64, f64)],
    ) -> Result<Self> {
        let mut atoms = Vec::with_capacity(points.len());
        for &(s, w) in points {
            check_unit("position", s)?;
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Domain {
                    what: "weight",
                    value: w,
                    expected: "weight >= 0",
                });
            }
            atoms.push(Atom::point(s, w));
        }
        let total: f64 = atoms.iter().map(|a| a.weight).sum();
        let mut d = AtomicDistribution {
            params,
            t,
            level,
            atoms,
            discarded_mass: (1.0 - total).max(0.0),
            tv_error: 0.0,
            moment_error: 0.0,
        };
        d.sort_and_merge(0.0);
        Ok(d)
    }

    /// The law after `levels` propagation steps from `t`.
    pub fn at_level(
        params: ExpansionParams,
        t: f64,
        levels: u32,
        settings: &PropagationSettings,
    ) -> Result<Self> {
        let mut d = Self::initial(params, t)?;
        for _ in 0..levels {
            d = d.propagate(settings)?;
        }
        Ok(d)
    }

    pub fn total_weight(&self) -> f64 {
        self.atoms.iter().map(|a| a.weight).sum()
    }

    /// Combined uncertainty mass used to widen cdf enclosures.
    pub fn certified_error(&self) -> f64 {
        self.discarded_mass + self.tv_error
    }

    fn sort_and_merge(&mut self, merge_tol: f64) {
        self.atoms.retain(|a| a.weight > 0.0);
        self.atoms
            .sort_by(|a, b| a.lo.total_cmp(&b.lo).then(a.hi.total_cmp(&b.hi)));
        let mut out: Vec<Atom> = Vec::with_capacity(self.atoms.len());
        for a in self.atoms.drain(..) {
            if let Some(last) = out.last_mut() {
                if a.hi - last.lo <= merge_tol && last.hi - last.lo <= merge_tol {
                    last.absorb(&a);
                    continue;
                }
            }
            out.push(a);
        }
        self.atoms = out;
    }

    /// Merge atoms on a grid of the given width (weights and moments add).
    pub fn coarsened(&self, width: f64) -> AtomicDistribution {
        let mut atoms: Vec<Atom> = Vec::new();
        let mut current: Option<(i64, Atom)> = None;
        for a in &self.atoms {
            let k = (a.position() / width).floor() as i64;
            match current.as_mut() {
                Some((ck, c)) if *ck == k => c.absorb(a),
                _ => {
                    if let Some((_, c)) = current.take() {
                        atoms.push(c);
                    }
                    current = Some((k, *a));
                }
            }
        }
        if let Some((_, c)) = current {
            atoms.push(c);
        }
        AtomicDistribution {
            atoms,
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> AtomicDistribution {
        AtomicDistribution {
            params: self.params,
            t: self.t,
            level: self.level,
            atoms: Vec::new(),
            discarded_mass: self.discarded_mass,
            tv_error: self.tv_error,
            moment_error: self.moment_error,
        }
    }

    /// One step of the chain applied to this law.
    pub fn propagate(&self, settings: &PropagationSettings) -> Result<AtomicDistribution> {
        settings.validate(self.params)?;
        let p = self.params;
        let n = p.min_digit();
        let cap = settings.digit_cap;
        let runs = match settings.tail {
            TailPolicy::Discard => Vec::new(),
            TailPolicy::Lump { width } => tail_runs(p, cap, width),
        };
        let per_parent = (cap - n + 1) as usize + runs.len();

        let (binned, width) = match settings.resolution {
            Resolution::Exact => (false, 0.0),
            Resolution::Binned { width } => (true, width),
            Resolution::Auto { width, exact_limit } => (
                self.atoms.len().saturating_mul(per_parent) > exact_limit,
                width,
            ),
        };
        if binned {
            // the bin grid and the lump children are allocated up front
            let requested = ((1.0 / width).ceil() as usize)
                .saturating_add(1)
                .saturating_add(self.atoms.len().saturating_mul(runs.len()));
            if requested > settings.max_atoms {
                return Err(Error::AtomBudget {
                    requested,
                    budget: settings.max_atoms,
                });
            }
        }
        let parents = if binned && self.atoms.len() as f64 > 0.5 / width {
            self.coarsened(width).atoms
        } else {
            self.atoms.clone()
        };
        if !binned {
            let requested = parents.len().saturating_mul(per_parent);
            if requested > settings.max_atoms {
                return Err(Error::AtomBudget {
                    requested,
                    budget: settings.max_atoms,
                });
            }
        }

        let consts = ErrorConstants::new(p);
        let mut errs = StepErrors::default();
        let mut tail_discarded = 0.0;
        for a in &parents {
            let w2 = a.width() * a.width() / 8.0;
            errs.mass += a.weight * consts.mass_curvature * w2;
            errs.moment += a.weight * consts.moment_curvature * w2;
            if settings.tail == TailPolicy::Discard {
                tail_discarded += a.weight * tail(p, cap, a.position());
            }
        }
        errs.mass += consts.mass_lipschitz * self.moment_error;
        errs.moment += consts.moment_lipschitz * self.moment_error;

        let (mut atoms, lump_moment_err) = if binned {
            emit_binned(p, &parents, cap, &runs, width)
        } else {
            emit_exact(p, &parents, cap, &runs)
        };
        errs.moment += lump_moment_err + errs.mass;

        let mut next = AtomicDistribution {
            params: p,
            t: self.t,
            level: self.level + 1,
            atoms: Vec::new(),
            discarded_mass: self.discarded_mass + tail_discarded,
            tv_error: self.tv_error + errs.mass,
            moment_error: errs.moment,
        };
        let mut pruned = 0.0;
        atoms.retain(|a| {
            if a.weight < settings.weight_floor {
                pruned += a.weight;
                false
            } else {
                true
            }
        });
        next.discarded_mass += pruned;
        next.atoms = atoms;
        if !binned {
            next.sort_and_merge(settings.merge_tol);
        }
        if next.atoms.len() > settings.max_atoms {
            return Err(Error::AtomBudget {
                requested: next.atoms.len(),
                budget: settings.max_atoms,
            });
        }
        Ok(next)
    }

    /// Certified enclosure of `G(s) = P(S < s)`.
    pub fn g_cdf(&self, s: f64) -> Bounds {
        let mut lower = 0.0;
        let mut upper = 0.0;
        for a in &self.atoms {
            if a.hi < s {
                lower += a.weight;
            }
            if a.lo < s {
                upper += a.weight;
            }
        }
        Bounds::new(lower - self.tv_error, upper + self.certified_error()).clamp_unit()
    }

    /// Certified enclosure of `P(S <= s)`, the right-hand limit of [`g_cdf`](Self::g_cdf).
    pub fn g_cdf_right(&self, s: f64) -> Bounds {
        let mut lower = 0.0;
        let mut upper = 0.0;
        for a in &self.atoms {
            if a.hi <= s {
                lower += a.weight;
            }
            if a.lo <= s {
                upper += a.weight;
            }
        }
        Bounds::new(lower - self.tv_error, upper + self.certified_error()).clamp_unit()
    }

    /// Certified enclosure of `F(x) = ∫ N x / (N - (1-x)(1-s)) dG(s)`.
    pub fn f_cdf(&self, x: f64) -> Bounds {
        let n = self.params.nf();
        let a = 1.0 - x;
        let kernel = |s: f64| n * x / (n - a * (1.0 - s));
        let mut lower = 0.0;
        let mut upper = 0.0;
        for at in &self.atoms {
            let m = at.position();
            let km = kernel(m);
            lower += at.weight * km;
            if at.hi > at.lo {
                // convex in s: the chord through the endpoints dominates
                let (kl, kh) = (kernel(at.lo), kernel(at.hi));
                upper += at.weight * (kl + (kh - kl) * (m - at.lo) / (at.hi - at.lo));
            } else {
                upper += at.weight * km;
            }
        }
        let slope = n * x * a / ((n - 1.0 + x) * (n - 1.0 + x));
        let common = slope * self.moment_error + self.tv_error;
        Bounds::new(lower - common, upper + common + self.discarded_mass).clamp_unit()
    }

    /// Point estimate of `F(x)` from atom means.
    pub fn f_cdf_nominal(&self, x: f64) -> f64 {
        let n = self.params.nf();
        let a = 1.0 - x;
        self.atoms
            .iter()
            .map(|at| at.weight * n * x / (n - a * (1.0 - at.position())))
            .sum()
    }

    /// Certified enclosure of the density of `F` at `x`.
    pub fn f_density(&self, x: f64) -> Bounds {
        let n = self.params.nf();
        let a = 1.0 - x;
        let h = |s: f64| {
            let d = n - a * (1.0 - s);
            n * (n - 1.0 + s) / (d * d)
        };
        // h is increasing in s up to N/(1-x) - 2N + 1 and decreasing after
        let peak = if a > 0.0 {
            n / a - 2.0 * n + 1.0
        } else {
            f64::INFINITY
        };
        let mut lower = 0.0;
        let mut upper = 0.0;
        for at in &self.atoms {
            if at.hi > at.lo {
                let hl = h(at.lo);
                let hh = h(at.hi);
                lower += at.weight * hl.min(hh);
                upper += at.weight * h(peak.clamp(at.lo, at.hi));
            } else {
                let v = at.weight * h(at.lo);
                lower += v;
                upper += v;
            }
        }
        let sup = n / (n - 1.0);
        Bounds::new(
            (lower - sup * self.tv_error).max(0.0),
            upper + sup * self.certified_error(),
        )
    }

    /// Largest distance between the empirical cdf of `samples` and the
    /// certified enclosure of `G`, over both one-sided limits at every sample.
    ///
    /// `samples` is sorted in place.
    pub fn ks_distance(&self, samples: &mut [f64]) -> f64 {
        samples.sort_by(f64::total_cmp);
        let total = samples.len() as f64;
        let mut by_lo: Vec<(f64, f64)> = self.atoms.iter().map(|a| (a.lo, a.weight)).collect();
        let mut by_hi: Vec<(f64, f64)> = self.atoms.iter().map(|a| (a.hi, a.weight)).collect();
        by_lo.sort_by(|a, b| a.0.total_cmp(&b.0));
        by_hi.sort_by(|a, b| a.0.total_cmp(&b.0));
        let e = self.tv_error;
        let extra = self.certified_error();
        // running sums of weights with endpoint < v and <= v
        let advance =
            |atoms: &[(f64, f64)], idx: &mut usize, sum: &mut f64, v: f64, strict: bool| {
                while *idx < atoms.len() && (atoms[*idx].0 < v || (!strict && atoms[*idx].0 == v)) {
                    *sum += atoms[*idx].1;
                    *idx += 1;
                }
            };
        let (mut il, mut ih) = (0, 0);
        let (mut sl, mut sh) = (0.0, 0.0);
        let mut worst: f64 = 0.0;
        let mut k = 0;
        while k < samples.len() {
            let v = samples[k];
            let mut j = k;
            while j < samples.len() && samples[j] == v {
                j += 1;
            }
            let below = k as f64 / total;
            let upto = j as f64 / total;
            advance(&by_lo, &mut il, &mut sl, v, true);
            advance(&by_hi, &mut ih, &mut sh, v, true);
            worst = worst.max(Bounds::new(sh - e, sl + extra).distance_to(below));
            advance(&by_lo, &mut il, &mut sl, v, false);
            advance(&by_hi, &mut ih, &mut sh, v, false);
            worst = worst.max(Bounds::new(sh - e, sl + extra).distance_to(upto));
            k = j;
        }
        worst
    }

    /// Point estimate of the density of `F` at `x`.
    pub fn f_density_nominal(&self, x: f64) -> f64 {
        let n = self.params.nf();
        let a = 1.0 - x;
        self.atoms
            .iter()
            .map(|at| {
                let d = n - a * (1.0 - at.position());
                at.weight * n * (n - 1.0 + at.position()) / (d * d)
            })
            .sum()
    }
}

/// Runs `[a, b]` of tail digits whose images span at most `width`; the last run is open.
fn tail_runs(params: ExpansionParams, cap: u64, width: f64) -> Vec<(u64, Option<u64>)> {
    let n = params.nf();
    let mut runs = Vec::new();
    let mut a = cap + 1;
    loop {
        let na = n / a as f64;
        if na <= width {
            runs.push((a, None));
            return runs;
        }
        // largest b with N/a - N/(b+1) <= width
        let b = ((n / (na - width)).floor() as u64).saturating_sub(1).max(a);
        runs.push((a, Some(b)));
        a = b + 1;
    }
}

#[inline]
fn lump_child(params: ExpansionParams, parent: &Atom, m: f64, run: (u64, Option<u64>)) -> Atom {
    let (a, b) = run;
    let (mass, hi) = match b {
        Some(b) => (
            tail(params, a - 1, m) - tail(params, b, m),
            params.branch(b, parent.hi),
        ),
        None => (tail(params, a - 1, m), 1.0),
    };
    let lo = params.branch(a, parent.lo);
    let w = parent.weight * mass;
    Atom {
        lo,
        hi,
        weight: w,
        moment: w * 0.5 * (lo + hi),
    }
}

/// Children of every parent, one atom each. Returns the atoms and the lump moment error.
fn emit_exact(
    params: ExpansionParams,
    parents: &[Atom],
    cap: u64,
    runs: &[(u64, Option<u64>)],
) -> (Vec<Atom>, f64) {
    let n = params.min_digit();
    let chunks: Vec<(Vec<Atom>, f64)> = parents
        .par_chunks(256)
        .map(|chunk| {
            let mut out = Vec::with_capacity(chunk.len() * ((cap - n + 1) as usize + runs.len()));
            let mut err = 0.0;
            for parent in chunk {
                let m = parent.position();
                let point = parent.hi == parent.lo;
                let c = m + params.nf() - 1.0;
                let mut prev = tail(params, n - 1, m);
                for i in n..=cap {
                    let next = c / (m + i as f64);
                    let w = parent.weight * (prev - next);
                    prev = next;
                    let um = params.branch(i, m);
                    let (lo, hi) = if point {
                        (um, um)
                    } else {
                        (params.branch(i, parent.lo), params.branch(i, parent.hi))
                    };
                    out.push(Atom {
                        lo,
                        hi,
                        weight: w,
                        moment: w * um,
                    });
                }
                for &run in runs {
                    let a = lump_child(params, parent, m, run);
                    err += a.weight * 0.5 * a.width();
                    out.push(a);
                }
            }
            (out, err)
        })
        .collect();
    let err = chunks.iter().map(|c| c.1).sum();
    let atoms = chunks.into_iter().flat_map(|c| c.0).collect();
    (atoms, err)
}

/// Slices of the output grid processed independently.
const SLICES: usize = 16;

/// Children aggregated on a grid of `width`, indexed by the nominal child position.
fn emit_binned(
    params: ExpansionParams,
    parents: &[Atom],
    cap: u64,
    runs: &[(u64, Option<u64>)],
    width: f64,
) -> (Vec<Atom>, f64) {
    let nbins = (1.0 / width).ceil() as usize + 1;
    let bin_of = |x: f64| ((x / width) as usize).min(nbins - 1);
    let n = params.min_digit();
    let nf = params.nf();
    let per_slice = nbins.div_ceil(SLICES);

    // Lump children are few per parent; compute them once.
    let mut lumps: Vec<Atom> = Vec::with_capacity(parents.len() * runs.len());
    let mut lump_err = 0.0;
    for parent in parents {
        let m = parent.position();
        for &run in runs {
            let a = lump_child(params, parent, m, run);
            lump_err += a.weight * 0.5 * a.width();
            lumps.push(a);
        }
    }

    let slices: Vec<Vec<Atom>> = (0..SLICES)
        .into_par_iter()
        .map(|sl| {
            let k0 = sl * per_slice;
            let k1 = ((sl + 1) * per_slice).min(nbins);
            let mut bins: Vec<Atom> = vec![
                Atom {
                    lo: f64::INFINITY,
                    hi: f64::NEG_INFINITY,
                    weight: 0.0,
                    moment: 0.0,
                };
                k1.saturating_sub(k0)
            ];
            if k0 >= k1 {
                return Vec::new();
            }
            let lo_edge = k0 as f64 * width;
            for parent in parents {
                let m = parent.position();
                let c = m + nf - 1.0;
                // first digit whose nominal child can land at or beyond lo_edge
                let start = if lo_edge <= 0.0 {
                    n
                } else {
                    let g = (nf / (1.0 - lo_edge) - m).floor() - 1.0;
                    if g > cap as f64 {
                        continue;
                    }
                    (g.max(n as f64) as u64).max(n)
                };
                let mut prev = c / (m + start as f64 - 1.0);
                for i in start..=cap {
                    let next = c / (m + i as f64);
                    let um = params.branch(i, m);
                    let k = bin_of(um);
                    if k >= k1 {
                        break;
                    }
                    let w = parent.weight * (prev - next);
                    prev = next;
                    if k < k0 {
                        continue;
                    }
                    let b = &mut bins[k - k0];
                    let lo = params.branch(i, parent.lo);
                    let hi = params.branch(i, parent.hi);
                    if lo < b.lo {
                        b.lo = lo;
                    }
                    if hi > b.hi {
                        b.hi = hi;
                    }
                    b.weight += w;
                    b.moment += w * um;
                }
            }
            for a in &lumps {
                let k = bin_of(a.position());
                if k >= k0 && k < k1 {
                    bins[k - k0].absorb(a);
                }
            }
            bins.into_iter().filter(|b| b.weight > 0.0).collect()
        })
        .collect();
    (slices.concat(), lump_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(n: u32) -> ExpansionParams {
        ExpansionParams::new(n).unwrap()
    }

    #[test]
    fn transition_values() {
        assert_eq!(transition_prob(p(2), 2, 0.0).unwrap(), 0.5);
        assert!((transition_prob(p(2), 2, 1.0).unwrap() - 1.0 / 3.0).abs() < 1e-16);
        let partial: f64 = (2..=11).map(|i| prob(p(2), i, 0.0)).sum();
        assert!((partial - (1.0 - 1.0 / 11.0)).abs() < 1e-15);
        assert!(transition_prob(p(3), 2, 0.5).is_err());
        assert!(transition_prob(p(3), 3, 1.5).is_err());
    }

    #[test]
    fn tail_values() {
        assert_eq!(transition_tail(p(2), 1, 0.0).unwrap(), 1.0);
        assert!((transition_tail(p(2), 11, 0.0).unwrap() - 1.0 / 11.0).abs() < 1e-16);
        assert_eq!(transition_tail(p(3), 2, 1.0).unwrap(), 1.0);
        assert!(transition_tail(p(3), 1, 0.0).is_err());
    }

    #[test]
    fn chain_step_values() {
        let st = ChainState::start(p(2), 0.0).unwrap();
        assert_eq!(st.chain_step(2).unwrap().s, 0.0);
        assert!((st.chain_step(3).unwrap().s - 1.0 / 3.0).abs() < 1e-16);
        let st1 = ChainState::start(p(2), 1.0).unwrap();
        let next = st1.chain_step(2).unwrap();
        assert!((next.s - 1.0 / 3.0).abs() < 1e-16);
        assert_eq!(next.step, 1);
        assert!(st.chain_step(1).is_err());
    }

    #[test]
    fn inverse_cdf_sampling() {
        assert_eq!(sample_digit(p(2), 0.0, 0.0), 2);
        assert_eq!(sample_digit(p(5), 0.7, 0.0), 5);
        assert_eq!(sample_digit(p(2), 0.0, 0.6), 3);
        assert_eq!(sample_digit(p(2), 0.0, 0.5), 3);
        assert_eq!(sample_digit(p(2), 0.0, 0.4999), 2);
        // 1 - 1/i > 0.9 first holds at i = 11
        assert_eq!(sample_digit(p(2), 0.0, 0.9), 11);
    }

    #[test]
    fn simulation_is_reproducible() {
        let a = simulate(p(2), 0.0, 3, 40_000, 9).unwrap();
        let b = simulate(p(2), 0.0, 3, 40_000, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 40_000);
        let c = simulate(p(2), 0.0, 3, 40_000, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn block_probability_values() {
        let b = |d: &[u64]| DigitBlock::new(p(2), d.to_vec()).unwrap();
        assert_eq!(block_probability(p(2), 0.0, &b(&[2])).unwrap(), 0.5);
        assert!((block_probability(p(2), 1.0, &b(&[2])).unwrap() - 1.0 / 3.0).abs() < 1e-16);
        assert_eq!(block_probability(p(2), 0.0, &b(&[2, 2])).unwrap(), 0.25);
        assert!(block_probability(p(2), 0.0, &DigitBlock::empty(p(2))).is_err());
    }

    #[test]
    fn bbl_residuals() {
        let b = DigitBlock::new(p(2), vec![2, 3]).unwrap();
        assert!(verify_bbl(p(2), &b, 0.3, 0.0).unwrap() < 1e-16);
        assert!(verify_bbl(p(2), &b, 0.3, 1.0).unwrap() < 1e-15);
        assert!(verify_bbl(p(2), &b, 0.3, 0.5).unwrap() < 1e-10);
        let long = DigitBlock::new(p(3), vec![3, 50, 4, 4, 900, 3, 3, 7, 12, 5]).unwrap();
        assert!(verify_bbl(p(3), &long, 0.9, 0.25).unwrap() < 1e-10);
    }

    #[test]
    fn first_step_from_zero() {
        let d0 = AtomicDistribution::initial(p(2), 0.0).unwrap();
        let d1 = d0.propagate(&PropagationSettings::exact(3)).unwrap();
        assert_eq!(d1.level, 1);
        assert_eq!(d1.atoms.len(), 2);
        assert_eq!(d1.atoms[0].lo, 0.0);
        assert!((d1.atoms[0].weight - 0.5).abs() < 1e-16);
        assert!((d1.atoms[1].lo - 1.0 / 3.0).abs() < 1e-16);
        assert!((d1.atoms[1].weight - 1.0 / 6.0).abs() < 1e-16);
        assert!((d1.discarded_mass - 1.0 / 3.0).abs() < 1e-15);
        assert!((d1.total_weight() + d1.discarded_mass - 1.0).abs() < 1e-15);
    }

    #[test]
    fn level_zero_cdf() {
        let d = AtomicDistribution::initial(p(2), 0.5).unwrap();
        assert_eq!(d.g_cdf(0.5), Bounds::exact(0.0));
        assert_eq!(d.g_cdf(0.500001), Bounds::exact(1.0));
        assert_eq!(d.g_cdf_right(0.5), Bounds::exact(1.0));
        let c = ConditionalMeasure::new(p(2), 0.5).unwrap();
        for x in [0.0, 0.2, 0.7, 1.0] {
            let f = d.f_cdf(x);
            assert!((f.lower - c.cdf(x)).abs() < 1e-15 && (f.upper - c.cdf(x)).abs() < 1e-15);
            let h = d.f_density(x);
            assert!((h.lower - c.density(x)).abs() < 1e-14);
        }
        let lebesgue = AtomicDistribution::initial(p(3), 1.0).unwrap();
        assert!((lebesgue.f_density(0.3).upper - 1.0).abs() < 1e-15);
    }

    #[test]
    fn level_one_cdf_steps() {
        let d =
            AtomicDistribution::at_level(p(2), 0.0, 1, &PropagationSettings::exact(2000)).unwrap();
        let eps = 1e-9;
        assert!((d.g_cdf(1.0 / 3.0 + eps).mid() - 2.0 / 3.0).abs() < 1e-3);
        assert!((d.g_cdf(1.0 / 3.0).lower - 0.5).abs() < 1e-15);
        let g1 = d.g_cdf(1.0);
        assert!(g1.upper == 1.0 && g1.lower > 0.999);
    }

    #[test]
    fn mass_is_conserved() {
        let s = PropagationSettings {
            resolution: Resolution::Binned { width: 1e-3 },
            tail: TailPolicy::Lump { width: 1e-3 },
            digit_cap: 60,
            ..Default::default()
        };
        let mut d = AtomicDistribution::initial(p(3), 0.4).unwrap();
        for _ in 0..4 {
            d = d.propagate(&s).unwrap();
            assert!((d.total_weight() + d.discarded_mass - 1.0).abs() < 1e-12);
        }
        assert!(d.tv_error > 0.0 && d.tv_error < 1e-3, "{}", d.tv_error);
    }

    #[test]
    fn ks_against_exact_samples() {
        let d = AtomicDistribution::at_level(p(2), 0.0, 1, &PropagationSettings::exact(3)).unwrap();
        // half the samples at 0, a sixth at 1/3, the rest in the discarded tail
        let mut s: Vec<f64> = (0..6)
            .map(|k| match k {
                0..=2 => 0.0,
                3 => 1.0 / 3.0,
                _ => 0.9,
            })
            .collect();
        assert!(d.ks_distance(&mut s) < 1e-15);
        let mut skewed = vec![0.0; 6];
        assert!((d.ks_distance(&mut skewed) - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn tail_runs_cover_the_tail() {
        let runs = tail_runs(p(2), 400, 1e-4);
        assert_eq!(runs[0].0, 401);
        for w in runs.windows(2) {
            assert_eq!(w[0].1.unwrap() + 1, w[1].0);
        }
        assert!(runs.last().unwrap().1.is_none());
        let tail_mass: f64 = runs
            .iter()
            .map(|&(a, b)| match b {
                Some(b) => tail(p(2), a - 1, 0.3) - tail(p(2), b, 0.3),
                None => tail(p(2), a - 1, 0.3),
            })
            .sum();
        assert!((tail_mass - tail(p(2), 400, 0.3)).abs() < 1e-15);
    }

    #[test]
    fn budget_is_enforced() {
        let s = PropagationSettings {
            max_atoms: 100,
            ..PropagationSettings::exact(400)
        };
        let d = AtomicDistribution::initial(p(2), 0.0).unwrap();
        assert!(matches!(d.propagate(&s), Err(Error::AtomBudget { .. })));
    }

    #[test]
    fn invalid_settings_rejected() {
        let d = AtomicDistribution::initial(p(4), 0.0).unwrap();
        assert!(d.propagate(&PropagationSettings::exact(3)).is_err());
        let s = PropagationSettings::exact(10).with_resolution(Resolution::Binned { width: 0.0 });
        assert!(d.propagate(&s).is_err());
    }
}
