//! Adaptive Simpson quadrature with an evaluation budget.

use crate::error::{Error, Result};

/// Default number of integrand evaluations before giving up.
pub const DEFAULT_BUDGET: usize = 2_000_000;

/// `∫_a^b f` to absolute tolerance `tol`, using at most `budget` evaluations.
pub fn adaptive_simpson<F>(f: F, a: f64, b: f64, tol: f64, budget: usize) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    if a == b {
        return Ok(0.0);
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    let mut evals = 3usize;
    let v = recurse(&f, a, b, fa, fm, fb, whole, tol, 50, &mut evals, budget)?;
    Ok(v)
}

#[allow(clippy::too_many_arguments)]
fn recurse<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
    evals: &mut usize,
    budget: usize,
) -> Result<f64> {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    *evals += 2;
    if *evals > budget {
        return Err(Error::QuadratureBudget { budget });
    }
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return Ok(left + right + delta / 15.0);
    }
    let l = recurse(
        f,
        a,
        m,
        fa,
        flm,
        fm,
        left,
        0.5 * tol,
        depth - 1,
        evals,
        budget,
    )?;
    let r = recurse(
        f,
        m,
        b,
        fm,
        frm,
        fb,
        right,
        0.5 * tol,
        depth - 1,
        evals,
        budget,
    )?;
    Ok(l + r)
}

/// Iterated 2-D integral `∫_{y0}^{y1} ∫_{x0}^{x1} f(x, y) dx dy`.
pub fn adaptive_simpson_2d<F>(
    f: F,
    (x0, x1): (f64, f64),
    (y0, y1): (f64, f64),
    tol: f64,
    budget: usize,
) -> Result<f64>
where
    F: Fn(f64, f64) -> f64,
{
    let inner_tol = tol / (2.0 * (y1 - y0).abs().max(1.0));
    let failed = std::cell::Cell::new(false);
    let outer = adaptive_simpson(
        |y| match adaptive_simpson(|x| f(x, y), x0, x1, inner_tol, budget) {
            Ok(v) => v,
            Err(_) => {
                failed.set(true);
                0.0
            }
        },
        y0,
        y1,
        tol / 2.0,
        budget,
    )?;
    if failed.get() {
        return Err(Error::QuadratureBudget { budget });
    }
    Ok(outer)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_and_log() {
        let v = adaptive_simpson(|x| x * x, 0.0, 3.0, 1e-12, DEFAULT_BUDGET).unwrap();
        assert!((v - 9.0).abs() < 1e-12);
        let v = adaptive_simpson(|x| 1.0 / (1.0 + x), 0.0, 1.0, 1e-12, DEFAULT_BUDGET).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn budget_is_enforced() {
        let r = adaptive_simpson(|x| (1.0 / x).sin(), 1e-9, 1.0, 1e-14, 100);
        assert_eq!(r, Err(Error::QuadratureBudget { budget: 100 }));
    }

    #[test]
    fn two_dimensional() {
        let v = adaptive_simpson_2d(|x, y| x * y, (0.0, 1.0), (0.0, 2.0), 1e-12, DEFAULT_BUDGET)
            .unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }
}
