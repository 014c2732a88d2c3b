//! Bounded one-dimensional minimisation: golden-section steps with parabolic
//! interpolation (Brent's method), plus a coarse grid to choose the bracket.

use crate::error::{Error, Result};

const GOLDEN: f64 = 0.381_966_011_250_105_1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Minimum {
    pub x: f64,
    pub fx: f64,
    pub iterations: usize,
    pub evaluations: usize,
}

/// Minimises `f` on `[lo, hi]` to absolute tolerance `tol` in `x`.
///
/// Errors with the best iterate so far when `max_iter` is exhausted. The
/// closure's own errors abort the search.
pub fn brent_minimize<F>(mut f: F, lo: f64, hi: f64, tol: f64, max_iter: usize) -> Result<Minimum>
where
    F: FnMut(f64) -> Result<f64>,
{
    let (mut a, mut b) = if lo <= hi { (lo, hi) } else { (hi, lo) };
    let mut x = a + GOLDEN * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = f(x)?;
    let (mut fw, mut fv) = (fx, fx);
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    let mut evaluations = 1;

    for iter in 0..max_iter {
        let m = 0.5 * (a + b);
        let tol1 = tol + f64::EPSILON.sqrt() * x.abs();
        let tol2 = 2.0 * tol1;
        if (x - m).abs() <= tol2 - 0.5 * (b - a) {
            return Ok(Minimum {
                x,
                fx,
                iterations: iter,
                evaluations,
            });
        }

        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let q0 = (x - v) * (fx - fw);
            let mut p = (x - v) * q0 - (x - w) * r;
            let mut q = 2.0 * (q0 - r);
            if q > 0.0 {
                p = -p;
            } else {
                q = -q;
            }
            if p.abs() < (0.5 * q * e).abs() && p > q * (a - x) && p < q * (b - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if x < m { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x < m { b - x } else { a - x };
            d = GOLDEN * e;
        }

        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let fu = f(u)?;
        evaluations += 1;

        if fu <= fx {
            if u < x {
                b = x;
            } else {
                a = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    Err(Error::Convergence {
        iterations: max_iter,
        best_phi: x,
        best_value: fx,
    })
}

/// Evaluates `f` on `points` evenly spaced over `[lo, hi]` and refines the
/// best grid point with [`brent_minimize`] inside its neighbouring cell.
/// Ties on the grid go to the smaller `x`.
pub fn grid_then_brent<F>(mut f: F, lo: f64, hi: f64, points: usize, tol: f64, max_iter: usize) -> Result<Minimum>
where
    F: FnMut(f64) -> Result<f64>,
{
    let points = points.max(3);
    let step = (hi - lo) / (points - 1) as f64;
    let grid: Vec<f64> = (0..points)
        .map(|i| if i + 1 == points { hi } else { lo + step * i as f64 })
        .collect();
    let mut best = 0;
    let mut values = Vec::with_capacity(points);
    for (i, &g) in grid.iter().enumerate() {
        let v = f(g)?;
        if v < values.get(best).copied().unwrap_or(f64::INFINITY) {
            best = i;
        }
        values.push(v);
    }
    let a = grid[best.saturating_sub(1)];
    let b = grid[(best + 1).min(points - 1)];
    let refined = brent_minimize(&mut f, a, b, tol, max_iter)?;
    let evaluations = refined.evaluations + points;
    Ok(if refined.fx <= values[best] {
        Minimum { evaluations, ..refined }
    } else {
        Minimum {
            x: grid[best],
            fx: values[best],
            iterations: refined.iterations,
            evaluations,
        }
    })
}
