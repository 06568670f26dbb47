//! The scalar representation equation `z = xi + p * sigma(s, x, y, z, u, v)`.
//!
//! When `sigma` is non-increasing in `z` and `p >= 0`, the map
//! `z -> z - xi - p sigma(z)` is strictly increasing, so bracketing always
//! finds the unique root.

use serde::Serialize;

use crate::coeffs::CoefficientSet;
use crate::coeffs::expr::Var;
use crate::error::{Error, Result};

pub const RESIDUAL_TOL: f64 = 1e-12;
pub const MAX_ITER: usize = 200;
const MAX_DOUBLINGS: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AlgebraicQuery {
    pub s: f64,
    pub x: f64,
    /// The `y` argument handed to `sigma`.
    pub y: f64,
    pub xi: f64,
    /// Gradient of the test function; must be `>= 0` when `sigma` depends on `z`.
    pub p: f64,
    pub u: f64,
    pub v: f64,
}

impl AlgebraicQuery {
    pub fn new(s: f64, x: f64, y: f64, xi: f64, p: f64, u: f64, v: f64) -> Self {
        Self { s, x, y, xi, p, u, v }
    }
}

fn sigma_at(q: &AlgebraicQuery, cs: &CoefficientSet, z: f64) -> Result<f64> {
    cs.sigma(q.s, q.x, q.y, z, q.u, q.v)
}

/// `z - xi - p sigma(z)`.
pub fn residual(q: &AlgebraicQuery, cs: &CoefficientSet, z: f64) -> Result<f64> {
    Ok(z - q.xi - q.p * sigma_at(q, cs, z)?)
}

/// Local secant bound on `|d sigma / dz|` around `z0`.
fn local_lipschitz(q: &AlgebraicQuery, cs: &CoefficientSet, z0: f64) -> Result<f64> {
    let s0 = sigma_at(q, cs, z0)?;
    let scale = 1.0 + z0.abs();
    let mut l: f64 = 0.0;
    for h in [1e-3, 0.1, 1.0, 10.0] {
        for dz in [h * scale, -h * scale] {
            l = l.max((sigma_at(q, cs, z0 + dz)? - s0).abs() / dz.abs());
        }
    }
    Ok(l)
}

/// Solves the representation equation to residual `<= 1e-12`.
pub fn solve_representation(q: &AlgebraicQuery, cs: &CoefficientSet) -> Result<f64> {
    if !cs.sigma.depends_on(Var::Z) {
        return Ok(q.xi + q.p * sigma_at(q, cs, 0.0)?);
    }
    if q.p < 0.0 {
        return Err(Error::Algebraic(format!(
            "gradient p = {} < 0 with z-dependent sigma",
            q.p
        )));
    }
    if q.p == 0.0 {
        return Ok(q.xi);
    }
    let l = local_lipschitz(q, cs, q.xi)?;
    let contraction = q.p * l;
    let omega = if contraction < 1.0 { 1.0 } else { 1.0 / (1.0 + contraction) };

    let mut z = q.xi;
    for _ in 0..MAX_ITER {
        let r = residual(q, cs, z)?;
        if r.abs() <= RESIDUAL_TOL {
            return Ok(z);
        }
        let next = z - omega * r;
        if !next.is_finite() {
            break;
        }
        z = next;
    }
    let (lo, hi) = initial_bracket(q, cs)?;
    bracket_root(q, cs, lo, hi)
}

/// `[xi - p M, xi + p M]` with `M = 1 + |sigma(xi)|`, doubled until the
/// residual changes sign.
pub fn initial_bracket(q: &AlgebraicQuery, cs: &CoefficientSet) -> Result<(f64, f64)> {
    let m = 1.0 + sigma_at(q, cs, q.xi)?.abs();
    let mut half = (q.p * m).max(1e-12);
    for _ in 0..MAX_DOUBLINGS {
        let (lo, hi) = (q.xi - half, q.xi + half);
        if residual(q, cs, lo)? <= 0.0 && residual(q, cs, hi)? >= 0.0 {
            return Ok((lo, hi));
        }
        half *= 2.0;
    }
    Err(Error::Algebraic(format!("no sign change within {MAX_DOUBLINGS} bracket doublings")))
}

/// Bisection on an increasing residual inside `[lo, hi]`.
pub fn bracket_root(q: &AlgebraicQuery, cs: &CoefficientSet, mut lo: f64, mut hi: f64) -> Result<f64> {
    let mut r_lo = residual(q, cs, lo)?;
    let r_hi = residual(q, cs, hi)?;
    if r_lo > 0.0 || r_hi < 0.0 {
        return Err(Error::Algebraic(format!("[{lo}, {hi}] does not bracket a root")));
    }
    let mut best = if r_lo.abs() < r_hi.abs() { (lo, r_lo) } else { (hi, r_hi) };
    for _ in 0..400 {
        if best.1.abs() <= RESIDUAL_TOL {
            return Ok(best.0);
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let r = residual(q, cs, mid)?;
        if r.abs() < best.1.abs() {
            best = (mid, r);
        }
        if (r < 0.0) == (r_lo < 0.0) {
            lo = mid;
            r_lo = r;
        } else {
            hi = mid;
        }
    }
    if best.1.abs() <= RESIDUAL_TOL {
        Ok(best.0)
    } else {
        Err(Error::Algebraic(format!("residual {:.3e} after bisection", best.1)))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RepresentationBounds {
    pub queries: usize,
    pub max_residual: f64,
    /// `max |z| / (C (1 + |x| + |y| + |xi|))`; at most 1 when the bound holds.
    pub max_growth_ratio: f64,
    pub lipschitz_xi: f64,
    pub lipschitz_y: f64,
    pub growth_holds: bool,
}

/// Checks the linear-growth bound of the solution map over `queries`.
///
/// `sigma_growth` bounds `|sigma| / (1 + |x| + |y| + |z|)` and `l_sigma` its
/// `z`-Lipschitz constant. The growth constant is `1 + p G / (1 - p L)` when
/// `p L < 1` and `1 + p G` otherwise (the non-increasing case).
pub fn representation_bounds(
    queries: &[AlgebraicQuery],
    cs: &CoefficientSet,
    sigma_growth: f64,
    l_sigma: f64,
) -> Result<RepresentationBounds> {
    let mut out = RepresentationBounds {
        queries: queries.len(),
        max_residual: 0.0,
        max_growth_ratio: 0.0,
        lipschitz_xi: 0.0,
        lipschitz_y: 0.0,
        growth_holds: true,
    };
    for q in queries {
        let z = solve_representation(q, cs)?;
        out.max_residual = out.max_residual.max(residual(q, cs, z)?.abs());
        let pl = q.p * l_sigma;
        let c = if pl < 1.0 {
            1.0 + q.p * sigma_growth / (1.0 - pl)
        } else {
            1.0 + q.p * sigma_growth
        };
        let ratio = z.abs() / (c * (1.0 + q.x.abs() + q.y.abs() + q.xi.abs()));
        out.max_growth_ratio = out.max_growth_ratio.max(ratio);

        let h = 1e-4 * (1.0 + q.xi.abs());
        let z_xi = solve_representation(&AlgebraicQuery { xi: q.xi + h, ..*q }, cs)?;
        out.lipschitz_xi = out.lipschitz_xi.max((z_xi - z).abs() / h);
        let hy = 1e-4 * (1.0 + q.y.abs());
        let z_y = solve_representation(&AlgebraicQuery { y: q.y + hy, ..*q }, cs)?;
        out.lipschitz_y = out.lipschitz_y.max((z_y - z).abs() / hy);
    }
    out.growth_holds = out.max_growth_ratio <= 1.0 + 1e-12;
    Ok(out)
}
