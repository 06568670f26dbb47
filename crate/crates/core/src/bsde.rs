//! Backward solver for decoupled BSDEs with jumps on the Markov-chain grid.
//!
//! One backward step at node `j` of slice `k`:
//!
//! ```text
//! Yhat = E[Y_{k+1}]                              (stencil expectation)
//! Z    = vol * Cov(Y_{k+1}, dX) / Var(dX)        (diffusion branch)
//! K_i  = Y_{k+1}(x_j + shift_i) - Yhat
//! Y    = Yhat + dt * g(t_k, x_j, Y, Z, sum_i K_i l(e_i) lambda_i)   (implicit in Y)
//! ```

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
pub use crate::grid::SpaceGrid;
use crate::grid::TimeGrid;
use crate::stochastics::{LevyModel, NodeStencil};

/// Implicit-step fixed point: iteration cap and tolerance.
pub const IMPLICIT_MAX_ITER: usize = 50;
pub const IMPLICIT_TOL: f64 = 1e-12;

/// Transition stencils for every `(slice, node)` of a backward pass.
#[derive(Debug, Clone)]
pub enum StencilFamily {
    /// Same stencils at every slice.
    Homogeneous(Vec<NodeStencil>),
    /// Indexed `[slice][node]`.
    PerSlice(Vec<Vec<NodeStencil>>),
}

impl StencilFamily {
    pub fn at(&self, slice: usize, node: usize) -> &NodeStencil {
        match self {
            StencilFamily::Homogeneous(s) => &s[node],
            StencilFamily::PerSlice(s) => &s[slice][node],
        }
    }

    fn slice(&self, slice: usize) -> &[NodeStencil] {
        match self {
            StencilFamily::Homogeneous(s) => s,
            StencilFamily::PerSlice(s) => &s[slice],
        }
    }
}

/// Arguments handed to a driver `g(t, x, y, z, kbar)`.
#[derive(Debug, Clone, Copy)]
pub struct DriverArgs {
    pub slice: usize,
    pub node: usize,
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub kbar: f64,
}

/// Triple `(Y, Z, K)` on the grid. `Z` and `K` are zero on the terminal slice.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BackwardSolution {
    pub time: TimeGrid,
    pub space: SpaceGrid,
    /// `[slice][node]`
    pub y: Vec<Vec<f64>>,
    /// `[slice][node]`
    pub z: Vec<Vec<f64>>,
    /// `[slice][node][atom]`
    pub k: Vec<Vec<Vec<f64>>>,
    /// Largest per-node stencil mass clamped at the boundary.
    pub leaked_mass: f64,
}

impl BackwardSolution {
    pub fn n_atoms(&self) -> usize {
        self.k.first().and_then(|s| s.first()).map_or(0, Vec::len)
    }

    pub fn same_grid(&self, other: &Self) -> bool {
        self.time == other.time && self.space == other.space && self.n_atoms() == other.n_atoms()
    }
}

/// Result of one backward step over a slice.
pub(crate) struct SliceStep {
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub k: Vec<Vec<f64>>,
}

pub(crate) fn backward_step<G>(
    slice: usize,
    t: f64,
    dt: f64,
    space: &SpaceGrid,
    levy: &LevyModel,
    stencils: &[NodeStencil],
    next: &[f64],
    driver: &G,
) -> Result<SliceStep>
where
    G: Fn(DriverArgs) -> Result<f64> + Sync,
{
    let per_node: Vec<(f64, f64, Vec<f64>)> = (0..space.n_nodes)
        .into_par_iter()
        .map(|j| {
            let st = &stencils[j];
            let y_hat = st.expect(next);
            let z = st.regress_z(next);
            let k: Vec<f64> = (0..levy.len()).map(|i| st.jump_value(i, next) - y_hat).collect();
            let kbar = levy.l_integral(&k);
            let mut args = DriverArgs {
                slice,
                node: j,
                t,
                x: space.x(j),
                y: y_hat,
                z,
                kbar,
            };
            let mut y = y_hat;
            let mut converged = false;
            let mut residual = f64::INFINITY;
            for _ in 0..IMPLICIT_MAX_ITER {
                args.y = y;
                let y_new = y_hat + dt * driver(args)?;
                residual = (y_new - y).abs();
                y = y_new;
                if residual <= IMPLICIT_TOL * y.abs().max(1.0) {
                    converged = true;
                    break;
                }
            }
            if !converged || !y.is_finite() {
                return Err(Error::FixedPoint { slice, node: j, residual });
            }
            Ok((y, z, k))
        })
        .collect::<Result<_>>()?;

    let mut out = SliceStep {
        y: Vec::with_capacity(per_node.len()),
        z: Vec::with_capacity(per_node.len()),
        k: Vec::with_capacity(per_node.len()),
    };
    for (y, z, k) in per_node {
        out.y.push(y);
        out.z.push(z);
        out.k.push(k);
    }
    Ok(out)
}

/// Solves the BSDE with driver `g` and terminal values `terminal[node]`.
pub fn solve_bsde<G>(
    time: &TimeGrid,
    space: &SpaceGrid,
    levy: &LevyModel,
    stencils: &StencilFamily,
    driver: &G,
    terminal: &[f64],
) -> Result<BackwardSolution>
where
    G: Fn(DriverArgs) -> Result<f64> + Sync,
{
    if terminal.len() != space.n_nodes {
        return Err(Error::GridMismatch);
    }
    let n = time.n_steps;
    let dt = time.dt();
    let mut y = vec![Vec::new(); n + 1];
    let mut z = vec![vec![0.0; space.n_nodes]; n + 1];
    let mut k = vec![vec![vec![0.0; levy.len()]; space.n_nodes]; n + 1];
    y[n] = terminal.to_vec();
    let mut leaked: f64 = 0.0;
    for slice in (0..n).rev() {
        let st = stencils.slice(slice);
        leaked = st.iter().map(|s| s.leaked_mass).fold(leaked, f64::max);
        let step = backward_step(slice, time.time(slice), dt, space, levy, st, &y[slice + 1], driver)?;
        y[slice] = step.y;
        z[slice] = step.z;
        k[slice] = step.k;
    }
    Ok(BackwardSolution {
        time: *time,
        space: *space,
        y,
        z,
        k,
        leaked_mass: leaked,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ComparisonVerdict {
    pub holds: bool,
    /// `min (Y_a - Y_b)` over all slices and nodes.
    pub worst_margin: f64,
}

/// Checks `Y_a >= Y_b - 1e-10` everywhere.
pub fn compare_bsde(a: &BackwardSolution, b: &BackwardSolution) -> Result<ComparisonVerdict> {
    if !a.same_grid(b) {
        return Err(Error::GridMismatch);
    }
    let worst_margin = a
        .y
        .iter()
        .zip(&b.y)
        .flat_map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x - y))
        .fold(f64::INFINITY, f64::min);
    Ok(ComparisonVerdict {
        holds: worst_margin >= -1e-10,
        worst_margin,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityReport {
    pub beta: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub satisfied: bool,
}

/// Both sides of the `L^2` stability estimate at the initial slice, with
/// `beta = 2 + 2C + 4C^2`, conditional expectations replaced by node averages
/// and time integrals by left Riemann sums. `phi_a`, `phi_b` are the additive
/// driver perturbations `(t, x) -> phi(t, x)`.
pub fn stability_gap<P, Q>(
    a: &BackwardSolution,
    b: &BackwardSolution,
    phi_a: P,
    phi_b: Q,
    levy: &LevyModel,
    lipschitz: f64,
) -> Result<StabilityReport>
where
    P: Fn(f64, f64) -> f64,
    Q: Fn(f64, f64) -> f64,
{
    if !a.same_grid(b) {
        return Err(Error::GridMismatch);
    }
    let beta = 2.0 + 2.0 * lipschitz + 4.0 * lipschitz * lipschitz;
    let time = a.time;
    let space = a.space;
    let n = time.n_steps;
    let nodes = space.n_nodes as f64;
    let dt = time.dt();
    let avg = |f: &dyn Fn(usize) -> f64| (0..space.n_nodes).map(f).sum::<f64>() / nodes;

    let mut lhs = avg(&|j| (a.y[0][j] - b.y[0][j]).powi(2));
    let mut rhs = (beta * time.horizon()).exp() * avg(&|j| (a.y[n][j] - b.y[n][j]).powi(2));
    for s in 0..n {
        let t = time.time(s);
        let w = dt * (beta * (t - time.t0)).exp();
        let state = avg(&|j| {
            let dk: f64 = (0..levy.len())
                .map(|i| (a.k[s][j][i] - b.k[s][j][i]).powi(2) * levy.intensities[i])
                .sum();
            (a.y[s][j] - b.y[s][j]).powi(2) + (a.z[s][j] - b.z[s][j]).powi(2) + dk
        });
        lhs += 0.5 * w * state;
        rhs += w * avg(&|j| {
            let x = space.x(j);
            (phi_a(t, x) - phi_b(t, x)).powi(2)
        });
    }
    Ok(StabilityReport {
        beta,
        lhs,
        rhs,
        satisfied: lhs <= rhs * (1.0 + 1e-6),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::expr::Expr;
    use crate::stochastics::{discretize_levy, markov_stencil};

    fn setup(vol: f64, with_jumps: bool, n_steps: usize) -> (TimeGrid, SpaceGrid, LevyModel, StencilFamily) {
        let time = TimeGrid::new(0.0, 1.0, n_steps).unwrap();
        let space = SpaceGrid::new(-3.0, 3.0, 61).unwrap();
        let levy = if with_jumps {
            discretize_levy(&[(-0.5, 0.5), (0.3, 1.0)], &Expr::parse("min(1, abs(e))").unwrap(), 1.0).unwrap()
        } else {
            LevyModel::none()
        };
        let st = markov_stencil(&time, &space, &levy, 0.0, vol).unwrap();
        (time, space, levy, StencilFamily::Homogeneous(st))
    }

    fn terminal(space: &SpaceGrid, f: impl Fn(f64) -> f64) -> Vec<f64> {
        space.nodes().into_iter().map(f).collect()
    }

    #[test]
    fn zero_driver_constant_terminal() {
        let (time, space, levy, st) = setup(0.8, true, 200);
        let sol = solve_bsde(&time, &space, &levy, &st, &|_| Ok(0.0), &vec![2.5; space.n_nodes]).unwrap();
        for s in 0..=time.n_steps {
            for j in 0..space.n_nodes {
                assert!((sol.y[s][j] - 2.5).abs() < 1e-13);
                assert!(sol.z[s][j].abs() < 1e-12);
                assert!(sol.k[s][j].iter().all(|k| k.abs() < 1e-13));
            }
        }
    }

    #[test]
    fn unit_driver_gives_time_to_go() {
        let (time, space, levy, st) = setup(0.8, true, 200);
        let sol = solve_bsde(&time, &space, &levy, &st, &|_| Ok(1.0), &vec![0.0; space.n_nodes]).unwrap();
        for &y in &sol.y[0] {
            assert!((y - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn linear_driver_decays_exponentially() {
        let (time, space, levy, st) = setup(0.8, true, 200);
        let sol = solve_bsde(&time, &space, &levy, &st, &|a: DriverArgs| Ok(-a.y), &vec![1.0; space.n_nodes]).unwrap();
        let exact = (-1.0f64).exp();
        for &y in &sol.y[0] {
            assert!((y - exact).abs() <= 2.0 * time.dt());
        }
    }

    #[test]
    fn terminal_slice_is_exact() {
        let (time, space, levy, st) = setup(0.8, true, 100);
        let xi = terminal(&space, |x| x.sin() + 0.1 * x * x);
        let sol = solve_bsde(&time, &space, &levy, &st, &|a: DriverArgs| Ok(a.z - a.y), &xi).unwrap();
        assert_eq!(sol.y[time.n_steps], xi);
    }

    #[test]
    fn z_recovers_gradient_times_vol() {
        let (time, space, levy, st) = setup(0.8, false, 100);
        let sol = solve_bsde(&time, &space, &levy, &st, &|_| Ok(0.0), &terminal(&space, |x| 3.0 * x)).unwrap();
        let last = time.n_steps - 1;
        for j in 1..space.n_nodes - 1 {
            assert!((sol.z[last][j] - 2.4).abs() < 1e-10);
        }
    }

    #[test]
    fn comparison_examples() {
        let (time, space, levy, st) = setup(0.8, true, 100);
        let solve = |f: fn(f64) -> f64| solve_bsde(&time, &space, &levy, &st, &|_| Ok(0.0), &terminal(&space, f)).unwrap();
        let a = solve(|x| x * x + 1.0);
        let b = solve(|x| x * x);
        let v = compare_bsde(&a, &a).unwrap();
        assert!(v.holds && v.worst_margin == 0.0);
        let v = compare_bsde(&a, &b).unwrap();
        assert!(v.holds);
        assert!((v.worst_margin - 1.0).abs() < 1e-12);
        let v = compare_bsde(&b, &a).unwrap();
        assert!(!v.holds);
        assert!((v.worst_margin + 1.0).abs() < 1e-12);
    }

    #[test]
    fn comparison_rejects_grid_mismatch() {
        let (time, space, levy, st) = setup(0.8, false, 100);
        let a = solve_bsde(&time, &space, &levy, &st, &|_| Ok(0.0), &vec![0.0; space.n_nodes]).unwrap();
        let (time2, _, _, st2) = setup(0.8, false, 120);
        let b = solve_bsde(&time2, &space, &levy, &st2, &|_| Ok(0.0), &vec![0.0; space.n_nodes]).unwrap();
        assert!(matches!(compare_bsde(&a, &b), Err(Error::GridMismatch)));
    }

    #[test]
    fn stability_examples() {
        let (time, space, levy, st) = setup(0.8, true, 100);
        let c = 1.0;
        let g = |a: DriverArgs| Ok(-a.y + 0.5 * a.z);
        let base = solve_bsde(&time, &space, &levy, &st, &g, &terminal(&space, |x| x.cos())).unwrap();
        let r = stability_gap(&base, &base, |_, _| 0.0, |_, _| 0.0, &levy, c).unwrap();
        assert_eq!((r.lhs, r.rhs), (0.0, 0.0));
        assert!(r.satisfied);

        let eps = 0.3;
        let shifted = solve_bsde(&time, &space, &levy, &st, &g, &terminal(&space, |x| x.cos() + eps)).unwrap();
        let r = stability_gap(&shifted, &base, |_, _| 0.0, |_, _| 0.0, &levy, c).unwrap();
        assert!((r.rhs - (r.beta * 1.0).exp() * eps * eps).abs() < 1e-12);
        assert!(r.satisfied, "{r:?}");

        let forced = solve_bsde(&time, &space, &levy, &st, &|a: DriverArgs| Ok(g(a)? + eps), &terminal(&space, |x| x.cos()))
            .unwrap();
        let r = stability_gap(&forced, &base, |_, _| eps, |_, _| 0.0, &levy, c).unwrap();
        let dt = time.dt();
        let closed: f64 = (0..time.n_steps).map(|s| dt * (r.beta * s as f64 * dt).exp() * eps * eps).sum();
        assert!((r.rhs - closed).abs() < 1e-12);
        assert!(r.satisfied, "{r:?}");
        assert!(r.lhs / r.rhs < 1.0);
    }

    #[test]
    fn nonconvergent_implicit_step_is_reported() {
        let (time, space, levy, st) = setup(0.0, false, 2);
        let err = solve_bsde(&time, &space, &levy, &st, &|a: DriverArgs| Ok(-5.0 * a.y), &vec![1.0; space.n_nodes])
            .unwrap_err();
        assert!(matches!(err, Error::FixedPoint { slice: 1, .. }), "{err}");
    }
}
