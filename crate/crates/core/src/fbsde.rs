//! Fully coupled forward-backward systems on short windows, solved by Picard
//! iteration over the backward grid solver.
//!
//! Iteration `m` freezes `(Y^m, Z^m)`, builds forward stencils from
//! `b, sigma, h` evaluated at the frozen fields, and runs one backward pass with
//! driver `f`. The forward coupling is lagged by one iteration.

use rayon::prelude::*;
use serde::Serialize;

use crate::bsde::{solve_bsde, BackwardSolution, DriverArgs, StencilFamily};
use crate::coeffs::CoefficientSet;
use crate::config::ConfigDoc;
use crate::error::{Error, Result};
use crate::grid::{SpaceGrid, TimeGrid};
use crate::stochastics::{LevyModel, NodeStencil};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlGrid {
    pub u_values: Vec<f64>,
    pub v_values: Vec<f64>,
}

impl ControlGrid {
    pub fn new(u_values: Vec<f64>, v_values: Vec<f64>) -> Result<Self> {
        for (name, vals) in [("U", &u_values), ("V", &v_values)] {
            if vals.is_empty() {
                return Err(Error::Precondition(format!("control set {name} is empty")));
            }
            if let Some(bad) = vals.iter().find(|v| !v.is_finite()) {
                return Err(Error::Precondition(format!("control set {name} holds {bad}")));
            }
        }
        Ok(Self { u_values, v_values })
    }

    /// Singleton sets `{0}`.
    pub fn trivial() -> Self {
        Self {
            u_values: vec![0.0],
            v_values: vec![0.0],
        }
    }

    pub fn from_doc(doc: &ConfigDoc) -> Result<Self> {
        let u = doc.list_or("controls", "U", &[0.0])?;
        let v = doc.list_or("controls", "V", &[0.0])?;
        Self::new(u, v).map_err(|e| {
            let line = doc.entry("controls", "U").map_or(0, |e| e.line);
            Error::config(line, e.to_string())
        })
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.u_values.len() * self.v_values.len());
        for i in 0..self.u_values.len() {
            for j in 0..self.v_values.len() {
                out.push((i, j));
            }
        }
        out
    }
}

/// A feedback control on grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    Constant(f64),
    /// Indexed `[global slice][node]`.
    Markov(Vec<Vec<f64>>),
}

impl Policy {
    pub fn at(&self, slice: usize, node: usize) -> f64 {
        match self {
            Policy::Constant(c) => *c,
            Policy::Markov(m) => m[slice][node],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverSettings {
    /// Largest window, in time steps, solved by a single Picard loop.
    pub delta0_steps: usize,
    pub picard_tol: f64,
    pub picard_max: usize,
    /// Upper bound on `dt (vol^2/dx^2 + |drift|/dx + Lambda)` for every stencil.
    pub cfl_safety: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            delta0_steps: 10,
            picard_tol: 1e-10,
            picard_max: 100,
            cfl_safety: 1.0,
        }
    }
}

impl SolverSettings {
    pub fn from_doc(doc: &ConfigDoc) -> Result<Self> {
        let d = Self::default();
        let s = Self {
            delta0_steps: doc.usize_or("solver", "delta0_steps", d.delta0_steps)?,
            picard_tol: doc.f64_or("solver", "picard_tol", d.picard_tol)?,
            picard_max: doc.usize_or("solver", "picard_max", d.picard_max)?,
            cfl_safety: doc.f64_or("solver", "cfl_safety", d.cfl_safety)?,
        };
        if s.delta0_steps == 0 || s.picard_max == 0 || !(s.picard_tol > 0.0) || !(s.cfl_safety > 0.0) {
            let line = doc.entry("solver", "delta0_steps").map_or(0, |e| e.line);
            return Err(Error::config(line, "solver settings must be positive"));
        }
        Ok(s)
    }
}

/// `G_{t, t+delta}[Psi]` request: the window starts at `t_slice` and spans
/// `delta_steps` steps; `terminal_field` is `Psi` on the grid at the window end.
#[derive(Debug, Clone)]
pub struct SemigroupQuery {
    pub t_slice: usize,
    pub delta_steps: usize,
    pub u_policy: Policy,
    pub v_policy: Policy,
    pub terminal_field: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct WindowSolution {
    pub solution: BackwardSolution,
    /// Sup-norm change of `(Y, Z)` after each Picard pass.
    pub picard_trace: Vec<f64>,
}

/// A coupled system on fixed grids.
#[derive(Debug, Clone, Copy)]
pub struct Fbsde<'a> {
    pub cs: &'a CoefficientSet,
    pub levy: &'a LevyModel,
    pub time: TimeGrid,
    pub space: SpaceGrid,
    pub settings: SolverSettings,
}

impl<'a> Fbsde<'a> {
    pub fn new(cs: &'a CoefficientSet, levy: &'a LevyModel, time: TimeGrid, space: SpaceGrid) -> Self {
        Self {
            cs,
            levy,
            time,
            space,
            settings: SolverSettings::default(),
        }
    }

    pub fn with_settings(mut self, settings: SolverSettings) -> Self {
        self.settings = settings;
        self
    }

    fn stencil(&self, slice: usize, node: usize, y: f64, z: f64, u: f64, v: f64) -> Result<NodeStencil> {
        let t = self.time.time(slice);
        let x = self.space.x(node);
        let drift = self.cs.b(t, x, y, z, u, v)?;
        let vol = self.cs.sigma(t, x, y, z, u, v)?;
        let jumps = self
            .levy
            .atoms
            .iter()
            .zip(&self.levy.intensities)
            .map(|(&e, &lam)| Ok((self.cs.h(t, x, y, z, u, v, e)?, lam)))
            .collect::<Result<Vec<_>>>()?;
        let dx = self.space.dx();
        let dt = self.time.dt();
        let compensator: f64 = jumps.iter().map(|(h, lam)| h * lam).sum();
        let rate = vol * vol / (dx * dx) + (drift - compensator).abs() / dx + self.levy.total_intensity();
        if dt * rate > self.settings.cfl_safety {
            return Err(Error::Cfl {
                ratio: dt * rate,
                limit: self.settings.cfl_safety,
                suggested_dt: 0.9 * self.settings.cfl_safety / rate,
            });
        }
        NodeStencil::build(&self.space, dt, node, drift, vol, &jumps)
    }

    /// Solves the coupled system on `[t, t + delta]`.
    pub fn solve_window(&self, q: &SemigroupQuery) -> Result<WindowSolution> {
        let n = self.space.n_nodes;
        if q.terminal_field.len() != n {
            return Err(Error::GridMismatch);
        }
        if q.delta_steps > self.settings.delta0_steps {
            return Err(Error::Precondition(format!(
                "window of {} steps exceeds the cap of {}",
                q.delta_steps, self.settings.delta0_steps
            )));
        }
        if q.delta_steps == 0 || q.t_slice + q.delta_steps > self.time.n_steps {
            return Err(Error::Precondition(format!(
                "window {}..{} outside the time grid",
                q.t_slice,
                q.t_slice + q.delta_steps
            )));
        }
        let steps = q.delta_steps;
        let sub = self.time.sub_grid(q.t_slice, q.t_slice + steps)?;
        let base = q.t_slice;
        let coupled = !self.cs.is_decoupled();

        let mut y_lag = vec![q.terminal_field.clone(); steps + 1];
        let mut z_lag = vec![vec![0.0; n]; steps + 1];
        let mut trace = Vec::new();
        let driver = |a: DriverArgs| {
            let g = base + a.slice;
            self.cs.f(a.t, a.x, a.y, a.z, a.kbar, q.u_policy.at(g, a.node), q.v_policy.at(g, a.node))
        };
        for _ in 0..self.settings.picard_max {
            let stencils = (0..steps)
                .map(|s| {
                    (0..n)
                        .into_par_iter()
                        .map(|j| {
                            let g = base + s;
                            self.stencil(g, j, y_lag[s][j], z_lag[s][j], q.u_policy.at(g, j), q.v_policy.at(g, j))
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            let sol = solve_bsde(
                &sub,
                &self.space,
                self.levy,
                &StencilFamily::PerSlice(stencils),
                &driver,
                &q.terminal_field,
            )?;
            let change = sup_change(&sol.y, &y_lag).max(sup_change(&sol.z, &z_lag));
            trace.push(change);
            if !coupled || change <= self.settings.picard_tol {
                return Ok(WindowSolution {
                    solution: sol,
                    picard_trace: trace,
                });
            }
            if !change.is_finite() {
                break;
            }
            y_lag = sol.y;
            z_lag = sol.z;
        }
        Err(Error::Picard { trace })
    }

    /// `G_{t, t+delta}[Psi]` on the grid: `Y` at the first slice of the window.
    /// A zero-length window returns `Psi` unchanged.
    pub fn backward_semigroup(&self, q: &SemigroupQuery) -> Result<Vec<f64>> {
        if q.delta_steps == 0 {
            return Ok(q.terminal_field.clone());
        }
        let mut sol = self.solve_window(q)?.solution;
        Ok(sol.y.swap_remove(0))
    }

    /// Full-horizon solution with terminal `Phi`, chained from windows of at
    /// most `delta0_steps`. A window whose Picard loop fails is halved down to
    /// one step before the error is reported.
    pub fn solve_horizon(&self, u: &Policy, v: &Policy) -> Result<BackwardSolution> {
        let n = self.time.n_steps;
        let nodes = self.space.n_nodes;
        let terminal = self
            .space
            .nodes()
            .iter()
            .map(|&x| self.cs.phi(x))
            .collect::<Result<Vec<_>>>()?;
        let mut y = vec![Vec::new(); n + 1];
        let mut z = vec![vec![0.0; nodes]; n + 1];
        let mut k = vec![vec![vec![0.0; self.levy.len()]; nodes]; n + 1];
        y[n] = terminal;
        let mut leaked: f64 = 0.0;
        let mut window = self.settings.delta0_steps.min(n);
        let mut end = n;
        while end > 0 {
            let steps = window.min(end);
            let q = SemigroupQuery {
                t_slice: end - steps,
                delta_steps: steps,
                u_policy: u.clone(),
                v_policy: v.clone(),
                terminal_field: y[end].clone(),
            };
            match self.solve_window(&q) {
                Ok(w) => {
                    let s = w.solution;
                    leaked = leaked.max(s.leaked_mass);
                    let start = end - steps;
                    for (i, ((ys, zs), ks)) in s.y.into_iter().zip(s.z).zip(s.k).enumerate().take(steps) {
                        y[start + i] = ys;
                        z[start + i] = zs;
                        k[start + i] = ks;
                    }
                    end = start;
                }
                Err(Error::Picard { .. }) if window > 1 => window /= 2,
                Err(e) => return Err(e),
            }
        }
        Ok(BackwardSolution {
            time: self.time,
            space: self.space,
            y,
            z,
            k,
            leaked_mass: leaked,
        })
    }

    /// `J(t, x; u, v) = Y_t` at `(t_slice, node)`.
    pub fn cost_functional(&self, t_slice: usize, node: usize, u: &Policy, v: &Policy) -> Result<f64> {
        if t_slice > self.time.n_steps || node >= self.space.n_nodes {
            return Err(Error::Precondition(format!("no grid point ({t_slice}, {node})")));
        }
        Ok(self.solve_horizon(u, v)?.y[t_slice][node])
    }
}

fn sup_change(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

/// Measured a-priori constants of a solution over `nodes`: the smallest `C`
/// with `|Y| <= C (1 + |x|)` and the largest difference quotient in `x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AprioriBounds {
    pub growth: f64,
    pub lipschitz: f64,
}

pub fn apriori_bounds(y: &[Vec<f64>], space: &SpaceGrid, nodes: std::ops::Range<usize>) -> AprioriBounds {
    let mut out = AprioriBounds {
        growth: 0.0,
        lipschitz: 0.0,
    };
    for row in y {
        for j in nodes.clone() {
            out.growth = out.growth.max(row[j].abs() / (1.0 + space.x(j).abs()));
            if j + 1 < nodes.end {
                out.lipschitz = out.lipschitz.max((row[j + 1] - row[j]).abs() / space.dx());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::solve_bsde;
    use crate::stochastics::{discretize_levy, markov_stencil};
    use crate::coeffs::expr::Expr;

    fn cs(pairs: &[(&str, &str)]) -> CoefficientSet {
        CoefficientSet::from_pairs(pairs).unwrap()
    }

    fn query(t_slice: usize, steps: usize, terminal: Vec<f64>) -> SemigroupQuery {
        SemigroupQuery {
            t_slice,
            delta_steps: steps,
            u_policy: Policy::Constant(0.0),
            v_policy: Policy::Constant(0.0),
            terminal_field: terminal,
        }
    }

    #[test]
    fn constant_terminal_is_preserved() {
        let c = cs(&[("phi", "2.5")]);
        let levy = LevyModel::none();
        let sys = Fbsde::new(&c, &levy, TimeGrid::new(0.0, 1.0, 20).unwrap(), SpaceGrid::new(-1.0, 1.0, 21).unwrap());
        let w = sys.solve_window(&query(5, 10, vec![2.5; 21])).unwrap();
        assert_eq!(w.picard_trace.len(), 1);
        assert!(w.solution.y.iter().flatten().all(|&y| (y - 2.5).abs() < 1e-14));
        let g = sys.backward_semigroup(&query(3, 0, vec![1.0; 21])).unwrap();
        assert_eq!(g, vec![1.0; 21]);
    }

    #[test]
    fn decoupled_matches_direct_bsde() {
        let c = cs(&[("b", "0.3"), ("sigma", "0.5"), ("h", "e"), ("f", "x - 0.5*y + 0.1*k"), ("phi", "sin(x)")]);
        let levy = discretize_levy(&[(-0.2, 0.5), (0.2, 0.5)], &Expr::parse("abs(e)").unwrap(), 1.0).unwrap();
        let time = TimeGrid::new(0.0, 0.1, 10).unwrap();
        let space = SpaceGrid::new(-2.0, 2.0, 41).unwrap();
        let sys = Fbsde::new(&c, &levy, time, space);
        let terminal: Vec<f64> = space.nodes().iter().map(|x| x.sin()).collect();
        let w = sys.solve_window(&query(0, 10, terminal.clone())).unwrap();
        let st = markov_stencil(&time, &space, &levy, 0.3, 0.5).unwrap();
        let direct = solve_bsde(
            &time,
            &space,
            &levy,
            &StencilFamily::Homogeneous(st),
            &|a: DriverArgs| Ok(a.x - 0.5 * a.y + 0.1 * a.kbar),
            &terminal,
        )
        .unwrap();
        assert!(sup_change(&w.solution.y, &direct.y) <= 1e-12);
    }

    #[test]
    fn coupled_drift_matches_characteristics() {
        // dX = Y dt, Y constant along the path: Y = x / (1 - delta).
        let c = cs(&[("b", "y"), ("phi", "x")]);
        let levy = LevyModel::none();
        let time = TimeGrid::new(0.0, 0.1, 20).unwrap();
        let space = SpaceGrid::new(-5.0, 5.0, 201).unwrap();
        let sys = Fbsde::new(&c, &levy, time, space).with_settings(SolverSettings {
            delta0_steps: 20,
            ..SolverSettings::default()
        });
        let w = sys.solve_window(&query(0, 20, space.nodes())).unwrap();
        assert!(w.picard_trace.len() > 1);
        let dt = time.dt();
        for j in space.interior(0.3) {
            let x = space.x(j);
            let exact = x / (1.0 - 0.1);
            assert!((w.solution.y[0][j] - exact).abs() <= 3.0 * dt, "x={x}");
        }
    }

    #[test]
    fn semigroup_composes() {
        let c = cs(&[("b", "0.5*y"), ("sigma", "0.3"), ("f", "-0.2*y"), ("phi", "x")]);
        let levy = LevyModel::none();
        let time = TimeGrid::new(0.0, 0.2, 20).unwrap();
        let space = SpaceGrid::new(-4.0, 4.0, 81).unwrap();
        let sys = Fbsde::new(&c, &levy, time, space).with_settings(SolverSettings {
            delta0_steps: 20,
            ..SolverSettings::default()
        });
        let psi = space.nodes();
        let one = sys.backward_semigroup(&query(0, 20, psi.clone())).unwrap();
        let mid = sys.backward_semigroup(&query(10, 10, psi)).unwrap();
        let two = sys.backward_semigroup(&query(0, 10, mid)).unwrap();
        let gap = one.iter().zip(&two).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap <= 5.0 * time.dt(), "{gap}");
    }

    #[test]
    fn cost_functional_examples() {
        let levy = LevyModel::none();
        let time = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let space = SpaceGrid::new(-10.0, 10.0, 201).unwrap();

        let c = cs(&[("b", "u + v"), ("phi", "x")]);
        let sys = Fbsde::new(&c, &levy, time, space);
        let sol = sys.solve_horizon(&Policy::Constant(1.0), &Policy::Constant(-1.0)).unwrap();
        for j in 0..space.n_nodes {
            assert!((sol.y[0][j] - space.x(j)).abs() < 1e-12);
        }

        let c = cs(&[("f", "1"), ("phi", "0")]);
        let sys = Fbsde::new(&c, &levy, time, space);
        let j = sys.cost_functional(30, 100, &Policy::Constant(0.0), &Policy::Constant(0.0)).unwrap();
        assert!((j - 0.7).abs() <= 1e-10);

        let c = cs(&[("sigma", "1"), ("phi", "x^2")]);
        let sys = Fbsde::new(&c, &levy, time, space);
        let sol = sys.solve_horizon(&Policy::Constant(0.0), &Policy::Constant(0.0)).unwrap();
        for j in space.interior(0.25) {
            let exact = space.x(j).powi(2) + 1.0;
            assert!((sol.y[0][j] - exact).abs() <= 0.02 * exact);
        }
        assert_eq!(sol.y[100], space.nodes().iter().map(|x| x * x).collect::<Vec<_>>());
    }

    #[test]
    fn window_cap_is_enforced() {
        let c = cs(&[("phi", "x")]);
        let levy = LevyModel::none();
        let sys = Fbsde::new(&c, &levy, TimeGrid::new(0.0, 1.0, 40).unwrap(), SpaceGrid::new(-1.0, 1.0, 11).unwrap());
        assert!(matches!(sys.solve_window(&query(0, 11, vec![0.0; 11])), Err(Error::Precondition(_))));
    }
}
