//! Explicit monotone finite differences for the nonlocal Isaacs equations.
//!
//! One backward step at node `j`:
//!
//! ```text
//! W_k = W_{k+1} + dt * opt_{u,v} H(t_k, x_j, W_{k+1}; u, v)
//! H   = sigma^2/2 A + b_eff p_up + sum_i lambda_i (W(x + h_i) - W(x)) + f(t, x, W, z, C, u, v)
//! ```
//!
//! with `b_eff = b - sum_i lambda_i h_i` upwinded, `A` the central second
//! difference and `C = sum_i (W(x+h_i) - W(x)) l(e_i) lambda_i`. When `sigma`
//! is free of `z` the `z`-argument is `DW sigma`; otherwise it solves the
//! representation equation with `xi = 0`, `p = max(DW, 0)`, `y = W`.

use rayon::prelude::*;
use serde::Serialize;

use crate::algebraic::{residual, solve_representation, AlgebraicQuery};
use crate::coeffs::{check_h31, CoefficientSet, ProbeDomain, DEFAULT_SMALLNESS_THRESHOLD};
use crate::error::{Error, Result};
use crate::game::{saddle_lower, saddle_upper, GameProblem, ValueField, ValueKind};
use crate::grid::SpaceGrid;
use crate::stochastics::LevyModel;

/// Largest admissible `dt (sigma^2/dx^2 + |b_eff|/dx + Lambda)`.
pub const CFL_LIMIT: f64 = 0.9;
/// Largest admissible share of gradient clamps per slice.
pub const MAX_CLAMP_FRACTION: f64 = 0.2;

/// Arguments of the Hamiltonian at one node and control pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HamiltonianInput {
    pub t: f64,
    pub x: f64,
    pub phi_val: f64,
    /// Central first difference.
    pub p: f64,
    /// Central second difference.
    pub a: f64,
    /// `z`-argument handed to the coefficients.
    pub r: f64,
    pub u: f64,
    pub v: f64,
}

#[derive(Debug, Clone, Copy)]
struct NodeEval {
    input: HamiltonianInput,
    value: f64,
    /// `dt (sigma^2/dx^2 + |b_eff|/dx + Lambda)`.
    cfl_ratio: f64,
    clamped: bool,
    algebraic_residual: f64,
}

struct Differences {
    central: f64,
    second: f64,
    forward: f64,
    backward: f64,
}

fn differences(w: &[f64], j: usize, dx: f64) -> Differences {
    let last = w.len() - 1;
    if j == 0 {
        let d = (w[1] - w[0]) / dx;
        Differences {
            central: (-3.0 * w[0] + 4.0 * w[1] - w[2]) / (2.0 * dx),
            second: (w[0] - 2.0 * w[1] + w[2]) / (dx * dx),
            forward: d,
            backward: d,
        }
    } else if j == last {
        let d = (w[last] - w[last - 1]) / dx;
        Differences {
            central: (3.0 * w[last] - 4.0 * w[last - 1] + w[last - 2]) / (2.0 * dx),
            second: (w[last] - 2.0 * w[last - 1] + w[last - 2]) / (dx * dx),
            forward: d,
            backward: d,
        }
    } else {
        Differences {
            central: (w[j + 1] - w[j - 1]) / (2.0 * dx),
            second: (w[j + 1] - 2.0 * w[j] + w[j - 1]) / (dx * dx),
            forward: (w[j + 1] - w[j]) / dx,
            backward: (w[j] - w[j - 1]) / dx,
        }
    }
}

/// Jump shifts `h(t, x, y, z, u, v, e_i)`.
#[allow(clippy::too_many_arguments)]
fn shifts(cs: &CoefficientSet, levy: &LevyModel, t: f64, x: f64, y: f64, z: f64, u: f64, v: f64) -> Result<Vec<f64>> {
    levy.atoms.iter().map(|&e| cs.h(t, x, y, z, u, v, e)).collect()
}

/// Nonlocal terms at `node` of `field`:
/// `B = sum_i (W(x+h_i) - W(x) - p h_i) lambda_i` and
/// `C = sum_i (W(x+h_i) - W(x)) l(e_i) lambda_i`.
/// Off-grid targets are interpolated and clamped to the boundary.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_nonlocal(
    field: &[f64],
    space: &SpaceGrid,
    node: usize,
    cs: &CoefficientSet,
    levy: &LevyModel,
    t: f64,
    y: f64,
    z: f64,
    u: f64,
    v: f64,
    p: f64,
) -> Result<(f64, f64)> {
    let x = space.x(node);
    let hs = shifts(cs, levy, t, x, y, z, u, v)?;
    let (mut b, mut c) = (0.0, 0.0);
    for (i, h) in hs.iter().enumerate() {
        let jump = space.locate(x + h).interpolate(field) - field[node];
        b += (jump - p * h) * levy.intensities[i];
        c += jump * levy.l_values[i] * levy.intensities[i];
    }
    Ok((b, c))
}

#[allow(clippy::too_many_arguments)]
fn evaluate_node(
    problem: &GameProblem,
    w: &[f64],
    slice: usize,
    j: usize,
    u: f64,
    v: f64,
    clamp_gradient: bool,
) -> Result<NodeEval> {
    let cs = &problem.cs;
    let levy = &problem.levy;
    let space = &problem.space;
    let dx = space.dx();
    let dt = problem.time.dt();
    let t = problem.time.time(slice);
    let x = space.x(j);
    let y = w[j];
    let d = differences(w, j, dx);

    let mut clamped = false;
    let mut algebraic_residual = 0.0;
    let z = if cs.sigma_depends_on_z() {
        let mut p = d.central;
        if clamp_gradient && p < 0.0 {
            clamped = true;
            p = 0.0;
        }
        let q = AlgebraicQuery::new(t, x, y, 0.0, p, u, v);
        let z = solve_representation(&q, cs)
            .map_err(|e| Error::Algebraic(format!("slice {slice}, node {j}: {e}")))?;
        algebraic_residual = residual(&q, cs, z)?.abs();
        z
    } else {
        d.central * cs.sigma(t, x, y, 0.0, u, v)?
    };

    let vol = cs.sigma(t, x, y, z, u, v)?;
    let drift = cs.b(t, x, y, z, u, v)?;
    let hs = shifts(cs, levy, t, x, y, z, u, v)?;
    let mut compensator = 0.0;
    let mut jump_sum = 0.0;
    let mut c_val = 0.0;
    for (i, h) in hs.iter().enumerate() {
        let lam = levy.intensities[i];
        let jump = space.locate(x + h).interpolate(w) - y;
        compensator += lam * h;
        jump_sum += lam * jump;
        c_val += jump * levy.l_values[i] * lam;
    }
    let b_eff = drift - compensator;
    let p_up = if b_eff >= 0.0 { d.forward } else { d.backward };
    let value = 0.5 * vol * vol * d.second + b_eff * p_up + jump_sum + cs.f(t, x, y, z, c_val, u, v)?;
    let cfl_ratio = dt * (vol * vol / (dx * dx) + b_eff.abs() / dx + levy.total_intensity());
    Ok(NodeEval {
        input: HamiltonianInput {
            t,
            x,
            phi_val: y,
            p: d.central,
            a: d.second,
            r: z,
            u,
            v,
        },
        value,
        cfl_ratio,
        clamped,
        algebraic_residual,
    })
}

/// Hamiltonian at `node` of `field` for one control pair, with its inputs.
/// `field` is the test function; coefficients are taken at `slice`.
pub fn hamiltonian(
    problem: &GameProblem,
    field: &[f64],
    slice: usize,
    node: usize,
    u: f64,
    v: f64,
) -> Result<(HamiltonianInput, f64)> {
    let clamp = !problem.cs.is_special_case() && problem.cs.sigma_depends_on_z();
    let e = evaluate_node(problem, field, slice, node, u, v, clamp)?;
    Ok((e.input, e.value))
}

/// Optimised Hamiltonian at one node: value, control indices, and the worst
/// diagnostics over all control pairs.
struct NodeOpt {
    value: f64,
    iu: usize,
    iv: usize,
    cfl_ratio: f64,
    clamps: usize,
    algebraic_residual: f64,
}

fn optimise_node(
    problem: &GameProblem,
    w: &[f64],
    slice: usize,
    j: usize,
    kind: ValueKind,
    clamp_gradient: bool,
) -> Result<NodeOpt> {
    let c = &problem.controls;
    let n_v = c.v_values.len();
    let mut evals = Vec::with_capacity(c.u_values.len() * n_v);
    for &u in &c.u_values {
        for &v in &c.v_values {
            evals.push(evaluate_node(problem, w, slice, j, u, v, clamp_gradient)?);
        }
    }
    let cell = |iu: usize, iv: usize| evals[iu * n_v + iv].value;
    let (value, iu, iv) = match kind {
        ValueKind::Lower => saddle_lower(c, cell),
        ValueKind::Upper => saddle_upper(c, cell),
    };
    Ok(NodeOpt {
        value,
        iu,
        iv,
        cfl_ratio: evals.iter().map(|e| e.cfl_ratio).fold(0.0, f64::max),
        clamps: evals.iter().filter(|e| e.clamped).count(),
        algebraic_residual: evals.iter().map(|e| e.algebraic_residual).fold(0.0, f64::max),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PdeSolution {
    pub field: ValueField,
    /// `min_k min_j (1 - cfl ratio)`: the centre weight of the explicit step.
    pub min_center_weight: f64,
    pub clamp_events: usize,
    pub evaluations: usize,
    pub max_algebraic_residual: f64,
}

impl PdeSolution {
    pub fn scheme_monotone(&self) -> bool {
        self.min_center_weight >= 0.0
    }

    pub fn clamp_fraction(&self) -> f64 {
        if self.evaluations == 0 {
            0.0
        } else {
            self.clamp_events as f64 / self.evaluations as f64
        }
    }
}

/// Special case: `sigma` and `h` free of `(y, z)`.
pub fn solve_hjbi_special(problem: &GameProblem, kind: ValueKind) -> Result<PdeSolution> {
    if !problem.cs.is_special_case() {
        return Err(Error::Precondition(
            "sigma and h must not depend on y or z for the special-case solver".into(),
        ));
    }
    march(problem, kind, &problem.terminal()?, false)
}

/// General case with the representation equation at every node and pair.
pub fn solve_hjbi_general(problem: &GameProblem, kind: ValueKind) -> Result<PdeSolution> {
    let domain = ProbeDomain::new(
        problem.space.x_min.abs().max(problem.space.x_max.abs()),
        (problem.time.t0, problem.time.t_end),
        problem.controls.u_values.clone(),
        problem.controls.v_values.clone(),
    );
    let cert = check_h31(&problem.cs, &problem.levy, &domain, 2000, 0, DEFAULT_SMALLNESS_THRESHOLD)?;
    if !cert.holds {
        return Err(Error::Precondition(format!(
            "smallness condition fails: L_sigma = {:.4}, C_h = {:.4}, threshold {}",
            cert.l_sigma, cert.c_tilde_h, cert.threshold
        )));
    }
    march(problem, kind, &problem.terminal()?, true)
}

/// Special-case march from an explicit terminal field.
pub fn solve_hjbi_from(problem: &GameProblem, kind: ValueKind, terminal: &[f64]) -> Result<PdeSolution> {
    if terminal.len() != problem.space.n_nodes {
        return Err(Error::GridMismatch);
    }
    march(problem, kind, terminal, !problem.cs.is_special_case())
}

fn march(problem: &GameProblem, kind: ValueKind, terminal: &[f64], general: bool) -> Result<PdeSolution> {
    let n = problem.time.n_steps;
    let nodes = problem.space.n_nodes;
    let dt = problem.time.dt();
    let clamp_gradient = general && problem.cs.sigma_depends_on_z();
    let pairs = problem.controls.u_values.len() * problem.controls.v_values.len();

    let mut values = vec![Vec::new(); n + 1];
    let mut argmax_u = vec![vec![0; nodes]; n + 1];
    let mut argmin_v = vec![vec![0; nodes]; n + 1];
    values[n] = terminal.to_vec();
    let mut out = PdeSolution {
        field: ValueField {
            time: problem.time,
            space: problem.space,
            values: Vec::new(),
            kind,
            argmax_u: Vec::new(),
            argmin_v: Vec::new(),
        },
        min_center_weight: 1.0,
        clamp_events: 0,
        evaluations: 0,
        max_algebraic_residual: 0.0,
    };

    for slice in (0..n).rev() {
        let w = &values[slice + 1];
        let opts: Vec<NodeOpt> = (0..nodes)
            .into_par_iter()
            .map(|j| optimise_node(problem, w, slice, j, kind, clamp_gradient))
            .collect::<Result<_>>()?;
        let worst = opts.iter().map(|o| o.cfl_ratio).fold(0.0, f64::max);
        if worst > CFL_LIMIT {
            return Err(Error::Cfl {
                ratio: worst,
                limit: CFL_LIMIT,
                suggested_dt: dt * CFL_LIMIT / worst,
            });
        }
        out.min_center_weight = out.min_center_weight.min(1.0 - worst);
        let clamps: usize = opts.iter().map(|o| o.clamps).sum();
        out.clamp_events += clamps;
        out.evaluations += nodes * pairs;
        if clamp_gradient && clamps as f64 > MAX_CLAMP_FRACTION * (nodes * pairs) as f64 {
            return Err(Error::Algebraic(format!(
                "slice {slice}: gradient clamped to 0 at {clamps} of {} evaluations",
                nodes * pairs
            )));
        }
        let mut row = Vec::with_capacity(nodes);
        for (j, o) in opts.iter().enumerate() {
            row.push(w[j] + dt * o.value);
            argmax_u[slice][j] = o.iu;
            argmin_v[slice][j] = o.iv;
            out.max_algebraic_residual = out.max_algebraic_residual.max(o.algebraic_residual);
        }
        values[slice] = row;
    }
    out.field.values = values;
    out.field.argmax_u = argmax_u;
    out.field.argmin_v = argmin_v;
    Ok(out)
}

/// Scheme residual `(W_{k+1} - W_k)/dt + H(W_k)` with the field itself as the
/// test function. Zero on the terminal slice and at the two boundary nodes.
pub fn viscosity_residual(field: &ValueField, problem: &GameProblem) -> Result<Vec<Vec<f64>>> {
    if field.time != problem.time || field.space != problem.space {
        return Err(Error::GridMismatch);
    }
    let n = problem.time.n_steps;
    let nodes = problem.space.n_nodes;
    let dt = problem.time.dt();
    let clamp_gradient = !problem.cs.is_special_case() && problem.cs.sigma_depends_on_z();
    let mut out = vec![vec![0.0; nodes]; n + 1];
    for (slice, row) in out.iter_mut().enumerate().take(n) {
        let w = &field.values[slice];
        let next = &field.values[slice + 1];
        let vals: Vec<f64> = (1..nodes - 1)
            .into_par_iter()
            .map(|j| {
                let o = optimise_node(problem, w, slice, j, field.kind, clamp_gradient)?;
                Ok((next[j] - w[j]) / dt + o.value)
            })
            .collect::<Result<_>>()?;
        row[1..nodes - 1].copy_from_slice(&vals);
    }
    Ok(out)
}

/// Smallest step count keeping the explicit march within the CFL limit,
/// estimated from the terminal field.
pub fn cfl_min_steps(problem: &GameProblem) -> Result<usize> {
    let w = problem.terminal()?;
    let general = !problem.cs.is_special_case();
    let probe = GameProblem {
        time: crate::grid::TimeGrid::new(problem.time.t0, problem.time.t_end, 1)?,
        ..problem.clone()
    };
    let mut rate: f64 = 0.0;
    for j in 0..problem.space.n_nodes {
        let o = optimise_node(&probe, &w, 0, j, ValueKind::Lower, general)?;
        rate = rate.max(o.cfl_ratio / probe.time.dt());
    }
    Ok(((problem.time.horizon() * rate / CFL_LIMIT).ceil() as usize).max(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::expr::Expr;
    use crate::coeffs::MonotonicityCert;
    use crate::fbsde::ControlGrid;
    use crate::grid::TimeGrid;
    use crate::stochastics::discretize_levy;

    fn problem(pairs: &[(&str, &str)], levy: LevyModel, controls: ControlGrid, n_steps: usize, space: SpaceGrid) -> GameProblem {
        GameProblem::new(
            CoefficientSet::from_pairs(pairs).unwrap(),
            levy,
            controls,
            MonotonicityCert::new(1.0, 1.0, 0.0, 0.0, 1.0).unwrap(),
            TimeGrid::new(0.0, 1.0, n_steps).unwrap(),
            space,
        )
        .unwrap()
    }

    fn pm_atoms() -> LevyModel {
        discretize_levy(&[(-1.0, 0.5), (1.0, 0.5)], &Expr::parse("min(1, abs(e))").unwrap(), 1.0).unwrap()
    }

    #[test]
    fn nonlocal_examples() {
        let space = SpaceGrid::new(-5.0, 5.0, 51).unwrap();
        let cs = CoefficientSet::from_pairs(&[("h", "e"), ("phi", "x")]).unwrap();
        let quad: Vec<f64> = space.nodes().iter().map(|x| x * x).collect();
        let j = 25 + 3;
        let x = space.x(j);
        let (b, _) = evaluate_nonlocal(&quad, &space, j, &cs, &pm_atoms(), 0.0, 0.0, 0.0, 0.0, 0.0, 2.0 * x).unwrap();
        assert!((b - 1.0).abs() < 1e-12);
        let p = problem(&[("h", "e"), ("phi", "x^2")], pm_atoms(), ControlGrid::trivial(), 10, space);
        let (input, h) = hamiltonian(&p, &quad, 0, j, 0.0, 0.0).unwrap();
        assert_eq!(input.phi_val, x * x);
        assert!((input.a - 2.0).abs() < 1e-9);
        assert!((h - 1.0).abs() < 1e-12);
        let lin: Vec<f64> = space.nodes().iter().map(|x| 3.0 * x - 1.0).collect();
        let (b, _) = evaluate_nonlocal(&lin, &space, j, &cs, &pm_atoms(), 0.0, 0.0, 0.0, 0.0, 0.0, 3.0).unwrap();
        assert!(b.abs() < 1e-12);
        assert_eq!(
            evaluate_nonlocal(&lin, &space, j, &cs, &LevyModel::none(), 0.0, 0.0, 0.0, 0.0, 0.0, 3.0).unwrap(),
            (0.0, 0.0)
        );
    }

    #[test]
    fn heat_case_is_exact_on_quadratics() {
        let space = SpaceGrid::new(-10.0, 10.0, 201).unwrap();
        let mut p = problem(&[("sigma", "1"), ("phi", "x^2")], LevyModel::none(), ControlGrid::trivial(), 10, space);
        let n = cfl_min_steps(&p).unwrap();
        assert_eq!(n, 112);
        p.time = TimeGrid::new(0.0, 1.0, n).unwrap();
        let sol = solve_hjbi_special(&p, ValueKind::Lower).unwrap();
        assert!(sol.scheme_monotone());
        for j in space.interior(0.1) {
            let exact = space.x(j).powi(2) + 1.0;
            assert!((sol.field.values[0][j] - exact).abs() <= 0.02 * exact);
        }
        let res = viscosity_residual(&sol.field, &p).unwrap();
        assert!(res[n].iter().all(|&r| r == 0.0));
        assert!(res.iter().flatten().all(|r| r.abs() < 1e-6));
    }

    #[test]
    fn pure_jump_case() {
        let space = SpaceGrid::new(-30.0, 30.0, 301).unwrap();
        let p = problem(&[("h", "e"), ("phi", "x^2")], pm_atoms(), ControlGrid::trivial(), 5, space);
        let sol = solve_hjbi_special(&p, ValueKind::Lower).unwrap();
        let res = viscosity_residual(&sol.field, &p).unwrap();
        for j in space.interior(0.1) {
            let exact = space.x(j).powi(2) + 1.0;
            assert!((sol.field.values[0][j] - exact).abs() <= 0.01 * exact);
            for row in &res {
                assert!(row[j].abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn transport_game() {
        let space = SpaceGrid::new(-10.0, 10.0, 201).unwrap();
        let c = ControlGrid::new(vec![-1.0, 1.0], vec![-1.0, 1.0]).unwrap();
        let p = problem(&[("b", "u*v"), ("phi", "x")], LevyModel::none(), c, 20, space);
        let w = solve_hjbi_special(&p, ValueKind::Lower).unwrap().field;
        let u = solve_hjbi_special(&p, ValueKind::Upper).unwrap().field;
        for j in space.interior(0.1) {
            let x = space.x(j);
            assert!((w.values[0][j] - (x - 1.0)).abs() <= 0.02 * (x - 1.0).abs().max(1.0));
            assert!((u.values[0][j] - (x + 1.0)).abs() <= 0.02 * (x + 1.0).abs().max(1.0));
        }
    }

    #[test]
    fn general_matches_special_without_z() {
        let space = SpaceGrid::new(-4.0, 4.0, 81).unwrap();
        let c = ControlGrid::new(vec![-1.0, 1.0], vec![0.0, 1.0]).unwrap();
        let p = problem(
            &[("b", "u*v - 0.5*y"), ("sigma", "0.5 + 0.2*u"), ("h", "0.2*e"), ("f", "x - 0.5*y + k"), ("phi", "x + 0.5*sin(x)")],
            discretize_levy(&[(-0.5, 0.5), (0.5, 0.5)], &Expr::parse("abs(e)").unwrap(), 1.0).unwrap(),
            c,
            200,
            space,
        );
        let a = solve_hjbi_special(&p, ValueKind::Lower).unwrap().field;
        let b = solve_hjbi_general(&p, ValueKind::Lower).unwrap().field;
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn general_representation_case() {
        let space = SpaceGrid::new(-4.0, 4.0, 81).unwrap();
        let p = problem(&[("sigma", "0.2*(1 - z)"), ("phi", "x")], LevyModel::none(), ControlGrid::trivial(), 40, space);
        let sol = solve_hjbi_general(&p, ValueKind::Lower).unwrap();
        assert!(sol.max_algebraic_residual <= 1e-12);
        assert!(sol.field.values.iter().flatten().all(|v| v.is_finite()));
        assert_eq!(sol.clamp_events, 0);

        let bad = problem(&[("sigma", "z"), ("phi", "x")], LevyModel::none(), ControlGrid::trivial(), 40, space);
        assert!(matches!(solve_hjbi_general(&bad, ValueKind::Lower), Err(Error::Precondition(_))));
        assert!(matches!(solve_hjbi_special(&p, ValueKind::Lower), Err(Error::Precondition(_))));
    }

    #[test]
    fn cfl_is_guarded() {
        let space = SpaceGrid::new(-1.0, 1.0, 41).unwrap();
        let p = problem(&[("sigma", "1"), ("phi", "x")], LevyModel::none(), ControlGrid::trivial(), 10, space);
        assert!(matches!(solve_hjbi_special(&p, ValueKind::Lower), Err(Error::Cfl { .. })));
    }
}
