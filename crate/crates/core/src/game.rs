//! Lower and upper value fields by backward dynamic programming.
//!
//! Each step solves the one-step backward semigroup for every control pair
//! and orders the optimisation per node: `max_u min_v` for the lower value,
//! `min_v max_u` for the upper value. Ties go to the first listed control.

use rayon::prelude::*;
use serde::Serialize;

use crate::coeffs::{CoefficientSet, H22Report, MonotonicityCert};
use crate::error::Slot;
use crate::error::{Error, Result};
use crate::fbsde::{ControlGrid, Fbsde, Policy, SemigroupQuery, SolverSettings};
use crate::grid::{SpaceGrid, TimeGrid};
use crate::stochastics::LevyModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    Lower,
    Upper,
}

impl ValueKind {
    pub fn name(self) -> &'static str {
        match self {
            ValueKind::Lower => "lower",
            ValueKind::Upper => "upper",
        }
    }
}

impl std::str::FromStr for ValueKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lower" => Ok(ValueKind::Lower),
            "upper" => Ok(ValueKind::Upper),
            other => Err(Error::Precondition(format!("kind must be lower or upper, got '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GameProblem {
    pub cs: CoefficientSet,
    pub levy: LevyModel,
    pub controls: ControlGrid,
    pub cert: MonotonicityCert,
    pub time: TimeGrid,
    pub space: SpaceGrid,
    pub settings: SolverSettings,
}

impl GameProblem {
    pub fn new(
        cs: CoefficientSet,
        levy: LevyModel,
        controls: ControlGrid,
        cert: MonotonicityCert,
        time: TimeGrid,
        space: SpaceGrid,
    ) -> Result<Self> {
        cert.validate()?;
        Ok(Self {
            cs,
            levy,
            controls,
            cert,
            time,
            space,
            settings: SolverSettings::default(),
        })
    }

    pub fn with_settings(mut self, settings: SolverSettings) -> Self {
        self.settings = settings;
        self
    }

    /// Same problem on the slices `from..=to` of the time grid.
    pub fn restricted(&self, from: usize, to: usize) -> Result<Self> {
        Ok(Self {
            time: self.time.sub_grid(from, to)?,
            ..self.clone()
        })
    }

    pub fn with_grids(&self, time: TimeGrid, space: SpaceGrid) -> Self {
        Self {
            time,
            space,
            ..self.clone()
        }
    }

    pub fn system(&self) -> Fbsde<'_> {
        Fbsde::new(&self.cs, &self.levy, self.time, self.space).with_settings(self.settings)
    }

    pub fn terminal(&self) -> Result<Vec<f64>> {
        self.space.nodes().iter().map(|&x| self.cs.phi(x)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueField {
    pub time: TimeGrid,
    pub space: SpaceGrid,
    /// `[slice][node]`
    pub values: Vec<Vec<f64>>,
    pub kind: ValueKind,
    /// Chosen control indices `[slice][node]`; zero on the terminal slice.
    pub argmax_u: Vec<Vec<usize>>,
    pub argmin_v: Vec<Vec<usize>>,
}

impl ValueField {
    pub fn same_grid(&self, other: &Self) -> bool {
        self.time == other.time && self.space == other.space
    }

    pub fn at_start(&self) -> &[f64] {
        &self.values[0]
    }
}

/// Stagewise value with terminal `Phi` from the problem.
pub fn solve_value(problem: &GameProblem, kind: ValueKind) -> Result<ValueField> {
    solve_value_from(problem, kind, &problem.terminal()?)
}

pub fn lower_value(problem: &GameProblem) -> Result<ValueField> {
    solve_value(problem, ValueKind::Lower)
}

pub fn upper_value(problem: &GameProblem) -> Result<ValueField> {
    solve_value(problem, ValueKind::Upper)
}

/// Stagewise value with an explicit terminal field. Coupled models need a
/// verified monotonicity certificate.
pub fn solve_value_from(problem: &GameProblem, kind: ValueKind, terminal: &[f64]) -> Result<ValueField> {
    if !problem.cs.is_decoupled() && !problem.cert.verified {
        return Err(Error::Precondition(
            "coupled model without a verified monotonicity certificate".into(),
        ));
    }
    let n = problem.time.n_steps;
    let nodes = problem.space.n_nodes;
    if terminal.len() != nodes {
        return Err(Error::GridMismatch);
    }
    let system = problem.system();
    let controls = &problem.controls;
    let pairs = controls.pairs();
    let n_v = controls.v_values.len();

    let mut values = vec![Vec::new(); n + 1];
    let mut argmax_u = vec![vec![0; nodes]; n + 1];
    let mut argmin_v = vec![vec![0; nodes]; n + 1];
    values[n] = terminal.to_vec();

    for slice in (0..n).rev() {
        let next = &values[slice + 1];
        let table: Vec<Vec<f64>> = pairs
            .par_iter()
            .map(|&(iu, iv)| {
                system.backward_semigroup(&SemigroupQuery {
                    t_slice: slice,
                    delta_steps: 1,
                    u_policy: Policy::Constant(controls.u_values[iu]),
                    v_policy: Policy::Constant(controls.v_values[iv]),
                    terminal_field: next.clone(),
                })
            })
            .collect::<Result<_>>()?;
        let cell = |iu: usize, iv: usize, j: usize| table[iu * n_v + iv][j];
        let mut row = vec![0.0; nodes];
        for j in 0..nodes {
            let (w, bu, bv) = match kind {
                ValueKind::Lower => saddle_lower(controls, |iu, iv| cell(iu, iv, j)),
                ValueKind::Upper => saddle_upper(controls, |iu, iv| cell(iu, iv, j)),
            };
            row[j] = w;
            argmax_u[slice][j] = bu;
            argmin_v[slice][j] = bv;
        }
        values[slice] = row;
    }
    Ok(ValueField {
        time: problem.time,
        space: problem.space,
        values,
        kind,
        argmax_u,
        argmin_v,
    })
}

/// `max_u min_v`, returning the value and the chosen `(u, v)` indices.
pub(crate) fn saddle_lower(c: &ControlGrid, cell: impl Fn(usize, usize) -> f64) -> (f64, usize, usize) {
    let mut best = (f64::NEG_INFINITY, 0, 0);
    for iu in 0..c.u_values.len() {
        let mut inner = (f64::INFINITY, 0);
        for iv in 0..c.v_values.len() {
            let y = cell(iu, iv);
            if y < inner.0 {
                inner = (y, iv);
            }
        }
        if inner.0 > best.0 {
            best = (inner.0, iu, inner.1);
        }
    }
    best
}

/// `min_v max_u`.
pub(crate) fn saddle_upper(c: &ControlGrid, cell: impl Fn(usize, usize) -> f64) -> (f64, usize, usize) {
    let mut best = (f64::INFINITY, 0, 0);
    for iv in 0..c.v_values.len() {
        let mut inner = (f64::NEG_INFINITY, 0);
        for iu in 0..c.u_values.len() {
            let y = cell(iu, iv);
            if y > inner.0 {
                inner = (y, iu);
            }
        }
        if inner.0 < best.0 {
            best = (inner.0, inner.1, iv);
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DppReport {
    pub split_slice: usize,
    pub sup_gap: f64,
}

/// Lower value at slice 0 computed directly and by composition through
/// `split_slice`.
pub fn dpp_consistency(problem: &GameProblem, split_slice: usize) -> Result<DppReport> {
    let n = problem.time.n_steps;
    if split_slice == 0 || split_slice >= n {
        return Err(Error::Precondition(format!("split slice {split_slice} not inside 1..{n}")));
    }
    let direct = lower_value(problem)?;
    let late = lower_value(&problem.restricted(split_slice, n)?)?;
    let early = solve_value_from(&problem.restricted(0, split_slice)?, ValueKind::Lower, &late.values[0])?;
    let sup_gap = sup_diff(&direct.values[0], &early.values[0]);
    Ok(DppReport { split_slice, sup_gap })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IsaacsReport {
    pub max_gap: f64,
    /// `U - W`, `[slice][node]`.
    pub gap_field: Vec<Vec<f64>>,
    pub tolerance: f64,
    pub value_exists: bool,
}

/// Default tolerance for the value-existence flag: `4 dt`.
pub fn isaacs_tolerance(time: &TimeGrid) -> f64 {
    4.0 * time.dt()
}

pub fn isaacs_gap(lower: &ValueField, upper: &ValueField, tolerance: f64) -> Result<IsaacsReport> {
    if !lower.same_grid(upper) {
        return Err(Error::GridMismatch);
    }
    let gap_field: Vec<Vec<f64>> = upper
        .values
        .iter()
        .zip(&lower.values)
        .map(|(u, w)| u.iter().zip(w).map(|(a, b)| a - b).collect())
        .collect();
    let max_gap = gap_field.iter().flatten().fold(0.0_f64, |m, g| m.max(g.abs()));
    Ok(IsaacsReport {
        max_gap,
        gap_field,
        tolerance,
        value_exists: max_gap <= tolerance,
    })
}

/// Lipschitz-in-`x` constant implied by coefficient estimates:
/// `(L_phi + T L_f) exp(T (L_b + L_sigma + Lambda L_h + L_f))`.
pub fn lipschitz_bound(report: &H22Report, levy: &LevyModel, horizon: f64) -> f64 {
    let l_f = report.joint(Slot::F);
    let rate = report.joint(Slot::B) + report.joint(Slot::Sigma) + levy.total_intensity() * report.joint(Slot::H) + l_f;
    (report.joint(Slot::Phi) + horizon * l_f) * (horizon * rate).exp()
}

/// Largest difference quotient in `x` over the given nodes and all slices.
pub fn lipschitz_in_x(field: &ValueField, nodes: std::ops::Range<usize>) -> f64 {
    let dx = field.space.dx();
    let mut l: f64 = 0.0;
    for row in &field.values {
        for j in nodes.start..nodes.end.saturating_sub(1) {
            l = l.max((row[j + 1] - row[j]).abs() / dx);
        }
    }
    l
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonotonicityReport {
    /// `min (W(x) - W(y)) G (x - y)` over all slices and node pairs.
    pub worst: f64,
    pub tolerance: f64,
    pub holds: bool,
}

pub fn monotonicity_under_g(field: &ValueField, g: f64, tolerance: f64) -> MonotonicityReport {
    let xs = field.space.nodes();
    let worst = field
        .values
        .par_iter()
        .map(|row| {
            let mut w = f64::INFINITY;
            for a in 0..xs.len() {
                for b in a + 1..xs.len() {
                    w = w.min((row[a] - row[b]) * g * (xs[a] - xs[b]));
                }
            }
            w
        })
        .reduce(|| f64::INFINITY, f64::min);
    MonotonicityReport {
        worst,
        tolerance,
        holds: worst >= -tolerance,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HolderFit {
    /// `(tau, sup |W(t,x) - W(t+tau,x)| / (1+|x|))` samples.
    pub samples: Vec<(f64, f64)>,
    pub exponent: f64,
    /// `max D(tau) / sqrt(tau)`.
    pub constant: f64,
}

/// Log-log fit of the time modulus of continuity over lags in `[tau_min, tau_max]`.
pub fn holder_fit(field: &ValueField, nodes: std::ops::Range<usize>, tau_min: f64, tau_max: f64) -> Result<HolderFit> {
    let dt = field.time.dt();
    let n = field.time.n_steps;
    let m_lo = ((tau_min / dt).round() as usize).max(1);
    let m_hi = ((tau_max / dt).round() as usize).min(n);
    if m_lo >= m_hi {
        return Err(Error::Precondition(format!("lag range [{tau_min}, {tau_max}] too narrow for dt = {dt}")));
    }
    let mut lags = Vec::new();
    let mut m = m_lo as f64;
    while (m.round() as usize) <= m_hi {
        let lag = m.round() as usize;
        if lags.last() != Some(&lag) {
            lags.push(lag);
        }
        m *= 1.25;
    }
    let xs = field.space.nodes();
    let samples: Vec<(f64, f64)> = lags
        .iter()
        .map(|&lag| {
            let mut d: f64 = 0.0;
            for s in 0..=n - lag {
                for j in nodes.clone() {
                    let diff = (field.values[s][j] - field.values[s + lag][j]).abs();
                    d = d.max(diff / (1.0 + xs[j].abs()));
                }
            }
            (lag as f64 * dt, d)
        })
        .collect();
    let pts: Vec<(f64, f64)> = samples
        .iter()
        .filter(|s| s.1 > 0.0)
        .map(|&(t, d)| (t.ln(), d.ln()))
        .collect();
    let exponent = slope(&pts);
    let constant = samples.iter().map(|&(t, d)| d / t.sqrt()).fold(0.0, f64::max);
    Ok(HolderFit {
        samples,
        exponent,
        constant,
    })
}

/// Least-squares slope.
pub fn slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

pub(crate) fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
