//! Property suite: runs the invariants of every module against one problem
//! and collects a machine-readable verdict per property.

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::algebraic::{bracket_root, initial_bracket, residual, solve_representation, AlgebraicQuery};
use crate::bsde::{compare_bsde, solve_bsde, BackwardSolution, DriverArgs, StencilFamily};
use crate::coeffs::expr::{Bindings, Expr, Var};
use crate::coeffs::{check_h22, check_h23, check_h31, CoefficientSet, H22Report, ProbeDomain, DEFAULT_SMALLNESS_THRESHOLD};
use crate::config::ConfigDoc;
use crate::error::{Error, Result, Slot};
use crate::fbsde::{apriori_bounds, Policy, SemigroupQuery};
use crate::game::{
    dpp_consistency, holder_fit, isaacs_gap, isaacs_tolerance, lipschitz_bound, lipschitz_in_x, lower_value,
    monotonicity_under_g, slope, solve_value_from, upper_value, GameProblem, ValueField, ValueKind,
};
use crate::grid::{SpaceGrid, TimeGrid};
use crate::pde::{cfl_min_steps, solve_hjbi_from, solve_hjbi_general, solve_hjbi_special, PdeSolution};
use crate::stochastics::{discretize_levy, path_statistics, sample_paths, LevyModel, NodeStencil};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// A registered property.
#[derive(Debug, Clone, Copy)]
pub struct PropertySpec {
    pub id: &'static str,
    pub anchor: &'static str,
}

/// Every property the suite can run, in report order.
pub const REGISTRY: &[PropertySpec] = &[
    PropertySpec { id: "expr-roundtrip", anchor: "printing then parsing an expression preserves its values" },
    PropertySpec { id: "h23-monotone-budget", anchor: "monotonicity violation is a running maximum over probes" },
    PropertySpec { id: "lipschitz-estimate", anchor: "sampled Lipschitz constants of linear coefficients" },
    PropertySpec { id: "stencil-moments", anchor: "transition stencils match the forward moments" },
    PropertySpec { id: "jump-split", anchor: "off-grid jump targets keep mass and mean" },
    PropertySpec { id: "path-laws", anchor: "sampled increments follow Gaussian and Poisson laws" },
    PropertySpec { id: "terminal", anchor: "backward solutions meet their terminal data" },
    PropertySpec { id: "bsde-comparison", anchor: "comparison theorem for BSDEs with jumps" },
    PropertySpec { id: "convergence-order", anchor: "first-order convergence of the backward scheme" },
    PropertySpec { id: "zero-noise", anchor: "without noise the BSDE is an ODE" },
    PropertySpec { id: "representation-residual", anchor: "solvability of the representation equation" },
    PropertySpec { id: "representation-uniqueness", anchor: "uniqueness of the representation root" },
    PropertySpec { id: "representation-consistency", anchor: "algebraic constraint inside the Isaacs equation" },
    PropertySpec { id: "semigroup", anchor: "backward semigroup composition" },
    PropertySpec { id: "picard-contraction", anchor: "small-interval contraction of the coupled system" },
    PropertySpec { id: "apriori", anchor: "a-priori growth and Lipschitz bounds of Y" },
    PropertySpec { id: "ordering", anchor: "lower value never exceeds upper value" },
    PropertySpec { id: "comparison", anchor: "value monotone in terminal data" },
    PropertySpec { id: "monotonicity", anchor: "value monotone in x under G" },
    PropertySpec { id: "lipschitz", anchor: "value Lipschitz in x" },
    PropertySpec { id: "holder", anchor: "value 1/2-Holder continuous in t" },
    PropertySpec { id: "determinism", anchor: "the value is a deterministic function" },
    PropertySpec { id: "dpp", anchor: "dynamic programming principle for the lower value" },
    PropertySpec { id: "isaacs", anchor: "lower and upper values coincide under the Isaacs condition" },
    PropertySpec { id: "scheme-monotone", anchor: "explicit scheme is monotone under CFL" },
    PropertySpec { id: "pde-comparison", anchor: "comparison for the Isaacs equation" },
    PropertySpec { id: "cross-validation", anchor: "lower value solves the lower Isaacs equation" },
    PropertySpec { id: "pde-ordering", anchor: "lower Isaacs solution below upper" },
    PropertySpec { id: "mc-reduction", anchor: "value as an expectation of the cost" },
    PropertySpec { id: "reproducibility", anchor: "reports are reproducible" },
    PropertySpec { id: "coverage", anchor: "every module invariant has a property" },
    PropertySpec { id: "csv-roundtrip", anchor: "field export round-trips" },
    PropertySpec { id: "exit-codes", anchor: "configuration errors exit with code 1 and write nothing" },
];

/// Module invariants and the property that checks each.
pub const INVARIANTS: &[(&str, &str, &str)] = &[
    ("coeffs", "parse/print round-trip", "expr-roundtrip"),
    ("coeffs", "violation monotone in probe budget", "h23-monotone-budget"),
    ("coeffs", "Lipschitz estimates of linear sets", "lipschitz-estimate"),
    ("stochastics", "stencil weights and moments", "stencil-moments"),
    ("stochastics", "interpolation split preserves mass and mean", "jump-split"),
    ("stochastics", "path statistics match their laws", "path-laws"),
    ("bsde", "terminal consistency", "terminal"),
    ("bsde", "comparison on randomized ordered pairs", "bsde-comparison"),
    ("bsde", "convergence order", "convergence-order"),
    ("bsde", "zero-noise degeneration", "zero-noise"),
    ("algebraic", "residual bound", "representation-residual"),
    ("algebraic", "uniqueness witness", "representation-uniqueness"),
    ("algebraic", "consistency with the Isaacs constraint", "representation-consistency"),
    ("fbsde", "semigroup composition", "semigroup"),
    ("fbsde", "Picard contraction", "picard-contraction"),
    ("fbsde", "a-priori bounds", "apriori"),
    ("game", "ordering W <= U", "ordering"),
    ("game", "comparison in terminal data", "comparison"),
    ("game", "monotonicity in x under G", "monotonicity"),
    ("game", "Lipschitz in x", "lipschitz"),
    ("game", "1/2-Holder in t", "holder"),
    ("game", "determinism", "determinism"),
    ("pde", "monotone scheme", "scheme-monotone"),
    ("pde", "comparison at scheme level", "pde-comparison"),
    ("pde", "cross-validation with the game", "cross-validation"),
    ("pde", "W <= U for PDE fields", "pde-ordering"),
    ("verify", "reproducible reports", "reproducibility"),
    ("verify", "coverage lock", "coverage"),
    ("cli", "CSV round-trip", "csv-roundtrip"),
    ("cli", "exit codes", "exit-codes"),
];

pub fn property(id: &str) -> Option<&'static PropertySpec> {
    REGISTRY.iter().find(|p| p.id == id)
}

/// Invariants without a registered property, and invariants claimed twice.
pub fn coverage_gaps() -> Vec<String> {
    let mut gaps = Vec::new();
    let mut seen = BTreeMap::new();
    for (module, statement, id) in INVARIANTS {
        if property(id).is_none() {
            gaps.push(format!("{module}: '{statement}' has no property"));
        }
        if let Some(prev) = seen.insert(*id, *statement) {
            gaps.push(format!("property {id} claims both '{prev}' and '{statement}'"));
        }
    }
    gaps
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Errored,
    Skipped,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportEntry {
    pub id: String,
    pub anchor: String,
    pub measured: f64,
    pub tol: f64,
    pub tol_source: String,
    pub pass: bool,
    pub status: Status,
    pub runtime_ms: u64,
    pub detail: Value,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerificationReport {
    pub version: String,
    pub config_digest: String,
    pub seed: u64,
    pub entries: Vec<ReportEntry>,
}

impl VerificationReport {
    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn entry(&self, id: &str) -> Option<&ReportEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// JSON with every `runtime_ms` zeroed, for reproducibility comparisons.
    pub fn body_without_timings(&self) -> String {
        let mut copy = self.clone();
        copy.entries.iter_mut().for_each(|e| e.runtime_ms = 0);
        copy.to_json()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifySettings {
    pub seed: u64,
    pub config_digest: String,
    /// Tolerance overrides keyed by property id.
    pub tolerances: BTreeMap<String, f64>,
    pub probes: usize,
    pub bsde_pairs: usize,
    pub game_pairs: usize,
    pub mc_paths: Vec<usize>,
    pub mc_seeds: usize,
}

impl Default for VerifySettings {
    fn default() -> Self {
        Self {
            seed: 0,
            config_digest: String::new(),
            tolerances: BTreeMap::new(),
            probes: 2000,
            bsde_pairs: 100,
            game_pairs: 50,
            mc_paths: vec![16, 32, 64, 128, 256],
            mc_seeds: 200,
        }
    }
}

impl VerifySettings {
    /// Reads `[verify]`: counts plus tolerance overrides named after property
    /// ids with `_` for `-`.
    pub fn from_doc(doc: &ConfigDoc, seed: u64) -> Result<Self> {
        let d = Self::default();
        let mut tolerances = BTreeMap::new();
        for spec in REGISTRY {
            let key = spec.id.replace('-', "_");
            if doc.entry("verify", &key).is_some() {
                tolerances.insert(spec.id.to_string(), doc.require_f64("verify", &key)?);
            }
        }
        let mc_paths = doc
            .list_or("verify", "mc_paths", &[16.0, 32.0, 64.0, 128.0, 256.0])?
            .into_iter()
            .map(|v| v as usize)
            .collect::<Vec<_>>();
        if mc_paths.len() < 2 || mc_paths.iter().any(|&n| n < 2) {
            let line = doc.entry("verify", "mc_paths").map_or(0, |e| e.line);
            return Err(Error::config(line, "mc_paths needs at least two sizes >= 2"));
        }
        Ok(Self {
            seed,
            config_digest: doc.digest(),
            tolerances,
            probes: doc.usize_or("verify", "probes", d.probes)?.max(100),
            bsde_pairs: doc.usize_or("verify", "bsde_pairs", d.bsde_pairs)?,
            game_pairs: doc.usize_or("verify", "game_pairs", d.game_pairs)?,
            mc_paths,
            mc_seeds: doc.usize_or("verify", "mc_seeds", d.mc_seeds)?.max(2),
        })
    }
}

/// Which properties to run.
#[derive(Debug, Clone, PartialEq)]
pub enum Selection {
    All,
    Ids(Vec<String>),
}

impl Selection {
    /// `"all"` or a comma-separated id list.
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        if text == "all" {
            return Ok(Selection::All);
        }
        let ids: Vec<String> = text
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        if let Some(bad) = ids.iter().find(|id| property(id).is_none()) {
            return Err(Error::config(0, format!("unknown property id '{bad}'")));
        }
        Ok(Selection::Ids(ids))
    }

    fn includes(&self, id: &str) -> bool {
        match self {
            Selection::All => true,
            Selection::Ids(ids) => ids.iter().any(|s| s == id),
        }
    }
}

struct Outcome {
    measured: f64,
    tol: f64,
    tol_source: String,
    pass: bool,
    status: Option<Status>,
    detail: Value,
}

impl Outcome {
    fn check(measured: f64, tol: (f64, String), pass: bool, detail: Value) -> Self {
        Self {
            measured,
            tol: tol.0,
            tol_source: tol.1,
            pass,
            status: None,
            detail,
        }
    }

    /// `measured <= tol`.
    fn at_most(measured: f64, tol: (f64, String), detail: Value) -> Self {
        let pass = measured <= tol.0;
        Self::check(measured, tol, pass, detail)
    }

    fn skipped(reason: &str) -> Self {
        Self {
            measured: f64::NAN,
            tol: f64::NAN,
            tol_source: "n/a".into(),
            pass: true,
            status: Some(Status::Skipped),
            detail: json!({ "reason": reason }),
        }
    }
}

/// Fields shared between properties, computed at most once.
struct Context<'a> {
    problem: &'a GameProblem,
    settings: &'a VerifySettings,
    lower: OnceLock<std::result::Result<ValueField, String>>,
    upper: OnceLock<std::result::Result<ValueField, String>>,
    pde_lower: OnceLock<std::result::Result<PdeSolution, String>>,
    pde_upper: OnceLock<std::result::Result<PdeSolution, String>>,
    h22: OnceLock<std::result::Result<H22Report, String>>,
    cost: OnceLock<std::result::Result<BackwardSolution, String>>,
    reduction: OnceLock<std::result::Result<ReductionReport, String>>,
}

fn cached<T: Clone>(cell: &OnceLock<std::result::Result<T, String>>, f: impl FnOnce() -> Result<T>) -> Result<T> {
    cell.get_or_init(|| f().map_err(|e| e.to_string()))
        .clone()
        .map_err(Error::Precondition)
}

impl<'a> Context<'a> {
    fn new(problem: &'a GameProblem, settings: &'a VerifySettings) -> Self {
        Self {
            problem,
            settings,
            lower: OnceLock::new(),
            upper: OnceLock::new(),
            pde_lower: OnceLock::new(),
            pde_upper: OnceLock::new(),
            h22: OnceLock::new(),
            cost: OnceLock::new(),
            reduction: OnceLock::new(),
        }
    }

    fn tol(&self, id: &str, default: f64, source: &str) -> (f64, String) {
        match self.settings.tolerances.get(id) {
            Some(&t) => (t, "config".to_string()),
            None => (default, source.to_string()),
        }
    }

    fn dt(&self) -> f64 {
        self.problem.time.dt()
    }

    fn dx(&self) -> f64 {
        self.problem.space.dx()
    }

    fn domain(&self) -> ProbeDomain {
        probe_domain(self.problem)
    }

    fn lower(&self) -> Result<ValueField> {
        cached(&self.lower, || lower_value(self.problem))
    }

    fn upper(&self) -> Result<ValueField> {
        cached(&self.upper, || upper_value(self.problem))
    }

    fn pde(&self, kind: ValueKind) -> Result<PdeSolution> {
        let cell = match kind {
            ValueKind::Lower => &self.pde_lower,
            ValueKind::Upper => &self.pde_upper,
        };
        cached(cell, || solve_pde(self.problem, kind))
    }

    fn h22(&self) -> Result<H22Report> {
        cached(&self.h22, || {
            check_h22(
                &self.problem.cs,
                &self.problem.levy,
                &self.domain(),
                self.settings.probes,
                self.settings.seed,
                f64::INFINITY,
                f64::INFINITY,
            )
        })
    }

    fn lipschitz_constant(&self) -> Result<f64> {
        Ok(lipschitz_bound(&self.h22()?, &self.problem.levy, self.problem.time.horizon()))
    }

    fn policies(&self) -> (Policy, Policy) {
        let c = &self.problem.controls;
        (Policy::Constant(c.u_values[0]), Policy::Constant(c.v_values[0]))
    }

    fn cost(&self) -> Result<BackwardSolution> {
        cached(&self.cost, || {
            let (u, v) = self.policies();
            self.problem.system().solve_horizon(&u, &v)
        })
    }

    fn reduction(&self) -> Result<ReductionReport> {
        cached(&self.reduction, || {
            let (u, v) = self.policies();
            let node = self.problem.space.n_nodes / 2;
            let s = self.settings;
            expected_value_reduction(self.problem, &u, &v, 0, node, &s.mc_paths, s.mc_seeds, s.seed)
        })
    }

    fn rng(&self, salt: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.settings.seed);
        rng.set_stream(salt);
        rng
    }
}

/// Probe box covering the space grid, the horizon and the control sets.
pub fn probe_domain(problem: &GameProblem) -> ProbeDomain {
    ProbeDomain::new(
        problem.space.x_min.abs().max(problem.space.x_max.abs()),
        (problem.time.t0, problem.time.t_end),
        problem.controls.u_values.clone(),
        problem.controls.v_values.clone(),
    )
}

/// Special-case solver when it applies, general solver otherwise.
pub fn solve_pde(problem: &GameProblem, kind: ValueKind) -> Result<PdeSolution> {
    if problem.cs.is_special_case() {
        solve_hjbi_special(problem, kind)
    } else {
        solve_hjbi_general(problem, kind)
    }
}

/// Runs the selected properties. Failures and solver errors are recorded in
/// the report, never propagated.
pub fn run_suite(problem: &GameProblem, selection: &Selection, settings: &VerifySettings) -> VerificationReport {
    let ctx = Context::new(problem, settings);
    let chosen: Vec<&PropertySpec> = REGISTRY.iter().filter(|p| selection.includes(p.id)).collect();
    let entries = chosen
        .par_iter()
        .map(|spec| {
            let start = Instant::now();
            let outcome = run_property(&ctx, spec.id);
            let runtime_ms = start.elapsed().as_millis() as u64;
            match outcome {
                Ok(o) => ReportEntry {
                    id: spec.id.to_string(),
                    anchor: spec.anchor.to_string(),
                    measured: o.measured,
                    tol: o.tol,
                    tol_source: o.tol_source,
                    pass: o.pass,
                    status: o.status.unwrap_or(if o.pass { Status::Pass } else { Status::Fail }),
                    runtime_ms,
                    detail: o.detail,
                },
                Err(e) => ReportEntry {
                    id: spec.id.to_string(),
                    anchor: spec.anchor.to_string(),
                    measured: f64::NAN,
                    tol: f64::NAN,
                    tol_source: "n/a".into(),
                    pass: false,
                    status: Status::Errored,
                    runtime_ms,
                    detail: json!({ "error": e.to_string() }),
                },
            }
        })
        .collect();
    VerificationReport {
        version: VERSION.to_string(),
        config_digest: settings.config_digest.clone(),
        seed: settings.seed,
        entries,
    }
}

fn run_property(ctx: &Context<'_>, id: &str) -> Result<Outcome> {
    match id {
        "expr-roundtrip" => expr_roundtrip(ctx),
        "h23-monotone-budget" => h23_monotone_budget(ctx),
        "lipschitz-estimate" => lipschitz_estimate(ctx),
        "stencil-moments" => stencil_moments(ctx),
        "jump-split" => jump_split(ctx),
        "path-laws" => path_laws(ctx),
        "terminal" => terminal(ctx),
        "bsde-comparison" => bsde_comparison(ctx),
        "convergence-order" => convergence_order(ctx),
        "zero-noise" => zero_noise(ctx),
        "representation-residual" => representation_residual(ctx),
        "representation-uniqueness" => representation_uniqueness(ctx),
        "representation-consistency" => representation_consistency(ctx),
        "semigroup" => semigroup(ctx),
        "picard-contraction" => picard_contraction(ctx),
        "apriori" => apriori(ctx),
        "ordering" => ordering(ctx),
        "comparison" => game_comparison(ctx),
        "monotonicity" => monotonicity(ctx),
        "lipschitz" => lipschitz(ctx),
        "holder" => holder(ctx),
        "determinism" => determinism(ctx),
        "dpp" => dpp(ctx),
        "isaacs" => isaacs(ctx),
        "scheme-monotone" => scheme_monotone(ctx),
        "pde-comparison" => pde_comparison(ctx),
        "cross-validation" => cross_validation(ctx),
        "pde-ordering" => pde_ordering(ctx),
        "mc-reduction" => mc_reduction(ctx),
        "reproducibility" => reproducibility(ctx),
        "coverage" => coverage(ctx),
        "csv-roundtrip" => csv_roundtrip(ctx),
        "exit-codes" => exit_codes(ctx),
        other => Err(Error::Precondition(format!("no runner for property {other}"))),
    }
}

fn expr_roundtrip(ctx: &Context<'_>) -> Result<Outcome> {
    let mut rng = ctx.rng(1);
    let mut worst: f64 = 0.0;
    let mut mismatched = 0usize;
    for slot in Slot::COEFFICIENTS {
        let original = ctx.problem.cs.expr(slot);
        let reparsed = Expr::parse(&original.to_string())?;
        for _ in 0..1000 {
            let mut b = Bindings::new();
            for var in Var::ALL {
                b.set(var, rng.random_range(-3.0..3.0));
            }
            match (original.eval(&b), reparsed.eval(&b)) {
                (Ok(a), Ok(c)) => {
                    if a.to_bits() != c.to_bits() {
                        worst = worst.max((a - c).abs().max(f64::MIN_POSITIVE));
                    }
                }
                (Err(_), Err(_)) => {}
                _ => mismatched += 1,
            }
        }
    }
    let tol = ctx.tol("expr-roundtrip", 0.0, "exact");
    let pass = worst <= tol.0 && mismatched == 0;
    Ok(Outcome::check(worst, tol, pass, json!({ "bindings": 1000 * Slot::COEFFICIENTS.len(), "error_mismatches": mismatched })))
}

fn h23_monotone_budget(ctx: &Context<'_>) -> Result<Outcome> {
    let budgets = [100, 200, 400, 800, 1600];
    let mut series = Vec::new();
    for &n in &budgets {
        let c = check_h23(&ctx.problem.cs, &ctx.problem.levy, &ctx.problem.cert, &ctx.domain(), n, ctx.settings.seed)?;
        series.push(c.worst_violation);
    }
    let drop = series.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max);
    Ok(Outcome::at_most(
        drop,
        ctx.tol("h23-monotone-budget", 0.0, "exact (running maximum)"),
        json!({ "budgets": budgets, "worst_violation": series }),
    ))
}

fn lipschitz_estimate(ctx: &Context<'_>) -> Result<Outcome> {
    let cs = CoefficientSet::from_pairs(&[("b", "2*x - 0.5*y + 0.25*z"), ("sigma", "0.3*x"), ("phi", "3*x")])?;
    let domain = ProbeDomain::new(5.0, (0.0, 1.0), vec![0.0], vec![0.0]);
    let r = check_h22(&cs, &LevyModel::none(), &domain, 10_000, ctx.settings.seed, f64::INFINITY, f64::INFINITY)?;
    let cases = [(Slot::B, 2.0), (Slot::Sigma, 0.3), (Slot::Phi, 3.0)];
    let mut worst: f64 = 0.0;
    let mut over = false;
    for (slot, exact) in cases {
        let est = r.joint(slot);
        over |= est > exact * (1.0 + 1e-12);
        worst = worst.max((exact - est).abs() / exact);
    }
    let tol = ctx.tol("lipschitz-estimate", 0.01, "sampling: 1% at 1e4 probes");
    let pass = worst <= tol.0 && !over;
    Ok(Outcome::check(worst, tol, pass, json!({ "b": r.joint(Slot::B), "sigma": r.joint(Slot::Sigma), "phi": r.joint(Slot::Phi) })))
}

/// Stencils at the first slice with `y = Phi`, `z = 0` and the first controls.
fn config_stencils(ctx: &Context<'_>) -> Result<(Vec<NodeStencil>, Vec<f64>, Vec<Vec<f64>>)> {
    let p = ctx.problem;
    let (u, v) = (p.controls.u_values[0], p.controls.v_values[0]);
    let t = p.time.t0;
    let mut stencils = Vec::new();
    let mut drifts = Vec::new();
    let mut shifts = Vec::new();
    for j in 0..p.space.n_nodes {
        let x = p.space.x(j);
        let y = p.cs.phi(x)?;
        let drift = p.cs.b(t, x, y, 0.0, u, v)?;
        let vol = p.cs.sigma(t, x, y, 0.0, u, v)?;
        let hs = p
            .levy
            .atoms
            .iter()
            .map(|&e| p.cs.h(t, x, y, 0.0, u, v, e))
            .collect::<Result<Vec<_>>>()?;
        let jumps: Vec<(f64, f64)> = hs.iter().copied().zip(p.levy.intensities.iter().copied()).collect();
        stencils.push(NodeStencil::build(&p.space, p.time.dt(), j, drift, vol, &jumps)?);
        drifts.push(drift);
        shifts.push(hs);
    }
    Ok((stencils, drifts, shifts))
}

fn stencil_moments(ctx: &Context<'_>) -> Result<Outcome> {
    let space = SpaceGrid::new(-2.0, 2.0, 41)?;
    let (dt, drift, vol) = (0.01, 0.3, 0.5);
    let mut worst: f64 = 0.0;
    for j in 1..space.n_nodes - 1 {
        let st = NodeStencil::build(&space, dt, j, drift, vol, &[])?;
        let (mass, mean, var) = st.moments(&space);
        worst = worst.max((mass - 1.0).abs()).max((mean - drift * dt).abs()).max((var - vol * vol * dt).abs());
    }
    let (stencils, drifts, _) = config_stencils(ctx)?;
    let dt = ctx.dt();
    let mut checked = 0;
    for (st, drift) in stencils.iter().zip(&drifts) {
        let (mass, mean, _) = st.moments(&ctx.problem.space);
        worst = worst.max((mass - 1.0).abs());
        if !st.upwinded && st.leaked_mass == 0.0 {
            worst = worst.max((mean - drift * dt).abs());
            checked += 1;
        }
    }
    Ok(Outcome::at_most(
        worst,
        ctx.tol("stencil-moments", 1e-12, "round-off"),
        json!({ "config_nodes_with_moment_check": checked }),
    ))
}

fn jump_split(ctx: &Context<'_>) -> Result<Outcome> {
    let space = ctx.problem.space;
    let (_, _, mut shifts) = config_stencils(ctx)?;
    if ctx.problem.levy.is_empty() {
        shifts = vec![vec![-0.37, 0.37]; space.n_nodes];
    }
    let mut worst: f64 = 0.0;
    let mut clamped = 0;
    for (j, hs) in shifts.iter().enumerate() {
        for h in hs {
            let target = space.x(j) + h;
            let loc = space.locate(target);
            if loc.clamped {
                clamped += 1;
                continue;
            }
            let mass = (1.0 - loc.theta) + loc.theta;
            let mean = (1.0 - loc.theta) * space.x(loc.lo) + loc.theta * space.x(loc.hi);
            worst = worst.max((mass - 1.0).abs()).max((mean - target).abs());
        }
    }
    Ok(Outcome::at_most(worst, ctx.tol("jump-split", 1e-12, "round-off"), json!({ "clamped_targets": clamped })))
}

fn path_laws(ctx: &Context<'_>) -> Result<Outcome> {
    let n_paths = 20_000;
    let levy = &ctx.problem.levy;
    let time = ctx.problem.time;
    let bundle = sample_paths(&time, levy, n_paths, ctx.settings.seed)?;
    let stats = path_statistics(&bundle, levy);
    let n = (n_paths * time.n_steps) as f64;
    let dt = time.dt();
    // Deviations in units of the sampling standard error.
    let mut z_scores = vec![
        stats.increment_mean.abs() / (dt / n).sqrt(),
        (stats.increment_variance - dt).abs() / (dt * (2.0 / n).sqrt()),
    ];
    for (i, &lam) in levy.intensities.iter().enumerate() {
        z_scores.push((stats.jump_count_mean[i] - lam * dt).abs() / (lam * dt / n).sqrt());
    }
    let worst = z_scores.iter().copied().fold(0.0, f64::max);
    Ok(Outcome::at_most(
        worst,
        ctx.tol("path-laws", 4.0, "statistical: 4 standard errors"),
        json!({ "n_paths": n_paths, "z_scores": z_scores }),
    ))
}

fn terminal(ctx: &Context<'_>) -> Result<Outcome> {
    let phi = ctx.problem.terminal()?;
    let n = ctx.problem.time.n_steps;
    let cost = ctx.cost()?;
    let lower = ctx.lower()?;
    let diff = crate::game::sup_diff(&cost.y[n], &phi).max(crate::game::sup_diff(&lower.values[n], &phi));
    Ok(Outcome::at_most(diff, ctx.tol("terminal", 0.0, "exact"), json!({})))
}

fn bsde_comparison(ctx: &Context<'_>) -> Result<Outcome> {
    let time = TimeGrid::new(0.0, 0.5, 25)?;
    let space = SpaceGrid::new(-3.0, 3.0, 31)?;
    let levy = discretize_levy(&[(-0.4, 0.5), (0.4, 0.5)], &Expr::parse("abs(e)")?, 1.0)?;
    let xs = space.nodes();
    let mut rng = ctx.rng(2);
    let mut worst = f64::INFINITY;
    let mut held = 0;
    for _ in 0..ctx.settings.bsde_pairs {
        let drift = rng.random_range(-0.5..0.5);
        let vol = rng.random_range(0.2..0.6);
        let st = crate::stochastics::markov_stencil(&time, &space, &levy, drift, vol)?;
        let family = StencilFamily::Homogeneous(st);
        let c: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let lift: [f64; 2] = std::array::from_fn(|_| rng.random_range(0.0..0.5));
        let (a, bz, cx, dk) = (
            rng.random_range(-1.0..1.0),
            rng.random_range(-0.3..0.3),
            rng.random_range(-1.0..1.0),
            rng.random_range(0.0..0.5),
        );
        let gap = rng.random_range(0.0..0.3);
        let xi2: Vec<f64> = xs.iter().map(|x| c[0] + c[1] * x + c[2] * x * x + 0.1 * c[3] * x * x * x).collect();
        let xi1: Vec<f64> = xi2.iter().zip(&xs).map(|(v, x)| v + lift[0] + lift[1] * x * x).collect();
        let g2 = move |d: DriverArgs| Ok(a * d.y + bz * d.z + cx * d.x.sin() + dk * d.kbar);
        let g1 = move |d: DriverArgs| Ok(a * d.y + bz * d.z + cx * d.x.sin() + dk * d.kbar + gap * (1.0 + d.x.cos()));
        let s1 = solve_bsde(&time, &space, &levy, &family, &g1, &xi1)?;
        let s2 = solve_bsde(&time, &space, &levy, &family, &g2, &xi2)?;
        let verdict = compare_bsde(&s1, &s2)?;
        worst = worst.min(verdict.worst_margin);
        held += verdict.holds as usize;
    }
    let tol = ctx.tol("bsde-comparison", 1e-10, "round-off");
    let pass = held == ctx.settings.bsde_pairs;
    Ok(Outcome::check(-worst.min(0.0), tol, pass, json!({ "pairs": ctx.settings.bsde_pairs, "held": held, "worst_margin": worst })))
}

/// `|Y_0 - e^{-1}|` for `g = -y`, `xi = 1` with `n` steps and `dx ~ sqrt(dt)`.
pub fn decay_error(n: usize) -> Result<f64> {
    let time = TimeGrid::new(0.0, 1.0, n)?;
    let dx = 1.25 * time.dt().sqrt();
    let nodes = ((6.0 / dx).round() as usize).max(2) + 1;
    let space = SpaceGrid::new(-3.0, 3.0, nodes)?;
    let levy = LevyModel::none();
    let st = crate::stochastics::markov_stencil(&time, &space, &levy, 0.0, 1.0)?;
    let sol = solve_bsde(&time, &space, &levy, &StencilFamily::Homogeneous(st), &|d: DriverArgs| Ok(-d.y), &vec![1.0; nodes])?;
    Ok((sol.y[0][nodes / 2] - (-1.0f64).exp()).abs())
}

fn convergence_order(ctx: &Context<'_>) -> Result<Outcome> {
    let errors = [decay_error(20)?, decay_error(40)?, decay_error(80)?];
    let ratios = [errors[0] / errors[1], errors[1] / errors[2]];
    let tol = ctx.tol("convergence-order", 0.3, "first order: ratio 2 +- 0.3");
    let dev = ratios.iter().map(|r| (r - 2.0).abs()).fold(0.0, f64::max);
    Ok(Outcome::at_most(dev, tol, json!({ "errors": errors, "ratios": ratios })))
}

fn zero_noise(ctx: &Context<'_>) -> Result<Outcome> {
    let time = TimeGrid::new(0.0, 1.0, 50)?;
    let space = SpaceGrid::new(-2.0, 2.0, 21)?;
    let levy = LevyModel::none();
    let st = crate::stochastics::markov_stencil(&time, &space, &levy, 0.0, 0.0)?;
    let g = |d: DriverArgs| Ok(-0.7 * d.y + d.t.sin() + 0.1 * d.x);
    let terminal: Vec<f64> = space.nodes().iter().map(|x| x.cos()).collect();
    let sol = solve_bsde(&time, &space, &levy, &StencilFamily::Homogeneous(st), &g, &terminal)?;
    let dt = time.dt();
    let mut worst: f64 = 0.0;
    for (j, &x) in space.nodes().iter().enumerate() {
        let mut y = x.cos();
        for k in (0..time.n_steps).rev() {
            y = (y + dt * (time.time(k).sin() + 0.1 * x)) / (1.0 + 0.7 * dt);
            worst = worst.max((sol.y[k][j] - y).abs());
        }
    }
    Ok(Outcome::at_most(worst, ctx.tol("zero-noise", 1e-10, "implicit Euler ODE oracle"), json!({})))
}

fn representation_sigma(ctx: &Context<'_>) -> Result<CoefficientSet> {
    if ctx.problem.cs.sigma_depends_on_z() {
        Ok(ctx.problem.cs.clone())
    } else {
        CoefficientSet::from_pairs(&[("sigma", "-0.5*z + 0.3*sin(x) - 0.2*tanh(z) + 0.1*u"), ("phi", "x")])
    }
}

fn random_queries(ctx: &Context<'_>, salt: u64, n: usize) -> Vec<AlgebraicQuery> {
    let mut rng = ctx.rng(salt);
    let d = ctx.domain();
    (0..n)
        .map(|_| {
            let u = d.u_values[rng.random_range(0..d.u_values.len())];
            let v = d.v_values[rng.random_range(0..d.v_values.len())];
            AlgebraicQuery::new(
                rng.random_range(d.t_range.0..=d.t_range.1),
                rng.random_range(-d.half_width..d.half_width),
                rng.random_range(-d.half_width..d.half_width),
                rng.random_range(-5.0..5.0),
                rng.random_range(0.0..3.0),
                u,
                v,
            )
        })
        .collect()
}

fn representation_residual(ctx: &Context<'_>) -> Result<Outcome> {
    let cs = representation_sigma(ctx)?;
    let mut worst: f64 = 0.0;
    for q in random_queries(ctx, 3, 1000) {
        let z = solve_representation(&q, &cs)?;
        worst = worst.max(residual(&q, &cs, z)?.abs());
    }
    let linear = [("-z", 3.0, 2.0, 1.0), ("-z + 0.5", 0.0, 1.0, 0.25)];
    for (sigma, xi, p, exact) in linear {
        let cs = CoefficientSet::from_pairs(&[("sigma", sigma), ("phi", "x")])?;
        let z = solve_representation(&AlgebraicQuery::new(0.0, 0.0, 0.0, xi, p, 0.0, 0.0), &cs)?;
        worst = worst.max((z - exact).abs());
    }
    Ok(Outcome::at_most(
        worst,
        ctx.tol("representation-residual", 1e-12, "solver residual target"),
        json!({ "queries": 1000, "sigma": cs.sigma.to_string() }),
    ))
}

fn representation_uniqueness(ctx: &Context<'_>) -> Result<Outcome> {
    let cs = representation_sigma(ctx)?;
    let mut worst: f64 = 0.0;
    for q in random_queries(ctx, 4, 1000) {
        let (lo, hi) = initial_bracket(&q, &cs)?;
        let a = bracket_root(&q, &cs, lo, hi)?;
        let b = bracket_root(&q, &cs, lo - 1.0 - 3.0 * lo.abs(), hi + 2.0 + hi.abs())?;
        worst = worst.max((a - b).abs());
    }
    Ok(Outcome::at_most(worst, ctx.tol("representation-uniqueness", 1e-10, "root uniqueness"), json!({ "queries": 1000 })))
}

fn representation_consistency(ctx: &Context<'_>) -> Result<Outcome> {
    let sol = if ctx.problem.cs.sigma_depends_on_z() {
        ctx.pde(ValueKind::Lower)?
    } else {
        let problem = GameProblem::new(
            CoefficientSet::from_pairs(&[("sigma", "0.2*(1 - z)"), ("phi", "x")])?,
            LevyModel::none(),
            crate::fbsde::ControlGrid::trivial(),
            ctx.problem.cert,
            TimeGrid::new(0.0, 1.0, 40)?,
            SpaceGrid::new(-4.0, 4.0, 81)?,
        )?;
        solve_hjbi_general(&problem, ValueKind::Lower)?
    };
    Ok(Outcome::at_most(
        sol.max_algebraic_residual,
        ctx.tol("representation-consistency", 1e-12, "solver residual target"),
        json!({ "clamp_fraction": sol.clamp_fraction() }),
    ))
}

fn semigroup(ctx: &Context<'_>) -> Result<Outcome> {
    let p = ctx.problem;
    let n = p.time.n_steps;
    let m = (p.settings.delta0_steps / 2).min(n / 2).max(1);
    if 2 * m > n || 2 * m > p.settings.delta0_steps {
        return Ok(Outcome::skipped("grid too short for two windows"));
    }
    let sys = p.system();
    let (u, v) = ctx.policies();
    let phi = p.terminal()?;
    let q = |t_slice, delta_steps, terminal_field| SemigroupQuery {
        t_slice,
        delta_steps,
        u_policy: u.clone(),
        v_policy: v.clone(),
        terminal_field,
    };
    let start = n - 2 * m;
    let one = sys.backward_semigroup(&q(start, 2 * m, phi.clone()))?;
    let mid = sys.backward_semigroup(&q(start + m, m, phi))?;
    let two = sys.backward_semigroup(&q(start, m, mid))?;
    let gap = crate::game::sup_diff(&one, &two);
    Ok(Outcome::at_most(gap, ctx.tol("semigroup", 5.0 * ctx.dt(), "scheme-order: 5*dt"), json!({ "window_steps": m })))
}

fn picard_contraction(ctx: &Context<'_>) -> Result<Outcome> {
    let p = ctx.problem;
    if p.cs.is_decoupled() {
        return Ok(Outcome::skipped("decoupled model: a single pass is exact"));
    }
    let small = check_h31(&p.cs, &p.levy, &ctx.domain(), ctx.settings.probes, ctx.settings.seed, DEFAULT_SMALLNESS_THRESHOLD)?;
    if !small.holds {
        return Ok(Outcome::skipped("smallness condition fails"));
    }
    let steps = p.settings.delta0_steps.min(p.time.n_steps);
    let (u, v) = ctx.policies();
    let w = p.system().solve_window(&SemigroupQuery {
        t_slice: p.time.n_steps - steps,
        delta_steps: steps,
        u_policy: u,
        v_policy: v,
        terminal_field: p.terminal()?,
    })?;
    let tail: Vec<f64> = w.picard_trace.iter().copied().skip_while(|&r| r > 1e-2).collect();
    let worst = tail.windows(2).map(|r| r[1] / r[0]).fold(0.0, f64::max);
    Ok(Outcome::check(
        worst,
        ctx.tol("picard-contraction", 1.0, "geometric decay: ratio < 1"),
        worst < ctx.tol("picard-contraction", 1.0, "").0,
        json!({ "trace": w.picard_trace }),
    ))
}

/// Largest `|coefficient|` at `x = y = z = 0` over the horizon ends and controls.
fn origin_size(problem: &GameProblem, slot: Slot) -> Result<f64> {
    let cs = &problem.cs;
    let mut m: f64 = 0.0;
    for t in [problem.time.t0, problem.time.t_end] {
        for &u in &problem.controls.u_values {
            for &v in &problem.controls.v_values {
                let val = match slot {
                    Slot::B => cs.b(t, 0.0, 0.0, 0.0, u, v)?,
                    Slot::Sigma => cs.sigma(t, 0.0, 0.0, 0.0, u, v)?,
                    Slot::F => cs.f(t, 0.0, 0.0, 0.0, 0.0, u, v)?,
                    Slot::Phi => cs.phi(0.0)?,
                    _ => problem
                        .levy
                        .atoms
                        .iter()
                        .map(|&e| cs.h(t, 0.0, 0.0, 0.0, u, v, e).map(|h| h.abs() / e.abs().min(1.0)))
                        .try_fold(0.0, |a: f64, h| h.map(|h| a.max(h)))?,
                };
                m = m.max(val.abs());
            }
        }
    }
    Ok(m)
}

/// Growth constant implied by coefficient estimates; each sampled growth
/// ratio is floored by the coefficient size at the origin.
fn growth_bound(problem: &GameProblem, r: &H22Report) -> Result<f64> {
    let levy = &problem.levy;
    let horizon = problem.time.horizon();
    let mut sizes = BTreeMap::new();
    for slot in [Slot::B, Slot::Sigma, Slot::H, Slot::F, Slot::Phi] {
        let sampled = r.growth.get(slot.name()).copied().unwrap_or(0.0);
        sizes.insert(slot, sampled.max(origin_size(problem, slot)?));
    }
    let g = |s: Slot| sizes[&s];
    let rate = r.joint(Slot::B) + r.joint(Slot::Sigma) + levy.total_intensity() * r.joint(Slot::H) + r.joint(Slot::F) + g(Slot::F);
    Ok((g(Slot::Phi) + horizon * g(Slot::F))
        * (1.0 + horizon * (g(Slot::B) + g(Slot::Sigma) + levy.total_intensity() * g(Slot::H)))
        * (horizon * rate).exp())
}

fn apriori(ctx: &Context<'_>) -> Result<Outcome> {
    let sol = ctx.cost()?;
    let space = ctx.problem.space;
    let measured = apriori_bounds(&sol.y, &space, space.interior(0.1));
    let c = ctx
        .lipschitz_constant()?
        .max(growth_bound(ctx.problem, &ctx.h22()?)?);
    let ratio = measured.growth.max(measured.lipschitz) / c;
    Ok(Outcome::at_most(
        ratio,
        ctx.tol("apriori", 1.0, "metadata constant"),
        json!({ "growth": measured.growth, "lipschitz": measured.lipschitz, "metadata_constant": c }),
    ))
}

fn ordering(ctx: &Context<'_>) -> Result<Outcome> {
    let (w, u) = (ctx.lower()?, ctx.upper()?);
    let worst = w
        .values
        .iter()
        .zip(&u.values)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(Outcome::at_most(worst, ctx.tol("ordering", 1e-10, "round-off"), json!({})))
}

/// Ordered terminal pairs `(Phi + lift, Phi)`.
fn ordered_terminals(ctx: &Context<'_>, salt: u64, count: usize) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let phi = ctx.problem.terminal()?;
    let xs = ctx.problem.space.nodes();
    let mut rng = ctx.rng(salt);
    Ok((0..count)
        .map(|_| {
            let a = rng.random_range(0.0..0.5);
            let b = rng.random_range(0.0..0.5);
            let w = rng.random_range(0.2..2.0);
            let s = rng.random_range(0.0..std::f64::consts::TAU);
            let base: Vec<f64> = phi.iter().zip(&xs).map(|(p, x)| p + 0.3 * (0.7 * x).sin()).collect();
            let lifted = base.iter().zip(&xs).map(|(p, x)| p + a + b * (1.0 + (w * x + s).sin())).collect();
            (lifted, base)
        })
        .collect())
}

fn game_comparison(ctx: &Context<'_>) -> Result<Outcome> {
    let n = ctx.problem.time.n_steps;
    let short = ctx.problem.restricted(n - n.min(10), n)?;
    let pairs = ordered_terminals(ctx, 5, ctx.settings.game_pairs)?;
    let margins = pairs
        .par_iter()
        .map(|(hi, lo)| {
            let a = solve_value_from(&short, ValueKind::Lower, hi)?;
            let b = solve_value_from(&short, ValueKind::Lower, lo)?;
            Ok(a.values
                .iter()
                .zip(&b.values)
                .flat_map(|(r1, r2)| r1.iter().zip(r2).map(|(x, y)| x - y))
                .fold(f64::INFINITY, f64::min))
        })
        .collect::<Result<Vec<f64>>>()?;
    let tol = ctx.tol("comparison", 1e-10, "round-off");
    let held = margins.iter().filter(|&&m| m >= -tol.0).count();
    let worst = margins.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(Outcome::check(
        -worst.min(0.0),
        tol,
        held == margins.len(),
        json!({ "pairs": margins.len(), "held": held, "slices": short.time.n_steps }),
    ))
}

fn monotonicity(ctx: &Context<'_>) -> Result<Outcome> {
    if !ctx.problem.cert.verified {
        return Ok(Outcome::skipped("monotonicity certificate not verified"));
    }
    let c = ctx.lipschitz_constant()?;
    let tol = ctx.tol("monotonicity", 2.0 * ctx.dx() * c, "scheme-order: 2*dx*C");
    let r = monotonicity_under_g(&ctx.lower()?, ctx.problem.cert.g, tol.0);
    Ok(Outcome::check(-r.worst.min(0.0), tol, r.holds, json!({ "worst_product": r.worst, "G": ctx.problem.cert.g })))
}

fn lipschitz(ctx: &Context<'_>) -> Result<Outcome> {
    let c = ctx.lipschitz_constant()?;
    let l = lipschitz_in_x(&ctx.lower()?, ctx.problem.space.interior(0.1));
    Ok(Outcome::at_most(l / c, ctx.tol("lipschitz", 1.1, "metadata constant x1.1"), json!({ "measured": l, "metadata_constant": c })))
}

fn holder_window(problem: &GameProblem) -> (f64, f64) {
    let h = problem.time.horizon();
    let tau_max = 0.5 * h;
    ((10.0 * problem.time.dt()).min(tau_max / 4.0), tau_max)
}

fn holder(ctx: &Context<'_>) -> Result<Outcome> {
    let p = ctx.problem;
    let nodes = p.space.interior(0.1);
    let (lo, hi) = holder_window(p);
    let coarse = holder_fit(&ctx.lower()?, nodes.clone(), lo, hi)?;
    let fine_problem = p.with_grids(TimeGrid::new(p.time.t0, p.time.t_end, 2 * p.time.n_steps)?, p.space);
    let fine = holder_fit(&lower_value(&fine_problem)?, nodes, lo, hi)?;
    let tol = ctx.tol("holder", 0.4, "exponent >= 1/2 - 0.1");
    let scale = ctx.lower()?.values.iter().flatten().fold(1.0, |m: f64, v| m.max(v.abs()));
    if coarse.constant.max(fine.constant) <= 1e-10 * scale {
        return Ok(Outcome::check(
            coarse.exponent,
            tol,
            true,
            json!({ "constant": coarse.constant, "note": "field constant in t" }),
        ));
    }
    let drift = (fine.constant / coarse.constant - 1.0).abs();
    let pass = coarse.exponent >= tol.0 && drift <= 0.2;
    Ok(Outcome::check(
        coarse.exponent,
        tol,
        pass,
        json!({ "constant": coarse.constant, "constant_half_dt": fine.constant, "constant_drift": drift, "fine_exponent": fine.exponent }),
    ))
}

#[derive(Debug, Clone, Serialize)]
pub struct McEstimate {
    pub n_paths: usize,
    pub seed: u64,
    pub mean: f64,
    /// Standard error of the mean.
    pub std_error: f64,
}

/// Monte Carlo estimate of `E[Phi(X_T) + int f ds]` along Euler paths driven
/// by the grid fields `(Y, Z, K)` of `sol`.
#[allow(clippy::too_many_arguments)]
pub fn mc_estimate(
    problem: &GameProblem,
    sol: &BackwardSolution,
    u: &Policy,
    v: &Policy,
    t_slice: usize,
    node: usize,
    n_paths: usize,
    seed: u64,
) -> Result<McEstimate> {
    let time = problem.time;
    let n = time.n_steps;
    let space = problem.space;
    let x0 = space.x(node);
    if t_slice >= n {
        return Ok(McEstimate { n_paths, seed, mean: problem.cs.phi(x0)?, std_error: 0.0 });
    }
    let sub = time.sub_grid(t_slice, n)?;
    let levy = &problem.levy;
    let bundle = sample_paths(&sub, levy, n_paths, seed)?;
    let dt = time.dt();
    let cs = &problem.cs;
    let payoffs = (0..n_paths)
        .into_par_iter()
        .map(|path| {
            let mut x = x0;
            let mut acc = 0.0;
            for s in 0..sub.n_steps {
                let k = t_slice + s;
                let t = time.time(k);
                let loc = space.locate(x);
                let y = loc.interpolate(&sol.y[k]);
                let z = loc.interpolate(&sol.z[k]);
                let mut kbar = 0.0;
                for i in 0..levy.len() {
                    let ki = (1.0 - loc.theta) * sol.k[k][loc.lo][i] + loc.theta * sol.k[k][loc.hi][i];
                    kbar += ki * levy.l_values[i] * levy.intensities[i];
                }
                let j = if loc.theta < 0.5 { loc.lo } else { loc.hi };
                let (uu, vv) = (u.at(k, j), v.at(k, j));
                acc += cs.f(t, x, y, z, kbar, uu, vv)? * dt;
                let mut dx = cs.b(t, x, y, z, uu, vv)? * dt + cs.sigma(t, x, y, z, uu, vv)? * bundle.increment(path, s);
                for (i, &e) in levy.atoms.iter().enumerate() {
                    let count = bundle.jump_count(path, s, i) as f64;
                    dx += cs.h(t, x, y, z, uu, vv, e)? * (count - levy.intensities[i] * dt);
                }
                x += dx;
            }
            Ok(acc + cs.phi(x)?)
        })
        .collect::<Result<Vec<f64>>>()?;
    let m = n_paths as f64;
    let mean = payoffs.iter().sum::<f64>() / m;
    let var = payoffs.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
    Ok(McEstimate {
        n_paths,
        seed,
        mean,
        std_error: (var / m).sqrt(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ReductionReport {
    pub grid_value: f64,
    /// Path-weighted mean over every estimate.
    pub mean: f64,
    pub estimates: Vec<McEstimate>,
    /// `|mean - grid value|`.
    pub gap: f64,
    /// Pooled standard error of the mean estimate.
    pub std_error: f64,
    /// `(n_paths, std of estimates across seeds)`.
    pub spread: Vec<(usize, f64)>,
    /// Log-log slope of the spread against `n_paths`.
    pub spread_slope: f64,
}

/// Compares Monte Carlo estimates of the cost under fixed policies with the
/// grid cost functional, and sweeps `n_paths` to measure the seed spread.
/// Every batch draws fresh seeds counted up from `base_seed`.
#[allow(clippy::too_many_arguments)]
pub fn expected_value_reduction(
    problem: &GameProblem,
    u: &Policy,
    v: &Policy,
    t_slice: usize,
    node: usize,
    n_paths: &[usize],
    seeds_per_size: usize,
    base_seed: u64,
) -> Result<ReductionReport> {
    let sol = problem.system().solve_horizon(u, v)?;
    let grid_value = sol.y[t_slice][node];
    let mut estimates = Vec::new();
    let mut spread = Vec::new();
    for (b, &n) in n_paths.iter().enumerate() {
        let batch = (0..seeds_per_size)
            .map(|i| {
                let seed = base_seed.wrapping_add((b * seeds_per_size + i) as u64);
                mc_estimate(problem, &sol, u, v, t_slice, node, n, seed)
            })
            .collect::<Result<Vec<_>>>()?;
        let k = batch.len() as f64;
        let mean = batch.iter().map(|e| e.mean).sum::<f64>() / k;
        let sd = (batch.iter().map(|e| (e.mean - mean).powi(2)).sum::<f64>() / (k - 1.0).max(1.0)).sqrt();
        spread.push((n, sd));
        estimates.extend(batch);
    }
    let total: f64 = estimates.iter().map(|e| e.n_paths as f64).sum();
    let mean = estimates.iter().map(|e| e.n_paths as f64 * e.mean).sum::<f64>() / total;
    let std_error = estimates
        .iter()
        .map(|e| (e.n_paths as f64 * e.std_error).powi(2))
        .sum::<f64>()
        .sqrt()
        / total;
    let pts: Vec<(f64, f64)> = spread
        .iter()
        .filter(|s| s.1 > 0.0)
        .map(|&(n, s)| ((n as f64).ln(), s.ln()))
        .collect();
    Ok(ReductionReport {
        grid_value,
        mean,
        gap: (mean - grid_value).abs(),
        std_error,
        estimates,
        spread_slope: slope(&pts),
        spread,
    })
}

fn determinism(ctx: &Context<'_>) -> Result<Outcome> {
    let first = ctx.lower()?;
    let again = lower_value(ctx.problem)?;
    let identical = first.values == again.values;
    let r = ctx.reduction()?;
    if r.spread.iter().all(|s| s.1 == 0.0) {
        return Ok(Outcome::check(
            f64::NAN,
            (0.1, "statistical".into()),
            identical,
            json!({ "bit_identical": identical, "note": "payoff is deterministic" }),
        ));
    }
    let tol = ctx.tol("determinism", 0.1, "statistical: slope -1/2 +- 0.1");
    let pass = identical && (r.spread_slope + 0.5).abs() <= tol.0;
    Ok(Outcome::check(r.spread_slope, tol, pass, json!({ "bit_identical": identical, "spread": r.spread })))
}

fn dpp(ctx: &Context<'_>) -> Result<Outcome> {
    let n = ctx.problem.time.n_steps;
    if n < 2 {
        return Ok(Outcome::skipped("needs at least two steps"));
    }
    let r = dpp_consistency(ctx.problem, n / 2)?;
    Ok(Outcome::at_most(r.sup_gap, ctx.tol("dpp", 5.0 * ctx.dt(), "scheme-order: 5*dt"), json!({ "split_slice": r.split_slice })))
}

fn isaacs(ctx: &Context<'_>) -> Result<Outcome> {
    let tol = ctx.tol("isaacs", isaacs_tolerance(&ctx.problem.time), "scheme-order: 4*dt");
    let r = isaacs_gap(&ctx.lower()?, &ctx.upper()?, tol.0)?;
    Ok(Outcome::check(r.max_gap, tol, r.value_exists, json!({})))
}

fn scheme_monotone(ctx: &Context<'_>) -> Result<Outcome> {
    let sol = ctx.pde(ValueKind::Lower)?;
    let tol = ctx.tol("scheme-monotone", 0.0, "exact: centre weight >= 0");
    Ok(Outcome::check(
        sol.min_center_weight,
        tol.clone(),
        sol.min_center_weight >= -tol.0,
        json!({ "clamp_fraction": sol.clamp_fraction() }),
    ))
}

fn pde_comparison(ctx: &Context<'_>) -> Result<Outcome> {
    let pairs = ordered_terminals(ctx, 6, 10)?;
    let interior = ctx.problem.space.interior(0.1);
    let mut worst = f64::INFINITY;
    for (hi, lo) in &pairs {
        let a = solve_hjbi_from(ctx.problem, ValueKind::Lower, hi)?;
        let b = solve_hjbi_from(ctx.problem, ValueKind::Lower, lo)?;
        for (r1, r2) in a.field.values.iter().zip(&b.field.values) {
            worst = interior.clone().map(|j| r1[j] - r2[j]).fold(worst, f64::min);
        }
    }
    Ok(Outcome::at_most(
        -worst.min(0.0),
        ctx.tol("pde-comparison", 1e-10, "round-off"),
        json!({ "pairs": pairs.len(), "nodes": [interior.start, interior.end] }),
    ))
}

/// Fraction of nodes trimmed from each end before comparing game and PDE fields.
pub const CROSS_INTERIOR: f64 = 0.25;

fn field_distance(space: &SpaceGrid, game: &ValueField, pde: &ValueField) -> f64 {
    space
        .interior(CROSS_INTERIOR)
        .map(|j| (game.values[0][j] - pde.values[0][j]).abs())
        .fold(0.0, f64::max)
}

/// Interior sup distance at the first slice between the game lower value and
/// the PDE lower field.
pub fn cross_distance(problem: &GameProblem) -> Result<f64> {
    let game = lower_value(problem)?;
    let pde = solve_hjbi_special(problem, ValueKind::Lower)?;
    Ok(field_distance(&problem.space, &game, &pde.field))
}

/// Same problem with `dx` halved and `dt` halved, or cut further when the
/// explicit scheme needs it.
pub fn refined(problem: &GameProblem) -> Result<GameProblem> {
    let space = SpaceGrid::new(problem.space.x_min, problem.space.x_max, 2 * problem.space.n_nodes - 1)?;
    let time = |n| TimeGrid::new(problem.time.t0, problem.time.t_end, n);
    let mut fine = problem.with_grids(time(2 * problem.time.n_steps)?, space);
    let needed = cfl_min_steps(&fine)?;
    if needed > fine.time.n_steps {
        fine.time = time(needed)?;
    }
    Ok(fine)
}

fn cross_validation(ctx: &Context<'_>) -> Result<Outcome> {
    if !ctx.problem.cs.is_special_case() {
        return Ok(Outcome::skipped("sigma or h depends on (y, z)"));
    }
    let game = ctx.lower()?;
    let pde = ctx.pde(ValueKind::Lower)?;
    let coarse = field_distance(&ctx.problem.space, &game, &pde.field);
    let fine = cross_distance(&refined(ctx.problem)?)?;
    let ratio = if coarse > 0.0 { fine / coarse } else { 0.0 };
    let tol = ctx.tol("cross-validation", 5.0 * (ctx.dt() + ctx.dx()), "scheme-order: 5*(dt+dx)");
    // Below the floor the two schemes agree to round-off and boundary noise.
    let floor = 1e-3 * tol.0;
    let pass = coarse <= tol.0 && (ratio <= 0.7 || coarse <= floor);
    Ok(Outcome::check(
        coarse,
        tol,
        pass,
        json!({ "refined_distance": fine, "ratio": ratio, "floor": floor }),
    ))
}

fn pde_ordering(ctx: &Context<'_>) -> Result<Outcome> {
    let (w, u) = (ctx.pde(ValueKind::Lower)?, ctx.pde(ValueKind::Upper)?);
    let worst = w
        .field
        .values
        .iter()
        .zip(&u.field.values)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(Outcome::at_most(worst, ctx.tol("pde-ordering", 1e-10, "round-off"), json!({})))
}

fn mc_reduction(ctx: &Context<'_>) -> Result<Outcome> {
    let r = ctx.reduction()?;
    let tol = ctx.tol(
        "mc-reduction",
        3.0 * r.std_error + 5.0 * (ctx.dt() + ctx.dx()),
        "statistical 3*se + scheme-order 5*(dt+dx)",
    );
    Ok(Outcome::at_most(
        r.gap,
        tol,
        json!({ "grid_value": r.grid_value, "std_error": r.std_error, "estimates": r.estimates.len() }),
    ))
}

fn reproducibility(ctx: &Context<'_>) -> Result<Outcome> {
    let subset = Selection::Ids(vec!["path-laws".into(), "bsde-comparison".into(), "representation-residual".into()]);
    let a = run_suite(ctx.problem, &subset, ctx.settings).body_without_timings();
    let b = run_suite(ctx.problem, &subset, ctx.settings).body_without_timings();
    let same = a == b;
    Ok(Outcome::check(
        if same { 0.0 } else { 1.0 },
        (0.0, "exact".into()),
        same,
        json!({ "bytes": a.len() }),
    ))
}

fn coverage(_ctx: &Context<'_>) -> Result<Outcome> {
    let gaps = coverage_gaps();
    Ok(Outcome::check(gaps.len() as f64, (0.0, "exact".into()), gaps.is_empty(), json!({ "gaps": gaps })))
}

fn csv_roundtrip(ctx: &Context<'_>) -> Result<Outcome> {
    let field = ctx.lower()?;
    let meta = crate::cli::Metadata::new(&ctx.settings.config_digest, ctx.settings.seed, "lower");
    let table = crate::cli::FieldTable::from_value_field(&field, meta);
    let first = table.to_csv();
    let second = crate::cli::FieldTable::parse(&first)?.to_csv();
    let same = first == second;
    Ok(Outcome::check(if same { 0.0 } else { 1.0 }, (0.0, "exact".into()), same, json!({ "rows": table.rows.len() })))
}

fn exit_codes(ctx: &Context<'_>) -> Result<Outcome> {
    let dir = std::env::temp_dir().join(format!("fbsde-games-exit-{}-{}", std::process::id(), ctx.settings.seed));
    std::fs::create_dir_all(&dir)?;
    let cfg = dir.join("bad.cfg");
    std::fs::write(&cfg, "[model]\nphi = \"x +\"\n")?;
    let out = dir.join("out");
    let mut messages = Vec::new();
    let code = crate::cli::execute([
        "fbsde-games",
        "check",
        cfg.to_str().unwrap_or_default(),
        "--out",
        out.to_str().unwrap_or_default(),
    ], &mut |m| messages.push(m.to_string()));
    let wrote = out.exists();
    let _ = std::fs::remove_dir_all(&dir);
    let pass = code == 1 && !wrote;
    Ok(Outcome::check(code as f64, (1.0, "exact".into()), pass, json!({ "artifacts_written": wrote, "messages": messages })))
}
