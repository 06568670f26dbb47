//! Batch front end: config loading, subcommands and artifact export.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::bsde::BackwardSolution;
use crate::coeffs::{check_h22, check_h23, check_h31, CoefficientSet, MonotonicityCert, DEFAULT_SMALLNESS_THRESHOLD};
use crate::config::ConfigDoc;
use crate::error::{Error, Result};
use crate::fbsde::{ControlGrid, SolverSettings};
use crate::game::{isaacs_gap, isaacs_tolerance, lower_value, upper_value, GameProblem, ValueField, ValueKind};
use crate::grid::{SpaceGrid, TimeGrid};
use crate::pde::cfl_min_steps;
use crate::stochastics::{discretize_levy, path_statistics, sample_paths, LevyModel, GENERATOR};
use crate::verify::{probe_domain, run_suite, solve_pde, Selection, VerifySettings, VERSION};

/// Grid overrides from the command line.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub nt: Option<usize>,
    pub nx: Option<usize>,
}

/// A fully parsed configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub doc: ConfigDoc,
    pub digest: String,
    pub seed: u64,
    pub problem: GameProblem,
    pub verify: VerifySettings,
    /// Probe budget for the coefficient checks.
    pub probes: usize,
    pub n_paths: usize,
}

impl RunConfig {
    pub fn from_text(text: &str, overrides: Overrides) -> Result<Self> {
        let mut doc = ConfigDoc::parse(text)?;
        if let Some(nt) = overrides.nt {
            doc.set("grid", "nt", nt.to_string());
        }
        if let Some(nx) = overrides.nx {
            doc.set("grid", "nx", nx.to_string());
        }
        let seed = match overrides.seed {
            Some(s) => s,
            None => doc.usize_or("simulate", "seed", 0)? as u64,
        };
        let cs = CoefficientSet::from_doc(&doc)?;
        let levy = levy_from_doc(&doc, &cs)?;
        let controls = ControlGrid::from_doc(&doc)?;
        let declared = MonotonicityCert::from_doc(&doc)?;
        let time = TimeGrid::new(
            doc.f64_or("grid", "t0", 0.0)?,
            doc.f64_or("grid", "T", 1.0)?,
            doc.usize_or("grid", "nt", 100)?,
        )
        .map_err(|e| Error::config(line_of(&doc, "grid", "nt"), e.to_string()))?;
        let space = SpaceGrid::new(
            doc.f64_or("grid", "x_min", -10.0)?,
            doc.f64_or("grid", "x_max", 10.0)?,
            doc.usize_or("grid", "nx", 201)?,
        )
        .map_err(|e| Error::config(line_of(&doc, "grid", "nx"), e.to_string()))?;
        let settings = SolverSettings::from_doc(&doc)?;
        let probes = doc.usize_or("monotonicity", "probes", 2000)?.max(100);
        let mut problem = GameProblem::new(cs, levy, controls, declared, time, space)?.with_settings(settings);
        problem.cert = check_h23(&problem.cs, &problem.levy, &declared, &probe_domain(&problem), probes, seed)?;
        let verify = VerifySettings::from_doc(&doc, seed)?;
        Ok(Self {
            digest: doc.digest(),
            n_paths: doc.usize_or("simulate", "n_paths", 10_000)?.max(2),
            doc,
            seed,
            problem,
            verify,
            probes,
        })
    }

    pub fn load(path: &Path, overrides: Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(0, format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text, overrides)
    }

    pub fn metadata(&self, kind: &str) -> Metadata {
        Metadata::new(&self.digest, self.seed, kind)
    }
}

fn line_of(doc: &ConfigDoc, section: &str, key: &str) -> usize {
    doc.entry(section, key).map_or(0, |e| e.line)
}

/// `[levy]`: `atoms`, `intensities` (comma lists), `C`; `l` is read with the model.
fn levy_from_doc(doc: &ConfigDoc, cs: &CoefficientSet) -> Result<LevyModel> {
    let atoms = doc.list_or("levy", "atoms", &[])?;
    let intensities = doc.list_or("levy", "intensities", &[])?;
    let line = line_of(doc, "levy", "atoms");
    if atoms.len() != intensities.len() {
        return Err(Error::config(line, "atoms and intensities differ in length"));
    }
    let spec: Vec<(f64, f64)> = atoms.into_iter().zip(intensities).collect();
    discretize_levy(&spec, &cs.l, doc.f64_or("levy", "C", 1.0)?)
        .map_err(|e| if e.is_config_error() { e } else { Error::config(line, e.to_string()) })
}

/// Header lines shared by every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Metadata {
    pub version: String,
    pub config_digest: String,
    pub seed: u64,
    pub generator: String,
    pub kind: String,
}

impl Metadata {
    pub fn new(config_digest: &str, seed: u64, kind: &str) -> Self {
        Self {
            version: VERSION.to_string(),
            config_digest: config_digest.to_string(),
            seed,
            generator: GENERATOR.to_string(),
            kind: kind.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldRow {
    pub slice: usize,
    pub node: usize,
    pub t: f64,
    pub x: f64,
    pub values: Vec<f64>,
}

/// A field on the grid in export form: `slice,node,t,x` then the value columns.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldTable {
    pub meta: Metadata,
    /// Value column names, starting with `W`.
    pub columns: Vec<String>,
    pub rows: Vec<FieldRow>,
}

fn grid_rows(time: &TimeGrid, space: &SpaceGrid, cell: impl Fn(usize, usize) -> Vec<f64>) -> Vec<FieldRow> {
    let mut rows = Vec::with_capacity((time.n_steps + 1) * space.n_nodes);
    for slice in 0..=time.n_steps {
        for node in 0..space.n_nodes {
            rows.push(FieldRow {
                slice,
                node,
                t: time.time(slice),
                x: space.x(node),
                values: cell(slice, node),
            });
        }
    }
    rows
}

impl FieldTable {
    pub fn from_value_field(field: &ValueField, meta: Metadata) -> Self {
        Self {
            meta,
            columns: vec!["W".into()],
            rows: grid_rows(&field.time, &field.space, |k, j| vec![field.values[k][j]]),
        }
    }

    /// `W = Y`, then `Z` and one `K` column per atom.
    pub fn from_backward(sol: &BackwardSolution, meta: Metadata) -> Self {
        let mut columns = vec!["W".to_string(), "Z".to_string()];
        columns.extend((1..=sol.n_atoms()).map(|i| format!("K{i}")));
        Self {
            meta,
            columns,
            rows: grid_rows(&sol.time, &sol.space, |k, j| {
                let mut v = vec![sol.y[k][j], sol.z[k][j]];
                v.extend(&sol.k[k][j]);
                v
            }),
        }
    }

    /// Appends a `gap` column; `gap` is indexed `[slice][node]`.
    pub fn with_gap(mut self, gap: &[Vec<f64>]) -> Self {
        self.columns.push("gap".into());
        for row in &mut self.rows {
            row.values.push(gap[row.slice][row.node]);
        }
        self
    }

    pub fn to_csv(&self) -> String {
        let m = &self.meta;
        let mut out = String::new();
        let _ = writeln!(out, "# version={}", m.version);
        let _ = writeln!(out, "# config_digest={}", m.config_digest);
        let _ = writeln!(out, "# seed={}", m.seed);
        let _ = writeln!(out, "# generator={}", m.generator);
        let _ = writeln!(out, "# kind={}", m.kind);
        let _ = writeln!(out, "# slice,node,t,x,{}", self.columns.join(","));
        for r in &self.rows {
            let _ = write!(out, "{},{},{:.16e},{:.16e}", r.slice, r.node, r.t, r.x);
            for v in &r.values {
                let _ = write!(out, ",{v:.16e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut meta = Metadata::new("", 0, "");
        meta.version.clear();
        meta.generator.clear();
        let mut columns: Option<Vec<String>> = None;
        let mut rows = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let bad = |msg: &str| Error::Csv(format!("line {}: {msg}", idx + 1));
            if let Some(rest) = line.strip_prefix("# ") {
                if let Some(header) = rest.strip_prefix("slice,node,t,x,") {
                    columns = Some(header.split(',').map(str::to_string).collect());
                    continue;
                }
                let (key, value) = rest.split_once('=').ok_or_else(|| bad("malformed metadata"))?;
                let value = value.to_string();
                match key {
                    "version" => meta.version = value,
                    "config_digest" => meta.config_digest = value,
                    "seed" => meta.seed = value.parse().map_err(|_| bad("seed is not an integer"))?,
                    "generator" => meta.generator = value,
                    "kind" => meta.kind = value,
                    _ => return Err(bad("unknown metadata key")),
                }
                continue;
            }
            let cols = columns.as_ref().ok_or_else(|| bad("data before header"))?;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 + cols.len() {
                return Err(bad("wrong number of fields"));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad("expected an index"));
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad("expected a number"));
            rows.push(FieldRow {
                slice: int(fields[0])?,
                node: int(fields[1])?,
                t: num(fields[2])?,
                x: num(fields[3])?,
                values: fields[4..].iter().map(|s| num(s)).collect::<Result<_>>()?,
            });
        }
        Ok(Self {
            meta,
            columns: columns.ok_or_else(|| Error::Csv("missing header".into()))?,
            rows,
        })
    }

    /// Column by name as `[slice][node]`.
    pub fn column(&self, name: &str) -> Option<Vec<Vec<f64>>> {
        let c = self.columns.iter().position(|n| n == name)?;
        let mut out: Vec<Vec<f64>> = Vec::new();
        for r in &self.rows {
            if out.len() <= r.slice {
                out.resize(r.slice + 1, Vec::new());
            }
            let row = &mut out[r.slice];
            if row.len() <= r.node {
                row.resize(r.node + 1, f64::NAN);
            }
            row[r.node] = r.values[c];
        }
        Some(out)
    }
}

pub fn export_field(table: &FieldTable, path: &Path) -> Result<()> {
    std::fs::write(path, table.to_csv())?;
    Ok(())
}

pub fn import_field(path: &Path) -> Result<FieldTable> {
    FieldTable::parse(&std::fs::read_to_string(path)?)
}

fn json_artifact<T: Serialize>(meta: &Metadata, body: &T) -> String {
    let doc = json!({ "metadata": meta, "result": body });
    serde_json::to_string_pretty(&doc).expect("artifact serializes") + "\n"
}

#[derive(Debug, Parser)]
#[command(name = "fbsde-games", version, about = "Value functions of zero-sum games driven by FBSDEs with jumps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Config file.
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of time steps.
    #[arg(long)]
    nt: Option<usize>,
    /// Number of space nodes.
    #[arg(long)]
    nx: Option<usize>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            nt: self.nt,
            nx: self.nx,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check the coefficient assumptions and the monotonicity certificate.
    Check(Common),
    /// Solve the lower and upper game values.
    SolveGame(Common),
    /// Solve the Isaacs equation.
    SolvePde {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "lower")]
        kind: String,
    },
    /// Run the property suite.
    Verify {
        #[command(flatten)]
        common: Common,
        /// `all` or a comma-separated list of property ids.
        #[arg(long, default_value = "all")]
        suite: String,
    },
    /// Sample driving paths and report their statistics.
    Simulate(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Check(c) | Command::SolveGame(c) | Command::Simulate(c) => c,
            Command::SolvePde { common, .. } | Command::Verify { common, .. } => common,
        }
    }
}

/// Files to write once a command succeeds.
struct Artifacts {
    files: Vec<(String, String)>,
    exit: i32,
}

impl Artifacts {
    fn ok(files: Vec<(String, String)>) -> Self {
        Self { files, exit: 0 }
    }
}

fn exit_code(e: &Error) -> i32 {
    if e.is_config_error() {
        1
    } else {
        2
    }
}

/// Runs one invocation; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    execute(args, &mut |msg| eprintln!("error: {msg}"))
}

/// [`run`] with error messages passed to `report` instead of standard error.
pub fn execute<I, T>(args: I, report: &mut dyn FnMut(&str)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let common = cli.command.common();
    let cfg = match RunConfig::load(&common.config, common.overrides()) {
        Ok(c) => c,
        Err(e) => {
            report(&e.to_string());
            return 1;
        }
    };
    let outcome = match &cli.command {
        Command::Check(_) => check(&cfg),
        Command::SolveGame(_) => solve_game(&cfg),
        Command::SolvePde { kind, .. } => match kind.parse::<ValueKind>() {
            Ok(k) => solve_pde_cmd(&cfg, k),
            Err(e) => Err(Error::config(0, e.to_string())),
        },
        Command::Verify { suite, .. } => verify(&cfg, suite),
        Command::Simulate(_) => simulate(&cfg),
    };
    match outcome {
        Ok(art) => match write_all(&common.out, &art.files) {
            Ok(()) => art.exit,
            Err(e) => {
                report(&e.to_string());
                2
            }
        },
        Err(e) => {
            report(&e.to_string());
            exit_code(&e)
        }
    }
}

fn write_all(dir: &Path, files: &[(String, String)]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, body) in files {
        std::fs::write(dir.join(name), body)?;
        println!("wrote {}", dir.join(name).display());
    }
    Ok(())
}

fn check(cfg: &RunConfig) -> Result<Artifacts> {
    let p = &cfg.problem;
    let domain = probe_domain(p);
    let h22 = check_h22(&p.cs, &p.levy, &domain, cfg.probes, cfg.seed, f64::INFINITY, f64::INFINITY)?;
    let h31 = check_h31(&p.cs, &p.levy, &domain, cfg.probes, cfg.seed, DEFAULT_SMALLNESS_THRESHOLD)?;
    let min_steps = cfl_min_steps(p).ok();
    println!("coefficients: {}", if p.cs.is_decoupled() { "decoupled" } else { "coupled" });
    println!(
        "monotonicity: {} (worst violation {:.3e})",
        if p.cert.verified { "verified" } else { "not verified" },
        p.cert.worst_violation
    );
    println!("smallness: {} (L_sigma {:.4})", if h31.holds { "holds" } else { "fails" }, h31.l_sigma);
    if let Some(n) = min_steps {
        println!("explicit scheme needs nt >= {n} (configured {})", p.time.n_steps);
    }
    let body = json!({
        "decoupled": p.cs.is_decoupled(),
        "special_case": p.cs.is_special_case(),
        "coefficients": p.cs.sources(),
        "levy": p.levy,
        "lipschitz": h22,
        "monotonicity": p.cert,
        "smallness": h31,
        "pde_min_steps": min_steps,
    });
    Ok(Artifacts::ok(vec![("check.json".into(), json_artifact(&cfg.metadata("check"), &body))]))
}

fn solve_game(cfg: &RunConfig) -> Result<Artifacts> {
    let lower = lower_value(&cfg.problem)?;
    let upper = upper_value(&cfg.problem)?;
    let gap = isaacs_gap(&lower, &upper, isaacs_tolerance(&cfg.problem.time))?;
    println!(
        "isaacs gap {:.3e} (tolerance {:.3e}): value {}",
        gap.max_gap,
        gap.tolerance,
        if gap.value_exists { "exists" } else { "not established" }
    );
    let upper_table = FieldTable::from_value_field(&upper, cfg.metadata("upper")).with_gap(&gap.gap_field);
    Ok(Artifacts::ok(vec![
        ("lower.csv".into(), FieldTable::from_value_field(&lower, cfg.metadata("lower")).to_csv()),
        ("upper.csv".into(), upper_table.to_csv()),
    ]))
}

fn solve_pde_cmd(cfg: &RunConfig, kind: ValueKind) -> Result<Artifacts> {
    let sol = solve_pde(&cfg.problem, kind)?;
    println!(
        "{} field: min centre weight {:.3}, clamp fraction {:.3}",
        kind.name(),
        sol.min_center_weight,
        sol.clamp_fraction()
    );
    let name = format!("pde_{}", kind.name());
    let table = FieldTable::from_value_field(&sol.field, cfg.metadata(&name));
    Ok(Artifacts::ok(vec![(format!("{name}.csv"), table.to_csv())]))
}

fn verify(cfg: &RunConfig, suite: &str) -> Result<Artifacts> {
    let selection = Selection::parse(suite)?;
    let report = run_suite(&cfg.problem, &selection, &cfg.verify);
    for e in &report.entries {
        println!(
            "{:<28} {:<8} measured {:.3e} tol {:.3e}",
            e.id,
            format!("{:?}", e.status).to_lowercase(),
            e.measured,
            e.tol
        );
    }
    let timings: Vec<_> = report.entries.iter().map(|e| json!({ "id": e.id, "runtime_ms": e.runtime_ms })).collect();
    Ok(Artifacts {
        files: vec![
            ("report.json".into(), report.body_without_timings()),
            ("timings.json".into(), serde_json::to_string_pretty(&timings).expect("timings serialize") + "\n"),
        ],
        exit: if report.all_pass() { 0 } else { 3 },
    })
}

fn simulate(cfg: &RunConfig) -> Result<Artifacts> {
    let p = &cfg.problem;
    let bundle = sample_paths(&p.time, &p.levy, cfg.n_paths, cfg.seed)?;
    let stats = path_statistics(&bundle, &p.levy);
    println!(
        "{} paths: increment mean {:.3e}, variance {:.4e} (dt {:.4e})",
        stats.n_paths, stats.increment_mean, stats.increment_variance, stats.dt
    );
    Ok(Artifacts::ok(vec![("paths.json".into(), json_artifact(&cfg.metadata("simulate"), &stats))]))
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEAT: &str = "[model]\nsigma = \"1\"\nphi = \"x^2\"\n[grid]\nT = 1\nnt = 4\nx_min = -2\nx_max = 2\nnx = 5\n";

    #[test]
    fn csv_layout_and_roundtrip() {
        let cfg = RunConfig::from_text(HEAT, Overrides { nt: Some(1), nx: Some(3), ..Default::default() }).unwrap();
        let field = lower_value(&cfg.problem).unwrap();
        let table = FieldTable::from_value_field(&field, cfg.metadata("lower"));
        assert_eq!(table.rows.len(), 6);
        let csv = table.to_csv();
        assert!(csv.contains("\n# slice,node,t,x,W\n"));
        let back = FieldTable::parse(&csv).unwrap();
        assert_eq!(back, table);
        assert_eq!(back.to_csv(), csv);
        assert_eq!(back.column("W").unwrap(), field.values);

        let gap = vec![vec![0.5; 3]; 2];
        let with_gap = table.with_gap(&gap);
        assert!(with_gap.to_csv().contains("# slice,node,t,x,W,gap\n"));
    }

    #[test]
    fn backward_tables_carry_z_and_k() {
        let text = "[model]\nsigma = \"0.5\"\nh = \"e\"\nphi = \"x\"\n[levy]\natoms = -0.5, 0.5\nintensities = 1, 1\nl = \"abs(e)\"\n[grid]\nnt = 8\nx_min = -2\nx_max = 2\nnx = 9\n";
        let cfg = RunConfig::from_text(text, Overrides::default()).unwrap();
        let c = crate::fbsde::Policy::Constant(0.0);
        let sol = cfg.problem.system().solve_horizon(&c, &c).unwrap();
        let table = FieldTable::from_backward(&sol, cfg.metadata("cost"));
        assert_eq!(table.columns, ["W", "Z", "K1", "K2"]);
        let csv = table.to_csv();
        assert_eq!(FieldTable::parse(&csv).unwrap().to_csv(), csv);
    }

    #[test]
    fn config_errors_are_exit_one() {
        let e = RunConfig::from_text("[model]\nphi = \"x +\"\n", Overrides::default()).unwrap_err();
        assert_eq!(exit_code(&e), 1);
        assert!(e.to_string().contains("line 2"));
        let e = RunConfig::from_text("[model]\nphi = \"x\"\n[levy]\natoms = 1\n", Overrides::default()).unwrap_err();
        assert_eq!(exit_code(&e), 1);
        let e = RunConfig::from_text("[model]\nphi = \"x\"\n[grid]\nnx = 1\n", Overrides::default()).unwrap_err();
        assert_eq!(exit_code(&e), 1);
    }

    #[test]
    fn overrides_change_the_digest() {
        let a = RunConfig::from_text(HEAT, Overrides::default()).unwrap();
        let b = RunConfig::from_text(HEAT, Overrides { nt: Some(8), ..Default::default() }).unwrap();
        assert_eq!(b.problem.time.n_steps, 8);
        assert_ne!(a.digest, b.digest);
        let c = RunConfig::from_text(HEAT, Overrides { seed: Some(9), ..Default::default() }).unwrap();
        assert_eq!((c.seed, c.verify.seed), (9, 9));
    }
}
