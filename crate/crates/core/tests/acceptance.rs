//! Acceptance suite. Prints one line per criterion and fails if any criterion fails.

use std::path::{Path, PathBuf};
use std::time::Instant;

use fbsde_games::cli::{self, Overrides, RunConfig};
use fbsde_games::game::{dpp_consistency, isaacs_gap, isaacs_tolerance, lower_value, upper_value, ValueKind};
use fbsde_games::pde::solve_hjbi_special;
use fbsde_games::verify::{run_suite, ReportEntry, Selection, Status, VerificationReport};

const CONFIGS: [&str; 8] = [
    "heat",
    "pure_jump",
    "game_uv",
    "game_upv",
    "special_jump",
    "coupled",
    "kink",
    "general",
];

/// Properties the criteria read from the per-config reports.
const SUITE: &str = "comparison,lipschitz,holder,monotonicity,cross-validation,determinism";

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(format!("{name}.cfg"))
}

fn load(name: &str) -> RunConfig {
    RunConfig::load(&config_path(name), Overrides::default()).expect("shipped config loads")
}

struct Verdict {
    pass: bool,
    summary: String,
}

impl Verdict {
    fn new(pass: bool, summary: impl Into<String>) -> Self {
        Self { pass, summary: summary.into() }
    }
}

fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("pool").install(f)
}

fn entry<'a>(report: &'a VerificationReport, id: &str) -> &'a ReportEntry {
    report.entry(id).expect("property ran")
}

/// Worst relative interior error of the special-case PDE against `exact(t, x)`.
fn closed_form_error(name: &str, exact: impl Fn(f64, f64) -> f64) -> (f64, f64) {
    let cfg = load(name);
    let p = &cfg.problem;
    let start = Instant::now();
    let sol = single_threaded(|| solve_hjbi_special(p, ValueKind::Lower)).expect("pde solves");
    let secs = start.elapsed().as_secs_f64();
    let mut worst: f64 = 0.0;
    for (k, row) in sol.field.values.iter().enumerate() {
        let t = p.time.time(k);
        for j in p.space.interior(0.1) {
            let e = exact(t, p.space.x(j));
            let err = (row[j] - e).abs();
            if err > 0.0 {
                worst = worst.max(err / e.abs());
            }
        }
    }
    (worst, secs)
}

fn criterion_closed_form() -> Verdict {
    let (heat, t_heat) = closed_form_error("heat", |t, x| x * x + (1.0 - t));
    // Atoms +-1 with intensity 1/2: the jump part adds sum lambda e^2 = 1 per unit time.
    let (jump, t_jump) = closed_form_error("pure_jump", |t, x| x * x + (1.0 - t));
    let pass = heat <= 0.02 && jump <= 0.01 && t_heat <= 10.0 && t_jump <= 10.0;
    Verdict::new(
        pass,
        format!("heat rel err {heat:.2e} (<= 2%) in {t_heat:.2}s, pure jump rel err {jump:.2e} (<= 1%) in {t_jump:.2}s"),
    )
}

fn criterion_game_values() -> Verdict {
    let start = Instant::now();
    let within = |values: &[f64], cfg: &RunConfig, exact: &dyn Fn(f64) -> f64| {
        cfg.problem
            .space
            .interior(0.1)
            .map(|j| {
                let e = exact(cfg.problem.space.x(j));
                (values[j] - e).abs() / e.abs().max(1.0)
            })
            .fold(0.0, f64::max)
    };
    let uv = load("game_uv");
    let (w, u) = (lower_value(&uv.problem).unwrap(), upper_value(&uv.problem).unwrap());
    let lower_err = within(&w.values[0], &uv, &|x| x - 1.0);
    let upper_err = within(&u.values[0], &uv, &|x| x + 1.0);

    let upv = load("game_upv");
    let (w2, u2) = (lower_value(&upv.problem).unwrap(), upper_value(&upv.problem).unwrap());
    let tol = isaacs_tolerance(&upv.problem.time);
    let gap = isaacs_gap(&w2, &u2, tol).unwrap();
    let both_err = within(&w2.values[0], &upv, &|x| x).max(within(&u2.values[0], &upv, &|x| x));
    let secs = start.elapsed().as_secs_f64();
    let pass = lower_err <= 0.05 && upper_err <= 0.05 && gap.value_exists && both_err <= 0.05 && secs <= 30.0;
    Verdict::new(
        pass,
        format!(
            "u*v: lower err {lower_err:.2e}, upper err {upper_err:.2e}; u+v: gap {:.2e} (<= {tol:.2e}), err {both_err:.2e}; {secs:.1}s",
            gap.max_gap
        ),
    )
}

fn criterion_dpp() -> Verdict {
    let mut worst_ratio: f64 = 0.0;
    let mut parts = Vec::new();
    for name in CONFIGS {
        let p = load(name).problem;
        let r = dpp_consistency(&p, p.time.n_steps / 2).expect("dpp runs");
        let tol = 5.0 * p.time.dt();
        worst_ratio = worst_ratio.max(r.sup_gap / tol);
        parts.push(format!("{name} {:.1e}", r.sup_gap));
    }
    Verdict::new(worst_ratio <= 1.0, format!("sup gap / 5dt <= {worst_ratio:.2e} ({})", parts.join(", ")))
}

fn criterion_comparison(reports: &[(&str, VerificationReport)]) -> Verdict {
    let cfg = load("special_jump");
    let bsde = run_suite(&cfg.problem, &Selection::parse("bsde-comparison").unwrap(), &cfg.verify);
    let b = entry(&bsde, "bsde-comparison");
    let mut pass = b.pass && b.detail["held"] == 100;
    let mut held = 0;
    let mut pairs = 0;
    for (_, r) in reports {
        let e = entry(r, "comparison");
        pass &= e.pass && e.detail["pairs"] == 50;
        held += e.detail["held"].as_u64().unwrap_or(0);
        pairs += e.detail["pairs"].as_u64().unwrap_or(0);
    }
    Verdict::new(
        pass,
        format!("BSDE pairs {}/100 ordered; game terminal pairs {held}/{pairs} ordered over {} configs", b.detail["held"], reports.len()),
    )
}

fn criterion_regularity(reports: &[(&str, VerificationReport)]) -> Verdict {
    let mut pass = true;
    let mut worst_lip: f64 = 0.0;
    for (_, r) in reports {
        let e = entry(r, "lipschitz");
        pass &= e.pass;
        worst_lip = worst_lip.max(e.measured);
    }
    let kink = &reports.iter().find(|(n, _)| *n == "kink").expect("kink config").1;
    let h = entry(kink, "holder");
    let exponent = h.measured;
    let drift = h.detail["constant_drift"].as_f64().unwrap_or(f64::NAN);
    pass &= (0.4..=0.6).contains(&exponent) && drift <= 0.2;
    Verdict::new(
        pass,
        format!("Lipschitz / metadata constant <= {worst_lip:.3} (<= 1.1); kink Holder exponent {exponent:.3} in [0.4, 0.6], constant drift {drift:.2e} under dt halving"),
    )
}

fn criterion_monotonicity(reports: &[(&str, VerificationReport)]) -> Verdict {
    let mut pass = true;
    let mut checked = Vec::new();
    let mut skipped = Vec::new();
    for (name, r) in reports {
        let e = entry(r, "monotonicity");
        match e.status {
            Status::Skipped => skipped.push(*name),
            _ => {
                pass &= e.pass;
                checked.push(format!("{name} {:.1e}", e.measured));
            }
        }
    }
    pass &= !checked.is_empty();
    Verdict::new(
        pass,
        format!(
            "violation below -2dx*C: {}; not applicable (certificate fails): {}",
            checked.join(", "),
            skipped.join(", ")
        ),
    )
}

fn criterion_representation() -> Verdict {
    let cfg = load("general");
    let r = run_suite(&cfg.problem, &Selection::parse("representation-residual").unwrap(), &cfg.verify);
    let e = entry(&r, "representation-residual");
    Verdict::new(e.pass && e.measured <= 1e-12, format!("max residual {:.2e} over 1000 queries and closed forms (<= 1e-12)", e.measured))
}

fn criterion_cross_validation(reports: &[(&str, VerificationReport)]) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    let mut applicable = 0;
    for (name, r) in reports {
        let e = entry(r, "cross-validation");
        if e.status == Status::Skipped {
            continue;
        }
        applicable += 1;
        pass &= e.pass;
        let floor = e.detail["floor"].as_f64().unwrap_or(0.0);
        let trend = if e.measured <= floor {
            "schemes agree below floor".to_string()
        } else {
            format!("ratio {:.2}", e.detail["ratio"].as_f64().unwrap_or(f64::NAN))
        };
        parts.push(format!("{name} {:.1e}/{:.1e} {trend}", e.measured, e.tol));
    }
    pass &= applicable > 0;
    Verdict::new(pass, parts.join("; "))
}

fn criterion_determinism(reports: &[(&str, VerificationReport)]) -> Verdict {
    let mut pass = true;
    let mut slopes = Vec::new();
    for (name, r) in reports {
        let e = entry(r, "determinism");
        pass &= e.pass && e.detail["bit_identical"] == true;
        slopes.push(format!("{name} {:.3}", e.measured));
    }
    Verdict::new(pass, format!("W bit-identical; MC spread slopes {}", slopes.join(", ")))
}

fn criterion_reproducibility() -> Verdict {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let commands: [&[&str]; 5] = [
        &["check", "special_jump"],
        &["solve-game", "special_jump"],
        &["solve-pde", "special_jump", "--kind", "upper"],
        &["simulate", "special_jump"],
        &["verify", "special_jump", "--suite", "path-laws,bsde-comparison,mc-reduction,csv-roundtrip"],
    ];
    let mut codes = Vec::new();
    for dir in &dirs {
        for cmd in commands {
            let cfg = config_path(cmd[1]);
            let mut args = vec!["fbsde-games".to_string(), cmd[0].to_string(), cfg.display().to_string()];
            args.extend(cmd[2..].iter().map(|s| s.to_string()));
            args.extend(["--out".to_string(), dir.path().display().to_string(), "--seed".into(), "7".into()]);
            codes.push(cli::run(args));
        }
    }
    let mut names: Vec<String> = std::fs::read_dir(dirs[0].path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n != "timings.json")
        .collect();
    names.sort();
    let identical = names.iter().all(|n| {
        let a = std::fs::read(dirs[0].path().join(n)).unwrap();
        let b = std::fs::read(dirs[1].path().join(n)).ok();
        Some(a) == b
    });
    let pass = identical && codes.iter().all(|&c| c == 0) && names.len() >= 6;
    Verdict::new(pass, format!("{} artifacts byte-identical across two runs: {}", names.len(), names.join(", ")))
}

fn main() {
    let reports: Vec<(&str, VerificationReport)> = CONFIGS
        .iter()
        .map(|&name| {
            let cfg = load(name);
            (name, run_suite(&cfg.problem, &Selection::parse(SUITE).unwrap(), &cfg.verify))
        })
        .collect();
    for (name, r) in &reports {
        for e in &r.entries {
            if e.status == Status::Errored {
                println!("note: {name}/{} errored: {}", e.id, e.detail);
            }
        }
    }

    let criteria: Vec<(&str, Box<dyn Fn() -> Verdict + '_>)> = vec![
        ("closed-form PDE checks", Box::new(criterion_closed_form)),
        ("game value reproduction", Box::new(criterion_game_values)),
        ("DPP consistency", Box::new(criterion_dpp)),
        ("comparison suite", Box::new(|| criterion_comparison(&reports))),
        ("regularity fits", Box::new(|| criterion_regularity(&reports))),
        ("monotonicity under G", Box::new(|| criterion_monotonicity(&reports))),
        ("representation solver", Box::new(criterion_representation)),
        ("cross-validation", Box::new(|| criterion_cross_validation(&reports))),
        ("determinism of the value", Box::new(|| criterion_determinism(&reports))),
        ("reproducibility", Box::new(criterion_reproducibility)),
    ];
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let v = run();
        failures += usize::from(!v.pass);
        println!("criterion {:>2} {:<26} {}  {}", i + 1, name, if v.pass { "PASS" } else { "FAIL" }, v.summary);
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
