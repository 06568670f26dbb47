//! Runs a few properties of the verification suite on a shipped config.

use fbsde_games::cli::{Overrides, RunConfig};
use fbsde_games::verify::{run_suite, Selection};

fn main() -> fbsde_games::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/coupled.cfg");
    let cfg = RunConfig::load(path.as_ref(), Overrides::default())?;
    let selection = Selection::parse("semigroup,picard-contraction,ordering,dpp,monotonicity,lipschitz")?;
    let report = run_suite(&cfg.problem, &selection, &cfg.verify);
    for e in &report.entries {
        println!("{:<20} {:?}  measured {:.3e}  tol {:.3e} ({})", e.id, e.status, e.measured, e.tol, e.tol_source);
    }
    Ok(())
}
