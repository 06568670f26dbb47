//! Solves a BSDE with jumps on a Markov-chain grid and checks the comparison principle.

use fbsde_games::bsde::{compare_bsde, solve_bsde, DriverArgs, StencilFamily};
use fbsde_games::coeffs::expr::Expr;
use fbsde_games::stochastics::{discretize_levy, markov_stencil};
use fbsde_games::{SpaceGrid, TimeGrid};

fn main() -> fbsde_games::Result<()> {
    let time = TimeGrid::new(0.0, 1.0, 50)?;
    let space = SpaceGrid::new(-4.0, 4.0, 81)?;
    let levy = discretize_levy(&[(-0.3, 1.0), (0.3, 1.0)], &Expr::parse("abs(e)")?, 1.0)?;
    let family = StencilFamily::Homogeneous(markov_stencil(&time, &space, &levy, 0.1, 0.4)?);

    let terminal: Vec<f64> = space.nodes().iter().map(|x| x.sin()).collect();
    let raised: Vec<f64> = terminal.iter().map(|v| v + 0.1).collect();
    let driver = |d: DriverArgs| Ok(-0.5 * d.y + 0.2 * d.z + 0.3 * d.kbar);

    let low = solve_bsde(&time, &space, &levy, &family, &driver, &terminal)?;
    let high = solve_bsde(&time, &space, &levy, &family, &driver, &raised)?;
    let mid = space.n_nodes / 2;
    println!("Y0(0) = {:.6}, Z0(0) = {:.6}", low.y[0][mid], low.z[0][mid]);
    let verdict = compare_bsde(&high, &low)?;
    println!("ordering preserved: {} (worst margin {:.3e})", verdict.holds, verdict.worst_margin);
    Ok(())
}
