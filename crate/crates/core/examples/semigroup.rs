//! Backward semigroup of a coupled FBSDE and the cost functional of fixed controls.

use fbsde_games::coeffs::CoefficientSet;
use fbsde_games::fbsde::{Fbsde, Policy, SemigroupQuery};
use fbsde_games::stochastics::LevyModel;
use fbsde_games::{SpaceGrid, TimeGrid};

fn main() -> fbsde_games::Result<()> {
    let cs = CoefficientSet::from_pairs(&[("b", "u*v - 0.5*y"), ("sigma", "0.3"), ("f", "x"), ("phi", "x")])?;
    let levy = LevyModel::none();
    let system = Fbsde::new(&cs, &levy, TimeGrid::new(0.0, 1.0, 80)?, SpaceGrid::new(-6.0, 6.0, 121)?);
    let (u, v) = (Policy::Constant(1.0), Policy::Constant(-1.0));

    let terminal: Vec<f64> = system.space.nodes();
    let window = system.solve_window(&SemigroupQuery {
        t_slice: 70,
        delta_steps: 10,
        u_policy: u.clone(),
        v_policy: v.clone(),
        terminal_field: terminal,
    })?;
    println!("Picard trace on the last window: {:?}", window.picard_trace.iter().map(|c| format!("{c:.1e}")).collect::<Vec<_>>());

    let mid = system.space.n_nodes / 2;
    println!("J(0, 0; u = 1, v = -1) = {:.6}", system.cost_functional(0, mid, &u, &v)?);
    Ok(())
}
