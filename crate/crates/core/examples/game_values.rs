//! Lower and upper values of two transport games; only the additive one has a value.

use fbsde_games::coeffs::{CoefficientSet, MonotonicityCert};
use fbsde_games::fbsde::ControlGrid;
use fbsde_games::game::{isaacs_gap, isaacs_tolerance, lower_value, upper_value, GameProblem};
use fbsde_games::stochastics::LevyModel;
use fbsde_games::{SpaceGrid, TimeGrid};

fn main() -> fbsde_games::Result<()> {
    for drift in ["u*v", "u + v"] {
        let problem = GameProblem::new(
            CoefficientSet::from_pairs(&[("b", drift), ("sigma", "0.0001"), ("phi", "x")])?,
            LevyModel::none(),
            ControlGrid::new(vec![-1.0, 1.0], vec![-1.0, 1.0])?,
            MonotonicityCert::new(1.0, 1.0, 0.0, 0.0, 1.0)?,
            TimeGrid::new(0.0, 1.0, 100)?,
            SpaceGrid::new(-10.0, 10.0, 201)?,
        )?;
        let (w, u) = (lower_value(&problem)?, upper_value(&problem)?);
        let mid = problem.space.n_nodes / 2;
        let gap = isaacs_gap(&w, &u, isaacs_tolerance(&problem.time))?;
        println!(
            "b = {drift:<6} W(0,0) = {:+.4}  U(0,0) = {:+.4}  gap {:.2e}  value exists: {}",
            w.values[0][mid], u.values[0][mid], gap.max_gap, gap.value_exists
        );
    }
    Ok(())
}
