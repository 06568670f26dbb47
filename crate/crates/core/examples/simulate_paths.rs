//! Samples Brownian increments and Poisson counts and compares them with their laws.

use fbsde_games::coeffs::expr::Expr;
use fbsde_games::stochastics::{discretize_levy, path_statistics, sample_paths};
use fbsde_games::TimeGrid;

fn main() -> fbsde_games::Result<()> {
    let levy = discretize_levy(&[(-0.5, 1.0), (0.5, 2.0)], &Expr::parse("abs(e)")?, 1.0)?;
    let grid = TimeGrid::new(0.0, 1.0, 50)?;
    let paths = sample_paths(&grid, &levy, 20_000, 42)?;
    let stats = path_statistics(&paths, &levy);
    println!("increment mean {:+.2e}, variance {:.4e} (dt = {:.4e})", stats.increment_mean, stats.increment_variance, grid.dt());
    for (i, m) in stats.jump_count_mean.iter().enumerate() {
        println!("atom {}: mean count {m:.4e} (lambda dt = {:.4e})", levy.atoms[i], levy.intensities[i] * grid.dt());
    }
    println!("compensated jump mean {:+.2e}", stats.compensated_jump_mean);
    Ok(())
}
