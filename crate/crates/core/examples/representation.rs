//! Solves z = xi + p sigma(s, x, y, z, u, v) for a volatility that depends on z.

use fbsde_games::algebraic::{residual, solve_representation, AlgebraicQuery};
use fbsde_games::coeffs::CoefficientSet;

fn main() -> fbsde_games::Result<()> {
    let cs = CoefficientSet::from_pairs(&[("sigma", "0.2*(1 - z) + 0.1*sin(x)"), ("phi", "x")])?;
    for p in [0.0, 0.5, 2.0, 10.0] {
        let q = AlgebraicQuery::new(0.0, 1.0, 0.0, 0.3, p, 0.0, 0.0);
        let z = solve_representation(&q, &cs)?;
        println!("p = {p:>4}: z = {z:.12}, residual {:.1e}", residual(&q, &cs, z)?);
    }
    Ok(())
}
