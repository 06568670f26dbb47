//! Parses a model and samples its Lipschitz, monotonicity and smallness certificates.

use fbsde_games::coeffs::{check_h22, check_h23, check_h31, parse_coefficients, MonotonicityCert, ProbeDomain};
use fbsde_games::stochastics::LevyModel;

fn main() -> fbsde_games::Result<()> {
    let cs = parse_coefficients(
        "[model]\nb = \"u*v - 0.5*y\"\nsigma = \"0.3\"\nf = \"x\"\nphi = \"x\"\n",
    )?;
    let levy = LevyModel::none();
    let domain = ProbeDomain::new(5.0, (0.0, 1.0), vec![-1.0, 1.0], vec![-1.0, 1.0]);

    let lip = check_h22(&cs, &levy, &domain, 2000, 0, 10.0, 10.0)?;
    for (slot, l) in &lip.joint_lipschitz {
        println!("L_{slot} ~ {l:.4}");
    }
    let cert = check_h23(&cs, &levy, &MonotonicityCert::new(1.0, 1.0, 0.0, 0.0, 1.0)?, &domain, 2000, 0)?;
    println!("monotonicity verified: {} (worst violation {:.2e})", cert.verified, cert.worst_violation);
    let small = check_h31(&cs, &levy, &domain, 2000, 0, 0.25)?;
    println!("smallness holds: {} (L_sigma {:.3})", small.holds, small.l_sigma);
    Ok(())
}
