//! Driving noise: Brownian increments, Poisson jump counts on a finite set of
//! Lévy atoms, and the one-step Markov-chain stencils that back every grid
//! conditional expectation in the crate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::coeffs::expr::{Bindings, Expr, Var};
use crate::error::{Error, Result};
use crate::grid::{Location, SpaceGrid, TimeGrid};

/// Identity of the path generator, recorded in run metadata.
pub const GENERATOR: &str = "chacha8-stream-per-path/seed_from_u64";

/// Finite-activity jump measure: atoms `e_i` with intensities `lambda_i`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevyModel {
    pub atoms: Vec<f64>,
    pub intensities: Vec<f64>,
    pub l_values: Vec<f64>,
    /// The `C` in `0 <= l(e) <= C min(1, |e|)`.
    pub l_bound: f64,
}

impl LevyModel {
    pub fn none() -> Self {
        Self {
            atoms: Vec::new(),
            intensities: Vec::new(),
            l_values: Vec::new(),
            l_bound: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn total_intensity(&self) -> f64 {
        self.intensities.iter().sum()
    }

    /// `sum_i lambda_i min(1, e_i^2)`; always finite for a finite atom set.
    pub fn small_jump_mass(&self) -> f64 {
        self.atoms
            .iter()
            .zip(&self.intensities)
            .map(|(e, lam)| lam * (e * e).min(1.0))
            .sum()
    }

    /// `sum_i k_i l(e_i) lambda_i`, the scalar jump argument of the driver.
    pub fn l_integral(&self, k: &[f64]) -> f64 {
        k.iter()
            .zip(&self.l_values)
            .zip(&self.intensities)
            .map(|((k, l), lam)| k * l * lam)
            .sum()
    }
}

/// Builds a [`LevyModel`] from `(atom, intensity)` pairs, evaluating `l` on each atom.
pub fn discretize_levy(atom_spec: &[(f64, f64)], l_expr: &Expr, c: f64) -> Result<LevyModel> {
    if !(c.is_finite() && c >= 0.0) {
        return Err(Error::Levy(format!("bound C must be finite and >= 0, got {c}")));
    }
    let mut atoms = Vec::with_capacity(atom_spec.len());
    let mut intensities = Vec::with_capacity(atom_spec.len());
    let mut l_values = Vec::with_capacity(atom_spec.len());
    for &(e, lam) in atom_spec {
        if !e.is_finite() || e == 0.0 {
            return Err(Error::Levy(format!("atom {e} must be finite and nonzero")));
        }
        if !(lam.is_finite() && lam > 0.0) {
            return Err(Error::Levy(format!("atom {e}: intensity {lam} must be positive")));
        }
        if atoms.contains(&e) {
            return Err(Error::Levy(format!("duplicate atom {e}")));
        }
        let l = l_expr.eval(&Bindings::new().with(Var::E, e))?;
        let bound = c * e.abs().min(1.0);
        if l < 0.0 || l > bound * (1.0 + 1e-12) {
            return Err(Error::LevyBound { atom: e, value: l, bound });
        }
        atoms.push(e);
        intensities.push(lam);
        l_values.push(l);
    }
    Ok(LevyModel {
        atoms,
        intensities,
        l_values,
        l_bound: c,
    })
}

/// Sampled Brownian increments and per-atom jump counts, row-major by path then step.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub n_paths: usize,
    pub n_steps: usize,
    pub n_atoms: usize,
    pub dt: f64,
    pub seed: u64,
    pub brownian: Vec<f64>,
    pub jumps: Vec<u32>,
}

impl PathBundle {
    pub fn increment(&self, path: usize, step: usize) -> f64 {
        self.brownian[path * self.n_steps + step]
    }

    pub fn jump_count(&self, path: usize, step: usize, atom: usize) -> u32 {
        self.jumps[(path * self.n_steps + step) * self.n_atoms + atom]
    }

    /// `sum_i e_i (N_i - lambda_i dt)` for one step of one path.
    pub fn compensated_jump(&self, path: usize, step: usize, levy: &LevyModel) -> f64 {
        (0..self.n_atoms)
            .map(|i| {
                levy.atoms[i] * (self.jump_count(path, step, i) as f64 - levy.intensities[i] * self.dt)
            })
            .sum()
    }
}

/// Simulates `n_paths` independent paths. Path `p` draws from its own
/// ChaCha8 stream `p`, so the bundle is identical for any thread count.
pub fn sample_paths(grid: &TimeGrid, levy: &LevyModel, n_paths: usize, seed: u64) -> Result<PathBundle> {
    if n_paths == 0 {
        return Err(Error::Precondition("n_paths must be at least 1".into()));
    }
    let dt = grid.dt();
    let n_steps = grid.n_steps;
    let n_atoms = levy.len();
    let poissons = levy
        .intensities
        .iter()
        .map(|lam| Poisson::new(lam * dt).map_err(|e| Error::Levy(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let sqrt_dt = dt.sqrt();

    let per_path: Vec<(Vec<f64>, Vec<u32>)> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(p as u64);
            let mut dw = Vec::with_capacity(n_steps);
            let mut counts = Vec::with_capacity(n_steps * n_atoms);
            for _ in 0..n_steps {
                let g: f64 = StandardNormal.sample(&mut rng);
                dw.push(g * sqrt_dt);
                for pois in &poissons {
                    let n: f64 = pois.sample(&mut rng);
                    counts.push(n as u32);
                }
            }
            (dw, counts)
        })
        .collect();

    let mut brownian = Vec::with_capacity(n_paths * n_steps);
    let mut jumps = Vec::with_capacity(n_paths * n_steps * n_atoms);
    for (dw, counts) in per_path {
        brownian.extend(dw);
        jumps.extend(counts);
    }
    Ok(PathBundle {
        n_paths,
        n_steps,
        n_atoms,
        dt,
        seed,
        brownian,
        jumps,
    })
}

/// Summary statistics of a bundle, pooled over steps.
#[derive(Debug, Clone, Serialize)]
pub struct PathStatistics {
    pub n_paths: usize,
    pub increment_mean: f64,
    pub increment_variance: f64,
    pub dt: f64,
    pub jump_count_mean: Vec<f64>,
    pub compensated_jump_mean: f64,
}

pub fn path_statistics(bundle: &PathBundle, levy: &LevyModel) -> PathStatistics {
    let n = bundle.brownian.len() as f64;
    let mean = bundle.brownian.iter().sum::<f64>() / n;
    let var = bundle.brownian.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let mut counts = vec![0.0; bundle.n_atoms];
    for chunk in bundle.jumps.chunks(bundle.n_atoms.max(1)) {
        for (c, &k) in counts.iter_mut().zip(chunk) {
            *c += k as f64;
        }
    }
    counts.iter_mut().for_each(|c| *c /= n);
    let mut comp = 0.0;
    for p in 0..bundle.n_paths {
        for s in 0..bundle.n_steps {
            comp += bundle.compensated_jump(p, s, levy);
        }
    }
    PathStatistics {
        n_paths: bundle.n_paths,
        increment_mean: mean,
        increment_variance: var,
        dt: bundle.dt,
        jump_count_mean: counts,
        compensated_jump_mean: comp / n,
    }
}

/// One jump branch of a [`NodeStencil`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpTarget {
    pub location: Location,
    /// `lambda_i dt`.
    pub mass: f64,
}

/// One-step transition law out of a single node.
///
/// With probability `1 - Lambda dt` the chain takes a trinomial diffusion step;
/// with probability `lambda_i dt` it jumps by the atom's shift. The trinomial
/// matches conditional mean `(b - sum lambda_i h_i) dt / (1 - Lambda dt)` and
/// variance `vol^2 dt` whenever those moments admit nonnegative weights, and
/// falls back to a two-point upwind stencil that keeps the mean otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeStencil {
    pub node: usize,
    pub vol: f64,
    pub diffusion_mass: f64,
    /// `(target node, conditional probability)` for down, stay, up.
    pub diffusion: [(usize, f64); 3],
    /// Realized displacement of each diffusion target after boundary clamping.
    pub offsets: [f64; 3],
    pub jumps: Vec<JumpTarget>,
    /// Probability mass whose target fell outside the grid.
    pub leaked_mass: f64,
    pub upwinded: bool,
}

impl NodeStencil {
    /// `jumps` holds `(shift, intensity)` per atom.
    pub fn build(
        space: &SpaceGrid,
        dt: f64,
        node: usize,
        drift: f64,
        vol: f64,
        jumps: &[(f64, f64)],
    ) -> Result<Self> {
        let dx = space.dx();
        let lambda: f64 = jumps.iter().map(|j| j.1).sum();
        let ratio = dt * (vol * vol / (dx * dx) + lambda);
        let suggest = |extra: f64| 0.9 / (vol * vol / (dx * dx) + lambda + extra).max(1e-300);
        if ratio > 1.0 + 1e-12 || !ratio.is_finite() {
            return Err(Error::Cfl {
                ratio,
                limit: 1.0,
                suggested_dt: suggest(drift.abs() / dx),
            });
        }
        let diffusion_mass = 1.0 - lambda * dt;
        let compensator: f64 = jumps.iter().map(|(h, lam)| h * lam).sum();
        let mean = (drift - compensator) * dt / diffusion_mass;
        let var = vol * vol * dt;

        // Moment matching while the trailing weight stays nonnegative, then a
        // two-point upwind stencil; the weights are continuous across the switch.
        let second = (var + mean * mean) / (dx * dx);
        let lead = mean.abs() / dx;
        let upwinded = second < lead;
        let trailing = (0.5 * (second - lead)).max(0.0);
        let (p_up, p_dn) = if mean >= 0.0 {
            (trailing + lead, trailing)
        } else {
            (trailing, trailing + lead)
        };
        if p_up + p_dn > 1.0 + 1e-12 {
            return Err(Error::Cfl {
                ratio: dt * lambda + diffusion_mass * (p_up + p_dn),
                limit: 1.0,
                suggested_dt: suggest(mean.abs() / dt / dx),
            });
        }
        let p_mid = (1.0 - p_up - p_dn).max(0.0);

        let last = space.n_nodes - 1;
        let down = node.saturating_sub(1);
        let up = (node + 1).min(last);
        let x = space.x(node);
        let mut leaked_mass = 0.0;
        if node == 0 {
            leaked_mass += diffusion_mass * p_dn;
        }
        if node == last {
            leaked_mass += diffusion_mass * p_up;
        }

        let targets = jumps
            .iter()
            .map(|&(h, lam)| {
                let location = space.locate(x + h);
                if location.clamped {
                    leaked_mass += lam * dt;
                }
                JumpTarget { location, mass: lam * dt }
            })
            .collect();

        Ok(Self {
            node,
            vol,
            diffusion_mass,
            diffusion: [(down, p_dn), (node, p_mid), (up, p_up)],
            offsets: [space.x(down) - x, 0.0, space.x(up) - x],
            jumps: targets,
            leaked_mass,
            upwinded,
        })
    }

    /// Conditional expectation of `field` one step ahead.
    pub fn expect(&self, field: &[f64]) -> f64 {
        let diff: f64 = self.diffusion.iter().map(|&(j, p)| p * field[j]).sum();
        let jumps: f64 = self
            .jumps
            .iter()
            .map(|j| j.mass * j.location.interpolate(field))
            .sum();
        self.diffusion_mass * diff + jumps
    }

    /// `Z = vol * Cov(field, dX) / Var(dX)` on the diffusion branch.
    pub fn regress_z(&self, field: &[f64]) -> f64 {
        if self.vol == 0.0 {
            return 0.0;
        }
        let mut m_x = 0.0;
        let mut m_y = 0.0;
        for (&(j, p), &d) in self.diffusion.iter().zip(&self.offsets) {
            m_x += p * d;
            m_y += p * field[j];
        }
        let mut cov = 0.0;
        let mut var = 0.0;
        for (&(j, p), &d) in self.diffusion.iter().zip(&self.offsets) {
            cov += p * (d - m_x) * (field[j] - m_y);
            var += p * (d - m_x) * (d - m_x);
        }
        if var <= 0.0 {
            0.0
        } else {
            self.vol * cov / var
        }
    }

    /// `field` at the landing point of jump branch `atom`.
    pub fn jump_value(&self, atom: usize, field: &[f64]) -> f64 {
        self.jumps[atom].location.interpolate(field)
    }

    /// All `(node, weight)` pairs, merged by node.
    pub fn weights(&self) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(3 + 2 * self.jumps.len());
        let mut push = |j: usize, w: f64| {
            if let Some(e) = out.iter_mut().find(|e| e.0 == j) {
                e.1 += w;
            } else {
                out.push((j, w));
            }
        };
        for &(j, p) in &self.diffusion {
            push(j, self.diffusion_mass * p);
        }
        for jt in &self.jumps {
            let l = jt.location;
            push(l.lo, jt.mass * (1.0 - l.theta));
            if l.theta != 0.0 {
                push(l.hi, jt.mass * l.theta);
            }
        }
        out.retain(|e| e.1 != 0.0);
        out.sort_by_key(|e| e.0);
        out
    }

    /// `(mass, mean displacement, central second moment)` of the full law.
    pub fn moments(&self, space: &SpaceGrid) -> (f64, f64, f64) {
        let x = space.x(self.node);
        let w = self.weights();
        let mass: f64 = w.iter().map(|e| e.1).sum();
        let mean: f64 = w.iter().map(|&(j, p)| p * (space.x(j) - x)).sum();
        let var: f64 = w.iter().map(|&(j, p)| p * (space.x(j) - x - mean).powi(2)).sum();
        (mass, mean, var)
    }
}

/// Time-homogeneous stencils for constant drift and volatility, with each
/// atom displacing the state by its own size.
pub fn markov_stencil(
    grid: &TimeGrid,
    space: &SpaceGrid,
    levy: &LevyModel,
    drift: f64,
    vol: f64,
) -> Result<Vec<NodeStencil>> {
    let jumps: Vec<(f64, f64)> = levy
        .atoms
        .iter()
        .copied()
        .zip(levy.intensities.iter().copied())
        .collect();
    (0..space.n_nodes)
        .into_par_iter()
        .map(|j| NodeStencil::build(space, grid.dt(), j, drift, vol, &jumps))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn atoms(spec: &[(f64, f64)], l: &str) -> Result<LevyModel> {
        discretize_levy(spec, &Expr::parse(l).unwrap(), 1.0)
    }

    #[test]
    fn discretize_examples() {
        let m = atoms(&[(-1.0, 0.5), (1.0, 0.5)], "min(1,abs(e))").unwrap();
        assert_eq!(m.l_values, vec![1.0, 1.0]);
        assert_eq!(m.total_intensity(), 1.0);
        let m = atoms(&[(0.1, 1.0)], "abs(e)").unwrap();
        assert_eq!(m.l_values, vec![0.1]);
        match atoms(&[(2.0, 1.0)], "e") {
            Err(Error::LevyBound { atom, value, bound }) => {
                assert_eq!((atom, value, bound), (2.0, 2.0, 1.0));
            }
            other => panic!("{other:?}"),
        }
        assert!(atoms(&[(0.0, 1.0)], "0").is_err());
        assert!(atoms(&[(1.0, -1.0)], "0").is_err());
        assert!(atoms(&[(1.0, 1.0), (1.0, 2.0)], "0").is_err());
    }

    #[test]
    fn no_atoms_means_no_jumps() {
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let b = sample_paths(&grid, &LevyModel::none(), 50, 3).unwrap();
        assert!(b.jumps.is_empty());
        assert_eq!(b.brownian.len(), 500);
    }

    #[test]
    fn same_seed_same_bundle() {
        let grid = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let levy = atoms(&[(-0.5, 1.0), (0.7, 2.0)], "0").unwrap();
        let a = sample_paths(&grid, &levy, 200, 42).unwrap();
        let b = sample_paths(&grid, &levy, 200, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_paths(&grid, &levy, 200, 43).unwrap();
        assert_ne!(a.brownian, c.brownian);
    }

    #[test]
    fn poisson_mean_matches_intensity() {
        let grid = TimeGrid::new(0.0, 0.5, 1).unwrap();
        let levy = atoms(&[(1.0, 2.0)], "0").unwrap();
        let b = sample_paths(&grid, &levy, 100_000, 7).unwrap();
        let stats = path_statistics(&b, &levy);
        assert!((stats.jump_count_mean[0] - 1.0).abs() < 0.02, "{}", stats.jump_count_mean[0]);
    }

    #[test]
    fn stencil_examples() {
        let space = SpaceGrid::new(-1.0, 1.0, 21).unwrap();
        let s = NodeStencil::build(&space, 0.01, 10, 0.0, 0.0, &[]).unwrap();
        assert_eq!(s.weights(), vec![(10, 1.0)]);

        let s = NodeStencil::build(&space, 0.005, 10, 0.0, 1.0, &[]).unwrap();
        let w = s.weights();
        assert_eq!(w.len(), 3);
        assert!((w[0].1 - 0.25).abs() < 1e-14);
        assert!((w[1].1 - 0.5).abs() < 1e-14);
        assert!((w[2].1 - 0.25).abs() < 1e-14);

        let err = NodeStencil::build(&space, 0.01, 10, 0.0, 1.0, &[(0.5, 1.0)]).unwrap_err();
        assert!(matches!(err, Error::Cfl { .. }));
    }

    #[test]
    fn jump_split_preserves_mass_and_mean() {
        let space = SpaceGrid::new(-2.0, 2.0, 41).unwrap();
        let s = NodeStencil::build(&space, 0.01, 20, 0.0, 0.0, &[(0.234, 3.0)]).unwrap();
        let (mass, mean, _) = s.moments(&space);
        assert!((mass - 1.0).abs() < 1e-14);
        assert!(mean.abs() < 1e-14, "{mean}");
    }

    #[test]
    fn boundary_leakage_is_reported() {
        let space = SpaceGrid::new(-1.0, 1.0, 21).unwrap();
        let s = NodeStencil::build(&space, 0.01, 19, 0.0, 0.0, &[(0.5, 1.0)]).unwrap();
        assert!((s.leaked_mass - 0.01).abs() < 1e-15);
    }
}
