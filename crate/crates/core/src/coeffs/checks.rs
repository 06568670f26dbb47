//! Sampling certificates for the Lipschitz/growth, monotonicity and smallness
//! assumptions. Every check draws probe pairs from a declared box with a
//! seeded generator; the probe sequence for budget `n` is a prefix of the one
//! for any larger budget.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{CoefficientSet, MonotonicityCert};
use crate::error::{Error, Result, Slot};
use crate::stochastics::LevyModel;

/// Bounding box and control grids the checks sample from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeDomain {
    /// `x, y, z, k` are drawn from `[-half_width, half_width]`.
    pub half_width: f64,
    pub t_range: (f64, f64),
    pub u_values: Vec<f64>,
    pub v_values: Vec<f64>,
}

impl ProbeDomain {
    pub fn new(half_width: f64, t_range: (f64, f64), u_values: Vec<f64>, v_values: Vec<f64>) -> Self {
        Self {
            half_width,
            t_range,
            u_values,
            v_values,
        }
    }

    /// Box `[-5, 5]`, `t` in `[0, 1]`, controls fixed at zero.
    pub fn unit() -> Self {
        Self::new(5.0, (0.0, 1.0), vec![0.0], vec![0.0])
    }
}

#[derive(Debug, Clone, Copy)]
struct Point {
    t: f64,
    x: f64,
    y: f64,
    z: f64,
    k: f64,
}

/// Which coordinates differ within a probe pair.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Axis {
    X,
    Y,
    Z,
    K,
    All,
}

const AXES: [Axis; 5] = [Axis::X, Axis::Y, Axis::Z, Axis::K, Axis::All];

struct Prober {
    rng: ChaCha8Rng,
    half_width: f64,
    t_range: (f64, f64),
}

impl Prober {
    fn new(domain: &ProbeDomain, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            half_width: domain.half_width,
            t_range: domain.t_range,
        }
    }

    fn coord(&mut self) -> f64 {
        self.rng.random_range(-self.half_width..=self.half_width)
    }

    fn point(&mut self) -> Point {
        let (a, b) = self.t_range;
        let t = if b > a { self.rng.random_range(a..=b) } else { a };
        Point {
            t,
            x: self.coord(),
            y: self.coord(),
            z: self.coord(),
            k: self.coord(),
        }
    }

    fn partner(&mut self, p: Point, axis: Axis) -> Point {
        let mut q = p;
        match axis {
            Axis::X => q.x = self.coord(),
            Axis::Y => q.y = self.coord(),
            Axis::Z => q.z = self.coord(),
            Axis::K => q.k = self.coord(),
            Axis::All => {
                q.x = self.coord();
                q.y = self.coord();
                q.z = self.coord();
                q.k = self.coord();
            }
        }
        q
    }

    fn pick(&mut self, values: &[f64]) -> f64 {
        if values.is_empty() {
            0.0
        } else {
            values[self.rng.random_range(0..values.len())]
        }
    }
}

fn probe_err(slot: Slot, p: Point, u: f64, v: f64, e: Option<f64>, err: Error) -> Error {
    let mut point = format!("t={}, x={}, y={}, z={}, k={}, u={}, v={}", p.t, p.x, p.y, p.z, p.k, u, v);
    if let Some(e) = e {
        point.push_str(&format!(", e={e}"));
    }
    Error::ProbeEvaluation {
        slot,
        point,
        source: Box::new(err),
    }
}

/// Lipschitz and linear-growth estimates per coefficient.
#[derive(Debug, Clone, Serialize)]
pub struct H22Report {
    /// Per-coefficient, per-variable difference-quotient maxima.
    pub lipschitz: BTreeMap<String, BTreeMap<char, f64>>,
    /// Joint quotient `|d coeff| / (|dx|+|dy|+|dz|+|dk|)`; for `h` divided by `min(1,|e|)`.
    pub joint_lipschitz: BTreeMap<String, f64>,
    /// `sup |coeff| / (1 + |x| + |y| + |z| + |k|)`.
    pub growth: BTreeMap<String, f64>,
    pub lipschitz_cap: f64,
    pub growth_cap: f64,
    pub probes: usize,
    pub pass: bool,
}

impl H22Report {
    /// Joint Lipschitz estimate of one coefficient (0 when absent).
    pub fn joint(&self, slot: Slot) -> f64 {
        self.joint_lipschitz.get(slot.name()).copied().unwrap_or(0.0)
    }

    pub fn partial(&self, slot: Slot, var: char) -> f64 {
        self.lipschitz
            .get(slot.name())
            .and_then(|m| m.get(&var))
            .copied()
            .unwrap_or(0.0)
    }
}

struct Tally {
    per_var: BTreeMap<char, f64>,
    joint: f64,
    growth: f64,
}

impl Tally {
    fn new(vars: &[char]) -> Self {
        Self {
            per_var: vars.iter().map(|c| (*c, 0.0)).collect(),
            joint: 0.0,
            growth: 0.0,
        }
    }
}

/// Empirical Lipschitz and linear-growth ratios over `probes` random pairs.
pub fn check_h22(
    cs: &CoefficientSet,
    levy: &LevyModel,
    domain: &ProbeDomain,
    probes: usize,
    seed: u64,
    lipschitz_cap: f64,
    growth_cap: f64,
) -> Result<H22Report> {
    if probes < 100 {
        return Err(Error::Precondition(format!("check_h22 needs >= 100 probes, got {probes}")));
    }
    let mut prober = Prober::new(domain, seed);
    let mut tallies: BTreeMap<Slot, Tally> = BTreeMap::new();
    tallies.insert(Slot::B, Tally::new(&['x', 'y', 'z']));
    tallies.insert(Slot::Sigma, Tally::new(&['x', 'y', 'z']));
    tallies.insert(Slot::F, Tally::new(&['x', 'y', 'z', 'k']));
    tallies.insert(Slot::Phi, Tally::new(&['x']));
    if !levy.is_empty() {
        tallies.insert(Slot::H, Tally::new(&['x', 'y', 'z']));
    }

    for i in 0..probes {
        let axis = AXES[i % AXES.len()];
        let p = prober.point();
        let q = prober.partner(p, axis);
        let u = prober.pick(&domain.u_values);
        let v = prober.pick(&domain.v_values);
        let base = 1.0 + p.x.abs() + p.y.abs() + p.z.abs();
        let dxyz = (p.x - q.x).abs() + (p.y - q.y).abs() + (p.z - q.z).abs();

        let mut record = |slot: Slot, fp: f64, fq: f64, denom: f64, growth_base: f64, scale: f64| {
            let tally = tallies.get_mut(&slot).expect("tally");
            let diff = (fp - fq).abs();
            if denom > 0.0 {
                let ratio = diff / denom / scale;
                tally.joint = tally.joint.max(ratio);
                let var = match axis {
                    Axis::X => Some('x'),
                    Axis::Y => Some('y'),
                    Axis::Z => Some('z'),
                    Axis::K => Some('k'),
                    Axis::All => None,
                };
                if let Some(entry) = var.and_then(|c| tally.per_var.get_mut(&c)) {
                    *entry = entry.max(ratio);
                }
            }
            tally.growth = tally.growth.max(fp.abs() / growth_base);
        };

        let bp = cs.b(p.t, p.x, p.y, p.z, u, v).map_err(|e| probe_err(Slot::B, p, u, v, None, e))?;
        let bq = cs.b(q.t, q.x, q.y, q.z, u, v).map_err(|e| probe_err(Slot::B, q, u, v, None, e))?;
        record(Slot::B, bp, bq, dxyz, base, 1.0);

        let sp = cs.sigma(p.t, p.x, p.y, p.z, u, v).map_err(|e| probe_err(Slot::Sigma, p, u, v, None, e))?;
        let sq = cs.sigma(q.t, q.x, q.y, q.z, u, v).map_err(|e| probe_err(Slot::Sigma, q, u, v, None, e))?;
        record(Slot::Sigma, sp, sq, dxyz, base, 1.0);

        let fp = cs.f(p.t, p.x, p.y, p.z, p.k, u, v).map_err(|e| probe_err(Slot::F, p, u, v, None, e))?;
        let fq = cs.f(q.t, q.x, q.y, q.z, q.k, u, v).map_err(|e| probe_err(Slot::F, q, u, v, None, e))?;
        record(Slot::F, fp, fq, dxyz + (p.k - q.k).abs(), base + p.k.abs(), 1.0);

        let pp = cs.phi(p.x).map_err(|e| probe_err(Slot::Phi, p, u, v, None, e))?;
        let pq = cs.phi(q.x).map_err(|e| probe_err(Slot::Phi, q, u, v, None, e))?;
        record(Slot::Phi, pp, pq, (p.x - q.x).abs(), 1.0 + p.x.abs(), 1.0);

        for &e in &levy.atoms {
            let hp = cs.h(p.t, p.x, p.y, p.z, u, v, e).map_err(|err| probe_err(Slot::H, p, u, v, Some(e), err))?;
            let hq = cs.h(q.t, q.x, q.y, q.z, u, v, e).map_err(|err| probe_err(Slot::H, q, u, v, Some(e), err))?;
            record(Slot::H, hp, hq, dxyz, base, e.abs().min(1.0));
        }
    }

    let mut report = H22Report {
        lipschitz: BTreeMap::new(),
        joint_lipschitz: BTreeMap::new(),
        growth: BTreeMap::new(),
        lipschitz_cap,
        growth_cap,
        probes,
        pass: true,
    };
    for (slot, tally) in tallies {
        let ok = tally.joint.is_finite()
            && tally.growth.is_finite()
            && tally.joint <= lipschitz_cap
            && tally.growth <= growth_cap;
        report.pass &= ok;
        report.lipschitz.insert(slot.name().to_string(), tally.per_var);
        report.joint_lipschitz.insert(slot.name().to_string(), tally.joint);
        report.growth.insert(slot.name().to_string(), tally.growth);
    }
    Ok(report)
}

/// Samples both monotonicity inequalities over random probe pairs and every
/// control pair; `worst_violation` is the running maximum of
/// `lhs - rhs` (clamped at zero).
pub fn check_h23(
    cs: &CoefficientSet,
    levy: &LevyModel,
    cert: &MonotonicityCert,
    domain: &ProbeDomain,
    probes: usize,
    seed: u64,
) -> Result<MonotonicityCert> {
    cert.validate()?;
    let g = cert.g;
    let n_atoms = levy.len();
    let mut prober = Prober::new(domain, seed);
    let mut worst: f64 = 0.0;
    let mut k = vec![0.0; n_atoms];
    let mut k_bar = vec![0.0; n_atoms];
    let us: &[f64] = if domain.u_values.is_empty() { &[0.0] } else { &domain.u_values };
    let vs: &[f64] = if domain.v_values.is_empty() { &[0.0] } else { &domain.v_values };

    for i in 0..probes {
        let axis = AXES[i % AXES.len()];
        let p = prober.point();
        let q = prober.partner(p, axis);
        for (ki, kb) in k.iter_mut().zip(k_bar.iter_mut()) {
            *ki = prober.coord();
            *kb = if matches!(axis, Axis::K | Axis::All) { prober.coord() } else { *ki };
        }
        let (dx, dy, dz) = (p.x - q.x, p.y - q.y, p.z - q.z);
        let kbar_p = levy.l_integral(&k);
        let kbar_q = levy.l_integral(&k_bar);

        for &u in us {
            for &v in vs {
                let ev = |r: Result<f64>, pt: Point, slot: Slot| r.map_err(|e| probe_err(slot, pt, u, v, None, e));
                let dg = ev(cs.f(p.t, p.x, p.y, p.z, kbar_p, u, v), p, Slot::F)?
                    - ev(cs.f(p.t, q.x, q.y, q.z, kbar_q, u, v), q, Slot::F)?;
                let db = ev(cs.b(p.t, p.x, p.y, p.z, u, v), p, Slot::B)? - ev(cs.b(p.t, q.x, q.y, q.z, u, v), q, Slot::B)?;
                let ds = ev(cs.sigma(p.t, p.x, p.y, p.z, u, v), p, Slot::Sigma)?
                    - ev(cs.sigma(p.t, q.x, q.y, q.z, u, v), q, Slot::Sigma)?;
                let mut lhs = -g * dg * dx + g * db * dy + g * ds * dz;
                let mut k_pen = 0.0;
                for a in 0..n_atoms {
                    let e = levy.atoms[a];
                    let lam = levy.intensities[a];
                    let dh = cs.h(p.t, p.x, p.y, p.z, u, v, e).map_err(|err| probe_err(Slot::H, p, u, v, Some(e), err))?
                        - cs.h(p.t, q.x, q.y, q.z, u, v, e).map_err(|err| probe_err(Slot::H, q, u, v, Some(e), err))?;
                    let dk = k[a] - k_bar[a];
                    lhs += g * dh * dk * lam;
                    k_pen += (g * dk).powi(2) * lam;
                }
                let rhs = -cert.beta1 * (g * dx).powi(2) - cert.beta2 * ((g * dy).powi(2) + (g * dz).powi(2)) - cert.beta3 * k_pen;
                worst = worst.max(lhs - rhs);
            }
        }

        let dphi = cs.phi(p.x).map_err(|e| probe_err(Slot::Phi, p, 0.0, 0.0, None, e))?
            - cs.phi(q.x).map_err(|e| probe_err(Slot::Phi, q, 0.0, 0.0, None, e))?;
        worst = worst.max(cert.mu1 * (g * dx).powi(2) - dphi * g * dx);
    }

    Ok(MonotonicityCert {
        verified: worst <= 1e-10,
        worst_violation: worst,
        ..*cert
    })
}

/// Smallness of the `z`-sensitivity of `sigma` and `h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SmallnessCert {
    pub l_sigma: f64,
    pub c_tilde_h: f64,
    pub threshold: f64,
    /// `sup |h| / (min(1,|e|) (1 + |x| + |y|))`, compared against `rho_bound`.
    pub h_growth: f64,
    pub holds: bool,
}

pub const DEFAULT_SMALLNESS_THRESHOLD: f64 = 0.25;

pub fn check_h31(
    cs: &CoefficientSet,
    levy: &LevyModel,
    domain: &ProbeDomain,
    probes: usize,
    seed: u64,
    threshold: f64,
) -> Result<SmallnessCert> {
    let mut prober = Prober::new(domain, seed);
    let mut l_sigma: f64 = 0.0;
    let mut l_h = vec![0.0f64; levy.len()];
    let mut h_growth: f64 = 0.0;
    for _ in 0..probes {
        let p = prober.point();
        let q = prober.partner(p, Axis::Z);
        let u = prober.pick(&domain.u_values);
        let v = prober.pick(&domain.v_values);
        let dz = (p.z - q.z).abs();
        if dz == 0.0 {
            continue;
        }
        let sp = cs.sigma(p.t, p.x, p.y, p.z, u, v).map_err(|e| probe_err(Slot::Sigma, p, u, v, None, e))?;
        let sq = cs.sigma(p.t, p.x, p.y, q.z, u, v).map_err(|e| probe_err(Slot::Sigma, q, u, v, None, e))?;
        l_sigma = l_sigma.max((sp - sq).abs() / dz);
        for (a, &e) in levy.atoms.iter().enumerate() {
            let hp = cs.h(p.t, p.x, p.y, p.z, u, v, e).map_err(|err| probe_err(Slot::H, p, u, v, Some(e), err))?;
            let hq = cs.h(p.t, p.x, p.y, q.z, u, v, e).map_err(|err| probe_err(Slot::H, q, u, v, Some(e), err))?;
            l_h[a] = l_h[a].max((hp - hq).abs() / dz);
            h_growth = h_growth.max(hp.abs() / (e.abs().min(1.0) * (1.0 + p.x.abs() + p.y.abs())));
        }
    }
    let sup_sq = l_h.iter().map(|l| l * l).fold(0.0, f64::max);
    let integral: f64 = l_h.iter().zip(&levy.intensities).map(|(l, lam)| l * l * lam).sum();
    let c_tilde_h = sup_sq.max(integral);
    Ok(SmallnessCert {
        l_sigma,
        c_tilde_h,
        threshold,
        h_growth,
        holds: l_sigma <= threshold && c_tilde_h <= threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::expr::Expr;
    use crate::stochastics::discretize_levy;

    fn cs(pairs: &[(&str, &str)]) -> CoefficientSet {
        CoefficientSet::from_pairs(pairs).unwrap()
    }

    fn controls() -> ProbeDomain {
        ProbeDomain::new(5.0, (0.0, 1.0), vec![-1.0, 1.0], vec![-1.0, 1.0])
    }

    #[test]
    fn h22_examples() {
        let none = LevyModel::none();
        let r = check_h22(&cs(&[("b", "u + v"), ("phi", "x")]), &none, &controls(), 1000, 1, 100.0, 10.0).unwrap();
        assert_eq!(r.joint(Slot::B), 0.0);

        let r = check_h22(&cs(&[("sigma", "0.5*x"), ("phi", "x")]), &none, &controls(), 1000, 1, 100.0, 10.0).unwrap();
        assert!((r.partial(Slot::Sigma, 'x') - 0.5).abs() < 1e-9);
        assert!(r.partial(Slot::Sigma, 'x') <= 0.5 + 1e-15);

        let r = check_h22(&cs(&[("phi", "x*x")]), &none, &controls(), 2000, 1, 100.0, 10.0).unwrap();
        assert!(r.growth["phi"] <= 25.0 / 6.0 + 1e-12);
        assert!(r.pass);

        assert!(check_h22(&cs(&[("phi", "x")]), &none, &controls(), 99, 1, 100.0, 10.0).is_err());
    }

    #[test]
    fn h22_reports_offending_point() {
        let err = check_h22(&cs(&[("b", "log(x)"), ("phi", "x")]), &LevyModel::none(), &controls(), 200, 1, 100.0, 10.0)
            .unwrap_err();
        assert!(matches!(err, Error::ProbeEvaluation { slot: Slot::B, .. }), "{err}");
        assert!(err.to_string().contains("x="));
    }

    #[test]
    fn h23_examples() {
        let none = LevyModel::none();
        let cert = MonotonicityCert::new(1.0, 1.0, 0.0, 0.0, 1.0).unwrap();
        let ok = check_h23(&cs(&[("f", "x"), ("phi", "x")]), &none, &cert, &controls(), 2000, 5).unwrap();
        assert!(ok.verified);
        assert!(ok.worst_violation <= 1e-12);

        let bad = check_h23(&cs(&[("f", "-x"), ("phi", "x")]), &none, &cert, &controls(), 2000, 5).unwrap();
        assert!(!bad.verified);
        assert!(bad.worst_violation > 1.0);

        let degenerate = MonotonicityCert {
            beta1: 0.0,
            mu1: 0.0,
            ..cert
        };
        assert!(matches!(
            check_h23(&cs(&[("f", "1"), ("phi", "2")]), &none, &degenerate, &controls(), 100, 5),
            Err(Error::CertInvariant(_))
        ));
    }

    #[test]
    fn h23_violation_is_twice_beta1_dx_squared() {
        // with f = -x the gap is exactly 2 beta1 |dx|^2 on every pair; the
        // largest |dx| on a [-5,5] box approaches 10.
        let cert = MonotonicityCert::new(1.0, 1.0, 0.0, 0.0, 1.0).unwrap();
        let bad = check_h23(&cs(&[("f", "-x"), ("phi", "x")]), &LevyModel::none(), &cert, &controls(), 5000, 9).unwrap();
        assert!(bad.worst_violation <= 2.0 * 100.0 + 1e-9);
        assert!(bad.worst_violation > 2.0 * 64.0);
    }

    #[test]
    fn h23_jump_terms() {
        let levy = discretize_levy(&[(-0.5, 1.0), (0.5, 1.0)], &Expr::parse("abs(e)").unwrap(), 1.0).unwrap();
        let cert = MonotonicityCert::new(1.0, 1.0, 0.0, 0.0, 1.0).unwrap();
        // h = -x couples x-hat with k-hat; without a beta3 penalty this is violated
        let r = check_h23(&cs(&[("f", "x"), ("h", "-x"), ("phi", "x")]), &levy, &cert, &controls(), 2000, 3).unwrap();
        assert!(!r.verified);
        let r = check_h23(&cs(&[("f", "x"), ("h", "0.1*e"), ("phi", "x")]), &levy, &cert, &controls(), 2000, 3).unwrap();
        assert!(r.verified);
    }

    #[test]
    fn h31_examples() {
        let none = LevyModel::none();
        let r = check_h31(&cs(&[("sigma", "1 + x"), ("phi", "x")]), &none, &controls(), 500, 2, 0.25).unwrap();
        assert_eq!(r.l_sigma, 0.0);
        assert!(r.holds);
        let r = check_h31(&cs(&[("sigma", "0.1*z"), ("phi", "x")]), &none, &controls(), 500, 2, 0.25).unwrap();
        assert!((r.l_sigma - 0.1).abs() < 1e-9);
        assert!(r.holds);
        let r = check_h31(&cs(&[("sigma", "z"), ("phi", "x")]), &none, &controls(), 500, 2, 0.25).unwrap();
        assert!((r.l_sigma - 1.0).abs() < 1e-9);
        assert!(!r.holds);
    }

    #[test]
    fn h31_jump_smallness() {
        let levy = discretize_levy(&[(1.0, 2.0)], &Expr::parse("0").unwrap(), 1.0).unwrap();
        let r = check_h31(&cs(&[("h", "0.3*z"), ("phi", "x")]), &levy, &controls(), 500, 2, 0.25).unwrap();
        // max(0.09, 0.09 * 2)
        assert!((r.c_tilde_h - 0.18).abs() < 1e-9);
        assert!(r.holds);
    }
}
