//! Model coefficients `b, sigma, h, f, phi, l` and sampling-based checks of
//! the structural assumptions placed on them.

pub mod checks;
pub mod expr;

use std::collections::BTreeMap;

use serde::Serialize;

use crate::config::ConfigDoc;
use crate::error::{Error, Result, Slot};
use expr::{Bindings, Expr, Var};

pub use checks::{check_h22, check_h23, check_h31, H22Report, ProbeDomain, SmallnessCert, DEFAULT_SMALLNESS_THRESHOLD};

/// Evaluable coefficient functions of the controlled forward-backward system.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSet {
    pub b: Expr,
    pub sigma: Expr,
    pub h: Expr,
    pub f: Expr,
    pub phi: Expr,
    pub l: Expr,
    /// Estimated Lipschitz constant per coefficient, filled from a [`H22Report`].
    pub lip_constants: BTreeMap<Slot, f64>,
    /// Scale `C` of `rho(e) = C min(1, |e|)` bounding `h`.
    pub rho_bound: f64,
}

impl CoefficientSet {
    /// Builds from `(name, expression)` pairs; omitted coefficients are `0`.
    pub fn from_pairs(pairs: &[(&str, &str)]) -> Result<Self> {
        let mut src: BTreeMap<Slot, &str> = BTreeMap::new();
        for (name, text) in pairs {
            let slot = slot_by_name(name).ok_or_else(|| Error::config(0, format!("unknown coefficient '{name}'")))?;
            src.insert(slot, text);
        }
        let get = |slot: Slot| -> Result<Expr> { Expr::parse_for(src.get(&slot).copied().unwrap_or("0"), slot) };
        Ok(Self {
            b: get(Slot::B)?,
            sigma: get(Slot::Sigma)?,
            h: get(Slot::H)?,
            f: get(Slot::F)?,
            phi: get(Slot::Phi)?,
            l: get(Slot::L)?,
            lip_constants: BTreeMap::new(),
            rho_bound: 1.0,
        })
    }

    /// Reads `[model]` (b, sigma, h, f, phi, rho) and the `l` entry of `[levy]`.
    pub fn from_doc(doc: &ConfigDoc) -> Result<Self> {
        let read = |section: &str, slot: Slot, default: Option<&str>| -> Result<Expr> {
            match doc.entry(section, slot.name()) {
                Some(e) => {
                    if e.value.trim().is_empty() {
                        return Err(Error::EmptyCoefficient(slot));
                    }
                    let expr = Expr::parse_at(&e.value, e.line, e.column.saturating_sub(1))?;
                    expr.check_slot(slot)?;
                    Ok(expr)
                }
                None => match default {
                    Some(d) => Expr::parse_for(d, slot),
                    None => Err(Error::config(0, format!("missing [{section}] {}", slot.name()))),
                },
            }
        };
        let rho_bound = doc.f64_or("model", "rho", 1.0)?;
        if rho_bound < 0.0 {
            return Err(Error::config(0, "rho must be >= 0"));
        }
        Ok(Self {
            b: read("model", Slot::B, Some("0"))?,
            sigma: read("model", Slot::Sigma, Some("0"))?,
            h: read("model", Slot::H, Some("0"))?,
            f: read("model", Slot::F, Some("0"))?,
            phi: read("model", Slot::Phi, None)?,
            l: read("levy", Slot::L, Some("0"))?,
            lip_constants: BTreeMap::new(),
            rho_bound,
        })
    }

    pub fn expr(&self, slot: Slot) -> &Expr {
        match slot {
            Slot::B => &self.b,
            Slot::Sigma => &self.sigma,
            Slot::H => &self.h,
            Slot::F => &self.f,
            Slot::Phi => &self.phi,
            Slot::L | Slot::Free => &self.l,
        }
    }

    pub fn b(&self, t: f64, x: f64, y: f64, z: f64, u: f64, v: f64) -> Result<f64> {
        self.b.eval(&state(t, x, y, z, u, v))
    }

    pub fn sigma(&self, t: f64, x: f64, y: f64, z: f64, u: f64, v: f64) -> Result<f64> {
        self.sigma.eval(&state(t, x, y, z, u, v))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn h(&self, t: f64, x: f64, y: f64, z: f64, u: f64, v: f64, e: f64) -> Result<f64> {
        self.h.eval(&state(t, x, y, z, u, v).with(Var::E, e))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn f(&self, t: f64, x: f64, y: f64, z: f64, k: f64, u: f64, v: f64) -> Result<f64> {
        self.f.eval(&state(t, x, y, z, u, v).with(Var::K, k))
    }

    pub fn phi(&self, x: f64) -> Result<f64> {
        self.phi.eval(&Bindings::new().with(Var::X, x))
    }

    pub fn l(&self, e: f64) -> Result<f64> {
        self.l.eval(&Bindings::new().with(Var::E, e))
    }

    /// Forward coefficients do not see the backward solution.
    pub fn is_decoupled(&self) -> bool {
        [&self.b, &self.sigma, &self.h]
            .iter()
            .all(|e| !e.depends_on(Var::Y) && !e.depends_on(Var::Z))
    }

    /// `sigma` and `h` are free of `(y, z)`; the Isaacs equation then has no
    /// algebraic constraint.
    pub fn is_special_case(&self) -> bool {
        [&self.sigma, &self.h]
            .iter()
            .all(|e| !e.depends_on(Var::Y) && !e.depends_on(Var::Z))
    }

    pub fn sigma_depends_on_z(&self) -> bool {
        self.sigma.depends_on(Var::Z)
    }

    /// Coefficient sources, keyed by name, for reports.
    pub fn sources(&self) -> BTreeMap<&'static str, String> {
        Slot::COEFFICIENTS
            .iter()
            .map(|s| (s.name(), self.expr(*s).to_string()))
            .collect()
    }
}

fn state(t: f64, x: f64, y: f64, z: f64, u: f64, v: f64) -> Bindings {
    let mut b = Bindings::new();
    b.set(Var::T, t)
        .set(Var::X, x)
        .set(Var::Y, y)
        .set(Var::Z, z)
        .set(Var::U, u)
        .set(Var::V, v);
    b
}

fn slot_by_name(name: &str) -> Option<Slot> {
    Slot::COEFFICIENTS.into_iter().find(|s| s.name() == name)
}

/// Parses the coefficient sections of a config document.
pub fn parse_coefficients(source_text: &str) -> Result<CoefficientSet> {
    CoefficientSet::from_doc(&ConfigDoc::parse(source_text)?)
}

/// Declared constants of the monotonicity condition, plus the sampled verdict.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonotonicityCert {
    pub g: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub mu1: f64,
    pub verified: bool,
    pub worst_violation: f64,
}

impl MonotonicityCert {
    pub fn new(g: f64, beta1: f64, beta2: f64, beta3: f64, mu1: f64) -> Result<Self> {
        let cert = Self {
            g,
            beta1,
            beta2,
            beta3,
            mu1,
            verified: false,
            worst_violation: 0.0,
        };
        cert.validate()?;
        Ok(cert)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.g.is_finite() && self.g != 0.0) {
            return Err(Error::CertInvariant(format!("G must be nonzero, got {}", self.g)));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2), ("beta3", self.beta3), ("mu1", self.mu1)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::CertInvariant(format!("{name} must be >= 0, got {v}")));
            }
        }
        let sums = [
            ("beta1+beta2", self.beta1 + self.beta2),
            ("beta1+beta3", self.beta1 + self.beta3),
            ("beta2+mu1", self.beta2 + self.mu1),
            ("beta3+mu1", self.beta3 + self.mu1),
        ];
        for (name, s) in sums {
            if s <= 0.0 {
                return Err(Error::CertInvariant(format!("{name} > 0 violated")));
            }
        }
        Ok(())
    }

    pub fn from_doc(doc: &ConfigDoc) -> Result<Self> {
        Self::new(
            doc.f64_or("monotonicity", "G", 1.0)?,
            doc.f64_or("monotonicity", "beta1", 1.0)?,
            doc.f64_or("monotonicity", "beta2", 0.0)?,
            doc.f64_or("monotonicity", "beta3", 0.0)?,
            doc.f64_or("monotonicity", "mu1", 1.0)?,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_model_sections() {
        let cs = parse_coefficients(
            "[model]\nb = \"u + v\"\nphi = \"x*x\"\n[levy]\nl = \"min(1, abs(e))\"\n",
        )
        .unwrap();
        assert_eq!(cs.b(0.0, 0.0, 0.0, 0.0, 1.0, -1.0).unwrap(), 0.0);
        assert_eq!(cs.phi(3.0).unwrap(), 9.0);
        assert_eq!(cs.l(-0.5).unwrap(), 0.5);
        assert_eq!(cs.sigma(0.0, 1.0, 1.0, 1.0, 1.0, 1.0).unwrap(), 0.0);
        assert!(cs.is_decoupled());
    }

    #[test]
    fn config_errors_point_at_the_line() {
        match parse_coefficients("[model]\nphi = \"x\"\nf = \"y + q\"\n") {
            Err(Error::UnknownVariable { name, line, column }) => {
                assert_eq!((name.as_str(), line, column), ("q", 3, 10));
            }
            other => panic!("{other:?}"),
        }
        match parse_coefficients("[model]\nphi = \"x +\"\n") {
            Err(Error::Syntax { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_coefficients("[model]\nphi = \"\"\n"),
            Err(Error::EmptyCoefficient(Slot::Phi))
        ));
        assert!(matches!(
            parse_coefficients("[model]\nphi = \"y\"\n"),
            Err(Error::VariableOutOfSlot { var: 'y', slot: Slot::Phi })
        ));
        assert!(parse_coefficients("[model]\nb = \"x\"\n").is_err());
    }

    #[test]
    fn case_classification() {
        let cs = CoefficientSet::from_pairs(&[("b", "y"), ("sigma", "0.2*(1 - z)"), ("phi", "x")]).unwrap();
        assert!(!cs.is_decoupled());
        assert!(!cs.is_special_case());
        assert!(cs.sigma_depends_on_z());
        let cs = CoefficientSet::from_pairs(&[("b", "y"), ("sigma", "1"), ("phi", "x")]).unwrap();
        assert!(cs.is_special_case());
    }

    #[test]
    fn cert_invariants() {
        assert!(MonotonicityCert::new(1.0, 1.0, 0.0, 0.0, 1.0).is_ok());
        assert!(matches!(MonotonicityCert::new(0.0, 1.0, 0.0, 0.0, 1.0), Err(Error::CertInvariant(_))));
        assert!(matches!(MonotonicityCert::new(1.0, 0.0, 0.0, 0.0, 0.0), Err(Error::CertInvariant(_))));
        assert!(matches!(MonotonicityCert::new(1.0, -1.0, 2.0, 2.0, 1.0), Err(Error::CertInvariant(_))));
    }
}
