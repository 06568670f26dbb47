use std::fmt;

use thiserror::Error;

/// Coefficient slot an expression is bound to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    B,
    Sigma,
    H,
    F,
    Phi,
    L,
    /// Free-standing expression with every variable allowed.
    Free,
}

impl Slot {
    pub const COEFFICIENTS: [Slot; 6] = [Slot::B, Slot::Sigma, Slot::H, Slot::F, Slot::Phi, Slot::L];

    pub fn name(self) -> &'static str {
        match self {
            Slot::B => "b",
            Slot::Sigma => "sigma",
            Slot::H => "h",
            Slot::F => "f",
            Slot::Phi => "phi",
            Slot::L => "l",
            Slot::Free => "expr",
        }
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("unknown variable {name} (line {line}, column {column})")]
    UnknownVariable {
        name: String,
        line: usize,
        column: usize,
    },

    #[error("variable {var} is not allowed in coefficient {slot}")]
    VariableOutOfSlot { var: char, slot: Slot },

    #[error("coefficient {0} is empty")]
    EmptyCoefficient(Slot),

    #[error("unbound variable {0}")]
    UnboundVariable(char),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("evaluation of {slot} failed at {point}: {source}")]
    ProbeEvaluation {
        slot: Slot,
        point: String,
        #[source]
        source: Box<Error>,
    },

    #[error("config error (line {line}): {message}")]
    Config { line: usize, message: String },

    #[error("monotonicity certificate invalid: {0}")]
    CertInvariant(String),

    #[error("Levy atom {atom}: l({atom}) = {value} exceeds C*min(1,|e|) = {bound}")]
    LevyBound { atom: f64, value: f64, bound: f64 },

    #[error("invalid Levy model: {0}")]
    Levy(String),

    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("CFL violated: ratio {ratio:.6} > {limit}; try dt <= {suggested_dt:.3e}")]
    Cfl {
        ratio: f64,
        limit: f64,
        suggested_dt: f64,
    },

    #[error("implicit step did not converge at slice {slice}, node {node} (residual {residual:.3e})")]
    FixedPoint {
        slice: usize,
        node: usize,
        residual: f64,
    },

    #[error("Picard iteration did not converge in {} iterations (last change {:.3e}); use a smaller window", .trace.len(), .trace.last().copied().unwrap_or(f64::NAN))]
    Picard { trace: Vec<f64> },

    #[error("representation equation: {0}")]
    Algebraic(String),

    #[error("grids do not match")]
    GridMismatch,

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("csv: {0}")]
    Csv(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by malformed input rather than solver failure.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Syntax { .. }
                | Error::UnknownVariable { .. }
                | Error::VariableOutOfSlot { .. }
                | Error::EmptyCoefficient(_)
                | Error::Config { .. }
                | Error::CertInvariant(_)
                | Error::LevyBound { .. }
                | Error::Levy(_)
                | Error::Grid(_)
        )
    }

    pub(crate) fn config(line: usize, message: impl Into<String>) -> Self {
        Error::Config {
            line,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
