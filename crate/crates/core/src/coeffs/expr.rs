//! Scalar expression language for model coefficients.
//!
//! Grammar:
//!
//! ```text
//! expr   := term (('+'|'-') term)*
//! term   := factor (('*'|'/') factor)*
//! factor := atom ('^' atom)?
//! atom   := number | ident | ident '(' expr (',' expr)* ')' | '(' expr ')' | '-' atom
//! ```
//!
//! Unary minus binds tighter than `^`, so `-x^2` is `(-x)^2`.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result, Slot};

/// The variables an expression may reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Var {
    T,
    X,
    Y,
    Z,
    K,
    U,
    V,
    E,
}

impl Var {
    pub const ALL: [Var; 8] = [Var::T, Var::X, Var::Y, Var::Z, Var::K, Var::U, Var::V, Var::E];

    pub fn name(self) -> char {
        match self {
            Var::T => 't',
            Var::X => 'x',
            Var::Y => 'y',
            Var::Z => 'z',
            Var::K => 'k',
            Var::U => 'u',
            Var::V => 'v',
            Var::E => 'e',
        }
    }

    pub fn from_name(name: &str) -> Option<Var> {
        Some(match name {
            "t" => Var::T,
            "x" => Var::X,
            "y" => Var::Y,
            "z" => Var::Z,
            "k" => Var::K,
            "u" => Var::U,
            "v" => Var::V,
            "e" => Var::E,
            _ => return None,
        })
    }

    fn index(self) -> usize {
        self as usize
    }

    /// Variables a coefficient slot may reference.
    pub fn allowed_in(slot: Slot) -> &'static [Var] {
        use Var::*;
        match slot {
            Slot::B | Slot::Sigma => &[T, X, Y, Z, U, V],
            Slot::H => &[T, X, Y, Z, U, V, E],
            Slot::F => &[T, X, Y, Z, K, U, V],
            Slot::Phi => &[X],
            Slot::L => &[E],
            Slot::Free => &Var::ALL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Abs,
    Exp,
    Log,
    Sin,
    Cos,
    Tanh,
    Min,
    Max,
    Sqrt,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "abs" => Func::Abs,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tanh" => Func::Tanh,
            "min" => Func::Min,
            "max" => Func::Max,
            "sqrt" => Func::Sqrt,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Abs => "abs",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tanh => "tanh",
            Func::Min => "min",
            Func::Max => "max",
            Func::Sqrt => "sqrt",
        }
    }

    fn variadic(self) -> bool {
        matches!(self, Func::Min | Func::Max)
    }
}

/// Expression tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

/// Variable assignment used during evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct Bindings {
    values: [f64; 8],
    bound: u8,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, var: Var, value: f64) -> &mut Self {
        self.values[var.index()] = value;
        self.bound |= 1 << var.index();
        self
    }

    pub fn with(mut self, var: Var, value: f64) -> Self {
        self.set(var, value);
        self
    }

    pub fn get(&self, var: Var) -> Option<f64> {
        (self.bound & (1 << var.index()) != 0).then(|| self.values[var.index()])
    }
}

impl Expr {
    /// Parses a standalone expression; `line` is reported in errors.
    pub fn parse(src: &str) -> Result<Expr> {
        Self::parse_at(src, 1, 0)
    }

    /// Parses with error positions offset to the enclosing document.
    pub fn parse_at(src: &str, line: usize, column_offset: usize) -> Result<Expr> {
        let tokens = lex(src, line, column_offset)?;
        let mut parser = Parser {
            tokens,
            pos: 0,
            line,
            end_column: column_offset + src.chars().count() + 1,
        };
        let expr = parser.expr()?;
        if let Some(tok) = parser.peek() {
            return Err(Error::Syntax {
                line,
                column: tok.column,
                message: format!("unexpected {}", tok.kind.describe()),
            });
        }
        Ok(expr)
    }

    /// Parses and checks that only variables allowed in `slot` appear.
    pub fn parse_for(src: &str, slot: Slot) -> Result<Expr> {
        if src.trim().is_empty() {
            return Err(Error::EmptyCoefficient(slot));
        }
        let expr = Expr::parse(src)?;
        expr.check_slot(slot)?;
        Ok(expr)
    }

    pub fn check_slot(&self, slot: Slot) -> Result<()> {
        let allowed = Var::allowed_in(slot);
        for var in self.variables() {
            if !allowed.contains(&var) {
                return Err(Error::VariableOutOfSlot {
                    var: var.name(),
                    slot,
                });
            }
        }
        Ok(())
    }

    /// Sorted, deduplicated list of referenced variables.
    pub fn variables(&self) -> Vec<Var> {
        let mut out = Vec::new();
        self.collect_vars(&mut out);
        out.sort();
        out.dedup();
        out
    }

    fn collect_vars(&self, out: &mut Vec<Var>) {
        match self {
            Expr::Num(_) => {}
            Expr::Var(v) => out.push(*v),
            Expr::Neg(a) => a.collect_vars(out),
            Expr::Bin(_, a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| a.collect_vars(out)),
        }
    }

    pub fn depends_on(&self, var: Var) -> bool {
        match self {
            Expr::Num(_) => false,
            Expr::Var(v) => *v == var,
            Expr::Neg(a) => a.depends_on(var),
            Expr::Bin(_, a, b) => a.depends_on(var) || b.depends_on(var),
            Expr::Call(_, args) => args.iter().any(|a| a.depends_on(var)),
        }
    }

    /// Evaluates in IEEE double precision. Non-finite intermediate results are errors.
    pub fn eval(&self, b: &Bindings) -> Result<f64> {
        let value = match self {
            Expr::Num(n) => *n,
            Expr::Var(v) => b.get(*v).ok_or(Error::UnboundVariable(v.name()))?,
            Expr::Neg(a) => -a.eval(b)?,
            Expr::Bin(op, lhs, rhs) => {
                let l = lhs.eval(b)?;
                let r = rhs.eval(b)?;
                match op {
                    BinOp::Add => l + r,
                    BinOp::Sub => l - r,
                    BinOp::Mul => l * r,
                    BinOp::Div => {
                        if r == 0.0 {
                            return Err(Error::Domain(format!("division by zero ({l} / 0)")));
                        }
                        l / r
                    }
                    BinOp::Pow => l.powf(r),
                }
            }
            Expr::Call(func, args) => {
                let first = args[0].eval(b)?;
                match func {
                    Func::Abs => first.abs(),
                    Func::Exp => first.exp(),
                    Func::Log => {
                        if first <= 0.0 {
                            return Err(Error::Domain(format!("log({first})")));
                        }
                        first.ln()
                    }
                    Func::Sin => first.sin(),
                    Func::Cos => first.cos(),
                    Func::Tanh => first.tanh(),
                    Func::Sqrt => {
                        if first < 0.0 {
                            return Err(Error::Domain(format!("sqrt({first})")));
                        }
                        first.sqrt()
                    }
                    Func::Min | Func::Max => {
                        let mut acc = first;
                        for arg in &args[1..] {
                            let a = arg.eval(b)?;
                            acc = if *func == Func::Min { acc.min(a) } else { acc.max(a) };
                        }
                        acc
                    }
                }
            }
        };
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::Domain(format!("non-finite result {value} in {self}")))
        }
    }
}

/// Evaluates with a name-keyed binding map.
pub fn evaluate(expr: &Expr, bindings: &HashMap<char, f64>) -> Result<f64> {
    let mut b = Bindings::new();
    for var in Var::ALL {
        if let Some(value) = bindings.get(&var.name()) {
            b.set(var, *value);
        }
    }
    expr.eval(&b)
}

impl fmt::Display for Expr {
    /// Fully parenthesized form that re-parses to an equivalent tree.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(n) if n.is_sign_negative() => write!(f, "(-{:?})", -n),
            Expr::Num(n) => write!(f, "{n:?}"),
            Expr::Var(v) => write!(f, "{}", v.name()),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Bin(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TokenKind {
    Num(f64),
    Ident(String),
    Op(char),
}

impl TokenKind {
    fn describe(&self) -> String {
        match self {
            TokenKind::Num(n) => format!("number {n}"),
            TokenKind::Ident(s) => format!("identifier '{s}'"),
            TokenKind::Op(c) => format!("'{c}'"),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: TokenKind,
    column: usize,
}

fn lex(src: &str, line: usize, column_offset: usize) -> Result<Vec<Token>> {
    let chars: Vec<char> = src.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let column = column_offset + i + 1;
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            let value: f64 = text.parse().map_err(|_| Error::Syntax {
                line,
                column,
                message: format!("malformed number '{text}'"),
            })?;
            if !value.is_finite() {
                return Err(Error::Syntax {
                    line,
                    column,
                    message: format!("number '{text}' out of range"),
                });
            }
            tokens.push(Token {
                kind: TokenKind::Num(value),
                column,
            });
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            tokens.push(Token {
                kind: TokenKind::Ident(chars[start..i].iter().collect()),
                column,
            });
        } else if "+-*/^(),".contains(c) {
            tokens.push(Token {
                kind: TokenKind::Op(c),
                column,
            });
            i += 1;
        } else {
            return Err(Error::Syntax {
                line,
                column,
                message: format!("unexpected character '{c}'"),
            });
        }
    }
    Ok(tokens)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    line: usize,
    end_column: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn peek_op(&self) -> Option<char> {
        match self.peek() {
            Some(Token {
                kind: TokenKind::Op(c),
                ..
            }) => Some(*c),
            _ => None,
        }
    }

    fn error_here(&self, message: impl Into<String>) -> Error {
        let column = self.peek().map_or(self.end_column, |t| t.column);
        Error::Syntax {
            line: self.line,
            column,
            message: message.into(),
        }
    }

    fn expect(&mut self, op: char) -> Result<()> {
        if self.peek_op() == Some(op) {
            self.pos += 1;
            Ok(())
        } else {
            let found = self
                .peek()
                .map_or_else(|| "end of input".to_string(), |t| t.kind.describe());
            Err(self.error_here(format!("expected '{op}', found {found}")))
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        while let Some(op @ ('+' | '-')) = self.peek_op() {
            self.pos += 1;
            let rhs = self.term()?;
            let op = if op == '+' { BinOp::Add } else { BinOp::Sub };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.factor()?;
        while let Some(op @ ('*' | '/')) = self.peek_op() {
            self.pos += 1;
            let rhs = self.factor()?;
            let op = if op == '*' { BinOp::Mul } else { BinOp::Div };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if self.peek_op() == Some('^') {
            self.pos += 1;
            let exponent = self.atom()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        let Some(tok) = self.peek().cloned() else {
            return Err(self.error_here("unexpected end of expression"));
        };
        match tok.kind {
            TokenKind::Num(n) => {
                self.pos += 1;
                Ok(Expr::Num(n))
            }
            TokenKind::Op('-') => {
                self.pos += 1;
                Ok(Expr::Neg(Box::new(self.atom()?)))
            }
            TokenKind::Op('(') => {
                self.pos += 1;
                let inner = self.expr()?;
                self.expect(')')?;
                Ok(inner)
            }
            TokenKind::Op(c) => Err(self.error_here(format!("unexpected '{c}'"))),
            TokenKind::Ident(name) => {
                self.pos += 1;
                if self.peek_op() == Some('(') {
                    let func = Func::from_name(&name).ok_or_else(|| Error::Syntax {
                        line: self.line,
                        column: tok.column,
                        message: format!("unknown function {name}"),
                    })?;
                    self.pos += 1;
                    let mut args = vec![self.expr()?];
                    while self.peek_op() == Some(',') {
                        self.pos += 1;
                        args.push(self.expr()?);
                    }
                    self.expect(')')?;
                    let arity_ok = if func.variadic() { args.len() >= 2 } else { args.len() == 1 };
                    if !arity_ok {
                        return Err(Error::Syntax {
                            line: self.line,
                            column: tok.column,
                            message: format!("wrong number of arguments to {name}"),
                        });
                    }
                    Ok(Expr::Call(func, args))
                } else {
                    let var = Var::from_name(&name).ok_or_else(|| Error::UnknownVariable {
                        name: name.clone(),
                        line: self.line,
                        column: tok.column,
                    })?;
                    Ok(Expr::Var(var))
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn var(v: Var) -> Box<Expr> {
        Box::new(Expr::Var(v))
    }

    #[test]
    fn parses_grammar_cases() {
        assert_eq!(
            Expr::parse("u + v").unwrap(),
            Expr::Bin(BinOp::Add, var(Var::U), var(Var::V))
        );
        assert_eq!(
            Expr::parse("x*x").unwrap(),
            Expr::Bin(BinOp::Mul, var(Var::X), var(Var::X))
        );
    }

    #[test]
    fn rejects_unknown_variable() {
        let err = Expr::parse_for("y + q", Slot::F).unwrap_err();
        assert!(err.to_string().contains("unknown variable q"), "{err}");
    }

    #[test]
    fn rejects_out_of_slot_and_empty() {
        assert!(matches!(
            Expr::parse_for("x + e", Slot::Phi),
            Err(Error::VariableOutOfSlot { var: 'e', .. })
        ));
        assert!(matches!(Expr::parse_for("  ", Slot::B), Err(Error::EmptyCoefficient(Slot::B))));
        assert!(matches!(
            Expr::parse_for("k", Slot::B),
            Err(Error::VariableOutOfSlot { var: 'k', .. })
        ));
    }

    #[test]
    fn syntax_errors_carry_column() {
        match Expr::parse("x + * 2") {
            Err(Error::Syntax { column, .. }) => assert_eq!(column, 5),
            other => panic!("{other:?}"),
        }
        assert!(matches!(Expr::parse("(x + 1"), Err(Error::Syntax { .. })));
        assert!(matches!(Expr::parse("foo(x)"), Err(Error::Syntax { .. })));
        assert!(matches!(Expr::parse("max(x)"), Err(Error::Syntax { .. })));
    }

    #[test]
    fn evaluates_examples() {
        let mut m = HashMap::new();
        m.insert('u', 1.0);
        m.insert('v', -1.0);
        assert_eq!(evaluate(&Expr::parse("u+v").unwrap(), &m).unwrap(), 0.0);
        let b = Bindings::new().with(Var::X, 3.0);
        assert_eq!(Expr::parse("x*x").unwrap().eval(&b).unwrap(), 9.0);
        assert_eq!(Expr::parse("exp(0)").unwrap().eval(&b).unwrap(), 1.0);
        assert_eq!(Expr::parse("2^3^1").is_err(), true);
        assert_eq!(Expr::parse("-x^2").unwrap().eval(&b).unwrap(), 9.0);
        assert_eq!(Expr::parse("1 - 2 - 3").unwrap().eval(&b).unwrap(), -4.0);
        assert_eq!(Expr::parse("max(1, x, 2)").unwrap().eval(&b).unwrap(), 3.0);
        assert_eq!(Expr::parse("1.5e1").unwrap().eval(&b).unwrap(), 15.0);
    }

    #[test]
    fn evaluation_errors() {
        let b = Bindings::new().with(Var::X, -1.0);
        assert!(matches!(Expr::parse("log(x)").unwrap().eval(&b), Err(Error::Domain(_))));
        assert!(matches!(Expr::parse("sqrt(x)").unwrap().eval(&b), Err(Error::Domain(_))));
        assert!(matches!(Expr::parse("1/(x+1)").unwrap().eval(&b), Err(Error::Domain(_))));
        assert!(matches!(Expr::parse("exp(1000)").unwrap().eval(&b), Err(Error::Domain(_))));
        assert!(matches!(Expr::parse("y").unwrap().eval(&b), Err(Error::UnboundVariable('y'))));
    }
}
