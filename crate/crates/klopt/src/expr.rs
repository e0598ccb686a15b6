//! A small expression language for user-supplied mean and variance functions.
//!
//! Grammar (whitespace-insensitive):
//!
//! ```text
//! expr   := term  (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := '-' factor | power
//! power  := atom ('^' factor)?             -- right-associative
//! atom   := number | 'x' | 't'<digits> | fn '(' expr ')' | '(' expr ')'
//! fn     := 'exp' | 'log' | 'sqrt'
//! ```
//!
//! so precedence is `^` above unary minus above `*`/`/` above `+`/`-`:
//! `-x^2` parses as `-(x^2)` and `2^3^2` as `2^(3^2)`. Parameters are
//! `t1 ... tD` where `D` is the parameter count given at parse time.
//!
//! Evaluation is checked: division by zero, `log`/`sqrt` outside their real
//! domain, and overflow all surface as [`EvalError::NotFinite`] rather than
//! silently propagating NaN into an optimizer.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
#[error("parse error at offset {offset}: {message}")]
pub struct ParseError {
    pub offset: usize,
    pub message: String,
}

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("{op} produced a non-finite value")]
    NotFinite { op: &'static str },
    #[error("expression uses {expected} parameters but {got} were supplied")]
    BadArity { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnFn {
    Exp,
    Log,
    Sqrt,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Ast {
    Const(f64),
    X,
    /// Zero-based parameter index; displays as `t{i+1}`.
    Param(usize),
    Neg(Box<Ast>),
    Bin(BinOp, Box<Ast>, Box<Ast>),
    Fun(UnFn, Box<Ast>),
}

/// A parsed expression together with its parameter count and source text.
#[derive(Debug, Clone)]
pub struct Expr {
    ast: Ast,
    dim: usize,
    src: String,
}

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        self.ast == other.ast && self.dim == other.dim
    }
}

impl Expr {
    /// Parses `src` allowing parameters `t1 ..= t{dim}`.
    pub fn parse(src: &str, dim: usize) -> Result<Self, ParseError> {
        let mut p = Parser {
            bytes: src.as_bytes(),
            pos: 0,
            dim,
        };
        p.skip_ws();
        let ast = p.expr()?;
        p.skip_ws();
        if p.pos != p.bytes.len() {
            return Err(p.err("unexpected trailing input"));
        }
        Ok(Expr {
            ast,
            dim,
            src: src.to_string(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn src(&self) -> &str {
        &self.src
    }

    pub fn ast(&self) -> &Ast {
        &self.ast
    }

    pub fn eval(&self, x: f64, theta: &[f64]) -> Result<f64, EvalError> {
        if theta.len() < self.dim {
            return Err(EvalError::BadArity {
                expected: self.dim,
                got: theta.len(),
            });
        }
        eval_ast(&self.ast, x, theta)
    }

    /// Gradient with respect to the parameter vector by central differences,
    /// using step `h_k = 1e-6 * max(1, |theta_k|)` per coordinate.
    pub fn grad_theta(&self, x: f64, theta: &[f64]) -> Result<Vec<f64>, EvalError> {
        if theta.len() < self.dim {
            return Err(EvalError::BadArity {
                expected: self.dim,
                got: theta.len(),
            });
        }
        let mut work = theta.to_vec();
        let mut grad = vec![0.0; self.dim];
        for k in 0..self.dim {
            let h = 1e-6 * theta[k].abs().max(1.0);
            work[k] = theta[k] + h;
            let up = eval_ast(&self.ast, x, &work)?;
            work[k] = theta[k] - h;
            let dn = eval_ast(&self.ast, x, &work)?;
            work[k] = theta[k];
            grad[k] = (up - dn) / (2.0 * h);
        }
        Ok(grad)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_ast(f, &self.ast, 0)
    }
}

impl Serialize for Expr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.src)
    }
}

// Deserialization needs the parameter count, which only the surrounding model
// knows, so `Expr` deserializes through a raw string at the scenario layer.
impl<'de> Deserialize<'de> for Expr {
    fn deserialize<D: serde::Deserializer<'de>>(_d: D) -> Result<Self, D::Error> {
        Err(serde::de::Error::custom(
            "expressions are parsed by the scenario loader, which knows the parameter count",
        ))
    }
}

fn eval_ast(ast: &Ast, x: f64, theta: &[f64]) -> Result<f64, EvalError> {
    let finite = |v: f64, op: &'static str| {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalError::NotFinite { op })
        }
    };
    match ast {
        Ast::Const(c) => Ok(*c),
        Ast::X => finite(x, "x"),
        Ast::Param(i) => finite(theta[*i], "parameter"),
        Ast::Neg(a) => Ok(-eval_ast(a, x, theta)?),
        Ast::Bin(op, l, r) => {
            let a = eval_ast(l, x, theta)?;
            let b = eval_ast(r, x, theta)?;
            match op {
                BinOp::Add => finite(a + b, "addition"),
                BinOp::Sub => finite(a - b, "subtraction"),
                BinOp::Mul => finite(a * b, "multiplication"),
                BinOp::Div => finite(a / b, "division"),
                BinOp::Pow => finite(a.powf(b), "power"),
            }
        }
        Ast::Fun(f, a) => {
            let v = eval_ast(a, x, theta)?;
            match f {
                UnFn::Exp => finite(v.exp(), "exp"),
                UnFn::Log => finite(v.ln(), "log"),
                UnFn::Sqrt => finite(v.sqrt(), "sqrt"),
            }
        }
    }
}

// Precedence levels used for minimal parenthesization on display.
fn prec(ast: &Ast) -> u8 {
    match ast {
        Ast::Const(_) | Ast::X | Ast::Param(_) | Ast::Fun(..) => 5,
        Ast::Bin(BinOp::Pow, ..) => 4,
        Ast::Neg(_) => 3,
        Ast::Bin(BinOp::Mul, ..) | Ast::Bin(BinOp::Div, ..) => 2,
        Ast::Bin(BinOp::Add, ..) | Ast::Bin(BinOp::Sub, ..) => 1,
    }
}

fn write_ast(f: &mut fmt::Formatter<'_>, ast: &Ast, min_prec: u8) -> fmt::Result {
    let this = prec(ast);
    let parens = this < min_prec;
    if parens {
        write!(f, "(")?;
    }
    match ast {
        Ast::Const(c) => write!(f, "{c}")?,
        Ast::X => write!(f, "x")?,
        Ast::Param(i) => write!(f, "t{}", i + 1)?,
        Ast::Neg(a) => {
            write!(f, "-")?;
            write_ast(f, a, 3)?;
        }
        Ast::Bin(op, l, r) => {
            let (sym, lp, rp) = match op {
                BinOp::Add => ("+", 1, 2),
                BinOp::Sub => ("-", 1, 2),
                BinOp::Mul => ("*", 2, 3),
                BinOp::Div => ("/", 2, 3),
                BinOp::Pow => ("^", 5, 3),
            };
            write_ast(f, l, lp)?;
            write!(f, "{sym}")?;
            write_ast(f, r, rp)?;
        }
        Ast::Fun(fun, a) => {
            let name = match fun {
                UnFn::Exp => "exp",
                UnFn::Log => "log",
                UnFn::Sqrt => "sqrt",
            };
            write!(f, "{name}(")?;
            write_ast(f, a, 0)?;
            write!(f, ")")?;
        }
    }
    if parens {
        write!(f, ")")?;
    }
    Ok(())
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
    dim: usize,
}

impl<'a> Parser<'a> {
    fn err(&self, message: &str) -> ParseError {
        ParseError {
            offset: self.pos,
            message: message.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn eat(&mut self, b: u8) -> bool {
        if self.peek() == Some(b) {
            self.pos += 1;
            self.skip_ws();
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Ast, ParseError> {
        let mut lhs = self.term()?;
        loop {
            if self.eat(b'+') {
                let rhs = self.term()?;
                lhs = Ast::Bin(BinOp::Add, Box::new(lhs), Box::new(rhs));
            } else if self.eat(b'-') {
                let rhs = self.term()?;
                lhs = Ast::Bin(BinOp::Sub, Box::new(lhs), Box::new(rhs));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Ast, ParseError> {
        let mut lhs = self.factor()?;
        loop {
            if self.eat(b'*') {
                let rhs = self.factor()?;
                lhs = Ast::Bin(BinOp::Mul, Box::new(lhs), Box::new(rhs));
            } else if self.eat(b'/') {
                let rhs = self.factor()?;
                lhs = Ast::Bin(BinOp::Div, Box::new(lhs), Box::new(rhs));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn factor(&mut self) -> Result<Ast, ParseError> {
        if self.eat(b'-') {
            let inner = self.factor()?;
            // Fold a leading minus into numeric literals so negative
            // constants round-trip through display unchanged.
            return Ok(match inner {
                Ast::Const(c) => Ast::Const(-c),
                other => Ast::Neg(Box::new(other)),
            });
        }
        self.power()
    }

    fn power(&mut self) -> Result<Ast, ParseError> {
        let base = self.atom()?;
        if self.eat(b'^') {
            let exp = self.factor()?;
            return Ok(Ast::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Ast, ParseError> {
        match self.peek() {
            None => Err(self.err("unexpected end of input")),
            Some(b'(') => {
                self.eat(b'(');
                let inner = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.err("expected closing parenthesis"));
                }
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.ident(),
            Some(_) => Err(self.err("expected a number, identifier, or parenthesis")),
        }
    }

    fn number(&mut self) -> Result<Ast, ParseError> {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_digit() || c == b'.') {
            self.pos += 1;
        }
        if matches!(self.peek(), Some(b'e' | b'E')) {
            let mark = self.pos;
            self.pos += 1;
            if matches!(self.peek(), Some(b'+' | b'-')) {
                self.pos += 1;
            }
            if matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
                while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
                    self.pos += 1;
                }
            } else {
                // Not an exponent after all (e.g. `2e` followed by `x`).
                self.pos = mark;
            }
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
        let value: f64 = text.parse().map_err(|_| ParseError {
            offset: start,
            message: format!("invalid number literal `{text}`"),
        })?;
        self.skip_ws();
        Ok(Ast::Const(value))
    }

    fn ident(&mut self) -> Result<Ast, ParseError> {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_alphanumeric()) {
            self.pos += 1;
        }
        let word = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
        self.skip_ws();
        match word {
            "x" => Ok(Ast::X),
            "exp" | "log" | "sqrt" => {
                let fun = match word {
                    "exp" => UnFn::Exp,
                    "log" => UnFn::Log,
                    _ => UnFn::Sqrt,
                };
                if !self.eat(b'(') {
                    return Err(self.err(&format!("expected `(` after `{word}`")));
                }
                let arg = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.err("expected closing parenthesis"));
                }
                Ok(Ast::Fun(fun, Box::new(arg)))
            }
            w if w.starts_with('t') && w.len() > 1 && w[1..].bytes().all(|b| b.is_ascii_digit()) => {
                let idx: usize = w[1..].parse().map_err(|_| ParseError {
                    offset: start,
                    message: format!("invalid parameter `{w}`"),
                })?;
                if idx == 0 || idx > self.dim {
                    return Err(ParseError {
                        offset: start,
                        message: format!(
                            "parameter `{w}` out of range; this model has {} parameter(s)",
                            self.dim
                        ),
                    });
                }
                Ok(Ast::Param(idx - 1))
            }
            w => Err(ParseError {
                offset: start,
                message: format!("unknown identifier `{w}`"),
            }),
        }
    }
}
