//! Regressor expressions over an agent's state variables.
//!
//! Scenario files carry each regressor entry as text such as `x1^2` or
//! `sin(x2)`. This module parses that text into an [`Expr`] tree, evaluates
//! it on plain floats or on any [`Scalar`] (the controller evaluates on
//! truncated Taylor jets), and differentiates it symbolically.
//!
//! Grammar:
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := atom ('^' exponent)?
//! exponent:= ['-'] integer | '(' ['-'] integer ')'
//! atom    := number | 'x' index | func '(' expr ')' | '(' expr ')'
//! func    := 'sin' | 'cos' | 'exp'
//! ```
//!
//! Variables are `x1 .. xr`, one-based as written; internally they are
//! stored zero-based.

use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    /// Zero-based state index (`x1` is `Var(0)`).
    Var(usize),
    Neg(Box<Expr>),
    Sin(Box<Expr>),
    Cos(Box<Expr>),
    Exp(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, i32),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("syntax error at offset {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("undeclared variable `{name}` at offset {pos} (declared: x1..x{declared})")]
    UndeclaredVariable {
        name: String,
        pos: usize,
        declared: usize,
    },
    #[error("non-integer exponent at offset {pos}")]
    NonIntegerExponent { pos: usize },
    #[error("division by zero while evaluating `{node}`")]
    DivisionByZero { node: String },
    #[error("expression needs x{needed} but only {supplied} values were supplied")]
    MissingVariable { needed: usize, supplied: usize },
}

/// Number type an [`Expr`] can be evaluated on.
///
/// `lift` builds a constant of the same kind as `self` (jets need to know
/// which variable space they live in).
pub trait Scalar:
    Clone
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn lift(&self, c: f64) -> Self;
    fn value(&self) -> f64;
    fn sin(&self) -> Self;
    fn cos(&self) -> Self;
    fn exp(&self) -> Self;
    fn powi(&self, n: i32) -> Self;
}

impl Scalar for f64 {
    fn lift(&self, c: f64) -> Self {
        c
    }
    fn value(&self) -> f64 {
        *self
    }
    fn sin(&self) -> Self {
        f64::sin(*self)
    }
    fn cos(&self) -> Self {
        f64::cos(*self)
    }
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
    fn powi(&self, n: i32) -> Self {
        f64::powi(*self, n)
    }
}

/// Parses `source` with variables `x1 ..= x{declared}` in scope.
pub fn parse(source: &str, declared: usize) -> Result<Expr, ExprError> {
    let mut p = Parser {
        src: source.as_bytes(),
        pos: 0,
        declared,
    };
    let e = p.expr()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(p.syntax("unexpected trailing input"));
    }
    Ok(e)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    declared: usize,
}

impl Parser<'_> {
    fn syntax(&self, msg: &str) -> ExprError {
        ExprError::Syntax {
            pos: self.pos,
            msg: msg.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: u8) -> Result<(), ExprError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.syntax(&format!("expected `{}`", c as char)))
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            if self.eat(b'+') {
                lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat(b'-') {
                lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat(b'*') {
                lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat(b'/') {
                lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.eat(b'-') {
            // Negative literals fold into the constant so that printing a
            // negative constant and reparsing it gives back the same tree.
            return Ok(match self.unary()? {
                Expr::Const(c) => Expr::Const(-c),
                e => Expr::Neg(Box::new(e)),
            });
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.atom()?;
        if !self.eat(b'^') {
            return Ok(base);
        }
        let parenthesized = self.eat(b'(');
        let negative = self.eat(b'-');
        self.skip_ws();
        let digits_start = self.pos;
        let text = self.number_text();
        if text.is_empty() {
            return Err(self.syntax("expected integer exponent"));
        }
        let n: i32 = text
            .parse()
            .map_err(|_| ExprError::NonIntegerExponent { pos: digits_start })?;
        if parenthesized {
            self.expect(b')')?;
        }
        Ok(Expr::Pow(Box::new(base), if negative { -n } else { n }))
    }

    fn number_text(&mut self) -> String {
        let start = self.pos;
        while self.pos < self.src.len() {
            let c = self.src[self.pos];
            let exp_sign = (c == b'+' || c == b'-')
                && self.pos > start
                && matches!(self.src[self.pos - 1], b'e' | b'E');
            if c.is_ascii_digit() || c == b'.' || c == b'e' || c == b'E' || exp_sign {
                self.pos += 1;
            } else {
                break;
            }
        }
        String::from_utf8_lossy(&self.src[start..self.pos]).into_owned()
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(b')')?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => {
                let pos = self.pos;
                let text = self.number_text();
                text.parse::<f64>().map(Expr::Const).map_err(|_| ExprError::Syntax {
                    pos,
                    msg: format!("malformed number `{text}`"),
                })
            }
            Some(c) if c.is_ascii_alphabetic() => {
                let pos = self.pos;
                while self.pos < self.src.len() && self.src[self.pos].is_ascii_alphanumeric() {
                    self.pos += 1;
                }
                let name = std::str::from_utf8(&self.src[pos..self.pos]).unwrap_or("");
                match name {
                    "sin" | "cos" | "exp" => {
                        let name = name.to_string();
                        self.expect(b'(')?;
                        let arg = Box::new(self.expr()?);
                        self.expect(b')')?;
                        Ok(match name.as_str() {
                            "sin" => Expr::Sin(arg),
                            "cos" => Expr::Cos(arg),
                            _ => Expr::Exp(arg),
                        })
                    }
                    _ => self.variable(name, pos),
                }
            }
            Some(_) => Err(self.syntax("unexpected character")),
            None => Err(self.syntax("unexpected end of input")),
        }
    }

    fn variable(&self, name: &str, pos: usize) -> Result<Expr, ExprError> {
        let undeclared = || ExprError::UndeclaredVariable {
            name: name.to_string(),
            pos,
            declared: self.declared,
        };
        let index: usize = name
            .strip_prefix('x')
            .and_then(|s| s.parse().ok())
            .ok_or_else(undeclared)?;
        if index == 0 || index > self.declared {
            return Err(undeclared());
        }
        Ok(Expr::Var(index - 1))
    }
}

impl Expr {
    /// One-based index of the highest state variable referenced, or 0.
    pub fn max_var(&self) -> usize {
        match self {
            Expr::Const(_) => 0,
            Expr::Var(i) => i + 1,
            Expr::Neg(a) | Expr::Sin(a) | Expr::Cos(a) | Expr::Exp(a) | Expr::Pow(a, _) => {
                a.max_var()
            }
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.max_var().max(b.max_var())
            }
        }
    }

    /// Evaluates on plain floats.
    pub fn eval(&self, x: &[f64]) -> Result<f64, ExprError> {
        self.eval_on(x)
    }

    /// Evaluates on any [`Scalar`]. `x` must be non-empty: its first entry
    /// is the template constants are lifted from.
    pub fn eval_on<T: Scalar>(&self, x: &[T]) -> Result<T, ExprError> {
        let needed = self.max_var();
        if needed > x.len() {
            return Err(ExprError::MissingVariable {
                needed,
                supplied: x.len(),
            });
        }
        match x.first() {
            Some(template) => self.eval_rec(x, template),
            None => Err(ExprError::MissingVariable {
                needed: 1,
                supplied: 0,
            }),
        }
    }

    fn eval_rec<T: Scalar>(&self, x: &[T], t: &T) -> Result<T, ExprError> {
        Ok(match self {
            Expr::Const(c) => t.lift(*c),
            Expr::Var(i) => x[*i].clone(),
            Expr::Neg(a) => -a.eval_rec(x, t)?,
            Expr::Sin(a) => a.eval_rec(x, t)?.sin(),
            Expr::Cos(a) => a.eval_rec(x, t)?.cos(),
            Expr::Exp(a) => a.eval_rec(x, t)?.exp(),
            Expr::Add(a, b) => a.eval_rec(x, t)? + b.eval_rec(x, t)?,
            Expr::Sub(a, b) => a.eval_rec(x, t)? - b.eval_rec(x, t)?,
            Expr::Mul(a, b) => a.eval_rec(x, t)? * b.eval_rec(x, t)?,
            Expr::Div(a, b) => {
                let den = b.eval_rec(x, t)?;
                if den.value() == 0.0 {
                    return Err(ExprError::DivisionByZero {
                        node: self.to_string(),
                    });
                }
                a.eval_rec(x, t)? / den
            }
            Expr::Pow(a, n) => {
                let base = a.eval_rec(x, t)?;
                if *n < 0 && base.value() == 0.0 {
                    return Err(ExprError::DivisionByZero {
                        node: self.to_string(),
                    });
                }
                base.powi(*n)
            }
        })
    }

    /// Exact partial derivative with respect to the zero-based variable `var`.
    pub fn diff(&self, var: usize) -> Expr {
        use Expr::*;
        match self {
            Const(_) => Const(0.0),
            Var(i) => Const(if *i == var { 1.0 } else { 0.0 }),
            Neg(a) => neg(a.diff(var)),
            Sin(a) => mul(Cos(a.clone()), a.diff(var)),
            Cos(a) => mul(neg(Sin(a.clone())), a.diff(var)),
            Exp(a) => mul(Exp(a.clone()), a.diff(var)),
            Add(a, b) => add(a.diff(var), b.diff(var)),
            Sub(a, b) => sub(a.diff(var), b.diff(var)),
            Mul(a, b) => add(
                mul(a.diff(var), (**b).clone()),
                mul((**a).clone(), b.diff(var)),
            ),
            Div(a, b) => {
                // (a'b - ab') / b^2
                let num = sub(
                    mul(a.diff(var), (**b).clone()),
                    mul((**a).clone(), b.diff(var)),
                );
                if num.is_zero() {
                    Const(0.0)
                } else {
                    Div(Box::new(num), Box::new(pow((**b).clone(), 2)))
                }
            }
            Pow(a, n) => match n {
                0 => Const(0.0),
                _ => mul(
                    mul(Const(f64::from(*n)), pow((**a).clone(), n - 1)),
                    a.diff(var),
                ),
            },
        }
    }

    fn is_zero(&self) -> bool {
        matches!(self, Expr::Const(c) if *c == 0.0)
    }

    fn is_one(&self) -> bool {
        matches!(self, Expr::Const(c) if *c == 1.0)
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(_) => 3,
            Expr::Pow(..) => 4,
            Expr::Const(c) if *c < 0.0 || c.is_sign_negative() => 3,
            _ => 5,
        }
    }
}

// Builders applying the 0/1 identities only.

fn neg(a: Expr) -> Expr {
    match a {
        Expr::Const(c) => Expr::Const(-c),
        Expr::Neg(inner) => *inner,
        a => Expr::Neg(Box::new(a)),
    }
}

fn add(a: Expr, b: Expr) -> Expr {
    if a.is_zero() {
        b
    } else if b.is_zero() {
        a
    } else {
        Expr::Add(Box::new(a), Box::new(b))
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    if b.is_zero() {
        a
    } else if a.is_zero() {
        neg(b)
    } else {
        Expr::Sub(Box::new(a), Box::new(b))
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    if a.is_zero() || b.is_zero() {
        Expr::Const(0.0)
    } else if a.is_one() {
        b
    } else if b.is_one() {
        a
    } else {
        Expr::Mul(Box::new(a), Box::new(b))
    }
}

fn pow(a: Expr, n: i32) -> Expr {
    match n {
        0 => Expr::Const(1.0),
        1 => a,
        _ => Expr::Pow(Box::new(a), n),
    }
}

impl Add for Expr {
    type Output = Expr;
    fn add(self, rhs: Expr) -> Expr {
        add(self, rhs)
    }
}

impl Sub for Expr {
    type Output = Expr;
    fn sub(self, rhs: Expr) -> Expr {
        sub(self, rhs)
    }
}

impl Mul for Expr {
    type Output = Expr;
    fn mul(self, rhs: Expr) -> Expr {
        mul(self, rhs)
    }
}

impl Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        neg(self)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Operands are parenthesized whenever their precedence could change
        // the parse; right operands of `-` and `/` also when equal.
        fn operand(f: &mut fmt::Formatter<'_>, e: &Expr, min: u8) -> fmt::Result {
            if e.precedence() < min {
                write!(f, "({e})")
            } else {
                write!(f, "{e}")
            }
        }
        match self {
            Expr::Const(c) => {
                if c.is_sign_negative() {
                    write!(f, "-{}", -c)
                } else {
                    write!(f, "{c}")
                }
            }
            Expr::Var(i) => write!(f, "x{}", i + 1),
            Expr::Neg(a) => {
                write!(f, "-")?;
                operand(f, a, 4)
            }
            Expr::Sin(a) => write!(f, "sin({a})"),
            Expr::Cos(a) => write!(f, "cos({a})"),
            Expr::Exp(a) => write!(f, "exp({a})"),
            Expr::Add(a, b) => {
                operand(f, a, 1)?;
                write!(f, " + ")?;
                operand(f, b, 2)
            }
            Expr::Sub(a, b) => {
                operand(f, a, 1)?;
                write!(f, " - ")?;
                operand(f, b, 2)
            }
            Expr::Mul(a, b) => {
                operand(f, a, 2)?;
                write!(f, " * ")?;
                operand(f, b, 3)
            }
            Expr::Div(a, b) => {
                operand(f, a, 2)?;
                write!(f, " / ")?;
                operand(f, b, 3)
            }
            Expr::Pow(a, n) => {
                operand(f, a, 5)?;
                if *n < 0 {
                    write!(f, "^({n})")
                } else {
                    write!(f, "^{n}")
                }
            }
        }
    }
}
