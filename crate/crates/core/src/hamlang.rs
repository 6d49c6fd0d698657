//! A small expression language for Hamiltonians H(q, p, t).
//!
//! Grammar (precedence from loosest to tightest):
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' unary)?        exponent must be constant; right-associative
//! primary := number | 'pi' | 't' | 'q'k | 'p'k | func '(' expr ')' | '(' expr ')'
//! func    := 'sin' | 'cos' | 'exp' | 'sqrt'
//! ```
//!
//! Indices k start at 1. Values, gradients and Hessians come from second-order
//! forward-mode jets in the 2n + 1 variables (q, p, t).

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::hamflow::HamiltonianModel;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HamlangError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier '{name}' at byte {offset}")]
    UnknownIdentifier { name: String, offset: usize },
    #[error("domain error in {expr} at q={q:?}, p={p:?}, t={t}: {message}")]
    Domain { expr: String, q: Vec<f64>, p: Vec<f64>, t: f64, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    /// q_{k+1}
    Q(usize),
    /// p_{k+1}
    P(usize),
    T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Sqrt,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Sqrt => "sqrt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Var),
    Neg(Box<Expr>),
    Call(Func, Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, f64),
}

impl Expr {
    /// Largest q/p index used, i.e. the smallest n the expression fits.
    pub fn min_dim(&self) -> usize {
        match self {
            Expr::Const(_) | Expr::Var(Var::T) => 0,
            Expr::Var(Var::Q(k) | Var::P(k)) => k + 1,
            Expr::Neg(e) | Expr::Call(_, e) | Expr::Pow(e, _) => e.min_dim(),
            Expr::Binary(_, l, r) => l.min_dim().max(r.min_dim()),
        }
    }

    fn constant_value(&self) -> Option<f64> {
        match self {
            Expr::Const(c) => Some(*c),
            Expr::Var(_) => None,
            Expr::Neg(e) => e.constant_value().map(|v| -v),
            Expr::Call(f, e) => e.constant_value().map(|v| match f {
                Func::Sin => v.sin(),
                Func::Cos => v.cos(),
                Func::Exp => v.exp(),
                Func::Sqrt => v.sqrt(),
            }),
            Expr::Binary(op, l, r) => {
                let (a, b) = (l.constant_value()?, r.constant_value()?);
                Some(match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => a / b,
                })
            }
            Expr::Pow(e, c) => e.constant_value().map(|v| v.powf(*c)),
        }
    }
}

fn fmt_const(c: f64, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    if c < 0.0 {
        write!(f, "(-{})", -c)
    } else {
        write!(f, "{c}")
    }
}

/// Fully parenthesized; parses back to the same tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => fmt_const(*c, f),
            Expr::Var(Var::Q(k)) => write!(f, "q{}", k + 1),
            Expr::Var(Var::P(k)) => write!(f, "p{}", k + 1),
            Expr::Var(Var::T) => f.write_str("t"),
            Expr::Neg(e) => write!(f, "(-{e})"),
            Expr::Call(func, e) => write!(f, "{}({e})", func.name()),
            Expr::Binary(op, l, r) => {
                let sym = match op {
                    BinOp::Add => "+",
                    BinOp::Sub => "-",
                    BinOp::Mul => "*",
                    BinOp::Div => "/",
                };
                write!(f, "({l} {sym} {r})")
            }
            Expr::Pow(b, c) => {
                write!(f, "({b}^")?;
                fmt_const(*c, f)?;
                f.write_str(")")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Sym(char),
    End,
}

struct Lexer<'a> {
    src: &'a str,
    toks: Vec<(Tok, usize)>,
}

impl<'a> Lexer<'a> {
    fn run(src: &'a str) -> Result<Vec<(Tok, usize)>, HamlangError> {
        let mut lx = Lexer { src, toks: Vec::new() };
        let bytes = src.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            let c = bytes[i] as char;
            if c.is_ascii_whitespace() {
                i += 1;
            } else if c.is_ascii_digit() || (c == '.' && bytes.get(i + 1).is_some_and(|b| b.is_ascii_digit())) {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        i = j;
                        while i < bytes.len() && bytes[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text = &lx.src[start..i];
                let v: f64 = text.parse().map_err(|_| HamlangError::Syntax {
                    offset: start,
                    message: format!("malformed number '{text}'"),
                })?;
                if !v.is_finite() {
                    return Err(HamlangError::Syntax { offset: start, message: format!("number '{text}' overflows") });
                }
                lx.toks.push((Tok::Num(v), start));
            } else if c.is_ascii_alphabetic() || c == '_' {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                lx.toks.push((Tok::Ident(lx.src[start..i].to_string()), start));
            } else if "+-*/^()".contains(c) {
                lx.toks.push((Tok::Sym(c), i));
                i += 1;
            } else {
                let ch = src[i..].chars().next().unwrap_or(c);
                return Err(HamlangError::Syntax { offset: i, message: format!("unexpected character '{ch}'") });
            }
        }
        lx.toks.push((Tok::End, src.len()));
        Ok(lx.toks)
    }
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    max_dim: Option<usize>,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> (Tok, usize) {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error<T>(&self, message: impl Into<String>) -> Result<T, HamlangError> {
        Err(HamlangError::Syntax { offset: self.offset(), message: message.into() })
    }

    fn expect(&mut self, c: char) -> Result<(), HamlangError> {
        if *self.peek() == Tok::Sym(c) {
            self.bump();
            Ok(())
        } else {
            self.error(format!("expected '{c}'"))
        }
    }

    fn expr(&mut self) -> Result<Expr, HamlangError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Tok::Sym('+') => BinOp::Add,
                Tok::Sym('-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(self.term()?));
        }
    }

    fn term(&mut self) -> Result<Expr, HamlangError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Tok::Sym('*') => BinOp::Mul,
                Tok::Sym('/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(self.unary()?));
        }
    }

    fn unary(&mut self) -> Result<Expr, HamlangError> {
        if *self.peek() == Tok::Sym('-') {
            self.bump();
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, HamlangError> {
        let base = self.primary()?;
        if *self.peek() != Tok::Sym('^') {
            return Ok(base);
        }
        self.bump();
        let at = self.offset();
        let exponent = self.unary()?;
        match exponent.constant_value() {
            Some(c) if c.is_finite() => Ok(Expr::Pow(Box::new(base), c)),
            _ => Err(HamlangError::Syntax { offset: at, message: "exponent must be a finite constant".into() }),
        }
    }

    fn primary(&mut self) -> Result<Expr, HamlangError> {
        let (tok, at) = self.bump();
        match tok {
            Tok::Num(v) => Ok(Expr::Const(v)),
            Tok::Sym('(') => {
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Tok::Ident(name) => self.identifier(name, at),
            Tok::End => Err(HamlangError::Syntax { offset: at, message: "unexpected end of input".into() }),
            Tok::Sym(c) => Err(HamlangError::Syntax { offset: at, message: format!("unexpected '{c}'") }),
        }
    }

    fn identifier(&mut self, name: String, at: usize) -> Result<Expr, HamlangError> {
        let func = match name.as_str() {
            "pi" => return Ok(Expr::Const(PI)),
            "t" => return Ok(Expr::Var(Var::T)),
            "sin" => Some(Func::Sin),
            "cos" => Some(Func::Cos),
            "exp" => Some(Func::Exp),
            "sqrt" => Some(Func::Sqrt),
            _ => None,
        };
        if let Some(func) = func {
            self.expect('(')?;
            let arg = self.expr()?;
            self.expect(')')?;
            return Ok(Expr::Call(func, Box::new(arg)));
        }
        let unknown = || HamlangError::UnknownIdentifier { name: name.clone(), offset: at };
        let (head, digits) = name.split_at(1);
        let k: usize = match digits.parse() {
            Ok(k) if k >= 1 && !digits.starts_with('0') => k,
            _ => return Err(unknown()),
        };
        if self.max_dim.is_some_and(|n| k > n) {
            return Err(unknown());
        }
        match head {
            "q" => Ok(Expr::Var(Var::Q(k - 1))),
            "p" => Ok(Expr::Var(Var::P(k - 1))),
            _ => Err(unknown()),
        }
    }
}

fn parse_inner(text: &str, max_dim: Option<usize>) -> Result<Expr, HamlangError> {
    let toks = Lexer::run(text)?;
    let mut p = Parser { toks, pos: 0, max_dim };
    let e = p.expr()?;
    if *p.peek() != Tok::End {
        return p.error("unexpected trailing input");
    }
    Ok(e)
}

/// Parses with the dimension inferred from the largest index used.
pub fn parse(text: &str) -> Result<Expr, HamlangError> {
    parse_inner(text, None)
}

/// Parses with indices restricted to 1..=n.
pub fn parse_with_dim(text: &str, n: usize) -> Result<Expr, HamlangError> {
    parse_inner(text, Some(n))
}

/// Value, gradient and symmetric Hessian with respect to m variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet2<T: Real> {
    pub value: T,
    pub grad: DVector<T>,
    pub hess: DMatrix<T>,
}

impl<T: Real> Jet2<T> {
    pub fn constant(v: T, m: usize) -> Self {
        Self { value: v, grad: DVector::zeros(m), hess: DMatrix::zeros(m, m) }
    }

    pub fn variable(v: T, index: usize, m: usize) -> Self {
        let mut j = Self::constant(v, m);
        j.grad[index] = T::one();
        j
    }

    /// f(self) given f, f', f'' at the value.
    fn chain(&self, f0: T, f1: T, f2: T) -> Self {
        let outer = &self.grad * self.grad.transpose();
        Self { value: f0, grad: &self.grad * f1, hess: &self.hess * f1 + outer * f2 }
    }

    fn add(&self, o: &Self) -> Self {
        Self { value: self.value + o.value, grad: &self.grad + &o.grad, hess: &self.hess + &o.hess }
    }

    fn sub(&self, o: &Self) -> Self {
        Self { value: self.value - o.value, grad: &self.grad - &o.grad, hess: &self.hess - &o.hess }
    }

    fn mul(&self, o: &Self) -> Self {
        let cross = &self.grad * o.grad.transpose();
        Self {
            value: self.value * o.value,
            grad: &o.grad * self.value + &self.grad * o.value,
            hess: &o.hess * self.value + &self.hess * o.value + &cross + cross.transpose(),
        }
    }

    fn neg(&self) -> Self {
        Self { value: -self.value, grad: -&self.grad, hess: -&self.hess }
    }
}

struct Evaluator<'a, T: Real> {
    q: &'a DVector<T>,
    p: &'a DVector<T>,
    t: T,
    n: usize,
}

impl<T: Real> Evaluator<'_, T> {
    fn domain(&self, e: &Expr, message: &str) -> HamlangError {
        HamlangError::Domain {
            expr: e.to_string(),
            q: self.q.iter().map(|x| x.to_f64_lossy()).collect(),
            p: self.p.iter().map(|x| x.to_f64_lossy()).collect(),
            t: self.t.to_f64_lossy(),
            message: message.into(),
        }
    }

    fn eval(&self, e: &Expr) -> Result<Jet2<T>, HamlangError> {
        let m = 2 * self.n + 1;
        Ok(match e {
            Expr::Const(c) => Jet2::constant(T::lit(*c), m),
            Expr::Var(Var::Q(k)) => Jet2::variable(self.q[*k], *k, m),
            Expr::Var(Var::P(k)) => Jet2::variable(self.p[*k], self.n + k, m),
            Expr::Var(Var::T) => Jet2::variable(self.t, 2 * self.n, m),
            Expr::Neg(a) => self.eval(a)?.neg(),
            Expr::Call(func, a) => {
                let x = self.eval(a)?;
                let v = x.value;
                match func {
                    Func::Sin => x.chain(v.sin(), v.cos(), -v.sin()),
                    Func::Cos => x.chain(v.cos(), -v.sin(), -v.cos()),
                    Func::Exp => {
                        let ev = v.exp();
                        x.chain(ev, ev, ev)
                    }
                    Func::Sqrt => {
                        if !(v > T::zero()) {
                            return Err(self.domain(e, "sqrt needs a positive argument"));
                        }
                        let s = v.sqrt();
                        x.chain(s, T::lit(0.5) / s, -T::lit(0.25) / (s * v))
                    }
                }
            }
            Expr::Binary(op, l, r) => {
                let (a, b) = (self.eval(l)?, self.eval(r)?);
                match op {
                    BinOp::Add => a.add(&b),
                    BinOp::Sub => a.sub(&b),
                    BinOp::Mul => a.mul(&b),
                    BinOp::Div => {
                        let v = b.value;
                        if v == T::zero() {
                            return Err(self.domain(e, "division by zero"));
                        }
                        let inv = b.chain(T::one() / v, -T::one() / (v * v), T::lit(2.0) / (v * v * v));
                        a.mul(&inv)
                    }
                }
            }
            Expr::Pow(a, c) => {
                let x = self.eval(a)?;
                let v = x.value;
                let cc = T::lit(*c);
                let integral = c.fract() == 0.0 && c.abs() < i32::MAX as f64;
                let pw = |k: f64| -> T {
                    if integral {
                        v.powi((*c - k) as i32)
                    } else {
                        v.powf(cc - T::lit(k))
                    }
                };
                if !integral && v < T::zero() {
                    return Err(self.domain(e, "fractional power of a negative number"));
                }
                if v == T::zero() && *c < 2.0 && *c != 0.0 && *c != 1.0 {
                    return Err(self.domain(e, "power is not twice differentiable at zero"));
                }
                // c = 0 or 1 kill the higher terms; skip them so 0^(negative) never appears
                let f1 = if *c == 0.0 { T::zero() } else { cc * pw(1.0) };
                let f2 = if *c == 0.0 || *c == 1.0 { T::zero() } else { cc * (cc - T::one()) * pw(2.0) };
                x.chain(pw(0.0), f1, f2)
            }
        })
    }
}

/// H, the 2n-gradient (H_q, H_p) and the 2n x 2n Hessian at (q, p, t).
pub fn evaluate_with_derivatives<T: Real>(
    expr: &Expr,
    q: &DVector<T>,
    p: &DVector<T>,
    t: T,
) -> Result<(T, DVector<T>, DMatrix<T>), HamlangError> {
    let n = q.len();
    if expr.min_dim() > n || p.len() != n {
        return Err(HamlangError::UnknownIdentifier { name: format!("index beyond n = {n}"), offset: 0 });
    }
    let jet = Evaluator { q, p, t, n }.eval(expr)?;
    let g = jet.grad.rows(0, 2 * n).into_owned();
    let h = jet.hess.view((0, 0), (2 * n, 2 * n)).into_owned();
    Ok((jet.value, g, h))
}

/// A parsed expression as a Hamiltonian model. Domain errors during
/// integration surface as NaN, which the integrator reports as non-finite.
#[derive(Debug, Clone)]
pub struct ExprHamiltonian {
    expr: Expr,
    n: usize,
    source: String,
}

impl ExprHamiltonian {
    pub fn new(text: &str, n: usize) -> Result<Self, HamlangError> {
        Ok(Self { expr: parse_with_dim(text, n)?, n, source: text.to_string() })
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    /// max |H(q + e_i, p, t) - H(q, p, t)| over seeded samples with |p| <= p_max.
    pub fn periodicity_defect(&self, samples: usize, p_max: f64, seed: u64) -> Result<f64, HamlangError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.n;
        let mut worst = 0.0f64;
        for _ in 0..samples {
            let q = DVector::from_fn(n, |_, _| rng.random::<f64>());
            let p = DVector::from_fn(n, |_, _| rng.random_range(-p_max..=p_max));
            let t = rng.random::<f64>();
            let h0 = evaluate_with_derivatives(&self.expr, &q, &p, t)?.0;
            for i in 0..n {
                let mut qs = q.clone();
                qs[i] += 1.0;
                let h1 = evaluate_with_derivatives(&self.expr, &qs, &p, t)?.0;
                worst = worst.max((h1 - h0).abs());
            }
        }
        Ok(worst)
    }
}

impl<T: Real> HamiltonianModel<T> for ExprHamiltonian {
    fn dim(&self) -> usize {
        self.n
    }

    fn label(&self) -> String {
        self.source.clone()
    }

    fn value(&self, q: &DVector<T>, p: &DVector<T>, t: T) -> T {
        evaluate_with_derivatives(&self.expr, q, p, t).map(|r| r.0).unwrap_or(T::lit(f64::NAN))
    }

    fn gradient(&self, q: &DVector<T>, p: &DVector<T>, t: T) -> DVector<T> {
        evaluate_with_derivatives(&self.expr, q, p, t)
            .map(|r| r.1)
            .unwrap_or_else(|_| DVector::from_element(2 * self.n, T::lit(f64::NAN)))
    }

    fn hessian(&self, q: &DVector<T>, p: &DVector<T>, t: T) -> DMatrix<T> {
        evaluate_with_derivatives(&self.expr, q, p, t)
            .map(|r| r.2)
            .unwrap_or_else(|_| DMatrix::from_element(2 * self.n, 2 * self.n, T::lit(f64::NAN)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamflow::{flow, pendulum};
    use crate::torus::PhasePoint;
    use proptest::prelude::*;
    use rand::Rng;

    const PENDULUM: &str = "p1^2/2 + cos(2*pi*q1)/(4*pi^2)";

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn parse_examples() {
        let e = parse(PENDULUM).unwrap();
        assert!(e.min_dim() >= 1);
        assert_eq!(parse("q1 +"), Err(HamlangError::Syntax { offset: 4, message: "unexpected end of input".into() }));
        assert!(matches!(parse_with_dim("p3", 2), Err(HamlangError::UnknownIdentifier { .. })));
        assert!(matches!(parse("r1"), Err(HamlangError::UnknownIdentifier { offset: 0, .. })));
        assert!(matches!(parse("q0"), Err(HamlangError::UnknownIdentifier { .. })));
        assert!(matches!(parse("q1^p1"), Err(HamlangError::Syntax { offset: 3, .. })));
        assert!(matches!(parse("sin q1"), Err(HamlangError::Syntax { offset: 4, .. })));
        assert!(matches!(parse("2 $ 3"), Err(HamlangError::Syntax { offset: 2, .. })));
    }

    #[test]
    fn precedence() {
        let e = parse("-q1^2").unwrap();
        assert_eq!(e, Expr::Neg(Box::new(Expr::Pow(Box::new(Expr::Var(Var::Q(0))), 2.0))));
        let e = parse("q1^3^2").unwrap();
        assert_eq!(e, Expr::Pow(Box::new(Expr::Var(Var::Q(0))), 9.0));
        let e = parse("1 - 2 - 3").unwrap();
        assert_eq!(e.constant_value(), Some(-4.0));
        let e = parse("2 * 3 + 4 / 8").unwrap();
        assert_eq!(e.constant_value(), Some(6.5));
        assert_eq!(parse("2^-1").unwrap(), Expr::Pow(Box::new(Expr::Const(2.0)), -1.0));
        assert_eq!(parse("1.5e-3").unwrap(), Expr::Const(1.5e-3));
    }

    #[test]
    fn derivative_examples() {
        let (h, g, hess) = evaluate_with_derivatives(&parse("p1^2/2").unwrap(), &v(&[0.3]), &v(&[2.0]), 0.0).unwrap();
        assert_eq!(h, 2.0);
        assert_eq!(g.as_slice(), &[0.0, 2.0]);
        assert_eq!(hess[(1, 1)], 1.0);

        let (h, g, hess) = evaluate_with_derivatives(&parse("cos(2*pi*q1)").unwrap(), &v(&[0.0]), &v(&[0.0]), 0.0).unwrap();
        assert_eq!(h, 1.0);
        assert_eq!(g[0], 0.0);
        assert!((hess[(0, 0)] + 4.0 * PI * PI).abs() < 1e-12);
    }

    #[test]
    fn pendulum_matches_catalog_and_finite_differences() {
        let ex = ExprHamiltonian::new(PENDULUM, 1).unwrap();
        let cat = pendulum(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let h = 1e-5;
        for _ in 0..100 {
            let q = v(&[rng.random_range(-1.0..2.0)]);
            let p = v(&[rng.random_range(-3.0..3.0)]);
            let t = rng.random::<f64>();
            let (val, g, hess) = evaluate_with_derivatives(ex.expr(), &q, &p, t).unwrap();
            assert!((val - cat.value(&q, &p, t)).abs() < 1e-14);
            assert!((&hess - cat.hessian(&q, &p, t)).amax() < 1e-13);
            let f = |dq: f64, dp: f64| evaluate_with_derivatives(ex.expr(), &v(&[q[0] + dq]), &v(&[p[0] + dp]), t).unwrap();
            let fd_g = [(f(h, 0.0).0 - f(-h, 0.0).0) / (2.0 * h), (f(0.0, h).0 - f(0.0, -h).0) / (2.0 * h)];
            let fd_hqq = (f(h, 0.0).1[0] - f(-h, 0.0).1[0]) / (2.0 * h);
            for (a, b) in g.iter().zip(fd_g) {
                assert!((a - b).abs() / b.abs().max(1.0) < 1e-8);
            }
            assert!((hess[(0, 0)] - fd_hqq).abs() / fd_hqq.abs().max(1.0) < 1e-8);
        }
        assert!(ex.periodicity_defect(50, 3.0, 1).unwrap() < 1e-12);
        assert!(ExprHamiltonian::new("p1^2/2 + q1", 1).unwrap().periodicity_defect(5, 1.0, 1).unwrap() > 0.5);

        let z = PhasePoint::from_slices(&[0.2], &[0.4]).unwrap();
        let a = flow(&ex, &z, 0.0, 1.0, 64).unwrap();
        let b = flow(&cat, &z, 0.0, 1.0, 64).unwrap();
        assert!(a.distance(&b) < 1e-13);
    }

    #[test]
    fn hessian_symmetric_with_mixed_terms() {
        let e = parse("sin(q1*p2) * exp(q2 - t) / (2 + cos(p1)) + sqrt(1 + q1^2) + (q2 + p1)^3").unwrap();
        let (_, g, h) = evaluate_with_derivatives(&e, &v(&[0.3, -0.2]), &v(&[0.7, 1.1]), 0.4).unwrap();
        assert_eq!(h, h.transpose());
        let step = 1e-6;
        let x0 = [0.3, -0.2, 0.7, 1.1];
        for j in 0..4 {
            let at = |d: f64| {
                let mut x = x0;
                x[j] += d;
                evaluate_with_derivatives(&e, &v(&x[..2]), &v(&x[2..]), 0.4).unwrap().1
            };
            let fd = (at(step) - at(-step)) / (2.0 * step);
            assert!((fd - h.column(j)).amax() < 1e-7, "column {j}");
        }
        assert_eq!(g.len(), 4);
    }

    #[test]
    fn domain_errors_echo_input() {
        let e = parse("sqrt(q1)").unwrap();
        let err = evaluate_with_derivatives(&e, &v(&[-1.0]), &v(&[0.0]), 0.0).unwrap_err();
        match &err {
            HamlangError::Domain { q, expr, .. } => {
                assert_eq!(q, &vec![-1.0]);
                assert_eq!(expr, "sqrt(q1)");
            }
            other => panic!("{other:?}"),
        }
        assert!(err.to_string().contains("q=[-1.0]"));
        let e = parse("1/(q1 - 0.5)").unwrap();
        assert!(matches!(evaluate_with_derivatives(&e, &v(&[0.5]), &v(&[0.0]), 0.0), Err(HamlangError::Domain { .. })));
        let ex = ExprHamiltonian::new("p1^2/2 + sqrt(q1)", 1).unwrap();
        let z = PhasePoint::from_slices(&[-0.5], &[0.0]).unwrap();
        assert!(matches!(flow(&ex, &z, 0.0, 1.0, 4), Err(crate::Error::NonFinite(_))));
    }

    #[test]
    fn powers_at_zero() {
        for (text, val, d1, d2) in [("q1^2", 0.0, 0.0, 2.0), ("q1^1", 0.0, 1.0, 0.0), ("q1^0", 1.0, 0.0, 0.0), ("q1^3", 0.0, 0.0, 0.0)] {
            let (h, g, hs) = evaluate_with_derivatives(&parse(text).unwrap(), &v(&[0.0]), &v(&[0.0]), 0.0).unwrap();
            assert_eq!((h, g[0], hs[(0, 0)]), (val, d1, d2), "{text}");
        }
        assert!(evaluate_with_derivatives(&parse("q1^0.5").unwrap(), &v(&[0.0]), &v(&[0.0]), 0.0).is_err());
        let (h, _, _) = evaluate_with_derivatives(&parse("q1^-2").unwrap(), &v(&[-2.0]), &v(&[0.0]), 0.0).unwrap();
        assert_eq!(h, 0.25);
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0.0f64..100.0).prop_map(Expr::Const),
            (0usize..3).prop_map(|k| Expr::Var(Var::Q(k))),
            (0usize..3).prop_map(|k| Expr::Var(Var::P(k))),
            Just(Expr::Var(Var::T)),
        ];
        leaf.prop_recursive(5, 48, 2, |inner| {
            prop_oneof![
                inner.clone().prop_map(|e| Expr::Neg(Box::new(e))),
                (prop_oneof![Just(Func::Sin), Just(Func::Cos), Just(Func::Exp), Just(Func::Sqrt)], inner.clone())
                    .prop_map(|(f, e)| Expr::Call(f, Box::new(e))),
                (
                    prop_oneof![Just(BinOp::Add), Just(BinOp::Sub), Just(BinOp::Mul), Just(BinOp::Div)],
                    inner.clone(),
                    inner.clone()
                )
                    .prop_map(|(op, l, r)| Expr::Binary(op, Box::new(l), Box::new(r))),
                (inner, -4.0f64..4.0).prop_map(|(e, c)| Expr::Pow(Box::new(e), c)),
            ]
        })
    }

    proptest! {
        #[test]
        fn display_round_trips(e in arb_expr()) {
            let text = e.to_string();
            prop_assert_eq!(parse(&text).unwrap(), e);
        }
    }
}
