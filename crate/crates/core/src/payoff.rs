//! Cylinder payoffs `φ(B_{t1}, …, B_{tn})` built from a small expression language.
//!
//! Grammar (whitespace insensitive):
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary ('*' unary)*
//! unary   := '-' unary | primary
//! primary := number | x1 | x2 | x3 | '(' expr ')' | func '(' args ')'
//! func    := const(c) | abs(e) | neg(e) | sq(e) | pow(e, k) | min(e, e) | max(e, e)
//!          | call(e, K) | put(e, K) | clamp(e, lo, hi)
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum number of monitoring times.
pub const MAX_MONITORING: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    Const(f64),
    /// Zero-based coordinate index.
    Var(usize),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Neg(Box<Expr>),
    Abs(Box<Expr>),
    Sq(Box<Expr>),
    Pow(Box<Expr>, u32),
    Min(Box<Expr>, Box<Expr>),
    Max(Box<Expr>, Box<Expr>),
    Call(Box<Expr>, f64),
    Put(Box<Expr>, f64),
    Clamp(Box<Expr>, f64, f64),
}

impl Expr {
    pub fn var(i: usize) -> Expr {
        Expr::Var(i)
    }

    pub fn constant(c: f64) -> Expr {
        Expr::Const(c)
    }

    pub fn parse(src: &str) -> Result<Expr> {
        let mut p = Parser { src, pos: 0 };
        let e = p.expr()?;
        p.skip_ws();
        if p.pos != src.len() {
            return Err(p.err("unexpected trailing input"));
        }
        Ok(e)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(i) => x[*i],
            Expr::Add(a, b) => a.eval(x) + b.eval(x),
            Expr::Sub(a, b) => a.eval(x) - b.eval(x),
            Expr::Mul(a, b) => a.eval(x) * b.eval(x),
            Expr::Neg(a) => -a.eval(x),
            Expr::Abs(a) => a.eval(x).abs(),
            Expr::Sq(a) => {
                let v = a.eval(x);
                v * v
            }
            Expr::Pow(a, k) => a.eval(x).powi(*k as i32),
            Expr::Min(a, b) => a.eval(x).min(b.eval(x)),
            Expr::Max(a, b) => a.eval(x).max(b.eval(x)),
            Expr::Call(a, k) => (a.eval(x) - k).max(0.0),
            Expr::Put(a, k) => (k - a.eval(x)).max(0.0),
            Expr::Clamp(a, lo, hi) => a.eval(x).clamp(*lo, *hi),
        }
    }

    /// Number of coordinates referenced (highest index + 1).
    pub fn arity(&self) -> usize {
        match self {
            Expr::Const(_) => 0,
            Expr::Var(i) => i + 1,
            Expr::Neg(a)
            | Expr::Abs(a)
            | Expr::Sq(a)
            | Expr::Pow(a, _)
            | Expr::Call(a, _)
            | Expr::Put(a, _)
            | Expr::Clamp(a, _, _) => a.arity(),
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Min(a, b)
            | Expr::Max(a, b) => a.arity().max(b.arity()),
        }
    }

    /// Range over the box `[−r, r]^n` (`r` may be infinite).
    pub fn range_on(&self, r: f64) -> Interval {
        self.analyze(r).0
    }

    /// Bound on `Σ_k |∂φ/∂x_k|` over the box `[−r, r]^n`; infinite when unbounded.
    pub fn lipschitz_on(&self, r: f64) -> f64 {
        self.analyze(r).1.iter().sum()
    }

    /// Returns the range and per-coordinate Lipschitz bounds.
    fn analyze(&self, r: f64) -> (Interval, [f64; MAX_MONITORING]) {
        const ZERO: [f64; MAX_MONITORING] = [0.0; MAX_MONITORING];
        let combine = |a: [f64; MAX_MONITORING], b: [f64; MAX_MONITORING], f: &dyn Fn(f64, f64) -> f64| {
            let mut out = ZERO;
            for k in 0..MAX_MONITORING {
                out[k] = f(a[k], b[k]);
            }
            out
        };
        let scale = |a: [f64; MAX_MONITORING], c: f64| a.map(|v| if v == 0.0 { 0.0 } else { v * c });
        match self {
            Expr::Const(c) => (Interval::point(*c), ZERO),
            Expr::Var(i) => {
                let mut l = ZERO;
                l[*i] = 1.0;
                (Interval::new(-r, r), l)
            }
            Expr::Add(a, b) | Expr::Sub(a, b) => {
                let (ra, la) = a.analyze(r);
                let (rb, lb) = b.analyze(r);
                let range = if matches!(self, Expr::Add(..)) {
                    ra.add(rb)
                } else {
                    ra.add(rb.neg())
                };
                (range, combine(la, lb, &|x, y| x + y))
            }
            Expr::Mul(a, b) => {
                let (ra, la) = a.analyze(r);
                let (rb, lb) = b.analyze(r);
                let l = combine(scale(la, rb.mag()), scale(lb, ra.mag()), &|x, y| x + y);
                (ra.mul(rb), l)
            }
            Expr::Neg(a) => {
                let (ra, la) = a.analyze(r);
                (ra.neg(), la)
            }
            Expr::Abs(a) => {
                let (ra, la) = a.analyze(r);
                (ra.abs(), la)
            }
            Expr::Sq(a) => {
                let (ra, la) = a.analyze(r);
                (ra.abs().mul(ra.abs()), scale(la, 2.0 * ra.mag()))
            }
            Expr::Pow(a, k) => {
                let (ra, la) = a.analyze(r);
                let k = *k as i32;
                if k == 0 {
                    return (Interval::point(1.0), ZERO);
                }
                let m = ra.mag();
                let range = if k % 2 == 0 {
                    let lo = if ra.lo <= 0.0 && ra.hi >= 0.0 {
                        0.0
                    } else {
                        ra.lo.abs().min(ra.hi.abs()).powi(k)
                    };
                    Interval::new(lo, m.powi(k))
                } else {
                    Interval::new(ra.lo.powi(k), ra.hi.powi(k))
                };
                (range, scale(la, k as f64 * m.powi(k - 1)))
            }
            Expr::Min(a, b) | Expr::Max(a, b) => {
                let (ra, la) = a.analyze(r);
                let (rb, lb) = b.analyze(r);
                let range = if matches!(self, Expr::Min(..)) {
                    Interval::new(ra.lo.min(rb.lo), ra.hi.min(rb.hi))
                } else {
                    Interval::new(ra.lo.max(rb.lo), ra.hi.max(rb.hi))
                };
                (range, combine(la, lb, &f64::max))
            }
            Expr::Call(a, k) => {
                let (ra, la) = a.analyze(r);
                (Interval::new((ra.lo - k).max(0.0), (ra.hi - k).max(0.0)), la)
            }
            Expr::Put(a, k) => {
                let (ra, la) = a.analyze(r);
                (Interval::new((k - ra.hi).max(0.0), (k - ra.lo).max(0.0)), la)
            }
            Expr::Clamp(a, lo, hi) => {
                let (ra, la) = a.analyze(r);
                (
                    Interval::new(ra.lo.clamp(*lo, *hi), ra.hi.clamp(*lo, *hi)),
                    la,
                )
            }
        }
    }
}

fn fmt_num(v: f64) -> String {
    format!("{v:?}")
}

impl fmt::Display for Expr {
    /// Canonical form; parsing it yields the same tree.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "const({})", fmt_num(*c)),
            Expr::Var(i) => write!(f, "x{}", i + 1),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Neg(a) => write!(f, "neg({a})"),
            Expr::Abs(a) => write!(f, "abs({a})"),
            Expr::Sq(a) => write!(f, "sq({a})"),
            Expr::Pow(a, k) => write!(f, "pow({a}, {k})"),
            Expr::Min(a, b) => write!(f, "min({a}, {b})"),
            Expr::Max(a, b) => write!(f, "max({a}, {b})"),
            Expr::Call(a, k) => write!(f, "call({a}, {})", fmt_num(*k)),
            Expr::Put(a, k) => write!(f, "put({a}, {})", fmt_num(*k)),
            Expr::Clamp(a, lo, hi) => write!(f, "clamp({a}, {}, {})", fmt_num(*lo), fmt_num(*hi)),
        }
    }
}

/// Closed interval with possibly infinite endpoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    fn add(self, o: Interval) -> Interval {
        Interval::new(self.lo + o.lo, self.hi + o.hi)
    }

    fn neg(self) -> Interval {
        Interval::new(-self.hi, -self.lo)
    }

    fn abs(self) -> Interval {
        if self.lo >= 0.0 {
            self
        } else if self.hi <= 0.0 {
            self.neg()
        } else {
            Interval::new(0.0, self.mag())
        }
    }

    fn mag(self) -> f64 {
        self.lo.abs().max(self.hi.abs())
    }

    fn mul(self, o: Interval) -> Interval {
        let m = |a: f64, b: f64| if a == 0.0 || b == 0.0 { 0.0 } else { a * b };
        let c = [m(self.lo, o.lo), m(self.lo, o.hi), m(self.hi, o.lo), m(self.hi, o.hi)];
        Interval::new(
            c.iter().copied().fold(f64::INFINITY, f64::min),
            c.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        )
    }

    pub fn is_bounded(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite()
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl Parser<'_> {
    fn err(&self, msg: &str) -> Error {
        Error::Parse {
            pos: self.pos,
            msg: msg.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.err(&format!("expected '{c}'")))
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            if self.eat('+') {
                lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat('-') {
                lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        while self.eat('*') {
            lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.eat('-') {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.primary()
    }

    fn number(&mut self) -> Result<f64> {
        self.skip_ws();
        let start = self.pos;
        let bytes = self.src.as_bytes();
        let mut end = start;
        if end < bytes.len() && (bytes[end] == b'-' || bytes[end] == b'+') {
            end += 1;
        }
        while end < bytes.len() {
            let b = bytes[end];
            let exp_sign = (b == b'-' || b == b'+') && matches!(bytes[end - 1], b'e' | b'E');
            if b.is_ascii_digit() || b == b'.' || b == b'e' || b == b'E' || exp_sign {
                end += 1;
            } else {
                break;
            }
        }
        let text = &self.src[start..end];
        let v: f64 = text.parse().map_err(|_| self.err("malformed number"))?;
        if !v.is_finite() {
            return Err(self.err("non-finite number"));
        }
        self.pos = end;
        Ok(v)
    }

    fn ident(&mut self) -> String {
        self.skip_ws();
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_ascii_alphanumeric() || c == '_' {
                self.pos += 1;
            } else {
                break;
            }
        }
        self.src[start..self.pos].to_string()
    }

    fn primary(&mut self) -> Result<Expr> {
        self.skip_ws();
        match self.peek() {
            None => Err(self.err("unexpected end of input")),
            Some('(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == '.' => Ok(Expr::Const(self.number()?)),
            Some(c) if c.is_ascii_alphabetic() => {
                let at = self.pos;
                let name = self.ident();
                if let Some(idx) = name.strip_prefix('x') {
                    return match idx {
                        "1" => Ok(Expr::Var(0)),
                        "2" => Ok(Expr::Var(1)),
                        "3" => Ok(Expr::Var(2)),
                        _ => Err(Error::Parse {
                            pos: at,
                            msg: format!("unknown variable '{name}'"),
                        }),
                    };
                }
                self.expect('(')?;
                let e = self.call(&name, at)?;
                self.expect(')')?;
                Ok(e)
            }
            Some(_) => Err(self.err("unexpected character")),
        }
    }

    fn call(&mut self, name: &str, at: usize) -> Result<Expr> {
        let unary = |p: &mut Self| p.expr().map(Box::new);
        Ok(match name {
            "const" => Expr::Const(self.number()?),
            "abs" => Expr::Abs(unary(self)?),
            "neg" => Expr::Neg(unary(self)?),
            "sq" => Expr::Sq(unary(self)?),
            "pow" => {
                let a = unary(self)?;
                self.expect(',')?;
                let k = self.number()?;
                if k < 0.0 || k.fract() != 0.0 || k > 16.0 {
                    return Err(self.err("pow exponent must be an integer in [0, 16]"));
                }
                Expr::Pow(a, k as u32)
            }
            "min" | "max" => {
                let a = unary(self)?;
                self.expect(',')?;
                let b = unary(self)?;
                if name == "min" {
                    Expr::Min(a, b)
                } else {
                    Expr::Max(a, b)
                }
            }
            "call" | "put" => {
                let a = unary(self)?;
                self.expect(',')?;
                let k = self.number()?;
                if name == "call" {
                    Expr::Call(a, k)
                } else {
                    Expr::Put(a, k)
                }
            }
            "clamp" => {
                let a = unary(self)?;
                self.expect(',')?;
                let lo = self.number()?;
                self.expect(',')?;
                let hi = self.number()?;
                if lo > hi {
                    return Err(self.err("clamp bounds out of order"));
                }
                Expr::Clamp(a, lo, hi)
            }
            _ => {
                return Err(Error::Parse {
                    pos: at,
                    msg: format!("unknown function '{name}'"),
                })
            }
        })
    }
}

/// Checks `0 < t1 < … < tn ≤ 1` with at most [`MAX_MONITORING`] entries.
pub fn validate_times(times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(Error::InvalidPayoff("no monitoring times".into()));
    }
    if times.len() > MAX_MONITORING {
        return Err(Error::TooManyMonitoringTimes(times.len()));
    }
    if times[0] <= 0.0 || times.windows(2).any(|w| w[1] <= w[0]) || *times.last().unwrap() > 1.0 {
        return Err(Error::InvalidPayoff(
            "monitoring times must be positive, strictly increasing and at most 1".into(),
        ));
    }
    Ok(())
}

/// `ξ = φ(B_{t1}, …, B_{tn})` with `0 < t1 < … < tn = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayoffSpec {
    times: Vec<f64>,
    expr: Expr,
    lipschitz: f64,
    sup_bound: Option<f64>,
}

impl PayoffSpec {
    /// Lipschitz and sup bounds are derived from the expression over the
    /// whole space (the Lipschitz bound is infinite for e.g. `sq(x1)`).
    pub fn new(times: Vec<f64>, expr: Expr) -> Result<Self> {
        validate_times(&times)?;
        if *times.last().unwrap() != 1.0 {
            return Err(Error::InvalidPayoff("last monitoring time must equal 1".into()));
        }
        if expr.arity() > times.len() {
            return Err(Error::InvalidPayoff(format!(
                "expression uses x{} but only {} monitoring times are given",
                expr.arity(),
                times.len()
            )));
        }
        let range = expr.range_on(f64::INFINITY);
        let sup_bound = range.is_bounded().then(|| range.lo.abs().max(range.hi.abs()));
        let lipschitz = expr.lipschitz_on(f64::INFINITY);
        Ok(Self {
            times,
            expr,
            lipschitz,
            sup_bound,
        })
    }

    /// Terminal payoff `φ(B_1)`.
    pub fn terminal(expr: Expr) -> Result<Self> {
        Self::new(vec![1.0], expr)
    }

    pub fn parse(src: &str, times: Vec<f64>) -> Result<Self> {
        Self::new(times, Expr::parse(src)?)
    }

    /// Overrides the declared Lipschitz bound.
    pub fn with_lipschitz(mut self, lipschitz: f64) -> Result<Self> {
        if !(lipschitz >= 0.0) {
            return Err(Error::InvalidPayoff("Lipschitz bound must be ≥ 0".into()));
        }
        self.lipschitz = lipschitz;
        Ok(self)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn n_monitoring(&self) -> usize {
        self.times.len()
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn sup_bound(&self) -> Option<f64> {
        self.sup_bound
    }

    /// True when the payoff is non-negative everywhere.
    pub fn is_nonnegative(&self) -> bool {
        self.expr.range_on(f64::INFINITY).lo >= 0.0
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.expr.eval(x)
    }

    /// `|ξ|` on the same monitoring times.
    pub fn abs(&self) -> PayoffSpec {
        Self::new(self.times.clone(), Expr::Abs(Box::new(self.expr.clone()))).unwrap()
    }

    /// `ξ₁ − ξ₂`; both must share monitoring times.
    pub fn difference(&self, other: &PayoffSpec) -> Result<PayoffSpec> {
        if self.times != other.times {
            return Err(Error::InvalidPayoff("monitoring times differ".into()));
        }
        Self::new(
            self.times.clone(),
            Expr::Sub(Box::new(self.expr.clone()), Box::new(other.expr.clone())),
        )
    }

    /// `c · ξ`.
    pub fn scaled(&self, c: f64) -> PayoffSpec {
        Self::new(
            self.times.clone(),
            Expr::Mul(Box::new(Expr::Const(c)), Box::new(self.expr.clone())),
        )
        .unwrap()
    }

    /// `−ξ`.
    pub fn negated(&self) -> PayoffSpec {
        Self::new(self.times.clone(), Expr::Neg(Box::new(self.expr.clone()))).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_builtins() {
        let e = Expr::parse("call(x1, 0)").unwrap();
        assert_eq!(e.eval(&[1.5]), 1.5);
        assert_eq!(e.eval(&[-1.5]), 0.0);
        let e = Expr::parse("min(abs(x1), 1)").unwrap();
        assert_eq!(e.eval(&[-0.5]), 0.5);
        assert_eq!(e.eval(&[3.0]), 1.0);
        let e = Expr::parse("sq(x2 - x1) + 2 * x1 - const(-1.5e0)").unwrap();
        assert_eq!(e.eval(&[1.0, 3.0]), 4.0 + 2.0 + 1.5);
        assert_eq!(Expr::parse("-x1").unwrap().eval(&[2.0]), -2.0);
        assert_eq!(Expr::parse("neg(sq(x1))").unwrap().eval(&[3.0]), -9.0);
        assert_eq!(Expr::parse("clamp(x1, -1, 1)").unwrap().eval(&[3.0]), 1.0);
        assert_eq!(Expr::parse("pow(x1, 3)").unwrap().eval(&[2.0]), 8.0);
        assert_eq!(Expr::parse("put(x1, 1)").unwrap().eval(&[0.25]), 0.75);
    }

    #[test]
    fn parse_errors_carry_position() {
        assert!(matches!(Expr::parse("x4"), Err(Error::Parse { pos: 0, .. })));
        assert!(matches!(Expr::parse("foo(x1)"), Err(Error::Parse { .. })));
        assert!(matches!(Expr::parse("x1 +"), Err(Error::Parse { .. })));
        assert!(matches!(Expr::parse("x1 x2"), Err(Error::Parse { pos: 3, .. })));
        assert!(Expr::parse("pow(x1, 1.5)").is_err());
    }

    #[test]
    fn bounds_from_tree() {
        let p = PayoffSpec::parse("min(abs(x1), 1)", vec![1.0]).unwrap();
        assert_eq!(p.sup_bound(), Some(1.0));
        assert_eq!(p.lipschitz(), 1.0);
        assert!(p.is_nonnegative());
        let p = PayoffSpec::parse("sq(x1)", vec![1.0]).unwrap();
        assert_eq!(p.sup_bound(), None);
        assert!(p.lipschitz().is_infinite());
        assert_eq!(p.expr().lipschitz_on(8.0), 16.0);
        let p = PayoffSpec::parse("sq(x2 - x1)", vec![0.5, 1.0]).unwrap();
        assert_eq!(p.expr().lipschitz_on(1.0), 8.0);
        let p = PayoffSpec::parse("const(3)", vec![1.0]).unwrap();
        assert_eq!(p.lipschitz(), 0.0);
        assert_eq!(p.sup_bound(), Some(3.0));
    }

    #[test]
    fn validates_times() {
        let e = Expr::parse("x1").unwrap();
        assert!(PayoffSpec::new(vec![0.5], e.clone()).is_err());
        assert!(PayoffSpec::new(vec![0.5, 0.5, 1.0], e.clone()).is_err());
        assert!(matches!(
            PayoffSpec::new(vec![0.25, 0.5, 0.75, 1.0], e.clone()),
            Err(Error::TooManyMonitoringTimes(4))
        ));
        assert!(PayoffSpec::new(vec![1.0], Expr::parse("x2").unwrap()).is_err());
        assert!(PayoffSpec::new(vec![0.5, 1.0], e).is_ok());
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0usize..2).prop_map(Expr::Var),
            (-5.0f64..5.0).prop_map(Expr::Const),
        ];
        leaf.prop_recursive(4, 24, 2, |inner| {
            prop_oneof![
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Add(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Sub(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Mul(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Min(Box::new(a), Box::new(b))),
                inner.clone().prop_map(|a| Expr::Abs(Box::new(a))),
                inner.clone().prop_map(|a| Expr::Sq(Box::new(a))),
                inner.clone().prop_map(|a| Expr::Neg(Box::new(a))),
                (inner.clone(), -2.0f64..2.0).prop_map(|(a, k)| Expr::Call(Box::new(a), k)),
                (inner, -2.0f64..0.0).prop_map(|(a, lo)| Expr::Clamp(Box::new(a), lo, lo + 1.0)),
            ]
        })
    }

    proptest! {
        #[test]
        fn display_round_trips(e in arb_expr()) {
            prop_assert_eq!(Expr::parse(&e.to_string()).unwrap(), e);
        }

        #[test]
        fn analysis_bounds_hold(e in arb_expr(), x in prop::array::uniform2(-2.0f64..2.0), y in prop::array::uniform2(-2.0f64..2.0)) {
            let range = e.range_on(2.0);
            let (fx, fy) = (e.eval(&x), e.eval(&y));
            let slack = 1e-9 * (1.0 + fx.abs().max(fy.abs()));
            prop_assert!(fx >= range.lo - slack && fx <= range.hi + slack);
            let dist = (x[0] - y[0]).abs().max((x[1] - y[1]).abs());
            prop_assert!((fx - fy).abs() <= e.lipschitz_on(2.0) * dist + slack);
        }
    }
}
