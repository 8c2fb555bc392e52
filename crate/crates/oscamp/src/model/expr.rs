//! Tiny closed expression grammar for boundary-source mode coefficients.
//!
//! Expressions are functions of `t` and `x1` built from numbers, `+ - * /`,
//! unary minus, integer powers `^`, parentheses, and the functions `sin`,
//! `cos`, `exp` and `chi` (the C^3 temporal ramp: 0 for arg <= 0, 1 for
//! arg >= RAMP_LEN, a septic smoothstep in between).  Nothing else parses;
//! the grammar is deliberately closed so configs stay auditable.

use crate::Error;

/// Length of the smooth turn-on ramp `chi`.
pub const RAMP_LEN: f64 = 0.1;

/// C^3 ramp: 0 for s <= 0, 1 for s >= RAMP_LEN, septic smoothstep between.
pub fn chi(s: f64) -> f64 {
    let x = s / RAMP_LEN;
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        // 35x^4 - 84x^5 + 70x^6 - 20x^7: C^3 at both ends.
        let x4 = x * x * x * x;
        x4 * (35.0 + x * (-84.0 + x * (70.0 - 20.0 * x)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    T,
    X1,
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, i32),
    Neg(Box<Expr>),
    Sin(Box<Expr>),
    Cos(Box<Expr>),
    Exp(Box<Expr>),
    Chi(Box<Expr>),
}

impl Expr {
    pub fn parse(src: &str) -> crate::Result<Expr> {
        let mut p = Parser {
            tokens: lex(src)?,
            pos: 0,
        };
        let e = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(Error::Expr(format!(
                "trailing input after expression in {src:?}"
            )));
        }
        Ok(e)
    }

    pub fn eval(&self, t: f64, x1: f64) -> f64 {
        match self {
            Expr::Num(v) => *v,
            Expr::T => t,
            Expr::X1 => x1,
            Expr::Add(a, b) => a.eval(t, x1) + b.eval(t, x1),
            Expr::Sub(a, b) => a.eval(t, x1) - b.eval(t, x1),
            Expr::Mul(a, b) => a.eval(t, x1) * b.eval(t, x1),
            Expr::Div(a, b) => a.eval(t, x1) / b.eval(t, x1),
            Expr::Pow(a, n) => a.eval(t, x1).powi(*n),
            Expr::Neg(a) => -a.eval(t, x1),
            Expr::Sin(a) => a.eval(t, x1).sin(),
            Expr::Cos(a) => a.eval(t, x1).cos(),
            Expr::Exp(a) => a.eval(t, x1).exp(),
            Expr::Chi(a) => chi(a.eval(t, x1)),
        }
    }
}

impl std::fmt::Display for Expr {
    /// Fully parenthesized form; `parse(format!("{e}"))` reproduces the AST.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v:?}"),
            Expr::T => write!(f, "t"),
            Expr::X1 => write!(f, "x1"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Pow(a, n) => write!(f, "({a})^{n}"),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Sin(a) => write!(f, "sin({a})"),
            Expr::Cos(a) => write!(f, "cos({a})"),
            Expr::Exp(a) => write!(f, "exp({a})"),
            Expr::Chi(a) => write!(f, "chi({a})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

fn lex(src: &str) -> crate::Result<Vec<Tok>> {
    let mut out = Vec::new();
    let bytes = src.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' => i += 1,
            '+' => {
                out.push(Tok::Plus);
                i += 1;
            }
            '-' => {
                out.push(Tok::Minus);
                i += 1;
            }
            '*' => {
                out.push(Tok::Star);
                i += 1;
            }
            '/' => {
                out.push(Tok::Slash);
                i += 1;
            }
            '^' => {
                out.push(Tok::Caret);
                i += 1;
            }
            '(' => {
                out.push(Tok::LParen);
                i += 1;
            }
            ')' => {
                out.push(Tok::RParen);
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len() {
                    let d = bytes[i] as char;
                    if d.is_ascii_digit() || d == '.' {
                        i += 1;
                    } else if (d == 'e' || d == 'E')
                        && i + 1 < bytes.len()
                        && {
                            let n = bytes[i + 1] as char;
                            n.is_ascii_digit() || n == '+' || n == '-'
                        }
                    {
                        i += 2;
                    } else {
                        break;
                    }
                }
                let text = &src[start..i];
                let v: f64 = text
                    .parse()
                    .map_err(|_| Error::Expr(format!("bad number {text:?}")))?;
                out.push(Tok::Num(v));
            }
            'a'..='z' | 'A'..='Z' | '_' => {
                let start = i;
                while i < bytes.len() {
                    let d = bytes[i] as char;
                    if d.is_ascii_alphanumeric() || d == '_' {
                        i += 1;
                    } else {
                        break;
                    }
                }
                out.push(Tok::Ident(src[start..i].to_string()));
            }
            _ => return Err(Error::Expr(format!("unexpected character {c:?} in {src:?}"))),
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.tokens.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expr(&mut self) -> crate::Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.bump();
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(Tok::Minus) => {
                    self.bump();
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> crate::Result<Expr> {
        let mut lhs = self.power()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.bump();
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.power()?));
                }
                Some(Tok::Slash) => {
                    self.bump();
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.power()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn power(&mut self) -> crate::Result<Expr> {
        let base = self.atom()?;
        if let Some(Tok::Caret) = self.peek() {
            self.bump();
            // Exponent: optionally signed integer literal.
            let neg = matches!(self.peek(), Some(Tok::Minus)) && {
                self.bump();
                true
            };
            match self.bump() {
                Some(Tok::Num(v)) if v.fract() == 0.0 => {
                    let n = v as i32;
                    Ok(Expr::Pow(Box::new(base), if neg { -n } else { n }))
                }
                other => Err(Error::Expr(format!(
                    "exponent must be an integer literal, got {other:?}"
                ))),
            }
        } else {
            Ok(base)
        }
    }

    fn atom(&mut self) -> crate::Result<Expr> {
        match self.bump() {
            Some(Tok::Num(v)) => Ok(Expr::Num(v)),
            Some(Tok::Minus) => Ok(Expr::Neg(Box::new(self.atom()?))),
            Some(Tok::LParen) => {
                let e = self.expr()?;
                match self.bump() {
                    Some(Tok::RParen) => Ok(e),
                    _ => Err(Error::Expr("missing closing parenthesis".into())),
                }
            }
            Some(Tok::Ident(name)) => match name.as_str() {
                "t" => Ok(Expr::T),
                "x1" => Ok(Expr::X1),
                "pi" => Ok(Expr::Num(std::f64::consts::PI)),
                "sin" | "cos" | "exp" | "chi" => {
                    match self.bump() {
                        Some(Tok::LParen) => {}
                        _ => {
                            return Err(Error::Expr(format!("{name} must be called as {name}(...)")))
                        }
                    }
                    let arg = self.expr()?;
                    match self.bump() {
                        Some(Tok::RParen) => {}
                        _ => return Err(Error::Expr("missing closing parenthesis".into())),
                    }
                    let b = Box::new(arg);
                    Ok(match name.as_str() {
                        "sin" => Expr::Sin(b),
                        "cos" => Expr::Cos(b),
                        "exp" => Expr::Exp(b),
                        _ => Expr::Chi(b),
                    })
                }
                _ => Err(Error::Expr(format!(
                    "unknown identifier {name:?} (allowed: t, x1, pi, sin, cos, exp, chi)"
                ))),
            },
            other => Err(Error::Expr(format!("unexpected token {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_evaluates() {
        let e = Expr::parse("chi(t)*sin(2*x1) + 0.5*t^2 - exp(-t)").unwrap();
        let t = 0.3f64;
        let x1 = 0.7f64;
        let want = chi(t) * (2.0 * x1).sin() + 0.5 * t * t - (-t).exp();
        assert!((e.eval(t, x1) - want).abs() < 1e-15);
    }

    #[test]
    fn ramp_is_monotone_and_clamped() {
        assert_eq!(chi(-1.0), 0.0);
        assert_eq!(chi(0.0), 0.0);
        assert_eq!(chi(RAMP_LEN), 1.0);
        assert_eq!(chi(5.0), 1.0);
        let mut prev = 0.0;
        for i in 0..=100 {
            let v = chi(RAMP_LEN * i as f64 / 100.0);
            assert!(v >= prev - 1e-15);
            prev = v;
        }
    }

    #[test]
    fn ramp_third_derivative_vanishes_at_ends() {
        // C^3 continuity with chi'''(0) = chi'''(RAMP_LEN) = 0: the central
        // third difference at each joint shrinks linearly with the step.
        let d3 = |s: f64, h: f64| {
            (chi(s + 1.5 * h) - 3.0 * chi(s + 0.5 * h) + 3.0 * chi(s - 0.5 * h)
                - chi(s - 1.5 * h))
                / h.powi(3)
        };
        for s in [0.0, RAMP_LEN] {
            let coarse = d3(s, 1e-3).abs();
            let fine = d3(s, 1e-4).abs();
            assert!(
                fine < coarse / 5.0 + 1e-9,
                "third difference at {s} does not vanish: {coarse} -> {fine}"
            );
        }
    }

    #[test]
    fn rejects_unknown_identifiers() {
        assert!(Expr::parse("tan(t)").is_err());
        assert!(Expr::parse("y + 1").is_err());
        assert!(Expr::parse("sin t").is_err());
    }
}
