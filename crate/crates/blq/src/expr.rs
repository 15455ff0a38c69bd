//! Scalar expressions in the variables `s` (time) and `w` (current Brownian
//! value), parsed from strings by a small recursive-descent parser.
//!
//! Grammar (documented in the README):
//!
//! ```text
//! expr    := term  (("+" | "-") term)*
//! term    := factor (("*" | "/") factor)*
//! factor  := "-" factor | power
//! power   := primary ("^" factor)?        // right-associative, binds tighter than unary minus
//! primary := number | "s" | "w" | "(" expr ")"
//! ```
//!
//! Division checks the denominator against 1e-12 at evaluation time and
//! reports a domain error instead of producing infinities.

use crate::error::{Error, Result};

const DENOM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Time,
    Brownian,
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn parse(input: &str) -> Result<Expr> {
        let mut p = Parser::new(input);
        let e = p.expr()?;
        p.skip_ws();
        if p.pos < p.chars.len() {
            return Err(Error::Parse {
                position: p.pos,
                message: format!("unexpected character '{}'", p.chars[p.pos]),
            });
        }
        Ok(e)
    }

    /// Evaluate at time `s` and Brownian value `w`.
    pub fn eval(&self, s: f64, w: f64) -> Result<f64> {
        Ok(match self {
            Expr::Const(c) => *c,
            Expr::Time => s,
            Expr::Brownian => w,
            Expr::Neg(e) => -e.eval(s, w)?,
            Expr::Add(a, b) => a.eval(s, w)? + b.eval(s, w)?,
            Expr::Sub(a, b) => a.eval(s, w)? - b.eval(s, w)?,
            Expr::Mul(a, b) => a.eval(s, w)? * b.eval(s, w)?,
            Expr::Div(a, b) => {
                let den = b.eval(s, w)?;
                if den.abs() < DENOM_TOL {
                    return Err(Error::Domain { s, w });
                }
                a.eval(s, w)? / den
            }
            Expr::Pow(a, b) => {
                let base = a.eval(s, w)?;
                let exp = b.eval(s, w)?;
                if exp.fract() == 0.0 && exp.abs() <= i32::MAX as f64 {
                    base.powi(exp as i32)
                } else {
                    base.powf(exp)
                }
            }
        })
    }

    pub fn depends_on_w(&self) -> bool {
        match self {
            Expr::Const(_) | Expr::Time => false,
            Expr::Brownian => true,
            Expr::Neg(e) => e.depends_on_w(),
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Pow(a, b) => a.depends_on_w() || b.depends_on_w(),
        }
    }

    pub fn depends_on_s(&self) -> bool {
        match self {
            Expr::Const(_) | Expr::Brownian => false,
            Expr::Time => true,
            Expr::Neg(e) => e.depends_on_s(),
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Pow(a, b) => a.depends_on_s() || b.depends_on_s(),
        }
    }

    pub fn is_constant(&self) -> bool {
        !self.depends_on_w() && !self.depends_on_s()
    }
}

struct Parser {
    chars: Vec<char>,
    pos: usize,
}

impl Parser {
    fn new(input: &str) -> Self {
        Parser {
            chars: input.chars().collect(),
            pos: 0,
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.chars.len() && self.chars[self.pos].is_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.chars.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek();
        if c.is_some() {
            self.pos += 1;
        }
        c
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        while let Some(op) = self.peek() {
            match op {
                '+' => {
                    self.bump();
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                '-' => {
                    self.bump();
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.factor()?;
        while let Some(op) = self.peek() {
            match op {
                '*' => {
                    self.bump();
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.factor()?));
                }
                '/' => {
                    self.bump();
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.factor()?));
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<Expr> {
        if self.peek() == Some('-') {
            self.bump();
            return Ok(Expr::Neg(Box::new(self.factor()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.primary()?;
        if self.peek() == Some('^') {
            self.bump();
            let exp = self.factor()?;
            return Ok(Expr::Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr> {
        match self.peek() {
            Some('(') => {
                self.bump();
                let inner = self.expr()?;
                if self.peek() != Some(')') {
                    return Err(Error::Parse {
                        position: self.pos,
                        message: "expected ')'".into(),
                    });
                }
                self.bump();
                Ok(inner)
            }
            Some('s') => {
                self.bump();
                Ok(Expr::Time)
            }
            Some('w') => {
                self.bump();
                Ok(Expr::Brownian)
            }
            Some(c) if c.is_ascii_digit() || c == '.' => self.number(),
            Some(c) => Err(Error::Parse {
                position: self.pos,
                message: format!("unexpected character '{c}'"),
            }),
            None => Err(Error::Parse {
                position: self.pos,
                message: "unexpected end of input".into(),
            }),
        }
    }

    fn number(&mut self) -> Result<Expr> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.chars.len()
            && (self.chars[self.pos].is_ascii_digit() || self.chars[self.pos] == '.')
        {
            self.pos += 1;
        }
        // Optional exponent: 1e-3, 2.5E4.
        if self.pos < self.chars.len()
            && (self.chars[self.pos] == 'e' || self.chars[self.pos] == 'E')
        {
            let mut j = self.pos + 1;
            if j < self.chars.len() && (self.chars[j] == '+' || self.chars[j] == '-') {
                j += 1;
            }
            if j < self.chars.len() && self.chars[j].is_ascii_digit() {
                self.pos = j;
                while self.pos < self.chars.len() && self.chars[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            }
        }
        let text: String = self.chars[start..self.pos].iter().collect();
        text.parse::<f64>()
            .map(Expr::Const)
            .map_err(|_| Error::Parse {
                position: start,
                message: format!("invalid number '{text}'"),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn eval(input: &str, s: f64, w: f64) -> f64 {
        Expr::parse(input).unwrap().eval(s, w).unwrap()
    }

    #[test]
    fn constants_and_variables() {
        assert_eq!(eval("2", 0.3, 1.7), 2.0);
        assert_eq!(eval("s", 0.3, 1.7), 0.3);
        assert_eq!(eval("w", 0.3, 1.7), 1.7);
        assert_eq!(eval("1.5e-2", 0.0, 0.0), 0.015);
    }

    #[test]
    fn rational_example_coefficients() {
        // 1/(1+w^2) at w=0 and the N=R weight (2+w^2)/(1+w^2) at w=1.
        assert_eq!(eval("1/(1+w^2)", 0.3, 0.0), 1.0);
        assert_eq!(eval("(2+w^2)/(1+w^2)", 0.0, 1.0), 1.5);
    }

    #[test]
    fn precedence_and_unary_minus() {
        assert_eq!(eval("1+2*3", 0.0, 0.0), 7.0);
        assert_eq!(eval("-2^2", 0.0, 0.0), -4.0);
        assert_eq!(eval("(1+2)*3", 0.0, 0.0), 9.0);
        assert_eq!(eval("2^3^2", 0.0, 0.0), 512.0); // right-associative
        assert_eq!(eval("6/2/3", 0.0, 0.0), 1.0); // left-associative
    }

    #[test]
    fn division_by_zero_is_domain_error() {
        let e = Expr::parse("1/w").unwrap();
        assert!(matches!(e.eval(0.0, 0.0), Err(Error::Domain { .. })));
        assert!(e.eval(0.0, 1e-3).is_ok());
    }

    #[test]
    fn malformed_inputs_are_parse_errors() {
        for bad in ["", "1+", "x", "(1", "1..2", "2**3"] {
            assert!(
                Expr::parse(bad).is_err(),
                "expected parse error for {bad:?}"
            );
        }
    }

    #[test]
    fn dependency_detection() {
        assert!(!Expr::parse("3*s+1").unwrap().depends_on_w());
        assert!(Expr::parse("1/(1+w^2)").unwrap().depends_on_w());
        assert!(Expr::parse("2").unwrap().is_constant());
    }

    proptest! {
        #[test]
        fn evaluation_is_pure(a in -1e3f64..1e3, b in -1e3f64..1e3, s in 0.0f64..2.0, w in -5.0f64..5.0) {
            let text = format!("({a})+({b})*w - s*({a})");
            let e = Expr::parse(&text).unwrap();
            let v1 = e.eval(s, w).unwrap();
            let v2 = e.eval(s, w).unwrap();
            prop_assert_eq!(v1, v2);
            prop_assert!((v1 - (a + b * w - s * a)).abs() <= 1e-9 * (1.0 + v1.abs()));
        }
    }
}
