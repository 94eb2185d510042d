//! Arithmetic expressions used by problem documents.
//!
//! Grammar (whitespace is ignored):
//!
//! ```text
//! expr   := term (('+' | '-') term)*          left-associative
//! term   := unary (('*' | '/') unary)*        left-associative
//! unary  := ('-' | '+') unary | power
//! power  := atom ('^' unary)?                 right-associative, binds tighter than unary minus
//! atom   := number | name | name '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! Numbers follow the usual decimal/exponent syntax. Names are either
//! variables supplied by the caller (`x1`, `p1`, `th1`, ...) or the constants
//! `pi`, `e`, `inf`. Functions: `exp log tanh sqrt abs sin cos sign` (one
//! argument) and `min max pow` (two arguments). Evaluation uses IEEE `f64`
//! semantics throughout, so `-x^2` is `-(x^2)` and `2^3^2` is `2^9`.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
enum Bin {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Min,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Una {
    Neg,
    Exp,
    Log,
    Tanh,
    Sqrt,
    Abs,
    Sin,
    Cos,
    Sign,
}

#[derive(Clone, Debug, PartialEq)]
enum Node {
    Num(f64),
    Var(usize),
    Unary(Una, Box<Node>),
    Binary(Bin, Box<Node>, Box<Node>),
}

/// A parsed expression over a fixed list of variable names.
#[derive(Clone, PartialEq)]
pub struct Expr {
    root: Node,
    source: String,
    arity: usize,
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({:?})", self.source)
    }
}

impl Expr {
    /// Parse `src`; variable `vars[i]` is bound to slot `i` at evaluation.
    pub fn parse(src: &str, vars: &[&str]) -> Result<Self> {
        let mut p = Parser {
            src,
            bytes: src.as_bytes(),
            pos: 0,
            vars,
        };
        let root = p.expr()?;
        p.skip_ws();
        if p.pos != p.bytes.len() {
            return Err(p.error("unexpected trailing input"));
        }
        Ok(Self {
            root,
            source: src.to_string(),
            arity: vars.len(),
        })
    }

    pub fn constant(c: f64) -> Self {
        Self {
            root: Node::Num(c),
            source: format!("{c}"),
            arity: 0,
        }
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Evaluate with `vals[i]` bound to the i-th variable.
    pub fn eval(&self, vals: &[f64]) -> f64 {
        debug_assert!(vals.len() >= self.arity);
        eval(&self.root, vals)
    }

    /// True if the expression is a literal zero.
    pub fn is_zero(&self) -> bool {
        matches!(self.root, Node::Num(c) if c == 0.0)
    }

    /// True if variable slot `i` occurs in the expression.
    pub fn uses(&self, i: usize) -> bool {
        fn walk(n: &Node, i: usize) -> bool {
            match n {
                Node::Num(_) => false,
                Node::Var(j) => *j == i,
                Node::Unary(_, a) => walk(a, i),
                Node::Binary(_, a, b) => walk(a, i) || walk(b, i),
            }
        }
        walk(&self.root, i)
    }
}

fn eval(n: &Node, v: &[f64]) -> f64 {
    match n {
        Node::Num(c) => *c,
        Node::Var(i) => v[*i],
        Node::Unary(op, a) => {
            let a = eval(a, v);
            match op {
                Una::Neg => -a,
                Una::Exp => a.exp(),
                Una::Log => a.ln(),
                Una::Tanh => a.tanh(),
                Una::Sqrt => a.sqrt(),
                Una::Abs => a.abs(),
                Una::Sin => a.sin(),
                Una::Cos => a.cos(),
                Una::Sign => {
                    if a > 0.0 {
                        1.0
                    } else if a < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }
            }
        }
        Node::Binary(op, a, b) => {
            let (a, b) = (eval(a, v), eval(b, v));
            match op {
                Bin::Add => a + b,
                Bin::Sub => a - b,
                Bin::Mul => a * b,
                Bin::Div => a / b,
                Bin::Pow => a.powf(b),
                Bin::Min => a.min(b),
                Bin::Max => a.max(b),
            }
        }
    }
}

struct Parser<'a> {
    src: &'a str,
    bytes: &'a [u8],
    pos: usize,
    vars: &'a [&'a str],
}

impl Parser<'_> {
    fn error(&self, msg: &str) -> Error {
        Error::Parse {
            pos: self.pos,
            msg: msg.to_string(),
            source_text: self.src.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.bytes.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Some(b'+') => Bin::Add,
                Some(b'-') => Bin::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Node::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(b'*') => Bin::Mul,
                Some(b'/') => Bin::Div,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Node::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Node> {
        if self.eat(b'-') {
            let a = self.unary()?;
            return Ok(Node::Unary(Una::Neg, Box::new(a)));
        }
        if self.eat(b'+') {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.atom()?;
        if self.eat(b'^') {
            let exp = self.unary()?;
            return Ok(Node::Binary(Bin::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node> {
        match self.peek() {
            None => Err(self.error("unexpected end of input")),
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.error("expected `)`"));
                }
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.name(),
            Some(_) => Err(self.error("unexpected character")),
        }
    }

    fn number(&mut self) -> Result<Node> {
        let start = self.pos;
        let b = self.bytes;
        while self.pos < b.len() && (b[self.pos].is_ascii_digit() || b[self.pos] == b'.') {
            self.pos += 1;
        }
        if self.pos < b.len() && (b[self.pos] == b'e' || b[self.pos] == b'E') {
            let mut k = self.pos + 1;
            if k < b.len() && (b[k] == b'+' || b[k] == b'-') {
                k += 1;
            }
            if k < b.len() && b[k].is_ascii_digit() {
                while k < b.len() && b[k].is_ascii_digit() {
                    k += 1;
                }
                self.pos = k;
            }
        }
        let text = &self.src[start..self.pos];
        text.parse::<f64>()
            .map(Node::Num)
            .map_err(|_| Error::Parse {
                pos: start,
                msg: format!("malformed number `{text}`"),
                source_text: self.src.to_string(),
            })
    }

    fn name(&mut self) -> Result<Node> {
        let start = self.pos;
        let b = self.bytes;
        while self.pos < b.len() && (b[self.pos].is_ascii_alphanumeric() || b[self.pos] == b'_') {
            self.pos += 1;
        }
        let name = &self.src[start..self.pos];
        if self.peek() == Some(b'(') {
            self.pos += 1;
            let mut args = vec![self.expr()?];
            while self.eat(b',') {
                args.push(self.expr()?);
            }
            if !self.eat(b')') {
                return Err(self.error("expected `)` after function arguments"));
            }
            return self.call(name, start, args);
        }
        if let Some(i) = self.vars.iter().position(|v| *v == name) {
            return Ok(Node::Var(i));
        }
        match name {
            "pi" => Ok(Node::Num(std::f64::consts::PI)),
            "e" => Ok(Node::Num(std::f64::consts::E)),
            "inf" => Ok(Node::Num(f64::INFINITY)),
            _ => Err(Error::Parse {
                pos: start,
                msg: format!("unknown name `{name}` (variables: {})", self.vars.join(", ")),
                source_text: self.src.to_string(),
            }),
        }
    }

    fn call(&self, name: &str, pos: usize, mut args: Vec<Node>) -> Result<Node> {
        let unary = match name {
            "exp" => Some(Una::Exp),
            "log" => Some(Una::Log),
            "tanh" => Some(Una::Tanh),
            "sqrt" => Some(Una::Sqrt),
            "abs" => Some(Una::Abs),
            "sin" => Some(Una::Sin),
            "cos" => Some(Una::Cos),
            "sign" => Some(Una::Sign),
            _ => None,
        };
        let binary = match name {
            "min" => Some(Bin::Min),
            "max" => Some(Bin::Max),
            "pow" => Some(Bin::Pow),
            _ => None,
        };
        let arity_err = |n: usize| Error::Parse {
            pos,
            msg: format!("`{name}` takes {n} argument(s), got {}", args.len()),
            source_text: self.src.to_string(),
        };
        if let Some(op) = unary {
            if args.len() != 1 {
                return Err(arity_err(1));
            }
            return Ok(Node::Unary(op, Box::new(args.remove(0))));
        }
        if let Some(op) = binary {
            if args.len() != 2 {
                return Err(arity_err(2));
            }
            let b = args.pop().unwrap();
            let a = args.pop().unwrap();
            return Ok(Node::Binary(op, Box::new(a), Box::new(b)));
        }
        Err(Error::Parse {
            pos,
            msg: format!("unknown function `{name}`"),
            source_text: self.src.to_string(),
        })
    }
}

/// Variable names `prefix1..prefixq`.
pub fn indexed_names(prefix: &str, q: usize) -> Vec<String> {
    (1..=q).map(|i| format!("{prefix}{i}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(s: &str, vars: &[&str], vals: &[f64]) -> f64 {
        Expr::parse(s, vars).unwrap().eval(vals)
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(ev("1 - 2 - 3", &[], &[]), -4.0);
        assert_eq!(ev("8 / 4 / 2", &[], &[]), 1.0);
        assert_eq!(ev("2 + 3 * 4", &[], &[]), 14.0);
        assert_eq!(ev("-2^2", &[], &[]), -4.0);
        assert_eq!(ev("2^3^2", &[], &[]), 512.0);
        assert_eq!(ev("2^-1", &[], &[]), 0.5);
        assert_eq!(ev("(1 + 2) * 3", &[], &[]), 9.0);
    }

    #[test]
    fn functions_and_variables() {
        let v = ["x1", "x2"];
        assert_eq!(ev("max(x1, x2) - min(x1, x2)", &v, &[3.0, -1.0]), 4.0);
        assert_eq!(ev("pow(x1, 2)", &v, &[3.0, 0.0]), 9.0);
        assert_eq!(ev("sign(x1)*sqrt(abs(x1))", &v, &[-4.0, 0.0]), -2.0);
        assert!((ev("log(1 + 0.5*x1^2)", &v, &[2.0, 0.0]) - 3f64.ln()).abs() < 1e-15);
        assert_eq!(ev("1.5e2 + 2E-1", &[], &[]), 150.2);
        assert_eq!(ev("inf", &[], &[]), f64::INFINITY);
    }

    #[test]
    fn errors_are_reported() {
        assert!(Expr::parse("1 +", &[]).is_err());
        assert!(Expr::parse("y", &["x1"]).is_err());
        assert!(Expr::parse("exp(1, 2)", &[]).is_err());
        assert!(Expr::parse("foo(1)", &[]).is_err());
        assert!(Expr::parse("(1", &[]).is_err());
        assert!(Expr::parse("1 2", &[]).is_err());
        assert!(Expr::parse("1.2.3", &[]).is_err());
    }

    #[test]
    fn zero_literal_and_usage() {
        assert!(Expr::parse("0", &[]).unwrap().is_zero());
        let e = Expr::parse("x2 + 1", &["x1", "x2"]).unwrap();
        assert!(e.uses(1) && !e.uses(0));
    }
}
