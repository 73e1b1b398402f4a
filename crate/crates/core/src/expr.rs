//! Arithmetic expressions in the single variable `u`.
//!
//! Velocities v(u;x) and test functions phi(u) enter through config files as
//! text, parsed here by recursive descent into a small AST. The grammar:
//!
//! ```text
//! expr    := term (('+'|'-') term)*
//! term    := factor (('*'|'/') factor)*
//! factor  := unary
//! unary   := '-' unary | power
//! power   := primary ('^' factor)?
//! primary := NUMBER | 'u' | FUNC '(' expr ')' | '(' expr ')'
//! ```
//!
//! `^` binds tighter than unary minus (`-u^2` is `-(u^2)`) and is
//! right-associative (`2^3^2` is `2^(3^2)`). There is no unary plus.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Tanh,
    Sqrt,
    Abs,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        match name {
            "sin" => Some(Func::Sin),
            "cos" => Some(Func::Cos),
            "exp" => Some(Func::Exp),
            "tanh" => Some(Func::Tanh),
            "sqrt" => Some(Func::Sqrt),
            "abs" => Some(Func::Abs),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Tanh => "tanh",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Func::Sin => x.sin(),
            Func::Cos => x.cos(),
            Func::Exp => x.exp(),
            Func::Tanh => x.tanh(),
            Func::Sqrt => x.sqrt(),
            Func::Abs => x.abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Number(f64),
    Var,
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
}

impl Node {
    fn eval(&self, u: f64) -> f64 {
        match self {
            Node::Number(x) => *x,
            Node::Var => u,
            Node::Neg(a) => -a.eval(u),
            Node::Add(a, b) => a.eval(u) + b.eval(u),
            Node::Sub(a, b) => a.eval(u) - b.eval(u),
            Node::Mul(a, b) => a.eval(u) * b.eval(u),
            Node::Div(a, b) => a.eval(u) / b.eval(u),
            Node::Pow(a, b) => a.eval(u).powf(b.eval(u)),
            Node::Call(f, a) => f.apply(a.eval(u)),
        }
    }

    fn pretty(&self, out: &mut String) {
        match self {
            Node::Number(x) => {
                // Shortest round-trip float form; never contains '+'.
                out.push_str(&format!("{x}"));
            }
            Node::Var => out.push('u'),
            Node::Neg(a) => {
                out.push_str("(-");
                a.pretty(out);
                out.push(')');
            }
            Node::Add(a, b) => Self::binary(out, a, " + ", b),
            Node::Sub(a, b) => Self::binary(out, a, " - ", b),
            Node::Mul(a, b) => Self::binary(out, a, " * ", b),
            Node::Div(a, b) => Self::binary(out, a, " / ", b),
            Node::Pow(a, b) => Self::binary(out, a, " ^ ", b),
            Node::Call(f, a) => {
                out.push_str(f.name());
                out.push('(');
                a.pretty(out);
                out.push(')');
            }
        }
    }

    fn binary(out: &mut String, a: &Node, op: &str, b: &Node) {
        out.push('(');
        a.pretty(out);
        out.push_str(op);
        b.pretty(out);
        out.push(')');
    }
}

/// A parsed expression in the variable `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionAst {
    root: Node,
    source: String,
}

impl ExpressionAst {
    /// IEEE double-precision evaluation. Domain errors surface as NaN or
    /// infinity; callers that sample onto grids check finiteness there.
    pub fn eval(&self, u: f64) -> f64 {
        self.root.eval(u)
    }

    /// The original source text.
    pub fn source(&self) -> &str {
        &self.source
    }

    /// Fully parenthesized form that reparses to the same AST.
    pub fn pretty(&self) -> String {
        let mut out = String::new();
        self.root.pretty(&mut out);
        out
    }

    /// Constant expression (a plain number, possibly negated).
    pub fn constant(value: f64) -> ExpressionAst {
        let root = if value < 0.0 {
            Node::Neg(Box::new(Node::Number(-value)))
        } else {
            Node::Number(value)
        };
        let source = format!("{value}");
        ExpressionAst { root, source }
    }
}

/// Parse `src` into an [`ExpressionAst`].
pub fn parse_expression(src: &str) -> Result<ExpressionAst> {
    let mut p = Parser {
        src: src.as_bytes(),
        pos: 0,
    };
    p.skip_ws();
    let root = p.expr()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(Error::Syntax {
            offset: p.pos,
            message: format!("unexpected '{}'", p.src[p.pos] as char),
        });
    }
    Ok(ExpressionAst {
        root,
        source: src.to_string(),
    })
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<Node> {
        let mut node = self.term()?;
        loop {
            self.skip_ws();
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    self.skip_ws();
                    node = Node::Add(Box::new(node), Box::new(self.term()?));
                }
                Some(b'-') => {
                    self.pos += 1;
                    self.skip_ws();
                    node = Node::Sub(Box::new(node), Box::new(self.term()?));
                }
                _ => return Ok(node),
            }
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut node = self.factor()?;
        loop {
            self.skip_ws();
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    self.skip_ws();
                    node = Node::Mul(Box::new(node), Box::new(self.factor()?));
                }
                Some(b'/') => {
                    self.pos += 1;
                    self.skip_ws();
                    node = Node::Div(Box::new(node), Box::new(self.factor()?));
                }
                _ => return Ok(node),
            }
        }
    }

    fn factor(&mut self) -> Result<Node> {
        self.unary()
    }

    fn unary(&mut self) -> Result<Node> {
        self.skip_ws();
        if self.peek() == Some(b'-') {
            self.pos += 1;
            self.skip_ws();
            Ok(Node::Neg(Box::new(self.unary()?)))
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.primary()?;
        self.skip_ws();
        if self.peek() == Some(b'^') {
            self.pos += 1;
            self.skip_ws();
            // Exponent is a factor: right-associative, may be negated.
            let exponent = self.factor()?;
            Ok(Node::Pow(Box::new(base), Box::new(exponent)))
        } else {
            Ok(base)
        }
    }

    fn primary(&mut self) -> Result<Node> {
        self.skip_ws();
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                self.expect(b')')?;
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.identifier(),
            Some(c) => Err(Error::Syntax {
                offset: self.pos,
                message: format!("unexpected '{}'", c as char),
            }),
            None => Err(Error::Syntax {
                offset: self.pos,
                message: "unexpected end of input".to_string(),
            }),
        }
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(Error::Syntax {
                offset: self.pos,
                message: format!("expected '{}'", c as char),
            })
        }
    }

    fn number(&mut self) -> Result<Node> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.peek() == Some(b'.') {
            self.pos += 1;
            while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                self.pos += 1;
            }
        }
        if matches!(self.peek(), Some(b'e') | Some(b'E')) {
            let mark = self.pos;
            self.pos += 1;
            if matches!(self.peek(), Some(b'+') | Some(b'-')) {
                self.pos += 1;
            }
            if self.peek().is_some_and(|c| c.is_ascii_digit()) {
                while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                    self.pos += 1;
                }
            } else {
                // Not an exponent after all; 'e' belongs to what follows.
                self.pos = mark;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        text.parse::<f64>()
            .map(Node::Number)
            .map_err(|_| Error::Syntax {
                offset: start,
                message: format!("invalid number '{text}'"),
            })
    }

    fn identifier(&mut self) -> Result<Node> {
        let start = self.pos;
        while self
            .peek()
            .is_some_and(|c| c.is_ascii_alphanumeric() || c == b'_')
        {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos])
            .expect("ascii")
            .to_string();
        self.skip_ws();
        if self.peek() == Some(b'(') {
            let func = Func::from_name(&name).ok_or(Error::UnknownFunction {
                name: name.clone(),
                offset: start,
            })?;
            self.pos += 1;
            let arg = self.expr()?;
            self.expect(b')')?;
            Ok(Node::Call(func, Box::new(arg)))
        } else if name == "u" {
            Ok(Node::Var)
        } else {
            Err(Error::UnknownVariable {
                name,
                offset: start,
            })
        }
    }
}
