//! Arithmetic expressions over state–action distribution coordinates.
//!
//! Model files use these for kernel entries and cost terms that depend on the
//! population profile 𝐃.  The language is deliberately tiny:
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | atom
//! atom   := NUMBER
//!         | 'd' '(' pop ',' state ')'            state marginal Σ_u D(pop, state, u)
//!         | 'D' '(' pop ',' state ',' action ')' one joint coordinate
//!         | 'clamp01' '(' expr ')'               clamp to [0, 1]
//!         | '(' expr ')'
//! ```
//!
//! `pop`, `state`, `action` are bare tokens over `[A-Za-z0-9_.]`, which is
//! also the symbol alphabet models may use.  Expressions are parsed once,
//! bound to coordinate indices once, and evaluated many times.

use std::fmt;

use crate::error::{Error, Result};

/// Read access to a state–action distribution, implemented by
/// `kernel::StateActionDist`.
pub trait DistAccess {
    fn cell(&self, k: usize, x: usize, u: usize) -> f64;
    fn state_mass(&self, k: usize, x: usize) -> f64;
}

/// Alphabets an expression is bound against.
pub struct BindContext<'a> {
    pub pops: &'a [(String, Vec<String>, Vec<String>)], // (name, states, actions)
}

impl BindContext<'_> {
    fn pop(&self, name: &str) -> Option<usize> {
        self.pops.iter().position(|(n, _, _)| n == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Const(f64),
    StateMass { k: usize, x: usize },
    Cell { k: usize, x: usize, u: usize },
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Neg(Box<Node>),
    Clamp01(Box<Node>),
}

/// A parsed, index-bound expression.  Keeps its source text for
/// serialisation and error reporting.
#[derive(Debug, Clone)]
pub struct Expr {
    src: String,
    root: Node,
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.src)
    }
}

impl Expr {
    /// Parse `src` and resolve every coordinate reference against `ctx`.
    pub fn parse(src: &str, ctx: &BindContext) -> Result<Expr> {
        let mut p = Parser {
            src: src.as_bytes(),
            pos: 0,
            ctx,
        };
        let root = p.expr()?;
        p.skip_ws();
        if p.pos != p.src.len() {
            return Err(p.err("trailing input"));
        }
        Ok(Expr {
            src: src.to_string(),
            root,
        })
    }

    /// Constant expression (used when cost tables hold plain numbers).
    pub fn constant(v: f64) -> Expr {
        Expr {
            src: format!("{v}"),
            root: Node::Const(v),
        }
    }

    pub fn source(&self) -> &str {
        &self.src
    }

    pub fn eval(&self, dist: &dyn DistAccess) -> f64 {
        eval_node(&self.root, dist)
    }
}

fn eval_node(n: &Node, d: &dyn DistAccess) -> f64 {
    match n {
        Node::Const(v) => *v,
        Node::StateMass { k, x } => d.state_mass(*k, *x),
        Node::Cell { k, x, u } => d.cell(*k, *x, *u),
        Node::Add(a, b) => eval_node(a, d) + eval_node(b, d),
        Node::Sub(a, b) => eval_node(a, d) - eval_node(b, d),
        Node::Mul(a, b) => eval_node(a, d) * eval_node(b, d),
        Node::Div(a, b) => eval_node(a, d) / eval_node(b, d),
        Node::Neg(a) => -eval_node(a, d),
        Node::Clamp01(a) => eval_node(a, d).clamp(0.0, 1.0),
    }
}

struct Parser<'a, 'b> {
    src: &'a [u8],
    pos: usize,
    ctx: &'a BindContext<'b>,
}

fn is_token_char(c: u8) -> bool {
    c.is_ascii_alphanumeric() || c == b'_' || c == b'.'
}

impl Parser<'_, '_> {
    fn err(&self, msg: &str) -> Error {
        Error::Model(format!(
            "expression {:?}: {} at byte {}",
            String::from_utf8_lossy(self.src),
            msg,
            self.pos
        ))
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

    fn eat(&mut self, c: u8) -> Result<()> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(&format!("expected '{}'", c as char)))
        }
    }

    fn token(&mut self) -> Result<String> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && is_token_char(self.src[self.pos]) {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("expected a token"));
        }
        Ok(String::from_utf8_lossy(&self.src[start..self.pos]).into_owned())
    }

    fn expr(&mut self) -> Result<Node> {
        let mut acc = self.term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    acc = Node::Add(Box::new(acc), Box::new(self.term()?));
                }
                Some(b'-') => {
                    self.pos += 1;
                    acc = Node::Sub(Box::new(acc), Box::new(self.term()?));
                }
                _ => return Ok(acc),
            }
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut acc = self.unary()?;
        loop {
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    acc = Node::Mul(Box::new(acc), Box::new(self.unary()?));
                }
                Some(b'/') => {
                    self.pos += 1;
                    acc = Node::Div(Box::new(acc), Box::new(self.unary()?));
                }
                _ => return Ok(acc),
            }
        }
    }

    fn unary(&mut self) -> Result<Node> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Node> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.eat(b')')?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() => {
                let tok = self.token()?;
                tok.parse::<f64>()
                    .map(Node::Const)
                    .map_err(|_| self.err(&format!("bad number {tok:?}")))
            }
            Some(c) if is_token_char(c) => {
                let name = self.token()?;
                match name.as_str() {
                    "d" => {
                        self.eat(b'(')?;
                        let pop = self.token()?;
                        self.eat(b',')?;
                        let state = self.token()?;
                        self.eat(b')')?;
                        let k = self
                            .ctx
                            .pop(&pop)
                            .ok_or_else(|| self.err(&format!("unknown sub-population {pop:?}")))?;
                        let x = self.ctx.pops[k]
                            .1
                            .iter()
                            .position(|s| *s == state)
                            .ok_or_else(|| self.err(&format!("unknown state {state:?} in {pop:?}")))?;
                        Ok(Node::StateMass { k, x })
                    }
                    "D" => {
                        self.eat(b'(')?;
                        let pop = self.token()?;
                        self.eat(b',')?;
                        let state = self.token()?;
                        self.eat(b',')?;
                        let action = self.token()?;
                        self.eat(b')')?;
                        let k = self
                            .ctx
                            .pop(&pop)
                            .ok_or_else(|| self.err(&format!("unknown sub-population {pop:?}")))?;
                        let x = self.ctx.pops[k]
                            .1
                            .iter()
                            .position(|s| *s == state)
                            .ok_or_else(|| self.err(&format!("unknown state {state:?} in {pop:?}")))?;
                        let u = self.ctx.pops[k]
                            .2
                            .iter()
                            .position(|s| *s == action)
                            .ok_or_else(|| self.err(&format!("unknown action {action:?} in {pop:?}")))?;
                        Ok(Node::Cell { k, x, u })
                    }
                    "clamp01" => {
                        self.eat(b'(')?;
                        let e = self.expr()?;
                        self.eat(b')')?;
                        Ok(Node::Clamp01(Box::new(e)))
                    }
                    other => Err(self.err(&format!("unknown name {other:?}"))),
                }
            }
            _ => Err(self.err("expected an atom")),
        }
    }
}
