//! A small arithmetic expression language for spatial fields.
//!
//! Expressions are built from numeric literals, the constant `pi`, the
//! variables `x1`, `x2` (slow coordinates) and `X1`, `X2` (fast
//! coordinates), the binary operators `+ - * / ^`, unary minus and the
//! functions `sin`, `cos`, `exp`, `sqrt`.
//!
//! Precedence, tightest first: `^` (right associative), unary `-`, `* /`,
//! `+ -`. So `-2^2` is `-4` and `2^3^2` is `512`.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("syntax error at position {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unbound variable `{0}`")]
    Unbound(&'static str),
    #[error("domain error: {0}")]
    Domain(String),
}

/// One of the four coordinate variables an expression may reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    X1Slow,
    X2Slow,
    X1Fast,
    X2Fast,
}

impl Var {
    pub const ALL: [Var; 4] = [Var::X1Slow, Var::X2Slow, Var::X1Fast, Var::X2Fast];

    pub fn name(self) -> &'static str {
        match self {
            Var::X1Slow => "x1",
            Var::X2Slow => "x2",
            Var::X1Fast => "X1",
            Var::X2Fast => "X2",
        }
    }

    pub fn from_name(name: &str) -> Option<Var> {
        Var::ALL.into_iter().find(|v| v.name() == name)
    }

    fn index(self) -> usize {
        self as usize
    }

    pub fn is_slow(self) -> bool {
        matches!(self, Var::X1Slow | Var::X2Slow)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Sqrt,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        match name {
            "sin" => Some(Func::Sin),
            "cos" => Some(Func::Cos),
            "exp" => Some(Func::Exp),
            "sqrt" => Some(Func::Sqrt),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Sqrt => "sqrt",
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

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Num(f64),
    Pi,
    Var(Var),
    Neg(Box<Node>),
    Call(Func, Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
}

/// Values for the coordinate variables. Unset variables are reported as
/// unbound when an expression needs them.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Bindings {
    values: [Option<f64>; 4],
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    /// Slow and fast coordinates bound together, the common case.
    pub fn at(x: [f64; 2], fast: [f64; 2]) -> Self {
        Self {
            values: [Some(x[0]), Some(x[1]), Some(fast[0]), Some(fast[1])],
        }
    }

    pub fn slow(x: [f64; 2]) -> Self {
        Self::new().with(Var::X1Slow, x[0]).with(Var::X2Slow, x[1])
    }

    pub fn with(mut self, var: Var, value: f64) -> Self {
        self.values[var.index()] = Some(value);
        self
    }

    /// Bind by name; unknown names are rejected.
    pub fn with_name(self, name: &str, value: f64) -> Result<Self, ExprError> {
        let var = Var::from_name(name).ok_or_else(|| ExprError::Syntax {
            pos: 0,
            msg: format!("unknown variable `{name}`"),
        })?;
        Ok(self.with(var, value))
    }

    pub fn get(&self, var: Var) -> Option<f64> {
        self.values[var.index()]
    }
}

/// A parsed field expression. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldExpr {
    root: Node,
    source: String,
}

impl FieldExpr {
    pub fn parse(text: &str) -> Result<FieldExpr, ExprError> {
        if text.trim().is_empty() {
            return Err(ExprError::Syntax {
                pos: 0,
                msg: "empty expression".into(),
            });
        }
        let tokens = tokenize(text)?;
        let mut parser = Parser {
            tokens: &tokens,
            idx: 0,
            end: text.len(),
        };
        let root = parser.expr()?;
        if let Some(tok) = parser.peek() {
            return Err(ExprError::Syntax {
                pos: tok.pos,
                msg: format!("unexpected {}", tok.kind.describe()),
            });
        }
        Ok(FieldExpr {
            root,
            source: text.to_string(),
        })
    }

    /// Shorthand for a literal constant field.
    pub fn constant(value: f64) -> FieldExpr {
        FieldExpr {
            root: Node::Num(value),
            source: format!("{value:?}"),
        }
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    /// The text this expression was parsed from.
    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn evaluate(&self, bindings: &Bindings) -> Result<f64, ExprError> {
        eval_node(&self.root, bindings)
    }

    /// Central difference `(f(v+step) - f(v-step)) / (2 step)` in `var`.
    pub fn gradient_fd(&self, var: Var, bindings: &Bindings, step: f64) -> Result<f64, ExprError> {
        assert!(step > 0.0, "finite-difference step must be positive");
        let v = bindings.get(var).ok_or(ExprError::Unbound(var.name()))?;
        let fp = self.evaluate(&bindings.with(var, v + step))?;
        let fm = self.evaluate(&bindings.with(var, v - step))?;
        Ok((fp - fm) / (2.0 * step))
    }

    /// Slow gradient `(d/dx1, d/dx2)` by central differences.
    pub fn slow_gradient(&self, bindings: &Bindings, step: f64) -> Result<[f64; 2], ExprError> {
        Ok([
            self.gradient_fd(Var::X1Slow, bindings, step)?,
            self.gradient_fd(Var::X2Slow, bindings, step)?,
        ])
    }

    pub fn uses(&self, var: Var) -> bool {
        fn walk(node: &Node, var: Var) -> bool {
            match node {
                Node::Num(_) | Node::Pi => false,
                Node::Var(v) => *v == var,
                Node::Neg(inner) | Node::Call(_, inner) => walk(inner, var),
                Node::Bin(_, l, r) => walk(l, var) || walk(r, var),
            }
        }
        walk(&self.root, var)
    }

    pub fn depends_on_slow(&self) -> bool {
        self.uses(Var::X1Slow) || self.uses(Var::X2Slow)
    }

    pub fn depends_on_fast(&self) -> bool {
        self.uses(Var::X1Fast) || self.uses(Var::X2Fast)
    }
}

impl fmt::Display for FieldExpr {
    /// Fully parenthesised form; reparses to an identical tree.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_node(&self.root, f)
    }
}

fn write_node(node: &Node, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    match node {
        // {:?} on f64 prints the shortest round-tripping representation.
        Node::Num(v) => write!(f, "{v:?}"),
        Node::Pi => write!(f, "pi"),
        Node::Var(v) => write!(f, "{}", v.name()),
        Node::Neg(inner) => {
            write!(f, "(-")?;
            write_node(inner, f)?;
            write!(f, ")")
        }
        Node::Call(func, arg) => {
            write!(f, "{}(", func.name())?;
            write_node(arg, f)?;
            write!(f, ")")
        }
        Node::Bin(op, l, r) => {
            write!(f, "(")?;
            write_node(l, f)?;
            write!(f, " {} ", op.symbol())?;
            write_node(r, f)?;
            write!(f, ")")
        }
    }
}

fn eval_node(node: &Node, b: &Bindings) -> Result<f64, ExprError> {
    let value = match node {
        Node::Num(v) => *v,
        Node::Pi => std::f64::consts::PI,
        Node::Var(v) => b.get(*v).ok_or(ExprError::Unbound(v.name()))?,
        Node::Neg(inner) => -eval_node(inner, b)?,
        Node::Call(func, arg) => {
            let x = eval_node(arg, b)?;
            match func {
                Func::Sin => x.sin(),
                Func::Cos => x.cos(),
                Func::Exp => x.exp(),
                Func::Sqrt => {
                    if x < 0.0 {
                        return Err(ExprError::Domain(format!("sqrt of negative value {x}")));
                    }
                    x.sqrt()
                }
            }
        }
        Node::Bin(op, l, r) => {
            let lv = eval_node(l, b)?;
            let rv = eval_node(r, b)?;
            match op {
                BinOp::Add => lv + rv,
                BinOp::Sub => lv - rv,
                BinOp::Mul => lv * rv,
                BinOp::Div => {
                    if rv == 0.0 {
                        return Err(ExprError::Domain("division by zero".into()));
                    }
                    lv / rv
                }
                BinOp::Pow => lv.powf(rv),
            }
        }
    };
    if value.is_finite() {
        Ok(value)
    } else {
        Err(ExprError::Domain(format!("non-finite result {value}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TokKind {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
}

impl TokKind {
    fn describe(&self) -> String {
        match self {
            TokKind::Num(v) => format!("number {v}"),
            TokKind::Ident(s) => format!("identifier `{s}`"),
            TokKind::Op(c) => format!("operator `{c}`"),
            TokKind::LParen => "`(`".into(),
            TokKind::RParen => "`)`".into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: TokKind,
    pos: usize,
}

fn tokenize(text: &str) -> Result<Vec<Token>, ExprError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c.is_ascii_digit() || c == b'.' {
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            // exponent part: 1e-5, 2.5E+3
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let lit = &text[start..i];
            let value: f64 = lit.parse().map_err(|_| ExprError::Syntax {
                pos: start,
                msg: format!("malformed number `{lit}`"),
            })?;
            out.push(Token {
                kind: TokKind::Num(value),
                pos: start,
            });
        } else if c.is_ascii_alphabetic() || c == b'_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push(Token {
                kind: TokKind::Ident(text[start..i].to_string()),
                pos: start,
            });
        } else {
            let kind = match c {
                b'+' | b'-' | b'*' | b'/' | b'^' => TokKind::Op(c as char),
                b'(' => TokKind::LParen,
                b')' => TokKind::RParen,
                _ => {
                    return Err(ExprError::Syntax {
                        pos: start,
                        msg: format!("unexpected character `{}`", text[start..].chars().next().unwrap()),
                    })
                }
            };
            i += 1;
            out.push(Token { kind, pos: start });
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: &'a [Token],
    idx: usize,
    end: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&'a Token> {
        self.tokens.get(self.idx)
    }

    fn pos(&self) -> usize {
        self.peek().map_or(self.end, |t| t.pos)
    }

    fn eat_op(&mut self, ops: &[char]) -> Option<char> {
        match self.peek() {
            Some(Token {
                kind: TokKind::Op(c), ..
            }) if ops.contains(c) => {
                self.idx += 1;
                Some(*c)
            }
            _ => None,
        }
    }

    fn expr(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.term()?;
        while let Some(c) = self.eat_op(&['+', '-']) {
            let rhs = self.term()?;
            let op = if c == '+' { BinOp::Add } else { BinOp::Sub };
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.unary()?;
        while let Some(c) = self.eat_op(&['*', '/']) {
            let rhs = self.unary()?;
            let op = if c == '*' { BinOp::Mul } else { BinOp::Div };
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node, ExprError> {
        if self.eat_op(&['-']).is_some() {
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node, ExprError> {
        let base = self.atom()?;
        if self.eat_op(&['^']).is_some() {
            // right associative; the exponent may carry its own sign
            let exponent = self.unary()?;
            return Ok(Node::Bin(BinOp::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node, ExprError> {
        let pos = self.pos();
        let Some(tok) = self.peek() else {
            return Err(ExprError::Syntax {
                pos,
                msg: "unexpected end of input".into(),
            });
        };
        self.idx += 1;
        match &tok.kind {
            TokKind::Num(v) => Ok(Node::Num(*v)),
            TokKind::LParen => {
                let inner = self.expr()?;
                self.expect_rparen(pos)?;
                Ok(inner)
            }
            TokKind::Ident(name) => {
                if name == "pi" {
                    return Ok(Node::Pi);
                }
                if let Some(var) = Var::from_name(name) {
                    return Ok(Node::Var(var));
                }
                if let Some(func) = Func::from_name(name) {
                    match self.peek() {
                        Some(Token {
                            kind: TokKind::LParen, ..
                        }) => self.idx += 1,
                        _ => {
                            return Err(ExprError::Syntax {
                                pos: self.pos(),
                                msg: format!("expected `(` after `{name}`"),
                            })
                        }
                    }
                    let arg = self.expr()?;
                    self.expect_rparen(pos)?;
                    return Ok(Node::Call(func, Box::new(arg)));
                }
                Err(ExprError::Syntax {
                    pos: tok.pos,
                    msg: format!("unknown identifier `{name}`"),
                })
            }
            other => Err(ExprError::Syntax {
                pos: tok.pos,
                msg: format!("unexpected {}", other.describe()),
            }),
        }
    }

    fn expect_rparen(&mut self, open_pos: usize) -> Result<(), ExprError> {
        match self.peek() {
            Some(Token {
                kind: TokKind::RParen, ..
            }) => {
                self.idx += 1;
                Ok(())
            }
            _ => Err(ExprError::Syntax {
                pos: self.pos(),
                msg: format!("unbalanced parenthesis opened at {open_pos}"),
            }),
        }
    }
}
