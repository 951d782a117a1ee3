//! Scalar rate expressions attached to reactions.
//!
//! The concrete syntax is a small arithmetic language over identifiers
//! (species or parameters) and number literals, with two builtins:
//! `exp(x)` and `hill(x, K, n) = x^n / (K^n + x^n)`.
//!
//! Precedence, from tightest to loosest: `^` (right-associative), unary
//! minus, `*` `/`, `+` `-`. So `-2^2` is `-(2^2)` and `2^3^2` is `2^(3^2)`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("syntax error at position {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unknown function `{name}` at position {pos}")]
    UnknownFunction { name: String, pos: usize },
    #[error("function `{name}` takes {expected} argument(s), got {got}")]
    Arity { name: String, expected: usize, got: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("zero raised to negative power {0}")]
    ZeroToNegative(f64),
    #[error("hill denominator vanishes (x={x}, K={k}, n={n})")]
    HillDenominator { x: f64, k: f64, n: f64 },
    #[error("non-finite result in `{0}`")]
    NonFinite(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BindError {
    #[error("unbound identifier `{0}`")]
    Unbound(String),
    #[error("identifier `{0}` is bound both as a species and as a parameter")]
    Ambiguous(String),
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

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Builtin {
    Exp,
    Hill,
}

impl Builtin {
    fn lookup(name: &str) -> Option<Self> {
        match name {
            "exp" => Some(Builtin::Exp),
            "hill" => Some(Builtin::Hill),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Builtin::Exp => "exp",
            Builtin::Hill => "hill",
        }
    }

    fn arity(self) -> usize {
        match self {
            Builtin::Exp => 1,
            Builtin::Hill => 3,
        }
    }
}

/// Expression tree. Identifiers stay symbolic until bound.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Ident(String),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Call(Builtin, Vec<Expr>),
}

/// A parsed rate expression.
#[derive(Debug, Clone, PartialEq)]
pub struct RateExpr {
    root: Expr,
}

impl RateExpr {
    pub fn root(&self) -> &Expr {
        &self.root
    }

    pub fn from_expr(root: Expr) -> Self {
        Self { root }
    }

    /// Identifiers referenced anywhere in the tree, sorted.
    pub fn identifiers(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        collect_idents(&self.root, &mut out);
        out
    }

    /// Resolves identifiers to slots so evaluation avoids name lookups.
    pub fn compile<F>(&self, mut resolve: F) -> Result<CompiledRate, BindError>
    where
        F: FnMut(&str) -> Option<Slot>,
    {
        let root = compile_node(&self.root, &mut resolve)?;
        Ok(CompiledRate { root })
    }
}

impl fmt::Display for RateExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.root)
    }
}

/// Fully parenthesized rendering; re-parses to the identical tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v:?}"),
            Expr::Ident(name) => f.write_str(name),
            Expr::Neg(inner) => write!(f, "(-{inner})"),
            Expr::Binary(op, lhs, rhs) => write!(f, "({lhs} {} {rhs})", op.symbol()),
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, arg) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{arg}")?;
                }
                f.write_str(")")
            }
        }
    }
}

fn collect_idents(e: &Expr, out: &mut BTreeSet<String>) {
    match e {
        Expr::Num(_) => {}
        Expr::Ident(name) => {
            out.insert(name.clone());
        }
        Expr::Neg(inner) => collect_idents(inner, out),
        Expr::Binary(_, l, r) => {
            collect_idents(l, out);
            collect_idents(r, out);
        }
        Expr::Call(_, args) => args.iter().for_each(|a| collect_idents(a, out)),
    }
}

// ---------------------------------------------------------------------------
// Lexer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
    End,
}

/// Tokens carry 1-based character positions.
fn lex(text: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let chars: Vec<char> = text.chars().collect();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let pos = i + 1;
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    while j < chars.len() && chars[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let lit: String = chars[start..i].iter().collect();
            let v = lit.parse::<f64>().map_err(|_| ParseError::Syntax {
                pos,
                msg: format!("malformed number `{lit}`"),
            })?;
            toks.push((Tok::Num(v), pos));
        } else if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            toks.push((Tok::Ident(chars[start..i].iter().collect()), pos));
        } else {
            let tok = match c {
                '+' | '-' | '*' | '/' | '^' => Tok::Op(c),
                '(' => Tok::LParen,
                ')' => Tok::RParen,
                ',' => Tok::Comma,
                _ => {
                    return Err(ParseError::Syntax {
                        pos,
                        msg: format!("unexpected character `{c}`"),
                    })
                }
            };
            toks.push((tok, pos));
            i += 1;
        }
    }
    toks.push((Tok::End, chars.len() + 1));
    Ok(toks)
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

struct Parser {
    toks: Vec<(Tok, usize)>,
    at: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].0
    }

    fn pos(&self) -> usize {
        self.toks[self.at].1
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.at].0.clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn error<T>(&self, msg: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError::Syntax {
            pos: self.pos(),
            msg: msg.into(),
        })
    }

    // sum := product (('+' | '-') product)*
    fn sum(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.product()?;
        loop {
            let op = match self.peek() {
                Tok::Op('+') => BinOp::Add,
                Tok::Op('-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.product()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    // product := unary (('*' | '/') unary)*
    fn product(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Tok::Op('*') => BinOp::Mul,
                Tok::Op('/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.unary()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    // unary := '-' unary | power
    fn unary(&mut self) -> Result<Expr, ParseError> {
        if let Tok::Op('-') = self.peek() {
            self.bump();
            let inner = self.unary()?;
            return Ok(Expr::Neg(Box::new(inner)));
        }
        self.power()
    }

    // power := atom ('^' unary)?   -- right-associative through unary
    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if let Tok::Op('^') = self.peek() {
            self.bump();
            let exponent = self.unary()?;
            return Ok(Expr::Binary(BinOp::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let pos = self.pos();
        match self.bump() {
            Tok::Num(v) => Ok(Expr::Num(v)),
            Tok::Ident(name) => {
                if let Tok::LParen = self.peek() {
                    self.bump();
                    let func = Builtin::lookup(&name).ok_or(ParseError::UnknownFunction {
                        name: name.clone(),
                        pos,
                    })?;
                    let mut args = vec![self.sum()?];
                    while let Tok::Comma = self.peek() {
                        self.bump();
                        args.push(self.sum()?);
                    }
                    match self.peek() {
                        Tok::RParen => {
                            self.bump();
                        }
                        _ => return self.error("expected `)` or `,`"),
                    }
                    if args.len() != func.arity() {
                        return Err(ParseError::Arity {
                            name,
                            expected: func.arity(),
                            got: args.len(),
                        });
                    }
                    Ok(Expr::Call(func, args))
                } else {
                    Ok(Expr::Ident(name))
                }
            }
            Tok::LParen => {
                let inner = self.sum()?;
                match self.peek() {
                    Tok::RParen => {
                        self.bump();
                        Ok(inner)
                    }
                    _ => self.error("expected `)`"),
                }
            }
            Tok::End => Err(ParseError::Syntax {
                pos,
                msg: "unexpected end of input".into(),
            }),
            other => Err(ParseError::Syntax {
                pos,
                msg: format!("unexpected token {other:?}"),
            }),
        }
    }
}

pub fn parse_rate_expr(text: &str) -> Result<RateExpr, ParseError> {
    let toks = lex(text)?;
    if matches!(toks[0].0, Tok::End) {
        return Err(ParseError::Syntax {
            pos: 1,
            msg: "empty expression".into(),
        });
    }
    let mut p = Parser { toks, at: 0 };
    let root = p.sum()?;
    match p.peek() {
        Tok::End => Ok(RateExpr { root }),
        _ => p.error("trailing input"),
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Named species values and parameters. A name may appear in only one map.
#[derive(Debug, Clone, Default)]
pub struct Binding {
    pub species: HashMap<String, f64>,
    pub params: HashMap<String, f64>,
}

impl Binding {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn species(mut self, name: &str, value: f64) -> Self {
        self.species.insert(name.to_string(), value);
        self
    }

    pub fn param(mut self, name: &str, value: f64) -> Self {
        self.params.insert(name.to_string(), value);
        self
    }

    fn lookup(&self, name: &str) -> Result<f64, BindError> {
        match (self.species.get(name), self.params.get(name)) {
            (Some(_), Some(_)) => Err(BindError::Ambiguous(name.to_string())),
            (Some(v), None) | (None, Some(v)) => Ok(*v),
            (None, None) => Err(BindError::Unbound(name.to_string())),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RateError {
    #[error(transparent)]
    Bind(#[from] BindError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Evaluates `expr` under `binding`. Every identifier must be bound exactly once.
pub fn eval_rate(expr: &RateExpr, binding: &Binding) -> Result<f64, RateError> {
    for name in expr.identifiers() {
        binding.lookup(&name)?;
    }
    let compiled = expr.compile(|name| binding.lookup(name).ok().map(Slot::Const))?;
    Ok(compiled.eval(&[])?)
}

/// Where a bound identifier reads its value from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Slot {
    /// Index into the state vector passed to [`CompiledRate::eval`].
    State(usize),
    /// Inlined constant (parameters).
    Const(f64),
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Const(f64),
    State(usize),
    Neg(Box<Node>),
    Binary(BinOp, Box<Node>, Box<Node>),
    Exp(Box<Node>),
    Hill(Box<[Node; 3]>),
}

/// Rate expression with identifiers resolved to state indices or constants.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledRate {
    root: Node,
}

fn compile_node<F>(e: &Expr, resolve: &mut F) -> Result<Node, BindError>
where
    F: FnMut(&str) -> Option<Slot>,
{
    Ok(match e {
        Expr::Num(v) => Node::Const(*v),
        Expr::Ident(name) => match resolve(name) {
            Some(Slot::State(i)) => Node::State(i),
            Some(Slot::Const(v)) => Node::Const(v),
            None => return Err(BindError::Unbound(name.clone())),
        },
        Expr::Neg(inner) => Node::Neg(Box::new(compile_node(inner, resolve)?)),
        Expr::Binary(op, l, r) => Node::Binary(
            *op,
            Box::new(compile_node(l, resolve)?),
            Box::new(compile_node(r, resolve)?),
        ),
        Expr::Call(Builtin::Exp, args) => Node::Exp(Box::new(compile_node(&args[0], resolve)?)),
        Expr::Call(Builtin::Hill, args) => Node::Hill(Box::new([
            compile_node(&args[0], resolve)?,
            compile_node(&args[1], resolve)?,
            compile_node(&args[2], resolve)?,
        ])),
    })
}

impl CompiledRate {
    pub fn eval(&self, state: &[f64]) -> Result<f64, EvalError> {
        eval_node(&self.root, state)
    }

    /// True when the value cannot depend on the state vector.
    pub fn is_constant(&self) -> bool {
        fn walk(n: &Node) -> bool {
            match n {
                Node::Const(_) => true,
                Node::State(_) => false,
                Node::Neg(i) | Node::Exp(i) => walk(i),
                Node::Binary(_, l, r) => walk(l) && walk(r),
                Node::Hill(a) => a.iter().all(walk),
            }
        }
        walk(&self.root)
    }
}

fn pow(base: f64, exponent: f64) -> Result<f64, EvalError> {
    if base == 0.0 && exponent < 0.0 {
        return Err(EvalError::ZeroToNegative(exponent));
    }
    let v = base.powf(exponent);
    if v.is_nan() {
        return Err(EvalError::NonFinite(format!("{base}^{exponent}")));
    }
    Ok(v)
}

fn eval_node(n: &Node, state: &[f64]) -> Result<f64, EvalError> {
    match n {
        Node::Const(v) => Ok(*v),
        Node::State(i) => Ok(state[*i]),
        Node::Neg(inner) => Ok(-eval_node(inner, state)?),
        Node::Binary(op, l, r) => {
            let a = eval_node(l, state)?;
            let b = eval_node(r, state)?;
            match op {
                BinOp::Add => Ok(a + b),
                BinOp::Sub => Ok(a - b),
                BinOp::Mul => Ok(a * b),
                BinOp::Div => {
                    if b == 0.0 {
                        Err(EvalError::DivisionByZero)
                    } else {
                        Ok(a / b)
                    }
                }
                BinOp::Pow => pow(a, b),
            }
        }
        Node::Exp(inner) => Ok(eval_node(inner, state)?.exp()),
        Node::Hill(args) => {
            let x = eval_node(&args[0], state)?;
            let k = eval_node(&args[1], state)?;
            let n = eval_node(&args[2], state)?;
            let xn = pow(x, n)?;
            let denom = pow(k, n)? + xn;
            if denom == 0.0 {
                return Err(EvalError::HillDenominator { x, k, n });
            }
            Ok(xn / denom)
        }
    }
}

// ---------------------------------------------------------------------------
// Lipschitz probe
// ---------------------------------------------------------------------------

/// Axis-aligned box of identifier intervals, plus fixed values for the
/// remaining identifiers (typically parameters).
#[derive(Debug, Clone, Default)]
pub struct ProbeBox {
    pub intervals: BTreeMap<String, (f64, f64)>,
    pub fixed: Binding,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProbeError {
    #[error("grid must have at least 2 points per axis, got {0}")]
    Grid(usize),
    #[error("degenerate interval for `{0}`")]
    Degenerate(String),
    #[error(transparent)]
    Rate(#[from] RateError),
}

/// Largest finite-difference slope between grid-adjacent points of the box.
///
/// This is a lower bound on the Lipschitz constant over the box, reported as
/// a smoothness diagnostic.
pub fn lipschitz_probe(expr: &RateExpr, probe: &ProbeBox, grid: usize) -> Result<f64, ProbeError> {
    if grid < 2 {
        return Err(ProbeError::Grid(grid));
    }
    let axes: Vec<(&String, f64, f64)> = probe.intervals.iter().map(|(name, &(lo, hi))| (name, lo, hi)).collect();
    for (name, lo, hi) in &axes {
        if !(hi > lo) {
            return Err(ProbeError::Degenerate((*name).clone()));
        }
    }
    let axis_slots: HashMap<&str, usize> = axes
        .iter()
        .enumerate()
        .map(|(i, (name, _, _))| (name.as_str(), i))
        .collect();
    let compiled = expr
        .compile(|name| {
            axis_slots
                .get(name)
                .map(|&i| Slot::State(i))
                .or_else(|| probe.fixed.lookup(name).ok().map(Slot::Const))
        })
        .map_err(RateError::from)?;

    let dims = axes.len();
    let coord = |axis: usize, k: usize| {
        let (_, lo, hi) = axes[axis];
        lo + (hi - lo) * k as f64 / (grid - 1) as f64
    };
    let total = grid.checked_pow(dims as u32).unwrap_or(usize::MAX);
    let mut values = Vec::with_capacity(total);
    let mut idx = vec![0usize; dims];
    let mut point = vec![0.0; dims];
    for _ in 0..total {
        for (d, &k) in idx.iter().enumerate() {
            point[d] = coord(d, k);
        }
        values.push(compiled.eval(&point).map_err(RateError::from)?);
        for d in (0..dims).rev() {
            idx[d] += 1;
            if idx[d] < grid {
                break;
            }
            idx[d] = 0;
        }
    }

    // Row-major layout: the last axis varies fastest.
    let mut best = 0.0f64;
    let mut stride = 1usize;
    for d in (0..dims).rev() {
        let h = coord(d, 1) - coord(d, 0);
        for flat in 0..total {
            if (flat / stride) % grid + 1 < grid {
                let slope = (values[flat + stride] - values[flat]).abs() / h;
                best = best.max(slope);
            }
        }
        stride *= grid;
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn eval_str(text: &str, b: &Binding) -> Result<f64, RateError> {
        eval_rate(&parse_rate_expr(text).unwrap(), b)
    }

    #[test]
    fn parses_product_of_identifiers() {
        let e = parse_rate_expr("k_p * G").unwrap();
        assert_eq!(
            e.root(),
            &Expr::Binary(
                BinOp::Mul,
                Box::new(Expr::Ident("k_p".into())),
                Box::new(Expr::Ident("G".into()))
            )
        );
    }

    #[test]
    fn unbalanced_paren_reports_end_position() {
        let err = parse_rate_expr("k_p * (").unwrap_err();
        assert!(matches!(err, ParseError::Syntax { pos: 8, .. }), "{err:?}");
    }

    #[test]
    fn unknown_function_is_rejected() {
        let err = parse_rate_expr("log(P)").unwrap_err();
        assert!(matches!(err, ParseError::UnknownFunction { .. }));
        let err = parse_rate_expr("hill(P, 1)").unwrap_err();
        assert!(matches!(
            err,
            ParseError::Arity {
                expected: 3,
                got: 2,
                ..
            }
        ));
    }

    #[test]
    fn empty_text_is_a_syntax_error() {
        assert!(parse_rate_expr("   ").is_err());
    }

    #[test]
    fn arithmetic_and_precedence() {
        let b = Binding::new().species("P", 1.5);
        assert_eq!(eval_str("2*P", &b).unwrap(), 3.0);
        let empty = Binding::new();
        assert_eq!(eval_str("2+3*4", &empty).unwrap(), 14.0);
        assert_eq!(eval_str("2^3^2", &empty).unwrap(), 512.0);
        assert_eq!(eval_str("-2^2", &empty).unwrap(), -4.0);
        assert_eq!(eval_str("2^-1", &empty).unwrap(), 0.5);
        assert_eq!(eval_str("8/4/2", &empty).unwrap(), 1.0);
        assert_eq!(eval_str("1 - 2 - 3", &empty).unwrap(), -4.0);
        assert_eq!(eval_str("1.5e1 + exp(0)", &empty).unwrap(), 16.0);
    }

    #[test]
    fn spec_eval_examples() {
        let b = Binding::new().param("gamma", 1.0).species("P", 0.5);
        assert_eq!(eval_str("gamma*P", &b).unwrap(), 0.5);
        let b = Binding::new().species("P", 1.0);
        assert_eq!(eval_str("hill(P,1,2)", &b).unwrap(), 0.5);
        let b = Binding::new().species("P", 0.0);
        assert_eq!(
            eval_str("1/P", &b).unwrap_err(),
            RateError::Eval(EvalError::DivisionByZero)
        );
        assert!(matches!(
            eval_str("P^(-1)", &b).unwrap_err(),
            RateError::Eval(EvalError::ZeroToNegative(_))
        ));
        assert!(matches!(
            eval_str("hill(P, 0, 2)", &b).unwrap_err(),
            RateError::Eval(EvalError::HillDenominator { .. })
        ));
    }

    #[test]
    fn negative_values_are_not_eval_errors() {
        assert_eq!(eval_str("-1", &Binding::new()).unwrap(), -1.0);
    }

    #[test]
    fn binding_errors() {
        let b = Binding::new().species("P", 1.0);
        assert_eq!(
            eval_str("k_x*P", &b).unwrap_err(),
            RateError::Bind(BindError::Unbound("k_x".into()))
        );
        let b = Binding::new().species("P", 1.0).param("P", 2.0);
        assert_eq!(
            eval_str("P", &b).unwrap_err(),
            RateError::Bind(BindError::Ambiguous("P".into()))
        );
    }

    fn probe_box(name: &str, lo: f64, hi: f64) -> ProbeBox {
        let mut b = ProbeBox::default();
        b.intervals.insert(name.to_string(), (lo, hi));
        b
    }

    #[test]
    fn lipschitz_probe_examples() {
        let lin = parse_rate_expr("2*P").unwrap();
        let l = lipschitz_probe(&lin, &probe_box("P", 0.0, 1.0), 11).unwrap();
        assert!((l - 2.0).abs() < 1e-12);

        let constant = parse_rate_expr("3.0").unwrap();
        assert_eq!(lipschitz_probe(&constant, &probe_box("P", 0.0, 1.0), 5).unwrap(), 0.0);

        // Finite differences of x^2 on a 101-point grid: largest slope is on
        // the last cell, (1 - 0.99^2) / 0.01 = 1.99.
        let sq = parse_rate_expr("P^2").unwrap();
        let l = lipschitz_probe(&sq, &probe_box("P", 0.0, 1.0), 101).unwrap();
        assert!((1.98..=2.0).contains(&l), "{l}");
        assert!((l - 1.99).abs() < 1e-9);
    }

    #[test]
    fn lipschitz_probe_two_axes_and_errors() {
        let e = parse_rate_expr("3*x + k*y").unwrap();
        let mut b = probe_box("x", 0.0, 1.0);
        b.intervals.insert("y".into(), (0.0, 2.0));
        b.fixed = Binding::new().param("k", 5.0);
        let l = lipschitz_probe(&e, &b, 3).unwrap();
        assert!((l - 5.0).abs() < 1e-12);

        assert_eq!(lipschitz_probe(&e, &b, 1).unwrap_err(), ProbeError::Grid(1));
        let bad = probe_box("x", 1.0, 1.0);
        assert!(matches!(
            lipschitz_probe(&e, &bad, 3).unwrap_err(),
            ProbeError::Degenerate(_)
        ));
        let div = parse_rate_expr("1/P").unwrap();
        assert!(matches!(
            lipschitz_probe(&div, &probe_box("P", 0.0, 1.0), 3).unwrap_err(),
            ProbeError::Rate(RateError::Eval(EvalError::DivisionByZero))
        ));
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0.0f64..1e6).prop_map(Expr::Num),
            prop::sample::select(vec!["P", "G", "k_on", "x1"]).prop_map(|s| Expr::Ident(s.into())),
        ];
        leaf.prop_recursive(5, 48, 3, |inner| {
            prop_oneof![
                inner.clone().prop_map(|e| Expr::Neg(Box::new(e))),
                (
                    prop::sample::select(vec![BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div, BinOp::Pow]),
                    inner.clone(),
                    inner.clone()
                )
                    .prop_map(|(op, l, r)| Expr::Binary(op, Box::new(l), Box::new(r))),
                inner.clone().prop_map(|e| Expr::Call(Builtin::Exp, vec![e])),
                (inner.clone(), inner.clone(), inner).prop_map(|(a, b, c)| Expr::Call(Builtin::Hill, vec![a, b, c])),
            ]
        })
    }

    proptest! {
        #[test]
        fn print_parse_round_trip(e in arb_expr()) {
            let printed = RateExpr::from_expr(e.clone()).to_string();
            let reparsed = parse_rate_expr(&printed).unwrap();
            prop_assert_eq!(reparsed.root(), &e);
            let again = parse_rate_expr(&reparsed.to_string()).unwrap();
            prop_assert_eq!(again.root(), &e);
        }

        #[test]
        fn evaluation_is_deterministic(e in arb_expr(), p in -3.0f64..3.0) {
            let expr = RateExpr::from_expr(e);
            let b = Binding::new().species("P", p).species("G", 1.0)
                .param("k_on", 2.0).param("x1", 0.25);
            let first = eval_rate(&expr, &b);
            let second = eval_rate(&expr, &b);
            match (first, second) {
                (Ok(a), Ok(b)) => prop_assert!(a.to_bits() == b.to_bits()),
                (a, b) => prop_assert_eq!(a, b),
            }
        }
    }
}
