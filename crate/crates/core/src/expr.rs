//! Scalar expression DAG with evaluation and exact reverse-mode first
//! derivatives.
//!
//! Expressions are immutable and reference-counted, so sub-expressions can be
//! shared freely between constraints. Before repeated evaluation an
//! expression is flattened into a [`Tape`]; the free functions [`evaluate`],
//! [`gradient`] and [`jacobian`] compile on the fly and are meant for one-off
//! use.
//!
//! Evaluation never produces NaN or infinity. Arguments outside a function's
//! domain surface as [`EvalError`] values so that callers (line searches,
//! block solvers) can react to them.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index of a variable in a model's variable registry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VarId(pub usize);

impl fmt::Display for VarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

/// Function whose evaluation failed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Function {
    Add,
    Mul,
    Div,
    Pow,
    Ln,
    Exp,
    Tanh,
    Sigmoid,
}

impl fmt::Display for Function {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Function::Add => "add",
            Function::Mul => "mul",
            Function::Div => "div",
            Function::Pow => "pow",
            Function::Ln => "ln",
            Function::Exp => "exp",
            Function::Tanh => "tanh",
            Function::Sigmoid => "sigmoid",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, Error, PartialEq)]
pub enum EvalError {
    /// A function was applied outside its domain, e.g. `ln(v)` with `v <= 0`.
    #[error("{func} evaluated outside its domain (argument {arg:e})")]
    DomainViolation { func: Function, arg: f64 },
    /// A value or derivative overflowed.
    #[error("{func} produced a non-finite value")]
    NonFinite { func: Function },
    #[error("variable {0} is not covered by the evaluation point")]
    MissingVariable(VarId),
}

/// Evaluation error annotated with the failing row of a constraint list.
#[derive(Clone, Copy, Debug, Error, PartialEq)]
#[error("row {row}: {error}")]
pub struct RowEvalError {
    pub row: usize,
    pub error: EvalError,
}

#[derive(Debug)]
pub enum Node {
    Const(f64),
    Var(VarId),
    Sum(Vec<Expr>),
    Product(Vec<Expr>),
    Quotient(Expr, Expr),
    /// Base raised to a constant exponent.
    Power(Expr, f64),
    Ln(Expr),
    Exp(Expr),
    Tanh(Expr),
    Sigmoid(Expr),
}

/// Immutable handle to an expression node.
#[derive(Clone, Debug)]
pub struct Expr(Arc<Node>);

impl Expr {
    fn new(node: Node) -> Self {
        Expr(Arc::new(node))
    }

    pub fn constant(value: f64) -> Self {
        Expr::new(Node::Const(value))
    }

    pub fn var(id: VarId) -> Self {
        Expr::new(Node::Var(id))
    }

    pub fn node(&self) -> &Node {
        &self.0
    }

    /// Sum of the given terms; an empty sum is the constant zero.
    pub fn sum<I: IntoIterator<Item = Expr>>(terms: I) -> Self {
        let mut children = Vec::new();
        for t in terms {
            match t.node() {
                Node::Sum(inner) => children.extend(inner.iter().cloned()),
                _ => children.push(t),
            }
        }
        match children.len() {
            0 => Expr::constant(0.0),
            1 => children.pop().unwrap(),
            _ => Expr::new(Node::Sum(children)),
        }
    }

    /// Product of the given factors; an empty product is the constant one.
    pub fn product<I: IntoIterator<Item = Expr>>(factors: I) -> Self {
        let mut children: Vec<Expr> = factors.into_iter().collect();
        match children.len() {
            0 => Expr::constant(1.0),
            1 => children.pop().unwrap(),
            _ => Expr::new(Node::Product(children)),
        }
    }

    pub fn ln(self) -> Self {
        Expr::new(Node::Ln(self))
    }

    pub fn exp(self) -> Self {
        Expr::new(Node::Exp(self))
    }

    pub fn tanh(self) -> Self {
        Expr::new(Node::Tanh(self))
    }

    pub fn sigmoid(self) -> Self {
        Expr::new(Node::Sigmoid(self))
    }

    pub fn powf(self, exponent: f64) -> Self {
        Expr::new(Node::Power(self, exponent))
    }

    pub fn powi(self, exponent: i32) -> Self {
        Expr::new(Node::Power(self, exponent as f64))
    }

    /// `self * self`, kept as a product so it stays cheap to differentiate.
    pub fn square(self) -> Self {
        Expr::product([self.clone(), self])
    }

    pub fn as_constant(&self) -> Option<f64> {
        match self.node() {
            Node::Const(c) => Some(*c),
            _ => None,
        }
    }

    pub fn compile(&self) -> Tape {
        Tape::compile(self)
    }

    /// Render with a custom variable naming scheme.
    pub fn display_with<'a, F>(&'a self, names: &'a F) -> DisplayExpr<'a, F>
    where
        F: Fn(VarId) -> String,
    {
        DisplayExpr { expr: self, names }
    }
}

impl From<f64> for Expr {
    fn from(value: f64) -> Self {
        Expr::constant(value)
    }
}

impl From<VarId> for Expr {
    fn from(id: VarId) -> Self {
        Expr::var(id)
    }
}

impl Add for Expr {
    type Output = Expr;
    fn add(self, rhs: Expr) -> Expr {
        Expr::sum([self, rhs])
    }
}

impl Add<f64> for Expr {
    type Output = Expr;
    fn add(self, rhs: f64) -> Expr {
        Expr::sum([self, Expr::constant(rhs)])
    }
}

impl Add<Expr> for f64 {
    type Output = Expr;
    fn add(self, rhs: Expr) -> Expr {
        Expr::sum([Expr::constant(self), rhs])
    }
}

impl Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::product([Expr::constant(-1.0), self])
    }
}

impl Sub for Expr {
    type Output = Expr;
    fn sub(self, rhs: Expr) -> Expr {
        Expr::sum([self, -rhs])
    }
}

impl Sub<f64> for Expr {
    type Output = Expr;
    fn sub(self, rhs: f64) -> Expr {
        Expr::sum([self, Expr::constant(-rhs)])
    }
}

impl Sub<Expr> for f64 {
    type Output = Expr;
    fn sub(self, rhs: Expr) -> Expr {
        Expr::sum([Expr::constant(self), -rhs])
    }
}

impl Mul for Expr {
    type Output = Expr;
    fn mul(self, rhs: Expr) -> Expr {
        Expr::product([self, rhs])
    }
}

impl Mul<f64> for Expr {
    type Output = Expr;
    fn mul(self, rhs: f64) -> Expr {
        Expr::product([Expr::constant(rhs), self])
    }
}

impl Mul<Expr> for f64 {
    type Output = Expr;
    fn mul(self, rhs: Expr) -> Expr {
        Expr::product([Expr::constant(self), rhs])
    }
}

impl Div for Expr {
    type Output = Expr;
    fn div(self, rhs: Expr) -> Expr {
        Expr::new(Node::Quotient(self, rhs))
    }
}

impl Div<f64> for Expr {
    type Output = Expr;
    fn div(self, rhs: f64) -> Expr {
        Expr::new(Node::Quotient(self, Expr::constant(rhs)))
    }
}

impl Div<Expr> for f64 {
    type Output = Expr;
    fn div(self, rhs: Expr) -> Expr {
        Expr::new(Node::Quotient(Expr::constant(self), rhs))
    }
}

pub struct DisplayExpr<'a, F> {
    expr: &'a Expr,
    names: &'a F,
}

impl<F: Fn(VarId) -> String> DisplayExpr<'_, F> {
    fn write(&self, e: &Expr, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let unary = |f: &mut fmt::Formatter<'_>, name: &str, a: &Expr| -> fmt::Result {
            write!(f, "{name}(")?;
            self.write(a, f)?;
            write!(f, ")")
        };
        match e.node() {
            Node::Const(c) => write!(f, "{c}"),
            Node::Var(v) => write!(f, "{}", (self.names)(*v)),
            Node::Sum(ch) => {
                write!(f, "(")?;
                for (i, c) in ch.iter().enumerate() {
                    if i > 0 {
                        write!(f, " + ")?;
                    }
                    self.write(c, f)?;
                }
                write!(f, ")")
            }
            Node::Product(ch) => {
                for (i, c) in ch.iter().enumerate() {
                    if i > 0 {
                        write!(f, "*")?;
                    }
                    self.write(c, f)?;
                }
                Ok(())
            }
            Node::Quotient(a, b) => {
                write!(f, "(")?;
                self.write(a, f)?;
                write!(f, ")/(")?;
                self.write(b, f)?;
                write!(f, ")")
            }
            Node::Power(a, p) => {
                write!(f, "(")?;
                self.write(a, f)?;
                write!(f, ")^{p}")
            }
            Node::Ln(a) => unary(f, "ln", a),
            Node::Exp(a) => unary(f, "exp", a),
            Node::Tanh(a) => unary(f, "tanh", a),
            Node::Sigmoid(a) => unary(f, "sigmoid", a),
        }
    }
}

impl<F: Fn(VarId) -> String> fmt::Display for DisplayExpr<'_, F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.write(self.expr, f)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = |v: VarId| v.to_string();
        self.display_with(&names).fmt(f)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Const(f64),
    Var(usize),
    Sum { start: u32, len: u32 },
    Product { start: u32, len: u32 },
    Quotient(u32, u32),
    Power(u32, f64),
    Ln(u32),
    Exp(u32),
    Tanh(u32),
    Sigmoid(u32),
}

/// Flattened expression in topological order (children before parents).
///
/// Shared sub-expressions are stored once; repeated references to the same
/// variable share a single slot.
#[derive(Clone, Debug)]
pub struct Tape {
    ops: Vec<Op>,
    children: Vec<u32>,
    vars: Vec<VarId>,
}

/// Scratch buffers reused across tape evaluations.
#[derive(Default, Clone, Debug)]
pub struct TapeWorkspace {
    values: Vec<f64>,
    adjoints: Vec<f64>,
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn finite(v: f64, func: Function) -> Result<f64, EvalError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(EvalError::NonFinite { func })
    }
}

fn power(base: f64, p: f64) -> Result<f64, EvalError> {
    let domain = Err(EvalError::DomainViolation { func: Function::Pow, arg: base });
    if p.fract() == 0.0 {
        if base == 0.0 && p < 0.0 {
            return domain;
        }
        if p.abs() <= i32::MAX as f64 {
            let n = p as i32;
            // small integer powers as explicit multiplication for reproducibility
            let v = match n {
                0 => 1.0,
                1 => base,
                2 => base * base,
                3 => base * base * base,
                _ => base.powi(n),
            };
            return finite(v, Function::Pow);
        }
    }
    if base < 0.0 || (base == 0.0 && p < 0.0) {
        return domain;
    }
    finite(base.powf(p), Function::Pow)
}

impl Tape {
    pub fn compile(expr: &Expr) -> Self {
        let mut tape = Tape { ops: Vec::new(), children: Vec::new(), vars: Vec::new() };
        let mut seen: HashMap<*const Node, u32> = HashMap::new();
        let mut var_slots: HashMap<VarId, u32> = HashMap::new();
        tape.push(expr, &mut seen, &mut var_slots);
        tape
    }

    // Iterative post-order traversal so deep sums cannot overflow the stack.
    fn push(
        &mut self,
        root: &Expr,
        seen: &mut HashMap<*const Node, u32>,
        var_slots: &mut HashMap<VarId, u32>,
    ) -> u32 {
        let mut stack: Vec<(&Expr, bool)> = vec![(root, false)];
        while let Some((e, expanded)) = stack.pop() {
            let key = Arc::as_ptr(&e.0);
            if seen.contains_key(&key) {
                continue;
            }
            let kids: Vec<&Expr> = match e.node() {
                Node::Const(_) | Node::Var(_) => vec![],
                Node::Sum(ch) | Node::Product(ch) => ch.iter().collect(),
                Node::Quotient(a, b) => vec![a, b],
                Node::Power(a, _) | Node::Ln(a) | Node::Exp(a) | Node::Tanh(a) | Node::Sigmoid(a) => {
                    vec![a]
                }
            };
            if !expanded && kids.iter().any(|k| !seen.contains_key(&Arc::as_ptr(&k.0))) {
                stack.push((e, true));
                for k in kids.into_iter().rev() {
                    if !seen.contains_key(&Arc::as_ptr(&k.0)) {
                        stack.push((k, false));
                    }
                }
                continue;
            }
            let idx = |k: &Expr| seen[&Arc::as_ptr(&k.0)];
            let op = match e.node() {
                Node::Const(c) => Op::Const(*c),
                Node::Var(v) => {
                    if let Some(&slot) = var_slots.get(v) {
                        seen.insert(key, slot);
                        continue;
                    }
                    self.vars.push(*v);
                    Op::Var(self.vars.len() - 1)
                }
                Node::Sum(ch) => {
                    let start = self.children.len() as u32;
                    self.children.extend(ch.iter().map(idx));
                    Op::Sum { start, len: ch.len() as u32 }
                }
                Node::Product(ch) => {
                    let start = self.children.len() as u32;
                    self.children.extend(ch.iter().map(idx));
                    Op::Product { start, len: ch.len() as u32 }
                }
                Node::Quotient(a, b) => Op::Quotient(idx(a), idx(b)),
                Node::Power(a, p) => Op::Power(idx(a), *p),
                Node::Ln(a) => Op::Ln(idx(a)),
                Node::Exp(a) => Op::Exp(idx(a)),
                Node::Tanh(a) => Op::Tanh(idx(a)),
                Node::Sigmoid(a) => Op::Sigmoid(idx(a)),
            };
            let slot = self.ops.len() as u32;
            if let Node::Var(v) = e.node() {
                var_slots.insert(*v, slot);
            }
            self.ops.push(op);
            seen.insert(key, slot);
        }
        seen[&Arc::as_ptr(&root.0)]
    }

    /// Distinct variables referenced by the expression, in first-use order.
    pub fn vars(&self) -> &[VarId] {
        &self.vars
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn forward(&self, x: &[f64], values: &mut Vec<f64>) -> Result<f64, EvalError> {
        values.clear();
        values.reserve(self.ops.len());
        for op in &self.ops {
            let v = match *op {
                Op::Const(c) => c,
                Op::Var(k) => {
                    let id = self.vars[k];
                    match x.get(id.0) {
                        Some(v) if v.is_finite() => *v,
                        _ => return Err(EvalError::MissingVariable(id)),
                    }
                }
                Op::Sum { start, len } => {
                    let mut acc = 0.0;
                    for &c in &self.children[start as usize..(start + len) as usize] {
                        acc += values[c as usize];
                    }
                    finite(acc, Function::Add)?
                }
                Op::Product { start, len } => {
                    let mut acc = 1.0;
                    for &c in &self.children[start as usize..(start + len) as usize] {
                        acc *= values[c as usize];
                    }
                    finite(acc, Function::Mul)?
                }
                Op::Quotient(a, b) => {
                    let d = values[b as usize];
                    if d == 0.0 {
                        return Err(EvalError::DomainViolation { func: Function::Div, arg: d });
                    }
                    finite(values[a as usize] / d, Function::Div)?
                }
                Op::Power(a, p) => power(values[a as usize], p)?,
                Op::Ln(a) => {
                    let v = values[a as usize];
                    if v <= 0.0 {
                        return Err(EvalError::DomainViolation { func: Function::Ln, arg: v });
                    }
                    v.ln()
                }
                Op::Exp(a) => finite(values[a as usize].exp(), Function::Exp)?,
                Op::Tanh(a) => values[a as usize].tanh(),
                Op::Sigmoid(a) => logistic(values[a as usize]),
            };
            values.push(v);
        }
        Ok(*values.last().unwrap_or(&0.0))
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64, EvalError> {
        let mut ws = TapeWorkspace::default();
        self.eval_with(x, &mut ws)
    }

    pub fn eval_with(&self, x: &[f64], ws: &mut TapeWorkspace) -> Result<f64, EvalError> {
        self.forward(x, &mut ws.values)
    }

    /// Value and gradient. The gradient is written as `(variable, partial)`
    /// pairs into `grad`, one entry per distinct referenced variable, in the
    /// order of [`Tape::vars`].
    pub fn gradient_with(
        &self,
        x: &[f64],
        ws: &mut TapeWorkspace,
        grad: &mut Vec<(VarId, f64)>,
    ) -> Result<f64, EvalError> {
        let value = self.forward(x, &mut ws.values)?;
        let n = self.ops.len();
        let values = &ws.values;
        let adj = &mut ws.adjoints;
        adj.clear();
        adj.resize(n, 0.0);
        grad.clear();
        if n == 0 {
            return Ok(value);
        }
        adj[n - 1] = 1.0;
        let mut var_adj = vec![0.0; self.vars.len()];
        for i in (0..n).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            match self.ops[i] {
                Op::Const(_) => {}
                Op::Var(k) => var_adj[k] += a,
                Op::Sum { start, len } => {
                    for &c in &self.children[start as usize..(start + len) as usize] {
                        adj[c as usize] += a;
                    }
                }
                Op::Product { start, len } => {
                    let kids = &self.children[start as usize..(start + len) as usize];
                    if kids.len() == 2 {
                        let (p, q) = (kids[0] as usize, kids[1] as usize);
                        let (vp, vq) = (values[p], values[q]);
                        adj[p] += a * vq;
                        adj[q] += a * vp;
                    } else {
                        // prefix/suffix products, robust to zero factors
                        let m = kids.len();
                        let mut prefix = vec![1.0; m + 1];
                        for (j, &c) in kids.iter().enumerate() {
                            prefix[j + 1] = prefix[j] * values[c as usize];
                        }
                        let mut suffix = 1.0;
                        for j in (0..m).rev() {
                            let c = kids[j] as usize;
                            adj[c] += a * prefix[j] * suffix;
                            suffix *= values[c];
                        }
                    }
                }
                Op::Quotient(p, q) => {
                    let (p, q) = (p as usize, q as usize);
                    let d = values[q];
                    adj[p] += a / d;
                    adj[q] -= a * values[p] / (d * d);
                }
                Op::Power(b, p) => {
                    let b = b as usize;
                    let d = if p == 0.0 {
                        0.0
                    } else if p == 1.0 {
                        1.0
                    } else if p == 2.0 {
                        2.0 * values[b]
                    } else {
                        p * power(values[b], p - 1.0)?
                    };
                    adj[b] += a * d;
                }
                Op::Ln(b) => adj[b as usize] += a / values[b as usize],
                Op::Exp(b) => adj[b as usize] += a * values[i],
                Op::Tanh(b) => {
                    let t = values[i];
                    adj[b as usize] += a * (1.0 - t * t);
                }
                Op::Sigmoid(b) => {
                    let s = values[i];
                    adj[b as usize] += a * s * (1.0 - s);
                }
            }
        }
        for (k, &v) in self.vars.iter().enumerate() {
            let d = var_adj[k];
            if !d.is_finite() {
                return Err(EvalError::NonFinite { func: Function::Mul });
            }
            grad.push((v, d));
        }
        Ok(value)
    }

    pub fn gradient(&self, x: &[f64]) -> Result<(f64, Vec<(VarId, f64)>), EvalError> {
        let mut ws = TapeWorkspace::default();
        let mut g = Vec::new();
        let v = self.gradient_with(x, &mut ws, &mut g)?;
        Ok((v, g))
    }
}

/// Value of `expr` at `point` (indexed by [`VarId`]).
pub fn evaluate(expr: &Expr, point: &[f64]) -> Result<f64, EvalError> {
    Tape::compile(expr).eval(point)
}

/// Exact partial derivatives, keyed by variable. Variables with structural
/// incidence always have an entry, even when the partial is zero.
pub fn gradient(expr: &Expr, point: &[f64]) -> Result<Vec<(VarId, f64)>, EvalError> {
    let (_, mut g) = Tape::compile(expr).gradient(point)?;
    g.sort_by_key(|(v, _)| *v);
    Ok(g)
}

/// Sparse row-wise Jacobian: row `i` lists `(variable, partial)` pairs of
/// `constraints[i]`, sorted by variable.
pub fn jacobian(constraints: &[Expr], point: &[f64]) -> Result<Vec<Vec<(VarId, f64)>>, RowEvalError> {
    constraints
        .iter()
        .enumerate()
        .map(|(row, c)| gradient(c, point).map_err(|error| RowEvalError { row, error }))
        .collect()
}

/// Variables reachable from `expr`.
pub fn incidence_vars(expr: &Expr) -> BTreeSet<VarId> {
    Tape::compile(expr).vars().iter().copied().collect()
}
