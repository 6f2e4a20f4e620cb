//! Minimal reverse-mode automatic differentiation on an append-only tape.
//!
//! Values are flat `f64` vectors (a scalar is a length-1 vector) and the only
//! broadcasting rule is scalar-vector pairing in binary operations. Each
//! operation appends one node carrying the cached forward value; `backward`
//! runs a single reverse sweep that accumulates adjoints in fixed order, so
//! gradients are deterministic for a given op sequence.

pub mod exp1;

use std::cell::RefCell;
use std::fmt::Write as _;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("non-finite input to `{op}`: {value}")]
    NonFiniteInput { op: &'static str, value: f64 },
    #[error("domain violation in `{op}`: argument {value} must be {requirement}")]
    Domain {
        op: &'static str,
        value: f64,
        requirement: &'static str,
    },
    #[error("shape mismatch in `{op}`: {left} vs {right} elements")]
    Shape {
        op: &'static str,
        left: usize,
        right: usize,
    },
    #[error("`{op}` combined values from two different tapes")]
    TapeMismatch { op: &'static str },
    #[error("backward requires a scalar root, got {len} elements")]
    NonScalarRoot { len: usize },
    #[error("index {index} out of range for `{op}` on {len} elements")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
}

pub type AdResult<T> = Result<T, AdError>;

/// Sparse row-wise linear map used for band resampling and slicing:
/// output element r is the weighted sum of the selected input elements.
#[derive(Debug, Clone)]
pub struct GatherPlan {
    pub rows: Vec<GatherRow>,
}

#[derive(Debug, Clone)]
pub struct GatherRow {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// y = mul·x + add, elementwise.
    Affine { x: usize, mul: f64, add: f64 },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// y = a^b with a > 0.
    Pow(usize, usize),
    Min(usize, usize),
    Max(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    /// Exponential integral E1 with pullback −e^(−x)/x.
    Exp1(usize),
    /// Entries equal to 0.0 are replaced by machine epsilon and detached
    /// from the gradient (they become constants).
    ReplaceZero(usize),
    Sum(usize),
    Mean(usize),
    /// y = W·x with W row-major (rows×cols).
    MatVec {
        w: usize,
        x: usize,
        rows: usize,
        cols: usize,
    },
    /// y[i·n + j] = a[i]·b[j].
    Outer(usize, usize),
    Gather {
        x: usize,
        plan: Rc<GatherPlan>,
    },
}

struct Node {
    op: Op,
    value: Vec<f64>,
}

/// Append-only record of operations; nodes always reference earlier nodes,
/// so reverse iteration is a valid topological order for the backward sweep.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to one tape node. Cheap to copy; all arithmetic goes through
/// methods that append new nodes to the owning tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Adjoints produced by one backward sweep, indexed by node id.
pub struct Gradients<'t> {
    tape: &'t Tape,
    adjoints: Vec<Vec<f64>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops all nodes while keeping the allocation, so one tape can be
    /// reused across training steps.
    pub fn clear(&mut self) {
        self.nodes.borrow_mut().clear();
    }

    /// Lifts a finite scalar constant or parameter onto the tape.
    pub fn scalar(&self, x: f64) -> AdResult<Var<'_>> {
        self.vector(&[x])
    }

    /// Lifts a finite vector onto the tape.
    pub fn vector(&self, xs: &[f64]) -> AdResult<Var<'_>> {
        if xs.is_empty() {
            return Err(AdError::Shape {
                op: "lift",
                left: 0,
                right: 1,
            });
        }
        for &x in xs {
            if !x.is_finite() {
                return Err(AdError::NonFiniteInput { op: "lift", value: x });
            }
        }
        Ok(self.push(Op::Leaf, xs.to_vec()))
    }

    fn push(&self, op: Op, value: Vec<f64>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        debug_assert!(op_inputs(&op).iter().all(|&input| input < id));
        nodes.push(Node { op, value });
        Var { tape: self, id }
    }

    fn value_of(&self, id: usize) -> Vec<f64> {
        self.nodes.borrow()[id].value.clone()
    }

    fn len_of(&self, id: usize) -> usize {
        self.nodes.borrow()[id].value.len()
    }

    /// Reverse sweep from a scalar root. Nodes outside the root's ancestry
    /// keep zero adjoints; repeated sweeps produce identical results.
    pub fn backward(&self, root: Var<'_>) -> AdResult<Gradients<'_>> {
        if !std::ptr::eq(root.tape, self) {
            return Err(AdError::TapeMismatch { op: "backward" });
        }
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.len() != 1 {
            return Err(AdError::NonScalarRoot {
                len: nodes[root.id].value.len(),
            });
        }
        let mut adjoints: Vec<Vec<f64>> =
            nodes.iter().map(|n| vec![0.0; n.value.len()]).collect();
        let mut reached = vec![false; nodes.len()];
        adjoints[root.id][0] = 1.0;
        reached[root.id] = true;
        for id in (0..=root.id).rev() {
            if !reached[id] {
                continue;
            }
            for &input in op_inputs(&nodes[id].op).iter() {
                reached[input] = true;
            }
            propagate(&nodes, id, &mut adjoints);
        }
        drop(nodes);
        Ok(Gradients {
            tape: self,
            adjoints,
        })
    }

    /// One line per node: id, opcode, inputs, shape, value summary.
    pub fn dump(&self) -> String {
        let nodes = self.nodes.borrow();
        let mut out = String::new();
        for (id, node) in nodes.iter().enumerate() {
            let inputs = op_inputs(&node.op);
            let summary = if node.value.len() == 1 {
                format!("{:.6e}", node.value[0])
            } else {
                let min = node.value.iter().cloned().fold(f64::INFINITY, f64::min);
                let max = node.value.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                format!("min {min:.6e} max {max:.6e}")
            };
            let coeffs = match node.op {
                Op::Affine { mul, add, .. } => format!(" mul {mul:.6e} add {add:.6e}"),
                _ => String::new(),
            };
            let _ = writeln!(
                out,
                "{id:06} {:<12} inputs {:?} len {}{} {}",
                op_name(&node.op),
                inputs,
                node.value.len(),
                coeffs,
                summary
            );
        }
        out
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn len(&self) -> usize {
        self.tape.len_of(self.id)
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.value_of(self.id)
    }

    /// Value of a length-1 node.
    pub fn scalar_value(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "scalar_value called on a length-{} node", v.len());
        v[0]
    }

    fn same_tape(&self, other: Var<'t>, op: &'static str) -> AdResult<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(AdError::TapeMismatch { op })
        }
    }

    fn binary(
        &self,
        other: Var<'t>,
        op_name: &'static str,
        make: impl FnOnce(usize, usize) -> Op,
        eval: impl Fn(f64, f64) -> f64,
    ) -> AdResult<Var<'t>> {
        self.same_tape(other, op_name)?;
        let a = self.value();
        let b = other.value();
        let out_len = broadcast_len(op_name, a.len(), b.len())?;
        let mut value = Vec::with_capacity(out_len);
        for i in 0..out_len {
            value.push(eval(a[bcast(i, a.len())], b[bcast(i, b.len())]));
        }
        Ok(self.tape.push(make(self.id, other.id), value))
    }

    fn unary(
        &self,
        make: impl FnOnce(usize) -> Op,
        eval: impl Fn(f64) -> f64,
    ) -> AdResult<Var<'t>> {
        let value = self.value().iter().map(|&x| eval(x)).collect();
        Ok(self.tape.push(make(self.id), value))
    }

    pub fn add(&self, other: Var<'t>) -> AdResult<Var<'t>> {
        self.binary(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t>) -> AdResult<Var<'t>> {
        self.binary(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t>) -> AdResult<Var<'t>> {
        self.binary(other, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: Var<'t>) -> AdResult<Var<'t>> {
        self.same_tape(other, "div")?;
        for &b in &other.value() {
            if b == 0.0 {
                return Err(AdError::Domain {
                    op: "div",
                    value: b,
                    requirement: "nonzero",
                });
            }
        }
        self.binary(other, "div", Op::Div, |a, b| a / b)
    }

    /// y = a^b elementwise; requires a strictly positive base so both
    /// pullbacks (b·a^(b−1) and a^b·ln a) are finite.
    pub fn pow(&self, exponent: Var<'t>) -> AdResult<Var<'t>> {
        self.same_tape(exponent, "pow")?;
        for &a in &self.value() {
            if !(a > 0.0) {
                return Err(AdError::Domain {
                    op: "pow",
                    value: a,
                    requirement: "> 0",
                });
            }
        }
        self.binary(exponent, "pow", Op::Pow, f64::powf)
    }

    /// Elementwise minimum; ties keep the gradient on `self`.
    pub fn min(&self, other: Var<'t>) -> AdResult<Var<'t>> {
        self.binary(other, "min", Op::Min, f64::min)
    }

    /// Elementwise maximum; ties keep the gradient on `self`.
    pub fn max(&self, other: Var<'t>) -> AdResult<Var<'t>> {
        self.binary(other, "max", Op::Max, f64::max)
    }

    /// y = mul·x + add with constant coefficients.
    pub fn affine(&self, mul: f64, add: f64) -> AdResult<Var<'t>> {
        if !mul.is_finite() || !add.is_finite() {
            return Err(AdError::NonFiniteInput {
                op: "affine",
                value: if mul.is_finite() { add } else { mul },
            });
        }
        let value = self.value().iter().map(|&x| mul * x + add).collect();
        Ok(self
            .tape
            .push(Op::Affine { x: self.id, mul, add }, value))
    }

    pub fn neg(&self) -> AdResult<Var<'t>> {
        self.unary(Op::Neg, |x| -x)
    }

    /// 1 − x, a common subexpression in the reflectance formulas.
    pub fn one_minus(&self) -> AdResult<Var<'t>> {
        self.affine(-1.0, 1.0)
    }

    pub fn square(&self) -> AdResult<Var<'t>> {
        self.mul(*self)
    }

    pub fn exp(&self) -> AdResult<Var<'t>> {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn log(&self) -> AdResult<Var<'t>> {
        for &x in &self.value() {
            if !(x > 0.0) {
                return Err(AdError::Domain {
                    op: "log",
                    value: x,
                    requirement: "> 0",
                });
            }
        }
        self.unary(Op::Log, f64::ln)
    }

    pub fn sqrt(&self) -> AdResult<Var<'t>> {
        for &x in &self.value() {
            if x < 0.0 {
                return Err(AdError::Domain {
                    op: "sqrt",
                    value: x,
                    requirement: "≥ 0",
                });
            }
        }
        self.unary(Op::Sqrt, f64::sqrt)
    }

    pub fn sigmoid(&self) -> AdResult<Var<'t>> {
        self.unary(Op::Sigmoid, sigmoid)
    }

    pub fn tanh(&self) -> AdResult<Var<'t>> {
        self.unary(Op::Tanh, f64::tanh)
    }

    pub fn relu(&self) -> AdResult<Var<'t>> {
        self.unary(Op::Relu, |x| x.max(0.0))
    }

    /// Exponential integral E1(x) for strictly positive input.
    pub fn exp1(&self) -> AdResult<Var<'t>> {
        for &x in &self.value() {
            if !(x > 0.0) {
                return Err(AdError::Domain {
                    op: "exp1",
                    value: x,
                    requirement: "> 0",
                });
            }
        }
        self.unary(Op::Exp1, exp1::exp1)
    }

    /// Replaces exact zeros with machine epsilon; replaced entries are
    /// treated as constants by the backward sweep.
    pub fn replace_zero_with_epsilon(&self) -> AdResult<Var<'t>> {
        self.unary(Op::ReplaceZero, |x| {
            if x == 0.0 {
                f64::EPSILON
            } else {
                x
            }
        })
    }

    pub fn sum(&self) -> AdResult<Var<'t>> {
        let total = self.value().iter().sum();
        Ok(self.tape.push(Op::Sum(self.id), vec![total]))
    }

    pub fn mean(&self) -> AdResult<Var<'t>> {
        let v = self.value();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        Ok(self.tape.push(Op::Mean(self.id), vec![mean]))
    }

    /// Matrix-vector product with `self` as the row-major rows×cols matrix.
    pub fn matvec(&self, x: Var<'t>, rows: usize, cols: usize) -> AdResult<Var<'t>> {
        self.same_tape(x, "matvec")?;
        let w = self.value();
        let v = x.value();
        if w.len() != rows * cols {
            return Err(AdError::Shape {
                op: "matvec",
                left: w.len(),
                right: rows * cols,
            });
        }
        if v.len() != cols {
            return Err(AdError::Shape {
                op: "matvec",
                left: v.len(),
                right: cols,
            });
        }
        let mut value = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &w[r * cols..(r + 1) * cols];
            value.push(row.iter().zip(&v).map(|(a, b)| a * b).sum());
        }
        Ok(self.tape.push(
            Op::MatVec {
                w: self.id,
                x: x.id,
                rows,
                cols,
            },
            value,
        ))
    }

    /// Outer product: (m)·(n) → row-major m×n.
    pub fn outer(&self, other: Var<'t>) -> AdResult<Var<'t>> {
        self.same_tape(other, "outer")?;
        let a = self.value();
        let b = other.value();
        let mut value = Vec::with_capacity(a.len() * b.len());
        for &ai in &a {
            for &bj in &b {
                value.push(ai * bj);
            }
        }
        Ok(self.tape.push(Op::Outer(self.id, other.id), value))
    }

    /// Applies a sparse row-wise linear map (see [`GatherPlan`]).
    pub fn gather(&self, plan: &Rc<GatherPlan>) -> AdResult<Var<'t>> {
        let v = self.value();
        let mut value = Vec::with_capacity(plan.rows.len());
        for row in &plan.rows {
            if row.indices.len() != row.weights.len() {
                return Err(AdError::Shape {
                    op: "gather",
                    left: row.indices.len(),
                    right: row.weights.len(),
                });
            }
            let mut acc = 0.0;
            for (&idx, &w) in row.indices.iter().zip(&row.weights) {
                if idx >= v.len() {
                    return Err(AdError::IndexOutOfRange {
                        op: "gather",
                        index: idx,
                        len: v.len(),
                    });
                }
                acc += w * v[idx];
            }
            value.push(acc);
        }
        Ok(self.tape.push(
            Op::Gather {
                x: self.id,
                plan: Rc::clone(plan),
            },
            value,
        ))
    }

    /// Extracts one element as a scalar node.
    pub fn component(&self, index: usize) -> AdResult<Var<'t>> {
        let plan = Rc::new(GatherPlan {
            rows: vec![GatherRow {
                indices: vec![index],
                weights: vec![1.0],
            }],
        });
        self.gather(&plan)
    }

    /// Clamp to constant bounds, built from min/max nodes.
    pub fn clamp_const(&self, lo: f64, hi: f64) -> AdResult<Var<'t>> {
        let lo_node = self.tape.scalar(lo)?;
        let hi_node = self.tape.scalar(hi)?;
        self.max(lo_node)?.min(hi_node)
    }
}

impl<'t> Gradients<'t> {
    /// Adjoint vector of the given node (zeros if it is outside the root's
    /// ancestry).
    pub fn wrt(&self, v: Var<'t>) -> AdResult<&[f64]> {
        if !std::ptr::eq(v.tape, self.tape) {
            return Err(AdError::TapeMismatch { op: "gradients" });
        }
        Ok(&self.adjoints[v.id])
    }

    pub fn scalar_wrt(&self, v: Var<'t>) -> AdResult<f64> {
        let g = self.wrt(v)?;
        if g.len() != 1 {
            return Err(AdError::Shape {
                op: "gradients",
                left: g.len(),
                right: 1,
            });
        }
        Ok(g[0])
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn broadcast_len(op: &'static str, a: usize, b: usize) -> AdResult<usize> {
    if a == b {
        Ok(a)
    } else if a == 1 {
        Ok(b)
    } else if b == 1 {
        Ok(a)
    } else {
        Err(AdError::Shape {
            op,
            left: a,
            right: b,
        })
    }
}

fn bcast(i: usize, len: usize) -> usize {
    if len == 1 {
        0
    } else {
        i
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Affine { .. } => "affine",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::Pow(..) => "pow",
        Op::Min(..) => "min",
        Op::Max(..) => "max",
        Op::Neg(..) => "neg",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Sqrt(..) => "sqrt",
        Op::Sigmoid(..) => "sigmoid",
        Op::Tanh(..) => "tanh",
        Op::Relu(..) => "relu",
        Op::Exp1(..) => "exp1",
        Op::ReplaceZero(..) => "replace_zero",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::MatVec { .. } => "matvec",
        Op::Outer(..) => "outer",
        Op::Gather { .. } => "gather",
    }
}

fn op_inputs(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::Affine { x, .. }
        | Op::Neg(x)
        | Op::Exp(x)
        | Op::Log(x)
        | Op::Sqrt(x)
        | Op::Sigmoid(x)
        | Op::Tanh(x)
        | Op::Relu(x)
        | Op::Exp1(x)
        | Op::ReplaceZero(x)
        | Op::Sum(x)
        | Op::Mean(x)
        | Op::Gather { x, .. } => vec![*x],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::Pow(a, b)
        | Op::Min(a, b)
        | Op::Max(a, b)
        | Op::Outer(a, b) => vec![*a, *b],
        Op::MatVec { w, x, .. } => vec![*w, *x],
    }
}

/// Adds the local pullback of node `id` into its inputs' adjoints.
fn propagate(nodes: &[Node], id: usize, adjoints: &mut Vec<Vec<f64>>) {
    let adj = adjoints[id].clone();
    let node = &nodes[id];
    match node.op {
        Op::Leaf => {}
        Op::Affine { x, mul, .. } => {
            accumulate_unary(&mut adjoints[x], &adj, |_, g| mul * g, &nodes[x].value);
        }
        Op::Neg(x) => accumulate_unary(&mut adjoints[x], &adj, |_, g| -g, &nodes[x].value),
        Op::Exp(x) => {
            let y = &node.value;
            for i in 0..adj.len() {
                adjoints[x][i] += adj[i] * y[i];
            }
        }
        Op::Log(x) => {
            let input = &nodes[x].value;
            for i in 0..adj.len() {
                adjoints[x][i] += adj[i] / input[i];
            }
        }
        Op::Sqrt(x) => {
            let y = &node.value;
            for i in 0..adj.len() {
                adjoints[x][i] += adj[i] * 0.5 / y[i];
            }
        }
        Op::Sigmoid(x) => {
            let y = &node.value;
            for i in 0..adj.len() {
                adjoints[x][i] += adj[i] * y[i] * (1.0 - y[i]);
            }
        }
        Op::Tanh(x) => {
            let y = &node.value;
            for i in 0..adj.len() {
                adjoints[x][i] += adj[i] * (1.0 - y[i] * y[i]);
            }
        }
        Op::Relu(x) => {
            let input = &nodes[x].value;
            for i in 0..adj.len() {
                if input[i] > 0.0 {
                    adjoints[x][i] += adj[i];
                }
            }
        }
        Op::Exp1(x) => {
            let input = &nodes[x].value;
            for i in 0..adj.len() {
                adjoints[x][i] += adj[i] * exp1::exp1_derivative(input[i]);
            }
        }
        Op::ReplaceZero(x) => {
            let input = &nodes[x].value;
            for i in 0..adj.len() {
                if input[i] != 0.0 {
                    adjoints[x][i] += adj[i];
                }
            }
        }
        Op::Sum(x) => {
            let g = adj[0];
            for slot in adjoints[x].iter_mut() {
                *slot += g;
            }
        }
        Op::Mean(x) => {
            let n = nodes[x].value.len() as f64;
            let g = adj[0] / n;
            for slot in adjoints[x].iter_mut() {
                *slot += g;
            }
        }
        Op::Add(a, b) => {
            binary_pullback(nodes, adjoints, &adj, a, b, |_, _, g| (g, g));
        }
        Op::Sub(a, b) => {
            binary_pullback(nodes, adjoints, &adj, a, b, |_, _, g| (g, -g));
        }
        Op::Mul(a, b) => {
            binary_pullback(nodes, adjoints, &adj, a, b, |av, bv, g| (g * bv, g * av));
        }
        Op::Div(a, b) => {
            binary_pullback(nodes, adjoints, &adj, a, b, |av, bv, g| {
                (g / bv, -g * av / (bv * bv))
            });
        }
        Op::Pow(a, b) => {
            let y = node.value.clone();
            binary_pullback_with_out(nodes, adjoints, &adj, &y, a, b, |av, bv, yv, g| {
                (g * bv * yv / av, g * yv * av.ln())
            });
        }
        Op::Min(a, b) => {
            binary_pullback(nodes, adjoints, &adj, a, b, |av, bv, g| {
                if av <= bv {
                    (g, 0.0)
                } else {
                    (0.0, g)
                }
            });
        }
        Op::Max(a, b) => {
            binary_pullback(nodes, adjoints, &adj, a, b, |av, bv, g| {
                if av >= bv {
                    (g, 0.0)
                } else {
                    (0.0, g)
                }
            });
        }
        Op::MatVec { w, x, rows, cols } => {
            let wv = nodes[w].value.clone();
            let xv = nodes[x].value.clone();
            for r in 0..rows {
                let g = adj[r];
                if g == 0.0 {
                    continue;
                }
                for c in 0..cols {
                    adjoints[w][r * cols + c] += g * xv[c];
                    adjoints[x][c] += g * wv[r * cols + c];
                }
            }
        }
        Op::Outer(a, b) => {
            let av = nodes[a].value.clone();
            let bv = nodes[b].value.clone();
            let n = bv.len();
            for i in 0..av.len() {
                for j in 0..n {
                    let g = adj[i * n + j];
                    adjoints[a][i] += g * bv[j];
                    adjoints[b][j] += g * av[i];
                }
            }
        }
        Op::Gather { x, ref plan } => {
            for (r, row) in plan.rows.iter().enumerate() {
                let g = adj[r];
                for (&idx, &w) in row.indices.iter().zip(&row.weights) {
                    adjoints[x][idx] += g * w;
                }
            }
        }
    }
}

fn accumulate_unary(
    target: &mut [f64],
    adj: &[f64],
    pull: impl Fn(f64, f64) -> f64,
    input: &[f64],
) {
    for i in 0..adj.len() {
        target[i] += pull(input[i], adj[i]);
    }
}

fn binary_pullback(
    nodes: &[Node],
    adjoints: &mut [Vec<f64>],
    adj: &[f64],
    a: usize,
    b: usize,
    pull: impl Fn(f64, f64, f64) -> (f64, f64),
) {
    let av = nodes[a].value.clone();
    let bv = nodes[b].value.clone();
    for i in 0..adj.len() {
        let (ga, gb) = pull(av[bcast(i, av.len())], bv[bcast(i, bv.len())], adj[i]);
        adjoints[a][bcast(i, av.len())] += ga;
        adjoints[b][bcast(i, bv.len())] += gb;
    }
}

fn binary_pullback_with_out(
    nodes: &[Node],
    adjoints: &mut [Vec<f64>],
    adj: &[f64],
    out: &[f64],
    a: usize,
    b: usize,
    pull: impl Fn(f64, f64, f64, f64) -> (f64, f64),
) {
    let av = nodes[a].value.clone();
    let bv = nodes[b].value.clone();
    for i in 0..adj.len() {
        let (ga, gb) = pull(
            av[bcast(i, av.len())],
            bv[bcast(i, bv.len())],
            out[i],
            adj[i],
        );
        adjoints[a][bcast(i, av.len())] += ga;
        adjoints[b][bcast(i, bv.len())] += gb;
    }
}
