//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every operation evaluates eagerly and appends a node holding its value and
//! the references needed to propagate gradients. [`Tape::backward`] sweeps the
//! nodes in reverse order. Reductions accumulate in ascending index order, so
//! a forward pass is bit-reproducible for identical inputs.
//!
//! The tape also keeps a running hash of every data-dependent branch it takes
//! (ReLU signs, clamp saturation, sort orders recorded by callers). Two runs
//! with equal signatures evaluate the same smooth piece of a piecewise
//! function, which is what the finite-difference checker relies on.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Relu,
    Sigmoid,
    Tanh,
    Softplus,
    Ln,
    Abs,
    Exp,
    Square,
    Clamp(f64, f64),
    Scale(f64),
    Offset(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    Unary(Var, Unary),
    Binary(Var, Var, Binary),
    AddConst(Var, Tensor),
    MulConst(Var, Tensor),
    Linear { x: Var, w: Var, b: Option<Var> },
    Softmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { a: Var, start: usize, len: usize },
    SliceRows { a: Var, start: usize, len: usize },
    Gather { a: Var, idx: Vec<Option<usize>> },
    ScatterAdd { a: Var, idx: Vec<usize>, rows: usize },
    RepeatCols { a: Var, n: usize },
    Reshape { a: Var, shape: Vec<usize> },
    RowSums(Var),
    Sum(Var),
    DotConst(Var, Tensor),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation. Confined to one thread; create one per sequence.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    branch: u64,
}

impl std::fmt::Debug for Tape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

const MIX: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(h: u64, word: u64) -> u64 {
    (h ^ word).wrapping_mul(MIX).rotate_left(29)
}

fn hash_bits(mut h: u64, bits: impl Iterator<Item = bool>) -> u64 {
    let mut word = 0u64;
    let mut n = 0u32;
    for b in bits {
        word = (word << 1) | b as u64;
        n += 1;
        if n == 64 {
            h = mix(h, word);
            word = 0;
            n = 0;
        }
    }
    mix(h, word ^ ((n as u64) << 56))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            // NaN passes through so non-finite values stay detectable
            Unary::Relu => {
                if x > 0.0 || x.is_nan() {
                    x
                } else {
                    0.0
                }
            }
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Softplus => softplus(x),
            Unary::Ln => x.ln(),
            Unary::Abs => x.abs(),
            Unary::Exp => x.exp(),
            Unary::Square => x * x,
            Unary::Clamp(lo, hi) => x.clamp(lo, hi),
            Unary::Scale(s) => x * s,
            Unary::Offset(c) => x + c,
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Softplus => sigmoid(x),
            Unary::Ln => 1.0 / x,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Exp => y,
            Unary::Square => 2.0 * x,
            Unary::Clamp(lo, hi) => {
                if x >= lo && x <= hi {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Scale(s) => s,
            Unary::Offset(_) => 1.0,
        }
    }

    fn branch(self, x: f64) -> Option<bool> {
        match self {
            Unary::Relu => Some(x > 0.0),
            Unary::Abs => Some(x >= 0.0),
            Unary::Clamp(lo, hi) => Some(x >= lo && x <= hi),
            _ => None,
        }
    }
}

impl Binary {
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn eval(op: &Op, nodes: &[Node]) -> Tensor {
    let val = |v: &Var| &nodes[v.0].value;
    match op {
        Op::Leaf | Op::Param => unreachable!("leaves carry their own value"),
        Op::Unary(a, u) => {
            let a = val(a);
            let data = a.data().iter().map(|&x| u.apply(x)).collect();
            Tensor::new(a.shape().to_vec(), data).unwrap()
        }
        Op::Binary(a, b, k) => {
            let (a, b) = (val(a), val(b));
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| k.apply(x, y))
                .collect();
            Tensor::new(a.shape().to_vec(), data).unwrap()
        }
        Op::AddConst(a, c) => {
            let a = val(a);
            let data = a.data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
            Tensor::new(a.shape().to_vec(), data).unwrap()
        }
        Op::MulConst(a, c) => {
            let a = val(a);
            let data = a.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
            Tensor::new(a.shape().to_vec(), data).unwrap()
        }
        Op::Linear { x, w, b } => {
            let (x, w) = (val(x), val(w));
            let (rows, inp) = (x.rows(), x.cols());
            let out = w.rows();
            let mut data = vec![0.0; rows * out];
            let bias = b.map(|b| val(&b).data());
            for r in 0..rows {
                let xr = &x.data()[r * inp..(r + 1) * inp];
                let yr = &mut data[r * out..(r + 1) * out];
                for (o, y) in yr.iter_mut().enumerate() {
                    let wr = &w.data()[o * inp..(o + 1) * inp];
                    let mut acc = 0.0;
                    for i in 0..inp {
                        acc += xr[i] * wr[i];
                    }
                    *y = acc + bias.map_or(0.0, |b| b[o]);
                }
            }
            Tensor::matrix(rows, out, data)
        }
        Op::Softmax(a) => {
            let a = val(a);
            let c = a.cols();
            let mut data = a.data().to_vec();
            if c > 0 {
                for row in data.chunks_mut(c) {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= sum;
                    }
                }
            }
            Tensor::new(a.shape().to_vec(), data).unwrap()
        }
        Op::ConcatCols(parts) => {
            let rows = val(&parts[0]).rows();
            let cols: usize = parts.iter().map(|p| val(p).cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(val(p).row(r));
                }
            }
            Tensor::matrix(rows, cols, data)
        }
        Op::ConcatRows(parts) => {
            let cols = val(&parts[0]).cols();
            let mut data = Vec::new();
            for p in parts {
                data.extend_from_slice(val(p).data());
            }
            let rows = data.len() / cols.max(1);
            Tensor::matrix(rows, cols, data)
        }
        Op::SliceCols { a, start, len } => {
            let a = val(a);
            let mut data = Vec::with_capacity(a.rows() * len);
            for r in 0..a.rows() {
                data.extend_from_slice(&a.row(r)[*start..start + len]);
            }
            Tensor::matrix(a.rows(), *len, data)
        }
        Op::SliceRows { a, start, len } => {
            let a = val(a);
            let c = a.cols();
            Tensor::matrix(*len, c, a.data()[start * c..(start + len) * c].to_vec())
        }
        Op::Gather { a, idx } => {
            let a = val(a);
            let c = a.cols();
            let mut data = Vec::with_capacity(idx.len() * c);
            for i in idx {
                match i {
                    Some(r) => data.extend_from_slice(a.row(*r)),
                    None => data.extend(std::iter::repeat(0.0).take(c)),
                }
            }
            Tensor::matrix(idx.len(), c, data)
        }
        Op::ScatterAdd { a, idx, rows } => {
            let a = val(a);
            let c = a.cols();
            let mut data = vec![0.0; rows * c];
            for (src, &dst) in idx.iter().enumerate() {
                let out = &mut data[dst * c..(dst + 1) * c];
                for (o, v) in out.iter_mut().zip(a.row(src)) {
                    *o += v;
                }
            }
            Tensor::matrix(*rows, c, data)
        }
        Op::RepeatCols { a, n } => {
            let a = val(a);
            let mut data = Vec::with_capacity(a.len() * n);
            for &v in a.data() {
                data.extend(std::iter::repeat(v).take(*n));
            }
            Tensor::matrix(a.len(), *n, data)
        }
        Op::Reshape { a, shape } => val(a).clone().reshaped(shape.clone()).unwrap(),
        Op::RowSums(a) => {
            let a = val(a);
            let data = (0..a.rows()).map(|r| a.row(r).iter().sum()).collect();
            Tensor::matrix(a.rows(), 1, data)
        }
        Op::Sum(a) => Tensor::scalar(val(a).data().iter().sum()),
        Op::DotConst(a, w) => Tensor::scalar(
            val(a)
                .data()
                .iter()
                .zip(w.data())
                .map(|(x, y)| x * y)
                .sum(),
        ),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Hash of all data-dependent branches taken so far.
    pub fn branch_signature(&self) -> u64 {
        self.branch
    }

    /// Folds an externally made discrete decision (argmax, sort order,
    /// threshold) into the branch signature.
    pub fn record_branch(&mut self, word: u64) {
        self.branch = mix(self.branch, word);
    }

    fn push(&mut self, op: Op) -> Var {
        let value = eval(&op, &self.nodes);
        if let Op::Unary(a, u) = &op {
            if u.branch(0.0).is_some() {
                let u = *u;
                let x = &self.nodes[a.0].value;
                self.branch = hash_bits(self.branch, x.data().iter().map(|&v| u.branch(v).unwrap()));
            }
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter tensor; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Param,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// `x·Wᵀ + b` for `x: [R, I]`, `W: [O, I]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.cols() != wv.cols() || wv.shape().len() != 2 {
            return Err(shape_err("linear", xv, wv));
        }
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != wv.rows() {
                return Err(shape_err("linear bias", wv, bv));
            }
        }
        Ok(self.push(Op::Linear { x, w, b }))
    }

    fn unary(&mut self, a: Var, u: Unary) -> Var {
        self.push(Op::Unary(a, u))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Ln)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Unary::Clamp(lo, hi))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Unary::Scale(s))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Unary::Offset(c))
    }

    fn binary(&mut self, a: Var, b: Var, k: Binary, name: &'static str) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av, bv));
        }
        Ok(self.push(Op::Binary(a, b, k)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div, "div")
    }

    pub fn add_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        if self.value(a).shape() != c.shape() {
            return Err(shape_err("add_const", self.value(a), &c));
        }
        Ok(self.push(Op::AddConst(a, c)))
    }

    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        if self.value(a).shape() != c.shape() {
            return Err(shape_err("mul_const", self.value(a), &c));
        }
        Ok(self.push(Op::MulConst(a, c)))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        self.push(Op::Softmax(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        for p in &parts[1..] {
            if self.value(*p).rows() != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]), self.value(*p)));
            }
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        for p in &parts[1..] {
            if self.value(*p).cols() != cols {
                return Err(shape_err("concat_rows", self.value(parts[0]), self.value(*p)));
            }
        }
        Ok(self.push(Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        if start + len > self.value(a).cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                left: self.value(a).shape().to_vec(),
                right: vec![start, len],
            });
        }
        Ok(self.push(Op::SliceCols { a, start, len }))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        if start + len > self.value(a).rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                left: self.value(a).shape().to_vec(),
                right: vec![start, len],
            });
        }
        Ok(self.push(Op::SliceRows { a, start, len }))
    }

    /// Output row `k` is row `idx[k]` of `a`, or zeros for `None`.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<Option<usize>>) -> Result<Var> {
        let rows = self.value(a).rows();
        if let Some(bad) = idx.iter().flatten().find(|&&i| i >= rows) {
            return Err(Error::Shape {
                op: "gather_rows",
                left: self.value(a).shape().to_vec(),
                right: vec![*bad],
            });
        }
        Ok(self.push(Op::Gather { a, idx }))
    }

    /// Adds row `k` of `a` into output row `idx[k]`; output has `rows` rows.
    /// Rows are accumulated in ascending `k`.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Vec<usize>, rows: usize) -> Result<Var> {
        let av = self.value(a);
        if idx.len() != av.rows() || idx.iter().any(|&i| i >= rows) {
            return Err(Error::Shape {
                op: "scatter_add_rows",
                left: av.shape().to_vec(),
                right: vec![idx.len(), rows],
            });
        }
        Ok(self.push(Op::ScatterAdd { a, idx, rows }))
    }

    /// `[R, 1] → [R, n]` by copying the column.
    pub fn repeat_cols(&mut self, a: Var, n: usize) -> Result<Var> {
        if self.value(a).cols() != 1 {
            return Err(Error::Shape {
                op: "repeat_cols",
                left: self.value(a).shape().to_vec(),
                right: vec![n],
            });
        }
        Ok(self.push(Op::RepeatCols { a, n }))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.value(a).shape().to_vec(),
                right: shape,
            });
        }
        Ok(self.push(Op::Reshape { a, shape }))
    }

    /// `[R, C] → [R, 1]`.
    pub fn row_sums(&mut self, a: Var) -> Var {
        self.push(Op::RowSums(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum(a))
    }

    /// Scalar `Σ aᵢ·wᵢ` with constant weights.
    pub fn dot_const(&mut self, a: Var, w: Tensor) -> Result<Var> {
        if self.value(a).len() != w.len() {
            return Err(shape_err("dot_const", self.value(a), &w));
        }
        Ok(self.push(Op::DotConst(a, w)))
    }

    /// Sum of scalar nodes, accumulated left to right.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        match terms {
            [] => Ok(self.constant(Tensor::scalar(0.0))),
            [first, rest @ ..] => {
                let mut acc = *first;
                for t in rest {
                    acc = self.add(acc, *t)?;
                }
                Ok(acc)
            }
        }
    }

    /// Re-evaluates every recorded operation from the stored leaves and checks
    /// that each node value is reproduced bit-exactly.
    pub fn replay_matches(&self) -> bool {
        let mut replayed: Vec<Node> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match node.op {
                Op::Leaf | Op::Param => node.value.clone(),
                ref op => eval(op, &replayed),
            };
            if !value.bit_eq(&node.value) {
                return false;
            }
            replayed.push(Node {
                value,
                op: node.op.clone(),
            });
        }
        true
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if !out.is_scalar() {
            return Err(Error::Shape {
                op: "backward (output must be scalar)",
                left: out.shape().to_vec(),
                right: vec![1],
            });
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[output.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            let keep = matches!(node.op, Op::Leaf | Op::Param);
            let g = if keep {
                continue;
            } else {
                match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                }
            };
            let val = |v: &Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf | Op::Param => unreachable!(),
                Op::Unary(a, u) => {
                    let x = val(a);
                    let y = &node.value;
                    let ga = acc(&mut grads, *a, x.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] * u.derivative(x.data()[k], y.data()[k]);
                    }
                }
                Op::Binary(a, b, kind) => {
                    let (av, bv) = (val(a).data(), val(b).data());
                    match kind {
                        Binary::Add | Binary::Sub => {
                            let sign = if *kind == Binary::Add { 1.0 } else { -1.0 };
                            let ga = acc(&mut grads, *a, g.len());
                            for k in 0..g.len() {
                                ga[k] += g[k];
                            }
                            let gb = acc(&mut grads, *b, g.len());
                            for k in 0..g.len() {
                                gb[k] += sign * g[k];
                            }
                        }
                        Binary::Mul => {
                            let ga = acc(&mut grads, *a, g.len());
                            for k in 0..g.len() {
                                ga[k] += g[k] * bv[k];
                            }
                            let gb = acc(&mut grads, *b, g.len());
                            for k in 0..g.len() {
                                gb[k] += g[k] * av[k];
                            }
                        }
                        Binary::Div => {
                            let ga = acc(&mut grads, *a, g.len());
                            for k in 0..g.len() {
                                ga[k] += g[k] / bv[k];
                            }
                            let gb = acc(&mut grads, *b, g.len());
                            for k in 0..g.len() {
                                gb[k] -= g[k] * av[k] / (bv[k] * bv[k]);
                            }
                        }
                    }
                }
                Op::AddConst(a, _) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k];
                    }
                }
                Op::MulConst(a, c) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] * c.data()[k];
                    }
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (val(x), val(w));
                    let (rows, inp, out) = (xv.rows(), xv.cols(), wv.rows());
                    {
                        let gx = acc(&mut grads, *x, rows * inp);
                        for r in 0..rows {
                            let gr = &g[r * out..(r + 1) * out];
                            let gxr = &mut gx[r * inp..(r + 1) * inp];
                            for (o, &go) in gr.iter().enumerate() {
                                if go == 0.0 {
                                    continue;
                                }
                                let wr = &wv.data()[o * inp..(o + 1) * inp];
                                for i in 0..inp {
                                    gxr[i] += go * wr[i];
                                }
                            }
                        }
                    }
                    {
                        let gw = acc(&mut grads, *w, out * inp);
                        for r in 0..rows {
                            let gr = &g[r * out..(r + 1) * out];
                            let xr = &xv.data()[r * inp..(r + 1) * inp];
                            for (o, &go) in gr.iter().enumerate() {
                                if go == 0.0 {
                                    continue;
                                }
                                let gwr = &mut gw[o * inp..(o + 1) * inp];
                                for i in 0..inp {
                                    gwr[i] += go * xr[i];
                                }
                            }
                        }
                    }
                    if let Some(b) = b {
                        let gb = acc(&mut grads, *b, out);
                        for r in 0..rows {
                            for o in 0..out {
                                gb[o] += g[r * out + o];
                            }
                        }
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let c = y.cols();
                    let ga = acc(&mut grads, *a, g.len());
                    if c > 0 {
                        for r in 0..y.rows() {
                            let yr = y.row(r);
                            let gr = &g[r * c..(r + 1) * c];
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for k in 0..c {
                                ga[r * c + k] += yr[k] * (gr[k] - dot);
                            }
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = node.value.rows();
                    let total = node.value.cols();
                    let mut start = 0;
                    for p in parts {
                        let pc = val(p).cols();
                        let gp = acc(&mut grads, *p, rows * pc);
                        for r in 0..rows {
                            for k in 0..pc {
                                gp[r * pc + k] += g[r * total + start + k];
                            }
                        }
                        start += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let len = val(p).len();
                        let gp = acc(&mut grads, *p, len);
                        for k in 0..len {
                            gp[k] += g[start + k];
                        }
                        start += len;
                    }
                }
                Op::SliceCols { a, start, len } => {
                    let av = val(a);
                    let c = av.cols();
                    let ga = acc(&mut grads, *a, av.len());
                    for r in 0..av.rows() {
                        for k in 0..*len {
                            ga[r * c + start + k] += g[r * len + k];
                        }
                    }
                }
                Op::SliceRows { a, start, len } => {
                    let av = val(a);
                    let c = av.cols();
                    let ga = acc(&mut grads, *a, av.len());
                    for k in 0..len * c {
                        ga[start * c + k] += g[k];
                    }
                }
                Op::Gather { a, idx } => {
                    let av = val(a);
                    let c = av.cols();
                    let ga = acc(&mut grads, *a, av.len());
                    for (k, i) in idx.iter().enumerate() {
                        if let Some(r) = i {
                            for j in 0..c {
                                ga[r * c + j] += g[k * c + j];
                            }
                        }
                    }
                }
                Op::ScatterAdd { a, idx, .. } => {
                    let av = val(a);
                    let c = av.cols();
                    let ga = acc(&mut grads, *a, av.len());
                    for (src, &dst) in idx.iter().enumerate() {
                        for j in 0..c {
                            ga[src * c + j] += g[dst * c + j];
                        }
                    }
                }
                Op::RepeatCols { a, n } => {
                    let len = val(a).len();
                    let ga = acc(&mut grads, *a, len);
                    for r in 0..len {
                        ga[r] += g[r * n..(r + 1) * n].iter().sum::<f64>();
                    }
                }
                Op::Reshape { a, .. } => {
                    let ga = acc(&mut grads, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k];
                    }
                }
                Op::RowSums(a) => {
                    let av = val(a);
                    let c = av.cols();
                    let ga = acc(&mut grads, *a, av.len());
                    for r in 0..av.rows() {
                        for j in 0..c {
                            ga[r * c + j] += g[r];
                        }
                    }
                }
                Op::Sum(a) => {
                    let len = val(a).len();
                    let ga = acc(&mut grads, *a, len);
                    for v in ga.iter_mut() {
                        *v += g[0];
                    }
                }
                Op::DotConst(a, w) => {
                    let ga = acc(&mut grads, *a, w.len());
                    for (v, wk) in ga.iter_mut().zip(w.data()) {
                        *v += g[0] * wk;
                    }
                }
            }
        }

        let params = self
            .params
            .iter()
            .filter(|(_, v)| v.0 < n)
            .map(|(&id, &v)| (id, v))
            .collect();
        Ok(Gradients { nodes: grads, params })
    }
}

/// Gradients of a scalar with respect to leaves and parameters of a tape.
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to a leaf or parameter node; `None` if it did not
    /// influence the output.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// Dense per-parameter gradients; parameters not on the tape get zeros.
    pub fn to_param_grads(&self, store: &ParamStore) -> ParamGrads {
        let mut out = ParamGrads::zeros(store);
        for &(id, v) in &self.params {
            if let Some(g) = self.wrt(v) {
                out.tensors[id.0].data_mut().copy_from_slice(g);
            }
        }
        out
    }
}

/// Gradients aligned with the tensors of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamGrads {
    pub tensors: Vec<Tensor>,
}

impl ParamGrads {
    pub fn zeros(store: &ParamStore) -> Self {
        Self {
            tensors: store
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            for x in t.data_mut() {
                *x *= s;
            }
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Euclidean norm over all entries.
    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}
