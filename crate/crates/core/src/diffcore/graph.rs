use std::collections::HashMap;

use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Source of values for the named inputs of a graph.
pub trait Inputs {
    fn lookup(&self, name: &str) -> Option<&Tensor>;
}

impl Inputs for HashMap<String, Tensor> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

impl Inputs for std::collections::BTreeMap<String, Tensor> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

impl<T: Inputs + ?Sized> Inputs for &T {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        (**self).lookup(name)
    }
}

/// Graph with no named inputs.
pub struct NoInputs;

impl Inputs for NoInputs {
    fn lookup(&self, _: &str) -> Option<&Tensor> {
        None
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input(String),
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// matrix + row vector broadcast over rows
    AddRow(Var, Var),
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulNt(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LogSoftmax(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    /// rows of a table selected by index
    Gather(Var, Vec<usize>),
    /// one element per row, `out[i] = a[i, idx[i]]`, as a column
    Pick(Var, Vec<usize>),
    /// pairwise squared euclidean distances between the rows of two matrices
    SqDist(Var, Var),
    /// elementwise `min(c, a)`
    MinConst(Var, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scalar-mul",
            Op::AddRow(..) => "add-row",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul-nt",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log-softmax",
            Op::ConcatRows(_) => "concat-rows",
            Op::SliceRows(..) => "slice-rows",
            Op::Gather(..) => "gather",
            Op::Pick(..) => "pick",
            Op::SqDist(..) => "sq-dist",
            Op::MinConst(..) => "min",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: [usize; 2],
    requires_grad: bool,
    value: Option<Tensor>,
    grad: Option<Tensor>,
}

/// Reverse-mode differentiation graph.
///
/// Nodes are appended in topological order while the graph is built, with
/// shapes checked at that point. [`Graph::forward`] binds the named inputs and
/// evaluates every node; [`Graph::backward`] walks the nodes in exact reverse
/// order. A graph can be re-evaluated with different inputs any number of times.
///
/// Gradients of leaves created with `requires_grad` accumulate across
/// `backward` calls until [`Graph::zero_grad`].
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    evaluated: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].shape
    }

    fn push(&mut self, op: Op, shape: [usize; 2], requires_grad: bool, value: Option<Tensor>) -> Var {
        self.evaluated = false;
        self.nodes.push(Node {
            op,
            shape,
            requires_grad,
            value,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Invalid(format!("variable {} does not belong to this graph", v.0)))
        }
    }

    /// Declares a named input of the given shape, bound at [`Graph::forward`].
    pub fn input(&mut self, name: &str, rows: usize, cols: usize, requires_grad: bool) -> Result<Var> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape("input", format!("`{name}` has an empty dimension")));
        }
        Ok(self.push(Op::Input(name.to_string()), [rows, cols], requires_grad, None))
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        let (r, c) = t.dims2()?;
        Ok(self.push(Op::Constant, [r, c], false, Some(t)))
    }

    fn same_shape(&mut self, op: Op, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op.name(), format!("{sa:?} vs {sb:?}")));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(op, sa, rg, None))
    }

    fn unary(&mut self, op: Op, a: Var, shape: [usize; 2]) -> Result<Var> {
        self.check(a)?;
        let rg = self.rg(a);
        Ok(self.push(op, shape, rg, None))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(Op::Add(a, b), a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(Op::Sub(a, b), a, b)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(Op::Mul(a, b), a, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        if !s.is_finite() {
            return Err(Error::Invalid(format!("scalar-mul by non-finite {s}")));
        }
        self.check(a)?;
        let shape = self.shape(a);
        self.unary(Op::Scale(a, s), a, shape)
    }

    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        self.check(m)?;
        self.check(row)?;
        let (sm, sr) = (self.shape(m), self.shape(row));
        if sr[0] != 1 || sr[1] != sm[1] {
            return Err(Error::shape("add-row", format!("{sm:?} + row {sr:?}")));
        }
        let rg = self.rg(m) || self.rg(row);
        Ok(self.push(Op::AddRow(m, row), sm, rg, None))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), [sa[0], sb[1]], rg, None))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[1] {
            return Err(Error::shape("matmul-nt", format!("{sa:?} x {sb:?}ᵀ")));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMulNt(a, b), [sa[0], sb[0]], rg, None))
    }

    /// ReLU. The subgradient at exactly 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.shape(a);
        self.unary(Op::Relu(a), a, s)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.shape(a);
        self.unary(Op::Exp(a), a, s)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.shape(a);
        self.unary(Op::Log(a), a, s)
    }

    /// Sum of all elements, as a `[1, 1]` scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Sum(a), a, [1, 1])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Mean(a), a, [1, 1])
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.shape(a);
        self.unary(Op::Softmax(a), a, s)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.shape(a);
        self.unary(Op::LogSoftmax(a), a, s)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat-rows", "no inputs"))?;
        for &p in parts {
            self.check(p)?;
        }
        let cols = self.shape(first)[1];
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[1] != cols {
                return Err(Error::shape(
                    "concat-rows",
                    format!("column counts differ: {cols} vs {}", s[1]),
                ));
            }
            rows += s[0];
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::ConcatRows(parts.to_vec()), [rows, cols], rg, None))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.check(a)?;
        let s = self.shape(a);
        if start >= end || end > s[0] {
            return Err(Error::shape("slice-rows", format!("rows {start}..{end} of {s:?}")));
        }
        self.unary(Op::SliceRows(a, start, end), a, [end - start, s[1]])
    }

    /// Embedding-style row lookup.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.check(table)?;
        let s = self.shape(table);
        if ids.is_empty() {
            return Err(Error::shape("gather", "empty index list"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(Error::shape("gather", format!("index {bad} out of range for {} rows", s[0])));
        }
        self.unary(Op::Gather(table, ids.to_vec()), table, [ids.len(), s[1]])
    }

    /// Column of `a[i, idx[i]]`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        self.check(a)?;
        let s = self.shape(a);
        if idx.len() != s[0] {
            return Err(Error::shape("pick", format!("{} indices for {} rows", idx.len(), s[0])));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[1]) {
            return Err(Error::shape("pick", format!("column {bad} out of range for {} columns", s[1])));
        }
        self.unary(Op::Pick(a, idx.to_vec()), a, [s[0], 1])
    }

    /// `out[i, j] = ‖a_i − b_j‖²`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[1] {
            return Err(Error::shape("sq-dist", format!("{sa:?} vs {sb:?}")));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::SqDist(a, b), [sa[0], sb[0]], rg, None))
    }

    /// Elementwise `min(c, a)`. Where `a >= c` the constant branch is taken and
    /// the gradient is 0.
    pub fn min_const(&mut self, a: Var, c: f64) -> Result<Var> {
        if !c.is_finite() {
            return Err(Error::Invalid(format!("min bound must be finite, got {c}")));
        }
        self.check(a)?;
        let s = self.shape(a);
        self.unary(Op::MinConst(a, c), a, s)
    }

    fn val(&self, v: Var) -> &Tensor {
        self.nodes[v.0]
            .value
            .as_ref()
            .expect("operands are evaluated before their consumers")
    }

    /// Binds the named inputs and evaluates every node.
    pub fn forward(&mut self, inputs: &dyn Inputs) -> Result<()> {
        self.evaluated = false;
        for i in 0..self.nodes.len() {
            let value = self.eval_node(i, inputs)?;
            if let Some(t) = value {
                if !t.is_finite() {
                    return Err(Error::NonFinite {
                        op: self.nodes[i].op.name(),
                    });
                }
                self.nodes[i].value = Some(t);
            }
        }
        self.evaluated = true;
        Ok(())
    }

    /// Evaluates the graph and returns a copy of `out`.
    pub fn eval(&mut self, inputs: &dyn Inputs, out: Var) -> Result<Tensor> {
        self.check(out)?;
        self.forward(inputs)?;
        Ok(self.val(out).clone())
    }

    /// Value of `v` from the last forward pass.
    pub fn value(&self, v: Var) -> Result<&Tensor> {
        self.check(v)?;
        if !self.evaluated {
            return Err(Error::NotEvaluated);
        }
        Ok(self.val(v))
    }

    fn eval_node(&self, i: usize, inputs: &dyn Inputs) -> Result<Option<Tensor>> {
        let node = &self.nodes[i];
        let [rows, cols] = node.shape;
        let t = |data: Vec<f64>| Tensor::matrix(rows, cols, data).map(Some);
        match &node.op {
            Op::Constant => Ok(None),
            Op::Input(name) => {
                let v = inputs.lookup(name).ok_or_else(|| Error::Unbound(name.clone()))?;
                if v.shape() != [rows, cols] {
                    return Err(Error::shape(
                        "input",
                        format!("`{name}` declared {:?}, bound {:?}", [rows, cols], v.shape()),
                    ));
                }
                Ok(Some(v.clone()))
            }
            Op::Add(a, b) => t(zip(self.val(*a), self.val(*b), |x, y| x + y)),
            Op::Sub(a, b) => t(zip(self.val(*a), self.val(*b), |x, y| x - y)),
            Op::Mul(a, b) => t(zip(self.val(*a), self.val(*b), |x, y| x * y)),
            Op::Scale(a, s) => t(map(self.val(*a), |x| x * s)),
            Op::AddRow(m, r) => {
                let r = self.val(*r).data();
                let mut out = self.val(*m).data().to_vec();
                for row in out.chunks_mut(cols) {
                    for (o, b) in row.iter_mut().zip(r) {
                        *o += b;
                    }
                }
                t(out)
            }
            Op::MatMul(a, b) => {
                let k = self.nodes[a.0].shape[1];
                t(matmul(self.val(*a).data(), self.val(*b).data(), rows, k, cols))
            }
            Op::MatMulNt(a, b) => {
                let k = self.nodes[a.0].shape[1];
                t(matmul_nt(self.val(*a).data(), self.val(*b).data(), rows, k, cols))
            }
            Op::Relu(a) => t(map(self.val(*a), |x| if x > 0.0 { x } else { 0.0 })),
            Op::Exp(a) => t(map(self.val(*a), f64::exp)),
            Op::Log(a) => {
                let av = self.val(*a);
                if let Some(&bad) = av.data().iter().find(|&&x| x <= 0.0) {
                    return Err(Error::LogDomain { op: "log", value: bad });
                }
                t(map(av, f64::ln))
            }
            Op::Sum(a) => t(vec![self.val(*a).data().iter().sum()]),
            Op::Mean(a) => {
                let av = self.val(*a);
                t(vec![av.data().iter().sum::<f64>() / av.len() as f64])
            }
            Op::Softmax(a) => {
                let mut out = self.val(*a).data().to_vec();
                for row in out.chunks_mut(cols) {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x - m).exp();
                        z += *x;
                    }
                    for x in row.iter_mut() {
                        *x /= z;
                    }
                }
                t(out)
            }
            Op::LogSoftmax(a) => {
                let mut out = self.val(*a).data().to_vec();
                for row in out.chunks_mut(cols) {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                    for x in row.iter_mut() {
                        *x -= lse;
                    }
                }
                t(out)
            }
            Op::ConcatRows(parts) => {
                let mut out = Vec::with_capacity(rows * cols);
                for p in parts {
                    out.extend_from_slice(self.val(*p).data());
                }
                t(out)
            }
            Op::SliceRows(a, s, e) => t(self.val(*a).data()[s * cols..e * cols].to_vec()),
            Op::Gather(table, ids) => {
                let tv = self.val(*table);
                let mut out = Vec::with_capacity(rows * cols);
                for &id in ids {
                    out.extend_from_slice(tv.row_slice(id));
                }
                t(out)
            }
            Op::Pick(a, idx) => {
                let av = self.val(*a);
                t(idx.iter().enumerate().map(|(i, &j)| av.row_slice(i)[j]).collect())
            }
            Op::SqDist(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let mut out = Vec::with_capacity(rows * cols);
                for i in 0..rows {
                    let x = av.row_slice(i);
                    for j in 0..cols {
                        let y = bv.row_slice(j);
                        out.push(x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum());
                    }
                }
                t(out)
            }
            Op::MinConst(a, c) => t(map(self.val(*a), |x| if x < *c { x } else { *c })),
        }
    }

    /// Accumulates `∂output/∂leaf` into every `requires_grad` leaf.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        self.check(output)?;
        if !self.evaluated {
            return Err(Error::NotEvaluated);
        }
        let shape = self.shape(output);
        if shape != [1, 1] {
            return Err(Error::NonScalar(shape.to_vec()));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[output.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let [rows, cols] = self.nodes[i].shape;
            match &self.nodes[i].op {
                Op::Input(_) => {
                    let gt = Tensor::matrix(rows, cols, g)?;
                    match &mut self.nodes[i].grad {
                        Some(acc) => acc.add_assign(&gt),
                        slot @ None => *slot = Some(gt),
                    }
                }
                Op::Constant => {}
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, |d| add_into(d, &g));
                    self.acc(&mut grads, *b, |d| add_into(d, &g));
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, |d| add_into(d, &g));
                    self.acc(&mut grads, *b, |d| {
                        for (x, y) in d.iter_mut().zip(&g) {
                            *x -= y;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                    self.acc(&mut grads, *a, |d| {
                        for ((x, gi), bi) in d.iter_mut().zip(&g).zip(bv) {
                            *x += gi * bi;
                        }
                    });
                    self.acc(&mut grads, *b, |d| {
                        for ((x, gi), ai) in d.iter_mut().zip(&g).zip(av) {
                            *x += gi * ai;
                        }
                    });
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    self.acc(&mut grads, *a, |d| {
                        for (x, gi) in d.iter_mut().zip(&g) {
                            *x += s * gi;
                        }
                    });
                }
                Op::AddRow(m, r) => {
                    self.acc(&mut grads, *m, |d| add_into(d, &g));
                    self.acc(&mut grads, *r, |d| {
                        for row in g.chunks(cols) {
                            add_into(d, row);
                        }
                    });
                }
                Op::MatMul(a, b) => {
                    let k = self.nodes[a.0].shape[1];
                    let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                    if self.rg(*a) {
                        let ga = matmul_nt(&g, bv, rows, cols, k);
                        self.acc(&mut grads, *a, |d| add_into(d, &ga));
                    }
                    if self.rg(*b) {
                        let gb = matmul_tn(av, &g, rows, k, cols);
                        self.acc(&mut grads, *b, |d| add_into(d, &gb));
                    }
                }
                Op::MatMulNt(a, b) => {
                    // out = a bᵀ: ga = g b, gb = gᵀ a
                    let k = self.nodes[a.0].shape[1];
                    let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                    if self.rg(*a) {
                        let ga = matmul(&g, bv, rows, cols, k);
                        self.acc(&mut grads, *a, |d| add_into(d, &ga));
                    }
                    if self.rg(*b) {
                        let gb = matmul_tn(&g, av, rows, cols, k);
                        self.acc(&mut grads, *b, |d| add_into(d, &gb));
                    }
                }
                Op::Relu(a) => {
                    let av = self.val(*a).data();
                    self.acc(&mut grads, *a, |d| {
                        for ((x, gi), ai) in d.iter_mut().zip(&g).zip(av) {
                            if *ai > 0.0 {
                                *x += gi;
                            }
                        }
                    });
                }
                Op::Exp(a) => {
                    let out = self.val(Var(i)).data();
                    self.acc(&mut grads, *a, |d| {
                        for ((x, gi), oi) in d.iter_mut().zip(&g).zip(out) {
                            *x += gi * oi;
                        }
                    });
                }
                Op::Log(a) => {
                    let av = self.val(*a).data();
                    self.acc(&mut grads, *a, |d| {
                        for ((x, gi), ai) in d.iter_mut().zip(&g).zip(av) {
                            *x += gi / ai;
                        }
                    });
                }
                Op::Sum(a) => {
                    let g0 = g[0];
                    self.acc(&mut grads, *a, |d| d.iter_mut().for_each(|x| *x += g0));
                }
                Op::Mean(a) => {
                    let g0 = g[0] / self.val(*a).len() as f64;
                    self.acc(&mut grads, *a, |d| d.iter_mut().for_each(|x| *x += g0));
                }
                Op::Softmax(a) => {
                    let y = self.val(Var(i)).data();
                    self.acc(&mut grads, *a, |d| {
                        for ((dr, gr), yr) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                            let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                            for ((x, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                                *x += yi * (gi - dot);
                            }
                        }
                    });
                }
                Op::LogSoftmax(a) => {
                    let y = self.val(Var(i)).data();
                    self.acc(&mut grads, *a, |d| {
                        for ((dr, gr), yr) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                            let gsum: f64 = gr.iter().sum();
                            for ((x, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                                *x += gi - yi.exp() * gsum;
                            }
                        }
                    });
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts.clone() {
                        let len = self.nodes[p.0].shape[0] * cols;
                        let part = &g[offset..offset + len];
                        self.acc(&mut grads, p, |d| add_into(d, part));
                        offset += len;
                    }
                }
                Op::SliceRows(a, s, _) => {
                    let start = s * cols;
                    self.acc(&mut grads, *a, |d| add_into(&mut d[start..start + g.len()], &g));
                }
                Op::Gather(table, ids) => {
                    self.acc(&mut grads, *table, |d| {
                        for (gr, &id) in g.chunks(cols).zip(ids) {
                            add_into(&mut d[id * cols..(id + 1) * cols], gr);
                        }
                    });
                }
                Op::Pick(a, idx) => {
                    let acols = self.nodes[a.0].shape[1];
                    self.acc(&mut grads, *a, |d| {
                        for (r, (&j, gi)) in idx.iter().zip(&g).enumerate() {
                            d[r * acols + j] += gi;
                        }
                    });
                }
                Op::SqDist(a, b) => {
                    let dim = self.nodes[a.0].shape[1];
                    let (av, bv) = (self.val(*a), self.val(*b));
                    let mut ga = vec![0.0; rows * dim];
                    let mut gb = vec![0.0; cols * dim];
                    for r in 0..rows {
                        let x = av.row_slice(r);
                        for c in 0..cols {
                            let w = 2.0 * g[r * cols + c];
                            if w == 0.0 {
                                continue;
                            }
                            let y = bv.row_slice(c);
                            for k in 0..dim {
                                let diff = w * (x[k] - y[k]);
                                ga[r * dim + k] += diff;
                                gb[c * dim + k] -= diff;
                            }
                        }
                    }
                    self.acc(&mut grads, *a, |d| add_into(d, &ga));
                    self.acc(&mut grads, *b, |d| add_into(d, &gb));
                }
                Op::MinConst(a, c) => {
                    let c = *c;
                    let av = self.val(*a).data();
                    self.acc(&mut grads, *a, |d| {
                        for ((x, gi), ai) in d.iter_mut().zip(&g).zip(av) {
                            if *ai < c {
                                *x += gi;
                            }
                        }
                    });
                }
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; node.shape[0] * node.shape[1]]);
        f(slot);
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(|n| n.grad.as_ref())
    }

    /// Gradients of all named leaves that have one.
    pub fn named_grads(&self) -> Vec<(&str, &Tensor)> {
        self.nodes
            .iter()
            .filter_map(|n| match (&n.op, &n.grad) {
                (Op::Input(name), Some(g)) => Some((name.as_str(), g)),
                _ => None,
            })
            .collect()
    }

    /// Names of inputs declared with `requires_grad`, in declaration order.
    pub fn trainable_inputs(&self) -> Vec<(&str, Var)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Input(name) if n.requires_grad => Some((name.as_str(), Var(i))),
                _ => None,
            })
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Vec<f64> {
    a.data().iter().map(|&x| f(x)).collect()
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&str, Tensor)]) -> HashMap<String, Tensor> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn square_value_and_grad() {
        let mut g = Graph::new();
        let x = g.input("x", 1, 1, true).unwrap();
        let y = g.mul(x, x).unwrap();
        let out = g.eval(&bind(&[("x", Tensor::scalar(3.0))]), y).unwrap();
        assert_eq!(out.item(), 9.0);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn product_rule() {
        let mut g = Graph::new();
        let x = g.input("x", 1, 1, true).unwrap();
        let y = g.input("y", 1, 1, true).unwrap();
        let f = g.mul(x, y).unwrap();
        g.forward(&bind(&[("x", Tensor::scalar(2.0)), ("y", Tensor::scalar(5.0))]))
            .unwrap();
        g.backward(f).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 5.0);
        assert_eq!(g.grad(y).unwrap().item(), 2.0);
    }

    #[test]
    fn relu_values_and_zero_subgradient() {
        let mut g = Graph::new();
        let x = g.input("x", 1, 3, true).unwrap();
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        let inputs = bind(&[("x", Tensor::row(vec![-1.5, 2.0, 0.0]).unwrap())]);
        g.forward(&inputs).unwrap();
        assert_eq!(g.value(r).unwrap().data(), &[0.0, 2.0, 0.0]);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let mut g = Graph::new();
        let a = g
            .constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let b = g.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap()).unwrap();
        let c = g.matmul(a, b).unwrap();
        let v = g.eval(&NoInputs, c).unwrap();
        assert_eq!(v.shape(), &[2, 1]);
        assert_eq!(v.data(), &[3.0, 7.0]);
    }

    #[test]
    fn clamp_branches() {
        for (d, expected) in [(12.0, 0.0), (4.0, -1.0), (10.0, 0.0)] {
            let mut g = Graph::new();
            let x = g.input("d", 1, 1, true).unwrap();
            let m = g.min_const(x, 10.0).unwrap();
            let f = g.scale(m, -1.0).unwrap();
            g.forward(&bind(&[("d", Tensor::scalar(d))])).unwrap();
            g.backward(f).unwrap();
            assert_eq!(g.grad(x).unwrap().item(), expected, "d = {d}");
        }
    }

    #[test]
    fn shape_errors_name_op() {
        let mut g = Graph::new();
        let a = g.input("a", 2, 3, false).unwrap();
        let b = g.input("b", 2, 3, false).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = g.input("c", 3, 2, false).unwrap();
        assert!(g.add(a, c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn log_of_non_positive_is_an_error() {
        let mut g = Graph::new();
        let x = g.input("x", 1, 2, false).unwrap();
        let _ = g.log(x).unwrap();
        let err = g
            .forward(&bind(&[("x", Tensor::row(vec![1.0, 0.0]).unwrap())]))
            .unwrap_err();
        assert!(matches!(err, Error::LogDomain { .. }));
    }

    #[test]
    fn backward_preconditions() {
        let mut g = Graph::new();
        let x = g.input("x", 1, 2, true).unwrap();
        let s = g.sum(x).unwrap();
        assert!(matches!(g.backward(s), Err(Error::NotEvaluated)));
        g.forward(&bind(&[("x", Tensor::row(vec![1.0, 2.0]).unwrap())]))
            .unwrap();
        assert!(matches!(g.backward(x), Err(Error::NonScalar(_))));
    }

    #[test]
    fn unbound_input_is_reported() {
        let mut g = Graph::new();
        g.input("weights", 1, 1, true).unwrap();
        let err = g.forward(&NoInputs).unwrap_err();
        assert!(err.to_string().contains("weights"));
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let mut g = Graph::new();
        let x = g.input("x", 1, 1, true).unwrap();
        let y = g.mul(x, x).unwrap();
        g.forward(&bind(&[("x", Tensor::scalar(3.0))])).unwrap();
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 12.0);
        g.zero_grad();
        assert!(g.grad(x).is_none());
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g
            .constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -5.0, 0.0, 700.0]).unwrap())
            .unwrap();
        let s = g.softmax(x).unwrap();
        let ls = g.log_softmax(x).unwrap();
        g.forward(&NoInputs).unwrap();
        let sv = g.value(s).unwrap();
        for r in 0..2 {
            let total: f64 = sv.row_slice(r).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        let lv = g.value(ls).unwrap();
        for (p, lp) in sv.data().iter().zip(lv.data()) {
            if *p > 1e-300 {
                assert!((p.ln() - lp).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gather_scatters_gradients_into_table() {
        let mut g = Graph::new();
        let table = g.input("t", 3, 2, true).unwrap();
        let rows = g.gather(table, &[2, 0, 2]).unwrap();
        let s = g.sum(rows).unwrap();
        let t = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        g.forward(&bind(&[("t", t)])).unwrap();
        assert_eq!(g.value(rows).unwrap().data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        g.backward(s).unwrap();
        assert_eq!(g.grad(table).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(g.gather(table, &[3]).is_err());
    }
}
