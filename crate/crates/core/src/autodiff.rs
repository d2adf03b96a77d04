//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation in creation order, so creation order
//! is a valid topological order and [`Tape::backward`] is a single reverse
//! sweep. Tapes are cheap and meant to be rebuilt for every training step.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// Exponents above this are clamped by [`Tape::exp`].
pub const EXP_CLAMP: f64 = 30.0;

/// Smallest denominator magnitude accepted by [`Tape::div`].
pub const DIV_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitive that produced a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    AddRow,
    MulCol,
    MatMul,
    Transpose,
    Dot,
    Sum,
    Mean,
    RowSums,
    Exp,
    Tanh,
    Sigmoid,
    Square,
    Sqrt,
    L2Norm,
    FrobeniusInner,
    Trace,
    Inverse,
    SoftmaxCrossEntropy,
    ConcatRows,
    GatherRows,
}

/// How [`Tape::div`] treats denominators smaller than [`DIV_EPS`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DivMode {
    /// Tiny denominators are an error.
    Strict,
    /// Tiny denominators are replaced by `sign · DIV_EPS` (with sign(0) = +),
    /// and receive no gradient.
    Regularized,
}

enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div { num: Var, den: Var, effective: Tensor, replaced: Vec<bool> },
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Dot(Var, Var),
    Sum(Var),
    Mean(Var),
    RowSums(Var),
    Exp { x: Var, saturated: Vec<bool> },
    Tanh(Var),
    Sigmoid(Var),
    Square(Var),
    Sqrt(Var),
    L2Norm(Var),
    FrobeniusInner(Var, Var),
    Trace(Var),
    Inverse(Var),
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Tensor },
    ConcatRows(Vec<Var>),
    GatherRows(Vec<(Var, usize)>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Constant => OpKind::Constant,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div { .. } => OpKind::Div,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::AddRow(..) => OpKind::AddRow,
            Op::MulCol(..) => OpKind::MulCol,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Dot(..) => OpKind::Dot,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::RowSums(..) => OpKind::RowSums,
            Op::Exp { .. } => OpKind::Exp,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Square(..) => OpKind::Square,
            Op::Sqrt(..) => OpKind::Sqrt,
            Op::L2Norm(..) => OpKind::L2Norm,
            Op::FrobeniusInner(..) => OpKind::FrobeniusInner,
            Op::Trace(..) => OpKind::Trace,
            Op::Inverse(..) => OpKind::Inverse,
            Op::SoftmaxCe { .. } => OpKind::SoftmaxCrossEntropy,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::GatherRows(..) => OpKind::GatherRows,
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulCol(a, b)
            | Op::MatMul(a, b)
            | Op::Dot(a, b)
            | Op::FrobeniusInner(a, b) => vec![*a, *b],
            Op::Div { num, den, .. } => vec![*num, *den],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Transpose(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowSums(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::L2Norm(a)
            | Op::Trace(a)
            | Op::Inverse(a) => vec![*a],
            Op::Exp { x, .. } => vec![*x],
            Op::SoftmaxCe { logits, .. } => vec![*logits],
            Op::ConcatRows(vs) => vs.clone(),
            Op::GatherRows(src) => src.iter().map(|(v, _)| *v).collect(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Counters for guarded numerics encountered while building a tape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TapeEvents {
    /// Elements whose exponent was clamped to [`EXP_CLAMP`].
    pub saturated: usize,
    /// Degenerate similarity inputs (e.g. zero-norm cosine operands).
    pub degenerate: usize,
}

/// Ordered record of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    events: TapeEvents,
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`; zeros when `v` does not
    /// influence the output.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
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

    pub fn events(&self) -> TapeEvents {
        self.events
    }

    pub(crate) fn note_degenerate(&mut self, count: usize) {
        self.events.degenerate += count;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.nodes[v.0].value.item()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.parents()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Constant, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.val(a).add(self.val(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.val(a).sub(self.val(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.val(a).mul(self.val(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Elementwise `a / b`.
    pub fn div(&mut self, a: Var, b: Var, mode: DivMode) -> Result<Var> {
        let num = self.val(a);
        let den = self.val(b);
        num.same_shape(den, "div")?;
        let mut replaced = vec![false; den.len()];
        let mut effective = den.clone();
        for (i, d) in effective.data_mut().iter_mut().enumerate() {
            if d.abs() < DIV_EPS {
                match mode {
                    DivMode::Strict => {
                        return Err(Error::NumericGuard {
                            op: "div",
                            detail: format!("denominator {d:e} at element {i} below {DIV_EPS:e}"),
                        })
                    }
                    DivMode::Regularized => {
                        *d = if *d < 0.0 { -DIV_EPS } else { DIV_EPS };
                        replaced[i] = true;
                    }
                }
            }
        }
        let v = num.zip_map(&effective, "div", |x, y| x / y)?;
        Ok(self.push(v, Op::Div { num: a, den: b, effective, replaced }))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.val(a).scale(k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.val(a).map(|x| x + k);
        self.push(v, Op::AddScalar(a))
    }

    /// `x + bias` with a 1×m bias broadcast over the rows of an n×m `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, m) = self.val(x).dims2()?;
        let b = self.val(bias);
        if b.len() != m || b.rows() != 1 {
            return Err(Error::shape("add_row", format!("bias {:?} for {n}x{m} input", b.shape())));
        }
        let mut out = self.val(x).clone();
        for i in 0..n {
            for (o, bv) in out.row_mut(i).iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    /// Scales row `i` of an n×m `x` by element `i` of an n×1 `col`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (n, m) = self.val(x).dims2()?;
        let c = self.val(col);
        if c.shape() != [n, 1] {
            return Err(Error::shape("mul_col", format!("column {:?} for {n}x{m} input", c.shape())));
        }
        let mut out = self.val(x).clone();
        for i in 0..n {
            let k = c.data()[i];
            for o in out.row_mut(i) {
                *o *= k;
            }
        }
        Ok(self.push(out, Op::MulCol(x, col)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.val(a).matmul(self.val(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.val(a).transpose()?;
        Ok(self.push(v, Op::Transpose(a)))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.val(a).dot(self.val(b))?;
        Ok(self.push(Tensor::scalar(v), Op::Dot(a, b)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.val(a).sum();
        self.push(Tensor::scalar(v), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a);
        if t.is_empty() {
            return Err(Error::shape("mean", "empty operand"));
        }
        let v = t.sum() / t.len() as f64;
        Ok(self.push(Tensor::scalar(v), Op::Mean(a)))
    }

    /// n×m → n×1 row sums.
    pub fn row_sums(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a);
        let (n, _) = t.dims2()?;
        let data = (0..n).map(|i| t.row(i).iter().sum()).collect();
        let v = Tensor::matrix(n, 1, data)?;
        Ok(self.push(v, Op::RowSums(a)))
    }

    /// Elementwise `exp(min(x, EXP_CLAMP))`; clamped elements are counted
    /// as saturation events and pass no gradient.
    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let saturated: Vec<bool> = t.data().iter().map(|&x| x > EXP_CLAMP).collect();
        let count = saturated.iter().filter(|s| **s).count();
        let v = t.map(|x| x.min(EXP_CLAMP).exp());
        self.events.saturated += count;
        self.push(v, Op::Exp { x: a, saturated })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.val(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.val(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.val(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Elementwise square root. The gradient at zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a);
        if let Some(x) = t.data().iter().find(|x| **x < 0.0) {
            return Err(Error::NumericGuard { op: "sqrt", detail: format!("negative input {x:e}") });
        }
        let v = t.map(f64::sqrt);
        Ok(self.push(v, Op::Sqrt(a)))
    }

    /// Euclidean norm of all elements. The gradient at zero is taken as zero.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let v = self.val(a).l2_norm();
        self.push(Tensor::scalar(v), Op::L2Norm(a))
    }

    pub fn frobenius_inner(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.val(a).frobenius_inner(self.val(b))?;
        Ok(self.push(Tensor::scalar(v), Op::FrobeniusInner(a, b)))
    }

    pub fn trace(&mut self, a: Var) -> Result<Var> {
        let v = self.val(a).trace()?;
        Ok(self.push(Tensor::scalar(v), Op::Trace(a)))
    }

    pub fn inverse(&mut self, a: Var) -> Result<Var> {
        let v = self.val(a).inverse()?;
        Ok(self.push(v, Op::Inverse(a)))
    }

    /// Mean softmax cross-entropy of an n×C logit matrix against `labels`,
    /// computed with max-subtracted log-sum-exp.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.val(logits);
        let (n, c) = t.dims2()?;
        if labels.len() != n || n == 0 {
            return Err(Error::shape("softmax_cross_entropy", format!("{n} logit rows for {} labels", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::shape("softmax_cross_entropy", format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = Tensor::zeros(&[n, c]);
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = t.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            let prow = probs.row_mut(i);
            for (p, &x) in prow.iter_mut().zip(row) {
                *p = (x - max).exp();
                z += *p;
            }
            for p in prow.iter_mut() {
                *p /= z;
            }
            total += max + z.ln() - row[y];
        }
        let v = Tensor::scalar(total / n as f64);
        Ok(self.push(v, Op::SoftmaxCe { logits, labels: labels.to_vec(), probs }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|v| self.val(*v)).collect();
        let v = Tensor::concat_rows(&tensors)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    /// Builds a matrix whose row `k` is row `sources[k].1` of matrix
    /// `sources[k].0`.
    pub fn gather_rows(&mut self, sources: &[(Var, usize)]) -> Result<Var> {
        let cols = match sources.first() {
            Some((v, _)) => self.val(*v).dims2()?.1,
            None => return Err(Error::shape("gather_rows", "no sources")),
        };
        let mut data = Vec::with_capacity(sources.len() * cols);
        for (v, r) in sources {
            let t = self.val(*v);
            let (rows, c) = t.dims2()?;
            if c != cols || *r >= rows {
                return Err(Error::shape("gather_rows", format!("row {r} of {rows}x{c} into {cols} columns")));
            }
            data.extend_from_slice(t.row(*r));
        }
        let v = Tensor::matrix(sources.len(), cols, data)?;
        Ok(self.push(v, Op::GatherRows(sources.to_vec())))
    }

    /// Reverse sweep from a one-element `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0].value;
        if out.len() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar output, got shape {:?}", out.shape())));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out.shape(), 1.0));

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }

        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.clone())?;
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.clone())?;
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.scale(-1.0))?;
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.mul(self.val(*b))?)?;
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.mul(self.val(*a))?)?;
                }
            }
            Op::Div { num, den, effective, replaced } => {
                if self.wants(*num) {
                    self.accumulate(grads, *num, g.zip_map(effective, "div", |g, d| g / d)?)?;
                }
                if self.wants(*den) {
                    let mut gd = Tensor::zeros(effective.shape());
                    let a = self.val(*num).data();
                    for (k, out) in gd.data_mut().iter_mut().enumerate() {
                        if !replaced[k] {
                            let d = effective.data()[k];
                            *out = -g.data()[k] * a[k] / (d * d);
                        }
                    }
                    self.accumulate(grads, *den, gd)?;
                }
            }
            Op::Scale(a, k) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.scale(*k))?;
                }
            }
            Op::AddScalar(a) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.clone())?;
                }
            }
            Op::AddRow(x, b) => {
                if self.wants(*x) {
                    self.accumulate(grads, *x, g.clone())?;
                }
                if self.wants(*b) {
                    let bshape = self.val(*b).shape().to_vec();
                    let (n, m) = g.dims2()?;
                    let mut gb = vec![0.0; m];
                    for i in 0..n {
                        for (acc, v) in gb.iter_mut().zip(g.row(i)) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(&bshape, gb)?)?;
                }
            }
            Op::MulCol(x, c) => {
                let xv = self.val(*x);
                let cv = self.val(*c);
                let (n, _) = xv.dims2()?;
                if self.wants(*x) {
                    let mut gx = g.clone();
                    for i in 0..n {
                        let k = cv.data()[i];
                        for v in gx.row_mut(i) {
                            *v *= k;
                        }
                    }
                    self.accumulate(grads, *x, gx)?;
                }
                if self.wants(*c) {
                    let data = (0..n).map(|i| g.row(i).iter().zip(xv.row(i)).map(|(a, b)| a * b).sum()).collect();
                    self.accumulate(grads, *c, Tensor::matrix(n, 1, data)?)?;
                }
            }
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.matmul_nt(self.val(*b))?)?;
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, self.val(*a).matmul_tn(g)?)?;
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.transpose()?)?;
                }
            }
            Op::Dot(a, b) | Op::FrobeniusInner(a, b) => {
                let s = g.item()?;
                if self.wants(*a) {
                    self.accumulate(grads, *a, self.val(*b).scale(s))?;
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, self.val(*a).scale(s))?;
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    let s = g.item()?;
                    self.accumulate(grads, *a, Tensor::full(self.val(*a).shape(), s))?;
                }
            }
            Op::Mean(a) => {
                if self.wants(*a) {
                    let t = self.val(*a);
                    let s = g.item()? / t.len() as f64;
                    self.accumulate(grads, *a, Tensor::full(t.shape(), s))?;
                }
            }
            Op::RowSums(a) => {
                if self.wants(*a) {
                    let t = self.val(*a);
                    let (n, m) = t.dims2()?;
                    let mut ga = Tensor::zeros(&[n, m]);
                    for i in 0..n {
                        let gi = g.data()[i];
                        ga.row_mut(i).fill(gi);
                    }
                    self.accumulate(grads, *a, ga)?;
                }
            }
            Op::Exp { x, saturated } => {
                if self.wants(*x) {
                    let mut gx = g.mul(y)?;
                    for (v, s) in gx.data_mut().iter_mut().zip(saturated) {
                        if *s {
                            *v = 0.0;
                        }
                    }
                    self.accumulate(grads, *x, gx)?;
                }
            }
            Op::Tanh(a) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(y, "tanh", |g, y| g * (1.0 - y * y))?)?;
                }
            }
            Op::Sigmoid(a) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(y, "sigmoid", |g, y| g * y * (1.0 - y))?)?;
                }
            }
            Op::Square(a) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.val(*a), "square", |g, x| 2.0 * g * x)?)?;
                }
            }
            Op::Sqrt(a) => {
                if self.wants(*a) {
                    let ga = g.zip_map(y, "sqrt", |g, y| if y > 0.0 { g / (2.0 * y) } else { 0.0 })?;
                    self.accumulate(grads, *a, ga)?;
                }
            }
            Op::L2Norm(a) => {
                if self.wants(*a) {
                    let norm = y.item()?;
                    let s = g.item()?;
                    let ga =
                        if norm > 0.0 { self.val(*a).scale(s / norm) } else { Tensor::zeros(self.val(*a).shape()) };
                    self.accumulate(grads, *a, ga)?;
                }
            }
            Op::Trace(a) => {
                if self.wants(*a) {
                    let (n, _) = self.val(*a).dims2()?;
                    self.accumulate(grads, *a, Tensor::eye(n).scale(g.item()?))?;
                }
            }
            Op::Inverse(a) => {
                if self.wants(*a) {
                    // d(A⁻¹) contracted with G is −A⁻ᵀ G A⁻ᵀ.
                    let yt = y.transpose()?;
                    let ga = yt.matmul(g)?.matmul(&yt)?.scale(-1.0);
                    self.accumulate(grads, *a, ga)?;
                }
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                if self.wants(*logits) {
                    let n = labels.len();
                    let s = g.item()? / n as f64;
                    let mut gl = probs.clone();
                    for (i, &lab) in labels.iter().enumerate() {
                        gl.row_mut(i)[lab] -= 1.0;
                    }
                    self.accumulate(grads, *logits, gl.scale(s))?;
                }
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for p in parts {
                    let rows = self.val(*p).rows();
                    if self.wants(*p) {
                        let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        self.accumulate(grads, *p, Tensor::matrix(rows, cols, slice)?)?;
                    }
                    offset += rows;
                }
            }
            Op::GatherRows(sources) => {
                for (k, (v, r)) in sources.iter().enumerate() {
                    if !self.wants(*v) {
                        continue;
                    }
                    let shape = self.val(*v).shape().to_vec();
                    let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(&shape));
                    for (dst, src) in slot.row_mut(*r).iter_mut().zip(g.row(k)) {
                        *dst += src;
                    }
                }
            }
        }
        Ok(())
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

/// Outcome of [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// `max_i |g_ad − g_fd| / max(1e−8, |g_ad| + |g_fd|)`.
    pub max_rel_error: f64,
    /// `(leaf, flat index)` where the maximum occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares reverse-mode gradients of `f` at `point` against central
/// finite differences with step `h`.
///
/// `f` receives a fresh tape and one leaf per tensor of `point`, and must
/// return a one-element node.
pub fn grad_check<F>(f: &F, point: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {h}")));
    }
    let evaluate = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &leaves)?;
        let v = tape.scalar(out)?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let leaves: Vec<Var> = point.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &leaves)?;
    let base = tape.scalar(out)?;
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {base}")));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = leaves.iter().map(|v| grads.wrt(*v)).collect();

    let coords: Vec<(usize, usize)> =
        point.iter().enumerate().flat_map(|(l, t)| (0..t.len()).map(move |i| (l, i))).collect();
    let numeric = par::try_map_indices(coords.len(), |k| {
        let (l, i) = coords[k];
        let mut plus = point.to_vec();
        plus[l].data_mut()[i] += h;
        let mut minus = point.to_vec();
        minus[l].data_mut()[i] -= h;
        Ok((evaluate(&plus)? - evaluate(&minus)?) / (2.0 * h))
    })?;

    let mut report = GradCheck { max_rel_error: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0 };
    for (k, &(l, i)) in coords.iter().enumerate() {
        let a = analytic[l].data()[i];
        let fd = numeric[k];
        let rel = (a - fd).abs() / (a.abs() + fd.abs()).max(1e-8);
        if rel > report.max_rel_error || k == 0 {
            report = GradCheck { max_rel_error: rel, worst: (l, i), analytic: a, numeric: fd };
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                s = s.wrapping_add(0x9E3779B97F4A7C15);
                let mut z = s;
                z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
                z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
                z ^= z >> 31;
                ((z >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = tape.dot(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn trace_gradient_is_identity() {
        let mut tape = Tape::new();
        let a = tape.leaf(rand_tensor(&[3, 3], 1));
        let t = tape.trace(a).unwrap();
        let g = tape.backward(t).unwrap();
        assert_eq!(g.wrt(a), Tensor::eye(3));
    }

    #[test]
    fn constant_output_has_zero_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::scalar(4.0));
        let g = tape.backward(c).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(&[2, 3], 4));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x), Tensor::full(&[2, 3], 1.0));
    }

    #[test]
    fn backward_is_idempotent() {
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(&[4], 5));
        let e = tape.exp(x);
        let s = tape.sum(e);
        let g1 = tape.backward(s).unwrap().wrt(x);
        let g2 = tape.backward(s).unwrap().wrt(x);
        assert_eq!(g1, g2);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(&[3], 5));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_subgraph_doubles_gradient() {
        let build = |twice: bool| {
            let mut tape = Tape::new();
            let x = tape.leaf(rand_tensor(&[3], 7));
            let e1 = tape.tanh(x);
            let mut s = tape.sum(e1);
            if twice {
                let e2 = tape.tanh(x);
                let s2 = tape.sum(e2);
                s = tape.add(s, s2).unwrap();
            }
            tape.backward(s).unwrap().wrt(x)
        };
        assert_eq!(build(true), build(false).scale(2.0));
    }

    #[test]
    fn strict_div_guards_small_denominators() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 1.0]));
        let b = tape.leaf(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(tape.div(a, b, DivMode::Strict), Err(Error::NumericGuard { .. })));
        let q = tape.div(a, b, DivMode::Regularized).unwrap();
        assert_eq!(tape.value(q).data(), &[1.0, 1.0 / DIV_EPS]);
    }

    #[test]
    fn exp_clamp_counts_saturation() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 100.0]));
        let e = tape.exp(a);
        assert_eq!(tape.value(e).data()[1], EXP_CLAMP.exp());
        assert_eq!(tape.events().saturated, 1);
        let s = tape.sum(e);
        let g = tape.backward(s).unwrap().wrt(a);
        assert_eq!(g.data()[1], 0.0);
    }

    #[test]
    fn inverse_gradient_matches_finite_differences() {
        let mut a = rand_tensor(&[3, 3], 11);
        for i in 0..3 {
            a.data_mut()[i * 3 + i] += 2.5;
        }
        let gmat = rand_tensor(&[3, 3], 12);
        let f = move |tape: &mut Tape, v: &[Var]| {
            let inv = tape.inverse(v[0])?;
            let w = tape.constant(gmat.clone());
            tape.frobenius_inner(inv, w)
        };
        let r = grad_check(&f, &[a], 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn dot_grad_check() {
        let f = |tape: &mut Tape, v: &[Var]| tape.dot(v[0], v[0]);
        let r = grad_check(&f, &[rand_tensor(&[6], 3)], 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }

    #[test]
    fn grad_check_rejects_bad_step() {
        let f = |tape: &mut Tape, v: &[Var]| tape.dot(v[0], v[0]);
        assert!(grad_check(&f, &[rand_tensor(&[2], 3)], 0.0).is_err());
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        type Build = fn(&mut Tape, &[Var]) -> Result<Var>;
        let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
            ("add", vec![vec![2, 3], vec![2, 3]], |t, v| {
                let y = t.add(v[0], v[1])?;
                let y = t.square(y);
                Ok(t.sum(y))
            }),
            ("sub", vec![vec![2, 3], vec![2, 3]], |t, v| {
                let y = t.sub(v[0], v[1])?;
                let y = t.square(y);
                Ok(t.sum(y))
            }),
            ("mul", vec![vec![2, 3], vec![2, 3]], |t, v| {
                let y = t.mul(v[0], v[1])?;
                Ok(t.sum(y))
            }),
            ("div", vec![vec![2, 3], vec![2, 3]], |t, v| {
                let d = t.add_scalar(v[1], 3.0);
                let y = t.div(v[0], d, DivMode::Strict)?;
                Ok(t.sum(y))
            }),
            ("scale", vec![vec![4]], |t, v| {
                let y = t.scale(v[0], -1.7);
                let y = t.square(y);
                Ok(t.sum(y))
            }),
            ("add_row", vec![vec![3, 2], vec![1, 2]], |t, v| {
                let y = t.add_row(v[0], v[1])?;
                let y = t.square(y);
                Ok(t.sum(y))
            }),
            ("mul_col", vec![vec![3, 2], vec![3, 1]], |t, v| {
                let y = t.mul_col(v[0], v[1])?;
                let y = t.square(y);
                Ok(t.sum(y))
            }),
            ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| {
                let y = t.matmul(v[0], v[1])?;
                let y = t.tanh(y);
                Ok(t.sum(y))
            }),
            ("transpose", vec![vec![3, 2], vec![3, 2]], |t, v| {
                let a = t.transpose(v[0])?;
                let y = t.matmul(a, v[1])?;
                t.trace(y)
            }),
            ("mean", vec![vec![5]], |t, v| {
                let y = t.square(v[0]);
                t.mean(y)
            }),
            ("row_sums", vec![vec![3, 4]], |t, v| {
                let y = t.row_sums(v[0])?;
                let y = t.square(y);
                Ok(t.sum(y))
            }),
            ("exp", vec![vec![4]], |t, v| {
                let y = t.exp(v[0]);
                Ok(t.sum(y))
            }),
            ("sigmoid", vec![vec![4]], |t, v| {
                let y = t.sigmoid(v[0]);
                let y = t.square(y);
                Ok(t.sum(y))
            }),
            ("sqrt", vec![vec![4]], |t, v| {
                let s = t.square(v[0]);
                let s = t.add_scalar(s, 0.5);
                let y = t.sqrt(s)?;
                Ok(t.sum(y))
            }),
            ("l2_norm", vec![vec![2, 2]], |t, v| Ok(t.l2_norm(v[0]))),
            ("frobenius_inner", vec![vec![2, 2], vec![2, 2]], |t, v| t.frobenius_inner(v[0], v[1])),
            ("softmax_ce", vec![vec![3, 4]], |t, v| t.softmax_cross_entropy(v[0], &[0, 3, 1])),
            ("concat_rows", vec![vec![1, 3], vec![2, 3]], |t, v| {
                let c = t.concat_rows(&[v[0], v[1]])?;
                let w = t.tanh(c);
                let y = t.row_sums(w)?;
                let y = t.square(y);
                Ok(t.sum(y))
            }),
            ("gather_rows", vec![vec![3, 2], vec![2, 2]], |t, v| {
                let g = t.gather_rows(&[(v[0], 2), (v[1], 0), (v[0], 2)])?;
                let y = t.sigmoid(g);
                let y = t.square(y);
                Ok(t.sum(y))
            }),
        ];
        for (name, shapes, build) in cases {
            for trial in 0..10u64 {
                let point: Vec<Tensor> =
                    shapes.iter().enumerate().map(|(k, s)| rand_tensor(s, trial * 31 + k as u64)).collect();
                let r = grad_check(&build, &point, 1e-6).unwrap();
                assert!(r.max_rel_error < 1e-5, "{name} trial {trial}: {r:?}");
            }
        }
    }
}
