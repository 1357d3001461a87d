//! Dense reverse-mode automatic differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each recorded operation
//! stores its output value together with the handles of its inputs, so the
//! backward sweep is a single reverse walk over the node list. All values are
//! `f64` and stored row-major.

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TapeError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("{op}: expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("select_rows: row {index} out of range for {rows} rows")]
    RowOutOfRange { index: usize, rows: usize },
    #[error("concat: unsupported axis {0}")]
    Axis(usize),
    #[error("{0}: needs at least one input")]
    Empty(&'static str),
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("gradient requested for a non-leaf variable")]
    NotALeaf,
}

pub type Result<T> = std::result::Result<T, TapeError>;

/// Dense row-major array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    data: Vec<f64>,
    shape: Vec<usize>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TapeError::DataLength {
                len: data.len(),
                shape,
            });
        }
        Ok(Self { data, shape })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            data: vec![0.0; shape.iter().product()],
            shape: shape.to_vec(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            data: vec![value],
            shape: Vec::new(),
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self {
            data,
            shape: vec![n],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(data, vec![rows, cols])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Extent of the leading axis (1 for scalars).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of elements per leading-axis row.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TapeError::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `out = op(a) * op(b) + beta * out` with `op(a)` of size m×k and `op(b)` k×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    beta: f64,
    out: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_transposed { (1, k) } else { (n, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `out` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Handle to a value recorded on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Operations that can be recorded. Parameters that are not tensors live in
/// the variant.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    /// Rank-2 matrix product.
    Matmul,
    /// Adds a `[cols]` or `[1, cols]` row to every row of a rank-2 input.
    AddRow,
    Scale(f64),
    Sum,
    Mean,
    Square,
    Sqrt,
    Tanh,
    Silu,
    SelectRows(Vec<usize>),
    Concat { axis: usize },
    /// Euclidean norm of all entries.
    L2Norm,
    StopGradient,
    Reshape(Vec<usize>),
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Matmul => "matmul",
            OpKind::AddRow => "add_row",
            OpKind::Scale(_) => "scale",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Square => "square",
            OpKind::Sqrt => "sqrt",
            OpKind::Tanh => "tanh",
            OpKind::Silu => "silu",
            OpKind::SelectRows(_) => "select_rows",
            OpKind::Concat { .. } => "concat",
            OpKind::L2Norm => "l2norm",
            OpKind::StopGradient => "stop_gradient",
            OpKind::Reshape(_) => "reshape",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Option<OpKind>,
    parents: Vec<usize>,
    value: Tensor,
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(0);

/// Define-by-run record of a computation.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(TapeError::ShapeMismatch {
            op,
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        shape: a.shape.clone(),
    }
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        data: a.data.iter().map(|&x| f(x)).collect(),
        shape: a.shape.clone(),
    }
}

fn add_into(acc: &mut Option<Vec<f64>>, contribution: impl FnOnce(&mut [f64])) {
    match acc {
        Some(buf) => contribution(buf),
        None => unreachable!("gradient buffer must be allocated before accumulation"),
    }
}

fn forward(kind: &OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
    let unary = |expected: usize| -> Result<()> {
        if inputs.len() != expected {
            return Err(TapeError::Arity {
                op: kind.name(),
                expected,
                got: inputs.len(),
            });
        }
        Ok(())
    };
    match kind {
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            unary(2)?;
            let (a, b) = (inputs[0], inputs[1]);
            same_shape(kind.name(), a, b)?;
            Ok(match kind {
                OpKind::Add => zip_map(a, b, |x, y| x + y),
                OpKind::Sub => zip_map(a, b, |x, y| x - y),
                _ => zip_map(a, b, |x, y| x * y),
            })
        }
        OpKind::Matmul => {
            unary(2)?;
            let (a, b) = (inputs[0], inputs[1]);
            for t in [a, b] {
                if t.shape.len() != 2 {
                    return Err(TapeError::Rank {
                        op: "matmul",
                        expected: 2,
                        shape: t.shape.clone(),
                    });
                }
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            if b.shape[0] != k {
                return Err(TapeError::ShapeMismatch {
                    op: "matmul",
                    left: a.shape.clone(),
                    right: b.shape.clone(),
                });
            }
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, &a.data, false, &b.data, false, 0.0, &mut out);
            Ok(Tensor {
                data: out,
                shape: vec![m, n],
            })
        }
        OpKind::AddRow => {
            unary(2)?;
            let (a, row) = (inputs[0], inputs[1]);
            if a.shape.len() != 2 {
                return Err(TapeError::Rank {
                    op: "add_row",
                    expected: 2,
                    shape: a.shape.clone(),
                });
            }
            let cols = a.shape[1];
            if row.len() != cols || row.shape.len() > 2 || (row.shape.len() == 2 && row.shape[0] != 1)
            {
                return Err(TapeError::ShapeMismatch {
                    op: "add_row",
                    left: a.shape.clone(),
                    right: row.shape.clone(),
                });
            }
            let mut out = a.clone();
            for r in out.data.chunks_mut(cols) {
                for (o, b) in r.iter_mut().zip(&row.data) {
                    *o += b;
                }
            }
            Ok(out)
        }
        OpKind::Scale(c) => {
            unary(1)?;
            Ok(map(inputs[0], |x| c * x))
        }
        OpKind::Sum => {
            unary(1)?;
            Ok(Tensor::scalar(inputs[0].data.iter().sum()))
        }
        OpKind::Mean => {
            unary(1)?;
            let a = inputs[0];
            if a.is_empty() {
                return Err(TapeError::Empty("mean"));
            }
            Ok(Tensor::scalar(a.data.iter().sum::<f64>() / a.len() as f64))
        }
        OpKind::Square => {
            unary(1)?;
            Ok(map(inputs[0], |x| x * x))
        }
        OpKind::Sqrt => {
            unary(1)?;
            Ok(map(inputs[0], f64::sqrt))
        }
        OpKind::Tanh => {
            unary(1)?;
            Ok(map(inputs[0], f64::tanh))
        }
        OpKind::Silu => {
            unary(1)?;
            Ok(map(inputs[0], |x| x * sigmoid(x)))
        }
        OpKind::SelectRows(idx) => {
            unary(1)?;
            let a = inputs[0];
            if a.shape.is_empty() {
                return Err(TapeError::Rank {
                    op: "select_rows",
                    expected: 1,
                    shape: a.shape.clone(),
                });
            }
            let (rows, w) = (a.rows(), a.row_len());
            let mut data = Vec::with_capacity(idx.len() * w);
            for &i in idx {
                if i >= rows {
                    return Err(TapeError::RowOutOfRange { index: i, rows });
                }
                data.extend_from_slice(a.row(i));
            }
            let mut shape = a.shape.clone();
            shape[0] = idx.len();
            Ok(Tensor { data, shape })
        }
        OpKind::Concat { axis } => {
            let first = inputs.first().ok_or(TapeError::Empty("concat"))?;
            match axis {
                0 => {
                    if first.shape.is_empty() {
                        return Err(TapeError::Rank {
                            op: "concat",
                            expected: 1,
                            shape: first.shape.clone(),
                        });
                    }
                    let mut rows = 0;
                    let mut data = Vec::new();
                    for t in inputs {
                        if t.shape.len() != first.shape.len() || t.shape[1..] != first.shape[1..] {
                            return Err(TapeError::ShapeMismatch {
                                op: "concat",
                                left: first.shape.clone(),
                                right: t.shape.clone(),
                            });
                        }
                        rows += t.shape[0];
                        data.extend_from_slice(&t.data);
                    }
                    let mut shape = first.shape.clone();
                    shape[0] = rows;
                    Ok(Tensor { data, shape })
                }
                1 => {
                    for t in inputs {
                        if t.shape.len() != 2 || t.shape[0] != first.shape[0] {
                            return Err(TapeError::ShapeMismatch {
                                op: "concat",
                                left: first.shape.clone(),
                                right: t.shape.clone(),
                            });
                        }
                    }
                    let rows = first.shape[0];
                    let cols: usize = inputs.iter().map(|t| t.shape[1]).sum();
                    let mut data = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        for t in inputs {
                            data.extend_from_slice(t.row(r));
                        }
                    }
                    Ok(Tensor {
                        data,
                        shape: vec![rows, cols],
                    })
                }
                other => Err(TapeError::Axis(*other)),
            }
        }
        OpKind::L2Norm => {
            unary(1)?;
            Ok(Tensor::scalar(inputs[0].norm()))
        }
        OpKind::StopGradient => {
            unary(1)?;
            Ok(inputs[0].clone())
        }
        OpKind::Reshape(shape) => {
            unary(1)?;
            inputs[0].clone().reshape(shape)
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(None, Vec::new(), value)
    }

    fn push(&mut self, op: Option<OpKind>, parents: Vec<usize>, value: Tensor) -> Var {
        self.nodes.push(Node { op, parents, value });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(TapeError::ForeignVar);
        }
        Ok(v.index)
    }

    /// Recorded value of `v`.
    ///
    /// Panics if `v` was produced by a different tape.
    pub fn value(&self, v: Var) -> &Tensor {
        let i = self.check(v).expect("variable from a different tape");
        &self.nodes[i].value
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        self.check(v)
            .map(|i| self.nodes[i].op.is_none())
            .unwrap_or(false)
    }

    /// Evaluates `kind` on `inputs` and appends the result to the tape.
    pub fn record(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let parents = inputs
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<Vec<_>>>()?;
        let values: Vec<&Tensor> = parents.iter().map(|&i| &self.nodes[i].value).collect();
        let out = forward(&kind, &values)?;
        Ok(self.push(Some(kind), parents, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Matmul, &[a, b])
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.record(OpKind::AddRow, &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(OpKind::Scale(c), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Mean, &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Square, &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Sqrt, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Tanh, &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Silu, &[a])
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        self.record(OpKind::SelectRows(rows.to_vec()), &[a])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        self.record(OpKind::Concat { axis }, inputs)
    }

    pub fn l2norm(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::L2Norm, &[a])
    }

    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::StopGradient, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.record(OpKind::Reshape(shape.to_vec()), &[a])
    }

    /// `sum(square(a))`.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let sq = self.square(a)?;
        self.sum(sq)
    }

    /// Gradients of the scalar `root` with respect to each leaf in `wrt`.
    ///
    /// Leaves that do not influence `root` receive zero tensors.
    pub fn backward(&self, root: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let root = self.check(root)?;
        let root_value = &self.nodes[root].value;
        if !root_value.is_scalar() {
            return Err(TapeError::NonScalarRoot(root_value.shape.clone()));
        }
        let mut targets = Vec::with_capacity(wrt.len());
        for &v in wrt {
            let i = self.check(v)?;
            if self.nodes[i].op.is_some() {
                return Err(TapeError::NotALeaf);
            }
            targets.push(i);
        }

        // Only nodes on a path from a requested leaf carry gradient.
        let mut needed = vec![false; root + 1];
        for &i in &targets {
            if i <= root {
                needed[i] = true;
            }
        }
        for i in 0..=root {
            let node = &self.nodes[i];
            if matches!(node.op, Some(OpKind::StopGradient)) {
                continue;
            }
            if node.parents.iter().any(|&p| needed[p]) {
                needed[i] = true;
            }
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        if needed[root] {
            grads[root] = Some(vec![1.0]);
        }
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let Some(op) = &node.op else {
                grads[i] = Some(g);
                continue;
            };
            for &p in &node.parents {
                if needed[p] && grads[p].is_none() {
                    grads[p] = Some(vec![0.0; self.nodes[p].value.len()]);
                }
            }
            self.propagate(op, node, &g, &mut grads, &needed);
            if targets.contains(&i) {
                grads[i] = Some(g);
            }
        }

        Ok(targets
            .iter()
            .map(|&i| {
                let shape = self.nodes[i].value.shape.clone();
                match grads.get(i).and_then(|g| g.clone()) {
                    Some(data) => Tensor { data, shape },
                    None => Tensor::zeros(&shape),
                }
            })
            .collect())
    }

    fn propagate(
        &self,
        op: &OpKind,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        needed: &[bool],
    ) {
        let parent = |k: usize| node.parents[k];
        let val = |k: usize| &self.nodes[node.parents[k]].value;
        match op {
            OpKind::Add | OpKind::Sub => {
                let sign = if matches!(op, OpKind::Sub) { -1.0 } else { 1.0 };
                if needed[parent(0)] {
                    add_into(&mut grads[parent(0)], |buf| {
                        buf.iter_mut().zip(g).for_each(|(b, &d)| *b += d)
                    });
                }
                if needed[parent(1)] {
                    add_into(&mut grads[parent(1)], |buf| {
                        buf.iter_mut().zip(g).for_each(|(b, &d)| *b += sign * d)
                    });
                }
            }
            OpKind::Mul => {
                for (k, other) in [(0, 1), (1, 0)] {
                    if needed[parent(k)] {
                        let o = &val(other).data;
                        add_into(&mut grads[parent(k)], |buf| {
                            for ((b, &d), &y) in buf.iter_mut().zip(g).zip(o) {
                                *b += d * y;
                            }
                        });
                    }
                }
            }
            OpKind::Matmul => {
                let (a, b) = (val(0), val(1));
                let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
                if needed[parent(0)] {
                    add_into(&mut grads[parent(0)], |buf| {
                        gemm(m, n, k, g, false, &b.data, true, 1.0, buf)
                    });
                }
                if needed[parent(1)] {
                    add_into(&mut grads[parent(1)], |buf| {
                        gemm(k, m, n, &a.data, true, g, false, 1.0, buf)
                    });
                }
            }
            OpKind::AddRow => {
                if needed[parent(0)] {
                    add_into(&mut grads[parent(0)], |buf| {
                        buf.iter_mut().zip(g).for_each(|(b, &d)| *b += d)
                    });
                }
                if needed[parent(1)] {
                    let cols = val(0).shape[1];
                    add_into(&mut grads[parent(1)], |buf| {
                        for r in g.chunks(cols) {
                            buf.iter_mut().zip(r).for_each(|(b, &d)| *b += d);
                        }
                    });
                }
            }
            OpKind::Scale(c) => {
                if needed[parent(0)] {
                    add_into(&mut grads[parent(0)], |buf| {
                        buf.iter_mut().zip(g).for_each(|(b, &d)| *b += c * d)
                    });
                }
            }
            OpKind::Sum | OpKind::Mean => {
                if needed[parent(0)] {
                    let d = if matches!(op, OpKind::Mean) {
                        g[0] / val(0).len() as f64
                    } else {
                        g[0]
                    };
                    add_into(&mut grads[parent(0)], |buf| {
                        buf.iter_mut().for_each(|b| *b += d)
                    });
                }
            }
            OpKind::Square => {
                if needed[parent(0)] {
                    let x = &val(0).data;
                    add_into(&mut grads[parent(0)], |buf| {
                        for ((b, &d), &x) in buf.iter_mut().zip(g).zip(x) {
                            *b += 2.0 * x * d;
                        }
                    });
                }
            }
            OpKind::Sqrt => {
                if needed[parent(0)] {
                    let y = &node.value.data;
                    add_into(&mut grads[parent(0)], |buf| {
                        for ((b, &d), &y) in buf.iter_mut().zip(g).zip(y) {
                            *b += 0.5 * d / y;
                        }
                    });
                }
            }
            OpKind::Tanh => {
                if needed[parent(0)] {
                    let y = &node.value.data;
                    add_into(&mut grads[parent(0)], |buf| {
                        for ((b, &d), &y) in buf.iter_mut().zip(g).zip(y) {
                            *b += d * (1.0 - y * y);
                        }
                    });
                }
            }
            OpKind::Silu => {
                if needed[parent(0)] {
                    let x = &val(0).data;
                    add_into(&mut grads[parent(0)], |buf| {
                        for ((b, &d), &x) in buf.iter_mut().zip(g).zip(x) {
                            let s = sigmoid(x);
                            *b += d * s * (1.0 + x * (1.0 - s));
                        }
                    });
                }
            }
            OpKind::SelectRows(idx) => {
                if needed[parent(0)] {
                    let w = val(0).row_len();
                    add_into(&mut grads[parent(0)], |buf| {
                        for (src, &row) in g.chunks(w.max(1)).zip(idx) {
                            for (b, &d) in buf[row * w..(row + 1) * w].iter_mut().zip(src) {
                                *b += d;
                            }
                        }
                    });
                }
            }
            OpKind::Concat { axis } => {
                if *axis == 0 {
                    let mut offset = 0;
                    for k in 0..node.parents.len() {
                        let len = val(k).len();
                        if needed[parent(k)] {
                            add_into(&mut grads[parent(k)], |buf| {
                                buf.iter_mut()
                                    .zip(&g[offset..offset + len])
                                    .for_each(|(b, &d)| *b += d)
                            });
                        }
                        offset += len;
                    }
                } else {
                    let rows = node.value.shape[0];
                    let total = node.value.shape[1];
                    let mut col = 0;
                    for k in 0..node.parents.len() {
                        let w = val(k).shape[1];
                        if needed[parent(k)] {
                            add_into(&mut grads[parent(k)], |buf| {
                                for r in 0..rows {
                                    let src = &g[r * total + col..r * total + col + w];
                                    buf[r * w..(r + 1) * w]
                                        .iter_mut()
                                        .zip(src)
                                        .for_each(|(b, &d)| *b += d);
                                }
                            });
                        }
                        col += w;
                    }
                }
            }
            OpKind::L2Norm => {
                if needed[parent(0)] {
                    let norm = node.value.data[0];
                    if norm > 0.0 {
                        let x = &val(0).data;
                        add_into(&mut grads[parent(0)], |buf| {
                            for (b, &x) in buf.iter_mut().zip(x) {
                                *b += g[0] * x / norm;
                            }
                        });
                    }
                }
            }
            OpKind::StopGradient => {}
            OpKind::Reshape(_) => {
                if needed[parent(0)] {
                    add_into(&mut grads[parent(0)], |buf| {
                        buf.iter_mut().zip(g).for_each(|(b, &d)| *b += d)
                    });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::new(data.to_vec(), shape.to_vec()).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::vector(vec![3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i = tape.leaf(t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]));
        let x = tape.leaf(t(&[5.0, 7.0], &[2, 1]));
        let y = tape.matmul(i, x).unwrap();
        assert_eq!(tape.value(y), &t(&[5.0, 7.0], &[2, 1]));
    }

    #[test]
    fn sum_of_squares_and_its_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![3.0, 4.0]));
        let s = tape.sum_squares(x).unwrap();
        assert_eq!(tape.value(s).item(), 25.0);
        let g = tape.backward(s, &[x]).unwrap();
        assert_eq!(g[0].data(), &[6.0, 8.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let err = tape.add(a, b).unwrap_err();
        assert_eq!(
            err,
            TapeError::ShapeMismatch {
                op: "add",
                left: vec![2],
                right: vec![3]
            }
        );
        assert!(err.to_string().contains("[2]") && err.to_string().contains("[3]"));

        let m = tape.leaf(Tensor::zeros(&[2, 3]));
        let n = tape.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            tape.matmul(m, n),
            Err(TapeError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.leaf(Tensor::vector(vec![5.0, -1.0]));
        let sx = tape.stop_gradient(x).unwrap();
        assert_eq!(tape.value(sx).data(), &[1.0, 2.0]);
        let p = tape.mul(sx, y).unwrap();
        let root = tape.sum(p).unwrap();
        let g = tape.backward(root, &[x, y]).unwrap();
        assert_eq!(g[0].data(), &[0.0, 0.0]);
        assert_eq!(g[1].data(), &[1.0, 2.0]);
    }

    #[test]
    fn stop_gradient_on_zero_residual() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(1.0));
        let b = tape.leaf(Tensor::scalar(1.0));
        let sa = tape.stop_gradient(a).unwrap();
        let d = tape.sub(sa, b).unwrap();
        let l = tape.square(d).unwrap();
        let g = tape.backward(l, &[a, b]).unwrap();
        assert_eq!(g[0].item(), 0.0);
        assert_eq!(g[1].item(), 0.0);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let unused = tape.leaf(Tensor::zeros(&[2, 2]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s, &[unused, x]).unwrap();
        assert_eq!(g[0], Tensor::zeros(&[2, 2]));
        assert_eq!(g[1].data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_contract_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.square(x).unwrap();
        assert!(matches!(
            tape.backward(y, &[x]),
            Err(TapeError::NonScalarRoot(_))
        ));
        let s = tape.sum(y).unwrap();
        assert_eq!(tape.backward(s, &[y]), Err(TapeError::NotALeaf));

        let mut other = Tape::new();
        let z = other.leaf(Tensor::scalar(1.0));
        assert_eq!(tape.backward(s, &[z]), Err(TapeError::ForeignVar));
        assert_eq!(tape.add(x, z), Err(TapeError::ForeignVar));
    }

    #[test]
    fn select_and_concat_route_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]));
        let picked = tape.select_rows(x, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(picked).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = tape.sum(picked).unwrap();
        let g = tape.backward(s, &[x]).unwrap();
        assert_eq!(g[0].data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);

        let a = tape.leaf(t(&[1.0, 2.0], &[2, 1]));
        let b = tape.leaf(t(&[3.0, 4.0, 5.0, 6.0], &[2, 2]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c), &t(&[1.0, 3.0, 4.0, 2.0, 5.0, 6.0], &[2, 3]));
        let w = tape.leaf(t(&[1.0, 10.0, 100.0, 1000.0, 1e4, 1e5], &[2, 3]));
        let p = tape.mul(c, w).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s, &[a, b]).unwrap();
        assert_eq!(g[0].data(), &[1.0, 1000.0]);
        assert_eq!(g[1].data(), &[10.0, 100.0, 1e4, 1e5]);
    }

    #[test]
    fn l2norm_gradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3]));
        let n = tape.l2norm(x).unwrap();
        let g = tape.backward(n, &[x]).unwrap();
        assert_eq!(g[0].data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn tensor_rejects_bad_length() {
        assert!(Tensor::new(vec![1.0; 5], vec![2, 3]).is_err());
    }
}
