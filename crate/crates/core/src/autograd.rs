//! Reverse-mode automatic differentiation over dense f64 matrices.
//!
//! A [`Tape`] records every operation in construction order, so the reverse
//! sweep in decreasing node index is a valid topological order and visits
//! each node exactly once. Node data is immutable once recorded; running the
//! same seeded forward+backward twice is bit-identical.
//!
//! A tape is confined to one thread. Independent tapes may run in parallel.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Index-addressed operation record. Parent indices always point at earlier
/// tape entries.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRowBroadcast(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    SoftmaxRows(usize),
    Transpose(usize),
    ConcatCols(usize, usize),
    ConcatRows(usize, usize),
    SliceRows(usize, usize, usize),
    SliceCols(usize, usize, usize),
    MeanRows(usize),
    RowSums(usize),
    SumAll(usize),
    MulColBroadcast(usize, usize),
    RowNormalize(usize),
    GatherRows(usize, Rc<Vec<usize>>),
    ScatterSymmetric {
        src: usize,
        pairs: Rc<Vec<(usize, usize)>>,
        n: usize,
    },
    Laplacian(usize),
    /// Top-k eigenvalues of a symmetric matrix, descending. The eigenvectors
    /// captured at forward time drive the backward rule d(lambda)/dL = v v^T.
    SymEigTopK {
        src: usize,
        vectors: DMatrix<f64>,
    },
}

struct Node {
    data: DMatrix<f64>,
    op: Op,
}

struct TapeInner {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<DMatrix<f64>>>>,
}

/// A recording tape. Cheap to clone (shared handle).
#[derive(Clone)]
pub struct Tape {
    inner: Rc<TapeInner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(TapeInner {
                nodes: RefCell::new(Vec::new()),
                grads: RefCell::new(Vec::new()),
            }),
        }
    }

    fn push(&self, data: DMatrix<f64>, op: Op) -> Value {
        let mut nodes = self.inner.nodes.borrow_mut();
        nodes.push(Node { data, op });
        Value {
            tape: self.clone(),
            idx: nodes.len() - 1,
        }
    }

    /// Record an input matrix. Leaves and constants are mechanically the
    /// same; callers query gradients only for the leaves they care about.
    pub fn value(&self, data: DMatrix<f64>) -> Value {
        self.push(data, Op::Leaf)
    }

    /// Convenience: record a scalar as a 1x1 value.
    pub fn scalar(&self, v: f64) -> Value {
        self.value(DMatrix::from_element(1, 1, v))
    }

    pub fn len(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Handle to one tape entry: a dense matrix plus its provenance.
#[derive(Clone)]
pub struct Value {
    tape: Tape,
    idx: usize,
}

fn same_tape(a: &Value, b: &Value) {
    assert!(
        Rc::ptr_eq(&a.tape.inner, &b.tape.inner),
        "values belong to different tapes"
    );
}

impl Value {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Borrow the forward data.
    pub fn data(&self) -> Ref<'_, DMatrix<f64>> {
        Ref::map(self.tape.inner.nodes.borrow(), |nodes| {
            &nodes[self.idx].data
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        let d = self.data();
        (d.nrows(), d.ncols())
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        self.data().clone()
    }

    /// Scalar payload of a 1x1 value.
    pub fn item(&self) -> f64 {
        let d = self.data();
        assert_eq!((d.nrows(), d.ncols()), (1, 1), "item() on non-scalar value");
        d[(0, 0)]
    }

    /// Gradient accumulated by the last [`Value::backward`] call, if any
    /// reached this node.
    pub fn grad(&self) -> Option<DMatrix<f64>> {
        self.tape.inner.grads.borrow().get(self.idx)?.clone()
    }

    /// Gradient, or zeros when no path reached this node.
    pub fn grad_or_zero(&self) -> DMatrix<f64> {
        let (r, c) = self.shape();
        self.grad().unwrap_or_else(|| DMatrix::zeros(r, c))
    }

    pub fn matmul(&self, rhs: &Value) -> Result<Value> {
        same_tape(self, rhs);
        let (ar, ac) = self.shape();
        let (br, bc) = rhs.shape();
        if ac != br {
            return Err(Error::shape("matmul", (ar, ac), (br, bc)));
        }
        let data = {
            let nodes = self.tape.inner.nodes.borrow();
            &nodes[self.idx].data * &nodes[rhs.idx].data
        };
        Ok(self.tape.push(data, Op::MatMul(self.idx, rhs.idx)))
    }

    pub fn add(&self, rhs: &Value) -> Result<Value> {
        same_tape(self, rhs);
        let (ar, ac) = self.shape();
        let (br, bc) = rhs.shape();
        if (ar, ac) != (br, bc) {
            return Err(Error::shape("add", (ar, ac), (br, bc)));
        }
        let data = {
            let nodes = self.tape.inner.nodes.borrow();
            &nodes[self.idx].data + &nodes[rhs.idx].data
        };
        Ok(self.tape.push(data, Op::Add(self.idx, rhs.idx)))
    }

    /// `self` (n x d) plus a 1 x d row replicated over all n rows.
    pub fn add_row_broadcast(&self, row: &Value) -> Result<Value> {
        same_tape(self, row);
        let (ar, ac) = self.shape();
        let (br, bc) = row.shape();
        if br != 1 || bc != ac {
            return Err(Error::shape("add_row_broadcast", (ar, ac), (br, bc)));
        }
        let data = {
            let nodes = self.tape.inner.nodes.borrow();
            let a = &nodes[self.idx].data;
            let b = &nodes[row.idx].data;
            let mut out = a.clone();
            for i in 0..ar {
                for j in 0..ac {
                    out[(i, j)] += b[(0, j)];
                }
            }
            out
        };
        Ok(self
            .tape
            .push(data, Op::AddRowBroadcast(self.idx, row.idx)))
    }

    pub fn sub(&self, rhs: &Value) -> Result<Value> {
        same_tape(self, rhs);
        let (ar, ac) = self.shape();
        let (br, bc) = rhs.shape();
        if (ar, ac) != (br, bc) {
            return Err(Error::shape("sub", (ar, ac), (br, bc)));
        }
        let data = {
            let nodes = self.tape.inner.nodes.borrow();
            &nodes[self.idx].data - &nodes[rhs.idx].data
        };
        Ok(self.tape.push(data, Op::Sub(self.idx, rhs.idx)))
    }

    pub fn hadamard(&self, rhs: &Value) -> Result<Value> {
        same_tape(self, rhs);
        let (ar, ac) = self.shape();
        let (br, bc) = rhs.shape();
        if (ar, ac) != (br, bc) {
            return Err(Error::shape("hadamard", (ar, ac), (br, bc)));
        }
        let data = {
            let nodes = self.tape.inner.nodes.borrow();
            nodes[self.idx].data.component_mul(&nodes[rhs.idx].data)
        };
        Ok(self.tape.push(data, Op::Hadamard(self.idx, rhs.idx)))
    }

    pub fn scale(&self, c: f64) -> Value {
        let data = self.data().clone() * c;
        self.tape.push(data, Op::Scale(self.idx, c))
    }

    /// ReLU with subgradient 0 at the origin.
    pub fn relu(&self) -> Value {
        let data = self.data().map(|v| if v > 0.0 { v } else { 0.0 });
        self.tape.push(data, Op::Relu(self.idx))
    }

    pub fn sigmoid(&self) -> Value {
        let data = self.data().map(|v| 1.0 / (1.0 + (-v).exp()));
        self.tape.push(data, Op::Sigmoid(self.idx))
    }

    /// Row-wise softmax with max-shift stabilization.
    pub fn softmax_rows(&self) -> Result<Value> {
        let (r, c) = self.shape();
        if c == 0 {
            return Err(Error::dim("softmax_rows", "empty rows (zero columns)"));
        }
        let data = {
            let src = self.data();
            let mut out = DMatrix::zeros(r, c);
            for i in 0..r {
                let mut mx = f64::NEG_INFINITY;
                for j in 0..c {
                    mx = mx.max(src[(i, j)]);
                }
                let mut sum = 0.0;
                for j in 0..c {
                    let e = (src[(i, j)] - mx).exp();
                    out[(i, j)] = e;
                    sum += e;
                }
                for j in 0..c {
                    out[(i, j)] /= sum;
                }
            }
            out
        };
        Ok(self.tape.push(data, Op::SoftmaxRows(self.idx)))
    }

    pub fn transpose(&self) -> Value {
        let data = self.data().transpose();
        self.tape.push(data, Op::Transpose(self.idx))
    }

    pub fn concat_cols(&self, rhs: &Value) -> Result<Value> {
        same_tape(self, rhs);
        let (ar, ac) = self.shape();
        let (br, bc) = rhs.shape();
        if ar != br {
            return Err(Error::shape("concat_cols", (ar, ac), (br, bc)));
        }
        let data = {
            let nodes = self.tape.inner.nodes.borrow();
            let a = &nodes[self.idx].data;
            let b = &nodes[rhs.idx].data;
            let mut out = DMatrix::zeros(ar, ac + bc);
            for i in 0..ar {
                for j in 0..ac {
                    out[(i, j)] = a[(i, j)];
                }
                for j in 0..bc {
                    out[(i, ac + j)] = b[(i, j)];
                }
            }
            out
        };
        Ok(self.tape.push(data, Op::ConcatCols(self.idx, rhs.idx)))
    }

    pub fn concat_rows(&self, rhs: &Value) -> Result<Value> {
        same_tape(self, rhs);
        let (ar, ac) = self.shape();
        let (br, bc) = rhs.shape();
        if ac != bc {
            return Err(Error::shape("concat_rows", (ar, ac), (br, bc)));
        }
        let data = {
            let nodes = self.tape.inner.nodes.borrow();
            let a = &nodes[self.idx].data;
            let b = &nodes[rhs.idx].data;
            let mut out = DMatrix::zeros(ar + br, ac);
            for j in 0..ac {
                for i in 0..ar {
                    out[(i, j)] = a[(i, j)];
                }
                for i in 0..br {
                    out[(ar + i, j)] = b[(i, j)];
                }
            }
            out
        };
        Ok(self.tape.push(data, Op::ConcatRows(self.idx, rhs.idx)))
    }

    pub fn slice_rows(&self, from: usize, len: usize) -> Result<Value> {
        let (r, c) = self.shape();
        if from + len > r {
            return Err(Error::dim(
                "slice_rows",
                format!("rows {from}..{} out of 0..{r}", from + len),
            ));
        }
        let data = self.data().rows(from, len).into_owned();
        let _ = c;
        Ok(self.tape.push(data, Op::SliceRows(self.idx, from, len)))
    }

    pub fn slice_cols(&self, from: usize, len: usize) -> Result<Value> {
        let (_, c) = self.shape();
        if from + len > c {
            return Err(Error::dim(
                "slice_cols",
                format!("cols {from}..{} out of 0..{c}", from + len),
            ));
        }
        let data = self.data().columns(from, len).into_owned();
        Ok(self.tape.push(data, Op::SliceCols(self.idx, from, len)))
    }

    /// Mean over rows: n x d -> 1 x d. Errors on zero rows.
    pub fn mean_rows(&self) -> Result<Value> {
        let (r, c) = self.shape();
        if r == 0 {
            return Err(Error::dim("mean_rows", "zero rows"));
        }
        let data = {
            let src = self.data();
            let mut out = DMatrix::zeros(1, c);
            for j in 0..c {
                let mut s = 0.0;
                for i in 0..r {
                    s += src[(i, j)];
                }
                out[(0, j)] = s / r as f64;
            }
            out
        };
        Ok(self.tape.push(data, Op::MeanRows(self.idx)))
    }

    /// Per-row sums: n x d -> n x 1.
    pub fn row_sums(&self) -> Value {
        let (r, c) = self.shape();
        let data = {
            let src = self.data();
            let mut out = DMatrix::zeros(r, 1);
            for i in 0..r {
                let mut s = 0.0;
                for j in 0..c {
                    s += src[(i, j)];
                }
                out[(i, 0)] = s;
            }
            out
        };
        self.tape.push(data, Op::RowSums(self.idx))
    }

    /// Sum of all entries -> 1 x 1.
    pub fn sum_all(&self) -> Value {
        let data = DMatrix::from_element(1, 1, self.data().iter().sum());
        self.tape.push(data, Op::SumAll(self.idx))
    }

    /// Scale row i of `self` (n x d) by `col[i]` (n x 1).
    pub fn mul_col_broadcast(&self, col: &Value) -> Result<Value> {
        same_tape(self, col);
        let (ar, ac) = self.shape();
        let (br, bc) = col.shape();
        if br != ar || bc != 1 {
            return Err(Error::shape("mul_col_broadcast", (ar, ac), (br, bc)));
        }
        let data = {
            let nodes = self.tape.inner.nodes.borrow();
            let a = &nodes[self.idx].data;
            let b = &nodes[col.idx].data;
            let mut out = a.clone();
            for i in 0..ar {
                for j in 0..ac {
                    out[(i, j)] *= b[(i, 0)];
                }
            }
            out
        };
        Ok(self
            .tape
            .push(data, Op::MulColBroadcast(self.idx, col.idx)))
    }

    /// Divide each row by its sum; rows summing to exactly zero stay zero.
    pub fn row_normalize(&self) -> Value {
        let (r, c) = self.shape();
        let data = {
            let src = self.data();
            let mut out = DMatrix::zeros(r, c);
            for i in 0..r {
                let mut d = 0.0;
                for j in 0..c {
                    d += src[(i, j)];
                }
                if d != 0.0 {
                    for j in 0..c {
                        out[(i, j)] = src[(i, j)] / d;
                    }
                }
            }
            out
        };
        self.tape.push(data, Op::RowNormalize(self.idx))
    }

    /// Select rows by index (duplicates allowed): len(indices) x d.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Value> {
        let (r, c) = self.shape();
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::dim(
                "gather_rows",
                format!("index {bad} out of 0..{r}"),
            ));
        }
        let data = {
            let src = self.data();
            let mut out = DMatrix::zeros(indices.len(), c);
            for (k, &i) in indices.iter().enumerate() {
                for j in 0..c {
                    out[(k, j)] = src[(i, j)];
                }
            }
            out
        };
        Ok(self.tape.push(
            data,
            Op::GatherRows(self.idx, Rc::new(indices.to_vec())),
        ))
    }

    /// Build an n x n symmetric matrix placing entry e of `self` (P x 1) at
    /// `(i_e, j_e)` and `(j_e, i_e)`. Pairs must have distinct endpoints and
    /// appear at most once.
    pub fn scatter_symmetric(&self, pairs: &[(usize, usize)], n: usize) -> Result<Value> {
        let (r, c) = self.shape();
        if c != 1 || r != pairs.len() {
            return Err(Error::dim(
                "scatter_symmetric",
                format!("expected {} x 1 weights, got {r} x {c}", pairs.len()),
            ));
        }
        if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= n || j >= n || i == j) {
            return Err(Error::dim(
                "scatter_symmetric",
                format!("invalid pair ({i}, {j}) for n={n}"),
            ));
        }
        let data = {
            let src = self.data();
            let mut out = DMatrix::zeros(n, n);
            for (e, &(i, j)) in pairs.iter().enumerate() {
                out[(i, j)] = src[(e, 0)];
                out[(j, i)] = src[(e, 0)];
            }
            out
        };
        Ok(self.tape.push(
            data,
            Op::ScatterSymmetric {
                src: self.idx,
                pairs: Rc::new(pairs.to_vec()),
                n,
            },
        ))
    }

    /// Graph Laplacian D - A of a square adjacency, differentiable in A.
    pub fn laplacian(&self) -> Result<Value> {
        let (r, c) = self.shape();
        if r != c {
            return Err(Error::dim(
                "laplacian",
                format!("adjacency must be square, got {r} x {c}"),
            ));
        }
        let data = {
            let src = self.data();
            let mut out = -src.clone();
            for i in 0..r {
                let mut d = 0.0;
                for j in 0..r {
                    d += src[(i, j)];
                }
                out[(i, i)] += d;
            }
            out
        };
        Ok(self.tape.push(data, Op::Laplacian(self.idx)))
    }

    /// Top-k eigenvalues (descending) of a symmetric matrix as a k x 1 value.
    ///
    /// Backward uses d(lambda_m)/dL = v_m v_m^T, valid for simple
    /// eigenvalues; for repeated eigenvalues this is a subgradient tied to
    /// the eigenvector basis the solver returned.
    pub fn sym_eig_topk(&self, k: usize) -> Result<Value> {
        let (r, c) = self.shape();
        if r != c {
            return Err(Error::dim(
                "sym_eig_topk",
                format!("matrix must be square, got {r} x {c}"),
            ));
        }
        if k > r {
            return Err(Error::dim(
                "sym_eig_topk",
                format!("k={k} exceeds dimension {r}"),
            ));
        }
        let (vals, vecs) = {
            let src = self.data();
            let eig = src
                .clone()
                .try_symmetric_eigen(1e-13, 10_000)
                .ok_or_else(|| Error::Numerical("symmetric eigensolver did not converge".into()))?;
            let mut order: Vec<usize> = (0..r).collect();
            order.sort_by(|&a, &b| {
                eig.eigenvalues[b]
                    .partial_cmp(&eig.eigenvalues[a])
                    .expect("non-finite eigenvalue")
            });
            let mut vals = DMatrix::zeros(k, 1);
            let mut vecs = DMatrix::zeros(r, k);
            for (m, &src_i) in order.iter().take(k).enumerate() {
                vals[(m, 0)] = eig.eigenvalues[src_i];
                vecs.set_column(m, &eig.eigenvectors.column(src_i));
            }
            (vals, vecs)
        };
        Ok(self.tape.push(
            vals,
            Op::SymEigTopK {
                src: self.idx,
                vectors: vecs,
            },
        ))
    }

    /// Mean squared error against `target` over all entries -> 1 x 1.
    pub fn mse(&self, target: &Value) -> Result<Value> {
        let (r, c) = self.shape();
        let diff = self.sub(target)?;
        let sq = diff.hadamard(&diff)?;
        Ok(sq.sum_all().scale(1.0 / (r * c) as f64))
    }

    /// Sum of squared entries -> 1 x 1.
    pub fn sum_squares(&self) -> Result<Value> {
        Ok(self.hadamard(self)?.sum_all())
    }

    /// Reverse sweep seeding d(self)/d(self) = 1. `self` must be 1 x 1.
    /// Clears any gradients from a previous sweep on this tape.
    pub fn backward(&self) -> Result<()> {
        {
            let d = self.data();
            if (d.nrows(), d.ncols()) != (1, 1) {
                return Err(Error::dim(
                    "backward",
                    format!("loss must be 1 x 1, got {} x {}", d.nrows(), d.ncols()),
                ));
            }
            if !d[(0, 0)].is_finite() {
                return Err(Error::Numerical("non-finite loss at backward".into()));
            }
        }
        let nodes = self.tape.inner.nodes.borrow();
        let mut grads = self.tape.inner.grads.borrow_mut();
        grads.clear();
        grads.resize(nodes.len(), None);
        grads[self.idx] = Some(DMatrix::from_element(1, 1, 1.0));

        for i in (0..=self.idx).rev() {
            let g = match grads[i].clone() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = &nodes[*a].data;
                    let db = &nodes[*b].data;
                    accumulate(&mut grads, *a, &g * db.transpose());
                    accumulate(&mut grads, *b, da.transpose() * &g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRowBroadcast(a, b) => {
                    let mut gb = DMatrix::zeros(1, g.ncols());
                    for j in 0..g.ncols() {
                        let mut s = 0.0;
                        for i2 in 0..g.nrows() {
                            s += g[(i2, j)];
                        }
                        gb[(0, j)] = s;
                    }
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, -g);
                }
                Op::Hadamard(a, b) => {
                    let da = nodes[*a].data.clone();
                    let db = nodes[*b].data.clone();
                    accumulate(&mut grads, *a, g.component_mul(&db));
                    accumulate(&mut grads, *b, g.component_mul(&da));
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, g * *c);
                }
                Op::Relu(a) => {
                    let da = &nodes[*a].data;
                    let ga = g.zip_map(da, |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let s = &node.data;
                    let ga = g.zip_map(s, |gv, sv| gv * sv * (1.0 - sv));
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let s = &node.data;
                    let mut ga = DMatrix::zeros(g.nrows(), g.ncols());
                    for i2 in 0..g.nrows() {
                        let mut dot = 0.0;
                        for j in 0..g.ncols() {
                            dot += g[(i2, j)] * s[(i2, j)];
                        }
                        for j in 0..g.ncols() {
                            ga[(i2, j)] = s[(i2, j)] * (g[(i2, j)] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, g.transpose());
                }
                Op::ConcatCols(a, b) => {
                    let ac = nodes[*a].data.ncols();
                    let bc = nodes[*b].data.ncols();
                    accumulate(&mut grads, *a, g.columns(0, ac).into_owned());
                    accumulate(&mut grads, *b, g.columns(ac, bc).into_owned());
                }
                Op::ConcatRows(a, b) => {
                    let ar = nodes[*a].data.nrows();
                    let br = nodes[*b].data.nrows();
                    accumulate(&mut grads, *a, g.rows(0, ar).into_owned());
                    accumulate(&mut grads, *b, g.rows(ar, br).into_owned());
                }
                Op::SliceRows(a, from, len) => {
                    let (r, c) = (nodes[*a].data.nrows(), nodes[*a].data.ncols());
                    let mut ga = DMatrix::zeros(r, c);
                    for i2 in 0..*len {
                        for j in 0..c {
                            ga[(from + i2, j)] = g[(i2, j)];
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceCols(a, from, len) => {
                    let (r, c) = (nodes[*a].data.nrows(), nodes[*a].data.ncols());
                    let mut ga = DMatrix::zeros(r, c);
                    for i2 in 0..r {
                        for j in 0..*len {
                            ga[(i2, from + j)] = g[(i2, j)];
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let r = nodes[*a].data.nrows();
                    let mut ga = DMatrix::zeros(r, g.ncols());
                    for i2 in 0..r {
                        for j in 0..g.ncols() {
                            ga[(i2, j)] = g[(0, j)] / r as f64;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowSums(a) => {
                    let (r, c) = (nodes[*a].data.nrows(), nodes[*a].data.ncols());
                    let mut ga = DMatrix::zeros(r, c);
                    for i2 in 0..r {
                        for j in 0..c {
                            ga[(i2, j)] = g[(i2, 0)];
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let (r, c) = (nodes[*a].data.nrows(), nodes[*a].data.ncols());
                    accumulate(&mut grads, *a, DMatrix::from_element(r, c, g[(0, 0)]));
                }
                Op::MulColBroadcast(a, b) => {
                    let da = &nodes[*a].data;
                    let db = &nodes[*b].data;
                    let mut ga = DMatrix::zeros(da.nrows(), da.ncols());
                    let mut gb = DMatrix::zeros(db.nrows(), 1);
                    for i2 in 0..da.nrows() {
                        let mut s = 0.0;
                        for j in 0..da.ncols() {
                            ga[(i2, j)] = g[(i2, j)] * db[(i2, 0)];
                            s += g[(i2, j)] * da[(i2, j)];
                        }
                        gb[(i2, 0)] = s;
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::RowNormalize(a) => {
                    let da = &nodes[*a].data;
                    let (r, c) = (da.nrows(), da.ncols());
                    let mut ga = DMatrix::zeros(r, c);
                    for i2 in 0..r {
                        let mut d = 0.0;
                        for j in 0..c {
                            d += da[(i2, j)];
                        }
                        if d == 0.0 {
                            continue;
                        }
                        let mut gdot = 0.0;
                        for j in 0..c {
                            gdot += g[(i2, j)] * da[(i2, j)];
                        }
                        for j in 0..c {
                            ga[(i2, j)] = g[(i2, j)] / d - gdot / (d * d);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows(a, indices) => {
                    let (r, c) = (nodes[*a].data.nrows(), nodes[*a].data.ncols());
                    let mut ga = DMatrix::zeros(r, c);
                    for (k, &i2) in indices.iter().enumerate() {
                        for j in 0..c {
                            ga[(i2, j)] += g[(k, j)];
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ScatterSymmetric { src, pairs, n: _ } => {
                    let mut gs = DMatrix::zeros(pairs.len(), 1);
                    for (e, &(i2, j)) in pairs.iter().enumerate() {
                        gs[(e, 0)] = g[(i2, j)] + g[(j, i2)];
                    }
                    accumulate(&mut grads, *src, gs);
                }
                Op::Laplacian(a) => {
                    let n = nodes[*a].data.nrows();
                    let mut ga = DMatrix::zeros(n, n);
                    for k in 0..n {
                        for l in 0..n {
                            ga[(k, l)] = g[(k, k)] - g[(k, l)];
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SymEigTopK { src, vectors } => {
                    let n = vectors.nrows();
                    let mut ga = DMatrix::zeros(n, n);
                    for m in 0..g.nrows() {
                        let v = vectors.column(m);
                        let gm = g[(m, 0)];
                        for i2 in 0..n {
                            for j in 0..n {
                                ga[(i2, j)] += gm * v[i2] * v[j];
                            }
                        }
                    }
                    accumulate(&mut grads, *src, ga);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<DMatrix<f64>>], idx: usize, g: DMatrix<f64>) {
    match &mut grads[idx] {
        Some(acc) => *acc += g,
        slot => *slot = Some(g),
    }
}

/// Central-difference gradient verification.
///
/// Runs `f` on leaves created from `params`, backpropagates, then compares
/// each analytic gradient entry against `(f(x+h) - f(x-h)) / 2h`. Returns the
/// maximum of `|analytic - numeric| / max(1, |analytic|)` over all entries.
pub fn grad_check<F>(params: &[DMatrix<f64>], step: f64, f: F) -> Result<f64>
where
    F: Fn(&Tape, &[Value]) -> Result<Value>,
{
    let eval = |mats: &[DMatrix<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let leaves: Vec<Value> = mats.iter().map(|m| tape.value(m.clone())).collect();
        let out = f(&tape, &leaves)?;
        let v = out.item();
        if !v.is_finite() {
            return Err(Error::Numerical("non-finite value in grad_check".into()));
        }
        Ok(v)
    };

    let tape = Tape::new();
    let leaves: Vec<Value> = params.iter().map(|m| tape.value(m.clone())).collect();
    let out = f(&tape, &leaves)?;
    out.backward()?;
    let analytic: Vec<DMatrix<f64>> = leaves.iter().map(|v| v.grad_or_zero()).collect();

    let mut work: Vec<DMatrix<f64>> = params.to_vec();
    let mut max_rel = 0.0f64;
    for (p, grad) in analytic.iter().enumerate() {
        for i in 0..grad.nrows() {
            for j in 0..grad.ncols() {
                let orig = work[p][(i, j)];
                work[p][(i, j)] = orig + step;
                let hi = eval(&work)?;
                work[p][(i, j)] = orig - step;
                let lo = eval(&work)?;
                work[p][(i, j)] = orig;
                let numeric = (hi - lo) / (2.0 * step);
                let a = grad[(i, j)];
                let rel = (a - numeric).abs() / a.abs().max(1.0);
                if rel > max_rel {
                    max_rel = rel;
                }
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, v)
    }

    #[test]
    fn matmul_identity_passthrough() {
        let tape = Tape::new();
        let ident = tape.value(DMatrix::identity(2, 2));
        let x = tape.value(mat(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = ident.matmul(&x).unwrap();
        assert_eq!(*y.data(), *x.data());
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let tape = Tape::new();
        let a = tape.value(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.value(mat(2, 1, &[1.0, 1.0]));
        let y = a.matmul(&b).unwrap();
        assert_eq!(*y.data(), mat(2, 1, &[3.0, 7.0]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.value(DMatrix::zeros(2, 3));
        let b = tape.value(DMatrix::zeros(2, 3));
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn relu_and_sigmoid_points() {
        let tape = Tape::new();
        let x = tape.value(mat(1, 3, &[-1.0, 0.0, 2.0]));
        let r = x.relu();
        assert_eq!(*r.data(), mat(1, 3, &[0.0, 0.0, 2.0]));
        let s = tape.scalar(0.0).sigmoid();
        assert!((s.item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_symmetry_and_empty_error() {
        let tape = Tape::new();
        let x = tape.value(mat(1, 2, &[0.0, 0.0]));
        let s = x.softmax_rows().unwrap();
        assert!((s.data()[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((s.data()[(0, 1)] - 0.5).abs() < 1e-15);

        let empty = tape.value(DMatrix::zeros(2, 0));
        assert!(empty.softmax_rows().is_err());
    }

    #[test]
    fn backward_constant_grad_is_zero() {
        let tape = Tape::new();
        let w = tape.value(mat(1, 1, &[3.0]));
        let c = tape.scalar(7.0);
        // Loss ignores w entirely.
        let loss = c.scale(2.0);
        loss.backward().unwrap();
        assert!(w.grad().is_none());
        assert_eq!(w.grad_or_zero(), DMatrix::zeros(1, 1));
    }

    #[test]
    fn backward_is_linear_in_loss_terms() {
        let run = |combine: bool| -> (DMatrix<f64>, DMatrix<f64>) {
            let tape = Tape::new();
            let w = tape.value(mat(2, 2, &[0.3, -0.7, 1.1, 0.4]));
            let x = tape.value(mat(2, 1, &[0.5, -1.2]));
            let y = w.matmul(&x).unwrap();
            let l1 = y.relu().sum_all();
            let l2 = y.sigmoid().sum_all();
            if combine {
                let tot = l1.add(&l2).unwrap();
                tot.backward().unwrap();
                (w.grad_or_zero(), x.grad_or_zero())
            } else {
                l1.backward().unwrap();
                let gw1 = w.grad_or_zero();
                let gx1 = x.grad_or_zero();
                l2.backward().unwrap();
                (gw1 + w.grad_or_zero(), gx1 + x.grad_or_zero())
            }
        };
        let (gw_joint, gx_joint) = run(true);
        let (gw_sum, gx_sum) = run(false);
        assert!((gw_joint - gw_sum).abs().max() < 1e-12);
        assert!((gx_joint - gx_sum).abs().max() < 1e-12);
    }

    #[test]
    fn repeated_backward_is_bit_identical() {
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;
        let run = || -> Vec<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut draw = |r: usize, c: usize| {
                DMatrix::from_fn(r, c, |_, _| rand::Rng::gen_range(&mut rng, -1.0..1.0))
            };
            let tape = Tape::new();
            let w = tape.value(draw(3, 4));
            let x = tape.value(draw(4, 2));
            let loss = w.matmul(&x).unwrap().sigmoid().sum_all();
            loss.backward().unwrap();
            w.grad_or_zero().iter().copied().collect()
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn laplacian_forward_matches_definition() {
        let tape = Tape::new();
        let a = tape.value(mat(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        let l = a.laplacian().unwrap();
        assert_eq!(*l.data(), mat(2, 2, &[1.0, -1.0, -1.0, 1.0]));
    }

    #[test]
    fn scatter_symmetric_roundtrip() {
        let tape = Tape::new();
        let p = tape.value(mat(2, 1, &[0.7, 0.9]));
        let a = p.scatter_symmetric(&[(0, 1), (1, 2)], 3).unwrap();
        assert_eq!(a.data()[(0, 1)], 0.7);
        assert_eq!(a.data()[(1, 0)], 0.7);
        assert_eq!(a.data()[(2, 1)], 0.9);
        assert_eq!(a.data()[(0, 2)], 0.0);
    }

    #[test]
    fn sym_eig_topk_path_graph() {
        let tape = Tape::new();
        let l = tape.value(mat(3, 3, &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0]));
        let eigs = l.sym_eig_topk(2).unwrap();
        assert!((eigs.data()[(0, 0)] - 3.0).abs() < 1e-10);
        assert!((eigs.data()[(1, 0)] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn sym_eig_topk_k_too_large() {
        let tape = Tape::new();
        let l = tape.value(DMatrix::zeros(2, 2));
        assert!(l.sym_eig_topk(3).is_err());
    }
}
