//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of a forward pass in topological
//! order; [`Tape::backward`] replays the records once, in reverse, and
//! accumulates gradients into the leaves. Only the operations the model
//! actually needs are provided — all matrices are rank 1 or 2 and the
//! single supported broadcast is a row vector onto a matrix.

use crate::error::{Error, Result};

// ── Scalar kernels ──────────────────────────────────────────────────────────
//
// Free functions shared between the tape forward pass and the tape-free
// incremental decoding path, so both routes produce bit-identical values.

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Subgradient at exactly 0 is 0.
#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// In-place row softmax with max subtraction.
pub fn softmax_row(row: &mut [f64]) {
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

/// In-place row log-softmax.
pub fn log_softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter() {
        sum += (*v - max).exp();
    }
    let lse = max + sum.ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// Row layer norm: zero mean, unit variance (biased, 1/n), then affine.
pub fn layer_norm_row(row: &[f64], gamma: &[f64], beta: &[f64], eps: f64, out: &mut [f64]) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    for (j, v) in row.iter().enumerate() {
        out[j] = gamma[j] * ((v - mean) * inv) + beta[j];
    }
}

/// Row vector times matrix: out[j] = Σ_z row[z]·m[z][j], m is z_len×n row-major.
pub fn vec_mat(row: &[f64], m: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(m.len(), row.len() * n);
    for o in out.iter_mut() {
        *o = 0.0;
    }
    for (z, &r) in row.iter().enumerate() {
        let mrow = &m[z * n..(z + 1) * n];
        for j in 0..n {
            out[j] += r * mrow[j];
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// C[m×n] = A[m×k]·B[k×n], all row-major.
pub fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (z, &av) in arow.iter().enumerate() {
            let brow = &b[z * n..(z + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// C[m×k] = A[m×n]·B[k×n]ᵀ.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            c[i * k + j] = dot(arow, brow);
        }
    }
    c
}

/// C[k×n] = A[m×k]ᵀ·B[m×n].
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (z, &av) in arow.iter().enumerate() {
            let crow = &mut c[z * n..(z + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

// ── Tensor ──────────────────────────────────────────────────────────────────

/// Dense row-major f64 array of rank 1 or 2, with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { shape: vec![rows, cols], data: vec![0.0; rows * cols], requires_grad: false, grad: None }
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Tensor { shape: vec![rows, cols], data: vec![value; rows * cols], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1, 1], data: vec![value], requires_grad: false, grad: None }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|v| v.len()).unwrap_or(0);
        if rows.iter().any(|v| v.len() != c) {
            return Err(Error::Shape("rows have unequal lengths".into()));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::new(vec![r, c], data)
    }

    /// Identity matrix of size n.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Entries drawn iid from U(−scale, scale).
    pub fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut impl rand::Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
        Tensor { shape: vec![rows, cols], data, requires_grad: false, grad: None }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// (rows, cols) view of the shape; rank-1 tensors are row vectors.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("rank {} tensor where rank <= 2 expected", self.shape.len()),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (_, c) = self.dims2();
        self.data[i * c + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let (_, c) = self.dims2();
        self.data[i * c + j] = v;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Shape(format!("item() on shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient slot, allocating zeros first if absent.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let g = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }
}

// ── Tape ────────────────────────────────────────────────────────────────────

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Transpose { x: usize },
    Add { a: usize, b: usize },
    AddRow { a: usize, row: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Relu { x: usize },
    Sigmoid { x: usize },
    Scale { x: usize, c: f64 },
    AddScalar { x: usize },
    SumRows { x: usize },
    SumAll { x: usize },
    DivRows { x: usize, denom: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    SoftmaxRows { x: usize },
    LogSoftmaxRows { x: usize },
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    ConcatCols { parts: Vec<usize> },
    RepeatRowsEach { x: usize, times: usize },
    TileRows { x: usize, times: usize },
    Embed { table: usize, ids: Vec<usize> },
    GatherCols { x: usize, ids: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires: bool,
    op: Op,
}

/// Ordered record of one forward pass. Node ids are creation-ordered, so
/// every record's inputs precede it and one reverse sweep visits each
/// record exactly once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    binds: Vec<(usize, Var)>, // (param store index, leaf) pairs, see params module
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, requires: bool, op: Op) -> Var {
        debug_assert_eq!(data.len(), rows * cols);
        self.nodes.push(Node { rows, cols, data, grad: None, requires, op });
        Var(self.nodes.len() - 1)
    }

    /// Registers a tensor as a leaf; gradients flow into it iff the tensor
    /// requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.dims2();
        self.push(r, c, t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.dims2();
        self.push(r, c, t.data().to_vec(), false, Op::Leaf)
    }

    pub(crate) fn leaf_raw(&mut self, rows: usize, cols: usize, data: Vec<f64>, requires: bool) -> Var {
        self.push(rows, cols, data, requires, Op::Leaf)
    }

    pub(crate) fn record_bind(&mut self, store_index: usize, var: Var) {
        self.binds.push((store_index, var));
    }

    pub(crate) fn binds(&self) -> &[(usize, Var)] {
        &self.binds
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn value(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor { shape: vec![n.rows, n.cols], data: n.data.clone(), requires_grad: false, grad: None }
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        let n = &self.nodes[v.0];
        if n.data.len() != 1 {
            return Err(Error::Shape(format!("item() on shape {:?}", (n.rows, n.cols))));
        }
        Ok(n.data[0])
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    // ── Forward ops ────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul {m}x{k} . {k2}x{n}: inner extents differ")));
        }
        let data = matmul_kernel(self.data(a), self.data(b), m, k, n);
        let req = self.req(a) || self.req(b);
        Ok(self.push(m, n, data, req, Op::MatMul { a: a.0, b: b.0 }))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let src = self.data(x);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let req = self.req(x);
        self.push(c, r, data, req, Op::Transpose { x: x.0 })
    }

    fn binary_same_shape(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::Shape(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(sa)
    }

    /// Elementwise add; accepts equal shapes or a 1×n row vector broadcast
    /// onto an m×n matrix (either argument order).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if (ra, ca) == (rb, cb) {
            let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
            let req = self.req(a) || self.req(b);
            return Ok(self.push(ra, ca, data, req, Op::Add { a: a.0, b: b.0 }));
        }
        if rb == 1 && cb == ca {
            return self.add_row(a, b);
        }
        if ra == 1 && ca == cb {
            return self.add_row(b, a);
        }
        Err(Error::Shape(format!(
            "add: shapes {:?} and {:?} are not equal and no row broadcast applies",
            (ra, ca),
            (rb, cb)
        )))
    }

    fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != n {
            return Err(Error::Shape(format!("add_row: {:?} + {:?}", (m, n), (rr, rc))));
        }
        let rv = self.data(row).to_vec();
        let data: Vec<f64> =
            self.data(a).iter().enumerate().map(|(idx, x)| x + rv[idx % n]).collect();
        let req = self.req(a) || self.req(row);
        Ok(self.push(m, n, data, req, Op::AddRow { a: a.0, row: row.0 }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.binary_same_shape(a, b, "sub")?;
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let req = self.req(a) || self.req(b);
        Ok(self.push(r, c, data, req, Op::Sub { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.binary_same_shape(a, b, "mul")?;
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let req = self.req(a) || self.req(b);
        Ok(self.push(r, c, data, req, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let data: Vec<f64> = self.data(x).iter().map(|&v| relu(v)).collect();
        let req = self.req(x);
        self.push(r, c, data, req, Op::Relu { x: x.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let data: Vec<f64> = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        let req = self.req(x);
        self.push(r, c, data, req, Op::Sigmoid { x: x.0 })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let (r, cl) = self.shape(x);
        let data: Vec<f64> = self.data(x).iter().map(|&v| v * c).collect();
        let req = self.req(x);
        self.push(r, cl, data, req, Op::Scale { x: x.0, c })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let (r, cl) = self.shape(x);
        let data: Vec<f64> = self.data(x).iter().map(|&v| v + c).collect();
        let req = self.req(x);
        self.push(r, cl, data, req, Op::AddScalar { x: x.0 })
    }

    /// Per-row sum, m×n → m×1.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let src = self.data(x);
        let data: Vec<f64> = (0..r).map(|i| src[i * c..(i + 1) * c].iter().sum()).collect();
        let req = self.req(x);
        self.push(r, 1, data, req, Op::SumRows { x: x.0 })
    }

    /// Sum of all entries, → 1×1.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let total: f64 = self.data(x).iter().sum();
        let req = self.req(x);
        self.push(1, 1, vec![total], req, Op::SumAll { x: x.0 })
    }

    /// Divides every entry of row i by denom[i]; denom is m×1.
    pub fn div_rows(&mut self, x: Var, denom: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        let (dm, dc) = self.shape(denom);
        if dm != m || dc != 1 {
            return Err(Error::Shape(format!("div_rows: {:?} / {:?}", (m, n), (dm, dc))));
        }
        let d = self.data(denom).to_vec();
        let src = self.data(x);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] = src[i * n + j] / d[i];
            }
        }
        let req = self.req(x) || self.req(denom);
        Ok(self.push(m, n, data, req, Op::DivRows { x: x.0, denom: denom.0 }))
    }

    /// Per-row layer normalization followed by affine gamma/beta (both 1×n).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.shape(x);
        let (gr, gc) = self.shape(gamma);
        let (br, bc) = self.shape(beta);
        if gr != 1 || gc != n || br != 1 || bc != n {
            return Err(Error::Shape(format!(
                "layer_norm: x {:?}, gamma {:?}, beta {:?}",
                (m, n),
                (gr, gc),
                (br, bc)
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let g = self.data(gamma).to_vec();
        let b = self.data(beta).to_vec();
        let src = self.data(x).to_vec();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            layer_norm_row(&src[i * n..(i + 1) * n], &g, &b, eps, &mut data[i * n..(i + 1) * n]);
        }
        let req = self.req(x) || self.req(gamma) || self.req(beta);
        Ok(self.push(m, n, data, req, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, eps }))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let mut data = self.data(x).to_vec();
        for i in 0..m {
            softmax_row(&mut data[i * n..(i + 1) * n]);
        }
        let req = self.req(x);
        self.push(m, n, data, req, Op::SoftmaxRows { x: x.0 })
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let mut data = self.data(x).to_vec();
        for i in 0..m {
            log_softmax_row(&mut data[i * n..(i + 1) * n]);
        }
        let req = self.req(x);
        self.push(m, n, data, req, Op::LogSoftmaxRows { x: x.0 })
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape(x);
        if start + len > m {
            return Err(Error::Shape(format!("slice_rows [{start}, {start}+{len}) of {m} rows")));
        }
        let data = self.data(x)[start * n..(start + len) * n].to_vec();
        let req = self.req(x);
        Ok(self.push(len, n, data, req, Op::SliceRows { x: x.0, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape(x);
        if start + len > n {
            return Err(Error::Shape(format!("slice_cols [{start}, {start}+{len}) of {n} cols")));
        }
        let src = self.data(x);
        let mut data = vec![0.0; m * len];
        for i in 0..m {
            data[i * len..(i + 1) * len].copy_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let req = self.req(x);
        Ok(self.push(m, len, data, req, Op::SliceCols { x: x.0, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols of zero parts".into()));
        }
        let m = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p).1).collect();
        for &p in parts {
            if self.shape(p).0 != m {
                return Err(Error::Shape(format!(
                    "concat_cols: row counts differ ({:?} vs {:?})",
                    self.shape(parts[0]),
                    self.shape(p)
                )));
            }
        }
        let n: usize = widths.iter().sum();
        let mut data = vec![0.0; m * n];
        let mut col = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.data(p).to_vec();
            for i in 0..m {
                data[i * n + col..i * n + col + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            col += w;
        }
        let req = parts.iter().any(|&p| self.req(p));
        Ok(self.push(m, n, data, req, Op::ConcatCols { parts: parts.iter().map(|p| p.0).collect() }))
    }

    /// Repeats each row `times` times in place: rows (i·times .. i·times+times)
    /// of the output all equal row i of the input.
    pub fn repeat_rows_each(&mut self, x: Var, times: usize) -> Var {
        let (m, n) = self.shape(x);
        let src = self.data(x);
        let mut data = Vec::with_capacity(m * times * n);
        for i in 0..m {
            for _ in 0..times {
                data.extend_from_slice(&src[i * n..(i + 1) * n]);
            }
        }
        let req = self.req(x);
        self.push(m * times, n, data, req, Op::RepeatRowsEach { x: x.0, times })
    }

    /// Stacks the whole matrix `times` times: row (t·m + i) equals row i.
    pub fn tile_rows(&mut self, x: Var, times: usize) -> Var {
        let (m, n) = self.shape(x);
        let src = self.data(x);
        let mut data = Vec::with_capacity(m * times * n);
        for _ in 0..times {
            data.extend_from_slice(src);
        }
        let req = self.req(x);
        self.push(m * times, n, data, req, Op::TileRows { x: x.0, times })
    }

    /// Row lookup: out row i = table row ids[i]. Gradient scatter-adds into
    /// the table rows.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.shape(table);
        for &id in ids {
            if id >= v {
                return Err(Error::Config(format!("token id {id} out of range for table of {v} rows")));
            }
        }
        let src = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let req = self.req(table);
        Ok(self.push(ids.len(), d, data, req, Op::Embed { table: table.0, ids: ids.to_vec() }))
    }

    /// Per-row column pick: out[i] = x[i][ids[i]], m×n → m×1.
    pub fn gather_cols(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let (m, n) = self.shape(x);
        if ids.len() != m {
            return Err(Error::Shape(format!("gather_cols: {} ids for {m} rows", ids.len())));
        }
        for &id in ids {
            if id >= n {
                return Err(Error::Config(format!("column id {id} out of range for {n} columns")));
            }
        }
        let src = self.data(x);
        let data: Vec<f64> = ids.iter().enumerate().map(|(i, &j)| src[i * n + j]).collect();
        let req = self.req(x);
        Ok(self.push(m, 1, data, req, Op::GatherCols { x: x.0, ids: ids.to_vec() }))
    }

    // ── Backward ───────────────────────────────────────────────────────────

    fn add_grad(&mut self, node: usize, delta: &[f64]) {
        let n = &mut self.nodes[node];
        if !n.requires {
            return;
        }
        let g = n.grad.get_or_insert_with(|| vec![0.0; n.data.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    /// Reverse sweep from a scalar loss. Every requires-grad leaf reachable
    /// from `loss` ends up holding dLoss/dLeaf; calling backward again
    /// without clearing accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = &self.nodes[loss.0];
        if n.data.len() != 1 {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got {:?}",
                (n.rows, n.cols)
            )));
        }
        self.add_grad(loss.0, &[1.0]);
        if !self.nodes[loss.0].requires {
            // Loss does not depend on any gradient-tracked leaf.
            return Ok(());
        }
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires {
                continue;
            }
            let op = self.nodes[i].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            let g = self.nodes[i].grad.take().expect("grad present");
            self.backprop(i, &op, &g);
        }
        Ok(())
    }

    fn backprop(&mut self, out: usize, op: &Op, g: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[a].rows, self.nodes[a].cols);
                let n = self.nodes[b].cols;
                if self.nodes[a].requires {
                    let da = matmul_nt(g, &self.nodes[b].data, m, n, k);
                    self.add_grad(a, &da);
                }
                if self.nodes[b].requires {
                    let db = matmul_tn(&self.nodes[a].data, g, m, k, n);
                    self.add_grad(b, &db);
                }
            }
            Op::Transpose { x } => {
                let (r, c) = (self.nodes[out].rows, self.nodes[out].cols);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[j * r + i] = g[i * c + j];
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::Add { a, b } => {
                self.add_grad(a, g);
                self.add_grad(b, g);
            }
            Op::AddRow { a, row } => {
                self.add_grad(a, g);
                if self.nodes[row].requires {
                    let n = self.nodes[row].cols;
                    let mut dr = vec![0.0; n];
                    for (idx, &gv) in g.iter().enumerate() {
                        dr[idx % n] += gv;
                    }
                    self.add_grad(row, &dr);
                }
            }
            Op::Sub { a, b } => {
                self.add_grad(a, g);
                if self.nodes[b].requires {
                    let db: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.add_grad(b, &db);
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[a].requires {
                    let da: Vec<f64> = g.iter().zip(&self.nodes[b].data).map(|(gv, bv)| gv * bv).collect();
                    self.add_grad(a, &da);
                }
                if self.nodes[b].requires {
                    let db: Vec<f64> = g.iter().zip(&self.nodes[a].data).map(|(gv, av)| gv * av).collect();
                    self.add_grad(b, &db);
                }
            }
            Op::Relu { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[x].data)
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.add_grad(x, &dx);
            }
            Op::Sigmoid { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[out].data)
                    .map(|(gv, yv)| gv * yv * (1.0 - yv))
                    .collect();
                self.add_grad(x, &dx);
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = g.iter().map(|gv| gv * c).collect();
                self.add_grad(x, &dx);
            }
            Op::AddScalar { x } => {
                self.add_grad(x, g);
            }
            Op::SumRows { x } => {
                let (m, n) = (self.nodes[x].rows, self.nodes[x].cols);
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = g[i];
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::SumAll { x } => {
                let dx = vec![g[0]; self.nodes[x].data.len()];
                self.add_grad(x, &dx);
            }
            Op::DivRows { x, denom } => {
                let (m, n) = (self.nodes[x].rows, self.nodes[x].cols);
                let d = self.nodes[denom].data.clone();
                if self.nodes[x].requires {
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] = g[i * n + j] / d[i];
                        }
                    }
                    self.add_grad(x, &dx);
                }
                if self.nodes[denom].requires {
                    let xv = &self.nodes[x].data;
                    let mut dd = vec![0.0; m];
                    for i in 0..m {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[i * n + j] * xv[i * n + j];
                        }
                        dd[i] = -s / (d[i] * d[i]);
                    }
                    self.add_grad(denom, &dd);
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (m, n) = (self.nodes[x].rows, self.nodes[x].cols);
                let nf = n as f64;
                let xv = self.nodes[x].data.clone();
                let gv = self.nodes[gamma].data.clone();
                let mut dx = vec![0.0; m * n];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for i in 0..m {
                    let row = &xv[i * n..(i + 1) * n];
                    let grow = &g[i * n..(i + 1) * n];
                    let mean = row.iter().sum::<f64>() / nf;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    for j in 0..n {
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                    }
                    let dxhat: Vec<f64> = (0..n).map(|j| grow[j] * gv[j]).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / nf;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / nf;
                    for j in 0..n {
                        dx[i * n + j] = inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                self.add_grad(x, &dx);
                self.add_grad(gamma, &dgamma);
                self.add_grad(beta, &dbeta);
            }
            Op::SoftmaxRows { x } => {
                let (m, n) = (self.nodes[out].rows, self.nodes[out].cols);
                let y = self.nodes[out].data.clone();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let yrow = &y[i * n..(i + 1) * n];
                    let grow = &g[i * n..(i + 1) * n];
                    let s: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[i * n + j] = yrow[j] * (grow[j] - s);
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::LogSoftmaxRows { x } => {
                let (m, n) = (self.nodes[out].rows, self.nodes[out].cols);
                let y = self.nodes[out].data.clone(); // log-probs
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    let gsum: f64 = grow.iter().sum();
                    for j in 0..n {
                        dx[i * n + j] = grow[j] - y[i * n + j].exp() * gsum;
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::SliceRows { x, start } => {
                let (m, n) = (self.nodes[x].rows, self.nodes[x].cols);
                let len = self.nodes[out].rows;
                let mut dx = vec![0.0; m * n];
                dx[start * n..(start + len) * n].copy_from_slice(g);
                self.add_grad(x, &dx);
            }
            Op::SliceCols { x, start } => {
                let (m, n) = (self.nodes[x].rows, self.nodes[x].cols);
                let len = self.nodes[out].cols;
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                self.add_grad(x, &dx);
            }
            Op::ConcatCols { ref parts } => {
                let m = self.nodes[out].rows;
                let n = self.nodes[out].cols;
                let mut col = 0;
                for &p in parts {
                    let w = self.nodes[p].cols;
                    if self.nodes[p].requires {
                        let mut dp = vec![0.0; m * w];
                        for i in 0..m {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&g[i * n + col..i * n + col + w]);
                        }
                        self.add_grad(p, &dp);
                    }
                    col += w;
                }
            }
            Op::RepeatRowsEach { x, times } => {
                let (m, n) = (self.nodes[x].rows, self.nodes[x].cols);
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for t in 0..times {
                        let grow = &g[(i * times + t) * n..(i * times + t + 1) * n];
                        for j in 0..n {
                            dx[i * n + j] += grow[j];
                        }
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::TileRows { x, times } => {
                let (m, n) = (self.nodes[x].rows, self.nodes[x].cols);
                let mut dx = vec![0.0; m * n];
                for t in 0..times {
                    for i in 0..m {
                        let grow = &g[(t * m + i) * n..(t * m + i + 1) * n];
                        for j in 0..n {
                            dx[i * n + j] += grow[j];
                        }
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::Embed { table, ref ids } => {
                let (v, d) = (self.nodes[table].rows, self.nodes[table].cols);
                let mut dt = vec![0.0; v * d];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[i * d + j];
                    }
                }
                self.add_grad(table, &dt);
            }
            Op::GatherCols { x, ref ids } => {
                let (m, n) = (self.nodes[x].rows, self.nodes[x].cols);
                let mut dx = vec![0.0; m * n];
                for (i, &j) in ids.iter().enumerate() {
                    dx[i * n + j] += g[i];
                }
                self.add_grad(x, &dx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_passes_through() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::eye(2));
        let b = tape.constant(&t(&[vec![3.0, 4.0], vec![5.0, 6.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_hand_scalar_product() {
        let mut tape = Tape::new();
        let a = tape.constant(&t(&[vec![1.0, 2.0]]));
        let b = tape.constant(&t(&[vec![3.0], vec![4.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(2, 3));
        let b = tape.constant(&Tensor::zeros(4, 2));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("2x3") && err.contains("4x2"), "{err}");
    }

    #[test]
    fn relu_sign_case() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[vec![-1.0, 0.0, 2.0]]));
        let y = tape.relu(x);
        assert_eq!(tape.data(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        assert_eq!(tape.data(y), &[0.5]);
    }

    #[test]
    fn add_with_row_broadcast() {
        let mut tape = Tape::new();
        let a = tape.constant(&t(&[vec![1.0, 1.0], vec![2.0, 2.0]]));
        let r = tape.constant(&t(&[vec![10.0, 20.0]]));
        let y = tape.add(a, r).unwrap();
        assert_eq!(tape.data(y), &[11.0, 21.0, 12.0, 22.0]);
    }

    #[test]
    fn add_rejects_illegal_broadcast() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(2, 3));
        let b = tape.constant(&Tensor::zeros(2, 1));
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[vec![5.0, 5.0, 5.0]]));
        let g = tape.constant(&t(&[vec![1.0, 1.0, 1.0]]));
        let b = tape.constant(&t(&[vec![0.0, 0.0, 0.0]]));
        let y = tape.layer_norm(x, g, b, 1e-6).unwrap();
        for v in tape.data(y) {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn layer_norm_already_normalized_row() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[vec![1.0, -1.0]]));
        let g = tape.constant(&t(&[vec![1.0, 1.0]]));
        let b = tape.constant(&t(&[vec![0.0, 0.0]]));
        let y = tape.layer_norm(x, g, b, 1e-14).unwrap();
        let d = tape.data(y);
        assert!((d[0] - 1.0).abs() < 1e-7 && (d[1] + 1.0).abs() < 1e-7, "{d:?}");
    }

    #[test]
    fn layer_norm_row_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::uniform(3, 8, 2.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let g = tape.constant(&Tensor::full(1, 8, 1.0));
        let b = tape.constant(&Tensor::zeros(1, 8));
        let y = tape.layer_norm(xv, g, b, 1e-10).unwrap();
        let d = tape.data(y);
        for i in 0..3 {
            let row = &d[i * 8..(i + 1) * 8];
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() <= 1e-12, "mean {mean}");
            assert!((var - 1.0).abs() <= 1e-6, "var {var}");
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap().with_requires_grad());
        let s = tape.sum_all(a);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_two_a() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::from_rows(&[vec![1.5, -2.0], vec![0.5, 3.0]]).unwrap().with_requires_grad());
        let sq = tape.mul(a, a).unwrap();
        let s = tape.sum_all(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[3.0, -4.0, 1.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(2, 2).with_requires_grad());
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::scalar(2.0).with_requires_grad());
        let s = tape.sum_all(a);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[2.0]);
    }

    #[test]
    fn two_consumer_node_accumulates_both_contributions() {
        // loss = sum(a + b) + sum(a ⊙ b): d loss / d a = 1 + b.
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap().with_requires_grad());
        let b = tape.constant(&t(&[vec![3.0, 5.0]]));
        let add = tape.add(a, b).unwrap();
        let mul = tape.mul(a, b).unwrap();
        let s1 = tape.sum_all(add);
        let s2 = tape.sum_all(mul);
        let loss = tape.add(s1, s2).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[4.0, 6.0]);
    }

    #[test]
    fn matmul_associativity_on_random_triples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = Tensor::uniform(3, 4, 1.0, &mut rng);
            let b = Tensor::uniform(4, 5, 1.0, &mut rng);
            let c = Tensor::uniform(5, 2, 1.0, &mut rng);
            let mut tape = Tape::new();
            let (av, bv, cv) = (tape.constant(&a), tape.constant(&b), tape.constant(&c));
            let ab = tape.matmul(av, bv).unwrap();
            let left = tape.matmul(ab, cv).unwrap();
            let bc = tape.matmul(bv, cv).unwrap();
            let right = tape.matmul(av, bc).unwrap();
            for (l, r) in tape.data(left).iter().zip(tape.data(right)) {
                assert!((l - r).abs() <= 1e-10, "assoc violated: {l} vs {r}");
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(4, 6, 2.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let y = tape.softmax_rows(xv);
        let d = tape.data(y);
        for i in 0..4 {
            let s: f64 = d[i * 6..(i + 1) * 6].iter().sum();
            assert!((s - 1.0).abs() <= 1e-12, "row sum {s}");
        }
    }

    #[test]
    fn transpose_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform(3, 5, 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let tt = tape.transpose(xv);
        let back = tape.transpose(tt);
        assert_eq!(tape.data(back), x.data());
    }

    #[test]
    fn slice_and_concat_are_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::uniform(3, 6, 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let left = tape.slice_cols(xv, 0, 2).unwrap();
        let mid = tape.slice_cols(xv, 2, 3).unwrap();
        let right = tape.slice_cols(xv, 5, 1).unwrap();
        let cat = tape.concat_cols(&[left, mid, right]).unwrap();
        assert_eq!(tape.data(cat), x.data());
    }

    #[test]
    fn repeat_and_tile_layouts() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let rep = tape.repeat_rows_each(x, 2);
        assert_eq!(tape.data(rep), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);
        let til = tape.tile_rows(x, 2);
        assert_eq!(tape.data(til), &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn embed_gathers_and_scatter_adds() {
        let mut tape = Tape::new();
        let table = tape.leaf(
            &Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0]])
                .unwrap()
                .with_requires_grad(),
        );
        let e = tape.embed(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.data(e), &[2.0, 2.0, 1.0, 0.0, 2.0, 2.0]);
        let s = tape.sum_all(e);
        tape.backward(s).unwrap();
        // Row 2 used twice, row 0 once, row 1 never.
        assert_eq!(tape.grad(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn embed_rejects_out_of_range_id() {
        let mut tape = Tape::new();
        let table = tape.constant(&Tensor::zeros(3, 2));
        assert!(tape.embed(table, &[3]).is_err());
    }
}
