//! Tape of differentiable operations with reverse-mode gradients.
//!
//! Every op result is a 2-D matrix. A [`Graph`] is built fresh for each
//! forward pass and discarded after [`Graph::backward`].

use std::collections::BTreeMap;
use std::rc::Rc;

use super::tensor::{ParamSet, Tensor};
use crate::error::{Error, Result};

/// Squared guard added under every row norm. Keeps gradients defined at the
/// zero vector while leaving unit vectors bit-exact.
pub const NORM_EPS_SQ: f64 = 1e-24;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Square sparse matrix in CSR form, used for graph propagation.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0; n + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut vals: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *vals.last_mut().expect("previous entry") += v;
                continue;
            }
            last = Some((r, c));
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            vals.push(v);
        }
        for r in 0..n {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self {
            n,
            row_ptr,
            col_idx,
            vals,
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()].iter().copied().zip(self.vals[span].iter().copied())
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.n]; self.n];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in self.row_entries(r) {
                row[c] += v;
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    DivCol(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Exp(Var),
    Ln(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LogSumExpRows(Var, Option<Rc<Vec<bool>>>),
    RowNorm(Var),
    LayerNorm(Var),
    MaskedMeanRows(Var, Rc<Vec<bool>>),
    SumCols(Var),
    Sum(Var),
    Mean(Var),
    Diag(Var),
    GatherRows(Var, Rc<Vec<usize>>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Propagate(Rc<SparseMatrix>, Var),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    kinks: Vec<bool>,
}

/// Gradients for every node that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

fn shape_err(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Shape {
        op,
        left: vec![a.0, a.1],
        right: vec![b.0, b.1],
    }
}

fn matmul_into(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn softmax_row(row: &[f64], out: &mut [f64], mask: Option<&[bool]>) {
    let keep = |j: usize| mask.map_or(true, |m| m[j]);
    let max = row
        .iter()
        .enumerate()
        .filter(|(j, _)| keep(*j))
        .fold(f64::NEG_INFINITY, |m, (_, &v)| m.max(v));
    let mut sum = 0.0;
    for (j, (o, &v)) in out.iter_mut().zip(row).enumerate() {
        *o = if keep(j) { (v - max).exp() } else { 0.0 };
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
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

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).needs_grad)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.dims(v)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::matrix(n.rows, n.cols, n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        let n = self.node(v);
        if n.value.len() != 1 {
            return Err(shape_err("scalar", (n.rows, n.cols), (1, 1)));
        }
        Ok(n.value[0])
    }

    /// Sign pattern (`> 0`) of every rectifier input evaluated so far.
    pub fn kink_signature(&self) -> &[bool] {
        &self.kinks
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_matrix(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(shape_err("constant", (rows, cols), (data.len(), 1)));
        }
        Ok(self.push(rows, cols, data, Op::Leaf, false))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(1, 1, vec![value], Op::Leaf, false)
    }

    /// A leaf that gradients flow into but that is not a named parameter.
    pub fn variable(&mut self, t: &Tensor) -> Var {
        self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Registers (once) and returns the leaf for parameter `name`.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {}", name)))?;
        let v = self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((n, k), (k2, m)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(shape_err("matmul", (n, k), (k2, m)));
        }
        let mut out = vec![0.0; n * m];
        matmul_into(self.value(a), self.value(b), n, k, m, &mut out);
        let ng = self.ng(&[a, b]);
        Ok(self.push(n, m, out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = transpose(self.value(a), r, c);
        let ng = self.ng(&[a]);
        self.push(c, r, out, Op::Transpose(a), ng)
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(usize, usize, Vec<f64>)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(shape_err(name, da, db));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        Ok((da.0, da.1, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c, out) = self.zip_same(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(r, c, out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c, out) = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(r, c, out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c, out) = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(r, c, out, Op::Mul(a, b), ng))
    }

    fn row_broadcast(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(usize, usize, Vec<f64>)> {
        let ((r, c), (br, bc)) = (self.dims(a), self.dims(b));
        if br != 1 || bc != c {
            return Err(shape_err(name, (r, c), (br, bc)));
        }
        let bv = self.value(b);
        let mut out = Vec::with_capacity(r * c);
        for row in self.value(a).chunks(c.max(1)) {
            out.extend(row.iter().zip(bv).map(|(&x, &y)| f(x, y)));
        }
        Ok((r, c, out))
    }

    /// `a[r, c] + b[0, c]` for every row.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c, out) = self.row_broadcast(a, b, "add_row", |x, y| x + y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(r, c, out, Op::AddRow(a, b), ng))
    }

    /// `a[r, c] * b[0, c]` for every row.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c, out) = self.row_broadcast(a, b, "mul_row", |x, y| x * y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(r, c, out, Op::MulRow(a, b), ng))
    }

    fn col_broadcast(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(usize, usize, Vec<f64>)> {
        let ((r, c), (br, bc)) = (self.dims(a), self.dims(b));
        if br != r || bc != 1 {
            return Err(shape_err(name, (r, c), (br, bc)));
        }
        let bv = self.value(b);
        let mut out = Vec::with_capacity(r * c);
        for (row, &y) in self.value(a).chunks(c.max(1)).zip(bv) {
            out.extend(row.iter().map(|&x| f(x, y)));
        }
        Ok((r, c, out))
    }

    /// `a[r, c] + b[r, 0]` for every column.
    pub fn add_col(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c, out) = self.col_broadcast(a, b, "add_col", |x, y| x + y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(r, c, out, Op::AddCol(a, b), ng))
    }

    /// `a[r, c] / b[r, 0]` for every column.
    pub fn div_col(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c, out) = self.col_broadcast(a, b, "div_col", |x, y| x / y)?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("div_col".into()));
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(r, c, out, Op::DivCol(a, b), ng))
    }

    /// Multiplies every entry by the 1x1 variable `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.dims(s) != (1, 1) {
            return Err(shape_err("scale_by", self.dims(a), self.dims(s)));
        }
        let k = self.value(s)[0];
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|&x| x * k).collect();
        let ng = self.ng(&[a, s]);
        Ok(self.push(r, c, out, Op::ScaleBy(a, s), ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|&x| x * k).collect();
        let ng = self.ng(&[a]);
        self.push(r, c, out, Op::Scale(a, k), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|&x| x + k).collect();
        let ng = self.ng(&[a]);
        self.push(r, c, out, Op::AddConst(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let out: Vec<f64> = self.value(a).iter().map(|x| x.exp()).collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("exp overflow".into()));
        }
        let ng = self.ng(&[a]);
        Ok(self.push(r, c, out, Op::Exp(a), ng))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let out: Vec<f64> = self.value(a).iter().map(|x| x.ln()).collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("log of non-positive value".into()));
        }
        let ng = self.ng(&[a]);
        Ok(self.push(r, c, out, Op::Ln(a), ng))
    }

    /// `max(x, 0)`; subgradient 0 at the kink.
    pub fn relu(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let src = &self.nodes[a.0].value;
        self.kinks.extend(src.iter().map(|&x| x > 0.0));
        let out = src.iter().map(|&x| x.max(0.0)).collect();
        let ng = self.ng(&[a]);
        self.push(r, c, out, Op::Relu(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.softmax_rows_masked(a, None).expect("unmasked softmax cannot fail")
    }

    /// Row-wise softmax over the columns where `col_mask` is true; masked
    /// columns get probability exactly 0.
    pub fn softmax_rows_masked(&mut self, a: Var, col_mask: Option<&[bool]>) -> Result<Var> {
        let (r, c) = self.dims(a);
        if let Some(m) = col_mask {
            if m.len() != c {
                return Err(shape_err("softmax_rows", (r, c), (1, m.len())));
            }
            if !m.iter().any(|&x| x) {
                return Err(Error::invalid("softmax over an all-masked row"));
            }
        }
        let mut out = vec![0.0; r * c];
        let src = self.value(a);
        for i in 0..r {
            softmax_row(&src[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c], col_mask);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(r, c, out, Op::SoftmaxRows(a), ng))
    }

    /// `log sum_j exp(a[i, j])` over entries where `mask[i, j]` holds,
    /// giving an `r x 1` column.
    pub fn logsumexp_rows(&mut self, a: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let (r, c) = self.dims(a);
        if let Some(m) = &mask {
            if m.len() != r * c {
                return Err(shape_err("logsumexp_rows", (r, c), (m.len(), 1)));
            }
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let keep = |j: usize| mask.as_ref().map_or(true, |m| m[i * c + j]);
            let row = &src[i * c..(i + 1) * c];
            let max = (0..c).filter(|&j| keep(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::invalid(format!("logsumexp over empty row {}", i)));
            }
            let s: f64 = (0..c).filter(|&j| keep(j)).map(|j| (row[j] - max).exp()).sum();
            out.push(max + s.ln());
        }
        let ng = self.ng(&[a]);
        Ok(self.push(r, 1, out, Op::LogSumExpRows(a, mask.map(Rc::new)), ng))
    }

    /// Euclidean norm of each row, `sqrt(sum x^2 + NORM_EPS_SQ)`, as `r x 1`.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self
            .value(a)
            .chunks(c.max(1))
            .map(|row| (row.iter().map(|x| x * x).sum::<f64>() + NORM_EPS_SQ).sqrt())
            .collect();
        let ng = self.ng(&[a]);
        self.push(r, 1, out, Op::RowNorm(a), ng)
    }

    /// Per-row standardisation without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = Vec::with_capacity(r * c);
        for row in self.value(a).chunks(c.max(1)) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            out.extend(row.iter().map(|x| (x - mean) * inv));
        }
        let ng = self.ng(&[a]);
        self.push(r, c, out, Op::LayerNorm(a), ng)
    }

    /// Mean of the rows whose mask entry is true, as `1 x c`.
    pub fn masked_mean_rows(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if mask.len() != r {
            return Err(shape_err("masked_mean_rows", (r, c), (mask.len(), 1)));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::invalid("masked mean over zero rows"));
        }
        let mut out = vec![0.0; c];
        for (row, _) in self.value(a).chunks(c.max(1)).zip(mask).filter(|(_, &m)| m) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= count as f64;
        }
        let ng = self.ng(&[a]);
        Ok(self.push(1, c, out, Op::MaskedMeanRows(a, Rc::new(mask.to_vec())), ng))
    }

    /// Mean over the batch (row) axis, as `1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, _) = self.dims(a);
        self.masked_mean_rows(a, &vec![true; r]).expect("mean over at least one row")
    }

    /// Sum of each row, as `r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).chunks(c.max(1)).map(|row| row.iter().sum()).collect();
        let ng = self.ng(&[a]);
        self.push(r, 1, out, Op::SumCols(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(&[a]);
        self.push(1, 1, vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(&[a]);
        self.push(1, 1, vec![s], Op::Mean(a), ng)
    }

    /// Diagonal of a square matrix, as `n x 1`.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if r != c {
            return Err(shape_err("diag", (r, c), (c, r)));
        }
        let v = self.value(a);
        let out = (0..r).map(|i| v[i * c + i]).collect();
        let ng = self.ng(&[a]);
        Ok(self.push(r, 1, out, Op::Diag(a), ng))
    }

    pub fn gather_rows(&mut self, a: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(shape_err("gather_rows", (r, c), (bad, c)));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&v[i * c..(i + 1) * c]);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(ids.len(), c, out, Op::GatherRows(a, Rc::new(ids.to_vec())), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let c = self.dims(*first).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pc != c {
                return Err(shape_err("concat_rows", (rows, c), (pr, pc)));
            }
            rows += pr;
            out.extend_from_slice(self.value(p));
        }
        let ng = self.ng(parts);
        Ok(self.push(rows, c, out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let r = self.dims(*first).0;
        let mut cols = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pr != r {
                return Err(shape_err("concat_cols", (r, cols), (pr, pc)));
            }
            cols += pc;
        }
        let mut out = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                let pc = self.dims(p).1;
                out.extend_from_slice(&self.value(p)[i * pc..(i + 1) * pc]);
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(r, cols, out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start + len > r {
            return Err(shape_err("slice_rows", (r, c), (start + len, c)));
        }
        let out = self.value(a)[start * c..(start + len) * c].to_vec();
        let ng = self.ng(&[a]);
        Ok(self.push(len, c, out, Op::SliceRows(a, start), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start + len > c {
            return Err(shape_err("slice_cols", (r, c), (r, start + len)));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(r, len, out, Op::SliceCols(a, start), ng))
    }

    /// Sparse-dense product `adj @ a`.
    pub fn propagate(&mut self, adj: &Rc<SparseMatrix>, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if adj.size() != r {
            return Err(shape_err("propagate", (adj.size(), adj.size()), (r, c)));
        }
        let v = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let orow = &mut out[i * c..(i + 1) * c];
            for (j, w) in adj.row_entries(i) {
                for (o, x) in orow.iter_mut().zip(&v[j * c..(j + 1) * c]) {
                    *o += w * x;
                }
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(r, c, out, Op::Propagate(Rc::clone(adj), a), ng))
    }

    /// Rows scaled to unit length.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let n = self.row_norm(a);
        self.div_col(a, n)
    }

    /// Cosine similarity of every row of `a` against every row of `b`.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let an = self.normalize_rows(a)?;
        let bn = self.normalize_rows(b)?;
        let bt = self.transpose(bn);
        self.matmul(an, bt)
    }

    /// Cosine similarity of row `i` of `a` with row `i` of `b`, as `r x 1`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let an = self.normalize_rows(a)?;
        let bn = self.normalize_rows(b)?;
        let prod = self.mul(an, bn)?;
        Ok(self.sum_cols(prod))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward_all(&self, loss: Var) -> Result<Gradients> {
        let (r, c) = self.dims(loss);
        if r * c != 1 {
            return Err(shape_err("backward", (r, c), (1, 1)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradient of `loss` for every entry of `params`, zero where unreachable.
    pub fn backward(&self, loss: Var, params: &ParamSet) -> Result<BTreeMap<String, Tensor>> {
        let grads = self.backward_all(loss)?;
        let mut out = BTreeMap::new();
        for (name, t) in params.iter() {
            let data = self
                .params
                .get(name)
                .and_then(|&v| grads.get(v))
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.len()]);
            out.insert(name.clone(), Tensor::new(t.shape().to_vec(), data)?);
        }
        Ok(out)
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        let (rows, cols) = (node.rows, node.cols);
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = (nodes[a.0].rows, nodes[a.0].cols);
                let m = nodes[b.0].cols;
                if wants(*a) {
                    let bt = transpose(&nodes[b.0].value, k, m);
                    acc(*a, &mut |ga| matmul_into(g, &bt, n, m, k, ga));
                }
                if wants(*b) {
                    let at = transpose(&nodes[a.0].value, n, k);
                    acc(*b, &mut |gb| matmul_into(&at, g, k, n, m, gb));
                }
            }
            Op::Transpose(a) => {
                let gt = transpose(g, rows, cols);
                acc(*a, &mut |ga| ga.iter_mut().zip(&gt).for_each(|(x, d)| *x += d));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, d)| *x += d));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, d)| *x += d));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, d)| *x += d));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, d)| *x -= d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRow(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, d)| *x += d));
                acc(*b, &mut |gb| {
                    for row in g.chunks(cols.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(x, d)| *x += d);
                    }
                });
            }
            Op::MulRow(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i % cols];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..g.len() {
                        gb[i % cols] += g[i] * av[i];
                    }
                });
            }
            Op::AddCol(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, d)| *x += d));
                acc(*b, &mut |gb| {
                    for (r, row) in g.chunks(cols.max(1)).enumerate() {
                        gb[r] += row.iter().sum::<f64>();
                    }
                });
            }
            Op::DivCol(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] / bv[i / cols];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..g.len() {
                        let r = i / cols;
                        gb[r] -= g[i] * av[i] / (bv[r] * bv[r]);
                    }
                });
            }
            Op::ScaleBy(a, s) => {
                let k = nodes[s.0].value[0];
                let av = &nodes[a.0].value;
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, d)| *x += d * k));
                acc(*s, &mut |gs| gs[0] += g.iter().zip(av).map(|(d, x)| d * x).sum::<f64>());
            }
            Op::Scale(a, k) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, d)| *x += d * k)),
            Op::AddConst(a) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, d)| *x += d)),
            Op::Exp(a) => acc(*a, &mut |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * y[i];
                }
            }),
            Op::Ln(a) => {
                let av = &nodes[a.0].value;
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] / av[i];
                    }
                });
            }
            Op::Relu(a) => {
                let av = &nodes[a.0].value;
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => acc(*a, &mut |ga| {
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, d)| p * d).sum();
                    for (j, x) in ga[span].iter_mut().enumerate() {
                        *x += yr[j] * (gr[j] - dot);
                    }
                }
            }),
            Op::LogSumExpRows(a, mask) => {
                let (ar, ac) = (nodes[a.0].rows, nodes[a.0].cols);
                let av = &nodes[a.0].value;
                acc(*a, &mut |ga| {
                    for r in 0..ar {
                        for j in 0..ac {
                            let i = r * ac + j;
                            if mask.as_ref().map_or(true, |m| m[i]) {
                                ga[i] += g[r] * (av[i] - y[r]).exp();
                            }
                        }
                    }
                });
            }
            Op::RowNorm(a) => {
                let (ar, ac) = (nodes[a.0].rows, nodes[a.0].cols);
                let av = &nodes[a.0].value;
                acc(*a, &mut |ga| {
                    for r in 0..ar {
                        for j in 0..ac {
                            ga[r * ac + j] += g[r] * av[r * ac + j] / y[r];
                        }
                    }
                });
            }
            Op::LayerNorm(a) => {
                let av = &nodes[a.0].value;
                acc(*a, &mut |ga| {
                    let c = cols as f64;
                    for r in 0..rows {
                        let span = r * cols..(r + 1) * cols;
                        let row = &av[span.clone()];
                        let mean = row.iter().sum::<f64>() / c;
                        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                        let gmean = gr.iter().sum::<f64>() / c;
                        let gy = gr.iter().zip(yr).map(|(d, v)| d * v).sum::<f64>() / c;
                        for (j, x) in ga[span].iter_mut().enumerate() {
                            *x += inv * (gr[j] - gmean - yr[j] * gy);
                        }
                    }
                });
            }
            Op::MaskedMeanRows(a, mask) => {
                let count = mask.iter().filter(|&&m| m).count() as f64;
                acc(*a, &mut |ga| {
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            for j in 0..cols {
                                ga[r * cols + j] += g[j] / count;
                            }
                        }
                    }
                });
            }
            Op::SumCols(a) => {
                let ac = nodes[a.0].cols;
                acc(*a, &mut |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i / ac.max(1)];
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => acc(*a, &mut |ga| {
                let n = ga.len() as f64;
                ga.iter_mut().for_each(|x| *x += g[0] / n);
            }),
            Op::Diag(a) => {
                let ac = nodes[a.0].cols;
                acc(*a, &mut |ga| {
                    for i in 0..rows {
                        ga[i * ac + i] += g[i];
                    }
                });
            }
            Op::GatherRows(a, ids) => acc(*a, &mut |ga| {
                for (k, &i) in ids.iter().enumerate() {
                    for j in 0..cols {
                        ga[i * cols + j] += g[k * cols + j];
                    }
                }
            }),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    acc(p, &mut |gp| gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(x, d)| *x += d));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = nodes[p.0].cols;
                    acc(p, &mut |gp| {
                        for r in 0..rows {
                            for j in 0..pc {
                                gp[r * pc + j] += g[r * cols + offset + j];
                            }
                        }
                    });
                    offset += pc;
                }
            }
            Op::SliceRows(a, start) => {
                let off = start * cols;
                acc(*a, &mut |ga| ga[off..off + g.len()].iter_mut().zip(g).for_each(|(x, d)| *x += d));
            }
            Op::SliceCols(a, start) => {
                let ac = nodes[a.0].cols;
                acc(*a, &mut |ga| {
                    for r in 0..rows {
                        for j in 0..cols {
                            ga[r * ac + start + j] += g[r * cols + j];
                        }
                    }
                });
            }
            Op::Propagate(adj, a) => acc(*a, &mut |ga| {
                for i in 0..rows {
                    for (j, w) in adj.row_entries(i) {
                        for k in 0..cols {
                            ga[j * cols + k] += w * g[i * cols + k];
                        }
                    }
                }
            }),
        }
    }
}
