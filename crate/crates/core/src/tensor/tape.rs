//! Matrix-level reverse-mode automatic differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Trainable values live in
//! a [`ParamStore`]; loading one onto the tape with [`Tape::param`] records a
//! leaf that [`Tape::backward`] reports a gradient for. Everything else is
//! either a constant or an intermediate result.

use std::sync::atomic::{AtomicU64, Ordering};

use super::{DenseMatrix, SparseMatrix};
use crate::error::{Error, Result};

/// Handle to one trainable parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Named trainable matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<DenseMatrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: DenseMatrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &DenseMatrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DenseMatrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &DenseMatrix)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(DenseMatrix::len).sum()
    }
}

/// Value handle on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

/// Per-parameter gradients from one backward pass. Parameters the loss does
/// not depend on get an all-zero gradient of the right shape.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<DenseMatrix>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &DenseMatrix {
        &self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &DenseMatrix)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }
}

enum Op<'a> {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    SpMM(&'a SparseMatrix, Var),
    SpMix(&'a [SparseMatrix], Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    DivRowsSafe(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Softplus(Var),
    SoftmaxRows(Var),
    SoftmaxRowsMasked(Var),
    LogSumExpRows(Var),
    SumAll(Var),
    SumSquares(Var),
    RowSums(Var),
    ConcatCols(Var, Var),
    GatherRows(Var, Vec<usize>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Circulant(Var),
    NormalizeRows(Var),
    Transpose(Var),
    Entry(Var, usize, usize),
}

struct Node<'a> {
    value: DenseMatrix,
    op: Op<'a>,
    needs_grad: bool,
}

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Ordered record of a forward computation.
pub struct Tape<'a> {
    id: u64,
    nodes: Vec<Node<'a>>,
    param_count: usize,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

/// Sums `g` down to `shape`, undoing a broadcast.
fn reduce_to(g: &DenseMatrix, shape: (usize, usize)) -> DenseMatrix {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = DenseMatrix::zeros(shape.0, shape.1);
    for r in 0..g.rows() {
        let rr = if shape.0 == 1 { 0 } else { r };
        for c in 0..g.cols() {
            let cc = if shape.1 == 1 { 0 } else { c };
            let v = out.get(rr, cc) + g.get(r, c);
            out.set(rr, cc, v);
        }
    }
    out
}

#[inline]
fn bidx(m: &DenseMatrix, r: usize, c: usize) -> f64 {
    m.get(
        if m.rows() == 1 { 0 } else { r },
        if m.cols() == 1 { 0 } else { c },
    )
}

fn softmax_row_into(src: &[f64], mask: Option<&[f64]>, dst: &mut [f64]) {
    let allowed = |j: usize| mask.is_none_or(|m| m[j] != 0.0);
    let max = src
        .iter()
        .enumerate()
        .filter(|&(j, _)| allowed(j))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        dst.iter_mut().for_each(|d| *d = 0.0);
        return;
    }
    let mut total = 0.0;
    for (j, (d, &s)) in dst.iter_mut().zip(src).enumerate() {
        *d = if allowed(j) { (s - max).exp() } else { 0.0 };
        total += *d;
    }
    dst.iter_mut().for_each(|d| *d /= total);
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            param_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: DenseMatrix, op: Op<'a>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Usage("value is not recorded on this tape".into()));
        }
        Ok(())
    }

    #[inline]
    fn ng(&self, v: Var) -> bool {
        self.nodes[v.idx].needs_grad
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        assert_eq!(v.tape, self.id, "value from another tape");
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Scalar value of a 1×1 result.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on a non-scalar");
        m.get(0, 0)
    }

    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.param_count = self.param_count.max(store.len());
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(Error::shape(format!(
                "matmul_bt {:?} by transpose of {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let value = va.matmul_bt(vb);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMulBt(a, b), ng))
    }

    /// `Σ_i w_i · A_i · x` for constant sparse `A_i` and a `1 × m` weight row.
    pub fn spmm_mix(&mut self, mats: &'a [SparseMatrix], w: Var, x: Var) -> Result<Var> {
        self.check(w)?;
        self.check(x)?;
        let (vw, vx) = (self.value(w), self.value(x));
        if vw.shape() != (1, mats.len()) {
            return Err(Error::shape(format!(
                "{} matrices mixed by weights {:?}",
                mats.len(),
                vw.shape()
            )));
        }
        let rows = mats.first().map_or(0, SparseMatrix::rows);
        let mut value = DenseMatrix::zeros(rows, vx.cols());
        for (a, &wi) in mats.iter().zip(vw.values()) {
            if a.rows() != rows || a.cols() != vx.rows() {
                return Err(Error::shape(format!("mix of {:?} with {:?}", (a.rows(), a.cols()), vx.shape())));
            }
            for (r, c, v) in a.triplets() {
                let k = wi * v;
                for (o, xi) in value.row_mut(r).iter_mut().zip(vx.row(c)) {
                    *o += k * xi;
                }
            }
        }
        let ng = self.ng(w) || self.ng(x);
        Ok(self.push(value, Op::SpMix(mats, w, x), ng))
    }

    /// Constant sparse matrix times a recorded dense value.
    pub fn spmm(&mut self, a: &'a SparseMatrix, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = a.matmul_dense(self.value(x))?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::SpMM(a, x), ng))
    }

    fn broadcast(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<DenseMatrix> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let (rows, cols) = broadcast_shape(va.shape(), vb.shape()).ok_or_else(|| {
            Error::shape(format!("{name} of {:?} and {:?}", va.shape(), vb.shape()))
        })?;
        Ok(DenseMatrix::from_fn(rows, cols, |r, c| {
            f(bidx(va, r, c), bidx(vb, r, c))
        }))
    }

    /// Elementwise sum with row/column broadcasting of size-1 dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    /// Divides row `i` of `a` by `d[i]` (`d` is a column); rows whose divisor
    /// is exactly zero pass through unchanged.
    pub fn div_rows_safe(&mut self, a: Var, d: Var) -> Result<Var> {
        self.check(a)?;
        self.check(d)?;
        let (va, vd) = (self.value(a), self.value(d));
        if vd.cols() != 1 || vd.rows() != va.rows() {
            return Err(Error::shape(format!(
                "row divisor {:?} for {:?}",
                vd.shape(),
                va.shape()
            )));
        }
        let value = DenseMatrix::from_fn(va.rows(), va.cols(), |r, c| {
            let den = vd.get(r, 0);
            if den == 0.0 {
                va.get(r, c)
            } else {
                va.get(r, c) / den
            }
        });
        let ng = self.ng(a) || self.ng(d);
        Ok(self.push(value, Op::DivRowsSafe(a, d), ng))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let ng = self.ng(a);
        self.push(value, Op::LeakyRelu(a, slope), ng)
    }

    /// `ln(1 + eˣ)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        let ng = self.ng(a);
        self.push(value, Op::Softplus(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut value = DenseMatrix::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            softmax_row_into(va.row(r), None, value.row_mut(r));
        }
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    /// Row softmax restricted to entries where `mask` is nonzero; rows with
    /// an empty mask come out all-zero.
    pub fn softmax_rows_masked(&mut self, a: Var, mask: DenseMatrix) -> Result<Var> {
        self.check(a)?;
        let va = self.value(a);
        if va.shape() != mask.shape() {
            return Err(Error::shape(format!(
                "mask {:?} for {:?}",
                mask.shape(),
                va.shape()
            )));
        }
        let mut value = DenseMatrix::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            softmax_row_into(va.row(r), Some(mask.row(r)), value.row_mut(r));
        }
        let ng = self.ng(a);
        Ok(self.push(value, Op::SoftmaxRowsMasked(a), ng))
    }

    /// Per-row `log Σ exp`, as a column.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let value = DenseMatrix::from_fn(va.rows(), 1, |r, _| {
            let row = va.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
        });
        let ng = self.ng(a);
        self.push(value, Op::LogSumExpRows(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = DenseMatrix::filled(1, 1, self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::SumAll(a), ng)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let value = DenseMatrix::filled(1, 1, self.value(a).frobenius_sq());
        let ng = self.ng(a);
        self.push(value, Op::SumSquares(a), ng)
    }

    /// Per-row sums, as a column.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let value = DenseMatrix::from_fn(va.rows(), 1, |r, _| va.row(r).iter().sum());
        let ng = self.ng(a);
        self.push(value, Op::RowSums(a), ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let value = self.value(a).hcat(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::ConcatCols(a, b), ng))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        self.check(a)?;
        let rows = self.value(a).rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(format!("row {bad} of a {rows}-row value")));
        }
        let value = self.value(a).select_rows(idx);
        let ng = self.ng(a);
        Ok(self.push(value, Op::GatherRows(a, idx.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.check(a)?;
        let va = self.value(a);
        if start + len > va.rows() {
            return Err(Error::shape(format!(
                "rows {start}..{} of {:?}",
                start + len,
                va.shape()
            )));
        }
        let value = DenseMatrix::from_fn(len, va.cols(), |r, c| va.get(start + r, c));
        let ng = self.ng(a);
        Ok(self.push(value, Op::SliceRows(a, start), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.check(a)?;
        let va = self.value(a);
        if start + len > va.cols() {
            return Err(Error::shape(format!(
                "cols {start}..{} of {:?}",
                start + len,
                va.shape()
            )));
        }
        let value = DenseMatrix::from_fn(va.rows(), len, |r, c| va.get(r, start + c));
        let ng = self.ng(a);
        Ok(self.push(value, Op::SliceCols(a, start), ng))
    }

    /// The d×d matrix `R` with `R[i][k] = z[(i + k) mod d]`, so that
    /// `x · R` is the circular correlation of `x` with `z`.
    pub fn circulant(&mut self, z: Var) -> Result<Var> {
        self.check(z)?;
        let vz = self.value(z);
        if vz.rows() != 1 && vz.cols() != 1 {
            return Err(Error::shape(format!("circulant of {:?}", vz.shape())));
        }
        let d = vz.len();
        let zs = vz.values();
        let value = DenseMatrix::from_fn(d, d, |i, k| zs[(i + k) % d]);
        let ng = self.ng(z);
        Ok(self.push(value, Op::Circulant(z), ng))
    }

    /// Circular correlation of row vectors: `out[k] = Σᵢ a[i]·b[(i+k) mod d]`.
    pub fn circ_corr(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.0 != 1 || sb.0 != 1 || sa.1 != sb.1 {
            return Err(Error::shape(format!("circ_corr of {sa:?} and {sb:?}")));
        }
        let r = self.circulant(b)?;
        self.matmul(a, r)
    }

    /// Scales each row to unit Euclidean norm; zero rows are a degenerate input.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let va = self.value(a);
        let mut value = va.clone();
        for r in 0..va.rows() {
            let norm = va.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Degenerate(format!("row {r} has zero norm")));
            }
            value.row_mut(r).iter_mut().for_each(|v| *v /= norm);
        }
        let ng = self.ng(a);
        Ok(self.push(value, Op::NormalizeRows(a), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    /// One entry as a 1×1 value.
    pub fn entry(&mut self, a: Var, r: usize, c: usize) -> Result<Var> {
        self.check(a)?;
        let va = self.value(a);
        if r >= va.rows() || c >= va.cols() {
            return Err(Error::shape(format!("entry ({r},{c}) of {:?}", va.shape())));
        }
        let value = DenseMatrix::filled(1, 1, va.get(r, c));
        let ng = self.ng(a);
        Ok(self.push(value, Op::Entry(a, r, c), ng))
    }

    /// Reverse sweep from a scalar `loss`, returning one gradient per
    /// parameter of `store`.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        self.check(loss)?;
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Usage(format!(
                "loss must be a scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; loss.idx + 1];
        grads[loss.idx] = Some(DenseMatrix::filled(1, 1, 1.0));
        if self.param_count > store.len() {
            return Err(Error::Usage("tape references parameters outside the store".into()));
        }
        let mut param_grads: Vec<Option<DenseMatrix>> = vec![None; store.len()];

        for i in (0..=loss.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let mut acc = |v: Var, d: DenseMatrix| {
                if !self.nodes[v.idx].needs_grad {
                    return;
                }
                match &mut grads[v.idx] {
                    Some(existing) => existing.add_assign(&d),
                    slot @ None => *slot = Some(d),
                }
            };
            let val = |v: Var| &self.nodes[v.idx].value;
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => match &mut param_grads[id.0] {
                    Some(existing) => existing.add_assign(&g),
                    slot @ None => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        acc(*a, g.matmul_bt(val(*b)));
                    }
                    if self.ng(*b) {
                        acc(*b, val(*a).matmul_at(&g));
                    }
                }
                Op::MatMulBt(a, b) => {
                    // y = a bᵀ: da = g b, db = gᵀ a
                    if self.ng(*a) {
                        acc(*a, g.matmul_unchecked(val(*b)));
                    }
                    if self.ng(*b) {
                        acc(*b, g.matmul_at(val(*a)));
                    }
                }
                Op::SpMM(s, x) => acc(*x, s.matmul_dense_transposed(&g)),
                Op::SpMix(mats, w, x) => {
                    let (vw, vx) = (val(*w), val(*x));
                    if self.ng(*w) {
                        let dw: Vec<f64> = mats
                            .iter()
                            .map(|a| {
                                a.triplets()
                                    .map(|(r, c, v)| v * crate::tensor::dot(g.row(r), vx.row(c)))
                                    .sum()
                            })
                            .collect();
                        acc(*w, DenseMatrix::from_raw(1, dw.len(), dw));
                    }
                    if self.ng(*x) {
                        let mut dx = DenseMatrix::zeros(vx.rows(), vx.cols());
                        for (a, &wi) in mats.iter().zip(vw.values()) {
                            for (r, c, v) in a.triplets() {
                                let k = wi * v;
                                for (o, gi) in dx.row_mut(c).iter_mut().zip(g.row(r)) {
                                    *o += k * gi;
                                }
                            }
                        }
                        acc(*x, dx);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, reduce_to(&g, val(*a).shape()));
                    acc(*b, reduce_to(&g, val(*b).shape()));
                }
                Op::Sub(a, b) => {
                    acc(*a, reduce_to(&g, val(*a).shape()));
                    acc(*b, reduce_to(&g.scale(-1.0), val(*b).shape()));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if self.ng(*a) {
                        let full = DenseMatrix::from_fn(g.rows(), g.cols(), |r, c| {
                            g.get(r, c) * bidx(vb, r, c)
                        });
                        acc(*a, reduce_to(&full, va.shape()));
                    }
                    if self.ng(*b) {
                        let full = DenseMatrix::from_fn(g.rows(), g.cols(), |r, c| {
                            g.get(r, c) * bidx(va, r, c)
                        });
                        acc(*b, reduce_to(&full, vb.shape()));
                    }
                }
                Op::Scale(a, s) => acc(*a, g.scale(*s)),
                Op::DivRowsSafe(a, d) => {
                    let (va, vd) = (val(*a), val(*d));
                    if self.ng(*a) {
                        let da = DenseMatrix::from_fn(g.rows(), g.cols(), |r, c| {
                            let den = vd.get(r, 0);
                            if den == 0.0 {
                                g.get(r, c)
                            } else {
                                g.get(r, c) / den
                            }
                        });
                        acc(*a, da);
                    }
                    if self.ng(*d) {
                        let dd = DenseMatrix::from_fn(vd.rows(), 1, |r, _| {
                            let den = vd.get(r, 0);
                            if den == 0.0 {
                                0.0
                            } else {
                                let s: f64 =
                                    g.row(r).iter().zip(va.row(r)).map(|(x, y)| x * y).sum();
                                -s / (den * den)
                            }
                        });
                        acc(*d, dd);
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    acc(*a, g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi))?);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    acc(*a, g.zip_map(y, |gi, yi| gi * yi * (1.0 - yi))?);
                }
                Op::LeakyRelu(a, slope) => {
                    let x = val(*a);
                    acc(
                        *a,
                        g.zip_map(x, |gi, xi| if xi > 0.0 { gi } else { gi * slope })?,
                    );
                }
                Op::Softplus(a) => {
                    acc(*a, g.zip_map(val(*a), |gi, xi| gi * sigmoid(xi))?);
                }
                Op::SoftmaxRows(a) | Op::SoftmaxRowsMasked(a) => {
                    let y = &node.value;
                    let mut dx = DenseMatrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let inner: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = y.get(r, c) * (g.get(r, c) - inner);
                        }
                    }
                    acc(*a, dx);
                }
                Op::LogSumExpRows(a) => {
                    let x = val(*a);
                    let lse = &node.value;
                    let dx = DenseMatrix::from_fn(x.rows(), x.cols(), |r, c| {
                        g.get(r, 0) * (x.get(r, c) - lse.get(r, 0)).exp()
                    });
                    acc(*a, dx);
                }
                Op::SumAll(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, DenseMatrix::filled(r, c, g.get(0, 0)));
                }
                Op::SumSquares(a) => acc(*a, val(*a).scale(2.0 * g.get(0, 0))),
                Op::RowSums(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, DenseMatrix::from_fn(r, c, |i, _| g.get(i, 0)));
                }
                Op::ConcatCols(a, b) => {
                    let ca = val(*a).cols();
                    let cb = val(*b).cols();
                    acc(*a, DenseMatrix::from_fn(g.rows(), ca, |r, c| g.get(r, c)));
                    acc(*b, DenseMatrix::from_fn(g.rows(), cb, |r, c| g.get(r, ca + c)));
                }
                Op::GatherRows(a, idx) => {
                    let (r, c) = val(*a).shape();
                    let mut dx = DenseMatrix::zeros(r, c);
                    for (k, &src) in idx.iter().enumerate() {
                        for (d, &gv) in dx.row_mut(src).iter_mut().zip(g.row(k)) {
                            *d += gv;
                        }
                    }
                    acc(*a, dx);
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = val(*a).shape();
                    let mut dx = DenseMatrix::zeros(r, c);
                    for k in 0..g.rows() {
                        dx.row_mut(start + k).copy_from_slice(g.row(k));
                    }
                    acc(*a, dx);
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = val(*a).shape();
                    let mut dx = DenseMatrix::zeros(r, c);
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            dx.set(i, start + j, g.get(i, j));
                        }
                    }
                    acc(*a, dx);
                }
                Op::Circulant(z) => {
                    let vz = val(*z);
                    let d = vz.len();
                    let mut dz = vec![0.0; d];
                    for i in 0..d {
                        for k in 0..d {
                            dz[(i + k) % d] += g.get(i, k);
                        }
                    }
                    acc(*z, DenseMatrix::from_raw(vz.rows(), vz.cols(), dz));
                }
                Op::NormalizeRows(a) => {
                    let x = val(*a);
                    let y = &node.value;
                    let mut dx = DenseMatrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let norm = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                        let inner: f64 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = (g.get(r, c) - y.get(r, c) * inner) / norm;
                        }
                    }
                    acc(*a, dx);
                }
                Op::Transpose(a) => acc(*a, g.transpose()),
                Op::Entry(a, r, c) => {
                    let (rows, cols) = val(*a).shape();
                    let mut dx = DenseMatrix::zeros(rows, cols);
                    dx.set(*r, *c, g.get(0, 0));
                    acc(*a, dx);
                }
            }
        }
        Ok(Gradients {
            grads: param_grads
                .into_iter()
                .zip(store.values.iter())
                .map(|(g, p)| g.unwrap_or_else(|| DenseMatrix::zeros(p.rows(), p.cols())))
                .collect(),
        })
    }
}
