//! Recording tape for reverse-mode differentiation over dense matrices.
//!
//! Every value on the tape is a row-major `rows x cols` matrix. Operations
//! append a node holding the forward value and enough context to replay the
//! local derivative; [`Tape::backward`] walks the nodes in reverse and
//! accumulates gradients into the [`ParamStore`] the parameters came from.

use rand::Rng;

use super::tensor::{ParamId, ParamStore, Tensor};
use super::AutodiffError;
use crate::scalar::Scalar;

/// Epsilon inside the layer-norm variance.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Added to row norms before dividing in [`Tape::l2_normalize`].
pub const NORMALIZE_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulScalarVar(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Transpose(Var),
    SoftmaxRows(Var),
    SegmentSoftmax(Var, Vec<usize>),
    Sigmoid(Var),
    LogSigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Exp(Var),
    Abs(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, normalized: Vec<T>, inv_std: Vec<T> },
    Dropout(Var, Vec<T>),
    MaskedMean(Var, Vec<bool>, T),
    L2Normalize(Var, Vec<T>),
    RowNorm(Var),
    RowDot(Var, Var),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    Element(Var, usize),
}

#[derive(Debug)]
struct Node<T> {
    rows: usize,
    cols: usize,
    value: Vec<T>,
    op: Op<T>,
    param: Option<ParamId>,
}

/// A single forward/backward recording context. Not shared across threads;
/// independent passes use independent tapes.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, lhs: vec![lhs.0, lhs.1], rhs: vec![rhs.0, rhs.1] }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// log(sigmoid(x)) = -softplus(-x), evaluated without overflow.
fn log_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        -((-x).exp().ln_1p())
    } else {
        x - x.exp().ln_1p()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.consumed = false;
        self.nodes.push(Node { rows, cols, value, op, param: None });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::matrix(n.rows, n.cols, n.value.clone()).expect("node shape is consistent")
    }

    /// Records a non-trainable input.
    pub fn constant(&mut self, rows: usize, cols: usize, values: Vec<T>) -> Result<Var, AutodiffError> {
        if rows * cols != values.len() {
            return Err(mismatch("constant", (rows, cols), (values.len(), 1)));
        }
        Ok(self.push(rows, cols, values, Op::Leaf))
    }

    pub fn constant_tensor(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.rows(), t.cols(), t.values().to_vec(), Op::Leaf)
    }

    /// Records a parameter leaf whose gradient flows back into `store`.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let t = store.get(id);
        let v = self.push(t.rows(), t.cols(), t.values().to_vec(), Op::Leaf);
        self.nodes[v.0].param = Some(id);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize), AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(op, sa, sb));
        }
        Ok(sa)
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (r, c) = self.shape(a);
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        self.push(r, c, value, op)
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let (r, c) = self.shape(a);
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(r, c, value, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(mismatch("matmul", (m, k), (k2, n)));
        }
        let mut out = vec![T::zero(); m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == T::zero() {
                    continue;
                }
                for (o, &y) in row.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *o += x * y;
                }
            }
        }
        Ok(self.push(m, n, out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    fn check_row(&self, op: &'static str, a: Var, row: Var) -> Result<(usize, usize), AutodiffError> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr != (1, sa.1) {
            return Err(mismatch(op, sa, sr));
        }
        Ok(sa)
    }

    /// Adds a 1 x cols row to every row of `a` (bias broadcast).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.check_row("add_row", a, row)?;
        let rv = self.value(row);
        let value = self.value(a).chunks(c.max(1)).flat_map(|ar| ar.iter().zip(rv).map(|(&x, &y)| x + y)).collect();
        Ok(self.push(r, c, value, Op::AddRow(a, row)))
    }

    /// Multiplies every row of `a` elementwise by a 1 x cols row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.check_row("mul_row", a, row)?;
        let rv = self.value(row);
        let value = self.value(a).chunks(c.max(1)).flat_map(|ar| ar.iter().zip(rv).map(|(&x, &y)| x * y)).collect();
        Ok(self.push(r, c, value, Op::MulRow(a, row)))
    }

    /// Multiplies `a` by a recorded 1x1 value.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Result<Var, AutodiffError> {
        if self.shape(s) != (1, 1) {
            return Err(mismatch("mul_scalar_var", self.shape(a), self.shape(s)));
        }
        let k = self.scalar(s);
        Ok(self.map(a, |x| x * k, Op::MulScalarVar(a, s)))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        self.map(a, |x| x * k, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: T) -> Var {
        self.map(a, |x| x + k, Op::AddScalar(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = *parts.first().ok_or(AutodiffError::Empty("concat_cols"))?;
        let rows = self.shape(first).0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(mismatch("concat_cols", self.shape(first), self.shape(p)));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let c = self.shape(p).1;
                value.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push(rows, cols, value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = *parts.first().ok_or(AutodiffError::Empty("concat_rows"))?;
        let cols = self.shape(first).1;
        for &p in parts {
            if self.shape(p).1 != cols {
                return Err(mismatch("concat_rows", self.shape(first), self.shape(p)));
            }
        }
        let rows: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let value = parts.iter().flat_map(|&p| self.value(p).iter().copied()).collect();
        Ok(self.push(rows, cols, value, Op::ConcatRows(parts.to_vec())))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let (r, c) = self.shape(a);
        if start > end || end > c {
            return Err(AutodiffError::IndexOutOfRange { op: "slice_cols", index: end, len: c });
        }
        let w = end - start;
        let value = self.value(a).chunks(c.max(1)).take(r).flat_map(|row| row[start..end].iter().copied()).collect();
        Ok(self.push(r, w, value, Op::SliceCols(a, start)))
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let (r, c) = self.shape(a);
        if start > end || end > r {
            return Err(AutodiffError::IndexOutOfRange { op: "slice_rows", index: end, len: r });
        }
        let value = self.value(a)[start * c..end * c].to_vec();
        Ok(self.push(end - start, c, value, Op::SliceRows(a, start)))
    }

    /// Splits `a` column-wise into pieces of the given widths.
    pub fn split_cols(&mut self, a: Var, widths: &[usize]) -> Result<Vec<Var>, AutodiffError> {
        let mut start = 0;
        let mut out = Vec::with_capacity(widths.len());
        for &w in widths {
            out.push(self.slice_cols(a, start, start + w)?);
            start += w;
        }
        if start != self.shape(a).1 {
            return Err(mismatch("split_cols", self.shape(a), (self.shape(a).0, start)));
        }
        Ok(out)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let av = self.value(a);
        let mut value = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                value[j * r + i] = av[i * c + j];
            }
        }
        self.push(c, r, value, Op::Transpose(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.shape(a);
        if c == 0 {
            return Err(AutodiffError::EmptySegment);
        }
        let mut value = self.value(a).to_vec();
        for row in value.chunks_mut(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            row.iter_mut().for_each(|x| *x /= sum);
        }
        Ok(self.push(r, c, value, Op::SoftmaxRows(a)))
    }

    /// Softmax of each column taken separately within groups of rows.
    ///
    /// `segments[i]` names the group of row `i`; every group in
    /// `0..segment_count` must own at least one row.
    pub fn segment_softmax(&mut self, a: Var, segments: &[usize], segment_count: usize) -> Result<Var, AutodiffError> {
        let (r, c) = self.shape(a);
        if segments.len() != r {
            return Err(mismatch("segment_softmax", (r, c), (segments.len(), 1)));
        }
        let mut members = vec![0usize; segment_count];
        for &s in segments {
            if s >= segment_count {
                return Err(AutodiffError::IndexOutOfRange { op: "segment_softmax", index: s, len: segment_count });
            }
            members[s] += 1;
        }
        if members.contains(&0) {
            return Err(AutodiffError::EmptySegment);
        }
        let av = self.value(a);
        let mut max = vec![T::neg_infinity(); segment_count * c];
        for (i, &s) in segments.iter().enumerate() {
            for j in 0..c {
                let m = &mut max[s * c + j];
                *m = m.max(av[i * c + j]);
            }
        }
        let mut value: Vec<T> = vec![T::zero(); r * c];
        let mut sum = vec![T::zero(); segment_count * c];
        for (i, &s) in segments.iter().enumerate() {
            for j in 0..c {
                let e = (av[i * c + j] - max[s * c + j]).exp();
                value[i * c + j] = e;
                sum[s * c + j] += e;
            }
        }
        for (i, &s) in segments.iter().enumerate() {
            for j in 0..c {
                value[i * c + j] /= sum[s * c + j];
            }
        }
        Ok(self.push(r, c, value, Op::SegmentSoftmax(a, segments.to_vec())))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.map(a, log_sigmoid, Op::LogSigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.map(a, |x| if x > T::zero() { x } else { x * slope }, Op::LeakyRelu(a, slope))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, T::exp, Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, T::abs, Op::Abs(a))
    }

    /// Row-wise layer normalization with per-column gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.check_row("layer_norm", x, gain)?;
        self.check_row("layer_norm", x, bias)?;
        let eps = T::of(LAYER_NORM_EPS);
        let n = T::from_usize(c).expect("usize fits");
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        let mut normalized = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        let mut value = Vec::with_capacity(r * c);
        for row in xv.chunks(c) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                normalized.push(h);
                value.push(h * gv[j] + bv[j]);
            }
        }
        Ok(self.push(r, c, value, Op::LayerNorm { x, gain, bias, normalized, inv_std }))
    }

    /// Inverted dropout. Identity when `train` is false or `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var, AutodiffError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::InvalidRate(rate));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let (r, c) = self.shape(a);
        let mask: Vec<T> = (0..r * c).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect();
        let value = self.value(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        Ok(self.push(r, c, value, Op::Dropout(a, mask)))
    }

    /// Mean of the rows selected by `mask`, as a 1 x cols row.
    pub fn masked_mean(&mut self, a: Var, mask: &[bool]) -> Result<Var, AutodiffError> {
        let (r, c) = self.shape(a);
        if mask.len() != r {
            return Err(mismatch("masked_mean", (r, c), (mask.len(), 1)));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(AutodiffError::Empty("masked_mean"));
        }
        let inv = T::one() / T::from_usize(count).expect("usize fits");
        let mut value = vec![T::zero(); c];
        for (row, _) in self.value(a).chunks(c).zip(mask).filter(|(_, &m)| m) {
            value.iter_mut().zip(row).for_each(|(o, &x)| *o += x);
        }
        value.iter_mut().for_each(|o| *o *= inv);
        Ok(self.push(1, c, value, Op::MaskedMean(a, mask.to_vec(), inv)))
    }

    /// Scales each row to unit L2 norm; rows with norm below `NORMALIZE_EPS`
    /// are divided by `NORMALIZE_EPS` instead.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let eps = T::of(NORMALIZE_EPS);
        let mut norms = Vec::with_capacity(r);
        let mut value = Vec::with_capacity(r * c);
        for row in self.value(a).chunks(c.max(1)).take(r) {
            let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            norms.push(norm);
            let s = norm.max(eps);
            value.extend(row.iter().map(|&x| x / s));
        }
        self.push(r, c, value, Op::L2Normalize(a, norms))
    }

    /// Euclidean norm of each row, as a rows x 1 column.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let value = self.value(a).chunks(c.max(1)).take(r).map(|row| row.iter().map(|&x| x * x).sum::<T>().sqrt()).collect();
        self.push(r, 1, value, Op::RowNorm(a))
    }

    /// Dot product of matching rows, as a rows x 1 column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.same_shape("row_dot", a, b)?;
        let value = self
            .value(a)
            .chunks(c.max(1))
            .zip(self.value(b).chunks(c.max(1)))
            .take(r)
            .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| p * q).sum())
            .collect();
        Ok(self.push(r, 1, value, Op::RowDot(a, b)))
    }

    /// Cosine similarity between matching rows.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("cosine_similarity", a, b)?;
        let na = self.l2_normalize(a);
        let nb = self.l2_normalize(b);
        self.row_dot(na, nb)
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var, AutodiffError> {
        let (r, c) = self.shape(a);
        let av = self.value(a);
        let mut value = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= r {
                return Err(AutodiffError::IndexOutOfRange { op: "gather_rows", index: i, len: r });
            }
            value.extend_from_slice(&av[i * c..(i + 1) * c]);
        }
        Ok(self.push(index.len(), c, value, Op::GatherRows(a, index.to_vec())))
    }

    /// Sums row `i` of `a` into output row `index[i]` of a fresh `out_rows x cols` matrix.
    pub fn scatter_add_rows(&mut self, a: Var, index: &[usize], out_rows: usize) -> Result<Var, AutodiffError> {
        let (r, c) = self.shape(a);
        if index.len() != r {
            return Err(mismatch("scatter_add_rows", (r, c), (index.len(), 1)));
        }
        let av = self.value(a);
        let mut value = vec![T::zero(); out_rows * c];
        for (src, &dst) in index.iter().enumerate() {
            if dst >= out_rows {
                return Err(AutodiffError::IndexOutOfRange { op: "scatter_add_rows", index: dst, len: out_rows });
            }
            for j in 0..c {
                value[dst * c + j] += av[src * c + j];
            }
        }
        Ok(self.push(out_rows, c, value, Op::ScatterAddRows(a, index.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        self.push(1, 1, vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(AutodiffError::Empty("mean"));
        }
        let s = self.value(a).iter().copied().sum::<T>() / T::from_usize(n).expect("usize fits");
        Ok(self.push(1, 1, vec![s], Op::Mean(a)))
    }

    /// Single entry `(row, col)` as a 1x1 value.
    pub fn element(&mut self, a: Var, row: usize, col: usize) -> Result<Var, AutodiffError> {
        let (r, c) = self.shape(a);
        if row >= r || col >= c {
            return Err(AutodiffError::IndexOutOfRange { op: "element", index: row * c + col, len: r * c });
        }
        let flat = row * c + col;
        let v = self.value(a)[flat];
        Ok(self.push(1, 1, vec![v], Op::Element(a, flat)))
    }

    /// Back-propagates from a 1x1 `loss`, accumulating into the gradients of
    /// every parameter recorded from `store`, then clears the tape.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<(), AutodiffError> {
        if self.consumed || loss.0 >= self.nodes.len() {
            return Err(AutodiffError::TapeConsumed);
        }
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(AutodiffError::NonScalarLoss { rows: r, cols: c });
        }
        let nodes = std::mem::take(&mut self.nodes);
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(p) = node.param {
                store.get_mut(p).accumulate_grad(&g);
            }
            propagate(&nodes, node, &g, &mut grads);
        }
        Ok(())
    }
}

fn acc<'g, T: Scalar>(grads: &'g mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> &'g mut Vec<T> {
    let len = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn propagate<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let (rows, cols) = (node.rows, node.cols);
    let val = |v: Var| -> &[T] { &nodes[v.0].value };
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let k = nodes[a.0].cols;
            let (av, bv) = (val(*a), val(*b));
            {
                let ga = acc(grads, nodes, *a);
                for i in 0..rows {
                    let gr = &g[i * cols..(i + 1) * cols];
                    for p in 0..k {
                        let br = &bv[p * cols..(p + 1) * cols];
                        ga[i * k + p] += gr.iter().zip(br).map(|(&x, &y)| x * y).sum::<T>();
                    }
                }
            }
            let gb = acc(grads, nodes, *b);
            for i in 0..rows {
                let gr = &g[i * cols..(i + 1) * cols];
                for p in 0..k {
                    let x = av[i * k + p];
                    if x == T::zero() {
                        continue;
                    }
                    for (o, &y) in gb[p * cols..(p + 1) * cols].iter_mut().zip(gr) {
                        *o += x * y;
                    }
                }
            }
        }
        Op::Add(a, b) => {
            acc(grads, nodes, *a).iter_mut().zip(g).for_each(|(o, &x)| *o += x);
            acc(grads, nodes, *b).iter_mut().zip(g).for_each(|(o, &x)| *o += x);
        }
        Op::Sub(a, b) => {
            acc(grads, nodes, *a).iter_mut().zip(g).for_each(|(o, &x)| *o += x);
            acc(grads, nodes, *b).iter_mut().zip(g).for_each(|(o, &x)| *o -= x);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc(grads, nodes, *a).iter_mut().zip(g).zip(bv).for_each(|((o, &x), &y)| *o += x * y);
            acc(grads, nodes, *b).iter_mut().zip(g).zip(av).for_each(|((o, &x), &y)| *o += x * y);
        }
        Op::AddRow(a, row) => {
            acc(grads, nodes, *a).iter_mut().zip(g).for_each(|(o, &x)| *o += x);
            let gr = acc(grads, nodes, *row);
            for chunk in g.chunks(cols) {
                gr.iter_mut().zip(chunk).for_each(|(o, &x)| *o += x);
            }
        }
        Op::MulRow(a, row) => {
            let (av, rv) = (val(*a), val(*row));
            {
                let ga = acc(grads, nodes, *a);
                for (i, (o, &x)) in ga.iter_mut().zip(g).enumerate() {
                    *o += x * rv[i % cols];
                }
            }
            let gr = acc(grads, nodes, *row);
            for (i, (&x, &y)) in g.iter().zip(av).enumerate() {
                gr[i % cols] += x * y;
            }
        }
        Op::MulScalarVar(a, s) => {
            let (av, k) = (val(*a), val(*s)[0]);
            acc(grads, nodes, *a).iter_mut().zip(g).for_each(|(o, &x)| *o += x * k);
            let dot: T = g.iter().zip(av).map(|(&x, &y)| x * y).sum();
            acc(grads, nodes, *s)[0] += dot;
        }
        Op::Scale(a, k) => {
            acc(grads, nodes, *a).iter_mut().zip(g).for_each(|(o, &x)| *o += x * *k);
        }
        Op::AddScalar(a) => {
            acc(grads, nodes, *a).iter_mut().zip(g).for_each(|(o, &x)| *o += x);
        }
        Op::ConcatCols(parts) => {
            let mut offset = 0;
            for p in parts {
                let c = nodes[p.0].cols;
                let gp = acc(grads, nodes, *p);
                for r in 0..rows {
                    for j in 0..c {
                        gp[r * c + j] += g[r * cols + offset + j];
                    }
                }
                offset += c;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = nodes[p.0].value.len();
                acc(grads, nodes, *p).iter_mut().zip(&g[offset..offset + n]).for_each(|(o, &x)| *o += x);
                offset += n;
            }
        }
        Op::SliceCols(a, start) => {
            let c = nodes[a.0].cols;
            let ga = acc(grads, nodes, *a);
            for r in 0..rows {
                for j in 0..cols {
                    ga[r * c + start + j] += g[r * cols + j];
                }
            }
        }
        Op::SliceRows(a, start) => {
            let off = start * cols;
            acc(grads, nodes, *a)[off..off + g.len()].iter_mut().zip(g).for_each(|(o, &x)| *o += x);
        }
        Op::Transpose(a) => {
            let ga = acc(grads, nodes, *a);
            for i in 0..rows {
                for j in 0..cols {
                    ga[j * rows + i] += g[i * cols + j];
                }
            }
        }
        Op::SoftmaxRows(a) => {
            let y = &node.value;
            let ga = acc(grads, nodes, *a);
            for r in 0..rows {
                let (yr, gr) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                for j in 0..cols {
                    ga[r * cols + j] += yr[j] * (gr[j] - dot);
                }
            }
        }
        Op::SegmentSoftmax(a, segments) => {
            let y = &node.value;
            let count = segments.iter().copied().max().map_or(0, |m| m + 1);
            let mut dot = vec![T::zero(); count * cols];
            for (i, &s) in segments.iter().enumerate() {
                for j in 0..cols {
                    dot[s * cols + j] += y[i * cols + j] * g[i * cols + j];
                }
            }
            let ga = acc(grads, nodes, *a);
            for (i, &s) in segments.iter().enumerate() {
                for j in 0..cols {
                    ga[i * cols + j] += y[i * cols + j] * (g[i * cols + j] - dot[s * cols + j]);
                }
            }
        }
        Op::Sigmoid(a) => {
            let y = &node.value;
            acc(grads, nodes, *a).iter_mut().zip(g).zip(y).for_each(|((o, &x), &s)| *o += x * s * (T::one() - s));
        }
        Op::LogSigmoid(a) => {
            let av = val(*a);
            acc(grads, nodes, *a).iter_mut().zip(g).zip(av).for_each(|((o, &x), &v)| *o += x * sigmoid(-v));
        }
        Op::Relu(a) => {
            let av = val(*a);
            acc(grads, nodes, *a)
                .iter_mut()
                .zip(g)
                .zip(av)
                .for_each(|((o, &x), &v)| if v > T::zero() { *o += x });
        }
        Op::LeakyRelu(a, slope) => {
            let av = val(*a);
            acc(grads, nodes, *a)
                .iter_mut()
                .zip(g)
                .zip(av)
                .for_each(|((o, &x), &v)| *o += if v > T::zero() { x } else { x * *slope });
        }
        Op::Exp(a) => {
            let y = &node.value;
            acc(grads, nodes, *a).iter_mut().zip(g).zip(y).for_each(|((o, &x), &e)| *o += x * e);
        }
        Op::Abs(a) => {
            let av = val(*a);
            acc(grads, nodes, *a).iter_mut().zip(g).zip(av).for_each(|((o, &x), &v)| {
                if v > T::zero() {
                    *o += x
                } else if v < T::zero() {
                    *o -= x
                }
            });
        }
        Op::LayerNorm { x, gain, bias, normalized, inv_std } => {
            let gv = val(*gain);
            let n = T::from_usize(cols).expect("usize fits");
            {
                let gg = acc(grads, nodes, *gain);
                for (i, (&d, &h)) in g.iter().zip(normalized).enumerate() {
                    gg[i % cols] += d * h;
                }
            }
            {
                let gb = acc(grads, nodes, *bias);
                for (i, &d) in g.iter().enumerate() {
                    gb[i % cols] += d;
                }
            }
            let gx = acc(grads, nodes, *x);
            for r in 0..rows {
                let h = &normalized[r * cols..(r + 1) * cols];
                let dh: Vec<T> = (0..cols).map(|j| g[r * cols + j] * gv[j]).collect();
                let sum_dh: T = dh.iter().copied().sum();
                let sum_dh_h: T = dh.iter().zip(h).map(|(&p, &q)| p * q).sum();
                let scale = inv_std[r] / n;
                for j in 0..cols {
                    gx[r * cols + j] += scale * (n * dh[j] - sum_dh - h[j] * sum_dh_h);
                }
            }
        }
        Op::Dropout(a, mask) => {
            acc(grads, nodes, *a).iter_mut().zip(g).zip(mask).for_each(|((o, &x), &m)| *o += x * m);
        }
        Op::MaskedMean(a, mask, inv) => {
            let ga = acc(grads, nodes, *a);
            for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                for j in 0..cols {
                    ga[r * cols + j] += g[j] * *inv;
                }
            }
        }
        Op::L2Normalize(a, norms) => {
            let av = val(*a);
            let eps = T::of(NORMALIZE_EPS);
            let ga = acc(grads, nodes, *a);
            for (r, &norm) in norms.iter().enumerate() {
                let (x, gr) = (&av[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                let s = norm.max(eps);
                let coeff = if norm >= eps {
                    x.iter().zip(gr).map(|(&p, &q)| p * q).sum::<T>() / (norm * norm * norm)
                } else {
                    T::zero()
                };
                for j in 0..cols {
                    ga[r * cols + j] += gr[j] / s - x[j] * coeff;
                }
            }
        }
        Op::RowNorm(a) => {
            let av = val(*a);
            let c = nodes[a.0].cols;
            let y = &node.value;
            let ga = acc(grads, nodes, *a);
            for r in 0..rows {
                if y[r] > T::zero() {
                    for j in 0..c {
                        ga[r * c + j] += g[r] * av[r * c + j] / y[r];
                    }
                }
            }
        }
        Op::RowDot(a, b) => {
            let c = nodes[a.0].cols;
            let (av, bv) = (val(*a), val(*b));
            {
                let ga = acc(grads, nodes, *a);
                for r in 0..rows {
                    for j in 0..c {
                        ga[r * c + j] += g[r] * bv[r * c + j];
                    }
                }
            }
            let gb = acc(grads, nodes, *b);
            for r in 0..rows {
                for j in 0..c {
                    gb[r * c + j] += g[r] * av[r * c + j];
                }
            }
        }
        Op::GatherRows(a, index) => {
            let ga = acc(grads, nodes, *a);
            for (r, &src) in index.iter().enumerate() {
                for j in 0..cols {
                    ga[src * cols + j] += g[r * cols + j];
                }
            }
        }
        Op::ScatterAddRows(a, index) => {
            let ga = acc(grads, nodes, *a);
            for (r, &dst) in index.iter().enumerate() {
                for j in 0..cols {
                    ga[r * cols + j] += g[dst * cols + j];
                }
            }
        }
        Op::Sum(a) => {
            acc(grads, nodes, *a).iter_mut().for_each(|o| *o += g[0]);
        }
        Op::Mean(a) => {
            let n = T::from_usize(nodes[a.0].value.len()).expect("usize fits");
            acc(grads, nodes, *a).iter_mut().for_each(|o| *o += g[0] / n);
        }
        Op::Element(a, flat) => {
            acc(grads, nodes, *a)[*flat] += g[0];
        }
    }
}
