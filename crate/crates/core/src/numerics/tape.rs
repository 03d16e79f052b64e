//! Tape-based reverse-mode automatic differentiation over [`RealTensor`]s.
//!
//! Every operation is recorded in execution order; [`Tape::backward`] walks
//! the record in exact reverse. Variables are lightweight handles tied to the
//! tape that created them.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use super::lu::LuFactors;
use super::tensor::{matmul_a_bt, matmul_at_b, matmul_raw, transpose_raw, RealTensor};
use super::NumericsError;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    id: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    /// Along the last dimension (row-wise for matrices).
    Softmax,
    Linear,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddBias(usize, usize),
    MulCols(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Relu(usize),
    Tanh(usize),
    Softmax(usize),
    Sqrt(usize),
    Log2OnePlus(usize),
    ClampMin(usize, f64),
    RowSum(usize),
    ColSum(usize),
    SumAll(usize),
    Transpose(usize),
    Reshape(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    GatherRows(usize, Vec<usize>),
    PoolRows(usize, Vec<Vec<usize>>),
    SumPool(Vec<usize>),
    AddDiag(usize, usize),
    DiagBlocks(usize),
    Select(usize, Vec<usize>),
    /// Complex solve on the real embedding; value is `[Re X; Im X]`.
    CSolve {
        a_re: usize,
        a_im: usize,
        b_re: usize,
        b_im: usize,
        lu: LuFactors,
    },
}

struct Node {
    value: RealTensor,
    op: Op,
    requires_grad: bool,
}

/// Single-threaded operation record. Create one per forward/backward pass.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<RealTensor>>,
}

impl Gradients {
    /// `None` when `v` is not a differentiable ancestor of the loss.
    pub fn get(&self, v: Var) -> Option<&RealTensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<RealTensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.id).and_then(Option::take)
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Sum in ascending value order so the result does not depend on input order.
pub(crate) fn canonical_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn param(&self, value: RealTensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: RealTensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&self, value: RealTensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self.id,
            id: nodes.len() - 1,
        }
    }

    pub fn value(&self, v: Var) -> RealTensor {
        self.nodes.borrow()[self.idx(v)].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[self.idx(v)].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[self.idx(v)].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[self.idx(v)].requires_grad
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable used on a foreign tape");
        v.id
    }

    fn check(&self, v: Var) -> Result<usize, NumericsError> {
        if v.tape != self.id || v.id >= self.len() {
            return Err(NumericsError::ForeignVar);
        }
        Ok(v.id)
    }

    pub(crate) fn push(
        &self,
        op_name: &'static str,
        op: Op,
        parents: &[usize],
        value: RealTensor,
    ) -> Result<Var, NumericsError> {
        if let Some(index) = value.data().iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { op: op_name, index });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self.id,
            id: nodes.len() - 1,
        })
    }

    /// Runs `f` on borrowed values of the given variables.
    fn with<R>(&self, ids: &[usize], f: impl FnOnce(&[&RealTensor]) -> R) -> R {
        let nodes = self.nodes.borrow();
        let vals: Vec<&RealTensor> = ids.iter().map(|&i| &nodes[i].value).collect();
        f(&vals)
    }

    fn dims_of(&self, id: usize) -> Result<(usize, usize), NumericsError> {
        self.nodes.borrow()[id].value.dims()
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let ((n, k), (k2, m)) = (self.dims_of(ia)?, self.dims_of(ib)?);
        if k != k2 {
            return Err(mismatch("matmul", &[n, k], &[k2, m]));
        }
        let data = self.with(&[ia, ib], |v| matmul_raw(v[0].data(), v[1].data(), n, k, m));
        self.push(
            "matmul",
            Op::MatMul(ia, ib),
            &[ia, ib],
            RealTensor::from_parts(vec![n, m], data),
        )
    }

    pub fn transpose(&self, x: Var) -> Result<Var, NumericsError> {
        let ix = self.check(x)?;
        let (r, c) = self.dims_of(ix)?;
        let data = self.with(&[ix], |v| transpose_raw(v[0].data(), r, c));
        self.push(
            "transpose",
            Op::Transpose(ix),
            &[ix],
            RealTensor::from_parts(vec![c, r], data),
        )
    }

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var, NumericsError> {
        let ix = self.check(x)?;
        let (old, data) = self.with(&[ix], |v| (v[0].shape().to_vec(), v[0].data().to_vec()));
        if shape.iter().product::<usize>() != data.len() {
            return Err(mismatch("reshape", &old, &shape));
        }
        self.push("reshape", Op::Reshape(ix), &[ix], RealTensor::from_parts(shape, data))
    }

    // ----- elementwise ----------------------------------------------------

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        make: fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, NumericsError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = self.with(&[ia, ib], |v| {
            if v[0].shape() != v[1].shape() {
                return Err(mismatch(name, v[0].shape(), v[1].shape()));
            }
            let data = v[0].data().iter().zip(v[1].data()).map(|(&x, &y)| f(x, y)).collect();
            Ok(RealTensor::from_parts(v[0].shape().to_vec(), data))
        })?;
        self.push(name, make(ia, ib), &[ia, ib], value)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("sub", a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("mul", a, b, Op::Mul, |x, y| x * y)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("div", a, b, Op::Div, |x, y| x / y)
    }

    fn unary(
        &self,
        name: &'static str,
        x: Var,
        op: impl FnOnce(usize) -> Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<Var, NumericsError> {
        let ix = self.check(x)?;
        let value = self.with(&[ix], |v| {
            RealTensor::from_parts(v[0].shape().to_vec(), v[0].data().iter().map(|&a| f(a)).collect())
        });
        self.push(name, op(ix), &[ix], value)
    }

    pub fn scale(&self, x: Var, c: f64) -> Result<Var, NumericsError> {
        self.unary("scale", x, |i| Op::Scale(i, c), |a| a * c)
    }

    /// `x + c` elementwise.
    pub fn offset(&self, x: Var, c: f64) -> Result<Var, NumericsError> {
        self.unary("offset", x, Op::Offset, |a| a + c)
    }

    pub fn sqrt(&self, x: Var) -> Result<Var, NumericsError> {
        self.unary("sqrt", x, Op::Sqrt, f64::sqrt)
    }

    /// `log2(1 + x)` elementwise.
    pub fn log2_1p(&self, x: Var) -> Result<Var, NumericsError> {
        self.unary("log2_1p", x, Op::Log2OnePlus, |a| a.ln_1p() / std::f64::consts::LN_2)
    }

    /// `max(x, floor)`; entries below the floor receive no gradient.
    pub fn clamp_min(&self, x: Var, floor: f64) -> Result<Var, NumericsError> {
        self.unary("clamp_min", x, |i| Op::ClampMin(i, floor), |a| a.max(floor))
    }

    pub fn activation(&self, x: Var, kind: Activation) -> Result<Var, NumericsError> {
        match kind {
            Activation::Linear => {
                self.check(x)?;
                Ok(x)
            }
            Activation::Relu => self.unary("relu", x, Op::Relu, |a| a.max(0.0)),
            Activation::Tanh => self.unary("tanh", x, Op::Tanh, f64::tanh),
            Activation::Softmax => {
                let ix = self.check(x)?;
                let value = self.with(&[ix], |v| {
                    let t = v[0];
                    let width = *t.shape().last().unwrap_or(&1);
                    let mut data = t.data().to_vec();
                    for row in data.chunks_mut(width.max(1)) {
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let mut total = 0.0;
                        for e in row.iter_mut() {
                            *e = (*e - max).exp();
                            total += *e;
                        }
                        for e in row.iter_mut() {
                            *e /= total;
                        }
                    }
                    RealTensor::from_parts(t.shape().to_vec(), data)
                });
                self.push("softmax", Op::Softmax(ix), &[ix], value)
            }
        }
    }

    // ----- broadcasting ---------------------------------------------------

    /// `x (n x m) + b (1 x m)` with `b` broadcast over rows.
    pub fn add_bias(&self, x: Var, b: Var) -> Result<Var, NumericsError> {
        let (ix, ib) = (self.check(x)?, self.check(b)?);
        let (n, m) = self.dims_of(ix)?;
        let value = self.with(&[ix, ib], |v| {
            if v[1].shape() != [1, m] {
                return Err(mismatch("add_bias", v[0].shape(), v[1].shape()));
            }
            let mut data = v[0].data().to_vec();
            for row in data.chunks_mut(m.max(1)) {
                for (e, bv) in row.iter_mut().zip(v[1].data()) {
                    *e += bv;
                }
            }
            Ok(RealTensor::from_parts(vec![n, m], data))
        })?;
        self.push("add_bias", Op::AddBias(ix, ib), &[ix, ib], value)
    }

    /// Scales column `j` of `x (n x m)` by `v[j]` where `v` is `1 x m`.
    pub fn mul_cols(&self, x: Var, v: Var) -> Result<Var, NumericsError> {
        let (ix, iv) = (self.check(x)?, self.check(v)?);
        let (n, m) = self.dims_of(ix)?;
        let value = self.with(&[ix, iv], |t| {
            if t[1].shape() != [1, m] {
                return Err(mismatch("mul_cols", t[0].shape(), t[1].shape()));
            }
            let mut data = t[0].data().to_vec();
            for row in data.chunks_mut(m.max(1)) {
                for (e, s) in row.iter_mut().zip(t[1].data()) {
                    *e *= s;
                }
            }
            Ok(RealTensor::from_parts(vec![n, m], data))
        })?;
        self.push("mul_cols", Op::MulCols(ix, iv), &[ix, iv], value)
    }

    /// `x + d * I` for square `x` and scalar `d`.
    pub fn add_diag(&self, x: Var, d: Var) -> Result<Var, NumericsError> {
        let (ix, id) = (self.check(x)?, self.check(d)?);
        let (n, m) = self.dims_of(ix)?;
        let value = self.with(&[ix, id], |v| {
            if n != m || v[1].numel() != 1 {
                return Err(mismatch("add_diag", v[0].shape(), v[1].shape()));
            }
            let mut t = v[0].clone();
            let dv = v[1].item();
            for i in 0..n {
                t.data_mut()[i * n + i] += dv;
            }
            Ok(t)
        })?;
        self.push("add_diag", Op::AddDiag(ix, id), &[ix, id], value)
    }

    // ----- reductions -----------------------------------------------------

    /// Sum over columns: `n x m -> n x 1`.
    pub fn row_sum(&self, x: Var) -> Result<Var, NumericsError> {
        let ix = self.check(x)?;
        let (n, m) = self.dims_of(ix)?;
        let data = self.with(&[ix], |v| {
            v[0].data().chunks(m.max(1)).map(|r| r.iter().sum()).take(n).collect::<Vec<f64>>()
        });
        self.push("row_sum", Op::RowSum(ix), &[ix], RealTensor::from_parts(vec![n, 1], data))
    }

    /// Sum over rows: `n x m -> 1 x m`.
    pub fn col_sum(&self, x: Var) -> Result<Var, NumericsError> {
        let ix = self.check(x)?;
        let (_, m) = self.dims_of(ix)?;
        let data = self.with(&[ix], |v| {
            let mut out = vec![0.0; m];
            for row in v[0].data().chunks(m.max(1)) {
                for (o, e) in out.iter_mut().zip(row) {
                    *o += e;
                }
            }
            out
        });
        self.push("col_sum", Op::ColSum(ix), &[ix], RealTensor::from_parts(vec![1, m], data))
    }

    pub fn sum_all(&self, x: Var) -> Result<Var, NumericsError> {
        let ix = self.check(x)?;
        let s = self.with(&[ix], |v| v[0].data().iter().sum::<f64>());
        self.push("sum_all", Op::SumAll(ix), &[ix], RealTensor::from_parts(vec![1, 1], vec![s]))
    }

    /// Elementwise sum of same-shaped variables, independent of their order.
    pub fn sum_pool(&self, vs: &[Var]) -> Result<Var, NumericsError> {
        let ids = vs.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>, _>>()?;
        if ids.is_empty() {
            return Err(NumericsError::Empty { op: "sum_pool" });
        }
        let value = self.with(&ids, |v| {
            let shape = v[0].shape();
            if let Some(bad) = v.iter().find(|t| t.shape() != shape) {
                return Err(mismatch("sum_pool", shape, bad.shape()));
            }
            let mut buf = vec![0.0; v.len()];
            let data = (0..v[0].numel())
                .map(|e| {
                    for (b, t) in buf.iter_mut().zip(v) {
                        *b = t.data()[e];
                    }
                    canonical_sum(&mut buf)
                })
                .collect();
            Ok(RealTensor::from_parts(shape.to_vec(), data))
        })?;
        self.push("sum_pool", Op::SumPool(ids.clone()), &ids, value)
    }

    /// Row-group pooling: output row `g` is the order-independent sum of the
    /// rows of `x` listed in `groups[g]` (zeros for an empty group).
    pub fn pool_rows(&self, x: Var, groups: Vec<Vec<usize>>) -> Result<Var, NumericsError> {
        let ix = self.check(x)?;
        let (n, m) = self.dims_of(ix)?;
        if let Some(&bad) = groups.iter().flatten().find(|&&r| r >= n) {
            return Err(mismatch("pool_rows", &[n, m], &[bad]));
        }
        let data = self.with(&[ix], |v| {
            let src = v[0].data();
            let mut out = vec![0.0; groups.len() * m];
            let mut buf = Vec::new();
            for (g, members) in groups.iter().enumerate() {
                for c in 0..m {
                    buf.clear();
                    buf.extend(members.iter().map(|&r| src[r * m + c]));
                    out[g * m + c] = canonical_sum(&mut buf);
                }
            }
            out
        });
        let rows = groups.len();
        self.push(
            "pool_rows",
            Op::PoolRows(ix, groups),
            &[ix],
            RealTensor::from_parts(vec![rows, m], data),
        )
    }

    // ----- structural -----------------------------------------------------

    pub fn concat_cols(&self, vs: &[Var]) -> Result<Var, NumericsError> {
        let ids = vs.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>, _>>()?;
        if ids.is_empty() {
            return Err(NumericsError::Empty { op: "concat_cols" });
        }
        let value = self.with(&ids, |v| {
            let n = v[0].dims()?.0;
            let mut widths = Vec::with_capacity(v.len());
            for t in v {
                let (r, c) = t.dims()?;
                if r != n {
                    return Err(mismatch("concat_cols", v[0].shape(), t.shape()));
                }
                widths.push(c);
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(n * total);
            for i in 0..n {
                for (t, &c) in v.iter().zip(&widths) {
                    data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
                }
            }
            Ok(RealTensor::from_parts(vec![n, total], data))
        })?;
        self.push("concat_cols", Op::ConcatCols(ids.clone()), &ids, value)
    }

    pub fn concat_rows(&self, vs: &[Var]) -> Result<Var, NumericsError> {
        let ids = vs.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>, _>>()?;
        if ids.is_empty() {
            return Err(NumericsError::Empty { op: "concat_rows" });
        }
        let value = self.with(&ids, |v| {
            let m = v[0].dims()?.1;
            let mut rows = 0;
            let mut data = Vec::new();
            for t in v {
                let (r, c) = t.dims()?;
                if c != m {
                    return Err(mismatch("concat_rows", v[0].shape(), t.shape()));
                }
                rows += r;
                data.extend_from_slice(t.data());
            }
            Ok(RealTensor::from_parts(vec![rows, m], data))
        })?;
        self.push("concat_rows", Op::ConcatRows(ids.clone()), &ids, value)
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let ix = self.check(x)?;
        let (n, m) = self.dims_of(ix)?;
        if start + len > m {
            return Err(mismatch("slice_cols", &[n, m], &[start, len]));
        }
        let data = self.with(&[ix], |v| {
            let mut out = Vec::with_capacity(n * len);
            for i in 0..n {
                out.extend_from_slice(&v[0].data()[i * m + start..i * m + start + len]);
            }
            out
        });
        self.push(
            "slice_cols",
            Op::SliceCols(ix, start),
            &[ix],
            RealTensor::from_parts(vec![n, len], data),
        )
    }

    pub fn slice_rows(&self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let ix = self.check(x)?;
        let (n, m) = self.dims_of(ix)?;
        if start + len > n {
            return Err(mismatch("slice_rows", &[n, m], &[start, len]));
        }
        let data = self.with(&[ix], |v| v[0].data()[start * m..(start + len) * m].to_vec());
        self.push(
            "slice_rows",
            Op::SliceRows(ix, start),
            &[ix],
            RealTensor::from_parts(vec![len, m], data),
        )
    }

    /// Output row `r` is row `index[r]` of `x`.
    pub fn gather_rows(&self, x: Var, index: Vec<usize>) -> Result<Var, NumericsError> {
        let ix = self.check(x)?;
        let (n, m) = self.dims_of(ix)?;
        if let Some(&bad) = index.iter().find(|&&r| r >= n) {
            return Err(mismatch("gather_rows", &[n, m], &[bad]));
        }
        let data = self.with(&[ix], |v| {
            let mut out = Vec::with_capacity(index.len() * m);
            for &r in &index {
                out.extend_from_slice(&v[0].data()[r * m..(r + 1) * m]);
            }
            out
        });
        let rows = index.len();
        self.push(
            "gather_rows",
            Op::GatherRows(ix, index),
            &[ix],
            RealTensor::from_parts(vec![rows, m], data),
        )
    }

    /// For `x` of shape `(b*m) x m`, picks `x[r, r % m]` into a `(b*m) x 1`
    /// column (the diagonal of every stacked `m x m` block).
    pub fn diag_blocks(&self, x: Var) -> Result<Var, NumericsError> {
        let ix = self.check(x)?;
        let (n, m) = self.dims_of(ix)?;
        if m == 0 || n % m != 0 {
            return Err(mismatch("diag_blocks", &[n, m], &[m, m]));
        }
        let data = self.with(&[ix], |v| (0..n).map(|r| v[0].data()[r * m + r % m]).collect());
        self.push("diag_blocks", Op::DiagBlocks(ix), &[ix], RealTensor::from_parts(vec![n, 1], data))
    }

    // ----- order statistics -----------------------------------------------

    /// `rank`-th smallest entry (1-based) of a vector-shaped variable. The
    /// gradient goes to the lowest index holding the selected value.
    pub fn order_select(&self, xs: Var, rank: usize) -> Result<Var, NumericsError> {
        let ix = self.check(xs)?;
        let flat = self.with(&[ix], |v| {
            let data = v[0].data();
            if rank == 0 || rank > data.len() {
                return Err(NumericsError::RankOutOfRange {
                    rank,
                    len: data.len(),
                });
            }
            let mut sorted = data.to_vec();
            sorted.sort_by(f64::total_cmp);
            let target = sorted[rank - 1];
            Ok(data.iter().position(|&x| x == target).expect("value present"))
        })?;
        self.select(ix, vec![flat], vec![1, 1], "order_select")
    }

    /// Minimum of a nonempty vector; ties resolve to the lowest index.
    pub fn min_reduce(&self, xs: Var) -> Result<Var, NumericsError> {
        let ix = self.check(xs)?;
        let flat = self.with(&[ix], |v| argmin(v[0].data()))
            .ok_or(NumericsError::Empty { op: "min_reduce" })?;
        self.select(ix, vec![flat], vec![1, 1], "min_reduce")
    }

    /// Row-wise minimum: `n x m -> n x 1`.
    pub fn min_rows(&self, x: Var) -> Result<Var, NumericsError> {
        let ix = self.check(x)?;
        let (n, m) = self.dims_of(ix)?;
        if m == 0 {
            return Err(NumericsError::Empty { op: "min_rows" });
        }
        let picks = self.with(&[ix], |v| {
            v[0].data()
                .chunks(m)
                .enumerate()
                .map(|(i, row)| i * m + argmin(row).expect("nonempty row"))
                .collect::<Vec<_>>()
        });
        self.select(ix, picks, vec![n, 1], "min_rows")
    }

    fn select(
        &self,
        ix: usize,
        picks: Vec<usize>,
        shape: Vec<usize>,
        name: &'static str,
    ) -> Result<Var, NumericsError> {
        let data = self.with(&[ix], |v| picks.iter().map(|&p| v[0].data()[p]).collect());
        self.push(name, Op::Select(ix, picks), &[ix], RealTensor::from_parts(shape, data))
    }

    // ----- backward -------------------------------------------------------

    /// Reverse pass from a scalar `loss`. Gradients are populated for every
    /// differentiable ancestor of `loss` and nothing else.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let il = self.check(loss)?;
        let nodes = self.nodes.borrow();
        if nodes[il].value.numel() != 1 {
            return Err(NumericsError::NonScalarLoss {
                shape: nodes[il].value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<RealTensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[il] = Some(RealTensor::from_parts(nodes[il].value.shape().to_vec(), vec![1.0]));
        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            if nodes[i].requires_grad {
                backprop(&nodes, i, g.data(), &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }
}

pub(crate) fn argmin(xs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in xs.iter().enumerate() {
        match best {
            Some(b) if xs[b] <= x => {}
            _ => best = Some(i),
        }
    }
    best
}

fn accumulate(nodes: &[Node], grads: &mut [Option<RealTensor>], target: usize, contrib: Vec<f64>) {
    if !nodes[target].requires_grad {
        return;
    }
    match &mut grads[target] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(&contrib) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(RealTensor::from_parts(nodes[target].value.shape().to_vec(), contrib));
        }
    }
}

fn backprop(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<RealTensor>]) {
    let out = &nodes[i].value;
    let val = |id: usize| &nodes[id].value;
    match &nodes[i].op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (n, k) = (val(a).rows(), val(a).cols());
            let m = val(b).cols();
            if nodes[a].requires_grad {
                accumulate(nodes, grads, a, matmul_a_bt(g, val(b).data(), n, m, k));
            }
            if nodes[b].requires_grad {
                accumulate(nodes, grads, b, matmul_at_b(val(a).data(), g, n, k, m));
            }
        }
        &Op::Add(a, b) => {
            accumulate(nodes, grads, a, g.to_vec());
            accumulate(nodes, grads, b, g.to_vec());
        }
        &Op::Sub(a, b) => {
            accumulate(nodes, grads, a, g.to_vec());
            accumulate(nodes, grads, b, g.iter().map(|x| -x).collect());
        }
        &Op::Mul(a, b) => {
            let (va, vb) = (val(a).data(), val(b).data());
            accumulate(nodes, grads, a, g.iter().zip(vb).map(|(x, y)| x * y).collect());
            accumulate(nodes, grads, b, g.iter().zip(va).map(|(x, y)| x * y).collect());
        }
        &Op::Div(a, b) => {
            let vb = val(b).data();
            accumulate(nodes, grads, a, g.iter().zip(vb).map(|(x, y)| x / y).collect());
            let contrib = g
                .iter()
                .zip(out.data())
                .zip(vb)
                .map(|((gx, o), y)| -gx * o / y)
                .collect();
            accumulate(nodes, grads, b, contrib);
        }
        &Op::AddBias(x, b) => {
            accumulate(nodes, grads, x, g.to_vec());
            let m = out.cols();
            let mut gb = vec![0.0; m];
            for row in g.chunks(m.max(1)) {
                for (o, e) in gb.iter_mut().zip(row) {
                    *o += e;
                }
            }
            accumulate(nodes, grads, b, gb);
        }
        &Op::MulCols(x, v) => {
            let m = out.cols();
            let (vx, vv) = (val(x).data(), val(v).data());
            let gx = g.iter().enumerate().map(|(e, gi)| gi * vv[e % m]).collect();
            accumulate(nodes, grads, x, gx);
            let mut gv = vec![0.0; m];
            for (e, (gi, xi)) in g.iter().zip(vx).enumerate() {
                gv[e % m] += gi * xi;
            }
            accumulate(nodes, grads, v, gv);
        }
        &Op::Scale(x, c) => accumulate(nodes, grads, x, g.iter().map(|v| v * c).collect()),
        &Op::Offset(x) | &Op::Reshape(x) => accumulate(nodes, grads, x, g.to_vec()),
        &Op::Relu(x) => {
            let gx = g.iter().zip(out.data()).map(|(gi, &y)| if y > 0.0 { *gi } else { 0.0 }).collect();
            accumulate(nodes, grads, x, gx);
        }
        &Op::Tanh(x) => {
            let gx = g.iter().zip(out.data()).map(|(gi, y)| gi * (1.0 - y * y)).collect();
            accumulate(nodes, grads, x, gx);
        }
        &Op::Softmax(x) => {
            let width = (*out.shape().last().unwrap_or(&1)).max(1);
            let mut gx = vec![0.0; g.len()];
            for ((gr, yr), or) in g.chunks(width).zip(out.data().chunks(width)).zip(gx.chunks_mut(width)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((o, gi), yi) in or.iter_mut().zip(gr).zip(yr) {
                    *o = yi * (gi - dot);
                }
            }
            accumulate(nodes, grads, x, gx);
        }
        &Op::Sqrt(x) => {
            let gx = g
                .iter()
                .zip(out.data())
                .map(|(gi, &y)| if y > 0.0 { gi / (2.0 * y) } else { 0.0 })
                .collect();
            accumulate(nodes, grads, x, gx);
        }
        &Op::Log2OnePlus(x) => {
            let gx = g
                .iter()
                .zip(val(x).data())
                .map(|(gi, xi)| gi / ((1.0 + xi) * std::f64::consts::LN_2))
                .collect();
            accumulate(nodes, grads, x, gx);
        }
        &Op::ClampMin(x, floor) => {
            let gx = g
                .iter()
                .zip(val(x).data())
                .map(|(gi, &xi)| if xi >= floor { *gi } else { 0.0 })
                .collect();
            accumulate(nodes, grads, x, gx);
        }
        &Op::RowSum(x) => {
            let m = val(x).cols().max(1);
            let gx = (0..val(x).numel()).map(|e| g[e / m]).collect();
            accumulate(nodes, grads, x, gx);
        }
        &Op::ColSum(x) => {
            let m = val(x).cols().max(1);
            let gx = (0..val(x).numel()).map(|e| g[e % m]).collect();
            accumulate(nodes, grads, x, gx);
        }
        &Op::SumAll(x) => accumulate(nodes, grads, x, vec![g[0]; val(x).numel()]),
        &Op::Transpose(x) => {
            let (r, c) = (out.rows(), out.cols());
            accumulate(nodes, grads, x, transpose_raw(g, r, c));
        }
        Op::ConcatCols(ids) => {
            let n = out.rows();
            let total = out.cols();
            let mut offset = 0;
            for &id in ids {
                let c = val(id).cols();
                if nodes[id].requires_grad {
                    let mut part = Vec::with_capacity(n * c);
                    for r in 0..n {
                        part.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                    }
                    accumulate(nodes, grads, id, part);
                }
                offset += c;
            }
        }
        Op::ConcatRows(ids) => {
            let mut offset = 0;
            for &id in ids {
                let len = val(id).numel();
                accumulate(nodes, grads, id, g[offset..offset + len].to_vec());
                offset += len;
            }
        }
        &Op::SliceCols(x, start) => {
            let (n, m) = (val(x).rows(), val(x).cols());
            let len = out.cols();
            let mut gx = vec![0.0; n * m];
            for r in 0..n {
                gx[r * m + start..r * m + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
            }
            accumulate(nodes, grads, x, gx);
        }
        &Op::SliceRows(x, start) => {
            let m = val(x).cols();
            let mut gx = vec![0.0; val(x).numel()];
            gx[start * m..start * m + g.len()].copy_from_slice(g);
            accumulate(nodes, grads, x, gx);
        }
        Op::GatherRows(x, index) => {
            let m = val(*x).cols();
            let mut gx = vec![0.0; val(*x).numel()];
            for (r, &src) in index.iter().enumerate() {
                for c in 0..m {
                    gx[src * m + c] += g[r * m + c];
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::PoolRows(x, groups) => {
            let m = val(*x).cols();
            let mut gx = vec![0.0; val(*x).numel()];
            for (gi, members) in groups.iter().enumerate() {
                for &r in members {
                    for c in 0..m {
                        gx[r * m + c] += g[gi * m + c];
                    }
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::SumPool(ids) => {
            for &id in ids {
                accumulate(nodes, grads, id, g.to_vec());
            }
        }
        &Op::AddDiag(x, d) => {
            accumulate(nodes, grads, x, g.to_vec());
            let n = out.rows();
            let trace = (0..n).map(|k| g[k * n + k]).sum();
            accumulate(nodes, grads, d, vec![trace]);
        }
        &Op::DiagBlocks(x) => {
            let m = val(x).cols();
            let mut gx = vec![0.0; val(x).numel()];
            for (r, gi) in g.iter().enumerate() {
                gx[r * m + r % m] += gi;
            }
            accumulate(nodes, grads, x, gx);
        }
        Op::Select(x, picks) => {
            let mut gx = vec![0.0; val(*x).numel()];
            for (gi, &p) in g.iter().zip(picks) {
                gx[p] += gi;
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::CSolve {
            a_re,
            a_im,
            b_re,
            b_im,
            lu,
        } => {
            let n2 = lu.dim();
            let n = n2 / 2;
            let m = out.cols();
            // adjoint system: A^T bbar = g on the real embedding
            let bbar = lu.solve_transpose(g, m);
            let x = out.data();
            let abar = |i: usize, j: usize| -> f64 {
                -(0..m).map(|c| bbar[i * m + c] * x[j * m + c]).sum::<f64>()
            };
            if nodes[*a_re].requires_grad || nodes[*a_im].requires_grad {
                let mut gre = vec![0.0; n * n];
                let mut gim = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        gre[i * n + j] = abar(i, j) + abar(n + i, n + j);
                        gim[i * n + j] = abar(n + i, j) - abar(i, n + j);
                    }
                }
                accumulate(nodes, grads, *a_re, gre);
                accumulate(nodes, grads, *a_im, gim);
            }
            accumulate(nodes, grads, *b_re, bbar[..n * m].to_vec());
            accumulate(nodes, grads, *b_im, bbar[n * m..].to_vec());
        }
    }
}
