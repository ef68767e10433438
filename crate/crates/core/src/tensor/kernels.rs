//! Reference kernels. All are pure functions of their inputs.
//!
//! Float kernels compute in f32 with a fixed, sequential accumulation order;
//! integral kernels compute exactly and fail rather than wrap.

use super::{Axis, Buffer, DType, Result, Storage, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Greater,
    Less,
    GreaterEqual,
    LessEqual,
    Equal,
}

impl BinaryOp {
    pub fn is_comparison(self) -> bool {
        matches!(
            self,
            BinaryOp::Greater | BinaryOp::Less | BinaryOp::GreaterEqual | BinaryOp::LessEqual | BinaryOp::Equal
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
            BinaryOp::Greater => "greater",
            BinaryOp::Less => "less",
            BinaryOp::GreaterEqual => "greater_equal",
            BinaryOp::LessEqual => "less_equal",
            BinaryOp::Equal => "equal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
    Min,
}

impl ReduceOp {
    pub fn name(self) -> &'static str {
        match self {
            ReduceOp::Sum => "sum",
            ReduceOp::Mean => "mean",
            ReduceOp::Max => "max",
            ReduceOp::Min => "min",
        }
    }
}

/// Order-preserving element functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MonotonicFn {
    Sigmoid,
    /// Normalizes along the given axis.
    Softmax(Axis),
    Relu,
    Tanh,
    Exp,
}

impl MonotonicFn {
    /// Strictly increasing in exact arithmetic. `relu` flattens all negatives to zero.
    pub fn is_strict(self) -> bool {
        !matches!(self, MonotonicFn::Relu)
    }

    pub fn name(self) -> String {
        match self {
            MonotonicFn::Sigmoid => "sigmoid".into(),
            MonotonicFn::Softmax(a) => format!("softmax(axis={})", a.0),
            MonotonicFn::Relu => "relu".into(),
            MonotonicFn::Tanh => "tanh".into(),
            MonotonicFn::Exp => "exp".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormKind {
    L1,
    L2,
    Max,
}

impl NormKind {
    pub fn name(self) -> &'static str {
        match self {
            NormKind::L1 => "l1",
            NormKind::L2 => "l2",
            NormKind::Max => "max",
        }
    }
}

fn dense(t: &Tensor) -> std::borrow::Cow<'_, Buffer> {
    match t.storage() {
        Storage::Dense(b) => std::borrow::Cow::Borrowed(b),
        Storage::Csr(_) => std::borrow::Cow::Owned(t.to_dense().dense_buffer().unwrap().clone()),
    }
}

fn f32_values(t: &Tensor, op: &'static str) -> Result<Vec<f32>> {
    if !t.dtype().is_float() {
        return Err(TensorError::UnsupportedDType { op, dtype: t.dtype() });
    }
    Ok(dense(t).to_f32())
}

/// Lossless widening. Narrowing or incomparable targets are rejected.
pub fn cast(t: &Tensor, target: DType) -> Result<Tensor> {
    if !t.dtype().le(target) {
        return Err(TensorError::NarrowingCast { from: t.dtype(), to: target });
    }
    if t.dtype() == target {
        return Ok(t.clone());
    }
    t.retype_exact(target)
}

/// Static bound on any partial sum of an integral matrix product.
pub fn matmul_overflow_bound(inner: usize, max_abs_a: f64, max_abs_b: f64) -> f64 {
    inner as f64 * max_abs_a * max_abs_b
}

fn max_abs(b: &Buffer) -> f64 {
    (0..b.len()).map(|i| b.get(i).abs()).fold(0.0, f64::max)
}

fn check_matmul(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(TensorError::ShapeMismatch(format!(
            "matmul needs rank-2 operands, got {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.shape()[1] != b.shape()[0] {
        return Err(TensorError::ShapeMismatch(format!("matmul inner dims differ: {:?} x {:?}", a.shape(), b.shape())));
    }
    if a.dtype() != b.dtype() {
        return Err(TensorError::DTypeMismatch { left: a.dtype(), right: b.dtype() });
    }
    Ok((a.shape()[0], a.shape()[1], b.shape()[1]))
}

/// Result dtype for a product computed in `compute` and stored as `out`;
/// checks the integral overflow bound against the operands' actual values.
/// Passing the check also keeps the Int32 accumulator from wrapping, since
/// every partial sum obeys the same bound.
fn matmul_out(compute: DType, out: DType, inner: usize, a: &Buffer, b: &Buffer) -> Result<DType> {
    if compute.is_float() {
        if !out.is_float() {
            return Err(TensorError::UnsupportedDType { op: "matmul", dtype: out });
        }
        return Ok(DType::Float32);
    }
    let (_, hi) = out.int_range().ok_or(TensorError::UnsupportedDType { op: "matmul", dtype: out })?;
    let bound = matmul_overflow_bound(inner, max_abs(a), max_abs(b));
    if bound > hi as f64 {
        return Err(TensorError::AccumulatorOverflowRisk { bound, out });
    }
    Ok(out.promoted())
}

/// Dense matrix product accumulated into `out_dtype`.
pub fn matmul(a: &Tensor, b: &Tensor, out_dtype: DType) -> Result<Tensor> {
    let (m, k, n) = check_matmul(a, b)?;
    if a.is_csr() || b.is_csr() {
        return Err(TensorError::InvalidLayout("dense matmul given a CSR operand".into()));
    }
    let (ab, bb) = (a.dense_buffer().unwrap(), b.dense_buffer().unwrap());
    let out = matmul_out(a.dtype(), out_dtype, k, ab, bb)?;
    if out.is_float() {
        let (av, bv) = (ab.to_f32(), bb.to_f32());
        let mut acc = vec![0f32; m * n];
        for i in 0..m {
            let row = &mut acc[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &w) in row.iter_mut().zip(brow) {
                    *o += x * w;
                }
            }
        }
        return Tensor::dense(vec![m, n], out, Buffer::F32(acc));
    }
    let (av, bv) = (ab.to_i32(), bb.to_i32());
    let mut acc = vec![0i32; m * n];
    for i in 0..m {
        let row = &mut acc[i * n..(i + 1) * n];
        for p in 0..k {
            let x = av[i * k + p];
            if x == 0 {
                continue;
            }
            let brow = &bv[p * n..(p + 1) * n];
            for (o, &w) in row.iter_mut().zip(brow) {
                *o += x * w;
            }
        }
    }
    Tensor::dense(vec![m, n], out, Buffer::from_i64(out, acc.into_iter().map(i64::from).collect(), "matmul")?)
}

/// Dense × CSR product. For finite inputs the result is bit-identical to
/// [`matmul`] on the densified operand: each output element sees the same
/// non-zero terms in the same order, and skipped terms are signed zeros.
pub fn sparse_dense_matmul(a: &Tensor, b_csr: &Tensor, out_dtype: DType) -> Result<Tensor> {
    let (m, k, n) = check_matmul(a, b_csr)?;
    let csr = match b_csr.storage() {
        Storage::Csr(c) => c,
        Storage::Dense(_) => return Err(TensorError::InvalidLayout("sparse matmul needs a CSR right operand".into())),
    };
    let ab = dense(a);
    let out = matmul_out(a.dtype(), out_dtype, k, &ab, &csr.values)?;
    if out.is_float() {
        let (av, vals) = (ab.to_f32(), csr.values.to_f32());
        let mut acc = vec![0f32; m * n];
        for i in 0..m {
            let row = &mut acc[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                for q in csr.row_offsets[p]..csr.row_offsets[p + 1] {
                    row[csr.col_indices[q]] += x * vals[q];
                }
            }
        }
        return Tensor::dense(vec![m, n], out, Buffer::F32(acc));
    }
    let (av, vals) = (ab.to_i32(), csr.values.to_i32());
    let mut acc = vec![0i32; m * n];
    for i in 0..m {
        let row = &mut acc[i * n..(i + 1) * n];
        for p in 0..k {
            let x = av[i * k + p];
            if x == 0 {
                continue;
            }
            for q in csr.row_offsets[p]..csr.row_offsets[p + 1] {
                row[csr.col_indices[q]] += x * vals[q];
            }
        }
    }
    Tensor::dense(
        vec![m, n],
        out,
        Buffer::from_i64(out, acc.into_iter().map(i64::from).collect(), "sparse_dense_matmul")?,
    )
}

/// Output shape under trailing-dimension broadcasting.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(TensorError::BroadcastError { left: a.to_vec(), right: b.to_vec() }),
        };
    }
    Ok(out)
}

/// Flat source index for every output position of a broadcast.
fn broadcast_index(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - src.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..src.len()).rev() {
        strides[i + offset] = if src[i] == 1 { 0 } else { s };
        s *= src[i];
    }
    let total: usize = out.iter().product();
    let mut idx = Vec::with_capacity(total);
    let mut coord = vec![0usize; rank];
    for _ in 0..total {
        idx.push(coord.iter().zip(&strides).map(|(c, s)| c * s).sum());
        for d in (0..rank).rev() {
            coord[d] += 1;
            if coord[d] < out[d] {
                break;
            }
            coord[d] = 0;
        }
    }
    idx
}

/// Element-wise arithmetic or comparison with trailing-dimension broadcasting.
pub fn ew_binary(op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dtype() != b.dtype() {
        return Err(TensorError::DTypeMismatch { left: a.dtype(), right: b.dtype() });
    }
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let (ia, ib) = (broadcast_index(a.shape(), &shape), broadcast_index(b.shape(), &shape));
    let (ab, bb) = (dense(a), dense(b));
    let dtype = a.dtype();

    if op.is_comparison() {
        let out: Vec<bool> = ia
            .iter()
            .zip(&ib)
            .map(|(&i, &j)| {
                let (x, y) = (ab.get(i), bb.get(j));
                match op {
                    BinaryOp::Greater => x > y,
                    BinaryOp::Less => x < y,
                    BinaryOp::GreaterEqual => x >= y,
                    BinaryOp::LessEqual => x <= y,
                    BinaryOp::Equal => x == y,
                    _ => unreachable!(),
                }
            })
            .collect();
        return Tensor::dense(shape, DType::Bool, Buffer::Bool(out));
    }

    if dtype.is_float() {
        let (av, bv) = (ab.to_f32(), bb.to_f32());
        let out: Vec<f32> = ia
            .iter()
            .zip(&ib)
            .map(|(&i, &j)| {
                let (x, y) = (av[i], bv[j]);
                match op {
                    BinaryOp::Add => x + y,
                    BinaryOp::Sub => x - y,
                    BinaryOp::Mul => x * y,
                    BinaryOp::Div => x / y,
                    _ => unreachable!(),
                }
            })
            .collect();
        return Tensor::dense(shape, DType::Float32, Buffer::F32(out));
    }

    let mut out = Vec::with_capacity(ia.len());
    for (&i, &j) in ia.iter().zip(&ib) {
        let (x, y) = (ab.get(i) as i64, bb.get(j) as i64);
        out.push(match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => {
                if y == 0 {
                    return Err(TensorError::DivisionByZero);
                }
                x / y
            }
            _ => unreachable!(),
        });
    }
    let dt = dtype.promoted();
    Tensor::dense(shape, dt, Buffer::from_i64(dt, out, op.name())?)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product())
}

fn drop_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

/// Reduction along one axis. Integral sums accumulate into Int32.
pub fn reduce(op: ReduceOp, t: &Tensor, axis: Axis) -> Result<Tensor> {
    let ax = axis.check(t.rank())?;
    let (outer, n, inner) = split_axis(t.shape(), ax);
    let shape = drop_axis(t.shape(), ax);
    let buf = dense(t);
    let at = |o: usize, k: usize, i: usize| (o * n + k) * inner + i;
    if n == 0 && op != ReduceOp::Sum {
        return Err(TensorError::EmptyAxis(ax));
    }

    match op {
        ReduceOp::Mean | ReduceOp::Sum if t.dtype().is_float() => {
            let v = buf.to_f32();
            let mut out = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let mut s = 0f32;
                    for k in 0..n {
                        s += v[at(o, k, i)];
                    }
                    out.push(if op == ReduceOp::Mean { s / n as f32 } else { s });
                }
            }
            Tensor::dense(shape, DType::Float32, Buffer::F32(out))
        }
        ReduceOp::Mean => Err(TensorError::UnsupportedDType { op: "reduce_mean", dtype: t.dtype() }),
        ReduceOp::Sum => {
            let v = buf.to_i32();
            let mut out = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    out.push((0..n).map(|k| v[at(o, k, i)] as i64).sum());
                }
            }
            Tensor::dense(shape, DType::Int32, Buffer::from_i64(DType::Int32, out, "reduce_sum")?)
        }
        ReduceOp::Max | ReduceOp::Min => {
            let mut pick = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let mut best = at(o, 0, i);
                    for k in 1..n {
                        let j = at(o, k, i);
                        let better =
                            if op == ReduceOp::Max { buf.get(j) > buf.get(best) } else { buf.get(j) < buf.get(best) };
                        if better {
                            best = j;
                        }
                    }
                    pick.push(best);
                }
            }
            let b = buf.select(&pick);
            let dt = t.dtype();
            Tensor::dense(shape, dt, b)
        }
    }
}

/// Index of the maximum along `axis`; ties resolve to the smallest index.
pub fn argmax(t: &Tensor, axis: Axis) -> Result<Tensor> {
    let ax = axis.check(t.rank())?;
    let (outer, n, inner) = split_axis(t.shape(), ax);
    if n == 0 {
        return Err(TensorError::EmptyAxis(ax));
    }
    let buf = dense(t);
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut best = 0usize;
            let mut best_v = buf.get(base);
            for k in 1..n {
                let v = buf.get(base + k * inner);
                if v > best_v {
                    best = k;
                    best_v = v;
                }
            }
            out.push(best as i32);
        }
    }
    Tensor::dense(drop_axis(t.shape(), ax), DType::Int32, Buffer::I32(out))
}

/// Row `i` of the output is `table[indices[i]]`. Indices may be any
/// integral dtype, shaped `[n]` or `[n, 1]`.
pub fn gather_rows(table: &Tensor, indices: &Tensor) -> Result<Tensor> {
    if table.rank() != 2 {
        return Err(TensorError::ShapeMismatch(format!("gather table must be rank 2, got {:?}", table.shape())));
    }
    let n = match indices.shape() {
        [n] | [n, 1] => *n,
        s => return Err(TensorError::ShapeMismatch(format!("gather indices must be [n] or [n, 1], got {s:?}"))),
    };
    if indices.dtype().is_float() {
        return Err(TensorError::UnsupportedDType { op: "gather_rows", dtype: indices.dtype() });
    }
    let (rows, cols) = (table.shape()[0], table.shape()[1]);
    let ib = dense(indices);
    let tb = dense(table);
    let mut pick = Vec::with_capacity(n * cols);
    for r in 0..n {
        let idx = ib.get(r) as i64;
        if idx < 0 || idx as usize >= rows {
            return Err(TensorError::IndexOutOfBounds { index: idx, len: rows });
        }
        let base = idx as usize * cols;
        pick.extend(base..base + cols);
    }
    Tensor::dense(vec![n, cols], table.dtype(), tb.select(&pick))
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Applies an order-preserving function; output is Float32.
pub fn monotonic_apply(f: MonotonicFn, t: &Tensor) -> Result<Tensor> {
    let v = f32_values(t, "monotonic")?;
    let out = match f {
        MonotonicFn::Sigmoid => v.iter().map(|&x| sigmoid(x)).collect(),
        MonotonicFn::Relu => v.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
        MonotonicFn::Tanh => v.iter().map(|&x| x.tanh()).collect(),
        MonotonicFn::Exp => v.iter().map(|&x| x.exp()).collect(),
        MonotonicFn::Softmax(axis) => {
            let ax = axis.check(t.rank())?;
            let (outer, n, inner) = split_axis(t.shape(), ax);
            let mut out = vec![0f32; v.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let m = (0..n).map(|k| v[at(k)]).fold(f32::NEG_INFINITY, f32::max);
                    let mut s = 0f32;
                    for k in 0..n {
                        let e = (v[at(k)] - m).exp();
                        out[at(k)] = e;
                        s += e;
                    }
                    for k in 0..n {
                        out[at(k)] /= s;
                    }
                }
            }
            out
        }
    };
    Tensor::dense(t.shape().to_vec(), DType::Float32, Buffer::F32(out))
}

/// Per-row norm, shaped `[rows, 1]` so it broadcasts against the input.
/// Zero norms are replaced by 1.0.
pub fn row_norm(t: &Tensor, kind: NormKind) -> Result<Tensor> {
    if t.rank() != 2 {
        return Err(TensorError::ShapeMismatch(format!("row_norm needs rank 2, got {:?}", t.shape())));
    }
    let v = f32_values(t, "row_norm")?;
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    let out = (0..rows)
        .map(|r| {
            let row = &v[r * cols..(r + 1) * cols];
            let norm = match kind {
                NormKind::L1 => row.iter().fold(0f32, |s, x| s + x.abs()),
                NormKind::L2 => row.iter().fold(0f32, |s, x| s + x * x).sqrt(),
                NormKind::Max => row.iter().fold(0f32, |s, x| s.max(x.abs())),
            };
            if norm == 0.0 {
                1.0
            } else {
                norm
            }
        })
        .collect();
    Tensor::dense(vec![rows, 1], DType::Float32, Buffer::F32(out))
}

/// Stacks equally shaped tensors along a new axis.
pub fn stack(parts: &[&Tensor], axis: Axis) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| TensorError::ShapeMismatch("stack of zero tensors".into()))?;
    let ax = axis.check(first.rank() + 1)?;
    for p in parts {
        if p.shape() != first.shape() {
            return Err(TensorError::ShapeMismatch(format!(
                "stack parts differ: {:?} vs {:?}",
                first.shape(),
                p.shape()
            )));
        }
        if p.dtype() != first.dtype() {
            return Err(TensorError::DTypeMismatch { left: first.dtype(), right: p.dtype() });
        }
    }
    let outer: usize = first.shape()[..ax].iter().product();
    let inner: usize = first.shape()[ax..].iter().product();
    let bufs: Vec<_> = parts.iter().map(|p| dense(p)).collect();
    let mut vals = Vec::with_capacity(outer * inner * parts.len());
    for o in 0..outer {
        for b in &bufs {
            vals.extend((o * inner..(o + 1) * inner).map(|i| b.get(i)));
        }
    }
    let mut shape = first.shape().to_vec();
    shape.insert(ax, parts.len());
    Tensor::dense(shape, first.dtype(), Buffer::from_f64(first.dtype(), vals)?)
}

/// Repeats a single row (`[k]` or `[1, k]`) `batch` times.
pub fn broadcast_rows(row: &Tensor, batch: usize) -> Result<Tensor> {
    let k = match row.shape() {
        [k] | [1, k] => *k,
        s => return Err(TensorError::ShapeMismatch(format!("broadcast_rows needs one row, got {s:?}"))),
    };
    let b = dense(row);
    let idx: Vec<usize> = (0..batch).flat_map(|_| 0..k).collect();
    Tensor::dense(vec![batch, k], row.dtype(), b.select(&idx))
}
