//! Tensor values and the reference kernels compiled graphs execute on.
//!
//! Tensors are immutable once built. Storage is either a dense row-major
//! buffer or, for rank-2 tensors, compressed sparse rows. Element buffers are
//! typed: `Int4` shares the `i8` buffer and `Float16` shares the `f32`
//! buffer, with the narrower value range enforced at construction.

mod dtype;
pub mod io;
pub mod kernels;

pub use dtype::{dtype_join, smallest_lossless_dtype, DType};
pub use kernels::{
    argmax, broadcast_rows, cast, ew_binary, gather_rows, matmul, matmul_overflow_bound, monotonic_apply, reduce,
    row_norm, sparse_dense_matmul, stack, BinaryOp, MonotonicFn, NormKind, ReduceOp,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("narrowing cast from {from} to {to}")]
    NarrowingCast { from: DType, to: DType },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dtype mismatch: {left} vs {right}")]
    DTypeMismatch { left: DType, right: DType },
    #[error("cannot broadcast {left:?} with {right:?}")]
    BroadcastError { left: Vec<usize>, right: Vec<usize> },
    #[error("accumulator {out} cannot hold bound {bound}")]
    AccumulatorOverflowRisk { bound: f64, out: DType },
    #[error("integer division by zero")]
    DivisionByZero,
    #[error("integer overflow in {0}")]
    IntegerOverflow(&'static str),
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("axis {0} is empty")]
    EmptyAxis(usize),
    #[error("index {index} out of bounds for {len} rows")]
    IndexOutOfBounds { index: i64, len: usize },
    #[error("value {value} is not representable as {dtype}")]
    Unrepresentable { value: f64, dtype: DType },
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("{op} does not support {dtype}")]
    UnsupportedDType { op: &'static str, dtype: DType },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Dimension index into a tensor's shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Axis(pub usize);

impl Axis {
    pub fn check(self, rank: usize) -> Result<usize> {
        if self.0 < rank {
            Ok(self.0)
        } else {
            Err(TensorError::InvalidAxis { axis: self.0, rank })
        }
    }
}

/// Typed element buffer.
#[derive(Debug, Clone, PartialEq)]
pub enum Buffer {
    Bool(Vec<bool>),
    I8(Vec<i8>),
    I16(Vec<i16>),
    I32(Vec<i32>),
    F32(Vec<f32>),
}

impl Buffer {
    pub fn len(&self) -> usize {
        match self {
            Buffer::Bool(v) => v.len(),
            Buffer::I8(v) => v.len(),
            Buffer::I16(v) => v.len(),
            Buffer::I32(v) => v.len(),
            Buffer::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn matches(&self, dtype: DType) -> bool {
        matches!(
            (self, dtype),
            (Buffer::Bool(_), DType::Bool)
                | (Buffer::I8(_), DType::Int4 | DType::Int8)
                | (Buffer::I16(_), DType::Int16)
                | (Buffer::I32(_), DType::Int32)
                | (Buffer::F32(_), DType::Float16 | DType::Float32)
        )
    }

    /// Element `i` widened to f64 (exact for every storage type).
    pub fn get(&self, i: usize) -> f64 {
        match self {
            Buffer::Bool(v) => v[i] as u8 as f64,
            Buffer::I8(v) => v[i] as f64,
            Buffer::I16(v) => v[i] as f64,
            Buffer::I32(v) => v[i] as f64,
            Buffer::F32(v) => v[i] as f64,
        }
    }

    pub fn is_zero(&self, i: usize) -> bool {
        self.get(i) == 0.0
    }

    /// Integral elements as i32. Panics on float buffers.
    pub(crate) fn to_i32(&self) -> Vec<i32> {
        match self {
            Buffer::Bool(v) => v.iter().map(|&b| b as i32).collect(),
            Buffer::I8(v) => v.iter().map(|&x| x as i32).collect(),
            Buffer::I16(v) => v.iter().map(|&x| x as i32).collect(),
            Buffer::I32(v) => v.clone(),
            Buffer::F32(_) => panic!("to_i32 on float buffer"),
        }
    }

    /// Elements as f32. Integral values beyond 2^24 round.
    pub fn to_f32(&self) -> Vec<f32> {
        match self {
            Buffer::F32(v) => v.clone(),
            _ => (0..self.len()).map(|i| self.get(i) as f32).collect(),
        }
    }

    /// Build a buffer for `dtype` from exact values, checking representability.
    pub fn from_f64(dtype: DType, values: impl IntoIterator<Item = f64>) -> Result<Buffer> {
        let check = |v: f64| -> Result<f64> {
            let ok = match dtype.int_range() {
                Some((lo, hi)) => v.fract() == 0.0 && (lo as f64) <= v && v <= hi as f64,
                None => {
                    let f = v as f32;
                    f as f64 == v || v.is_nan()
                }
            };
            let ok = ok && (dtype != DType::Float16 || (v.is_finite() && half::f16::from_f64(v).to_f64() == v));
            if ok {
                Ok(v)
            } else {
                Err(TensorError::Unrepresentable { value: v, dtype })
            }
        };
        let it = values.into_iter();
        Ok(match dtype {
            DType::Bool => Buffer::Bool(it.map(|v| check(v).map(|v| v != 0.0)).collect::<Result<_>>()?),
            DType::Int4 | DType::Int8 => Buffer::I8(it.map(|v| check(v).map(|v| v as i8)).collect::<Result<_>>()?),
            DType::Int16 => Buffer::I16(it.map(|v| check(v).map(|v| v as i16)).collect::<Result<_>>()?),
            DType::Int32 => Buffer::I32(it.map(|v| check(v).map(|v| v as i32)).collect::<Result<_>>()?),
            DType::Float16 | DType::Float32 => {
                Buffer::F32(it.map(|v| check(v).map(|v| v as f32)).collect::<Result<_>>()?)
            }
        })
    }

    /// Pack i64 results into an integral dtype, failing on overflow.
    pub(crate) fn from_i64(dtype: DType, values: Vec<i64>, op: &'static str) -> Result<Buffer> {
        let (lo, hi) = dtype.int_range().ok_or(TensorError::UnsupportedDType { op, dtype })?;
        if values.iter().any(|&v| v < lo || v > hi) {
            return Err(TensorError::IntegerOverflow(op));
        }
        Ok(match dtype {
            DType::Bool => Buffer::Bool(values.into_iter().map(|v| v != 0).collect()),
            DType::Int4 | DType::Int8 => Buffer::I8(values.into_iter().map(|v| v as i8).collect()),
            DType::Int16 => Buffer::I16(values.into_iter().map(|v| v as i16).collect()),
            DType::Int32 => Buffer::I32(values.into_iter().map(|v| v as i32).collect()),
            DType::Float16 | DType::Float32 => unreachable!(),
        })
    }

    fn select(&self, idx: &[usize]) -> Buffer {
        match self {
            Buffer::Bool(v) => Buffer::Bool(idx.iter().map(|&i| v[i]).collect()),
            Buffer::I8(v) => Buffer::I8(idx.iter().map(|&i| v[i]).collect()),
            Buffer::I16(v) => Buffer::I16(idx.iter().map(|&i| v[i]).collect()),
            Buffer::I32(v) => Buffer::I32(idx.iter().map(|&i| v[i]).collect()),
            Buffer::F32(v) => Buffer::F32(idx.iter().map(|&i| v[i]).collect()),
        }
    }

    fn zeros(dtype: DType, len: usize) -> Buffer {
        match dtype {
            DType::Bool => Buffer::Bool(vec![false; len]),
            DType::Int4 | DType::Int8 => Buffer::I8(vec![0; len]),
            DType::Int16 => Buffer::I16(vec![0; len]),
            DType::Int32 => Buffer::I32(vec![0; len]),
            DType::Float16 | DType::Float32 => Buffer::F32(vec![0.0; len]),
        }
    }

    fn bit_eq(&self, other: &Buffer) -> bool {
        match (self, other) {
            (Buffer::F32(a), Buffer::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => self == other,
        }
    }
}

/// Compressed sparse rows of a rank-2 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub row_offsets: Vec<usize>,
    pub col_indices: Vec<usize>,
    pub values: Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Storage {
    Dense(Buffer),
    Csr(Csr),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    storage: Storage,
}

impl Tensor {
    /// Dense tensor from a typed buffer.
    pub fn dense(shape: Vec<usize>, dtype: DType, buffer: Buffer) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if buffer.len() != n {
            return Err(TensorError::InvalidLayout(format!(
                "buffer has {} elements, shape {:?} needs {n}",
                buffer.len(),
                shape
            )));
        }
        check_buffer(dtype, &buffer)?;
        Ok(Tensor { shape, dtype, storage: Storage::Dense(buffer) })
    }

    /// Float32 dense tensor.
    pub fn from_f32(shape: &[usize], values: Vec<f32>) -> Result<Tensor> {
        Tensor::dense(shape.to_vec(), DType::Float32, Buffer::F32(values))
    }

    /// Dense tensor of `dtype` from f32 values, rejecting anything not exactly representable.
    pub fn from_values(shape: &[usize], dtype: DType, values: &[f32]) -> Result<Tensor> {
        let buf = Buffer::from_f64(dtype, values.iter().map(|&v| v as f64))?;
        Tensor::dense(shape.to_vec(), dtype, buf)
    }

    pub fn from_i32(shape: &[usize], values: Vec<i32>) -> Result<Tensor> {
        Tensor::dense(shape.to_vec(), DType::Int32, Buffer::I32(values))
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), dtype, storage: Storage::Dense(Buffer::zeros(dtype, n)) }
    }

    /// CSR tensor; validates every structural invariant.
    pub fn csr(rows: usize, cols: usize, dtype: DType, csr: Csr) -> Result<Tensor> {
        let bad = |m: &str| Err(TensorError::InvalidLayout(m.to_string()));
        if csr.row_offsets.len() != rows + 1 {
            return bad("row_offsets must have rows+1 entries");
        }
        if csr.row_offsets[0] != 0 || csr.row_offsets.windows(2).any(|w| w[0] > w[1]) {
            return bad("row_offsets must start at 0 and be non-decreasing");
        }
        let nnz = *csr.row_offsets.last().unwrap();
        if nnz != csr.col_indices.len() || nnz != csr.values.len() {
            return bad("last row offset must equal the number of stored values");
        }
        if csr.col_indices.iter().any(|&c| c >= cols) {
            return bad("column index out of range");
        }
        check_buffer(dtype, &csr.values)?;
        Ok(Tensor { shape: vec![rows, cols], dtype, storage: Storage::Csr(csr) })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_csr(&self) -> bool {
        matches!(self.storage, Storage::Csr(_))
    }

    /// Dense buffer, or `None` for CSR tensors.
    pub fn dense_buffer(&self) -> Option<&Buffer> {
        match &self.storage {
            Storage::Dense(b) => Some(b),
            Storage::Csr(_) => None,
        }
    }

    /// Number of non-zero elements.
    pub fn count_nonzero(&self) -> usize {
        let values = match &self.storage {
            Storage::Dense(b) => b,
            Storage::Csr(c) => &c.values,
        };
        (0..values.len()).filter(|&i| !values.is_zero(i)).count()
    }

    /// Ratio of non-zero elements to all elements (1.0 for empty tensors).
    pub fn density(&self) -> f64 {
        let n = self.len();
        if n == 0 {
            1.0
        } else {
            self.count_nonzero() as f64 / n as f64
        }
    }

    /// All elements in row-major order, widened to f64.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        let dense = self.to_dense();
        let b = dense.dense_buffer().unwrap();
        (0..b.len()).map(|i| b.get(i)).collect()
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.to_dense().dense_buffer().unwrap().to_f32()
    }

    pub fn to_dense(&self) -> Tensor {
        match &self.storage {
            Storage::Dense(_) => self.clone(),
            Storage::Csr(c) => {
                let cols = self.shape[1];
                let mut idx = vec![usize::MAX; self.len()];
                for r in 0..self.shape[0] {
                    for k in c.row_offsets[r]..c.row_offsets[r + 1] {
                        idx[r * cols + c.col_indices[k]] = k;
                    }
                }
                let vals: Vec<f64> = idx.iter().map(|&k| if k == usize::MAX { 0.0 } else { c.values.get(k) }).collect();
                let buf = Buffer::from_f64(self.dtype, vals).expect("csr values already validated");
                Tensor { shape: self.shape.clone(), dtype: self.dtype, storage: Storage::Dense(buf) }
            }
        }
    }

    /// Re-store a rank-2 tensor as CSR, dropping zeros.
    pub fn to_csr(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(TensorError::InvalidLayout(format!("CSR requires rank 2, got shape {:?}", self.shape)));
        }
        if self.is_csr() {
            return Ok(self.clone());
        }
        let (rows, cols) = (self.shape[0], self.shape[1]);
        let buf = self.dense_buffer().unwrap();
        let mut row_offsets = Vec::with_capacity(rows + 1);
        let mut col_indices = Vec::new();
        let mut keep = Vec::new();
        row_offsets.push(0);
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                if !buf.is_zero(i) {
                    col_indices.push(c);
                    keep.push(i);
                }
            }
            row_offsets.push(col_indices.len());
        }
        let csr = Csr { row_offsets, col_indices, values: buf.select(&keep) };
        Tensor::csr(rows, cols, self.dtype, csr)
    }

    /// Same values at another dtype, in either lattice direction, provided
    /// every element is exactly representable. Used for compile-time weight
    /// materialization; runtime widening goes through [`kernels::cast`].
    pub fn retype_exact(&self, dtype: DType) -> Result<Tensor> {
        let convert = |b: &Buffer| Buffer::from_f64(dtype, (0..b.len()).map(|i| b.get(i)));
        let storage = match &self.storage {
            Storage::Dense(b) => Storage::Dense(convert(b)?),
            Storage::Csr(c) => Storage::Csr(Csr {
                row_offsets: c.row_offsets.clone(),
                col_indices: c.col_indices.clone(),
                values: convert(&c.values)?,
            }),
        };
        Ok(Tensor { shape: self.shape.clone(), dtype, storage })
    }

    /// Same elements viewed under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(TensorError::ShapeMismatch(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        let dense = self.to_dense();
        Ok(Tensor { shape: shape.to_vec(), dtype: self.dtype, storage: dense.storage })
    }

    /// Rows `range` of a rank-2 dense tensor.
    pub fn slice_rows(&self, range: std::ops::Range<usize>) -> Result<Tensor> {
        if self.rank() != 2 || range.end > self.shape[0] || range.start > range.end {
            return Err(TensorError::ShapeMismatch(format!("cannot take rows {range:?} of {:?}", self.shape)));
        }
        let cols = self.shape[1];
        let dense = self.to_dense();
        let idx: Vec<usize> = (range.start * cols..range.end * cols).collect();
        let buf = dense.dense_buffer().unwrap().select(&idx);
        Tensor::dense(vec![range.len(), cols], self.dtype, buf)
    }

    /// Bitwise equality: same shape, dtype, storage kind and element bits.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        if self.shape != other.shape || self.dtype != other.dtype {
            return false;
        }
        match (&self.storage, &other.storage) {
            (Storage::Dense(a), Storage::Dense(b)) => a.bit_eq(b),
            (Storage::Csr(a), Storage::Csr(b)) => {
                a.row_offsets == b.row_offsets && a.col_indices == b.col_indices && a.values.bit_eq(&b.values)
            }
            _ => false,
        }
    }
}

fn check_buffer(dtype: DType, buffer: &Buffer) -> Result<()> {
    if !buffer.matches(dtype) {
        return Err(TensorError::InvalidLayout(format!("buffer kind does not match {dtype}")));
    }
    match (dtype, buffer) {
        (DType::Int4, Buffer::I8(v)) => {
            if let Some(&x) = v.iter().find(|&&x| !(-8..=7).contains(&x)) {
                return Err(TensorError::Unrepresentable { value: x as f64, dtype });
            }
        }
        (DType::Float16, Buffer::F32(v)) => {
            if let Some(&x) = v.iter().find(|&&x| !DType::Float16.holds(x)) {
                return Err(TensorError::Unrepresentable { value: x as f64, dtype });
            }
        }
        _ => {}
    }
    Ok(())
}
