use std::fmt;

use crate::tensor::{Axis, BinaryOp, DType, MonotonicFn, NormKind, ReduceOp};

/// Operator categories. Comparison and Indices are the dtype-lowering ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Category {
    Comparison,
    Indices,
    Monotonic,
    Reduction,
    Arithmetic,
}

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::Comparison => "comparison",
            Category::Indices => "indices",
            Category::Monotonic => "monotonic",
            Category::Reduction => "reduction",
            Category::Arithmetic => "arithmetic",
        }
    }
}

/// One extent of a symbolic shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dim {
    /// The batch extent, fixed only at execution.
    Batch,
    Fixed(usize),
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dim::Batch => f.write_str("B"),
            Dim::Fixed(n) => write!(f, "{n}"),
        }
    }
}

pub fn fmt_shape(shape: &[Dim]) -> String {
    let parts: Vec<String> = shape.iter().map(Dim::to_string).collect();
    format!("[{}]", parts.join(","))
}

pub fn fixed_shape(shape: &[usize]) -> Vec<Dim> {
    shape.iter().map(|&n| Dim::Fixed(n)).collect()
}

/// A tensor operator with its static attributes.
#[derive(Debug, Clone, PartialEq)]
pub enum DlOperator {
    /// Integral products are stored as `out` (Int32 when unset); float
    /// products as Float32.
    MatMul {
        out: Option<DType>,
    },
    Compare(BinaryOp),
    Arith(BinaryOp),
    Reduce {
        op: ReduceOp,
        axis: Axis,
    },
    ArgMax {
        axis: Axis,
    },
    /// `table[indices]`: operand 0 is the table, operand 1 the indices.
    Gather,
    /// One or more order-preserving functions, applied first to last.
    Monotonic(Vec<MonotonicFn>),
    RowNorm(NormKind),
    Cast {
        to: DType,
    },
    Stack {
        axis: Axis,
    },
    /// Repeats the constant row in operand 1 once per row of operand 0.
    BroadcastRows,
}

impl DlOperator {
    pub fn category(&self) -> Category {
        match self {
            DlOperator::Compare(_) => Category::Comparison,
            DlOperator::ArgMax { .. } => Category::Indices,
            DlOperator::Monotonic(_) => Category::Monotonic,
            DlOperator::Reduce { .. } | DlOperator::RowNorm(_) => Category::Reduction,
            _ => Category::Arithmetic,
        }
    }

    pub fn name(&self) -> String {
        match self {
            DlOperator::MatMul { .. } => "matmul".into(),
            DlOperator::Compare(op) | DlOperator::Arith(op) => op.name().into(),
            DlOperator::Reduce { op, axis } => format!("reduce_{}(axis={})", op.name(), axis.0),
            DlOperator::ArgMax { axis } => format!("argmax(axis={})", axis.0),
            DlOperator::Gather => "gather_rows".into(),
            DlOperator::Monotonic(fns) => fns.iter().map(|f| f.name()).collect::<Vec<_>>().join("+"),
            DlOperator::RowNorm(k) => format!("row_norm({})", k.name()),
            DlOperator::Cast { to } => format!("cast({to})"),
            DlOperator::Stack { axis } => format!("stack(axis={})", axis.0),
            DlOperator::BroadcastRows => "broadcast_rows".into(),
        }
    }

    /// Whether `n` operands is a legal count.
    pub fn accepts_arity(&self, n: usize) -> bool {
        match self {
            DlOperator::MatMul { .. }
            | DlOperator::Compare(_)
            | DlOperator::Arith(_)
            | DlOperator::Gather
            | DlOperator::BroadcastRows => n == 2,
            DlOperator::Stack { .. } => n >= 1,
            _ => n == 1,
        }
    }

    /// Operands that take part in the dtype join and get cast to the
    /// operator dtype. Gather indices and the batch-extent operand of
    /// broadcast_rows are positional, not values.
    pub fn value_operands(&self, n: usize) -> Vec<usize> {
        match self {
            DlOperator::Gather => vec![0],
            DlOperator::BroadcastRows => vec![1],
            DlOperator::Cast { .. } => vec![],
            _ => (0..n).collect(),
        }
    }

    /// Operators whose kernels only exist in floating point.
    pub fn float_only(&self) -> bool {
        matches!(
            self,
            DlOperator::Arith(_)
                | DlOperator::Monotonic(_)
                | DlOperator::RowNorm(_)
                | DlOperator::Reduce { op: ReduceOp::Mean, .. }
        )
    }

    /// Operators that accumulate and so may be retyped to the preferred
    /// integer width of the target.
    pub fn accumulates(&self) -> bool {
        matches!(self, DlOperator::MatMul { .. } | DlOperator::Reduce { op: ReduceOp::Sum, .. })
    }

    /// Operator dtype implied by the value operands' dtypes.
    pub fn join_dtype(&self, value_dtypes: &[DType]) -> DType {
        if let DlOperator::Cast { to } = self {
            return *to;
        }
        let start = if self.float_only() { DType::Float32 } else { DType::Bool };
        value_dtypes.iter().fold(start, |acc, &d| acc.join(d))
    }

    /// Output dtype when computing at `op_dtype`.
    pub fn output_dtype(&self, op_dtype: DType) -> DType {
        match self {
            DlOperator::MatMul { out } => {
                if op_dtype.is_float() {
                    DType::Float32
                } else {
                    out.unwrap_or(DType::Int32).promoted()
                }
            }
            DlOperator::Compare(_) => DType::Bool,
            DlOperator::ArgMax { .. } => DType::Int32,
            DlOperator::Reduce { op: ReduceOp::Sum, .. } if op_dtype.is_integral() => DType::Int32,
            DlOperator::Reduce { op: ReduceOp::Max | ReduceOp::Min, .. } => op_dtype.promoted(),
            DlOperator::Reduce { .. } => DType::Float32,
            DlOperator::Arith(_) | DlOperator::Monotonic(_) | DlOperator::RowNorm(_) => DType::Float32,
            DlOperator::Cast { to } => to.promoted(),
            DlOperator::Gather | DlOperator::Stack { .. } | DlOperator::BroadcastRows => op_dtype.promoted(),
        }
    }

    /// Output shape from operand shapes.
    pub fn infer_shape(&self, shapes: &[&[Dim]]) -> Result<Vec<Dim>, String> {
        if !self.accepts_arity(shapes.len()) {
            return Err(format!("{} cannot take {} operands", self.name(), shapes.len()));
        }
        let show = |s: &[Dim]| fmt_shape(s);
        match self {
            DlOperator::MatMul { .. } => match (shapes[0], shapes[1]) {
                ([m, k1], [k2, n]) if k1 == k2 && *k2 != Dim::Batch => Ok(vec![*m, *n]),
                (a, b) => Err(format!("matmul {} x {} does not conform", show(a), show(b))),
            },
            DlOperator::Compare(_) | DlOperator::Arith(_) => broadcast(shapes[0], shapes[1]),
            DlOperator::Reduce { axis, .. } | DlOperator::ArgMax { axis } => {
                let s = shapes[0];
                if axis.0 >= s.len() {
                    return Err(format!("axis {} out of range for {}", axis.0, show(s)));
                }
                if s[axis.0] == Dim::Fixed(0) && !matches!(self, DlOperator::Reduce { op: ReduceOp::Sum, .. }) {
                    return Err(format!("{} over an empty axis", self.name()));
                }
                let mut out = s.to_vec();
                out.remove(axis.0);
                Ok(out)
            }
            DlOperator::Gather => match (shapes[0], shapes[1]) {
                ([Dim::Fixed(_), w], [n] | [n, Dim::Fixed(1)]) => Ok(vec![*n, *w]),
                (t, i) => Err(format!("cannot gather {} rows with indices {}", show(t), show(i))),
            },
            DlOperator::Monotonic(fns) => {
                for f in fns {
                    if let MonotonicFn::Softmax(axis) = f {
                        if axis.0 >= shapes[0].len() {
                            return Err(format!("softmax axis {} out of range", axis.0));
                        }
                    }
                }
                Ok(shapes[0].to_vec())
            }
            DlOperator::RowNorm(_) => match shapes[0] {
                [n, _] => Ok(vec![*n, Dim::Fixed(1)]),
                s => Err(format!("row_norm needs rank 2, got {}", show(s))),
            },
            DlOperator::Cast { .. } => Ok(shapes[0].to_vec()),
            DlOperator::Stack { axis } => {
                let first = shapes[0];
                if let Some(s) = shapes.iter().find(|s| **s != first) {
                    return Err(format!("stack parts differ: {} vs {}", show(first), show(s)));
                }
                if axis.0 > first.len() {
                    return Err(format!("stack axis {} out of range", axis.0));
                }
                let mut out = first.to_vec();
                out.insert(axis.0, Dim::Fixed(shapes.len()));
                Ok(out)
            }
            DlOperator::BroadcastRows => match (shapes[0], shapes[1]) {
                ([n, _], [Dim::Fixed(1), w] | [w]) => Ok(vec![*n, *w]),
                (a, r) => Err(format!("cannot broadcast {} over {}", show(r), show(a))),
            },
        }
    }
}

fn broadcast(a: &[Dim], b: &[Dim]) -> Result<Vec<Dim>, String> {
    let rank = a.len().max(b.len());
    let pad = |s: &[Dim], i: usize| if i < rank - s.len() { Dim::Fixed(1) } else { s[i - (rank - s.len())] };
    (0..rank)
        .map(|i| match (pad(a, i), pad(b, i)) {
            (x, y) if x == y => Ok(x),
            (Dim::Fixed(1), y) => Ok(y),
            (x, Dim::Fixed(1)) => Ok(x),
            _ => Err(format!("cannot broadcast {} with {}", fmt_shape(a), fmt_shape(b))),
        })
        .collect()
}
