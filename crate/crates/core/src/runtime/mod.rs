//! Lowers a graph to a kernel plan and interprets it on the reference kernels.

use std::borrow::Cow;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;

use thiserror::Error;

use crate::ecg::{fmt_shape, topo_order, Dim, DlOperator, Ecg, EcgNode, NodeId, Operand};
use crate::tensor::{
    argmax, broadcast_rows, cast, ew_binary, gather_rows, matmul, monotonic_apply, reduce, row_norm,
    sparse_dense_matmul, stack, Axis, BinaryOp, DType, MonotonicFn, NormKind, ReduceOp, Tensor, TensorError,
};

#[derive(Debug, Error)]
pub enum TranslateError {
    #[error("node {node}: no kernel for {msg}")]
    UnresolvedKernel { node: NodeId, msg: String },
    #[error("node {node}: shape inference failed: {msg}")]
    ShapeInferenceFailure { node: NodeId, msg: String },
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("input mismatch: {0}")]
    InputMismatch(String),
    #[error("node {node}: {source}")]
    Kernel {
        node: NodeId,
        #[source]
        source: TensorError,
    },
}

/// A resolved kernel variant.
#[derive(Debug, Clone, PartialEq)]
pub enum Kernel {
    MatMul { out: DType },
    SparseMatMul { out: DType },
    Binary(BinaryOp),
    Reduce { op: ReduceOp, axis: Axis },
    ArgMax { axis: Axis },
    Gather,
    Monotonic(Vec<MonotonicFn>),
    RowNorm(NormKind),
    Cast { to: DType },
    Stack { axis: Axis },
    BroadcastRows,
}

impl Kernel {
    pub fn name(&self) -> String {
        match self {
            Kernel::MatMul { .. } => "matmul".into(),
            Kernel::SparseMatMul { .. } => "sparse_dense_matmul".into(),
            Kernel::Binary(op) => op.name().into(),
            Kernel::Reduce { op, axis } => format!("reduce_{}(axis={})", op.name(), axis.0),
            Kernel::ArgMax { axis } => format!("argmax(axis={})", axis.0),
            Kernel::Gather => "gather_rows".into(),
            Kernel::Monotonic(fns) => fns.iter().map(|f| f.name()).collect::<Vec<_>>().join("+"),
            Kernel::RowNorm(k) => format!("row_norm({})", k.name()),
            Kernel::Cast { to } => format!("cast({to})"),
            Kernel::Stack { axis } => format!("stack(axis={})", axis.0),
            Kernel::BroadcastRows => "broadcast_rows".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Source {
    Slot(usize),
    /// Bound by reference to the graph's weight.
    Weight {
        name: String,
        tensor: Arc<Tensor>,
    },
}

#[derive(Debug, Clone)]
pub struct PlanOperand {
    pub source: Source,
    /// Runtime cast applied before the kernel runs.
    pub cast: Option<DType>,
}

#[derive(Debug, Clone)]
pub struct Invocation {
    pub node: NodeId,
    pub kernel: Kernel,
    /// Dtype the kernel computes in (after Int4/Float16 promotion).
    pub dtype: DType,
    pub sparse: bool,
    pub operands: Vec<PlanOperand>,
    pub output: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotInfo {
    pub shape: Vec<Dim>,
    pub dtype: DType,
}

/// An executable, immutable plan. Slots are written exactly once, in order.
#[derive(Debug, Clone)]
pub struct KernelPlan {
    pub invocations: Vec<Invocation>,
    pub slots: Vec<SlotInfo>,
    pub input_slot: usize,
    pub output_slot: usize,
    pub n_features: usize,
}

fn unresolved(node: &EcgNode, msg: impl Into<String>) -> TranslateError {
    TranslateError::UnresolvedKernel { node: node.id, msg: msg.into() }
}

fn resolve(g: &Ecg, node: &EcgNode, dtype: DType) -> Result<Kernel, TranslateError> {
    let need_float = |what: &str| {
        if dtype.is_float() {
            Ok(())
        } else {
            Err(unresolved(node, format!("{what} at {dtype}")))
        }
    };
    let csr_rhs =
        node.inputs.len() == 2 && matches!(node.inputs[1], Operand::Weight(w) if node.weights[w].tensor.is_csr());
    if node.use_sparse != csr_rhs {
        return Err(unresolved(node, "sparse flag and weight layout disagree"));
    }
    Ok(match &node.op {
        DlOperator::MatMul { out } => {
            let out = if dtype.is_float() {
                DType::Float32
            } else {
                let out = out.unwrap_or(DType::Int32);
                if !out.is_integral() || !dtype.le(out) {
                    return Err(unresolved(node, format!("{dtype} matmul into {out}")));
                }
                out.promoted()
            };
            if node.use_sparse {
                Kernel::SparseMatMul { out }
            } else {
                Kernel::MatMul { out }
            }
        }
        DlOperator::Compare(op) => Kernel::Binary(*op),
        DlOperator::Arith(op) => {
            need_float("element-wise arithmetic")?;
            Kernel::Binary(*op)
        }
        DlOperator::Reduce { op, axis } => {
            if *op == ReduceOp::Mean {
                need_float("reduce_mean")?;
            }
            Kernel::Reduce { op: *op, axis: *axis }
        }
        DlOperator::ArgMax { axis } => Kernel::ArgMax { axis: *axis },
        DlOperator::Gather => {
            let idx = g.operand_dtype(node, node.inputs[1]).unwrap_or(DType::Float32);
            if idx.is_float() {
                return Err(unresolved(node, format!("gather with {idx} indices")));
            }
            Kernel::Gather
        }
        DlOperator::Monotonic(fns) => {
            need_float("monotonic functions")?;
            Kernel::Monotonic(fns.clone())
        }
        DlOperator::RowNorm(k) => {
            need_float("row_norm")?;
            Kernel::RowNorm(*k)
        }
        DlOperator::Cast { to } => Kernel::Cast { to: to.promoted() },
        DlOperator::Stack { axis } => Kernel::Stack { axis: *axis },
        DlOperator::BroadcastRows => Kernel::BroadcastRows,
    })
}

/// Lowers a graph to a plan in topological order.
pub fn translate(g: &Ecg) -> Result<KernelPlan, TranslateError> {
    if g.input.n_features == 0 {
        return Err(TranslateError::ShapeInferenceFailure { node: g.output, msg: "input has no features".into() });
    }
    if g.input.dtype != DType::Float32 {
        return Err(TranslateError::InvalidGraph(format!("input dtype {} is not float32", g.input.dtype)));
    }
    let order = topo_order(g).map_err(|e| TranslateError::InvalidGraph(e.to_string()))?;
    let mut slots = vec![SlotInfo { shape: g.input.shape(), dtype: g.input.dtype }];
    let mut slot_of: HashMap<NodeId, usize> = HashMap::new();
    let mut invocations = Vec::with_capacity(order.len());

    for id in order {
        let node = g.node(id).unwrap();
        let out = g.infer(node).map_err(|msg| TranslateError::ShapeInferenceFailure { node: id, msg })?;
        if out.shape.contains(&Dim::Fixed(0)) {
            return Err(TranslateError::ShapeInferenceFailure {
                node: id,
                msg: format!("empty extent in {}", fmt_shape(&out.shape)),
            });
        }
        let dtype = g.compute_dtype(node).promoted();
        let kernel = resolve(g, node, dtype)?;
        let values = node.op.value_operands(node.inputs.len());
        let operands = node
            .inputs
            .iter()
            .enumerate()
            .map(|(i, &o)| {
                let source = match o {
                    Operand::Input => Source::Slot(0),
                    Operand::Node(p) => Source::Slot(slot_of[&p]),
                    Operand::Weight(w) => {
                        Source::Weight { name: node.weights[w].name.clone(), tensor: node.weights[w].tensor.clone() }
                    }
                };
                let have = g.operand_dtype(node, o).unwrap();
                let cast = (values.contains(&i) && have != dtype).then_some(dtype);
                PlanOperand { source, cast }
            })
            .collect();
        slots.push(SlotInfo { shape: out.shape, dtype: out.dtype });
        let output = slots.len() - 1;
        slot_of.insert(id, output);
        invocations.push(Invocation { node: id, kernel, dtype, sparse: node.use_sparse, operands, output });
    }
    let output_slot = *slot_of
        .get(&g.output)
        .ok_or_else(|| TranslateError::InvalidGraph(format!("output node {} missing", g.output)))?;
    Ok(KernelPlan { invocations, slots, input_slot: 0, output_slot, n_features: g.input.n_features })
}

fn run_kernel(k: &Kernel, args: &[Cow<'_, Tensor>]) -> Result<Tensor, TensorError> {
    match k {
        Kernel::MatMul { out } => matmul(&args[0], &args[1], *out),
        Kernel::SparseMatMul { out } => sparse_dense_matmul(&args[0], &args[1], *out),
        Kernel::Binary(op) => ew_binary(*op, &args[0], &args[1]),
        Kernel::Reduce { op, axis } => reduce(*op, &args[0], *axis),
        Kernel::ArgMax { axis } => argmax(&args[0], *axis),
        Kernel::Gather => gather_rows(&args[0], &args[1]),
        Kernel::Monotonic(fns) => {
            let mut t = monotonic_apply(fns[0], &args[0])?;
            for f in &fns[1..] {
                t = monotonic_apply(*f, &t)?;
            }
            Ok(t)
        }
        Kernel::RowNorm(kind) => row_norm(&args[0], *kind),
        Kernel::Cast { to } => cast(&args[0], *to),
        Kernel::Stack { axis } => {
            let parts: Vec<&Tensor> = args.iter().map(|a| a.as_ref()).collect();
            stack(&parts, *axis)
        }
        Kernel::BroadcastRows => broadcast_rows(&args[1], args[0].shape()[0]),
    }
}

/// Runs a plan on a `[batch, n_features]` Float32 input. Any batch size,
/// including zero, is accepted.
pub fn execute(p: &KernelPlan, input: &Tensor) -> Result<Tensor, ExecError> {
    match input.shape() {
        [_, c] if *c == p.n_features => {}
        s => return Err(ExecError::InputMismatch(format!("expected [batch, {}], got {s:?}", p.n_features))),
    }
    if input.dtype() != DType::Float32 {
        return Err(ExecError::InputMismatch(format!("expected float32 input, got {}", input.dtype())));
    }
    // Dense and sparse products agree bit for bit only on finite values.
    if let Some(i) = input.to_f32_vec().iter().position(|v| !v.is_finite()) {
        let (r, c) = (i / p.n_features, i % p.n_features);
        return Err(ExecError::InputMismatch(format!("non-finite value at row {r}, column {c}")));
    }

    let mut slots: Vec<Option<Tensor>> = vec![None; p.slots.len()];
    slots[p.input_slot] = Some(input.clone());
    for inv in &p.invocations {
        let err = |source| ExecError::Kernel { node: inv.node, source };
        let mut args = Vec::with_capacity(inv.operands.len());
        for o in &inv.operands {
            let t: &Tensor = match &o.source {
                Source::Slot(s) => slots[*s].as_ref().expect("plan slots are written before use"),
                Source::Weight { tensor, .. } => tensor,
            };
            args.push(match o.cast {
                Some(d) => Cow::Owned(cast(t, d).map_err(err)?),
                None => Cow::Borrowed(t),
            });
        }
        let out = run_kernel(&inv.kernel, &args).map_err(err)?;
        slots[inv.output] = Some(out);
    }
    Ok(slots[p.output_slot].take().expect("output slot written"))
}

impl KernelPlan {
    /// Deterministic one-invocation-per-line rendering.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let slot = |i: usize| format!("{}{}", self.slots[i].dtype, fmt_shape(&self.slots[i].shape));
        let _ = writeln!(s, "input: s{} {}", self.input_slot, slot(self.input_slot));
        for inv in &self.invocations {
            let layout = if inv.sparse { "csr" } else { "dense" };
            let mut variant = format!("{}, {layout}", inv.dtype);
            if matches!(inv.kernel, Kernel::MatMul { .. } | Kernel::SparseMatMul { .. }) && inv.dtype.is_integral() {
                variant.push_str(", acc int32");
            }
            let args: Vec<String> = inv
                .operands
                .iter()
                .map(|o| {
                    let (name, dtype) = match &o.source {
                        Source::Slot(i) => (format!("s{i}"), self.slots[*i].dtype),
                        Source::Weight { name, tensor } => (name.clone(), tensor.dtype()),
                    };
                    match o.cast {
                        Some(c) => format!("{name}:{dtype}->{c}"),
                        None => format!("{name}:{dtype}"),
                    }
                })
                .collect();
            let _ = writeln!(
                s,
                "s{} = {}<{}>({}) : {}  # node {}",
                inv.output,
                inv.kernel.name(),
                variant,
                args.join(", "),
                slot(inv.output),
                inv.node
            );
        }
        let _ = writeln!(s, "output: s{}", self.output_slot);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convert::convert_model;
    use crate::ecg::{build_ecg, HardwareProfile, InputSpec};
    use crate::model::parse_model;
    use crate::passes::{run_pipeline, PassSet};

    const TREE: &str = r#"{"format_version":1,"model_type":"decision_tree_classifier","n_features":4,"classes":[0,1,2],
        "nodes":[{"feature":0,"threshold":0.3,"left":1,"right":2},{"leaf":[1,0,0]},
                 {"feature":1,"threshold":-1.7,"left":3,"right":4},{"leaf":[0,1,0]},{"leaf":[0,0,1]}]}"#;

    fn tree_graph() -> Ecg {
        let m = parse_model(TREE).unwrap();
        build_ecg(&convert_model(&m), InputSpec { n_features: 4, dtype: DType::Float32 }).unwrap()
    }

    fn x() -> Tensor {
        Tensor::from_f32(
            &[4, 4],
            vec![
                0.0, 0.0, 0.0, 0.0, // left at the root
                0.3, 9.0, 0.0, 0.0, // exactly at the threshold goes left
                1.0, -2.0, 0.0, 0.0, // right, then left
                1.0, 5.0, 0.0, 0.0, // right, right
            ],
        )
        .unwrap()
    }

    #[test]
    fn unoptimized_and_optimized_agree() {
        let g = tree_graph();
        let plain = execute(&translate(&g).unwrap(), &x()).unwrap();
        assert_eq!(plain.to_f32_vec(), vec![0.0, 0.0, 1.0, 2.0]);
        let (opt, _) = run_pipeline(&g, &HardwareProfile::cpu_avx2(), PassSet::ALL);
        let fast = execute(&translate(&opt).unwrap(), &x()).unwrap();
        assert_eq!(fast.to_f32_vec(), plain.to_f32_vec());
    }

    #[test]
    fn optimized_plan_structure() {
        let (opt, _) = run_pipeline(&tree_graph(), &HardwareProfile::cpu_avx2(), PassSet::ALL);
        let dump = translate(&opt).unwrap().dump();
        assert_eq!(dump.matches("sparse_dense_matmul<float32, csr>").count(), 1, "{dump}");
        assert_eq!(dump.matches("matmul<int8, dense, acc int32>").count(), 1, "{dump}");
        let plain = translate(&tree_graph()).unwrap().dump();
        assert!(!plain.contains("csr"), "{plain}");
        assert!(plain.contains("w1:bool->float32"), "{plain}");
    }

    #[test]
    fn empty_batch_and_bad_input() {
        let p = translate(&tree_graph()).unwrap();
        let out = execute(&p, &Tensor::zeros(&[0, 4], DType::Float32)).unwrap();
        assert_eq!(out.shape(), &[0, 1]);
        assert!(matches!(execute(&p, &Tensor::zeros(&[2, 3], DType::Float32)), Err(ExecError::InputMismatch(_))));
        let nan = Tensor::from_f32(&[1, 4], vec![f32::NAN, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(execute(&p, &nan), Err(ExecError::InputMismatch(_))));
    }

    #[test]
    fn float16_weights_promote() {
        let m = parse_model(
            r#"{"format_version":1,"model_type":"decision_tree_regressor","n_features":1,
            "nodes":[{"feature":0,"threshold":0,"left":1,"right":2},{"leaf":[0.5]},{"leaf":[1.25]}]}"#,
        )
        .unwrap();
        let g = build_ecg(&convert_model(&m), InputSpec { n_features: 1, dtype: DType::Float32 }).unwrap();
        assert_eq!(g.node(4).unwrap().weights[0].actual_dtype, DType::Float16);
        let p = translate(&g).unwrap();
        assert_eq!(p.invocations.last().unwrap().dtype, DType::Float32);
        let out = execute(&p, &Tensor::from_f32(&[2, 1], vec![-1.0, 1.0]).unwrap()).unwrap();
        assert_eq!(out.to_f32_vec(), vec![0.5, 1.25]);
    }
}
