//! The extended computational graph (ECG): tensor operators annotated with
//! category, dtype, weight sparsity and kernel-selection state.

mod op;
mod profile;

pub use op::{fixed_shape, fmt_shape, Category, Dim, DlOperator};
pub use profile::{HardwareProfile, ProfileError};

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt::Write as _;
use std::sync::Arc;

use thiserror::Error;

use crate::convert::{OperatorRep, RepOperand};
use crate::tensor::{DType, Tensor, TensorError};

pub type NodeId = usize;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EcgError {
    #[error("graph contains a cycle")]
    CyclicGraph,
    #[error("dangling reference: {0}")]
    DanglingReference(String),
    #[error("node {node}: {msg}")]
    InvalidNode { node: NodeId, msg: String },
}

/// A constant operand owned by its node.
#[derive(Debug, Clone)]
pub struct Weight {
    pub name: String,
    /// Shared so kernel plans can bind it without copying.
    pub tensor: Arc<Tensor>,
    /// Fraction of non-zero elements.
    pub sparsity: f64,
    pub smallest_dtype: DType,
    pub actual_dtype: DType,
}

impl Weight {
    /// Re-stores the tensor at `dtype`. Only widening from the smallest
    /// dtype is legal, so the conversion is exact.
    pub(crate) fn rematerialize(&mut self, dtype: DType) -> Result<(), TensorError> {
        if !self.smallest_dtype.le(dtype) {
            return Err(TensorError::NarrowingCast { from: self.smallest_dtype, to: dtype });
        }
        if self.actual_dtype != dtype {
            self.tensor = Arc::new(self.tensor.retype_exact(dtype)?);
            self.actual_dtype = dtype;
        }
        Ok(())
    }
}

/// An operator output.
#[derive(Debug, Clone, PartialEq)]
pub struct IntermediateResult {
    pub shape: Vec<Dim>,
    pub dtype: DType,
    /// Data-dependent, so unknown at compile time. Kept explicit so no pass
    /// can mistake it for a measured value.
    pub sparsity: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operand {
    Input,
    Node(NodeId),
    /// Index into the node's own weight list.
    Weight(usize),
}

#[derive(Debug, Clone)]
pub struct EcgNode {
    pub id: NodeId,
    pub op: DlOperator,
    pub category: Category,
    pub inputs: Vec<Operand>,
    pub weights: Vec<Weight>,
    pub use_sparse: bool,
    /// `None` until dtype rewriting decides it.
    pub op_dtype: Option<DType>,
    pub output: IntermediateResult,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputSpec {
    pub n_features: usize,
    pub dtype: DType,
}

impl InputSpec {
    pub fn shape(&self) -> Vec<Dim> {
        vec![Dim::Batch, Dim::Fixed(self.n_features)]
    }
}

#[derive(Debug, Clone)]
pub struct Ecg {
    nodes: BTreeMap<NodeId, EcgNode>,
    pub input: InputSpec,
    pub output: NodeId,
}

/// Builds a graph with one node per operator representation. The last
/// representation is the graph output.
pub fn build_ecg(reps: &[OperatorRep], input: InputSpec) -> Result<Ecg, EcgError> {
    if reps.is_empty() {
        return Err(EcgError::DanglingReference("no operators, so no output".into()));
    }
    let mut nodes = BTreeMap::new();
    for (id, rep) in reps.iter().enumerate() {
        let inputs = rep
            .operands
            .iter()
            .map(|o| match *o {
                RepOperand::Input => Ok(Operand::Input),
                RepOperand::Rep(r) if r < reps.len() => Ok(Operand::Node(r)),
                RepOperand::Rep(r) => Err(EcgError::DanglingReference(format!("node {id} reads missing node {r}"))),
                RepOperand::Weight(w) if w < rep.weights.len() => Ok(Operand::Weight(w)),
                RepOperand::Weight(w) => {
                    Err(EcgError::DanglingReference(format!("node {id} reads missing weight {w}")))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        let weights = rep
            .weights
            .iter()
            .map(|w| {
                let tensor = w
                    .tensor
                    .retype_exact(w.smallest_dtype)
                    .map_err(|e| EcgError::InvalidNode { node: id, msg: format!("weight {}: {e}", w.name) })?;
                Ok(Weight {
                    name: w.name.clone(),
                    sparsity: tensor.density(),
                    tensor: Arc::new(tensor),
                    smallest_dtype: w.smallest_dtype,
                    actual_dtype: w.smallest_dtype,
                })
            })
            .collect::<Result<Vec<_>, EcgError>>()?;
        let placeholder = IntermediateResult { shape: vec![], dtype: DType::Float32, sparsity: None };
        nodes.insert(
            id,
            EcgNode {
                id,
                category: rep.op.category(),
                op: rep.op.clone(),
                inputs,
                weights,
                use_sparse: false,
                op_dtype: None,
                output: placeholder,
            },
        );
    }
    let mut g = Ecg { nodes, input, output: reps.len() - 1 };
    g.refresh()?;
    Ok(g)
}

impl Ecg {
    pub fn node(&self, id: NodeId) -> Option<&EcgNode> {
        self.nodes.get(&id)
    }

    pub(crate) fn node_mut(&mut self, id: NodeId) -> Option<&mut EcgNode> {
        self.nodes.get_mut(&id)
    }

    /// Nodes in id order.
    pub fn nodes(&self) -> impl Iterator<Item = &EcgNode> {
        self.nodes.values()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn next_id(&self) -> NodeId {
        self.nodes.keys().next_back().map_or(0, |k| k + 1)
    }

    pub(crate) fn insert(&mut self, node: EcgNode) {
        self.nodes.insert(node.id, node);
    }

    pub(crate) fn remove(&mut self, id: NodeId) -> Option<EcgNode> {
        self.nodes.remove(&id)
    }

    /// Nodes reading `id`'s output, ascending, one entry per reading node.
    pub fn consumers(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes.values().filter(|n| n.inputs.contains(&Operand::Node(id))).map(|n| n.id).collect()
    }

    fn producers(node: &EcgNode) -> impl Iterator<Item = NodeId> + '_ {
        node.inputs.iter().filter_map(|o| match o {
            Operand::Node(p) => Some(*p),
            _ => None,
        })
    }

    /// Dtype an operand currently carries: the graph input's dtype, the
    /// producer's output dtype, or the weight's actual dtype.
    pub fn operand_dtype(&self, node: &EcgNode, o: Operand) -> Option<DType> {
        match o {
            Operand::Input => Some(self.input.dtype),
            Operand::Node(p) => self.nodes.get(&p).map(|n| n.output.dtype),
            Operand::Weight(w) => node.weights.get(w).map(|w| w.actual_dtype),
        }
    }

    pub fn operand_shape(&self, node: &EcgNode, o: Operand) -> Option<Vec<Dim>> {
        match o {
            Operand::Input => Some(self.input.shape()),
            Operand::Node(p) => self.nodes.get(&p).map(|n| n.output.shape.clone()),
            Operand::Weight(w) => node.weights.get(w).map(|w| fixed_shape(w.tensor.shape())),
        }
    }

    /// Dtypes of the operands that join into the operator dtype.
    pub fn value_dtypes(&self, node: &EcgNode) -> Vec<DType> {
        node.op
            .value_operands(node.inputs.len())
            .into_iter()
            .filter_map(|i| self.operand_dtype(node, node.inputs[i]))
            .collect()
    }

    /// The dtype a node computes in: its decided `op_dtype`, or else the
    /// join of its operand dtypes.
    pub fn compute_dtype(&self, node: &EcgNode) -> DType {
        node.op_dtype.unwrap_or_else(|| node.op.join_dtype(&self.value_dtypes(node)))
    }

    /// Output shape and dtype implied by the node's operands.
    pub fn infer(&self, node: &EcgNode) -> Result<IntermediateResult, String> {
        let mut shapes = Vec::with_capacity(node.inputs.len());
        for &o in &node.inputs {
            shapes.push(self.operand_shape(node, o).ok_or_else(|| format!("operand {o:?} does not exist"))?);
        }
        let refs: Vec<&[Dim]> = shapes.iter().map(Vec::as_slice).collect();
        let shape = node.op.infer_shape(&refs)?;
        let dtype = node.op.output_dtype(self.compute_dtype(node));
        Ok(IntermediateResult { shape, dtype, sparsity: None })
    }

    /// Recomputes every node's output record in topological order.
    pub(crate) fn refresh(&mut self) -> Result<(), EcgError> {
        for id in topo_order(self)? {
            let node = &self.nodes[&id];
            let out = self.infer(node).map_err(|msg| EcgError::InvalidNode { node: id, msg })?;
            self.nodes.get_mut(&id).unwrap().output = out;
        }
        Ok(())
    }

    /// Deterministic one-line-per-node rendering.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "input: {}{}", self.input.dtype, fmt_shape(&self.input.shape()));
        if let Ok(order) = topo_order(self) {
            for id in order {
                s.push_str(&self.dump_node(&self.nodes[&id]));
                s.push('\n');
            }
        }
        let _ = writeln!(s, "output: %{}", self.output);
        s
    }

    fn dump_node(&self, n: &EcgNode) -> String {
        let dtype = n.op_dtype.map_or("unknown", DType::name);
        let layout = if n.use_sparse { "sparse" } else { "dense" };
        let inputs: Vec<String> = n
            .inputs
            .iter()
            .map(|o| match *o {
                Operand::Input => "x".to_string(),
                Operand::Node(p) => format!("%{p}"),
                Operand::Weight(w) => n.weights.get(w).map_or_else(|| format!("w{w}?"), |w| w.name.clone()),
            })
            .collect();
        let mut line = format!("{}: {}[{}, {}] ({})", n.id, n.op.name(), dtype, layout, inputs.join(", "));
        if !n.weights.is_empty() {
            let ws: Vec<String> = n
                .weights
                .iter()
                .map(|w| {
                    let fmt = if w.tensor.is_csr() { ", csr" } else { "" };
                    format!("{}: {}/{:.4}{}", w.name, w.actual_dtype, w.sparsity, fmt)
                })
                .collect();
            let _ = write!(line, " {{{}}}", ws.join(", "));
        }
        let _ = write!(line, " -> {}{}", n.output.dtype, fmt_shape(&n.output.shape));
        line
    }
}

/// Kahn's algorithm, taking the smallest ready id first.
pub fn topo_order(g: &Ecg) -> Result<Vec<NodeId>, EcgError> {
    let mut indegree: BTreeMap<NodeId, usize> = g.nodes.keys().map(|&k| (k, 0)).collect();
    let mut users: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    for n in g.nodes.values() {
        for p in Ecg::producers(n) {
            if !g.nodes.contains_key(&p) {
                return Err(EcgError::DanglingReference(format!("node {} reads missing node {p}", n.id)));
            }
            *indegree.get_mut(&n.id).unwrap() += 1;
            users.entry(p).or_default().push(n.id);
        }
    }
    let mut ready: BinaryHeap<Reverse<NodeId>> =
        indegree.iter().filter(|(_, &d)| d == 0).map(|(&k, _)| Reverse(k)).collect();
    let mut order = Vec::with_capacity(g.nodes.len());
    while let Some(Reverse(id)) = ready.pop() {
        order.push(id);
        for &u in users.get(&id).into_iter().flatten() {
            let d = indegree.get_mut(&u).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.push(Reverse(u));
            }
        }
    }
    if order.len() != g.nodes.len() {
        return Err(EcgError::CyclicGraph);
    }
    Ok(order)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub node: Option<NodeId>,
    pub msg: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.node {
            Some(n) => write!(f, "node {n}: {}", self.msg),
            None => f.write_str(&self.msg),
        }
    }
}

/// Checks every structural invariant; violations are returned as data.
pub fn validate_ecg(g: &Ecg) -> Result<(), Vec<Violation>> {
    let mut v = Vec::new();
    let mut bad = |node: Option<NodeId>, msg: String| v.push(Violation { node, msg });
    if !g.nodes.contains_key(&g.output) {
        bad(None, format!("output node {} does not exist", g.output));
    }
    let order = match topo_order(g) {
        Ok(o) => o,
        Err(e) => {
            bad(None, e.to_string());
            return Err(v);
        }
    };

    for &id in &order {
        let n = &g.nodes[&id];
        let at = Some(id);
        if n.category != n.op.category() {
            bad(at, format!("category {} does not match {}", n.category.name(), n.op.name()));
        }
        if !n.op.accepts_arity(n.inputs.len()) {
            bad(at, format!("{} cannot take {} operands", n.op.name(), n.inputs.len()));
            continue;
        }
        let mut weights_read = vec![false; n.weights.len()];
        for o in &n.inputs {
            if let Operand::Weight(w) = *o {
                match weights_read.get_mut(w) {
                    Some(r) => *r = true,
                    None => bad(at, format!("weight {w} does not exist")),
                }
            }
        }
        if weights_read.iter().any(|r| !r) {
            bad(at, "node owns a weight it never reads".into());
        }
        for w in &n.weights {
            if w.sparsity != w.tensor.density() {
                bad(at, format!("weight {} sparsity is stale", w.name));
            }
            if !w.smallest_dtype.le(w.actual_dtype) {
                bad(at, format!("weight {} stored below its smallest dtype", w.name));
            }
            if w.tensor.dtype() != w.actual_dtype {
                bad(at, format!("weight {} tensor dtype differs from its actual dtype", w.name));
            }
        }

        match g.infer(n) {
            Ok(out) => {
                if out.shape != n.output.shape {
                    bad(
                        at,
                        format!(
                            "stored shape {} but operands imply {}",
                            fmt_shape(&n.output.shape),
                            fmt_shape(&out.shape)
                        ),
                    );
                }
                if out.dtype != n.output.dtype {
                    bad(at, format!("stored dtype {} but operands imply {}", n.output.dtype, out.dtype));
                }
            }
            Err(msg) => bad(at, msg),
        }

        let inputs: Vec<DType> = n.inputs.iter().filter_map(|&o| g.operand_dtype(n, o)).collect();
        let lowering_ok = match n.category {
            Category::Comparison => n.output.dtype == DType::Bool && inputs.iter().all(|d| n.output.dtype.le(*d)),
            Category::Indices => n.output.dtype == DType::Int32,
            _ => true,
        };
        if !lowering_ok {
            bad(at, "dtype-lowering breached".into());
        }
        if let Some(d) = n.op_dtype {
            let joined = n.op.join_dtype(&g.value_dtypes(n));
            if !joined.le(d) {
                bad(at, format!("operator dtype {d} is below its operands' join {joined}"));
            }
        }

        let csr_weights: Vec<usize> = (0..n.weights.len()).filter(|&w| n.weights[w].tensor.is_csr()).collect();
        if n.use_sparse {
            let ok = matches!(n.op, DlOperator::MatMul { .. })
                && matches!(n.inputs[1], Operand::Weight(w) if n.weights[w].tensor.is_csr());
            if !ok {
                bad(at, "use_sparse needs a matmul with a CSR weight on the right".into());
            }
        } else if !csr_weights.is_empty() {
            bad(at, "CSR weight on a dense operator".into());
        }
    }

    // Every node must feed the output.
    let mut live = vec![g.output];
    let mut seen = std::collections::BTreeSet::new();
    while let Some(id) = live.pop() {
        if seen.insert(id) {
            if let Some(n) = g.nodes.get(&id) {
                live.extend(Ecg::producers(n));
            }
        }
    }
    for &id in g.nodes.keys() {
        if !seen.contains(&id) {
            bad(Some(id), "node does not reach the output".into());
        }
    }

    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convert::{OperatorRep, RepWeight};
    use crate::tensor::{Axis, BinaryOp, MonotonicFn};

    fn spec(n: usize) -> InputSpec {
        InputSpec { n_features: n, dtype: DType::Float32 }
    }

    fn rep(op: DlOperator, operands: Vec<RepOperand>, weights: Vec<RepWeight>) -> OperatorRep {
        OperatorRep { op, operands, weights }
    }

    fn sigmoid_chain() -> Vec<OperatorRep> {
        let m = |o| rep(DlOperator::Monotonic(vec![MonotonicFn::Sigmoid]), vec![o], vec![]);
        vec![m(RepOperand::Input), m(RepOperand::Rep(0)), m(RepOperand::Rep(1))]
    }

    #[test]
    fn empty_rep_list_has_no_output() {
        assert!(matches!(build_ecg(&[], spec(2)), Err(EcgError::DanglingReference(_))));
    }

    #[test]
    fn forward_and_missing_references() {
        let mut reps = sigmoid_chain();
        reps[0].operands[0] = RepOperand::Rep(2);
        assert_eq!(build_ecg(&reps, spec(2)).unwrap_err(), EcgError::CyclicGraph);
        reps[0].operands[0] = RepOperand::Rep(7);
        assert!(matches!(build_ecg(&reps, spec(2)), Err(EcgError::DanglingReference(_))));
    }

    #[test]
    fn chain_topo_order_is_insertion_order() {
        let g = build_ecg(&sigmoid_chain(), spec(2)).unwrap();
        assert_eq!(topo_order(&g).unwrap(), vec![0, 1, 2]);
        assert!(validate_ecg(&g).is_ok());
    }

    #[test]
    fn diamond_orders_branches_by_id() {
        let m = |o| rep(DlOperator::Monotonic(vec![MonotonicFn::Exp]), vec![o], vec![]);
        let reps = vec![
            m(RepOperand::Input),
            m(RepOperand::Rep(0)),
            m(RepOperand::Rep(0)),
            rep(DlOperator::Arith(BinaryOp::Add), vec![RepOperand::Rep(2), RepOperand::Rep(1)], vec![]),
        ];
        let g = build_ecg(&reps, spec(3)).unwrap();
        assert_eq!(topo_order(&g).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn shuffled_ids_order_is_stable() {
        let mut g = build_ecg(&sigmoid_chain(), spec(2)).unwrap();
        // Renumber so ids no longer follow data flow.
        let mut n0 = g.remove(0).unwrap();
        n0.id = 9;
        g.insert(n0);
        g.node_mut(1).unwrap().inputs[0] = Operand::Node(9);
        let first = topo_order(&g).unwrap();
        assert_eq!(first, vec![9, 1, 2]);
        for _ in 0..10 {
            assert_eq!(topo_order(&g).unwrap(), first);
        }
    }

    #[test]
    fn comparison_claiming_float_output_is_flagged() {
        let reps = vec![rep(
            DlOperator::Compare(BinaryOp::Greater),
            vec![RepOperand::Input, RepOperand::Weight(0)],
            vec![RepWeight::new("t", Tensor::from_f32(&[2], vec![0.5, 1.5]).unwrap())],
        )];
        let mut g = build_ecg(&reps, spec(2)).unwrap();
        assert!(validate_ecg(&g).is_ok());
        g.node_mut(0).unwrap().output.dtype = DType::Float32;
        let errs = validate_ecg(&g).unwrap_err();
        assert!(errs.iter().any(|e| e.msg == "dtype-lowering breached"), "{errs:?}");
    }

    #[test]
    fn argmax_output_is_int32() {
        let reps = vec![rep(DlOperator::ArgMax { axis: Axis(1) }, vec![RepOperand::Input], vec![])];
        let g = build_ecg(&reps, spec(4)).unwrap();
        assert_eq!(g.node(0).unwrap().output.dtype, DType::Int32);
        assert_eq!(g.node(0).unwrap().output.shape, vec![Dim::Batch]);
    }

    #[test]
    fn unreachable_nodes_are_flagged() {
        let mut reps = sigmoid_chain();
        reps[2].operands[0] = RepOperand::Input;
        let g = build_ecg(&reps, spec(2)).unwrap();
        let errs = validate_ecg(&g).unwrap_err();
        assert_eq!(errs.len(), 2);
    }
}
