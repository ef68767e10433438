//! Accuracy-preserving graph rewrites: redundant elimination (RE), dtype
//! rewriting (DR) and sparse operator replacing (SOR).
//!
//! Each pass maps a graph to a new graph; inputs are never mutated.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::ecg::{topo_order, Category, Dim, DlOperator, Ecg, EcgNode, HardwareProfile, NodeId, Operand};
use crate::tensor::{DType, MonotonicFn, ReduceOp};

/// What one pass changed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PassReport {
    pub pass: &'static str,
    pub nodes_rewritten: usize,
    pub casts_inserted: usize,
    pub nodes_eliminated: usize,
    pub weights_changed: usize,
}

impl fmt::Display for PassReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: rewritten={} casts_inserted={} eliminated={} weights_changed={}",
            self.pass, self.nodes_rewritten, self.casts_inserted, self.nodes_eliminated, self.weights_changed
        )
    }
}

/// Which passes run. The order is always RE, DR, SOR.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct PassSet {
    pub re: bool,
    pub dr: bool,
    pub sor: bool,
}

impl PassSet {
    pub const ALL: PassSet = PassSet { re: true, dr: true, sor: true };
    pub const NONE: PassSet = PassSet { re: false, dr: false, sor: false };

    /// Comma-separated subset of `re,dr,sor`; `none` or empty selects nothing.
    pub fn parse(list: &str) -> Result<PassSet, String> {
        let mut set = PassSet::NONE;
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "re" => set.re = true,
                "dr" => set.dr = true,
                "sor" => set.sor = true,
                "none" => {}
                other => return Err(format!("unknown pass `{other}` (expected re, dr, sor)")),
            }
        }
        Ok(set)
    }

    /// All eight subsets.
    pub fn subsets() -> Vec<PassSet> {
        (0..8u8).map(|m| PassSet { re: m & 1 != 0, dr: m & 2 != 0, sor: m & 4 != 0 }).collect()
    }
}

impl fmt::Display for PassSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [(self.re, "re"), (self.dr, "dr"), (self.sor, "sor")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        f.write_str(if names.is_empty() { "none" } else { "" })?;
        f.write_str(&names.join(","))
    }
}

/// Runs the enabled passes in the fixed order RE, DR, SOR.
pub fn run_pipeline(g: &Ecg, h: &HardwareProfile, passes: PassSet) -> (Ecg, Vec<PassReport>) {
    let mut g = g.clone();
    let mut reports = Vec::new();
    if passes.re {
        let (next, r) = redundant_elimination(&g);
        g = next;
        reports.push(r);
    }
    if passes.dr {
        let (next, r) = dtype_rewriting(&g, h);
        g = next;
        reports.push(r);
    }
    if passes.sor {
        let (next, r) = sparse_operator_replacing(&g, h);
        g = next;
        reports.push(r);
    }
    (g, reports)
}

fn monotonic_fns(n: &EcgNode) -> Option<&[MonotonicFn]> {
    match &n.op {
        DlOperator::Monotonic(fns) => Some(fns),
        _ => None,
    }
}

/// Number of edges leaving `id`, counting repeated reads.
fn out_edges(g: &Ecg, id: NodeId) -> usize {
    g.nodes().map(|n| n.inputs.iter().filter(|&&o| o == Operand::Node(id)).count()).sum()
}

/// Fuses monotonic chains and drops monotonic operators whose only reader
/// is an indices operator.
///
/// Guards: the removed node must have exactly one reader and must not be
/// the graph output; softmax axes must match the argmax axis; `relu` is
/// never dropped because it maps every negative input to the same value and
/// so can change which index is largest.
pub fn redundant_elimination(g: &Ecg) -> (Ecg, PassReport) {
    let mut g = g.clone();
    let mut report = PassReport { pass: "re", ..Default::default() };
    loop {
        let mut changed = false;
        let order = topo_order(&g).expect("validated graphs are acyclic");
        for id in order {
            let Some(node) = g.node(id) else { continue };
            let Some(fns) = monotonic_fns(node) else { continue };
            let (fns, input) = (fns.to_vec(), node.inputs[0]);

            // Fusion with a monotonic producer.
            if let Operand::Node(p) = input {
                let producer = g.node(p).expect("edges are closed");
                if let Some(first) = monotonic_fns(producer) {
                    if out_edges(&g, p) == 1 && p != g.output {
                        let fused: Vec<MonotonicFn> = first.iter().copied().chain(fns).collect();
                        let upstream = producer.inputs[0];
                        let n = g.node_mut(id).unwrap();
                        n.op = DlOperator::Monotonic(fused);
                        n.inputs[0] = upstream;
                        g.remove(p);
                        report.nodes_rewritten += 1;
                        report.nodes_eliminated += 1;
                        changed = true;
                        continue;
                    }
                }
            }

            // Elimination before an indices operator.
            if id == g.output || out_edges(&g, id) != 1 {
                continue;
            }
            let reader = g.consumers(id)[0];
            let reader_node = g.node(reader).unwrap();
            let DlOperator::ArgMax { axis } = reader_node.op else { continue };
            let safe = fns.iter().all(|f| match f {
                MonotonicFn::Softmax(a) => *a == axis,
                f => f.is_strict(),
            });
            if reader_node.category == Category::Indices && safe {
                let r = g.node_mut(reader).unwrap();
                for o in r.inputs.iter_mut() {
                    if *o == Operand::Node(id) {
                        *o = input;
                    }
                }
                g.remove(id);
                report.nodes_eliminated += 1;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    g.refresh().expect("rewiring preserves shapes");
    (g, report)
}

/// Static bound on the magnitude of an integral value, or `None` when the
/// value is unbounded or fractional.
fn magnitude(g: &Ecg, node: &EcgNode, o: Operand) -> Option<f64> {
    match o {
        Operand::Input => None,
        Operand::Weight(w) => {
            let v = node.weights[w].tensor.to_f64_vec();
            Some(v.iter().fold(0.0, |m, x| m.max(x.abs())))
        }
        Operand::Node(p) => node_magnitude(g, g.node(p)?),
    }
}

fn node_magnitude(g: &Ecg, n: &EcgNode) -> Option<f64> {
    let operand = |i: usize| magnitude(g, n, n.inputs[i]);
    match &n.op {
        DlOperator::Compare(_) => Some(1.0),
        DlOperator::ArgMax { axis } => match g.operand_shape(n, n.inputs[0])?.get(axis.0) {
            Some(Dim::Fixed(k)) => Some(k.saturating_sub(1) as f64),
            _ => None,
        },
        DlOperator::MatMul { .. } if n.output.dtype.is_integral() => {
            let inner = match g.operand_shape(n, n.inputs[0])?.last() {
                Some(Dim::Fixed(k)) => *k as f64,
                _ => return None,
            };
            Some(inner * operand(0)? * operand(1)?)
        }
        DlOperator::Gather => operand(0),
        DlOperator::BroadcastRows => operand(1),
        DlOperator::Cast { .. } => operand(0),
        DlOperator::Stack { .. } => (0..n.inputs.len()).try_fold(0.0f64, |m, i| Some(m.max(operand(i)?))),
        DlOperator::Reduce { op: ReduceOp::Sum, axis } if n.output.dtype.is_integral() => {
            match g.operand_shape(n, n.inputs[0])?.get(axis.0) {
                Some(Dim::Fixed(k)) => Some(*k as f64 * operand(0)?),
                _ => None,
            }
        }
        DlOperator::Reduce { op: ReduceOp::Max | ReduceOp::Min, .. } => operand(0),
        _ => None,
    }
}

/// Smallest integral dtype at or above `d` whose range covers `bound`.
fn widen_for(d: DType, bound: Option<f64>) -> DType {
    let Some(bound) = bound else { return d.join(DType::Int32) };
    [DType::Int8, DType::Int16, DType::Int32]
        .into_iter()
        .find(|t| d.le(*t) && t.int_range().is_some_and(|(_, hi)| bound <= hi as f64))
        .unwrap_or(DType::Int32)
}

fn accumulation_bound(g: &Ecg, n: &EcgNode) -> Option<f64> {
    match &n.op {
        DlOperator::MatMul { .. } => {
            let inner = match g.operand_shape(n, n.inputs[0])?.last() {
                Some(Dim::Fixed(k)) => *k as f64,
                _ => return None,
            };
            Some(inner * magnitude(g, n, n.inputs[0])? * magnitude(g, n, n.inputs[1])?)
        }
        DlOperator::Reduce { axis, .. } => match g.operand_shape(n, n.inputs[0])?.get(axis.0) {
            Some(Dim::Fixed(k)) => Some(*k as f64 * magnitude(g, n, n.inputs[0])?),
            _ => None,
        },
        _ => None,
    }
}

/// Decides every operator dtype from its operands, then moves integer
/// accumulations to the target's preferred width (never narrower, and
/// wider when the static overflow bound requires it). Weights are
/// re-materialized at the operator dtype; intermediates that arrive
/// narrower get an explicit cast node.
pub fn dtype_rewriting(g: &Ecg, h: &HardwareProfile) -> (Ecg, PassReport) {
    let mut g = g.clone();
    let mut report = PassReport { pass: "dr", ..Default::default() };
    let mut casts: HashMap<(Operand, DType), NodeId> = HashMap::new();

    for id in topo_order(&g).expect("validated graphs are acyclic") {
        let node = g.node(id).unwrap().clone();
        let mut d = node.op.join_dtype(&g.value_dtypes(&node)).promoted();
        if d.is_integral() && node.op.accumulates() {
            d = widen_for(d.join(h.preferred_int_dtype), accumulation_bound(&g, &node));
        }
        let op = match node.op {
            DlOperator::MatMul { .. } if d.is_integral() => DlOperator::MatMul { out: Some(d) },
            ref op => op.clone(),
        };

        let mut updated = node.clone();
        let mut touched = node.op_dtype != Some(d) || op != node.op;
        updated.op_dtype = Some(d);
        updated.op = op;
        for i in node.op.value_operands(node.inputs.len()) {
            match node.inputs[i] {
                Operand::Weight(w) => {
                    let weight = &mut updated.weights[w];
                    if weight.actual_dtype != d {
                        weight.rematerialize(d).expect("operator dtype is at least the weight's dtype");
                        report.weights_changed += 1;
                    }
                }
                src => {
                    let have = g.operand_dtype(&node, src).unwrap();
                    if have == d {
                        continue;
                    }
                    let cast_id = match casts.get(&(src, d)) {
                        Some(&c) => c,
                        None => {
                            let c = g.next_id();
                            let mut cast = EcgNode {
                                id: c,
                                op: DlOperator::Cast { to: d },
                                category: Category::Arithmetic,
                                inputs: vec![src],
                                weights: vec![],
                                use_sparse: false,
                                op_dtype: Some(d),
                                output: node.output.clone(),
                            };
                            cast.output = g.infer(&cast).expect("casts keep shapes");
                            g.insert(cast);
                            casts.insert((src, d), c);
                            report.casts_inserted += 1;
                            c
                        }
                    };
                    updated.inputs[i] = Operand::Node(cast_id);
                    touched = true;
                }
            }
        }
        updated.output = g.infer(&updated).expect("dtype changes keep shapes");
        if touched {
            report.nodes_rewritten += 1;
        }
        g.insert(updated);
    }
    (g, report)
}

/// Stores low-density right-hand matmul weights as CSR and marks the node
/// for the sparse kernel. Intermediates are never converted: their density
/// is only known at run time.
pub fn sparse_operator_replacing(g: &Ecg, h: &HardwareProfile) -> (Ecg, PassReport) {
    let mut g = g.clone();
    let mut report = PassReport { pass: "sor", ..Default::default() };
    let ids: Vec<NodeId> = g.nodes().map(|n| n.id).collect();
    for id in ids {
        let n = g.node_mut(id).unwrap();
        if !matches!(n.op, DlOperator::MatMul { .. }) || n.use_sparse {
            continue;
        }
        let Operand::Weight(w) = n.inputs[1] else { continue };
        let weight = &mut n.weights[w];
        if weight.tensor.rank() != 2 || weight.tensor.is_csr() || weight.sparsity >= h.sparse_threshold as f64 {
            continue;
        }
        weight.tensor = Arc::new(weight.tensor.to_csr().expect("rank-2 weights convert to CSR"));
        n.use_sparse = true;
        report.nodes_rewritten += 1;
        report.weights_changed += 1;
    }
    (g, report)
}
