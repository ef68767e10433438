//! Lowers trained models into lists of tensor operators with weights.

pub mod tree;

pub use tree::{in_order_leaves, level_order, TreeTensors};

use crate::ecg::DlOperator;
use crate::model::{
    Aggregation, DecisionTree, Forest, Linear, LinearTask, Link, ModelBody, ModelKind, Scaler, Task, TrainedModel,
    Tree, TreeNode,
};
use crate::tensor::{smallest_lossless_dtype, Axis, BinaryOp, DType, MonotonicFn, ReduceOp, Tensor};

/// A named constant operand.
#[derive(Debug, Clone)]
pub struct RepWeight {
    pub name: String,
    /// Stored at `smallest_dtype`.
    pub tensor: Tensor,
    pub smallest_dtype: DType,
}

impl RepWeight {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> RepWeight {
        let smallest_dtype = smallest_lossless_dtype(tensor.to_f32_vec());
        let tensor = tensor.retype_exact(smallest_dtype).expect("smallest dtype holds every value");
        RepWeight { name: name.into(), tensor, smallest_dtype }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RepOperand {
    /// The model input, `[batch, n_features]`.
    Input,
    /// Output of an earlier entry in the list.
    Rep(usize),
    /// Index into this entry's weights.
    Weight(usize),
}

/// One tensor operator. Lists are topologically ordered; the last entry is
/// the model output.
#[derive(Debug, Clone)]
pub struct OperatorRep {
    pub op: DlOperator,
    pub operands: Vec<RepOperand>,
    pub weights: Vec<RepWeight>,
}

enum Arg {
    X,
    Rep(usize),
    W(&'static str, Tensor),
}

#[derive(Default)]
struct Builder {
    reps: Vec<OperatorRep>,
}

impl Builder {
    fn add(&mut self, op: DlOperator, args: Vec<Arg>) -> usize {
        let mut weights = Vec::new();
        let operands = args
            .into_iter()
            .map(|a| match a {
                Arg::X => RepOperand::Input,
                Arg::Rep(r) => RepOperand::Rep(r),
                Arg::W(name, t) => {
                    weights.push(RepWeight::new(name, t));
                    RepOperand::Weight(weights.len() - 1)
                }
            })
            .collect();
        self.reps.push(OperatorRep { op, operands, weights });
        self.reps.len() - 1
    }

    fn binary(&mut self, op: BinaryOp, a: Arg, name: &'static str, w: Tensor) -> usize {
        let op = if op.is_comparison() { DlOperator::Compare(op) } else { DlOperator::Arith(op) };
        self.add(op, vec![a, Arg::W(name, w)])
    }

    fn unary(&mut self, op: DlOperator, a: usize) -> usize {
        self.add(op, vec![Arg::Rep(a)])
    }
}

fn vector(v: &[f32]) -> Tensor {
    Tensor::from_f32(&[v.len()], v.to_vec()).expect("1-D shape matches")
}

fn scalar(v: f32) -> Tensor {
    vector(&[v])
}

/// `[k, 1]` table of class labels; labels were validated to fit f32 exactly.
fn class_table(classes: &[i64]) -> Tensor {
    let v: Vec<f32> = classes.iter().map(|&c| c as f32).collect();
    Tensor::from_f32(&[v.len(), 1], v).expect("column shape matches")
}

/// First index of the maximum, the same tie rule as the argmax kernel.
fn first_argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Lowers any trained model.
pub fn convert_model(m: &TrainedModel) -> Vec<OperatorRep> {
    match &m.body {
        ModelBody::DecisionTree(t) => convert_tree(t, m.n_features),
        ModelBody::Forest(f) => convert_ensemble(f, m.kind, m.n_features),
        ModelBody::Linear(l) => convert_linear(l),
        ModelBody::Scaler(s) => convert_scaler(s),
    }
}

/// Appends one tree; returns the entry producing its `[batch, width]` rows.
fn lower_tree(b: &mut Builder, tree: &Tree, n_features: usize, payload: impl Fn(&[f32]) -> Vec<f32>) -> usize {
    if tree.n_internal() == 0 {
        let TreeNode::Leaf { value } = &tree.nodes[0] else {
            unreachable!("a tree without internal nodes is one leaf")
        };
        let row = payload(value);
        let row = Tensor::from_f32(&[1, row.len()], row).expect("row shape matches");
        return b.add(DlOperator::BroadcastRows, vec![Arg::X, Arg::W("leaf", row)]);
    }
    let tt = TreeTensors::new(tree, n_features);
    let table = tt.leaf_table(tree, payload);
    let picked = b.add(DlOperator::MatMul { out: None }, vec![Arg::X, Arg::W("w1", tt.w1)]);
    let tests = b.binary(BinaryOp::Greater, Arg::Rep(picked), "w2", tt.w2);
    let scores = b.add(DlOperator::MatMul { out: None }, vec![Arg::Rep(tests), Arg::W("w3", tt.w3)]);
    let leaf = b.unary(DlOperator::ArgMax { axis: Axis(1) }, scores);
    b.add(DlOperator::Gather, vec![Arg::W("leaf_table", table), Arg::Rep(leaf)])
}

/// matmul(X, W1) > W2, matmul(·, W3), argmax, then a gather of the reached
/// leaf's prediction.
pub fn convert_tree(t: &DecisionTree, n_features: usize) -> Vec<OperatorRep> {
    let mut b = Builder::default();
    match &t.task {
        Task::Regressor => lower_tree(&mut b, &t.tree, n_features, <[f32]>::to_vec),
        Task::Classifier { classes } => {
            lower_tree(&mut b, &t.tree, n_features, |v| vec![classes[first_argmax(v)] as f32])
        }
    };
    b.reps
}

pub fn convert_linear(l: &Linear) -> Vec<OperatorRep> {
    let mut b = Builder::default();
    let (k, nf) = (l.coef.len(), l.coef[0].len());
    let mut coef_t = vec![0f32; nf * k];
    for (r, row) in l.coef.iter().enumerate() {
        for (c, &w) in row.iter().enumerate() {
            coef_t[c * k + r] = w;
        }
    }
    let coef_t = Tensor::from_f32(&[nf, k], coef_t).expect("coef shape matches");
    let z = b.add(DlOperator::MatMul { out: None }, vec![Arg::X, Arg::W("coef", coef_t)]);
    let mut z = b.binary(BinaryOp::Add, Arg::Rep(z), "intercept", vector(&l.intercept));
    let classes = l.task.classes().unwrap_or_default();
    match l.linear_task() {
        LinearTask::Regressor => {}
        LinearTask::MultiClassifier => {
            if l.link == Link::Softmax {
                z = b.unary(DlOperator::Monotonic(vec![MonotonicFn::Softmax(Axis(1))]), z);
            }
            let idx = b.unary(DlOperator::ArgMax { axis: Axis(1) }, z);
            b.add(DlOperator::Gather, vec![Arg::W("classes", class_table(classes)), Arg::Rep(idx)]);
        }
        LinearTask::BinaryClassifier => {
            let decision = if l.link == Link::Sigmoid {
                z = b.unary(DlOperator::Monotonic(vec![MonotonicFn::Sigmoid]), z);
                0.5
            } else {
                0.0
            };
            let positive = b.binary(BinaryOp::Greater, Arg::Rep(z), "decision", scalar(decision));
            b.add(DlOperator::Gather, vec![Arg::W("classes", class_table(classes)), Arg::Rep(positive)]);
        }
    }
    b.reps
}

pub fn convert_scaler(s: &Scaler) -> Vec<OperatorRep> {
    let mut b = Builder::default();
    match s {
        Scaler::Binarizer { threshold } => {
            let c = b.binary(BinaryOp::Greater, Arg::X, "threshold", scalar(*threshold));
            b.unary(DlOperator::Cast { to: DType::Float32 }, c);
        }
        Scaler::Normalizer { norm } => {
            let n = b.add(DlOperator::RowNorm(*norm), vec![Arg::X]);
            b.add(DlOperator::Arith(BinaryOp::Div), vec![Arg::X, Arg::Rep(n)]);
        }
        Scaler::MinMax { scale, min } => {
            let m = b.binary(BinaryOp::Mul, Arg::X, "scale", vector(scale));
            b.binary(BinaryOp::Add, Arg::Rep(m), "min", vector(min));
        }
        Scaler::Robust { center, scale } => {
            let c = b.binary(BinaryOp::Sub, Arg::X, "center", vector(center));
            b.binary(BinaryOp::Div, Arg::Rep(c), "scale", vector(scale));
        }
        Scaler::Standard { mean, scale } => {
            let c = b.binary(BinaryOp::Sub, Arg::X, "mean", vector(mean));
            b.binary(BinaryOp::Div, Arg::Rep(c), "scale", vector(scale));
        }
        Scaler::MaxAbs { scale } => {
            b.binary(BinaryOp::Div, Arg::X, "scale", vector(scale));
        }
    }
    b.reps
}

/// Per-tree gathers stacked on axis 1, then aggregated.
pub fn convert_ensemble(f: &Forest, kind: ModelKind, n_features: usize) -> Vec<OperatorRep> {
    let mut b = Builder::default();
    let outs: Vec<usize> = f.trees.iter().map(|t| lower_tree(&mut b, t, n_features, <[f32]>::to_vec)).collect();
    let stacked = b.add(DlOperator::Stack { axis: Axis(1) }, outs.into_iter().map(Arg::Rep).collect());
    let classes = f.task.classes().unwrap_or_default();
    match f.aggregation {
        Aggregation::MeanProbability => {
            let mean = b.unary(DlOperator::Reduce { op: ReduceOp::Mean, axis: Axis(1) }, stacked);
            if !classes.is_empty() {
                let idx = b.unary(DlOperator::ArgMax { axis: Axis(1) }, mean);
                b.add(DlOperator::Gather, vec![Arg::W("classes", class_table(classes)), Arg::Rep(idx)]);
            }
        }
        Aggregation::Sum => {
            let sum = b.unary(DlOperator::Reduce { op: ReduceOp::Sum, axis: Axis(1) }, stacked);
            let scaled = b.binary(BinaryOp::Mul, Arg::Rep(sum), "learning_rate", scalar(f.learning_rate));
            let raw = b.binary(BinaryOp::Add, Arg::Rep(scaled), "base_score", scalar(f.base_score));
            if kind == ModelKind::GbdtBinaryClassifier {
                let p = b.unary(DlOperator::Monotonic(vec![MonotonicFn::Sigmoid]), raw);
                let positive = b.binary(BinaryOp::Greater, Arg::Rep(p), "decision", scalar(0.5));
                b.add(DlOperator::Gather, vec![Arg::W("classes", class_table(classes)), Arg::Rep(positive)]);
            }
        }
    }
    b.reps
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parse_model;

    fn ops(reps: &[OperatorRep]) -> Vec<String> {
        reps.iter().map(|r| r.op.name()).collect()
    }

    #[test]
    fn tree_lowering_shape() {
        let m = parse_model(
            r#"{"format_version":1,"model_type":"decision_tree_classifier","n_features":4,"classes":[0,1,2],
            "nodes":[{"feature":0,"threshold":0.3,"left":1,"right":2},{"leaf":[1,0,0]},
                     {"feature":1,"threshold":-1.7,"left":3,"right":4},{"leaf":[0,1,0]},{"leaf":[0,0,1]}]}"#,
        )
        .unwrap();
        let reps = convert_model(&m);
        assert_eq!(ops(&reps), ["matmul", "greater", "matmul", "argmax(axis=1)", "gather_rows"]);
        let dtypes: Vec<DType> = reps[..3].iter().map(|r| r.weights[0].smallest_dtype).collect();
        assert_eq!(dtypes, [DType::Bool, DType::Float32, DType::Bool]);
        assert_eq!(reps[4].weights[0].tensor.to_f32_vec(), vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn single_leaf_is_a_constant() {
        let m = parse_model(
            r#"{"format_version":1,"model_type":"decision_tree_regressor","n_features":2,"nodes":[{"leaf":[4.5, 1]}]}"#,
        )
        .unwrap();
        let reps = convert_model(&m);
        assert_eq!(ops(&reps), ["broadcast_rows"]);
    }

    #[test]
    fn binary_decision_constants() {
        let base = r#"{"format_version":1,"model_type":"logistic_regression","n_features":2,
            "coef":[[1,2]],"intercept":[0],"classes":[4,9]LINK}"#;
        let with = convert_model(&parse_model(&base.replace("LINK", "")).unwrap());
        assert_eq!(ops(&with), ["matmul", "add", "sigmoid", "greater", "gather_rows"]);
        assert_eq!(with[3].weights[0].tensor.to_f32_vec(), vec![0.5]);
        let without = convert_model(&parse_model(&base.replace("LINK", r#","link":"none""#)).unwrap());
        assert_eq!(ops(&without), ["matmul", "add", "greater", "gather_rows"]);
        assert_eq!(without[2].weights[0].tensor.to_f32_vec(), vec![0.0]);
    }

    #[test]
    fn topologically_ordered() {
        let m = parse_model(
            r#"{"format_version":1,"model_type":"gbdt_binary_classifier","n_features":1,"classes":[0,1],
            "aggregation":"sum","learning_rate":0.1,"base_score":0.2,
            "trees":[{"nodes":[{"leaf":[1]}]},{"nodes":[{"feature":0,"threshold":0,"left":1,"right":2},{"leaf":[-1]},{"leaf":[1]}]}]}"#,
        )
        .unwrap();
        let reps = convert_model(&m);
        for (i, r) in reps.iter().enumerate() {
            for o in &r.operands {
                match *o {
                    RepOperand::Rep(p) => assert!(p < i),
                    RepOperand::Weight(w) => assert!(w < r.weights.len()),
                    RepOperand::Input => {}
                }
            }
        }
        assert_eq!(reps.last().unwrap().op, DlOperator::Gather);
    }
}
