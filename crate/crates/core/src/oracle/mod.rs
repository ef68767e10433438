//! Direct scalar evaluation of trained models: tree traversal, dot products
//! and per-element arithmetic. Nothing here calls the tensor kernels, so
//! agreement with compiled graphs is independent evidence.
//!
//! Floating-point operations happen in the same order as in the compiled
//! graphs (sequential f32 sums from zero, `1 / (1 + e^-x)` for the
//! logistic function), which makes exact comparison meaningful.

use thiserror::Error;

use crate::model::{
    Aggregation, Linear, LinearTask, Link, ModelBody, ModelKind, Scaler, Task, TrainedModel, Tree, TreeNode,
};
use crate::tensor::{DType, NormKind, Tensor};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OracleError {
    #[error("model expects {expected} features, input has {found}")]
    FeatureMismatch { expected: usize, found: usize },
    #[error("input must be a rank-2 float32 matrix")]
    BadInput,
}

/// One output vector per sample.
#[derive(Debug, Clone, PartialEq)]
pub enum OraclePrediction {
    Classes(Vec<i64>),
    Values { width: usize, values: Vec<f32> },
}

impl OraclePrediction {
    pub fn len(&self) -> usize {
        match self {
            OraclePrediction::Classes(c) => c.len(),
            OraclePrediction::Values { width, values } => values.len().checked_div(*width).unwrap_or(0),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major flat values, class ids widened to f64.
    pub fn flat(&self) -> Vec<f64> {
        match self {
            OraclePrediction::Classes(c) => c.iter().map(|&v| v as f64).collect(),
            OraclePrediction::Values { values, .. } => values.iter().map(|&v| v as f64).collect(),
        }
    }
}

fn logistic(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Index of the first maximum.
fn first_max(v: &[f32]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Leaf payload reached from the root; goes right iff `x[feature] > threshold`.
pub fn traverse<'t>(tree: &'t Tree, x: &[f32]) -> &'t [f32] {
    let mut i = 0;
    loop {
        match &tree.nodes[i] {
            TreeNode::Internal { feature, threshold, left, right } => {
                i = if x[*feature] > *threshold { *right } else { *left };
            }
            TreeNode::Leaf { value } => return value,
        }
    }
}

fn dot(x: &[f32], w: &[f32]) -> f32 {
    let mut s = 0f32;
    for (a, b) in x.iter().zip(w) {
        s += a * b;
    }
    s
}

enum Out {
    Class(i64),
    Values(Vec<f32>),
}

fn predict_row(m: &TrainedModel, x: &[f32]) -> Out {
    match &m.body {
        ModelBody::DecisionTree(dt) => {
            let leaf = traverse(&dt.tree, x);
            match &dt.task {
                Task::Classifier { classes } => Out::Class(classes[first_max(leaf)]),
                Task::Regressor => Out::Values(leaf.to_vec()),
            }
        }
        ModelBody::Forest(f) => {
            let width = f.trees[0].leaf_width();
            let mut acc = vec![0f32; width];
            for t in &f.trees {
                for (a, v) in acc.iter_mut().zip(traverse(t, x)) {
                    *a += v;
                }
            }
            match f.aggregation {
                Aggregation::MeanProbability => {
                    let n = f.trees.len() as f32;
                    let mean: Vec<f32> = acc.iter().map(|s| s / n).collect();
                    match &f.task {
                        Task::Classifier { classes } => Out::Class(classes[first_max(&mean)]),
                        Task::Regressor => Out::Values(mean),
                    }
                }
                Aggregation::Sum => {
                    let raw = acc[0] * f.learning_rate + f.base_score;
                    match (&f.task, m.kind) {
                        (Task::Classifier { classes }, ModelKind::GbdtBinaryClassifier) => {
                            Out::Class(classes[usize::from(logistic(raw) > 0.5)])
                        }
                        _ => Out::Values(vec![raw]),
                    }
                }
            }
        }
        ModelBody::Linear(l) => predict_linear(l, x),
        ModelBody::Scaler(s) => Out::Values(scale_row(s, x)),
    }
}

fn predict_linear(l: &Linear, x: &[f32]) -> Out {
    let z: Vec<f32> = l.coef.iter().zip(&l.intercept).map(|(w, b)| dot(x, w) + b).collect();
    let classes = l.task.classes().unwrap_or_default();
    match l.linear_task() {
        LinearTask::Regressor => Out::Values(z),
        // The largest decision value is also the most probable class.
        LinearTask::MultiClassifier => Out::Class(classes[first_max(&z)]),
        LinearTask::BinaryClassifier => {
            let positive = match l.link {
                Link::Sigmoid => logistic(z[0]) > 0.5,
                _ => z[0] > 0.0,
            };
            Out::Class(classes[usize::from(positive)])
        }
    }
}

fn scale_row(s: &Scaler, x: &[f32]) -> Vec<f32> {
    match s {
        Scaler::Binarizer { threshold } => x.iter().map(|&v| if v > *threshold { 1.0 } else { 0.0 }).collect(),
        Scaler::Normalizer { norm } => {
            let mut n = 0f32;
            for &v in x {
                n = match norm {
                    NormKind::L1 => n + v.abs(),
                    NormKind::L2 => n + v * v,
                    NormKind::Max => n.max(v.abs()),
                };
            }
            if *norm == NormKind::L2 {
                n = n.sqrt();
            }
            let n = if n == 0.0 { 1.0 } else { n };
            x.iter().map(|v| v / n).collect()
        }
        Scaler::MinMax { scale, min } => x.iter().zip(scale).zip(min).map(|((v, s), m)| v * s + m).collect(),
        Scaler::Robust { center, scale } => x.iter().zip(center).zip(scale).map(|((v, c), s)| (v - c) / s).collect(),
        Scaler::Standard { mean, scale } => x.iter().zip(mean).zip(scale).map(|((v, c), s)| (v - c) / s).collect(),
        Scaler::MaxAbs { scale } => x.iter().zip(scale).map(|(v, s)| v / s).collect(),
    }
}

/// Predicts from a row-major `rows x n_features` buffer.
pub fn oracle_predict_rows(m: &TrainedModel, values: &[f32], n_cols: usize) -> Result<OraclePrediction, OracleError> {
    if n_cols != m.n_features {
        return Err(OracleError::FeatureMismatch { expected: m.n_features, found: n_cols });
    }
    let mut classes = Vec::new();
    let mut out = Vec::new();
    let mut width = 0;
    for row in values.chunks(n_cols.max(1)) {
        match predict_row(m, row) {
            Out::Class(c) => classes.push(c),
            Out::Values(v) => {
                width = v.len();
                out.extend(v);
            }
        }
    }
    let classifier = match &m.body {
        ModelBody::DecisionTree(t) => t.task.classes().is_some(),
        ModelBody::Forest(f) => f.task.classes().is_some(),
        ModelBody::Linear(l) => l.task.classes().is_some(),
        ModelBody::Scaler(_) => false,
    };
    Ok(if classifier { OraclePrediction::Classes(classes) } else { OraclePrediction::Values { width, values: out } })
}

pub fn oracle_predict(m: &TrainedModel, x: &Tensor) -> Result<OraclePrediction, OracleError> {
    if x.rank() != 2 || x.dtype() != DType::Float32 {
        return Err(OracleError::BadInput);
    }
    oracle_predict_rows(m, &x.to_f32_vec(), x.shape()[1])
}

/// Largest disagreement between two prediction sets.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Divergence {
    pub max_abs: f64,
    /// `|a - b| / max(|a|, |b|)` over unequal pairs.
    pub max_rel: f64,
    pub mismatches: usize,
    pub compared: usize,
}

impl Divergence {
    pub fn passed(&self) -> bool {
        self.mismatches == 0
    }
}

/// Relative tolerance for float outputs; class ids must match exactly.
pub const REL_TOLERANCE: f64 = 1e-5;

/// Compares the oracle against a compiled output tensor.
pub fn compare(expected: &OraclePrediction, got: &Tensor) -> Divergence {
    let exact = matches!(expected, OraclePrediction::Classes(_));
    compare_flat(&expected.flat(), &got.to_f64_vec(), exact)
}

/// Element-wise comparison: equal, or within [`REL_TOLERANCE`] relative
/// when `exact` is false. A length difference counts every missing element.
pub fn compare_flat(a: &[f64], b: &[f64], exact: bool) -> Divergence {
    let mut d = Divergence { compared: a.len().max(b.len()), ..Default::default() };
    d.mismatches = a.len().abs_diff(b.len());
    for (&x, &y) in a.iter().zip(b) {
        if x == y {
            continue;
        }
        let abs = (x - y).abs();
        let rel = abs / x.abs().max(y.abs());
        d.max_abs = d.max_abs.max(abs);
        d.max_rel = d.max_rel.max(rel);
        if exact || rel.is_nan() || rel > REL_TOLERANCE {
            d.mismatches += 1;
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parse_model;

    #[test]
    fn boundary_goes_left() {
        let m = parse_model(
            r#"{"format_version":1,"model_type":"decision_tree_regressor","n_features":1,
            "nodes":[{"feature":0,"threshold":0.5,"left":1,"right":2},{"leaf":[1]},{"leaf":[2]}]}"#,
        )
        .unwrap();
        let p = oracle_predict_rows(&m, &[0.5, 0.50000006, 0.4], 1).unwrap();
        assert_eq!(p, OraclePrediction::Values { width: 1, values: vec![1.0, 2.0, 1.0] });
    }

    #[test]
    fn identity_logistic_picks_the_hot_feature() {
        let m = parse_model(
            r#"{"format_version":1,"model_type":"logistic_regression","n_features":3,
            "coef":[[1,0,0],[0,1,0],[0,0,1]],"intercept":[0,0,0],"classes":[10,20,30]}"#,
        )
        .unwrap();
        let x = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(oracle_predict_rows(&m, &x, 3).unwrap(), OraclePrediction::Classes(vec![10, 20, 30]));
    }

    #[test]
    fn two_tree_average() {
        let m = parse_model(
            r#"{"format_version":1,"model_type":"random_forest_classifier","n_features":1,"classes":[0,1],
            "aggregation":"mean_probability",
            "trees":[{"nodes":[{"leaf":[0.2,0.8]}]},{"nodes":[{"leaf":[0.6,0.4]}]}]}"#,
        )
        .unwrap();
        assert_eq!(oracle_predict_rows(&m, &[0.0], 1).unwrap(), OraclePrediction::Classes(vec![1]));
    }

    #[test]
    fn feature_mismatch() {
        let m = parse_model(r#"{"format_version":1,"model_type":"binarizer","n_features":2,"threshold":0}"#).unwrap();
        assert_eq!(
            oracle_predict_rows(&m, &[1.0; 3], 3).unwrap_err(),
            OracleError::FeatureMismatch { expected: 2, found: 3 }
        );
        assert_eq!(
            oracle_predict_rows(&m, &[-1.0, 0.5, 2.0, -3.0], 2).unwrap(),
            OraclePrediction::Values { width: 2, values: vec![0.0, 1.0, 1.0, 0.0] }
        );
    }

    #[test]
    fn comparison_rules() {
        assert!(compare_flat(&[1.0, 2.0], &[1.0, 2.0], true).passed());
        assert!(!compare_flat(&[1.0], &[1.0 + 1e-9], true).passed());
        assert!(compare_flat(&[1.0], &[1.0 + 1e-6], false).passed());
        assert!(!compare_flat(&[1.0], &[1.0 + 1e-4], false).passed());
        assert!(!compare_flat(&[0.0], &[1e-30], false).passed());
        assert!(!compare_flat(&[1.0], &[], false).passed());
    }
}
