//! Trained-model descriptions and their JSON interchange format.

mod json;

pub use json::{parse_model, serialize_model};

use std::collections::HashSet;
use std::fmt;

use thiserror::Error;

use crate::tensor::NormKind;

/// Largest class label magnitude that survives a round trip through f32.
pub const MAX_CLASS_LABEL: i64 = 1 << 24;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("schema error at {path}: {msg}")]
    Schema { path: String, msg: String },
    #[error("validation error at {path}: {msg}")]
    Validation { path: String, msg: String },
}

impl ModelError {
    pub fn path(&self) -> &str {
        match self {
            ModelError::Schema { path, .. } | ModelError::Validation { path, .. } => path,
        }
    }

    pub(crate) fn schema(path: impl Into<String>, msg: impl Into<String>) -> Self {
        ModelError::Schema { path: path.into(), msg: msg.into() }
    }

    pub(crate) fn invalid(path: impl Into<String>, msg: impl Into<String>) -> Self {
        ModelError::Validation { path: path.into(), msg: msg.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Tree,
    Forest,
    Linear,
    Scaler,
}

macro_rules! model_kinds {
    ($($variant:ident => $name:literal, $family:ident;)*) => {
        /// The `model_type` discriminator.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum ModelKind {
            $($variant,)*
        }

        impl ModelKind {
            pub const ALL: &'static [ModelKind] = &[$(ModelKind::$variant,)*];

            pub fn name(self) -> &'static str {
                match self {
                    $(ModelKind::$variant => $name,)*
                }
            }

            pub fn family(self) -> Family {
                match self {
                    $(ModelKind::$variant => Family::$family,)*
                }
            }
        }
    };
}

model_kinds! {
    DecisionTreeClassifier => "decision_tree_classifier", Tree;
    DecisionTreeRegressor => "decision_tree_regressor", Tree;
    RandomForestClassifier => "random_forest_classifier", Forest;
    RandomForestRegressor => "random_forest_regressor", Forest;
    GbdtRegressor => "gbdt_regressor", Forest;
    GbdtBinaryClassifier => "gbdt_binary_classifier", Forest;
    LinearRegression => "linear_regression", Linear;
    Ridge => "ridge", Linear;
    SgdRegressor => "sgd_regressor", Linear;
    LinearSvr => "linear_svr", Linear;
    LogisticRegression => "logistic_regression", Linear;
    LinearSvc => "linear_svc", Linear;
    SgdClassifier => "sgd_classifier", Linear;
    RidgeClassifier => "ridge_classifier", Linear;
    Perceptron => "perceptron", Linear;
    Binarizer => "binarizer", Scaler;
    Normalizer => "normalizer", Scaler;
    MinMaxScaler => "minmax_scaler", Scaler;
    RobustScaler => "robust_scaler", Scaler;
    StandardScaler => "standard_scaler", Scaler;
    MaxAbsScaler => "maxabs_scaler", Scaler;
}

impl ModelKind {
    /// Resolves a `model_type` string. Extra-trees variants differ from their
    /// plain counterparts only in training, so they resolve to the same kind.
    pub fn from_name(name: &str) -> Option<ModelKind> {
        let canonical = match name {
            "extra_tree_classifier" => "decision_tree_classifier",
            "extra_tree_regressor" => "decision_tree_regressor",
            "extra_trees_classifier" => "random_forest_classifier",
            "extra_trees_regressor" => "random_forest_regressor",
            other => other,
        };
        ModelKind::ALL.iter().copied().find(|k| k.name() == canonical)
    }

    pub fn is_classifier(self) -> bool {
        matches!(
            self,
            ModelKind::DecisionTreeClassifier
                | ModelKind::RandomForestClassifier
                | ModelKind::GbdtBinaryClassifier
                | ModelKind::LogisticRegression
                | ModelKind::LinearSvc
                | ModelKind::SgdClassifier
                | ModelKind::RidgeClassifier
                | ModelKind::Perceptron
        )
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    /// Samples with `x[feature] > threshold` go right, all others left.
    Internal {
        feature: usize,
        threshold: f32,
        left: usize,
        right: usize,
    },
    Leaf {
        value: Vec<f32>,
    },
}

/// A binary tree stored as a node array; the root is node 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn n_internal(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, TreeNode::Internal { .. })).count()
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.len() - self.n_internal()
    }

    /// Length of the leaf payloads (0 for a tree without leaves, which
    /// validation rejects).
    pub fn leaf_width(&self) -> usize {
        self.nodes
            .iter()
            .find_map(|n| match n {
                TreeNode::Leaf { value } => Some(value.len()),
                _ => None,
            })
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Task {
    Regressor,
    Classifier { classes: Vec<i64> },
}

impl Task {
    pub fn classes(&self) -> Option<&[i64]> {
        match self {
            Task::Regressor => None,
            Task::Classifier { classes } => Some(classes),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    pub tree: Tree,
    pub task: Task,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    /// Average the per-tree leaf vectors.
    MeanProbability,
    /// `base_score + learning_rate * sum` of the per-tree leaf values.
    Sum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    pub trees: Vec<Tree>,
    pub aggregation: Aggregation,
    pub learning_rate: f32,
    pub base_score: f32,
    pub task: Task,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    None,
    Sigmoid,
    Softmax,
}

impl Link {
    pub fn name(self) -> &'static str {
        match self {
            Link::None => "none",
            Link::Sigmoid => "sigmoid",
            Link::Softmax => "softmax",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearTask {
    Regressor,
    BinaryClassifier,
    MultiClassifier,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `n_outputs x n_features`.
    pub coef: Vec<Vec<f32>>,
    pub intercept: Vec<f32>,
    pub task: Task,
    pub link: Link,
}

impl Linear {
    pub fn linear_task(&self) -> LinearTask {
        match &self.task {
            Task::Regressor => LinearTask::Regressor,
            Task::Classifier { classes } if classes.len() == 2 && self.coef.len() == 1 => LinearTask::BinaryClassifier,
            Task::Classifier { .. } => LinearTask::MultiClassifier,
        }
    }

    /// Link used when the JSON does not name one.
    pub fn default_link(kind: ModelKind, task: &Task, n_rows: usize) -> Link {
        match (kind, task) {
            (ModelKind::LogisticRegression, Task::Classifier { classes }) => {
                if classes.len() == 2 && n_rows == 1 {
                    Link::Sigmoid
                } else {
                    Link::Softmax
                }
            }
            _ => Link::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Scaler {
    /// `x > threshold` maps to 1.0, everything else to 0.0.
    Binarizer {
        threshold: f32,
    },
    Normalizer {
        norm: NormKind,
    },
    /// `x * scale + min`.
    MinMax {
        scale: Vec<f32>,
        min: Vec<f32>,
    },
    /// `(x - center) / scale`.
    Robust {
        center: Vec<f32>,
        scale: Vec<f32>,
    },
    /// `(x - mean) / scale`.
    Standard {
        mean: Vec<f32>,
        scale: Vec<f32>,
    },
    /// `x / scale`.
    MaxAbs {
        scale: Vec<f32>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelBody {
    DecisionTree(DecisionTree),
    Forest(Forest),
    Linear(Linear),
    Scaler(Scaler),
}

/// A parsed and validated model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub kind: ModelKind,
    pub n_features: usize,
    pub body: ModelBody,
}

impl TrainedModel {
    /// Validates every structural invariant, reporting the JSON path at fault.
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_features == 0 {
            return Err(ModelError::invalid("$.n_features", "must be at least 1"));
        }
        let family = match &self.body {
            ModelBody::DecisionTree(_) => Family::Tree,
            ModelBody::Forest(_) => Family::Forest,
            ModelBody::Linear(_) => Family::Linear,
            ModelBody::Scaler(_) => Family::Scaler,
        };
        if family != self.kind.family() {
            return Err(ModelError::invalid("$.model_type", format!("{} does not match the model body", self.kind)));
        }
        let nf = self.n_features;
        match &self.body {
            ModelBody::DecisionTree(dt) => {
                validate_task(self.kind, &dt.task, "$")?;
                let width = validate_tree(&dt.tree, nf, "$.nodes")?;
                check_leaf_width(&dt.task, width, "$.nodes")?;
            }
            ModelBody::Forest(f) => validate_forest(self.kind, f, nf)?,
            ModelBody::Linear(l) => validate_linear(self.kind, l, nf)?,
            ModelBody::Scaler(s) => validate_scaler(self.kind, s, nf)?,
        }
        Ok(())
    }
}

fn validate_task(kind: ModelKind, task: &Task, path: &str) -> Result<(), ModelError> {
    match (kind.is_classifier(), task) {
        (true, Task::Classifier { classes }) => validate_classes(classes, &format!("{path}.classes")),
        (false, Task::Regressor) => Ok(()),
        (true, Task::Regressor) => Err(ModelError::invalid(format!("{path}.classes"), "classifier needs classes")),
        (false, Task::Classifier { .. }) => {
            Err(ModelError::invalid(format!("{path}.classes"), "regressor must not list classes"))
        }
    }
}

fn validate_classes(classes: &[i64], path: &str) -> Result<(), ModelError> {
    if classes.is_empty() {
        return Err(ModelError::invalid(path, "class list is empty"));
    }
    let mut seen = HashSet::new();
    for (i, &c) in classes.iter().enumerate() {
        if c.abs() > MAX_CLASS_LABEL {
            return Err(ModelError::invalid(format!("{path}[{i}]"), "class label exceeds 2^24"));
        }
        if !seen.insert(c) {
            return Err(ModelError::invalid(format!("{path}[{i}]"), format!("duplicate class {c}")));
        }
    }
    Ok(())
}

fn check_finite(values: &[f32], path: &str) -> Result<(), ModelError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(ModelError::invalid(format!("{path}[{i}]"), "value is not finite")),
        None => Ok(()),
    }
}

fn check_len(values: &[f32], n: usize, path: &str) -> Result<(), ModelError> {
    if values.len() != n {
        return Err(ModelError::invalid(path, format!("expected {n} entries, found {}", values.len())));
    }
    check_finite(values, path)
}

/// Checks a tree and returns its common leaf width.
fn validate_tree(tree: &Tree, n_features: usize, path: &str) -> Result<usize, ModelError> {
    let n = tree.nodes.len();
    if n == 0 {
        return Err(ModelError::invalid(path, "tree has no nodes"));
    }
    let mut parent: Vec<Option<usize>> = vec![None; n];
    let mut width = None;
    for (i, node) in tree.nodes.iter().enumerate() {
        let np = format!("{path}[{i}]");
        match node {
            TreeNode::Internal { feature, threshold, left, right } => {
                if *feature >= n_features {
                    return Err(ModelError::invalid(
                        format!("{np}.feature"),
                        format!("feature {feature} out of range for {n_features} features"),
                    ));
                }
                if !threshold.is_finite() {
                    return Err(ModelError::invalid(format!("{np}.threshold"), "threshold is not finite"));
                }
                for (field, child) in [("left", *left), ("right", *right)] {
                    let cp = format!("{np}.{field}");
                    if child >= n {
                        return Err(ModelError::invalid(cp, format!("node {child} does not exist")));
                    }
                    if child == 0 {
                        return Err(ModelError::invalid(cp, "the root cannot be a child"));
                    }
                    if let Some(p) = parent[child] {
                        return Err(ModelError::invalid(cp, format!("node {child} already has parent {p}")));
                    }
                    parent[child] = Some(i);
                }
            }
            TreeNode::Leaf { value } => {
                let lp = format!("{np}.leaf");
                if value.is_empty() {
                    return Err(ModelError::invalid(lp, "leaf value is empty"));
                }
                check_finite(value, &lp)?;
                match width {
                    None => width = Some(value.len()),
                    Some(w) if w != value.len() => {
                        return Err(ModelError::invalid(
                            lp,
                            format!("leaf has {} outputs, other leaves have {w}", value.len()),
                        ))
                    }
                    _ => {}
                }
            }
        }
    }
    // Every non-root node has exactly one parent; walking from the root must
    // reach all of them, otherwise some component is a detached cycle.
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    while let Some(i) = stack.pop() {
        seen[i] = true;
        if let TreeNode::Internal { left, right, .. } = tree.nodes[i] {
            stack.push(left);
            stack.push(right);
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(ModelError::invalid(format!("{path}[{i}]"), "node is not reachable from the root"));
    }
    width.ok_or_else(|| ModelError::invalid(path, "tree has no leaves"))
}

fn check_leaf_width(task: &Task, width: usize, path: &str) -> Result<(), ModelError> {
    if let Task::Classifier { classes } = task {
        if width != classes.len() {
            return Err(ModelError::invalid(
                path,
                format!("leaves have {width} entries but there are {} classes", classes.len()),
            ));
        }
    }
    Ok(())
}

fn validate_forest(kind: ModelKind, f: &Forest, nf: usize) -> Result<(), ModelError> {
    validate_task(kind, &f.task, "$")?;
    if f.trees.is_empty() {
        return Err(ModelError::invalid("$.trees", "forest has no trees"));
    }
    let expected = match kind {
        ModelKind::GbdtRegressor | ModelKind::GbdtBinaryClassifier => Aggregation::Sum,
        _ => Aggregation::MeanProbability,
    };
    if f.aggregation != expected {
        return Err(ModelError::invalid("$.aggregation", format!("{kind} requires {expected:?} aggregation")));
    }
    if !f.learning_rate.is_finite() || !f.base_score.is_finite() {
        return Err(ModelError::invalid("$.learning_rate", "learning_rate and base_score must be finite"));
    }
    if f.aggregation == Aggregation::MeanProbability && (f.learning_rate != 1.0 || f.base_score != 0.0) {
        return Err(ModelError::invalid("$.learning_rate", "learning_rate/base_score only apply to sum aggregation"));
    }
    let mut width = None;
    for (t, tree) in f.trees.iter().enumerate() {
        let path = format!("$.trees[{t}].nodes");
        let w = validate_tree(tree, nf, &path)?;
        match width {
            None => width = Some(w),
            Some(prev) if prev != w => {
                return Err(ModelError::invalid(path, format!("tree has {w} outputs, tree 0 has {prev}")))
            }
            _ => {}
        }
    }
    let width = width.unwrap();
    match kind {
        ModelKind::GbdtRegressor | ModelKind::GbdtBinaryClassifier => {
            if width != 1 {
                return Err(ModelError::invalid("$.trees", "gradient boosting leaves must be scalar"));
            }
            // The class list of a boosted binary classifier only names the two outcomes.
            if kind == ModelKind::GbdtBinaryClassifier && f.task.classes().map(<[i64]>::len) != Some(2) {
                return Err(ModelError::invalid("$.classes", "binary classifier needs exactly 2 classes"));
            }
        }
        _ => check_leaf_width(&f.task, width, "$.trees")?,
    }
    Ok(())
}

fn validate_linear(kind: ModelKind, l: &Linear, nf: usize) -> Result<(), ModelError> {
    validate_task(kind, &l.task, "$")?;
    if l.coef.is_empty() {
        return Err(ModelError::invalid("$.coef", "coef has no rows"));
    }
    for (r, row) in l.coef.iter().enumerate() {
        check_len(row, nf, &format!("$.coef[{r}]"))?;
    }
    check_len(&l.intercept, l.coef.len(), "$.intercept")?;
    if let Task::Classifier { classes } = &l.task {
        let binary = classes.len() == 2 && l.coef.len() == 1;
        if !binary && (classes.len() < 2 || l.coef.len() != classes.len()) {
            return Err(ModelError::invalid(
                "$.coef",
                format!("{} coef rows do not fit {} classes", l.coef.len(), classes.len()),
            ));
        }
    }
    let ok = matches!(
        (l.linear_task(), l.link),
        (_, Link::None) | (LinearTask::BinaryClassifier, Link::Sigmoid) | (LinearTask::MultiClassifier, Link::Softmax)
    );
    if !ok {
        return Err(ModelError::invalid("$.link", format!("link {} does not fit this model", l.link.name())));
    }
    Ok(())
}

fn validate_scaler(kind: ModelKind, s: &Scaler, nf: usize) -> Result<(), ModelError> {
    let nonzero = |v: &[f32], path: &str| match v.iter().position(|&x| x == 0.0) {
        Some(i) => Err(ModelError::invalid(format!("{path}[{i}]"), "scale must be non-zero")),
        None => Ok(()),
    };
    let expected = match s {
        Scaler::Binarizer { threshold } => {
            check_finite(&[*threshold], "$.threshold")?;
            ModelKind::Binarizer
        }
        Scaler::Normalizer { .. } => ModelKind::Normalizer,
        Scaler::MinMax { scale, min } => {
            check_len(scale, nf, "$.scale")?;
            check_len(min, nf, "$.min")?;
            ModelKind::MinMaxScaler
        }
        Scaler::Robust { center, scale } => {
            check_len(center, nf, "$.center")?;
            check_len(scale, nf, "$.scale")?;
            nonzero(scale, "$.scale")?;
            ModelKind::RobustScaler
        }
        Scaler::Standard { mean, scale } => {
            check_len(mean, nf, "$.mean")?;
            check_len(scale, nf, "$.scale")?;
            nonzero(scale, "$.scale")?;
            ModelKind::StandardScaler
        }
        Scaler::MaxAbs { scale } => {
            check_len(scale, nf, "$.scale")?;
            nonzero(scale, "$.scale")?;
            ModelKind::MaxAbsScaler
        }
    };
    if expected != kind {
        return Err(ModelError::invalid("$.model_type", format!("{kind} does not match the scaler parameters")));
    }
    Ok(())
}
