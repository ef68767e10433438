#![allow(dead_code)]

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use tensorize::model::{
    parse_model, Aggregation, DecisionTree, Family, Forest, Linear, ModelBody, ModelKind, Scaler, Task, TrainedModel,
    Tree, TreeNode,
};
use tensorize::tensor::NormKind;

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn fixture_path(name: &str) -> PathBuf {
    fixture_dir().join(name)
}

pub fn fixture(name: &str) -> TrainedModel {
    let text = std::fs::read_to_string(fixture_path(name)).unwrap();
    parse_model(&text).unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// Every fixture, sorted by file name.
pub fn fixtures() -> Vec<(String, TrainedModel)> {
    let mut names: Vec<String> = std::fs::read_dir(fixture_dir())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".json"))
        .collect();
    names.sort();
    names.into_iter().map(|n| (n.clone(), fixture(&n))).collect()
}

pub fn kinds_of(family: Family) -> Vec<ModelKind> {
    ModelKind::ALL.iter().copied().filter(|k| k.family() == family).collect()
}

fn value(rng: &mut impl Rng) -> f32 {
    rng.gen_range(-10.0f32..10.0)
}

/// A threshold, sometimes snapped to a coarse grid so that several nodes
/// share values and boundary rows hit more than one split.
fn threshold(rng: &mut impl Rng) -> f32 {
    if rng.gen_bool(0.3) {
        (rng.gen_range(-40i32..40) as f32) * 0.25
    } else {
        value(rng)
    }
}

/// Random binary tree of depth at most `max_depth` and at most
/// `max_internal` internal nodes, root at index 0, children after parents.
pub fn random_tree(
    rng: &mut impl Rng,
    n_features: usize,
    max_depth: usize,
    max_internal: usize,
    leaf: &mut dyn FnMut(&mut dyn rand::RngCore) -> Vec<f32>,
) -> Tree {
    let mut nodes: Vec<TreeNode> = Vec::new();
    let mut internal = 0;
    // (slot, depth); slot is the index to fill.
    let mut pending = vec![(0usize, 0usize)];
    nodes.push(TreeNode::Leaf { value: vec![] });
    while let Some((slot, depth)) = pending.pop() {
        let split_p = if depth == 0 { 0.95 } else { 0.8 };
        if depth < max_depth && internal < max_internal && rng.gen_bool(split_p) {
            internal += 1;
            let left = nodes.len();
            nodes.push(TreeNode::Leaf { value: vec![] });
            nodes.push(TreeNode::Leaf { value: vec![] });
            nodes[slot] = TreeNode::Internal {
                feature: rng.gen_range(0..n_features),
                threshold: threshold(rng),
                left,
                right: left + 1,
            };
            pending.push((left + 1, depth + 1));
            pending.push((left, depth + 1));
        } else {
            nodes[slot] = TreeNode::Leaf { value: leaf(rng) };
        }
    }
    Tree { nodes }
}

fn probabilities(rng: &mut dyn rand::RngCore, k: usize) -> Vec<f32> {
    let raw: Vec<f32> = (0..k).map(|_| rng.gen_range(0.0f32..1.0)).collect();
    let s: f32 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

/// Distinct, sorted class labels, occasionally large.
pub fn classes(rng: &mut impl Rng, k: usize) -> Vec<i64> {
    let hi: usize = if rng.gen_bool(0.2) { 1 << 24 } else { 64 };
    let mut c: Vec<i64> = rand::seq::index::sample(rng, hi.max(k), k).into_iter().map(|i| i as i64).collect();
    c.sort_unstable();
    c
}

pub fn random_model(kind: ModelKind, rng: &mut impl Rng) -> TrainedModel {
    let nf = rng.gen_range(1..=12);
    let body = match kind.family() {
        Family::Tree => {
            let depth = rng.gen_range(0..=12);
            let cap = rng.gen_range(1..=255);
            let task = if kind.is_classifier() {
                {
                    let k = rng.gen_range(2..=6);
                    Task::Classifier { classes: classes(rng, k) }
                }
            } else {
                Task::Regressor
            };
            let width = match &task {
                Task::Classifier { classes } => classes.len(),
                Task::Regressor => rng.gen_range(1..=3),
            };
            let classifier = kind.is_classifier();
            let tree = random_tree(rng, nf, depth, cap, &mut |r| {
                if classifier {
                    probabilities(r, width)
                } else {
                    (0..width).map(|_| r.gen_range(-100.0f32..100.0)).collect()
                }
            });
            ModelBody::DecisionTree(DecisionTree { tree, task })
        }
        Family::Forest => {
            let n_trees = rng.gen_range(1..=20);
            let depth = rng.gen_range(0..=12);
            let cap = rng.gen_range(1..=127);
            let (task, width, aggregation) = match kind {
                ModelKind::RandomForestClassifier => {
                    let k = rng.gen_range(2..=5);
                    (Task::Classifier { classes: classes(rng, k) }, k, Aggregation::MeanProbability)
                }
                ModelKind::RandomForestRegressor => {
                    (Task::Regressor, rng.gen_range(1..=2), Aggregation::MeanProbability)
                }
                ModelKind::GbdtBinaryClassifier => (Task::Classifier { classes: classes(rng, 2) }, 1, Aggregation::Sum),
                _ => (Task::Regressor, 1, Aggregation::Sum),
            };
            let prob = aggregation == Aggregation::MeanProbability && task.classes().is_some();
            let trees = (0..n_trees)
                .map(|_| {
                    random_tree(rng, nf, depth, cap, &mut |r| {
                        if prob {
                            probabilities(r, width)
                        } else {
                            (0..width).map(|_| r.gen_range(-5.0f32..5.0)).collect()
                        }
                    })
                })
                .collect();
            let (learning_rate, base_score) = if aggregation == Aggregation::Sum {
                (rng.gen_range(0.01f32..1.0), rng.gen_range(-2.0f32..2.0))
            } else {
                (1.0, 0.0)
            };
            ModelBody::Forest(Forest { trees, aggregation, learning_rate, base_score, task })
        }
        Family::Linear => {
            let task = if kind.is_classifier() {
                {
                    let k = rng.gen_range(2..=10);
                    Task::Classifier { classes: classes(rng, k) }
                }
            } else {
                Task::Regressor
            };
            let rows = match &task {
                Task::Classifier { classes } if classes.len() == 2 => 1,
                Task::Classifier { classes } => classes.len(),
                Task::Regressor => rng.gen_range(1..=3),
            };
            let coef = (0..rows).map(|_| (0..nf).map(|_| rng.gen_range(-3.0f32..3.0)).collect()).collect();
            let intercept = (0..rows).map(|_| rng.gen_range(-3.0f32..3.0)).collect();
            let link = Linear::default_link(kind, &task, rows);
            ModelBody::Linear(Linear { coef, intercept, task, link })
        }
        Family::Scaler => {
            let nonzero = |rng: &mut dyn rand::RngCore| {
                let v = rng.gen_range(0.05f32..20.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            };
            let vec = |rng: &mut dyn rand::RngCore, f: &dyn Fn(&mut dyn rand::RngCore) -> f32| {
                (0..nf).map(|_| f(rng)).collect::<Vec<f32>>()
            };
            let any = |rng: &mut dyn rand::RngCore| rng.gen_range(-10.0f32..10.0);
            let positive = |rng: &mut dyn rand::RngCore| rng.gen_range(0.05f32..20.0);
            ModelBody::Scaler(match kind {
                ModelKind::Binarizer => Scaler::Binarizer { threshold: threshold(rng) },
                ModelKind::Normalizer => {
                    Scaler::Normalizer { norm: *[NormKind::L1, NormKind::L2, NormKind::Max].choose(rng).unwrap() }
                }
                ModelKind::MinMaxScaler => Scaler::MinMax { scale: vec(rng, &nonzero), min: vec(rng, &any) },
                ModelKind::RobustScaler => Scaler::Robust { center: vec(rng, &any), scale: vec(rng, &positive) },
                ModelKind::StandardScaler => Scaler::Standard { mean: vec(rng, &any), scale: vec(rng, &positive) },
                _ => Scaler::MaxAbs { scale: vec(rng, &positive) },
            })
        }
    };
    let m = TrainedModel { kind, n_features: nf, body };
    m.validate().unwrap_or_else(|e| panic!("generated {kind} is invalid: {e}"));
    m
}
