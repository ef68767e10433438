use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde_json::{Map, Value};

use super::*;

pub const FORMAT_VERSION: u64 = 1;

type Obj = Map<String, Value>;

fn at(path: &str, key: &str) -> String {
    format!("{path}.{key}")
}

fn as_obj<'a>(v: &'a Value, path: &str) -> Result<&'a Obj, ModelError> {
    v.as_object().ok_or_else(|| ModelError::schema(path, "expected an object"))
}

fn field<'a>(o: &'a Obj, key: &str, path: &str) -> Result<&'a Value, ModelError> {
    o.get(key).ok_or_else(|| ModelError::schema(at(path, key), "missing field"))
}

fn as_usize(v: &Value, path: &str) -> Result<usize, ModelError> {
    v.as_u64()
        .and_then(|x| usize::try_from(x).ok())
        .ok_or_else(|| ModelError::schema(path, "expected a non-negative integer"))
}

fn as_i64(v: &Value, path: &str) -> Result<i64, ModelError> {
    v.as_i64().ok_or_else(|| ModelError::schema(path, "expected an integer"))
}

/// Parses from the literal's own text so the value is correctly rounded to f32.
fn as_f32(v: &Value, path: &str) -> Result<f32, ModelError> {
    let n = v.as_number().ok_or_else(|| ModelError::schema(path, "expected a number"))?;
    let x: f32 = n.to_string().parse().map_err(|_| ModelError::schema(path, "expected a number"))?;
    if !x.is_finite() {
        return Err(ModelError::schema(path, "number does not fit in 32-bit float"));
    }
    Ok(x)
}

fn as_str<'a>(v: &'a Value, path: &str) -> Result<&'a str, ModelError> {
    v.as_str().ok_or_else(|| ModelError::schema(path, "expected a string"))
}

fn as_arr<'a>(v: &'a Value, path: &str) -> Result<&'a Vec<Value>, ModelError> {
    v.as_array().ok_or_else(|| ModelError::schema(path, "expected an array"))
}

fn f32_vec(v: &Value, path: &str) -> Result<Vec<f32>, ModelError> {
    as_arr(v, path)?.iter().enumerate().map(|(i, x)| as_f32(x, &format!("{path}[{i}]"))).collect()
}

fn f32_field(o: &Obj, key: &str, path: &str) -> Result<Vec<f32>, ModelError> {
    f32_vec(field(o, key, path)?, &at(path, key))
}

fn parse_tree(v: &Value, path: &str) -> Result<Tree, ModelError> {
    let o = as_obj(v, path)?;
    let npath = at(path, "nodes");
    let nodes = as_arr(field(o, "nodes", path)?, &npath)?
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let p = format!("{npath}[{i}]");
            let no = as_obj(n, &p)?;
            if let Some(leaf) = no.get("leaf") {
                return Ok(TreeNode::Leaf { value: f32_vec(leaf, &at(&p, "leaf"))? });
            }
            Ok(TreeNode::Internal {
                feature: as_usize(field(no, "feature", &p)?, &at(&p, "feature"))?,
                threshold: as_f32(field(no, "threshold", &p)?, &at(&p, "threshold"))?,
                left: as_usize(field(no, "left", &p)?, &at(&p, "left"))?,
                right: as_usize(field(no, "right", &p)?, &at(&p, "right"))?,
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(Tree { nodes })
}

fn parse_task(kind: ModelKind, o: &Obj) -> Result<Task, ModelError> {
    match o.get("classes") {
        Some(v) if kind.is_classifier() => {
            let classes = as_arr(v, "$.classes")?
                .iter()
                .enumerate()
                .map(|(i, c)| as_i64(c, &format!("$.classes[{i}]")))
                .collect::<Result<_, _>>()?;
            Ok(Task::Classifier { classes })
        }
        None if kind.is_classifier() => Err(ModelError::schema("$.classes", "missing field")),
        Some(_) => Err(ModelError::invalid("$.classes", "regressor must not list classes")),
        None => Ok(Task::Regressor),
    }
}

fn opt_f32(o: &Obj, key: &str, default: f32) -> Result<f32, ModelError> {
    o.get(key).map_or(Ok(default), |v| as_f32(v, &at("$", key)))
}

/// Parses and validates a model document.
pub fn parse_model(json_text: &str) -> Result<TrainedModel, ModelError> {
    let root: Value = serde_json::from_str(json_text).map_err(|e| ModelError::schema("$", e.to_string()))?;
    let o = as_obj(&root, "$")?;
    let version = field(o, "format_version", "$")?
        .as_u64()
        .ok_or_else(|| ModelError::schema("$.format_version", "expected an integer"))?;
    if version != FORMAT_VERSION {
        return Err(ModelError::schema("$.format_version", format!("unsupported version {version}")));
    }
    let type_name = as_str(field(o, "model_type", "$")?, "$.model_type")?;
    let kind = ModelKind::from_name(type_name)
        .ok_or_else(|| ModelError::schema("$.model_type", format!("unknown model type `{type_name}`")))?;
    let n_features = as_usize(field(o, "n_features", "$")?, "$.n_features")?;

    let body = match kind.family() {
        Family::Tree => {
            let tree = parse_tree(&root, "$")?;
            ModelBody::DecisionTree(DecisionTree { tree, task: parse_task(kind, o)? })
        }
        Family::Forest => {
            let trees = as_arr(field(o, "trees", "$")?, "$.trees")?
                .iter()
                .enumerate()
                .map(|(i, t)| parse_tree(t, &format!("$.trees[{i}]")))
                .collect::<Result<_, _>>()?;
            let aggregation = match as_str(field(o, "aggregation", "$")?, "$.aggregation")? {
                "mean_probability" => Aggregation::MeanProbability,
                "sum" => Aggregation::Sum,
                other => return Err(ModelError::schema("$.aggregation", format!("unknown aggregation `{other}`"))),
            };
            ModelBody::Forest(Forest {
                trees,
                aggregation,
                learning_rate: opt_f32(o, "learning_rate", 1.0)?,
                base_score: opt_f32(o, "base_score", 0.0)?,
                task: parse_task(kind, o)?,
            })
        }
        Family::Linear => {
            let coef = as_arr(field(o, "coef", "$")?, "$.coef")?
                .iter()
                .enumerate()
                .map(|(i, r)| f32_vec(r, &format!("$.coef[{i}]")))
                .collect::<Result<Vec<_>, _>>()?;
            let intercept = f32_field(o, "intercept", "$")?;
            let task = parse_task(kind, o)?;
            let link = match o.get("link") {
                None => Linear::default_link(kind, &task, coef.len()),
                Some(v) => match as_str(v, "$.link")? {
                    "none" => Link::None,
                    "sigmoid" => Link::Sigmoid,
                    "softmax" => Link::Softmax,
                    other => return Err(ModelError::schema("$.link", format!("unknown link `{other}`"))),
                },
            };
            ModelBody::Linear(Linear { coef, intercept, task, link })
        }
        Family::Scaler => ModelBody::Scaler(match kind {
            ModelKind::Binarizer => {
                Scaler::Binarizer { threshold: as_f32(field(o, "threshold", "$")?, "$.threshold")? }
            }
            ModelKind::Normalizer => Scaler::Normalizer {
                norm: match as_str(field(o, "norm", "$")?, "$.norm")? {
                    "l1" => NormKind::L1,
                    "l2" => NormKind::L2,
                    "max" => NormKind::Max,
                    other => return Err(ModelError::schema("$.norm", format!("unknown norm `{other}`"))),
                },
            },
            ModelKind::MinMaxScaler => {
                Scaler::MinMax { scale: f32_field(o, "scale", "$")?, min: f32_field(o, "min", "$")? }
            }
            ModelKind::RobustScaler => {
                Scaler::Robust { center: f32_field(o, "center", "$")?, scale: f32_field(o, "scale", "$")? }
            }
            ModelKind::StandardScaler => {
                Scaler::Standard { mean: f32_field(o, "mean", "$")?, scale: f32_field(o, "scale", "$")? }
            }
            ModelKind::MaxAbsScaler => Scaler::MaxAbs { scale: f32_field(o, "scale", "$")? },
            _ => unreachable!("scaler family"),
        }),
    };

    let model = TrainedModel { kind, n_features, body };
    model.validate()?;
    Ok(model)
}

/// JSON value with sorted keys and exact f32 rendering.
enum Canon {
    Obj(BTreeMap<&'static str, Canon>),
    Arr(Vec<Canon>),
    F32(f32),
    Int(i64),
    Str(&'static str),
}

impl Canon {
    fn floats(v: &[f32]) -> Canon {
        Canon::Arr(v.iter().map(|&x| Canon::F32(x)).collect())
    }

    fn write(&self, out: &mut String) {
        match self {
            Canon::Obj(m) => {
                out.push('{');
                for (i, (k, v)) in m.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    let _ = write!(out, "\"{k}\":");
                    v.write(out);
                }
                out.push('}');
            }
            Canon::Arr(items) => {
                out.push('[');
                for (i, v) in items.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    v.write(out);
                }
                out.push(']');
            }
            // Debug formatting is the shortest text that parses back to the same f32.
            Canon::F32(x) => {
                let _ = write!(out, "{x:?}");
            }
            Canon::Int(x) => {
                let _ = write!(out, "{x}");
            }
            Canon::Str(s) => {
                let _ = write!(out, "\"{s}\"");
            }
        }
    }
}

fn tree_nodes(tree: &Tree) -> Canon {
    Canon::Arr(
        tree.nodes
            .iter()
            .map(|n| {
                let mut m = BTreeMap::new();
                match n {
                    TreeNode::Internal { feature, threshold, left, right } => {
                        m.insert("feature", Canon::Int(*feature as i64));
                        m.insert("threshold", Canon::F32(*threshold));
                        m.insert("left", Canon::Int(*left as i64));
                        m.insert("right", Canon::Int(*right as i64));
                    }
                    TreeNode::Leaf { value } => {
                        m.insert("leaf", Canon::floats(value));
                    }
                }
                Canon::Obj(m)
            })
            .collect(),
    )
}

fn insert_task(m: &mut BTreeMap<&'static str, Canon>, task: &Task) {
    if let Task::Classifier { classes } = task {
        m.insert("classes", Canon::Arr(classes.iter().map(|&c| Canon::Int(c)).collect()));
    }
}

/// Canonical JSON: sorted keys, no whitespace, shortest round-trip floats.
/// Structurally equal models serialize to identical text.
pub fn serialize_model(m: &TrainedModel) -> String {
    let mut root = BTreeMap::new();
    root.insert("format_version", Canon::Int(FORMAT_VERSION as i64));
    root.insert("model_type", Canon::Str(m.kind.name()));
    root.insert("n_features", Canon::Int(m.n_features as i64));
    match &m.body {
        ModelBody::DecisionTree(dt) => {
            root.insert("nodes", tree_nodes(&dt.tree));
            insert_task(&mut root, &dt.task);
        }
        ModelBody::Forest(f) => {
            let trees = f.trees.iter().map(|t| Canon::Obj(BTreeMap::from([("nodes", tree_nodes(t))]))).collect();
            root.insert("trees", Canon::Arr(trees));
            root.insert(
                "aggregation",
                Canon::Str(match f.aggregation {
                    Aggregation::MeanProbability => "mean_probability",
                    Aggregation::Sum => "sum",
                }),
            );
            root.insert("learning_rate", Canon::F32(f.learning_rate));
            root.insert("base_score", Canon::F32(f.base_score));
            insert_task(&mut root, &f.task);
        }
        ModelBody::Linear(l) => {
            root.insert("coef", Canon::Arr(l.coef.iter().map(|r| Canon::floats(r)).collect()));
            root.insert("intercept", Canon::floats(&l.intercept));
            root.insert("link", Canon::Str(l.link.name()));
            insert_task(&mut root, &l.task);
        }
        ModelBody::Scaler(s) => match s {
            Scaler::Binarizer { threshold } => {
                root.insert("threshold", Canon::F32(*threshold));
            }
            Scaler::Normalizer { norm } => {
                root.insert("norm", Canon::Str(norm.name()));
            }
            Scaler::MinMax { scale, min } => {
                root.insert("scale", Canon::floats(scale));
                root.insert("min", Canon::floats(min));
            }
            Scaler::Robust { center, scale } => {
                root.insert("center", Canon::floats(center));
                root.insert("scale", Canon::floats(scale));
            }
            Scaler::Standard { mean, scale } => {
                root.insert("mean", Canon::floats(mean));
                root.insert("scale", Canon::floats(scale));
            }
            Scaler::MaxAbs { scale } => {
                root.insert("scale", Canon::floats(scale));
            }
        },
    }
    let mut out = String::new();
    Canon::Obj(root).write(&mut out);
    out
}
