use std::collections::VecDeque;

use crate::model::{Tree, TreeNode};
use crate::tensor::{DType, Tensor};

/// The matrix encoding of one tree.
///
/// Internal nodes are numbered in level order (left child before right),
/// leaves in in-order. With `g` the 0/1 vector of node tests, the leaf
/// reached by traversal is the first maximum of `g · W3`.
#[derive(Debug, Clone)]
pub struct TreeTensors {
    /// Node-array index of each internal node, by level-order number.
    pub internal: Vec<usize>,
    /// Node-array index of each leaf, by in-order number.
    pub leaves: Vec<usize>,
    /// `N_F x N_I`, Bool: 1 where feature `i` is tested at internal node `j`.
    pub w1: Tensor,
    /// `N_I`, Float32 thresholds.
    pub w2: Tensor,
    /// `N_I x N_L`, Bool: 0 iff leaf `j` is in the left subtree of node `i`.
    pub w3: Tensor,
}

/// Internal nodes in level order.
pub fn level_order(tree: &Tree) -> Vec<usize> {
    let mut out = Vec::new();
    let mut queue = VecDeque::from([0usize]);
    while let Some(i) = queue.pop_front() {
        if let TreeNode::Internal { left, right, .. } = tree.nodes[i] {
            out.push(i);
            queue.push_back(left);
            queue.push_back(right);
        }
    }
    out
}

/// Leaves in in-order. Iterative so degenerate deep trees cannot overflow the stack.
pub fn in_order_leaves(tree: &Tree) -> Vec<usize> {
    let mut out = Vec::new();
    let mut stack = vec![0usize];
    while let Some(i) = stack.pop() {
        match tree.nodes[i] {
            TreeNode::Internal { left, right, .. } => {
                stack.push(right);
                stack.push(left);
            }
            TreeNode::Leaf { .. } => out.push(i),
        }
    }
    out
}

impl TreeTensors {
    /// Encodes a validated tree with at least one internal node.
    pub fn new(tree: &Tree, n_features: usize) -> TreeTensors {
        let internal = level_order(tree);
        let leaves = in_order_leaves(tree);
        let (ni, nl) = (internal.len(), leaves.len());

        // Leaves under any node form a contiguous run of in-order numbers.
        let mut span = vec![(0usize, 0usize); tree.nodes.len()];
        for (pos, &leaf) in leaves.iter().enumerate() {
            span[leaf] = (pos, pos + 1);
        }
        for &i in internal.iter().rev() {
            if let TreeNode::Internal { left, right, .. } = tree.nodes[i] {
                span[i] = (span[left].0, span[right].1);
            }
        }

        let mut w1 = vec![0f32; n_features * ni];
        let mut w2 = vec![0f32; ni];
        let mut w3 = vec![1f32; ni * nl];
        for (j, &node) in internal.iter().enumerate() {
            let TreeNode::Internal { feature, threshold, left, .. } = tree.nodes[node] else {
                unreachable!("level_order yields internal nodes")
            };
            w1[feature * ni + j] = 1.0;
            w2[j] = threshold;
            let (lo, hi) = span[left];
            w3[j * nl + lo..j * nl + hi].fill(0.0);
        }
        let tensor = |shape: &[usize], dtype, v: Vec<f32>| {
            Tensor::from_values(shape, dtype, &v).expect("encoding values fit their dtype")
        };
        TreeTensors {
            w1: tensor(&[n_features, ni], DType::Bool, w1),
            w2: tensor(&[ni], DType::Float32, w2),
            w3: tensor(&[ni, nl], DType::Bool, w3),
            internal,
            leaves,
        }
    }

    /// `N_L x width` table whose row `j` is `payload` of in-order leaf `j`.
    pub fn leaf_table(&self, tree: &Tree, payload: impl Fn(&[f32]) -> Vec<f32>) -> Tensor {
        let rows: Vec<Vec<f32>> = self
            .leaves
            .iter()
            .map(|&i| match &tree.nodes[i] {
                TreeNode::Leaf { value } => payload(value),
                TreeNode::Internal { .. } => unreachable!("leaves holds leaf indices"),
            })
            .collect();
        let width = rows.first().map_or(0, Vec::len);
        Tensor::from_f32(&[rows.len(), width], rows.concat()).expect("rows share a width")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn internal(feature: usize, threshold: f32, left: usize, right: usize) -> TreeNode {
        TreeNode::Internal { feature, threshold, left, right }
    }

    fn leaf(v: f32) -> TreeNode {
        TreeNode::Leaf { value: vec![v] }
    }

    fn rows(t: &Tensor) -> Vec<Vec<f32>> {
        let cols = t.shape()[1];
        t.to_f32_vec().chunks(cols).map(<[f32]>::to_vec).collect()
    }

    #[test]
    fn fixture_a_right_spine() {
        // I0 -> (L0, I1), I1 -> (L1, L2)
        let tree =
            Tree { nodes: vec![internal(0, 0.5, 1, 2), leaf(0.0), internal(1, -1.0, 3, 4), leaf(1.0), leaf(2.0)] };
        let tt = TreeTensors::new(&tree, 2);
        assert_eq!(rows(&tt.w3), vec![vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 1.0]]);
        assert_eq!(rows(&tt.w1), vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(tt.w2.to_f32_vec(), vec![0.5, -1.0]);
        assert_eq!(tt.leaves, vec![1, 3, 4]);
    }

    #[test]
    fn fixture_b_left_spine() {
        // I0 -> (I1, L2), I1 -> (L0, L1)
        let tree =
            Tree { nodes: vec![internal(0, 0.0, 1, 4), internal(1, 0.0, 2, 3), leaf(0.0), leaf(1.0), leaf(2.0)] };
        let tt = TreeTensors::new(&tree, 2);
        assert_eq!(rows(&tt.w3), vec![vec![0.0, 0.0, 1.0], vec![0.0, 1.0, 1.0]]);
    }

    #[test]
    fn level_order_visits_left_first() {
        // I0 -> (I1, I2); node ids deliberately not in level order.
        let tree = Tree {
            nodes: vec![
                internal(0, 0.0, 4, 1),
                internal(1, 0.0, 2, 3),
                leaf(0.0),
                leaf(1.0),
                internal(2, 0.0, 5, 6),
                leaf(2.0),
                leaf(3.0),
            ],
        };
        let tt = TreeTensors::new(&tree, 3);
        assert_eq!(tt.internal, vec![0, 4, 1]);
        assert_eq!(tt.leaves, vec![5, 6, 2, 3]);
        assert_eq!(rows(&tt.w3), vec![vec![0.0, 0.0, 1.0, 1.0], vec![0.0, 1.0, 1.0, 1.0], vec![1.0, 1.0, 0.0, 1.0]]);
    }
}
