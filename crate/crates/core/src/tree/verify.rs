use std::collections::HashSet;

use thiserror::Error;

use super::{BPlusAnnTree, NodeBody, NodeId, TreeNode};
use crate::metric::norm;
use crate::scalar::Scalar;

/// Relative tolerance between a stored centroid and its recomputed value.
pub const CENTROID_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TreeViolation {
    #[error("node {node} holds {len} entries, capacity {cap}")]
    OverCapacity { node: NodeId, len: usize, cap: usize },

    #[error("non-root node {node} is empty")]
    EmptyNode { node: NodeId },

    #[error("leaf {leaf} at depth {depth}, expected {expected}")]
    Unbalanced {
        leaf: NodeId,
        depth: usize,
        expected: usize,
    },

    #[error("node {node} has level {level}, expected {expected}")]
    LevelMismatch { node: NodeId, level: u16, expected: u16 },

    #[error("centroid of node {node} is off by {error:.3e} (scale {scale:.3e})")]
    CentroidMismatch { node: NodeId, error: f64, scale: f64 },

    #[error("entry for child {child} in node {parent} is stale")]
    StaleEntry { parent: NodeId, child: NodeId },

    #[error("vector {id} is reachable more than once")]
    DuplicateVector { id: u64 },

    #[error("node {node} is reachable more than once")]
    SharedNode { node: NodeId },

    #[error("locator disagrees for vector {id}")]
    LocatorMismatch { id: u64 },

    #[error("tree reaches {reached} vectors, index reports {reported}")]
    CountMismatch { reached: usize, reported: usize },
}

fn l2_diff<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn check_centroid<S: Scalar>(node: &TreeNode<S>) -> Result<(), TreeViolation> {
    if node.is_empty() {
        return Ok(());
    }
    let exact = node.exact_centroid();
    let (_, norms) = node.keys();
    let member_scale = norms.iter().map(|n| n.as_f64()).sum::<f64>() / norms.len() as f64;
    let scale = norm(&exact).as_f64().max(member_scale).max(f64::MIN_POSITIVE);
    let error = l2_diff(&node.centroid, &exact);
    if error > CENTROID_TOLERANCE * scale {
        return Err(TreeViolation::CentroidMismatch {
            node: node.id,
            error,
            scale,
        });
    }
    Ok(())
}

pub(crate) fn verify_tree<S: Scalar>(tree: &BPlusAnnTree<S>) -> Result<(), TreeViolation> {
    let params = tree.params();
    let dim = tree.dim();
    let root = tree.root();
    let root_level = tree.nodes[root as usize].level;
    let mut seen_nodes = HashSet::new();
    let mut seen_vectors = HashSet::new();
    let mut stack: Vec<(NodeId, usize)> = vec![(root, 0)];
    while let Some((id, depth)) = stack.pop() {
        if !seen_nodes.insert(id) {
            return Err(TreeViolation::SharedNode { node: id });
        }
        let node = &tree.nodes[id as usize];
        let expected = root_level.saturating_sub(depth as u16);
        if node.level != expected || depth > root_level as usize {
            return Err(TreeViolation::LevelMismatch {
                node: id,
                level: node.level,
                expected,
            });
        }
        let cap = if node.is_leaf() {
            params.kappa_leaf
        } else {
            params.kappa_inner
        };
        if node.len() > cap {
            return Err(TreeViolation::OverCapacity {
                node: id,
                len: node.len(),
                cap,
            });
        }
        if node.is_empty() && id != root {
            return Err(TreeViolation::EmptyNode { node: id });
        }
        check_centroid(node)?;
        match &node.body {
            NodeBody::Leaf { ids, .. } => {
                if depth != root_level as usize {
                    return Err(TreeViolation::Unbalanced {
                        leaf: id,
                        depth,
                        expected: root_level as usize,
                    });
                }
                for (slot, &v) in ids.iter().enumerate() {
                    if !seen_vectors.insert(v) {
                        return Err(TreeViolation::DuplicateVector { id: v });
                    }
                    if tree.locate(v) != Some((id, slot as u32)) {
                        return Err(TreeViolation::LocatorMismatch { id: v });
                    }
                }
            }
            NodeBody::Inner {
                children,
                counts,
                centroids,
                ..
            } => {
                for (i, &c) in children.iter().enumerate() {
                    let child = tree
                        .nodes
                        .get(c as usize)
                        .ok_or(TreeViolation::StaleEntry { parent: id, child: c })?;
                    // A bad child key is reported as such, not as a stale copy.
                    check_centroid(child)?;
                    if counts[i] != child.total()
                        || centroids[i * dim..(i + 1) * dim] != child.centroid[..]
                        || tree.parent(c) != Some(id)
                    {
                        return Err(TreeViolation::StaleEntry { parent: id, child: c });
                    }
                    stack.push((c, depth + 1));
                }
            }
        }
    }
    if seen_vectors.len() != tree.len() {
        return Err(TreeViolation::CountMismatch {
            reached: seen_vectors.len(),
            reported: tree.len(),
        });
    }
    Ok(())
}
