//! Read access to tree nodes, shared by the in-memory tree and the disk index.

use std::collections::BTreeMap;

use crate::edges::EdgeWalk;
use crate::error::{Error, Result};
use crate::metric::Metric;
use crate::scalar::Scalar;
use crate::search::SearchStats;
use crate::tree::{BPlusAnnTree, NodeBody, NodeId, TreeNode};

/// A searchable index. Node access goes through [`NodeSource::visit`] so
/// disk-backed implementations can fault nodes in and count I/O.
pub trait NodeSource<S: Scalar>: Sync {
    fn dim(&self) -> usize;
    fn metric(&self) -> Metric;
    fn root(&self) -> NodeId;
    fn vector_count(&self) -> usize;
    fn has_edges(&self) -> bool;

    /// Runs `f` on a resident copy of node `id`, counting the access.
    fn visit<R>(&self, id: NodeId, stats: &mut SearchStats, f: impl FnOnce(&TreeNode<S>) -> R) -> Result<R>;

    /// Leaf and slot holding vector `id`.
    fn locate(&self, id: u64) -> Result<Option<(NodeId, u32)>>;

    /// Skip-edge targets of vector `id`, nearest first.
    fn edges_of(&self, id: u64, stats: &mut SearchStats) -> Result<Vec<u64>>;

    /// Parent of a leaf, if the leaf has one.
    fn leaf_parent(&self, leaf: NodeId) -> Result<Option<NodeId>>;

    /// Called after each tree level has been expanded.
    fn end_level(&self) -> Result<()> {
        Ok(())
    }
}

impl<S: Scalar> NodeSource<S> for BPlusAnnTree<S> {
    fn dim(&self) -> usize {
        BPlusAnnTree::dim(self)
    }

    fn metric(&self) -> Metric {
        BPlusAnnTree::metric(self)
    }

    fn root(&self) -> NodeId {
        BPlusAnnTree::root(self)
    }

    fn vector_count(&self) -> usize {
        self.len()
    }

    fn has_edges(&self) -> bool {
        self.graph().is_some()
    }

    fn visit<R>(&self, id: NodeId, stats: &mut SearchStats, f: impl FnOnce(&TreeNode<S>) -> R) -> Result<R> {
        let node = self
            .node(id)
            .ok_or_else(|| Error::integrity(format!("unknown node {id}")))?;
        stats.nodes_visited += 1;
        Ok(f(node))
    }

    fn locate(&self, id: u64) -> Result<Option<(NodeId, u32)>> {
        Ok(BPlusAnnTree::locate(self, id))
    }

    fn edges_of(&self, id: u64, _stats: &mut SearchStats) -> Result<Vec<u64>> {
        Ok(self.graph().map(|g| g.neighbors(id).to_vec()).unwrap_or_default())
    }

    fn leaf_parent(&self, leaf: NodeId) -> Result<Option<NodeId>> {
        Ok(self.parent(leaf))
    }
}

/// Greedy refinement over any index's own vectors and edges.
pub(crate) struct SourceWalk<'a, I>(pub &'a I);

impl<S: Scalar, I: NodeSource<S>> EdgeWalk<S> for SourceWalk<'_, I> {
    fn neighbors(&self, id: u64, stats: &mut SearchStats) -> Result<Vec<u64>> {
        self.0.edges_of(id, stats)
    }

    fn score(&self, q: &[S], q_norm: S, ids: &[u64], stats: &mut SearchStats) -> Result<Vec<S>> {
        let mut by_leaf: BTreeMap<NodeId, Vec<(usize, u32)>> = BTreeMap::new();
        for (i, &id) in ids.iter().enumerate() {
            let (leaf, slot) = self
                .0
                .locate(id)?
                .ok_or_else(|| Error::integrity(format!("edge target {id} is not in the index")))?;
            by_leaf.entry(leaf).or_default().push((i, slot));
        }
        let metric = self.0.metric();
        let mut out = vec![S::zero(); ids.len()];
        for (leaf, slots) in by_leaf {
            self.0.visit(leaf, stats, |node| {
                if let NodeBody::Leaf { norms, .. } = &node.body {
                    for &(i, slot) in &slots {
                        out[i] = metric.with_norms(q, q_norm, node.vector(slot as usize), norms[slot as usize]);
                    }
                }
            })?;
        }
        Ok(out)
    }
}
