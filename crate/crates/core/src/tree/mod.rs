//! The clustered B+ tree: centroid keys in inner nodes, vector blocks in
//! leaves, all leaves on one level.

mod ops;
mod verify;

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::cluster::ClusterNode;
use crate::edges::SkipEdgeGraph;
use crate::error::{Error, Result};
use crate::metric::{norm, Metric};
use crate::scalar::Scalar;
use crate::vectors::VectorSet;

pub use ops::InsertReport;
pub(crate) use ops::{insert_vector, NodeStoreMut};
pub use verify::TreeViolation;

pub type NodeId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Inner,
    Leaf,
}

impl NodeKind {
    pub fn code(self) -> u8 {
        match self {
            NodeKind::Inner => 0,
            NodeKind::Leaf => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(NodeKind::Inner),
            1 => Some(NodeKind::Leaf),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeBody<S> {
    Inner {
        children: Vec<NodeId>,
        /// Vectors under each child.
        counts: Vec<u64>,
        /// Row-major copy of each child's centroid.
        centroids: Vec<S>,
        norms: Vec<S>,
    },
    Leaf {
        ids: Vec<u64>,
        vectors: Vec<S>,
        norms: Vec<S>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode<S> {
    pub id: NodeId,
    /// Height above the leaf level; leaves are level 0.
    pub level: u16,
    pub centroid: Vec<S>,
    pub body: NodeBody<S>,
}

impl<S: Scalar> TreeNode<S> {
    pub fn empty_leaf(id: NodeId, dim: usize) -> Self {
        TreeNode {
            id,
            level: 0,
            centroid: vec![S::zero(); dim],
            body: NodeBody::Leaf {
                ids: Vec::new(),
                vectors: Vec::new(),
                norms: Vec::new(),
            },
        }
    }

    pub fn kind(&self) -> NodeKind {
        match self.body {
            NodeBody::Inner { .. } => NodeKind::Inner,
            NodeBody::Leaf { .. } => NodeKind::Leaf,
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.body, NodeBody::Leaf { .. })
    }

    /// Entry count: children for inner nodes, vectors for leaves.
    pub fn len(&self) -> usize {
        match &self.body {
            NodeBody::Inner { children, .. } => children.len(),
            NodeBody::Leaf { ids, .. } => ids.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of vectors stored under this node.
    pub fn total(&self) -> u64 {
        match &self.body {
            NodeBody::Inner { counts, .. } => counts.iter().sum(),
            NodeBody::Leaf { ids, .. } => ids.len() as u64,
        }
    }

    /// Entry keys as a row-major block with their norms: vectors for leaves,
    /// child centroids for inner nodes.
    pub fn keys(&self) -> (&[S], &[S]) {
        match &self.body {
            NodeBody::Inner { centroids, norms, .. } => (centroids, norms),
            NodeBody::Leaf { vectors, norms, .. } => (vectors, norms),
        }
    }

    pub fn leaf_ids(&self) -> &[u64] {
        match &self.body {
            NodeBody::Leaf { ids, .. } => ids,
            NodeBody::Inner { .. } => &[],
        }
    }

    pub fn children(&self) -> &[NodeId] {
        match &self.body {
            NodeBody::Inner { children, .. } => children,
            NodeBody::Leaf { .. } => &[],
        }
    }

    pub fn vector(&self, slot: usize) -> &[S] {
        let dim = self.centroid.len();
        &self.keys().0[slot * dim..(slot + 1) * dim]
    }

    /// Recomputes the centroid from entries: the vector mean for leaves, the
    /// count-weighted mean of child centroids for inner nodes (which equals the
    /// mean of all descendant vectors).
    pub fn exact_centroid(&self) -> Vec<S> {
        let dim = self.centroid.len();
        let mut acc = vec![0f64; dim];
        let mut total = 0f64;
        match &self.body {
            NodeBody::Leaf { vectors, .. } => {
                for row in vectors.chunks_exact(dim) {
                    for (a, v) in acc.iter_mut().zip(row) {
                        *a += v.as_f64();
                    }
                    total += 1.0;
                }
            }
            NodeBody::Inner { counts, centroids, .. } => {
                for (row, &c) in centroids.chunks_exact(dim).zip(counts) {
                    for (a, v) in acc.iter_mut().zip(row) {
                        *a += v.as_f64() * c as f64;
                    }
                    total += c as f64;
                }
            }
        }
        if total == 0.0 {
            return vec![S::zero(); dim];
        }
        acc.into_iter().map(|a| S::from_f64_lossy(a / total)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildParams {
    pub kappa_leaf: usize,
    pub kappa_inner: usize,
    pub metric: Metric,
    pub seed: u64,
}

impl Default for BuildParams {
    fn default() -> Self {
        BuildParams {
            kappa_leaf: 2048,
            kappa_inner: 1024,
            metric: Metric::Euclidean,
            seed: 0,
        }
    }
}

impl BuildParams {
    pub fn validate(&self) -> Result<()> {
        if self.kappa_leaf < 1 {
            return Err(Error::usage("kappa_leaf must be at least 1"));
        }
        if self.kappa_inner < 4 {
            return Err(Error::usage("kappa_inner must be at least 4"));
        }
        Ok(())
    }
}

/// In-memory index. Node ids are dense indices into `nodes`.
#[derive(Debug, Clone)]
pub struct BPlusAnnTree<S: Scalar> {
    dim: usize,
    params: BuildParams,
    nodes: Vec<TreeNode<S>>,
    root: NodeId,
    parents: Vec<Option<NodeId>>,
    locator: HashMap<u64, (NodeId, u32)>,
    mutations: Vec<u32>,
    graph: Option<SkipEdgeGraph>,
    stale_leaves: BTreeSet<NodeId>,
    version: u64,
}

impl<S: Scalar> PartialEq for BPlusAnnTree<S> {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.params == other.params
            && self.root == other.root
            && self.nodes == other.nodes
            && self.graph.as_ref().map(|g| &g.adjacency) == other.graph.as_ref().map(|g| &g.adjacency)
    }
}

impl<S: Scalar> BPlusAnnTree<S> {
    /// An empty tree: a single empty root leaf.
    pub fn new(dim: usize, params: BuildParams) -> Result<Self> {
        params.validate()?;
        if dim == 0 {
            return Err(Error::usage("dimension must be positive"));
        }
        Ok(BPlusAnnTree {
            dim,
            params,
            nodes: vec![TreeNode::empty_leaf(0, dim)],
            root: 0,
            parents: vec![None],
            locator: HashMap::new(),
            mutations: vec![0],
            graph: None,
            stale_leaves: BTreeSet::new(),
            version: 0,
        })
    }

    /// Rebuilds an index from decoded nodes (storage and views use this).
    pub(crate) fn from_nodes(dim: usize, params: BuildParams, nodes: Vec<TreeNode<S>>, root: NodeId) -> Result<Self> {
        let n = nodes.len();
        for (i, node) in nodes.iter().enumerate() {
            if node.id != i as u64 {
                return Err(Error::integrity(format!(
                    "node ids are not dense: slot {i} holds node {}",
                    node.id
                )));
            }
        }
        if root as usize >= n {
            return Err(Error::integrity(format!("root {root} out of range")));
        }
        let mut parents = vec![None; n];
        let mut locator = HashMap::new();
        for node in &nodes {
            match &node.body {
                NodeBody::Inner { children, .. } => {
                    for &c in children {
                        let slot = parents
                            .get_mut(c as usize)
                            .ok_or_else(|| Error::integrity(format!("child {c} out of range")))?;
                        if slot.replace(node.id).is_some() {
                            return Err(Error::integrity(format!("node {c} has two parents")));
                        }
                    }
                }
                NodeBody::Leaf { ids, .. } => {
                    for (slot, &id) in ids.iter().enumerate() {
                        if locator.insert(id, (node.id, slot as u32)).is_some() {
                            return Err(Error::integrity(format!("vector {id} stored twice")));
                        }
                    }
                }
            }
        }
        Ok(BPlusAnnTree {
            dim,
            params,
            mutations: vec![0; n],
            nodes,
            root,
            parents,
            locator,
            graph: None,
            stale_leaves: BTreeSet::new(),
            version: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &BuildParams {
        &self.params
    }

    pub fn metric(&self) -> Metric {
        self.params.metric
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn node(&self, id: NodeId) -> Option<&TreeNode<S>> {
        self.nodes.get(id as usize)
    }

    pub fn nodes(&self) -> &[TreeNode<S>] {
        &self.nodes
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.parents.get(id as usize).copied().flatten()
    }

    /// Number of stored vectors.
    pub fn len(&self) -> usize {
        self.locator.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locator.is_empty()
    }

    /// Levels from root to leaves, counting both.
    pub fn height(&self) -> usize {
        self.nodes[self.root as usize].level as usize + 1
    }

    /// Mutation stamp, bumped on every insert.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn locate(&self, id: u64) -> Option<(NodeId, u32)> {
        self.locator.get(&id).copied()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.locator.contains_key(&id)
    }

    pub fn vector(&self, id: u64) -> Option<&[S]> {
        let (leaf, slot) = self.locate(id)?;
        Some(self.nodes[leaf as usize].vector(slot as usize))
    }

    pub fn leaf_ids(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id as usize];
            if node.is_leaf() {
                out.push(id);
            } else {
                stack.extend(node.children().iter().rev());
            }
        }
        out
    }

    /// Nodes grouped per level, root level first.
    pub fn levels(&self) -> Vec<Vec<NodeId>> {
        let mut out = vec![vec![self.root]];
        loop {
            let next: Vec<NodeId> = out
                .last()
                .unwrap()
                .iter()
                .flat_map(|&id| self.nodes[id as usize].children().iter().copied())
                .collect();
            if next.is_empty() {
                return out;
            }
            out.push(next);
        }
    }

    /// Widest level's node count: a beam this wide visits every node.
    pub fn max_level_width(&self) -> usize {
        self.levels().iter().map(Vec::len).max().unwrap_or(1)
    }

    pub fn graph(&self) -> Option<&SkipEdgeGraph> {
        self.graph.as_ref()
    }

    pub fn set_graph(&mut self, graph: SkipEdgeGraph) {
        self.stale_leaves.clear();
        self.graph = Some(graph);
    }

    pub fn take_graph(&mut self) -> Option<SkipEdgeGraph> {
        self.stale_leaves.clear();
        self.graph.take()
    }

    pub(crate) fn graph_mut(&mut self) -> Option<&mut SkipEdgeGraph> {
        self.graph.as_mut()
    }

    /// Leaves touched since the skip-edge graph was built.
    pub fn stale_leaves(&self) -> &BTreeSet<NodeId> {
        &self.stale_leaves
    }

    pub(crate) fn clear_stale(&mut self) {
        self.stale_leaves.clear();
    }

    /// Inserts one vector, splitting full nodes on the way back up.
    pub fn insert(&mut self, v: &[S], id: u64) -> Result<InsertReport> {
        let report = insert_vector(self, v, id)?;
        self.version += 1;
        Ok(report)
    }

    /// Splits an over-capacity node in two by 2-means, then restores capacity
    /// above it.
    pub fn split_node(&mut self, id: NodeId) -> Result<(NodeId, NodeId)> {
        let node = self
            .nodes
            .get(id as usize)
            .ok_or_else(|| Error::usage(format!("unknown node {id}")))?;
        let cap = if node.is_leaf() {
            self.params.kappa_leaf
        } else {
            self.params.kappa_inner
        };
        if node.len() <= cap {
            return Err(Error::usage(format!(
                "node {id} holds {} entries, capacity {cap}: nothing to split",
                node.len()
            )));
        }
        let mut path = vec![id];
        while let Some(p) = self.parent(*path.last().unwrap()) {
            path.push(p);
        }
        path.reverse();
        let pair = ops::split_path_node(self, &path)?;
        self.version += 1;
        Ok(pair)
    }

    /// Checks every structural invariant; returns the first violation.
    pub fn verify(&self) -> Result<(), TreeViolation> {
        verify::verify_tree(self)
    }

    /// Overwrites a node's centroid without maintenance (fault injection).
    #[doc(hidden)]
    pub fn corrupt_centroid(&mut self, id: NodeId, centroid: Vec<S>) {
        self.nodes[id as usize].centroid = centroid;
    }

    /// Builds an index whose leaves are the given blocks, grouped under one
    /// inner node per group. Upper levels are chunked to `kappa_inner`.
    pub(crate) fn from_leaf_groups(dim: usize, params: BuildParams, groups: Vec<Vec<TreeNode<S>>>) -> Result<Self> {
        let mut nodes: Vec<TreeNode<S>> = Vec::new();
        let mut level_nodes: Vec<NodeId> = Vec::new();
        let flat = groups.len() == 1 && groups[0].len() == 1;
        let mut parents_level = Vec::new();
        for group in groups {
            let mut ids = Vec::new();
            for mut leaf in group {
                leaf.id = nodes.len() as u64;
                leaf.level = 0;
                ids.push(leaf.id);
                nodes.push(leaf);
            }
            level_nodes.extend(&ids);
            parents_level.push(ids);
        }
        if nodes.is_empty() {
            return Self::new(dim, params);
        }
        if flat {
            let mut tree = Self::from_nodes(dim, params, nodes, 0)?;
            tree.refresh_all();
            return Ok(tree);
        }
        let make_inner = |nodes: &mut Vec<TreeNode<S>>, kids: &[NodeId], level: u16| -> NodeId {
            let id = nodes.len() as u64;
            let mut centroids = Vec::with_capacity(kids.len() * dim);
            let mut counts = Vec::with_capacity(kids.len());
            for &k in kids {
                centroids.extend_from_slice(&nodes[k as usize].centroid);
                counts.push(nodes[k as usize].total());
            }
            let norms = centroids.chunks_exact(dim).map(norm).collect();
            let mut node = TreeNode {
                id,
                level,
                centroid: vec![S::zero(); dim],
                body: NodeBody::Inner {
                    children: kids.to_vec(),
                    counts,
                    centroids,
                    norms,
                },
            };
            node.centroid = node.exact_centroid();
            nodes.push(node);
            id
        };
        let cap = params.kappa_inner;
        let mut current: Vec<NodeId> = Vec::new();
        for group in parents_level {
            for chunk in group.chunks(cap) {
                current.push(make_inner(&mut nodes, chunk, 1));
            }
        }
        let mut level = 1u16;
        while current.len() > 1 {
            level += 1;
            current = current
                .chunks(cap)
                .map(|chunk| make_inner(&mut nodes, chunk, level))
                .collect::<Vec<_>>();
        }
        let root = current[0];
        Self::from_nodes(dim, params, nodes, root)
    }

    fn refresh_all(&mut self) {
        for node in &mut self.nodes {
            node.centroid = node.exact_centroid();
        }
    }
}

/// A leaf-sized block of vectors headed for one leaf.
struct Unit {
    positions: Vec<usize>,
}

fn collect_units<S: Scalar>(
    node: &ClusterNode<S>,
    set: &VectorSet<S>,
    params: &BuildParams,
    out: &mut Vec<Unit>,
) -> Result<()> {
    let count = node.count();
    if count <= params.kappa_leaf || node.is_leaf() {
        let positions: Vec<usize> = node.all_ids().into_iter().map(|id| set.position(id).unwrap()).collect();
        split_oversized(positions, set, params, out);
        return Ok(());
    }
    for child in &node.children {
        collect_units(child, set, params, out)?;
    }
    Ok(())
}

/// Repeated 2-means on a block until every piece fits a leaf.
fn split_oversized<S: Scalar>(positions: Vec<usize>, set: &VectorSet<S>, params: &BuildParams, out: &mut Vec<Unit>) {
    if positions.len() <= params.kappa_leaf {
        out.push(Unit { positions });
        return;
    }
    let dim = set.dim();
    let data: Vec<S> = positions.iter().flat_map(|&p| set.row(p).iter().copied()).collect();
    let norms: Vec<S> = positions.iter().map(|&p| set.row_norm(p)).collect();
    let pts = crate::cluster::Flat {
        data: &data,
        norms: &norms,
        dim,
    };
    let part = crate::cluster::lloyd(&pts, dim, 2, 25, 0.0, params.seed ^ positions[0] as u64, params.metric);
    let halves: Vec<Vec<usize>> = if part.clusters < 2 {
        let mid = positions.len().div_ceil(2);
        vec![positions[..mid].to_vec(), positions[mid..].to_vec()]
    } else {
        part.members()
            .into_iter()
            .map(|m| m.into_iter().map(|i| positions[i]).collect())
            .collect()
    };
    for half in halves {
        split_oversized(half, set, params, out);
    }
}

/// Bulk-builds the index from a clustering hierarchy: each subtree holding at
/// most `kappa_leaf` vectors becomes one leaf block, inserted whole.
pub fn build_tree<S: Scalar>(
    hierarchy: &ClusterNode<S>,
    set: &VectorSet<S>,
    params: &BuildParams,
) -> Result<BPlusAnnTree<S>> {
    params.validate()?;
    if set.is_empty() {
        return Err(Error::usage("cannot build an index over an empty dataset"));
    }
    hierarchy.check_partition(set)?;
    if params.metric == Metric::Cosine {
        if let Some(p) = (0..set.len()).find(|&p| set.row_norm(p) == S::zero()) {
            return Err(Error::domain(format!(
                "vector {} is zero; cosine distance is undefined",
                set.id(p)
            )));
        }
    }
    let mut units = Vec::new();
    collect_units(hierarchy, set, params, &mut units)?;
    let mut tree = BPlusAnnTree::new(set.dim(), *params)?;
    for unit in units {
        ops::insert_leaf_block(&mut tree, set, &unit.positions)?;
    }
    Ok(tree)
}
