//! Insertion, splitting and block placement, written once against
//! [`NodeStoreMut`] so the in-memory tree and the disk index share them.

use serde::{Deserialize, Serialize};

use super::{BPlusAnnTree, BuildParams, NodeBody, NodeId, TreeNode};
use crate::cluster::{lloyd, Flat};
use crate::error::{Error, Result};
use crate::metric::{norm, Metric};
use crate::scalar::Scalar;
use crate::vectors::VectorSet;

/// Exact centroid recomputation cadence, in mutations per node.
pub(crate) const RECOMPUTE_EVERY: u32 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsertReport {
    pub leaf: NodeId,
    pub splits: usize,
}

pub(crate) trait NodeStoreMut<S: Scalar> {
    fn dim(&self) -> usize;
    fn build_params(&self) -> BuildParams;
    fn root_id(&self) -> NodeId;
    fn set_root(&mut self, id: NodeId);
    fn node(&mut self, id: NodeId) -> Result<&TreeNode<S>>;
    fn node_mut(&mut self, id: NodeId) -> Result<&mut TreeNode<S>>;
    /// Stores a new node, assigning its id.
    fn alloc(&mut self, node: TreeNode<S>) -> NodeId;
    fn contains_vector(&mut self, id: u64) -> Result<bool>;
    fn relocate(&mut self, vector: u64, leaf: NodeId, slot: u32);
    /// Counts a mutation on `id` and returns the running total.
    fn bump(&mut self, id: NodeId) -> u32;
    fn set_parent(&mut self, _child: NodeId, _parent: Option<NodeId>) {}
    /// A leaf's membership changed.
    fn touched_leaf(&mut self, _leaf: NodeId) {}
}

impl<S: Scalar> NodeStoreMut<S> for BPlusAnnTree<S> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn build_params(&self) -> BuildParams {
        self.params
    }
    fn root_id(&self) -> NodeId {
        self.root
    }
    fn set_root(&mut self, id: NodeId) {
        self.root = id;
        self.parents[id as usize] = None;
    }
    fn node(&mut self, id: NodeId) -> Result<&TreeNode<S>> {
        self.nodes
            .get(id as usize)
            .ok_or_else(|| Error::integrity(format!("unknown node {id}")))
    }
    fn node_mut(&mut self, id: NodeId) -> Result<&mut TreeNode<S>> {
        self.nodes
            .get_mut(id as usize)
            .ok_or_else(|| Error::integrity(format!("unknown node {id}")))
    }
    fn alloc(&mut self, mut node: TreeNode<S>) -> NodeId {
        let id = self.nodes.len() as u64;
        node.id = id;
        self.nodes.push(node);
        self.parents.push(None);
        self.mutations.push(0);
        id
    }
    fn contains_vector(&mut self, id: u64) -> Result<bool> {
        Ok(self.locator.contains_key(&id))
    }
    fn relocate(&mut self, vector: u64, leaf: NodeId, slot: u32) {
        self.locator.insert(vector, (leaf, slot));
    }
    fn bump(&mut self, id: NodeId) -> u32 {
        let m = &mut self.mutations[id as usize];
        *m = m.wrapping_add(1);
        *m
    }
    fn set_parent(&mut self, child: NodeId, parent: Option<NodeId>) {
        self.parents[child as usize] = parent;
    }
    fn touched_leaf(&mut self, leaf: NodeId) {
        if self.graph.is_some() {
            self.stale_leaves.insert(leaf);
        }
    }
}

/// Index of the entry nearest to `v`; ties go to the smaller node id.
fn nearest_child<S: Scalar>(node: &TreeNode<S>, v: &[S], v_norm: S, metric: Metric) -> usize {
    let (keys, norms) = node.keys();
    let dim = v.len();
    let children = node.children();
    let mut best = 0usize;
    let mut best_d = S::infinity();
    for (i, row) in keys.chunks_exact(dim).enumerate() {
        let d = metric.with_norms(v, v_norm, row, norms[i]);
        if d < best_d || (d == best_d && children[i] < children[best]) {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Root-to-node path ending at the first node on `level` reached by
/// nearest-centroid descent.
fn descend<S: Scalar, T: NodeStoreMut<S>>(
    store: &mut T,
    v: &[S],
    v_norm: S,
    level: u16,
    metric: Metric,
) -> Result<Vec<NodeId>> {
    let mut path = vec![store.root_id()];
    loop {
        let node = store.node(*path.last().unwrap())?;
        if node.level <= level || node.is_leaf() {
            return Ok(path);
        }
        let i = nearest_child(node, v, v_norm, metric);
        path.push(node.children()[i]);
    }
}

/// Moves `centroid` toward a block of `added` vectors whose mean is `mean`,
/// for a node that now holds `total` vectors.
fn merge_mean<S: Scalar>(centroid: &mut [S], mean: &[S], added: u64, total: u64) {
    if total == 0 {
        return;
    }
    let w = added as f64 / total as f64;
    for (c, m) in centroid.iter_mut().zip(mean) {
        let cur = c.as_f64();
        *c = S::from_f64_lossy(cur + (m.as_f64() - cur) * w);
    }
}

fn maybe_recompute<S: Scalar, T: NodeStoreMut<S>>(store: &mut T, id: NodeId) -> Result<()> {
    if store.bump(id) % RECOMPUTE_EVERY == 0 {
        let node = store.node_mut(id)?;
        node.centroid = node.exact_centroid();
    }
    Ok(())
}

/// Refreshes the entry for `child` inside `parent` from the child's current
/// centroid and size.
fn refresh_entry<S: Scalar, T: NodeStoreMut<S>>(store: &mut T, parent: NodeId, child: NodeId) -> Result<()> {
    let (centroid, total) = {
        let c = store.node(child)?;
        (c.centroid.clone(), c.total())
    };
    let dim = centroid.len();
    let node = store.node_mut(parent)?;
    if let NodeBody::Inner {
        children,
        counts,
        centroids,
        norms,
    } = &mut node.body
    {
        let i = children
            .iter()
            .position(|&c| c == child)
            .ok_or_else(|| Error::integrity(format!("node {child} is not a child of {parent}")))?;
        counts[i] = total;
        norms[i] = norm(&centroid);
        centroids[i * dim..(i + 1) * dim].copy_from_slice(&centroid);
    }
    Ok(())
}

/// Walks `path` bottom-up from the node above `from_depth`, folding a block of
/// `added` vectors with mean `mean` into every ancestor.
fn propagate<S: Scalar, T: NodeStoreMut<S>>(
    store: &mut T,
    path: &[NodeId],
    from_depth: usize,
    mean: &[S],
    added: u64,
) -> Result<()> {
    for d in (0..from_depth).rev() {
        refresh_entry(store, path[d], path[d + 1])?;
        let node = store.node_mut(path[d])?;
        let total = node.total();
        merge_mean(&mut node.centroid, mean, added, total);
        maybe_recompute(store, path[d])?;
    }
    Ok(())
}

pub(crate) fn insert_vector<S: Scalar, T: NodeStoreMut<S>>(store: &mut T, v: &[S], id: u64) -> Result<InsertReport> {
    let dim = store.dim();
    let params = store.build_params();
    let v_norm = crate::oracle::check_query(v, dim, params.metric)?;
    if store.contains_vector(id)? {
        return Err(Error::usage(format!("vector id {id} already present")));
    }
    let path = descend(store, v, v_norm, 0, params.metric)?;
    let leaf_id = *path.last().unwrap();
    let slot = {
        let leaf = store.node_mut(leaf_id)?;
        let NodeBody::Leaf { ids, vectors, norms } = &mut leaf.body else {
            return Err(Error::integrity(format!("descent ended at inner node {leaf_id}")));
        };
        ids.push(id);
        vectors.extend_from_slice(v);
        norms.push(v_norm);
        let total = ids.len() as u64;
        merge_mean(&mut leaf.centroid, v, 1, total);
        (total - 1) as u32
    };
    store.relocate(id, leaf_id, slot);
    store.touched_leaf(leaf_id);
    maybe_recompute(store, leaf_id)?;
    propagate(store, &path, path.len() - 1, v, 1)?;
    let splits = resolve_overflow(store, &path)?;
    Ok(InsertReport { leaf: leaf_id, splits })
}

/// Places a whole block of vectors as a new leaf.
pub(crate) fn insert_leaf_block<S: Scalar, T: NodeStoreMut<S>>(
    store: &mut T,
    set: &VectorSet<S>,
    positions: &[usize],
) -> Result<NodeId> {
    let dim = store.dim();
    let params = store.build_params();
    let mut ids = Vec::with_capacity(positions.len());
    let mut vectors = Vec::with_capacity(positions.len() * dim);
    let mut norms = Vec::with_capacity(positions.len());
    for &p in positions {
        let id = set.id(p);
        if store.contains_vector(id)? {
            return Err(Error::usage(format!("vector id {id} already present")));
        }
        ids.push(id);
        vectors.extend_from_slice(set.row(p));
        norms.push(set.row_norm(p));
    }
    let mut leaf = TreeNode {
        id: 0,
        level: 0,
        centroid: Vec::new(),
        body: NodeBody::Leaf { ids, vectors, norms },
    };
    leaf.centroid = vec![S::zero(); dim];
    leaf.centroid = leaf.exact_centroid();
    let added = leaf.total();
    let mean = leaf.centroid.clone();

    let root = store.root_id();
    let (root_is_leaf, root_is_empty) = {
        let r = store.node(root)?;
        (r.is_leaf(), r.is_empty())
    };
    let leaf_id = if root_is_leaf && root_is_empty {
        leaf.id = root;
        *store.node_mut(root)? = leaf;
        root
    } else if root_is_leaf {
        let leaf_id = store.alloc(leaf);
        let new_root = new_inner(store, &[root, leaf_id], 1)?;
        store.set_root(new_root);
        leaf_id
    } else {
        let mean_norm = norm(&mean);
        let path = descend(store, &mean, mean_norm, 1, params.metric)?;
        let parent = *path.last().unwrap();
        let leaf_id = store.alloc(leaf);
        store.set_parent(leaf_id, Some(parent));
        {
            let node = store.node_mut(parent)?;
            if let NodeBody::Inner {
                children,
                counts,
                centroids,
                norms,
            } = &mut node.body
            {
                children.push(leaf_id);
                counts.push(added);
                centroids.extend_from_slice(&mean);
                norms.push(mean_norm);
            }
            let total = node.total();
            merge_mean(&mut node.centroid, &mean, added, total);
        }
        maybe_recompute(store, parent)?;
        propagate(store, &path, path.len() - 1, &mean, added)?;
        resolve_overflow(store, &path)?;
        leaf_id
    };
    let ids = store.node(leaf_id)?.leaf_ids().to_vec();
    for (slot, id) in ids.into_iter().enumerate() {
        store.relocate(id, leaf_id, slot as u32);
    }
    store.touched_leaf(leaf_id);
    Ok(leaf_id)
}

fn new_inner<S: Scalar, T: NodeStoreMut<S>>(store: &mut T, kids: &[NodeId], level: u16) -> Result<NodeId> {
    let dim = store.dim();
    let mut centroids = Vec::with_capacity(kids.len() * dim);
    let mut counts = Vec::with_capacity(kids.len());
    for &k in kids {
        let c = store.node(k)?;
        centroids.extend_from_slice(&c.centroid);
        counts.push(c.total());
    }
    let norms = centroids.chunks_exact(dim).map(norm).collect();
    let mut node = TreeNode {
        id: 0,
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
    let id = store.alloc(node);
    for &k in kids {
        store.set_parent(k, Some(id));
    }
    Ok(id)
}

fn capacity<S: Scalar>(node: &TreeNode<S>, params: &BuildParams) -> usize {
    if node.is_leaf() {
        params.kappa_leaf
    } else {
        params.kappa_inner
    }
}

/// Splits over-capacity nodes along `path`, bottom-up, growing a new root if
/// the old one splits. Returns the number of splits.
fn resolve_overflow<S: Scalar, T: NodeStoreMut<S>>(store: &mut T, path: &[NodeId]) -> Result<usize> {
    let params = store.build_params();
    let mut splits = 0;
    for d in (0..path.len()).rev() {
        // A split half may itself still be oversized; keep splitting at this
        // level until every sibling fits.
        let mut pending = vec![path[d]];
        while let Some(id) = pending.pop() {
            let node = store.node(id)?;
            if node.len() <= capacity(node, &params) {
                continue;
            }
            let (a, b) = split_in_place(store, id)?;
            splits += 1;
            attach_split(store, path, d, a, b)?;
            pending.push(a);
            pending.push(b);
        }
    }
    let root = store.root_id();
    if path.first().is_some_and(|&r| r != root) {
        splits += resolve_overflow(store, &[root])?;
    }
    Ok(splits)
}

/// After `a` (the original node at `path[depth]`) split off `b`, records both
/// in the parent, or grows a new root.
fn attach_split<S: Scalar, T: NodeStoreMut<S>>(
    store: &mut T,
    path: &[NodeId],
    depth: usize,
    a: NodeId,
    b: NodeId,
) -> Result<()> {
    if depth == 0 {
        let root = store.root_id();
        if root == a {
            let level = store.node(a)?.level + 1;
            let new_root = new_inner(store, &[a, b], level)?;
            store.set_root(new_root);
            return Ok(());
        }
        // `a` was split off an earlier root split; it now sits under the new root.
        return attach_under(store, root, a, b);
    }
    let parent = parent_of_split(store, path, depth, a)?;
    attach_under(store, parent, a, b)
}

/// Finds the current parent of `a`: its path parent, or that parent's split
/// sibling if an earlier split moved `a`.
fn parent_of_split<S: Scalar, T: NodeStoreMut<S>>(
    store: &mut T,
    path: &[NodeId],
    depth: usize,
    a: NodeId,
) -> Result<NodeId> {
    let p = path[depth - 1];
    if store.node(p)?.children().contains(&a) {
        return Ok(p);
    }
    Err(Error::integrity(format!("lost parent of node {a} during split")))
}

fn attach_under<S: Scalar, T: NodeStoreMut<S>>(store: &mut T, parent: NodeId, a: NodeId, b: NodeId) -> Result<()> {
    let (b_centroid, b_total) = {
        let n = store.node(b)?;
        (n.centroid.clone(), n.total())
    };
    refresh_entry(store, parent, a)?;
    let dim = b_centroid.len();
    let node = store.node_mut(parent)?;
    if let NodeBody::Inner {
        children,
        counts,
        centroids,
        norms,
    } = &mut node.body
    {
        let i = children.iter().position(|&c| c == a).unwrap();
        children.insert(i + 1, b);
        counts.insert(i + 1, b_total);
        norms.insert(i + 1, norm(&b_centroid));
        let at = (i + 1) * dim;
        centroids.splice(at..at, b_centroid.iter().copied());
    }
    store.set_parent(b, Some(parent));
    Ok(())
}

/// Partitions a node's entries by 2-means into itself and a new sibling.
fn split_in_place<S: Scalar, T: NodeStoreMut<S>>(store: &mut T, id: NodeId) -> Result<(NodeId, NodeId)> {
    let params = store.build_params();
    let dim = store.dim();
    let node = store.node(id)?.clone();
    let n = node.len();
    if n < 2 {
        return Err(Error::usage(format!("node {id} has {n} entries; cannot split")));
    }
    let (keys, norms) = node.keys();
    let part = lloyd(
        &Flat { data: keys, norms, dim },
        dim,
        2,
        25,
        0.0,
        params.seed ^ id.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        params.metric,
    );
    let (left, right): (Vec<usize>, Vec<usize>) = if part.clusters < 2 {
        let mid = n.div_ceil(2);
        ((0..mid).collect(), (mid..n).collect())
    } else {
        let mut m = part.members();
        let right = m.pop().unwrap();
        (m.pop().unwrap(), right)
    };
    let pick = |sel: &[usize]| -> NodeBody<S> {
        let gather = |src: &[S], width: usize| -> Vec<S> {
            sel.iter()
                .flat_map(|&i| src[i * width..(i + 1) * width].iter().copied())
                .collect()
        };
        match &node.body {
            NodeBody::Leaf { ids, vectors, norms } => NodeBody::Leaf {
                ids: sel.iter().map(|&i| ids[i]).collect(),
                vectors: gather(vectors, dim),
                norms: sel.iter().map(|&i| norms[i]).collect(),
            },
            NodeBody::Inner {
                children,
                counts,
                centroids,
                norms,
            } => NodeBody::Inner {
                children: sel.iter().map(|&i| children[i]).collect(),
                counts: sel.iter().map(|&i| counts[i]).collect(),
                centroids: gather(centroids, dim),
                norms: sel.iter().map(|&i| norms[i]).collect(),
            },
        }
    };
    let mut a = TreeNode {
        id,
        level: node.level,
        centroid: Vec::new(),
        body: pick(&left),
    };
    a.centroid = vec![S::zero(); dim];
    a.centroid = a.exact_centroid();
    let mut b = TreeNode {
        id: 0,
        level: node.level,
        centroid: vec![S::zero(); dim],
        body: pick(&right),
    };
    b.centroid = b.exact_centroid();
    *store.node_mut(id)? = a;
    let b_id = store.alloc(b);
    let (a_entries, b_entries) = (store.node(id)?.clone_entries(), store.node(b_id)?.clone_entries());
    if node.is_leaf() {
        for (owner, ids) in [(id, a_entries), (b_id, b_entries)] {
            for (slot, v) in ids.into_iter().enumerate() {
                store.relocate(v, owner, slot as u32);
            }
            store.touched_leaf(owner);
        }
    } else {
        for (owner, kids) in [(id, a_entries), (b_id, b_entries)] {
            for k in kids {
                store.set_parent(k, Some(owner));
            }
        }
    }
    Ok((id, b_id))
}

impl<S: Scalar> TreeNode<S> {
    /// Vector ids for leaves, child ids for inner nodes.
    fn clone_entries(&self) -> Vec<u64> {
        match &self.body {
            NodeBody::Leaf { ids, .. } => ids.clone(),
            NodeBody::Inner { children, .. } => children.clone(),
        }
    }
}

/// Splits the last node of `path` and restores capacity up the path.
pub(crate) fn split_path_node<S: Scalar, T: NodeStoreMut<S>>(
    store: &mut T,
    path: &[NodeId],
) -> Result<(NodeId, NodeId)> {
    let d = path.len() - 1;
    let (a, b) = split_in_place(store, path[d])?;
    attach_split(store, path, d, a, b)?;
    // Parents above may now overflow; halves are left as split.
    resolve_overflow(store, &path[..d])?;
    Ok((a, b))
}
