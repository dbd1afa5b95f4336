//! Skip edges between vectors of nearby leaves, and greedy refinement over
//! them.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::{many_to_many_into, one_to_many_into, Metric};
use crate::oracle::{check_query, keep_best, nearest_first, Neighbor};
use crate::scalar::Scalar;
use crate::search::SearchStats;
use crate::tree::{BPlusAnnTree, NodeId};
use crate::vectors::VectorSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeParams {
    /// Out-degree per vector.
    pub d_edge: usize,
    /// Nearby leaves in each leaf's candidate pool.
    pub s_leaf: usize,
}

impl Default for EdgeParams {
    fn default() -> Self {
        EdgeParams {
            d_edge: 128,
            s_leaf: 512,
        }
    }
}

impl EdgeParams {
    pub fn validate(&self) -> Result<()> {
        if self.d_edge < 1 || self.s_leaf < 1 {
            return Err(Error::usage("d_edge and s_leaf must be at least 1"));
        }
        Ok(())
    }
}

/// Directed graph over vector ids; each list is sorted by ascending distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipEdgeGraph {
    pub adjacency: HashMap<u64, Vec<u64>>,
    /// Tree version the edges were computed against.
    pub built_over: u64,
    pub params: EdgeParams,
    /// Distance evaluations spent building (including relinks).
    pub distance_evals: u64,
}

impl SkipEdgeGraph {
    pub fn neighbors(&self, id: u64) -> &[u64] {
        self.adjacency.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    pub fn max_degree(&self) -> usize {
        self.adjacency.values().map(Vec::len).max().unwrap_or(0)
    }
}

fn leaf_centroids<S: Scalar>(tree: &BPlusAnnTree<S>, leaves: &[NodeId]) -> (Vec<S>, Vec<S>) {
    let mut block = Vec::with_capacity(leaves.len() * tree.dim());
    for &l in leaves {
        block.extend_from_slice(&tree.node(l).unwrap().centroid);
    }
    let norms = crate::metric::row_norms(&block, tree.dim());
    (block, norms)
}

/// For every leaf, the `s_leaf` other leaves with the nearest centroids
/// (ties by leaf id).
pub fn nearest_leaves<S: Scalar>(tree: &BPlusAnnTree<S>, s_leaf: usize) -> BTreeMap<NodeId, Vec<NodeId>> {
    let mut leaves = tree.leaf_ids();
    leaves.sort_unstable();
    let (block, norms) = leaf_centroids(tree, &leaves);
    let dim = tree.dim();
    let metric = tree.metric();
    leaves
        .par_iter()
        .enumerate()
        .map(|(i, &leaf)| {
            let mut dist = vec![S::zero(); leaves.len()];
            one_to_many_into(
                &block[i * dim..(i + 1) * dim],
                norms[i],
                &block,
                &norms,
                metric,
                &mut dist,
            );
            let mut cand: Vec<Neighbor<S>> = leaves
                .iter()
                .zip(&dist)
                .filter(|(&l, _)| l != leaf)
                .map(|(&l, &d)| Neighbor::new(l, d))
                .collect();
            keep_best(&mut cand, s_leaf, nearest_first);
            (leaf, cand.iter().map(|n| n.id).collect())
        })
        .collect()
}

/// Edges for the vectors of `leaf`, drawn from its own leaf and `near`.
fn link_leaf<S: Scalar>(
    tree: &BPlusAnnTree<S>,
    leaf: NodeId,
    near: &[NodeId],
    d_edge: usize,
    evals: &AtomicU64,
) -> Vec<(u64, Vec<u64>)> {
    let dim = tree.dim();
    let metric = tree.metric();
    let mut pool_ids = Vec::new();
    let mut pool = Vec::new();
    let mut pool_norms = Vec::new();
    for &l in std::iter::once(&leaf).chain(near) {
        let node = tree.node(l).unwrap();
        let (vectors, norms) = node.keys();
        pool_ids.extend_from_slice(node.leaf_ids());
        pool.extend_from_slice(vectors);
        pool_norms.extend_from_slice(norms);
    }
    let own = tree.node(leaf).unwrap();
    let (own_vectors, own_norms) = own.keys();
    let own_ids = own.leaf_ids();
    let rows = pool_ids.len();
    evals.fetch_add((own_ids.len() * rows) as u64, AtomicOrdering::Relaxed);

    let mut out = Vec::with_capacity(own_ids.len());
    let mut dist = vec![S::zero(); 4 * rows];
    for start in (0..own_ids.len()).step_by(4) {
        let end = (start + 4).min(own_ids.len());
        let qs: Vec<&[S]> = (start..end).map(|i| &own_vectors[i * dim..(i + 1) * dim]).collect();
        let out_len = qs.len() * rows;
        many_to_many_into(
            &qs,
            &own_norms[start..end],
            &pool,
            &pool_norms,
            metric,
            &mut dist[..out_len],
        );
        for (j, i) in (start..end).enumerate() {
            let me = own_ids[i];
            let mut cand: Vec<Neighbor<S>> = pool_ids
                .iter()
                .zip(&dist[j * rows..(j + 1) * rows])
                .filter(|(&id, _)| id != me)
                .map(|(&id, &d)| Neighbor::new(id, d))
                .collect();
            keep_best(&mut cand, d_edge, nearest_first);
            out.push((me, cand.iter().map(|n| n.id).collect()));
        }
    }
    out
}

fn link_leaves<S: Scalar>(
    tree: &BPlusAnnTree<S>,
    targets: &[NodeId],
    params: &EdgeParams,
) -> (Vec<(u64, Vec<u64>)>, u64) {
    let near = nearest_leaves(tree, params.s_leaf);
    let evals = AtomicU64::new(0);
    let adjacency = targets
        .par_iter()
        .flat_map_iter(|leaf| link_leaf(tree, *leaf, &near[leaf], params.d_edge, &evals))
        .collect();
    (adjacency, evals.into_inner())
}

/// Links every vector to its `d_edge` nearest vectors among its own leaf and
/// the `s_leaf` nearest leaves.
pub fn build_skip_edges<S: Scalar>(tree: &BPlusAnnTree<S>, params: &EdgeParams) -> Result<SkipEdgeGraph> {
    params.validate()?;
    let mut leaves = tree.leaf_ids();
    leaves.sort_unstable();
    let (adjacency, evals) = link_leaves(tree, &leaves, params);
    Ok(SkipEdgeGraph {
        adjacency: adjacency.into_iter().collect(),
        built_over: tree.version(),
        params: *params,
        distance_evals: evals,
    })
}

/// Rebuilds edges for leaves touched by inserts since the graph was built.
/// Returns the number of leaves relinked.
pub fn refresh_skip_edges<S: Scalar>(tree: &mut BPlusAnnTree<S>) -> Result<usize> {
    let Some(graph) = tree.graph() else {
        return Err(Error::usage("index has no skip edges to refresh"));
    };
    let params = graph.params;
    let stale: Vec<NodeId> = tree
        .stale_leaves()
        .iter()
        .copied()
        .filter(|&l| tree.node(l).is_some_and(|n| n.is_leaf()))
        .collect();
    let (adjacency, evals) = link_leaves(tree, &stale, &params);
    let version = tree.version();
    let graph = tree.graph_mut().unwrap();
    graph.adjacency.extend(adjacency);
    graph.distance_evals += evals;
    graph.built_over = version;
    tree.clear_stale();
    Ok(stale.len())
}

/// Per-query visit state: 0 unseen, 1 scored, 2 expanded.
#[derive(Debug, Clone, Default)]
pub struct Visited {
    state: HashMap<u64, u8>,
}

impl Visited {
    pub fn new() -> Self {
        Visited::default()
    }

    pub fn get(&self, id: u64) -> u8 {
        self.state.get(&id).copied().unwrap_or(0)
    }

    pub fn set(&mut self, id: u64, s: u8) {
        self.state.insert(id, s);
    }

    /// Marks `id` scored; false if it was already seen.
    pub fn mark_seen(&mut self, id: u64) -> bool {
        match self.state.entry(id) {
            std::collections::hash_map::Entry::Occupied(_) => false,
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(1);
                true
            }
        }
    }

    pub fn clear(&mut self) {
        self.state.clear();
    }
}

/// What greedy refinement needs from an index: out-edges and distances.
pub(crate) trait EdgeWalk<S: Scalar> {
    fn neighbors(&self, id: u64, stats: &mut SearchStats) -> Result<Vec<u64>>;
    /// Distances from `q` to `ids`, in order.
    fn score(&self, q: &[S], q_norm: S, ids: &[u64], stats: &mut SearchStats) -> Result<Vec<S>>;
}

struct SetWalk<'a, S: Scalar> {
    graph: &'a SkipEdgeGraph,
    set: &'a VectorSet<S>,
    metric: Metric,
}

impl<S: Scalar> EdgeWalk<S> for SetWalk<'_, S> {
    fn neighbors(&self, id: u64, _stats: &mut SearchStats) -> Result<Vec<u64>> {
        Ok(self.graph.neighbors(id).to_vec())
    }

    fn score(&self, q: &[S], q_norm: S, ids: &[u64], _stats: &mut SearchStats) -> Result<Vec<S>> {
        ids.iter()
            .map(|&id| {
                let p = self
                    .set
                    .position(id)
                    .ok_or_else(|| Error::integrity(format!("edge target {id} not in dataset")))?;
                Ok(self.metric.with_norms(q, q_norm, self.set.row(p), self.set.row_norm(p)))
            })
            .collect()
    }
}

/// Expands the retained pool round by round until it stops changing. `hops`
/// counts rounds that changed the pool.
#[allow(clippy::too_many_arguments)]
pub(crate) fn refine<S: Scalar, W: EdgeWalk<S>>(
    walk: &W,
    q: &[S],
    q_norm: S,
    seeds: &[Neighbor<S>],
    k: usize,
    d_edge: usize,
    visited: &mut Visited,
    stats: &mut SearchStats,
) -> Result<Vec<Neighbor<S>>> {
    let mut pool = seeds.to_vec();
    keep_best(&mut pool, k, nearest_first);
    for n in &pool {
        if visited.get(n.id) == 0 {
            visited.set(n.id, 1);
        }
    }
    loop {
        let mut fresh = Vec::new();
        let mut expanded_any = false;
        for n in &pool {
            if visited.get(n.id) > 1 {
                continue;
            }
            visited.set(n.id, 2);
            expanded_any = true;
            let mut out = walk.neighbors(n.id, stats)?;
            out.truncate(d_edge);
            for m in out {
                if visited.mark_seen(m) {
                    fresh.push(m);
                }
            }
        }
        if !expanded_any || fresh.is_empty() {
            return Ok(pool);
        }
        let dist = walk.score(q, q_norm, &fresh, stats)?;
        stats.distance_evals += fresh.len() as u64;
        let before: Vec<u64> = pool.iter().map(|n| n.id).collect();
        pool.extend(fresh.into_iter().zip(dist).map(|(id, d)| Neighbor::new(id, d)));
        keep_best(&mut pool, k, nearest_first);
        if pool.iter().map(|n| n.id).eq(before.iter().copied()) {
            return Ok(pool);
        }
        stats.hops += 1;
    }
}

/// Greedy refinement over a graph whose vectors live in `set`. Seeds are
/// marked visited on entry.
#[allow(clippy::too_many_arguments)]
pub fn greedy_search<S: Scalar>(
    graph: &SkipEdgeGraph,
    set: &VectorSet<S>,
    metric: Metric,
    q: &[S],
    seeds: &[Neighbor<S>],
    k: usize,
    visited: &mut Visited,
) -> Result<(Vec<Neighbor<S>>, SearchStats)> {
    if seeds.is_empty() {
        return Err(Error::usage("greedy search needs at least one seed"));
    }
    if k == 0 {
        return Err(Error::usage("k must be positive"));
    }
    let q_norm = check_query(q, set.dim(), metric)?;
    let mut stats = SearchStats::default();
    let walk = SetWalk { graph, set, metric };
    let out = refine(&walk, q, q_norm, seeds, k, usize::MAX, visited, &mut stats)?;
    Ok((out, stats))
}

/// Mean greedy hops per query.
pub fn avg_hops(stats: &[SearchStats]) -> Result<f64> {
    if stats.is_empty() {
        return Err(Error::usage("no queries recorded"));
    }
    Ok(stats.iter().map(|s| s.hops as f64).sum::<f64>() / stats.len() as f64)
}
