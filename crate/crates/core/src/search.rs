//! Level-synchronous beam search over the tree, optionally refined by greedy
//! walks over skip edges, for single queries and batches.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::edges::{refine, Visited};
use crate::error::{Error, Result};
use crate::metric::{many_to_many_into, Metric};
use crate::oracle::{check_query, farthest_first, keep_best, nearest_first, Neighbor};
use crate::scalar::Scalar;
use crate::source::{NodeSource, SourceWalk};
use crate::tree::{NodeBody, NodeId, TreeNode};
use crate::vectors::VectorSet;
use crate::views::View;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchParams {
    pub k: usize,
    /// Nodes expanded per level.
    pub beta: usize,
    /// Edges followed per vector during refinement; 0 disables refinement.
    pub d_edge: usize,
    /// Return the farthest vectors instead of the nearest.
    pub dissimilar: bool,
}

impl Default for SearchParams {
    fn default() -> Self {
        SearchParams {
            k: 10,
            beta: 32,
            d_edge: 128,
            dissimilar: false,
        }
    }
}

impl SearchParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::usage("k must be positive"));
        }
        if self.beta == 0 {
            return Err(Error::usage("beta must be positive"));
        }
        Ok(())
    }

    fn order<S: Scalar>(&self) -> fn(&Neighbor<S>, &Neighbor<S>) -> Ordering {
        if self.dissimilar {
            farthest_first
        } else {
            nearest_first
        }
    }

    fn refines(&self) -> bool {
        self.d_edge > 0 && !self.dissimilar
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchStats {
    pub nodes_visited: u64,
    /// Greedy rounds that changed the result pool.
    pub hops: u64,
    pub distance_evals: u64,
    pub disk_reads: u64,
    pub cache_hits: u64,
}

impl std::ops::AddAssign for SearchStats {
    fn add_assign(&mut self, o: Self) {
        self.nodes_visited += o.nodes_visited;
        self.hops += o.hops;
        self.distance_evals += o.distance_evals;
        self.disk_reads += o.disk_reads;
        self.cache_hits += o.cache_hits;
    }
}

/// Per-query traversal state.
struct Probe<'q, S: Scalar> {
    q: &'q [S],
    q_norm: S,
    frontier: Vec<NodeId>,
    next: Vec<Neighbor<S>>,
    found: Vec<Neighbor<S>>,
    visited: Visited,
    stats: SearchStats,
}

impl<'q, S: Scalar> Probe<'q, S> {
    fn new(q: &'q [S], q_norm: S, root: NodeId) -> Self {
        Probe {
            q,
            q_norm,
            frontier: vec![root],
            next: Vec::new(),
            found: Vec::new(),
            visited: Visited::new(),
            stats: SearchStats::default(),
        }
    }

    /// Takes the distances from this query to every entry of `node`.
    fn absorb(&mut self, node: &TreeNode<S>, dist: &[S], params: &SearchParams) {
        let order = params.order::<S>();
        self.stats.distance_evals += dist.len() as u64;
        match &node.body {
            NodeBody::Inner { children, .. } => {
                let mut kids: Vec<Neighbor<S>> =
                    children.iter().zip(dist).map(|(&c, &d)| Neighbor::new(c, d)).collect();
                keep_best(&mut kids, params.k.max(params.beta), order);
                kids.truncate(params.beta);
                self.next.extend(kids);
            }
            NodeBody::Leaf { ids, .. } => {
                let mut hits: Vec<Neighbor<S>> = ids.iter().zip(dist).map(|(&id, &d)| Neighbor::new(id, d)).collect();
                // Ids are unique across leaves, so marking only the kept
                // entries loses nothing; the rest can never reach the top k.
                keep_best(&mut hits, params.k, order);
                hits.retain(|n| self.visited.mark_seen(n.id));
                self.found.extend(hits);
            }
        }
    }

    /// Moves to the next level; false once the leaves are done.
    fn advance(&mut self, params: &SearchParams) -> bool {
        let mut next = std::mem::take(&mut self.next);
        if next.is_empty() {
            self.frontier.clear();
            return false;
        }
        keep_best(&mut next, params.beta, params.order::<S>());
        self.frontier = next.iter().map(|n| n.id).collect();
        true
    }

    fn finish<I: NodeSource<S>>(mut self, index: &I, params: &SearchParams) -> Result<(Vec<Neighbor<S>>, SearchStats)> {
        let mut found = std::mem::take(&mut self.found);
        keep_best(&mut found, params.k, params.order::<S>());
        if params.refines() && !found.is_empty() {
            found = refine(
                &SourceWalk(index),
                self.q,
                self.q_norm,
                &found,
                params.k,
                params.d_edge,
                &mut self.visited,
                &mut self.stats,
            )?;
        }
        Ok((found, self.stats))
    }
}

fn prepare<S: Scalar, I: NodeSource<S>>(index: &I, params: &SearchParams) -> Result<()> {
    params.validate()?;
    if params.refines() && !index.has_edges() && index.vector_count() > 0 {
        return Err(Error::usage(
            "index has no skip edges; rebuild with edges or search with d_edge = 0",
        ));
    }
    Ok(())
}

fn node_distances<S: Scalar>(node: &TreeNode<S>, qs: &[&[S]], q_norms: &[S], metric: Metric) -> Vec<S> {
    let (keys, norms) = node.keys();
    let mut out = vec![S::zero(); qs.len() * norms.len()];
    many_to_many_into(qs, q_norms, keys, norms, metric, &mut out);
    out
}

/// Top-k search: nearest first, or farthest first with `params.dissimilar`.
pub fn search<S: Scalar, I: NodeSource<S>>(
    index: &I,
    q: &[S],
    params: &SearchParams,
) -> Result<(Vec<Neighbor<S>>, SearchStats)> {
    prepare(index, params)?;
    let metric = index.metric();
    let q_norm = check_query(q, index.dim(), metric)?;
    let mut probe = Probe::new(q, q_norm, index.root());
    if index.vector_count() == 0 {
        return Ok((Vec::new(), probe.stats));
    }
    loop {
        for id in std::mem::take(&mut probe.frontier) {
            let mut io = SearchStats::default();
            index.visit(id, &mut io, |node| {
                let dist = node_distances(node, &[q], &[q_norm], metric);
                probe.absorb(node, &dist, params);
            })?;
            probe.stats += io;
        }
        index.end_level()?;
        if !probe.advance(params) {
            break;
        }
    }
    probe.finish(index, params)
}

/// Searches every row of `queries`. Each node visited by several queries at
/// the same level is fetched once and scored against all of them together;
/// results equal per-query [`search`] calls.
pub fn search_batch<S: Scalar, I: NodeSource<S>>(
    index: &I,
    queries: &VectorSet<S>,
    params: &SearchParams,
) -> Result<Vec<(Vec<Neighbor<S>>, SearchStats)>> {
    prepare(index, params)?;
    let metric = index.metric();
    let mut probes = Vec::with_capacity(queries.len());
    for p in 0..queries.len() {
        let q = queries.row(p);
        let q_norm = check_query(q, index.dim(), metric)?;
        probes.push(Probe::new(q, q_norm, index.root()));
    }
    if index.vector_count() == 0 {
        return Ok(probes.into_iter().map(|p| (Vec::new(), p.stats)).collect());
    }
    let mut dist = Vec::new();
    loop {
        let mut groups: BTreeMap<NodeId, Vec<usize>> = BTreeMap::new();
        for (qi, probe) in probes.iter_mut().enumerate() {
            for id in std::mem::take(&mut probe.frontier) {
                groups.entry(id).or_default().push(qi);
            }
        }
        if groups.is_empty() {
            break;
        }
        for (id, members) in groups {
            let mut io = SearchStats::default();
            index.visit(id, &mut io, |node| {
                let (keys, key_norms) = node.keys();
                let rows = node.len();
                dist.resize(4 * rows, S::zero());
                // Blocks of four keep the distance rows cache resident.
                for block in members.chunks(4) {
                    let qs: Vec<&[S]> = block.iter().map(|&qi| probes[qi].q).collect();
                    let norms: Vec<S> = block.iter().map(|&qi| probes[qi].q_norm).collect();
                    let out = &mut dist[..block.len() * rows];
                    many_to_many_into(&qs, &norms, keys, key_norms, metric, out);
                    for (j, &qi) in block.iter().enumerate() {
                        probes[qi].absorb(node, &out[j * rows..(j + 1) * rows], params);
                    }
                }
            })?;
            let first = &mut probes[members[0]].stats;
            first.disk_reads += io.disk_reads;
            first.cache_hits += io.cache_hits;
            for &qi in &members {
                probes[qi].stats.nodes_visited += 1;
            }
        }
        index.end_level()?;
        let mut any = false;
        for probe in &mut probes {
            any |= probe.advance(params);
        }
        if !any {
            break;
        }
    }
    probes.into_par_iter().map(|p| p.finish(index, params)).collect()
}

/// Farthest-first search; with a view, only the view's vectors are
/// considered.
pub fn search_dissimilar<S: Scalar, I: NodeSource<S>>(
    index: &I,
    q: &[S],
    params: &SearchParams,
    scope: Option<&View<S>>,
) -> Result<(Vec<Neighbor<S>>, SearchStats)> {
    let params = SearchParams {
        dissimilar: true,
        ..*params
    };
    match scope {
        Some(view) => search(view.tree(), q, &params),
        None => search(index, q, &params),
    }
}
