//! Farthest-neighbor graph baseline: a relative-neighborhood graph with the
//! ordering inverted, searched by a beam walk that maximizes distance.

use std::collections::HashSet;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metric::Metric;
use crate::oracle::{check_query, farthest_first, keep_best, Neighbor};
use crate::scalar::Scalar;
use crate::vectors::VectorSet;

pub const DEFAULT_DEGREE: usize = 16;

/// Out-edges by dataset position.
#[derive(Debug, Clone, PartialEq)]
pub struct FarthestGraph {
    pub adjacency: Vec<Vec<u32>>,
    pub metric: Metric,
}

impl FarthestGraph {
    pub fn min_degree(&self) -> usize {
        self.adjacency.iter().map(Vec::len).min().unwrap_or(0)
    }
}

/// O(N²) construction. Candidates are scanned farthest first; `v` is dropped
/// when some kept `w` lies farther from `v` than `u` does.
pub fn build_farthest_graph<S: Scalar>(set: &VectorSet<S>, metric: Metric, degree: usize) -> Result<FarthestGraph> {
    if degree == 0 {
        return Err(Error::usage("degree must be positive"));
    }
    let n = set.len();
    let dist = |a: usize, b: usize| metric.with_norms(set.row(a), set.row_norm(a), set.row(b), set.row_norm(b));
    let adjacency = (0..n)
        .into_par_iter()
        .map(|u| {
            let mut cand: Vec<Neighbor<S>> = (0..n)
                .filter(|&v| v != u)
                .map(|v| Neighbor::new(v as u64, dist(u, v)))
                .collect();
            keep_best(&mut cand, 4 * degree, farthest_first);
            let mut kept: Vec<u32> = Vec::with_capacity(degree);
            for c in cand {
                let v = c.id as usize;
                if kept.iter().all(|&w| dist(w as usize, v) <= c.distance) {
                    kept.push(v as u32);
                    if kept.len() == degree {
                        break;
                    }
                }
            }
            kept
        })
        .collect();
    Ok(FarthestGraph { adjacency, metric })
}

/// Beam walk from position 0 keeping the `max(k, 2·degree)` farthest
/// vertices seen; returns the `k` farthest, descending.
pub fn search_farthest_graph<S: Scalar>(
    graph: &FarthestGraph,
    set: &VectorSet<S>,
    q: &[S],
    k: usize,
) -> Result<Vec<Neighbor<S>>> {
    if k == 0 || k > set.len() {
        return Err(Error::usage(format!("k = {k} must be in 1..={}", set.len())));
    }
    let qn = check_query(q, set.dim(), graph.metric)?;
    let score = |p: usize| Neighbor::new(p as u64, graph.metric.with_norms(q, qn, set.row(p), set.row_norm(p)));
    let width = k.max(2 * graph.adjacency.first().map_or(1, Vec::len));
    let mut seen: HashSet<usize> = HashSet::from([0]);
    let mut expanded: HashSet<usize> = HashSet::new();
    let mut pool = vec![score(0)];
    while let Some(next) = pool.iter().find(|n| !expanded.contains(&(n.id as usize))).copied() {
        let u = next.id as usize;
        expanded.insert(u);
        for &v in &graph.adjacency[u] {
            if seen.insert(v as usize) {
                pool.push(score(v as usize));
            }
        }
        keep_best(&mut pool, width, farthest_first);
    }
    pool.truncate(k);
    Ok(pool
        .into_iter()
        .map(|n| Neighbor::new(set.id(n.id as usize), n.distance))
        .collect())
}

/// Builds the graph with [`DEFAULT_DEGREE`] and answers one query.
pub fn rng_dissimilar_baseline<S: Scalar>(
    set: &VectorSet<S>,
    q: &[S],
    k: usize,
    metric: Metric,
) -> Result<Vec<Neighbor<S>>> {
    let graph = build_farthest_graph(set, metric, DEFAULT_DEGREE)?;
    search_farthest_graph(&graph, set, q, k)
}
