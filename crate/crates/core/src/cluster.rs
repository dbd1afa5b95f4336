//! K-means++ and the queue-driven recursive partitioner whose hierarchy seeds
//! the tree build.

use std::collections::{HashSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::{norm, squared_l2, Metric};
use crate::scalar::Scalar;
use crate::vectors::VectorSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    /// Clusters per split.
    pub k: usize,
    /// Maximum assignment/update rounds.
    pub max_iters: usize,
    pub seed: u64,
    /// Stop once no centroid moves farther than this (Euclidean).
    pub convergence_eps: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        KMeansParams {
            k: 10,
            max_iters: 25,
            seed: 0,
            convergence_eps: 1e-4,
        }
    }
}

impl KMeansParams {
    fn validate(&self, min_k: usize) -> Result<()> {
        if self.k < min_k {
            return Err(Error::usage(format!("K must be at least {min_k}, got {}", self.k)));
        }
        if self.max_iters == 0 {
            return Err(Error::usage("J (max iterations) must be at least 1"));
        }
        if self.convergence_eps.is_nan() || self.convergence_eps < 0.0 {
            return Err(Error::usage("convergence_eps must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster<S> {
    pub centroid: Vec<S>,
    pub member_ids: Vec<u64>,
}

/// Read access to the points being clustered.
pub(crate) trait Points<S: Scalar>: Sync {
    fn len(&self) -> usize;
    fn point(&self, i: usize) -> &[S];
    fn norm(&self, i: usize) -> S;
}

struct Subset<'a, S: Scalar> {
    set: &'a VectorSet<S>,
    positions: &'a [usize],
}

impl<S: Scalar> Points<S> for Subset<'_, S> {
    fn len(&self) -> usize {
        self.positions.len()
    }
    fn point(&self, i: usize) -> &[S] {
        self.set.row(self.positions[i])
    }
    fn norm(&self, i: usize) -> S {
        self.set.row_norm(self.positions[i])
    }
}

/// Row-major points held by a tree node.
pub(crate) struct Flat<'a, S> {
    pub data: &'a [S],
    pub norms: &'a [S],
    pub dim: usize,
}

impl<S: Scalar> Points<S> for Flat<'_, S> {
    fn len(&self) -> usize {
        self.norms.len()
    }
    fn point(&self, i: usize) -> &[S] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
    fn norm(&self, i: usize) -> S {
        self.norms[i]
    }
}

/// Result of one K-means run: nonempty clusters only.
pub(crate) struct Partition<S> {
    /// Row-major, one row per cluster.
    pub centroids: Vec<S>,
    /// Cluster index per input point.
    pub labels: Vec<u32>,
    pub clusters: usize,
}

impl<S: Scalar> Partition<S> {
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.clusters];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l as usize].push(i);
        }
        out
    }
}

fn mean_into<S: Scalar, P: Points<S>>(pts: &P, idx: impl Iterator<Item = usize>, dim: usize) -> Vec<S> {
    let mut acc = vec![0f64; dim];
    let mut n = 0usize;
    for i in idx {
        for (a, v) in acc.iter_mut().zip(pts.point(i)) {
            *a += v.as_f64();
        }
        n += 1;
    }
    acc.into_iter()
        .map(|a| S::from_f64_lossy(if n == 0 { 0.0 } else { a / n as f64 }))
        .collect()
}

/// K-means with K-means++ seeding (squared-distance sampling).
pub(crate) fn lloyd<S: Scalar, P: Points<S>>(
    pts: &P,
    dim: usize,
    k: usize,
    max_iters: usize,
    eps: f64,
    seed: u64,
    metric: Metric,
) -> Partition<S> {
    let n = pts.len();
    let k = k.min(n).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids: Vec<S> = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(pts.point(first));
    let seed_dist = |i: usize, c: &[S], cn: S| -> f64 {
        let d = metric.with_norms(pts.point(i), pts.norm(i), c, cn).as_f64();
        d * d
    };
    let mut d2: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| seed_dist(i, pts.point(first), pts.norm(first)))
        .collect();
    while centroids.len() < k * dim {
        let total: f64 = d2.iter().sum();
        if total.is_nan() || total <= 0.0 {
            break;
        }
        let mut target = rng.gen::<f64>() * total;
        let mut pick = n - 1;
        for (i, &w) in d2.iter().enumerate() {
            if target < w {
                pick = i;
                break;
            }
            target -= w;
        }
        let c = pts.point(pick).to_vec();
        let cn = pts.norm(pick);
        centroids.extend_from_slice(&c);
        d2.par_iter_mut()
            .enumerate()
            .for_each(|(i, d)| *d = d.min(seed_dist(i, &c, cn)));
    }
    let k = centroids.len() / dim;

    let mut labels = vec![0u32; n];
    for _ in 0..max_iters {
        let cnorms: Vec<S> = centroids.chunks_exact(dim).map(norm).collect();
        let assigned: Vec<(u32, S)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let (p, pn) = (pts.point(i), pts.norm(i));
                let mut best = (0u32, S::infinity());
                for (c, row) in centroids.chunks_exact(dim).enumerate() {
                    let d = metric.with_norms(p, pn, row, cnorms[c]);
                    if d < best.1 {
                        best = (c as u32, d);
                    }
                }
                best
            })
            .collect();
        for (l, a) in labels.iter_mut().zip(&assigned) {
            *l = a.0;
        }

        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l as usize] += 1;
        }
        // Re-seed empty clusters with the point farthest from its centroid.
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let donor = (0..n).filter(|&i| counts[labels[i] as usize] > 1).max_by(|&a, &b| {
                assigned[a]
                    .1
                    .partial_cmp(&assigned[b].1)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(b.cmp(&a))
            });
            if let Some(i) = donor {
                counts[labels[i] as usize] -= 1;
                labels[i] = c as u32;
                counts[c] = 1;
            }
        }

        let mut next = Vec::with_capacity(k * dim);
        let mut members = vec![Vec::new(); k];
        for (i, &l) in labels.iter().enumerate() {
            members[l as usize].push(i);
        }
        let mut movement = 0f64;
        for (c, m) in members.iter().enumerate() {
            let old = &centroids[c * dim..(c + 1) * dim];
            let new = if m.is_empty() {
                old.to_vec()
            } else {
                mean_into(pts, m.iter().copied(), dim)
            };
            movement = movement.max(squared_l2(old, &new).as_f64().sqrt());
            next.extend_from_slice(&new);
        }
        centroids = next;
        if movement < eps {
            break;
        }
    }

    // Drop clusters that ended up empty and relabel densely.
    let mut counts = vec![0usize; k];
    for &l in &labels {
        counts[l as usize] += 1;
    }
    let mut remap = vec![u32::MAX; k];
    let mut kept = Vec::with_capacity(centroids.len());
    let mut next = 0u32;
    for c in 0..k {
        if counts[c] > 0 {
            remap[c] = next;
            next += 1;
            kept.extend_from_slice(&centroids[c * dim..(c + 1) * dim]);
        }
    }
    for l in labels.iter_mut() {
        *l = remap[*l as usize];
    }
    Partition {
        centroids: kept,
        labels,
        clusters: next as usize,
    }
}

/// K-means++ over the vectors named by `ids`. Returns only nonempty clusters,
/// each centroid being the arithmetic mean of its members.
pub fn kmeans_pp<S: Scalar>(
    set: &VectorSet<S>,
    ids: &[u64],
    params: &KMeansParams,
    metric: Metric,
) -> Result<Vec<Cluster<S>>> {
    params.validate(1)?;
    if ids.is_empty() {
        return Err(Error::usage("cannot cluster an empty subset"));
    }
    let positions = ids
        .iter()
        .map(|&id| {
            set.position(id)
                .ok_or_else(|| Error::usage(format!("unknown vector id {id}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let pts = Subset {
        set,
        positions: &positions,
    };
    let part = lloyd(
        &pts,
        set.dim(),
        params.k,
        params.max_iters,
        params.convergence_eps,
        params.seed,
        metric,
    );
    let dim = set.dim();
    Ok(part
        .members()
        .into_iter()
        .enumerate()
        .map(|(c, m)| Cluster {
            centroid: part.centroids[c * dim..(c + 1) * dim].to_vec(),
            member_ids: m.into_iter().map(|i| ids[i]).collect(),
        })
        .collect())
}

/// One node of the clustering hierarchy. Leaves carry member ids; internal
/// nodes carry children.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterNode<S> {
    pub centroid: Vec<S>,
    pub member_ids: Vec<u64>,
    pub children: Vec<ClusterNode<S>>,
    /// Depth from the root.
    pub level: usize,
    /// Set when a partition larger than the threshold could not be split
    /// (K-means found a single cluster, e.g. all duplicates).
    pub overflow: bool,
}

impl<S: Scalar> ClusterNode<S> {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    /// Number of vectors under this node.
    pub fn count(&self) -> usize {
        if self.is_leaf() {
            self.member_ids.len()
        } else {
            self.children.iter().map(ClusterNode::count).sum()
        }
    }

    pub fn leaves(&self) -> Vec<&ClusterNode<S>> {
        let mut out = Vec::new();
        let mut stack = vec![self];
        while let Some(n) = stack.pop() {
            if n.is_leaf() {
                out.push(n);
            } else {
                stack.extend(n.children.iter().rev());
            }
        }
        out
    }

    /// Height in levels below this node (a lone leaf has depth 0).
    pub fn depth(&self) -> usize {
        self.children.iter().map(|c| c.depth() + 1).max().unwrap_or(0)
    }

    /// All member ids in DFS leaf order.
    pub fn all_ids(&self) -> Vec<u64> {
        self.leaves()
            .into_iter()
            .flat_map(|l| l.member_ids.iter().copied())
            .collect()
    }

    /// Checks that the leaves partition exactly the ids of `set`.
    pub fn check_partition(&self, set: &VectorSet<S>) -> Result<()> {
        let mut seen = HashSet::with_capacity(set.len());
        for id in self.all_ids() {
            if set.position(id).is_none() {
                return Err(Error::integrity(format!("hierarchy id {id} not in dataset")));
            }
            if !seen.insert(id) {
                return Err(Error::integrity(format!("id {id} appears in two leaves")));
            }
        }
        if seen.len() != set.len() {
            return Err(Error::integrity(format!(
                "hierarchy covers {} of {} vectors",
                seen.len(),
                set.len()
            )));
        }
        Ok(())
    }
}

struct Pending<S> {
    centroid: Vec<S>,
    positions: Vec<usize>,
    children: Vec<usize>,
    level: usize,
    overflow: bool,
}

fn split_seed(seed: u64, ordinal: u64) -> u64 {
    seed ^ ordinal.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Recursively partitions `set` until every partition holds at most `tau`
/// vectors. Oversized children go back on the queue.
pub fn hcluster<S: Scalar>(
    set: &VectorSet<S>,
    tau: usize,
    params: &KMeansParams,
    metric: Metric,
) -> Result<ClusterNode<S>> {
    params.validate(2)?;
    if tau == 0 {
        return Err(Error::usage("tau must be at least 1"));
    }
    if set.is_empty() {
        return Err(Error::usage("cannot cluster an empty dataset"));
    }
    let dim = set.dim();
    let all: Vec<usize> = (0..set.len()).collect();
    let root_centroid = mean_into(&Subset { set, positions: &all }, 0..all.len(), dim);
    let mut arena = vec![Pending {
        centroid: root_centroid,
        positions: all,
        children: Vec::new(),
        level: 0,
        overflow: false,
    }];
    let mut queue = VecDeque::new();
    if arena[0].positions.len() > tau {
        queue.push_back(0usize);
    }
    let mut splits = 0u64;
    while let Some(idx) = queue.pop_front() {
        let positions = std::mem::take(&mut arena[idx].positions);
        let part = lloyd(
            &Subset {
                set,
                positions: &positions,
            },
            dim,
            params.k,
            params.max_iters,
            params.convergence_eps,
            split_seed(params.seed, splits),
            metric,
        );
        splits += 1;
        if part.clusters < 2 {
            arena[idx].positions = positions;
            arena[idx].overflow = true;
            continue;
        }
        let level = arena[idx].level + 1;
        for (c, members) in part.members().into_iter().enumerate() {
            let child = arena.len();
            let size = members.len();
            arena.push(Pending {
                centroid: part.centroids[c * dim..(c + 1) * dim].to_vec(),
                positions: members.into_iter().map(|i| positions[i]).collect(),
                children: Vec::new(),
                level,
                overflow: false,
            });
            arena[idx].children.push(child);
            if size > tau {
                queue.push_back(child);
            }
        }
    }

    fn assemble<S: Scalar>(arena: &mut [Pending<S>], idx: usize, set: &VectorSet<S>) -> ClusterNode<S> {
        let children: Vec<usize> = std::mem::take(&mut arena[idx].children);
        let node = &mut arena[idx];
        let centroid = std::mem::take(&mut node.centroid);
        let member_ids = node.positions.iter().map(|&p| set.id(p)).collect();
        let (level, overflow) = (node.level, node.overflow);
        ClusterNode {
            centroid,
            member_ids,
            children: children.into_iter().map(|c| assemble(arena, c, set)).collect(),
            level,
            overflow,
        }
    }
    Ok(assemble(&mut arena, 0, set))
}
