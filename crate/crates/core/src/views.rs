//! Memory-resident sub-trees seeded by one query's neighbors, and stream
//! serving that replaces them when they stop answering.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::edges::{build_skip_edges, EdgeParams};
use crate::error::{Error, Result};
use crate::oracle::{brute_force_knn, recall_at, Neighbor};
use crate::scalar::Scalar;
use crate::search::{search, SearchParams, SearchStats};
use crate::source::NodeSource;
use crate::tree::{BPlusAnnTree, BuildParams, NodeId, TreeNode};
use crate::vectors::VectorSet;

#[derive(Debug, Clone)]
pub struct View<S: Scalar> {
    seed_query: Vec<S>,
    k_view: usize,
    tree: BPlusAnnTree<S>,
    base_leaves: Vec<NodeId>,
    /// Distance from the seed to its `k_view`-th neighbor.
    radius: S,
    created_at: usize,
    served: usize,
}

impl<S: Scalar> View<S> {
    pub fn seed_query(&self) -> &[S] {
        &self.seed_query
    }

    pub fn k_view(&self) -> usize {
        self.k_view
    }

    /// The view's own index; it carries skip edges over the view's vectors.
    pub fn tree(&self) -> &BPlusAnnTree<S> {
        &self.tree
    }

    /// Ids of the base-index leaves the view copied.
    pub fn base_leaves(&self) -> &[NodeId] {
        &self.base_leaves
    }

    pub fn radius(&self) -> S {
        self.radius
    }

    pub fn created_at(&self) -> usize {
        self.created_at
    }

    pub fn served(&self) -> usize {
        self.served
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.tree.contains(id)
    }

    pub fn ids(&self) -> HashSet<u64> {
        self.tree
            .leaf_ids()
            .into_iter()
            .flat_map(|l| self.tree.node(l).unwrap().leaf_ids().to_vec())
            .collect()
    }
}

/// Copies every leaf holding one of the seed's `k_view` approximate
/// neighbors into a standalone in-memory index with its own skip edges.
pub fn create_view<S: Scalar, I: NodeSource<S>>(
    index: &I,
    seed: &[S],
    k_view: usize,
    search_params: &SearchParams,
    edge_params: &EdgeParams,
    created_at: usize,
) -> Result<View<S>> {
    let n = index.vector_count();
    if n == 0 {
        return Err(Error::usage("cannot create a view over an empty index"));
    }
    if k_view == 0 || k_view > n {
        return Err(Error::usage(format!("k_view = {k_view} must be in 1..={n}")));
    }
    let params = SearchParams {
        k: k_view,
        dissimilar: false,
        ..*search_params
    };
    let (hits, _) = search(index, seed, &params)?;
    let radius = hits.last().map(|h| h.distance).unwrap_or_else(S::zero);

    let mut leaves = BTreeSet::new();
    for h in &hits {
        let (leaf, _) = index
            .locate(h.id)?
            .ok_or_else(|| Error::integrity(format!("result {} has no leaf", h.id)))?;
        leaves.insert(leaf);
    }
    let mut groups: BTreeMap<Option<NodeId>, Vec<TreeNode<S>>> = BTreeMap::new();
    let mut scratch = SearchStats::default();
    for &leaf in &leaves {
        let node = index.visit(leaf, &mut scratch, TreeNode::clone)?;
        groups.entry(index.leaf_parent(leaf)?).or_default().push(node);
    }
    let build = BuildParams {
        kappa_leaf: usize::MAX,
        kappa_inner: usize::MAX,
        metric: index.metric(),
        seed: 0,
    };
    let mut tree = BPlusAnnTree::from_leaf_groups(index.dim(), build, groups.into_values().collect())?;
    let graph = build_skip_edges(&tree, edge_params)?;
    tree.set_graph(graph);
    Ok(View {
        seed_query: seed.to_vec(),
        k_view,
        tree,
        base_leaves: leaves.into_iter().collect(),
        radius,
        created_at,
        served: 0,
    })
}

/// How a view decides it no longer covers a query.
#[derive(Debug, Clone, Copy)]
pub enum ExhaustionPolicy<'a, S: Scalar> {
    /// Exhausted when none of the true neighbors (exact scan of the base
    /// dataset) is returned.
    Oracle(&'a VectorSet<S>),
    /// Exhausted when the best distance exceeds `lambda` times the view's
    /// seed radius.
    Radius { lambda: f64 },
}

impl<S: Scalar> Default for ExhaustionPolicy<'_, S> {
    fn default() -> Self {
        ExhaustionPolicy::Radius { lambda: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewAnswer<S> {
    pub neighbors: Vec<Neighbor<S>>,
    pub in_view: bool,
    /// Recall against the exact answer, in oracle mode.
    pub recall: Option<f64>,
    pub stats: SearchStats,
}

/// Searches inside the view and applies the exhaustion policy.
pub fn view_search<S: Scalar>(
    view: &View<S>,
    q: &[S],
    params: &SearchParams,
    policy: &ExhaustionPolicy<S>,
) -> Result<ViewAnswer<S>> {
    let (neighbors, stats) = search(&view.tree, q, params)?;
    let (in_view, recall) = match policy {
        ExhaustionPolicy::Oracle(set) => {
            let k = params.k.min(set.len());
            let truth = brute_force_knn(set, q, k, view.tree.metric())?;
            let r = recall_at(&neighbors, &truth)?;
            (r > 0.0, Some(r))
        }
        ExhaustionPolicy::Radius { lambda } => {
            let best = neighbors.first().map(|n| n.distance.as_f64());
            let limit = lambda * view.radius.as_f64();
            (best.is_some_and(|b| b <= limit), None)
        }
    };
    Ok(ViewAnswer {
        neighbors,
        in_view,
        recall,
        stats,
    })
}

/// Lifetime of one view in a served stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub view_index: usize,
    pub seed_query_index: usize,
    pub queries_served: usize,
    pub mean_recall: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct StreamReport<S> {
    pub answers: Vec<ViewAnswer<S>>,
    pub survival: Vec<SurvivalRecord>,
}

impl<S> StreamReport<S> {
    pub fn views_created(&self) -> usize {
        self.survival.len()
    }

    /// Mean queries served per view.
    pub fn mean_survival(&self) -> f64 {
        if self.survival.is_empty() {
            return 0.0;
        }
        self.survival.iter().map(|r| r.queries_served as f64).sum::<f64>() / self.survival.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamParams {
    pub k_view: usize,
    pub search: SearchParams,
    pub edges: EdgeParams,
}

fn close<S: Scalar>(view: &View<S>, index: usize, recalls: &[f64], out: &mut Vec<SurvivalRecord>) {
    out.push(SurvivalRecord {
        view_index: index,
        seed_query_index: view.created_at,
        queries_served: view.served,
        mean_recall: (!recalls.is_empty()).then(|| recalls.iter().sum::<f64>() / recalls.len() as f64),
    });
}

/// Serves queries in order from a view, replacing it with one seeded by the
/// failing query whenever it is exhausted.
pub fn serve_stream<S: Scalar, I: NodeSource<S>>(
    index: &I,
    queries: &VectorSet<S>,
    params: &StreamParams,
    policy: &ExhaustionPolicy<S>,
) -> Result<StreamReport<S>> {
    if queries.is_empty() {
        return Err(Error::usage("query stream is empty"));
    }
    let mut survival = Vec::new();
    let mut answers = Vec::with_capacity(queries.len());
    let mut view = create_view(index, queries.row(0), params.k_view, &params.search, &params.edges, 0)?;
    let mut recalls = Vec::new();
    for t in 0..queries.len() {
        let q = queries.row(t);
        let mut answer = view_search(&view, q, &params.search, policy)?;
        if !answer.in_view {
            close(&view, survival.len(), &recalls, &mut survival);
            recalls.clear();
            view = create_view(index, q, params.k_view, &params.search, &params.edges, t)?;
            answer = view_search(&view, q, &params.search, policy)?;
        }
        view.served += 1;
        if let Some(r) = answer.recall {
            recalls.push(r);
        }
        answers.push(answer);
    }
    close(&view, survival.len(), &recalls, &mut survival);
    Ok(StreamReport { answers, survival })
}

/// Writes one JSON object per line.
pub fn write_survival_log(path: impl AsRef<Path>, records: &[SurvivalRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{hcluster, KMeansParams};
    use crate::metric::Metric;
    use crate::search::search_dissimilar;
    use crate::tree::build_tree;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Two tight blobs around -5 and +5 on every axis; ids below `n` are blob A.
    fn blobs(n: usize, dim: usize) -> VectorSet<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut data = Vec::new();
        for center in [-5.0f32, 5.0] {
            for _ in 0..n {
                data.extend((0..dim).map(|_| center + rng.gen_range(-1.0..1.0)));
            }
        }
        VectorSet::from_flat(dim, data).unwrap()
    }

    fn index(set: &VectorSet<f32>) -> BPlusAnnTree<f32> {
        let params = BuildParams {
            kappa_leaf: 50,
            kappa_inner: 8,
            ..Default::default()
        };
        let h = hcluster(set, 50, &KMeansParams::default(), Metric::Euclidean).unwrap();
        let mut tree = build_tree(&h, set, &params).unwrap();
        tree.set_graph(build_skip_edges(&tree, &EdgeParams { d_edge: 8, s_leaf: 4 }).unwrap());
        tree
    }

    fn sp(k: usize, beta: usize) -> SearchParams {
        SearchParams {
            k,
            beta,
            d_edge: 8,
            dissimilar: false,
        }
    }

    const EP: EdgeParams = EdgeParams { d_edge: 8, s_leaf: 4 };

    #[test]
    fn total_view_copies_every_leaf() {
        let set = blobs(200, 4);
        let tree = index(&set);
        let beta = tree.max_level_width();
        let view = create_view(&tree, set.row(0), set.len(), &sp(10, beta), &EP, 0).unwrap();
        let mut leaves = tree.leaf_ids();
        leaves.sort_unstable();
        assert_eq!(view.base_leaves(), &leaves[..]);
        assert_eq!(view.len(), set.len());
    }

    #[test]
    fn single_neighbor_view_is_one_leaf() {
        let set = blobs(200, 4);
        let tree = index(&set);
        let view = create_view(&tree, set.row(7), 1, &sp(10, 4), &EP, 0).unwrap();
        assert_eq!(view.base_leaves(), &[tree.locate(7).unwrap().0]);
    }

    #[test]
    fn view_stays_in_seed_blob_and_detects_far_queries() {
        let set = blobs(300, 4);
        let tree = index(&set);
        let view = create_view(&tree, set.row(3), 100, &sp(10, 4), &EP, 0).unwrap();
        assert!(view.ids().iter().all(|&id| id < 300));

        let policy = ExhaustionPolicy::default();
        let far = view_search(&view, set.row(450), &sp(5, 4), &policy).unwrap();
        assert!(!far.in_view);
        let near = view_search(&view, set.row(3), &sp(5, 4), &policy).unwrap();
        assert!(near.in_view);
        assert!(near.neighbors.iter().all(|n| view.contains(n.id)));
    }

    #[test]
    fn seed_query_matches_base_search() {
        let set = blobs(300, 4);
        let tree = index(&set);
        let params = sp(10, 4);
        let view = create_view(&tree, set.row(20), 100, &params, &EP, 0).unwrap();
        let base = search(&tree, set.row(20), &params).unwrap().0;
        let got = view_search(&view, set.row(20), &params, &ExhaustionPolicy::Oracle(&set)).unwrap();
        assert_eq!(
            got.neighbors.iter().map(|n| n.id).collect::<Vec<_>>(),
            base.iter().map(|n| n.id).collect::<Vec<_>>()
        );
    }

    #[test]
    fn repeated_seed_uses_one_view() {
        let set = blobs(200, 4);
        let tree = index(&set);
        let rows: Vec<f32> = (0..20).flat_map(|_| set.row(5).to_vec()).collect();
        let stream = VectorSet::from_flat(4, rows).unwrap();
        let params = StreamParams {
            k_view: 50,
            search: sp(5, 4),
            edges: EP,
        };
        let report = serve_stream(&tree, &stream, &params, &ExhaustionPolicy::Oracle(&set)).unwrap();
        assert_eq!(report.views_created(), 1);
        assert_eq!(report.survival[0].queries_served, 20);
    }

    #[test]
    fn scoped_dissimilar_stays_in_view() {
        let set = blobs(300, 4);
        let tree = index(&set);
        let view = create_view(&tree, set.row(3), 100, &sp(10, 4), &EP, 0).unwrap();
        let (got, _) = search_dissimilar(&tree, set.row(3), &sp(10, 16), Some(&view)).unwrap();
        assert!(got.iter().all(|n| view.contains(n.id)));
        let (free, _) = search_dissimilar(&tree, set.row(3), &sp(10, 16), None).unwrap();
        assert!(free.iter().all(|n| n.id >= 300));
    }

    #[test]
    fn survival_log_is_line_delimited() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("survival.jsonl");
        let recs = vec![
            SurvivalRecord {
                view_index: 0,
                seed_query_index: 0,
                queries_served: 3,
                mean_recall: Some(0.5),
            },
            SurvivalRecord {
                view_index: 1,
                seed_query_index: 3,
                queries_served: 1,
                mean_recall: None,
            },
        ];
        write_survival_log(&path, &recs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let back: Vec<SurvivalRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(back, recs);
    }
}
