//! Exact k-NN by exhaustive scan, and recall against it.

use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::{norm, Metric};
use crate::scalar::Scalar;
use crate::vectors::VectorSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor<S> {
    pub id: u64,
    pub distance: S,
}

impl<S: Scalar> Neighbor<S> {
    pub fn new(id: u64, distance: S) -> Self {
        Neighbor { id, distance }
    }
}

/// Ascending distance, ties by ascending id.
#[inline]
pub fn nearest_first<S: Scalar>(a: &Neighbor<S>, b: &Neighbor<S>) -> Ordering {
    a.distance
        .partial_cmp(&b.distance)
        .unwrap_or(Ordering::Equal)
        .then(a.id.cmp(&b.id))
}

/// Descending distance, ties by ascending id.
#[inline]
pub fn farthest_first<S: Scalar>(a: &Neighbor<S>, b: &Neighbor<S>) -> Ordering {
    b.distance
        .partial_cmp(&a.distance)
        .unwrap_or(Ordering::Equal)
        .then(a.id.cmp(&b.id))
}

/// Keeps the `k` best of `items` under `order`, sorted.
pub(crate) fn keep_best<S: Scalar>(
    items: &mut Vec<Neighbor<S>>,
    k: usize,
    order: fn(&Neighbor<S>, &Neighbor<S>) -> Ordering,
) {
    if items.len() > k && k > 0 {
        items.select_nth_unstable_by(k - 1, order);
        items.truncate(k);
    } else if k == 0 {
        items.clear();
    }
    items.sort_unstable_by(order);
}

pub(crate) fn check_query<S: Scalar>(q: &[S], dim: usize, metric: Metric) -> Result<S> {
    if q.len() != dim {
        return Err(Error::usage(format!(
            "query has dimension {}, index has {dim}",
            q.len()
        )));
    }
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("query contains a non-finite value"));
    }
    let n = norm(q);
    if metric == Metric::Cosine && n == S::zero() {
        return Err(Error::domain("zero query vector under cosine"));
    }
    Ok(n)
}

fn scan<S: Scalar>(
    set: &VectorSet<S>,
    q: &[S],
    k: usize,
    metric: Metric,
    order: fn(&Neighbor<S>, &Neighbor<S>) -> Ordering,
) -> Result<Vec<Neighbor<S>>> {
    if k == 0 {
        return Err(Error::usage("k must be positive"));
    }
    if k > set.len() {
        return Err(Error::usage(format!("k = {k} exceeds dataset size {}", set.len())));
    }
    let qn = check_query(q, set.dim(), metric)?;
    let mut all: Vec<Neighbor<S>> = (0..set.len())
        .map(|p| Neighbor::new(set.id(p), metric.with_norms(q, qn, set.row(p), set.row_norm(p))))
        .collect();
    keep_best(&mut all, k, order);
    Ok(all)
}

/// The exact `k` nearest vectors, ascending, ties by id.
pub fn brute_force_knn<S: Scalar>(set: &VectorSet<S>, q: &[S], k: usize, metric: Metric) -> Result<Vec<Neighbor<S>>> {
    scan(set, q, k, metric, nearest_first)
}

/// The exact `k` farthest vectors, descending, ties by id.
pub fn brute_force_farthest<S: Scalar>(
    set: &VectorSet<S>,
    q: &[S],
    k: usize,
    metric: Metric,
) -> Result<Vec<Neighbor<S>>> {
    scan(set, q, k, metric, farthest_first)
}

/// `|ids(approx) ∩ ids(truth)| / |truth|`.
pub fn recall_at<S>(approx: &[Neighbor<S>], truth: &[Neighbor<S>]) -> Result<f64> {
    recall_ids(
        approx.iter().map(|n| n.id),
        &truth.iter().map(|n| n.id).collect::<Vec<_>>(),
    )
}

/// Id-level recall, for ground truth loaded from ivecs files.
pub fn recall_ids(approx: impl IntoIterator<Item = u64>, truth: &[u64]) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::usage("ground truth is empty"));
    }
    let truth: HashSet<u64> = truth.iter().copied().collect();
    let hits: HashSet<u64> = approx.into_iter().filter(|id| truth.contains(id)).collect();
    Ok(hits.len() as f64 / truth.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ns(ids: &[u64]) -> Vec<Neighbor<f32>> {
        ids.iter().map(|&id| Neighbor::new(id, 0.0)).collect()
    }

    #[test]
    fn three_point_hand_check() {
        let set = VectorSet::from_flat(2, vec![0.0f32, 0.0, 1.0, 0.0, 5.0, 0.0]).unwrap();
        let r = brute_force_knn(&set, &[0.9, 0.0], 1, Metric::Euclidean).unwrap();
        assert_eq!(r[0].id, 1);
    }

    #[test]
    fn stored_vector_is_its_own_nearest() {
        let set = VectorSet::from_flat(2, vec![0.5f32, 2.0, 1.0, 0.0, 5.0, 0.0]).unwrap();
        let r = brute_force_knn(&set, &[5.0, 0.0], 1, Metric::Euclidean).unwrap();
        assert_eq!((r[0].id, r[0].distance), (2, 0.0));
    }

    #[test]
    fn matches_full_sort_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..200 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let set = VectorSet::from_flat(8, data.clone()).unwrap();
        for metric in [Metric::Euclidean, Metric::Cosine] {
            let got = brute_force_knn(&set, &q, 10, metric).unwrap();
            let mut reference: Vec<(f32, u64)> = data
                .chunks_exact(8)
                .enumerate()
                .map(|(i, row)| (crate::metric::distance(&q, row, metric).unwrap(), i as u64))
                .collect();
            reference.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let want: Vec<u64> = reference[..10].iter().map(|r| r.1).collect();
            assert_eq!(got.iter().map(|n| n.id).collect::<Vec<_>>(), want);
        }
    }

    #[test]
    fn ties_break_by_id() {
        let set = VectorSet::from_flat(1, vec![1.0f32, -1.0, 1.0, 3.0]).unwrap();
        let r = brute_force_knn(&set, &[0.0], 3, Metric::Euclidean).unwrap();
        assert_eq!(r.iter().map(|n| n.id).collect::<Vec<_>>(), vec![0, 1, 2]);
        let r = brute_force_farthest(&set, &[0.0], 2, Metric::Euclidean).unwrap();
        assert_eq!(r.iter().map(|n| n.id).collect::<Vec<_>>(), vec![3, 0]);
    }

    #[test]
    fn k_larger_than_set_is_usage_error() {
        let set = VectorSet::from_flat(1, vec![1.0f32]).unwrap();
        assert!(matches!(
            brute_force_knn(&set, &[0.0], 2, Metric::Euclidean),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn recall_examples() {
        let truth = ns(&(0..10).collect::<Vec<_>>());
        assert_eq!(recall_at(&truth, &truth).unwrap(), 1.0);
        assert_eq!(recall_at(&ns(&(10..20).collect::<Vec<_>>()), &truth).unwrap(), 0.0);
        let approx = ns(&[0, 1, 2, 3, 4, 5, 6, 97, 98, 99]);
        assert!((recall_at(&approx, &truth).unwrap() - 0.7).abs() < 1e-12);
        assert!(matches!(recall_at(&truth, &[]), Err(Error::Usage(_))));
    }

    proptest! {
        #[test]
        fn knn_sorted_and_unique(data in prop::collection::vec(-5.0f32..5.0, 3 * 40), k in 1usize..40) {
            let set = VectorSet::from_flat(3, data).unwrap();
            let r = brute_force_knn(&set, &[0.1, 0.2, 0.3], k, Metric::Euclidean).unwrap();
            prop_assert_eq!(r.len(), k);
            prop_assert!(r.windows(2).all(|w| nearest_first(&w[0], &w[1]) == Ordering::Less));
        }

        #[test]
        fn recall_ignores_order(mut a in prop::collection::vec(0u64..30, 1..15), mut t in prop::collection::vec(0u64..30, 1..15)) {
            t.sort_unstable();
            t.dedup();
            let before = recall_at(&ns(&a), &ns(&t)).unwrap();
            a.reverse();
            t.reverse();
            prop_assert_eq!(before, recall_at(&ns(&a), &ns(&t)).unwrap());
        }
    }
}
