//! Recall/throughput measurement over any [`NodeSource`], plus the query
//! orderings used by the benchmarks.

use std::fmt::Write as _;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::{one_to_many_into, Metric};
use crate::oracle::recall_ids;
use crate::scalar::Scalar;
use crate::search::{search, search_batch, SearchParams, SearchStats};
use crate::source::NodeSource;
use crate::vectors::VectorSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchConfig {
    #[serde(flatten)]
    pub search: SearchParams,
    /// Queries per `search_batch` call; 1 uses single-query search.
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub config: BenchConfig,
    pub recall_k_at_k: f64,
    pub qps: f64,
    pub mean_latency_ms: f64,
    pub p99_latency_ms: f64,
    pub avg_hops: f64,
    pub disk_reads: u64,
    pub cache_hits: u64,
    pub query_count: usize,
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchMeta {
    pub dataset: String,
    pub metric: String,
    pub thread_count: usize,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub index_checksum: String,
}

impl BenchMeta {
    pub fn now(dataset: impl Into<String>, metric: Metric, thread_count: usize, index_checksum: String) -> Self {
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        BenchMeta {
            dataset: dataset.into(),
            metric: metric.to_string(),
            thread_count,
            timestamp,
            index_checksum,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub meta: BenchMeta,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn table(&self) -> String {
        let mut out = String::new();
        let m = &self.meta;
        let _ = writeln!(
            out,
            "dataset={} metric={} threads={} index={}",
            m.dataset, m.metric, m.thread_count, m.index_checksum
        );
        let _ = writeln!(
            out,
            "{:>4} {:>5} {:>6} {:>6} {:>8} {:>10} {:>9} {:>9} {:>7} {:>10} {:>10}",
            "k", "beta", "d_edge", "batch", "recall", "qps", "mean_ms", "p99_ms", "hops", "reads", "hits"
        );
        for r in &self.rows {
            let c = &r.config;
            let _ = writeln!(
                out,
                "{:>4} {:>5} {:>6} {:>6} {:>8.4} {:>10.1} {:>9.3} {:>9.3} {:>7.2} {:>10} {:>10}",
                c.search.k,
                c.search.beta,
                c.search.d_edge,
                c.batch,
                r.recall_k_at_k,
                r.qps,
                r.mean_latency_ms,
                r.p99_latency_ms,
                r.avg_hops,
                r.disk_reads,
                r.cache_hits
            );
        }
        out
    }

    /// One JSON object per line: the metadata first, then each row.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::storage(path, 0, e))?;
        let mut w = BufWriter::new(file);
        let mut line = |v: serde_json::Value| -> Result<()> {
            serde_json::to_writer(&mut w, &v).map_err(|e| Error::Io(e.into()))?;
            w.write_all(b"\n").map_err(|e| Error::storage(path, 0, e))
        };
        line(serde_json::json!({ "meta": self.meta }))?;
        for r in &self.rows {
            line(serde_json::json!({ "row": r }))?;
        }
        w.flush().map_err(|e| Error::storage(path, 0, e))
    }
}

/// Runs every query once under `config` and scores it against `truth`.
/// With `warmup` the whole pass is run once untimed first.
pub fn run_config<S: Scalar, I: NodeSource<S>>(
    index: &I,
    queries: &VectorSet<S>,
    truth: &[Vec<u64>],
    config: &BenchConfig,
    warmup: bool,
) -> Result<BenchRow> {
    let k = config.search.k;
    if config.batch == 0 {
        return Err(Error::usage("batch size must be positive"));
    }
    if truth.len() < queries.len() {
        return Err(Error::usage(format!(
            "ground truth has {} rows for {} queries",
            truth.len(),
            queries.len()
        )));
    }
    if let Some(row) = truth.iter().take(queries.len()).find(|r| r.len() < k) {
        return Err(Error::usage(format!(
            "ground truth width {} is below k = {k}",
            row.len()
        )));
    }
    if queries.is_empty() {
        return Err(Error::usage("no queries"));
    }
    if warmup {
        timed_pass(index, queries, config)?;
    }
    let start = Instant::now();
    let answers = timed_pass(index, queries, config)?;
    let total_seconds = start.elapsed().as_secs_f64();

    let mut recall = 0.0;
    let mut stats = SearchStats::default();
    let mut latencies = Vec::with_capacity(answers.len());
    for (p, (ids, s, ms)) in answers.iter().enumerate() {
        recall += recall_ids(ids.iter().copied(), &truth[p][..k])?;
        stats += *s;
        latencies.push(*ms);
    }
    let n = answers.len();
    latencies.sort_by(f64::total_cmp);
    let p99 = latencies[((n as f64 * 0.99).ceil() as usize).clamp(1, n) - 1];
    Ok(BenchRow {
        config: *config,
        recall_k_at_k: recall / n as f64,
        qps: n as f64 / total_seconds,
        mean_latency_ms: latencies.iter().sum::<f64>() / n as f64,
        p99_latency_ms: p99,
        avg_hops: stats.hops as f64 / n as f64,
        disk_reads: stats.disk_reads,
        cache_hits: stats.cache_hits,
        query_count: n,
        total_seconds,
    })
}

type Answer = (Vec<u64>, SearchStats, f64);

fn timed_pass<S: Scalar, I: NodeSource<S>>(
    index: &I,
    queries: &VectorSet<S>,
    config: &BenchConfig,
) -> Result<Vec<Answer>> {
    let n = queries.len();
    let starts: Vec<usize> = (0..n).step_by(config.batch).collect();
    let chunks: Vec<Vec<Answer>> = starts
        .into_par_iter()
        .map(|lo| -> Result<Vec<Answer>> {
            let hi = (lo + config.batch).min(n);
            let t = Instant::now();
            if config.batch == 1 {
                let (hits, stats) = search(index, queries.row(lo), &config.search)?;
                let ms = t.elapsed().as_secs_f64() * 1e3;
                return Ok(vec![(hits.iter().map(|h| h.id).collect(), stats, ms)]);
            }
            let group = subset(queries, lo..hi)?;
            let out = search_batch(index, &group, &config.search)?;
            let ms = t.elapsed().as_secs_f64() * 1e3;
            Ok(out
                .into_iter()
                .map(|(hits, stats)| (hits.iter().map(|h| h.id).collect(), stats, ms))
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

fn subset<S: Scalar>(set: &VectorSet<S>, range: std::ops::Range<usize>) -> Result<VectorSet<S>> {
    let mut data = Vec::with_capacity(range.len() * set.dim());
    for p in range.clone() {
        data.extend_from_slice(set.row(p));
    }
    VectorSet::from_flat(set.dim(), data)?.with_ids(range.map(|p| set.id(p)).collect())
}

/// Rows of `set` in the given order, keeping their ids.
pub fn reorder<S: Scalar>(set: &VectorSet<S>, order: &[usize]) -> Result<VectorSet<S>> {
    let mut data = Vec::with_capacity(order.len() * set.dim());
    for &p in order {
        if p >= set.len() {
            return Err(Error::usage(format!("position {p} out of range")));
        }
        data.extend_from_slice(set.row(p));
    }
    VectorSet::from_flat(set.dim(), data)?.with_ids(order.iter().map(|&p| set.id(p)).collect())
}

/// Chain starting at query 0 that repeatedly appends the nearest unused
/// query. Exact, O(Q²); ties go to the lower position.
pub fn temporal_sort<S: Scalar>(queries: &VectorSet<S>, metric: Metric) -> Result<Vec<usize>> {
    let n = queries.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let flat = queries.to_flat();
    let norms: Vec<S> = (0..n).map(|p| queries.row_norm(p)).collect();
    let mut used = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut dists = vec![S::zero(); n];
    let mut cur = 0;
    used[0] = true;
    order.push(0);
    while order.len() < n {
        one_to_many_into(queries.row(cur), norms[cur], &flat, &norms, metric, &mut dists);
        let next = (0..n)
            .filter(|&p| !used[p])
            .min_by(|&a, &b| dists[a].partial_cmp(&dists[b]).unwrap().then(a.cmp(&b)))
            .expect("an unused query remains");
        used[next] = true;
        order.push(next);
        cur = next;
    }
    Ok(order)
}

/// A seeded permutation of `0..n`.
pub fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// xxh64 of a file's bytes, as 16 hex digits.
pub fn file_checksum(path: impl AsRef<Path>) -> Result<String> {
    use std::hash::Hasher;
    let path = path.as_ref();
    let mut file = std::fs::File::open(path).map_err(|e| Error::storage(path, 0, e))?;
    let mut hasher = twox_hash::XxHash64::with_seed(0);
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::storage(path, 0, e))?;
        if n == 0 {
            break;
        }
        hasher.write(&buf[..n]);
    }
    Ok(format!("{:016x}", hasher.finish()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{hcluster, KMeansParams};
    use crate::oracle::brute_force_knn;
    use crate::tree::{build_tree, BuildParams};
    use rand::Rng;

    fn uniform(n: usize, dim: usize, seed: u64) -> VectorSet<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VectorSet::from_flat(dim, (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn temporal_sort_walks_a_line_in_order() {
        let set = VectorSet::from_flat(1, vec![0.0f32, 5.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!(temporal_sort(&set, Metric::Euclidean).unwrap(), vec![0, 2, 4, 3, 1]);
    }

    #[test]
    fn temporal_sort_is_a_permutation() {
        let set = uniform(200, 3, 1);
        let mut order = temporal_sort(&set, Metric::Euclidean).unwrap();
        assert_eq!(order[0], 0);
        order.sort_unstable();
        assert_eq!(order, (0..200).collect::<Vec<_>>());
    }

    #[test]
    fn exhaustive_config_has_full_recall_and_consistent_qps() {
        let set = uniform(800, 4, 2);
        let params = BuildParams {
            kappa_leaf: 32,
            kappa_inner: 8,
            ..Default::default()
        };
        let h = hcluster(&set, 32, &KMeansParams::default(), Metric::Euclidean).unwrap();
        let tree = build_tree(&h, &set, &params).unwrap();
        let queries = uniform(40, 4, 3);
        let truth: Vec<Vec<u64>> = queries
            .rows()
            .map(|q| {
                brute_force_knn(&set, q, 10, Metric::Euclidean)
                    .unwrap()
                    .iter()
                    .map(|n| n.id)
                    .collect()
            })
            .collect();
        let search = SearchParams {
            k: 10,
            beta: tree.max_level_width(),
            d_edge: 0,
            dissimilar: false,
        };
        for batch in [1, 8] {
            let row = run_config(&tree, &queries, &truth, &BenchConfig { search, batch }, true).unwrap();
            assert_eq!(row.recall_k_at_k, 1.0);
            assert_eq!(row.query_count, 40);
            let implied = row.qps * row.total_seconds;
            assert!((implied - 40.0).abs() <= 0.4);
        }
        let narrow: Vec<Vec<u64>> = truth.iter().map(|r| r[..5].to_vec()).collect();
        let err = run_config(&tree, &queries, &narrow, &BenchConfig { search, batch: 1 }, false);
        assert!(matches!(err, Err(Error::Usage(_))));
    }

    #[test]
    fn report_writes_meta_then_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bench.jsonl");
        let report = BenchReport {
            meta: BenchMeta::now("toy", Metric::Euclidean, 1, "00".into()),
            rows: vec![],
        };
        report.write_jsonl(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("{\"meta\""));
        assert!(report.table().contains("recall"));
    }
}
