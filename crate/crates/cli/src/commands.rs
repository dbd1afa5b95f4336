use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use bpann::bench::{file_checksum, reorder, run_config, temporal_sort, BenchConfig, BenchMeta, BenchReport};
use bpann::texmex::{read_ivecs, write_ivecs};
use bpann::views::{serve_stream, write_survival_log, ExhaustionPolicy, StreamParams, StreamReport};
use bpann::{
    brute_force_knn, build_skip_edges, build_tree, deserialize, hcluster, ingest, open_index, read_layout, search,
    search_dissimilar, serialize, BuildParams, Disk, EdgeParams, Error, KMeansParams, Metric, OpenOptions,
    SearchParams, VecFormat, Vectors,
};
use rayon::prelude::*;

use crate::config::Config;
use crate::{BenchArgs, BuildArgs, GroundtruthArgs, QueryArgs, VerifyArgs, ViewDemoArgs};

const DEFAULT_K: usize = 10;
const DEFAULT_BETA: usize = 32;
const DEFAULT_K_VIEW: usize = 1000;

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Error::Usage(msg.into()).into()
}

fn required(path: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    path.ok_or_else(|| usage(format!("--{flag} is required")))
}

fn load_vectors(path: &Path) -> Result<Vectors> {
    let format = VecFormat::from_path(path)
        .filter(|f| *f != VecFormat::Ivecs)
        .ok_or_else(|| usage(format!("{}: expected a .fvecs or .bvecs file", path.display())))?;
    ingest(path, format).with_context(|| format!("loading {}", path.display()))
}

fn parse_metric(name: Option<String>) -> Result<Metric> {
    Ok(name.as_deref().unwrap_or("euclidean").parse::<Metric>()?)
}

fn open_disk(path: &Path, cache_bytes: u64) -> Result<Disk> {
    let options = OpenOptions {
        cache_capacity_bytes: cache_bytes,
        ..Default::default()
    };
    open_index(path, options).with_context(|| format!("opening {}", path.display()))
}

/// Refinement is on by default only when the index carries skip edges.
fn default_d_edge(index: &Disk) -> usize {
    index.layout().edge_params().map_or(0, |p| p.d_edge)
}

fn load_truth(path: &Path) -> Result<Vec<Vec<u64>>> {
    let rows = read_ivecs(path).with_context(|| format!("loading {}", path.display()))?;
    rows.into_iter()
        .map(|r| {
            r.into_iter()
                .map(|id| {
                    u64::try_from(id).map_err(|_| Error::Format(format!("negative id {id} in ground truth")).into())
                })
                .collect()
        })
        .collect()
}

fn limit_queries(queries: Vectors, limit: Option<usize>) -> Result<Vectors> {
    match limit {
        Some(n) if n < queries.len() => Ok(reorder(&queries, &(0..n).collect::<Vec<_>>())?),
        _ => Ok(queries),
    }
}

pub fn build(args: BuildArgs, cfg: &Config) -> Result<()> {
    let sec = cfg.section("build");
    let data = required(sec.opt(args.data, "data")?, "data")?;
    let out = required(sec.opt(args.out, "out")?, "out")?;
    let metric = parse_metric(sec.opt(args.metric, "metric")?)?;
    let params = BuildParams {
        kappa_leaf: sec.pick(args.kappa_leaf, "kappa_leaf", 2048)?,
        kappa_inner: sec.pick(args.kappa_inner, "kappa_inner", 1024)?,
        metric,
        seed: sec.pick(args.seed, "seed", 0)?,
    };
    let tau = sec.pick(args.tau, "tau", 2048)?;
    let kmeans = KMeansParams {
        k: sec.pick(args.clusters, "clusters", 10)?,
        max_iters: sec.pick(args.max_iters, "max_iters", 25)?,
        seed: params.seed,
        ..Default::default()
    };
    let edges = EdgeParams {
        d_edge: sec.pick(args.d_edge, "d_edge", 128)?,
        s_leaf: sec.pick(args.s_leaf, "s_leaf", 512)?,
    };
    let no_edges = sec.switch(args.no_edges, "no_edges")?;
    let page_size = sec.pick(args.page_size, "page_size", bpann::storage::DEFAULT_PAGE_SIZE)?;
    bpann::storage::check_page_size(page_size)?;

    let set = load_vectors(&data)?;
    if set.is_empty() {
        return Err(usage(format!("{} holds no vectors", data.display())));
    }
    let t = Instant::now();
    let hierarchy = hcluster(&set, tau, &kmeans, metric)?;
    let cluster_s = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let tree = build_tree(&hierarchy, &set, &params)?;
    let tree_s = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let graph = if no_edges {
        None
    } else {
        Some(build_skip_edges(&tree, &edges)?)
    };
    let edges_s = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let layout = serialize(&tree, graph.as_ref(), &out, page_size)?;
    let write_s = t.elapsed().as_secs_f64();

    let total = cluster_s + tree_s + edges_s + write_s;
    println!(
        "built {} vectors (dim {}, {}) into {} nodes, height {}",
        tree.len(),
        tree.dim(),
        metric,
        tree.nodes().len(),
        tree.height()
    );
    println!("{:<12}{:>10}{:>8}", "phase", "seconds", "share");
    for (name, s) in [
        ("clustering", cluster_s),
        ("tree", tree_s),
        ("skip edges", edges_s),
        ("write", write_s),
    ] {
        println!("{name:<12}{s:>10.3}{:>7.1}%", 100.0 * s / total.max(f64::MIN_POSITIVE));
    }
    if let Some(g) = &graph {
        println!(
            "skip edges: {} distance evaluations, max degree {}",
            g.distance_evals,
            g.max_degree()
        );
    }
    println!("wrote {} ({} directory entries)", out.display(), layout.directory.len());
    Ok(())
}

pub fn groundtruth(args: GroundtruthArgs, cfg: &Config) -> Result<()> {
    let sec = cfg.section("groundtruth");
    let data = required(sec.opt(args.data, "data")?, "data")?;
    let queries = required(sec.opt(args.queries, "queries")?, "queries")?;
    let out = required(sec.opt(args.out, "out")?, "out")?;
    let k = sec.pick(args.k, "k", 100)?;
    let metric = parse_metric(sec.opt(args.metric, "metric")?)?;
    let set = load_vectors(&data)?;
    let queries = load_vectors(&queries)?;
    if queries.dim() != set.dim() && !queries.is_empty() {
        return Err(usage(format!(
            "query dim {} differs from data dim {}",
            queries.dim(),
            set.dim()
        )));
    }
    let rows: Vec<Vec<i32>> = (0..queries.len())
        .into_par_iter()
        .map(|p| -> Result<Vec<i32>> {
            brute_force_knn(&set, queries.row(p), k, metric)?
                .iter()
                .map(|n| i32::try_from(n.id).map_err(|_| usage(format!("id {} does not fit ivecs", n.id))))
                .collect()
        })
        .collect::<Result<_>>()?;
    write_ivecs(&out, &rows)?;
    println!("wrote {} rows of {k} ids to {}", rows.len(), out.display());
    Ok(())
}

pub fn bench(args: BenchArgs, cfg: &Config, threads: usize) -> Result<()> {
    let sec = cfg.section("bench");
    let index_path = required(sec.opt(args.index, "index")?, "index")?;
    let queries_path = required(sec.opt(args.queries, "queries")?, "queries")?;
    let file_len = std::fs::metadata(&index_path)
        .with_context(|| format!("opening {}", index_path.display()))?
        .len();
    let cache_bytes = match (
        sec.opt(args.cache_bytes, "cache_bytes")?,
        sec.opt(args.cache_fraction, "cache_fraction")?,
    ) {
        (Some(b), _) => b,
        (None, Some(f)) if f > 0.0 => (file_len as f64 * f) as u64,
        (None, Some(f)) => return Err(usage(format!("cache fraction {f} must be positive"))),
        (None, None) => u64::MAX,
    };
    let index = open_disk(&index_path, cache_bytes)?;
    let metric = index.metric();
    let k = sec.pick(args.k, "k", DEFAULT_K)?;
    let d_edge = sec.pick(args.d_edge, "d_edge", default_d_edge(&index))?;
    let mut queries = limit_queries(load_vectors(&queries_path)?, sec.opt(args.limit, "limit")?)?;
    let sorted = sec.switch(args.temporal_sort, "temporal_sort")?;
    let order = if sorted {
        temporal_sort(&queries, metric)?
    } else {
        (0..queries.len()).collect()
    };
    queries = reorder(&queries, &order)?;

    if sec.switch(args.views, "views")? {
        let data = sec.opt(args.data, "data")?.map(|p| load_vectors(&p)).transpose()?;
        let stream = StreamParams {
            k_view: sec.pick(args.k_view, "k_view", DEFAULT_K_VIEW)?,
            search: SearchParams {
                k,
                beta: DEFAULT_BETA,
                d_edge,
                dissimilar: false,
            },
            edges: index.layout().edge_params().unwrap_or_default(),
        };
        let lambda = sec.pick(args.lambda, "lambda", 2.0)?;
        let report = run_views(&index, &queries, &stream, data.as_ref(), lambda)?;
        return finish_views(&report, sec.opt(args.survival_log, "survival_log")?);
    }

    let truth_path = required(sec.opt(args.groundtruth, "groundtruth")?, "groundtruth")?;
    let truth = load_truth(&truth_path)?;
    let truth: Vec<Vec<u64>> = order
        .iter()
        .map(|&p| truth.get(p).cloned().unwrap_or_default())
        .collect();
    let betas = sec.pick(args.beta, "beta", vec![DEFAULT_BETA])?;
    let batches = sec.pick(args.batch, "batch", vec![1])?;
    let warmup = !sec.switch(args.no_warmup, "no_warmup")?;
    let mut rows = Vec::new();
    for &beta in &betas {
        for &batch in &batches {
            let config = BenchConfig {
                search: SearchParams {
                    k,
                    beta,
                    d_edge,
                    dissimilar: false,
                },
                batch,
            };
            rows.push(run_config(&index, &queries, &truth, &config, warmup)?);
        }
    }
    let report = BenchReport {
        meta: BenchMeta::now(
            queries_path.display().to_string(),
            metric,
            threads,
            file_checksum(&index_path)?,
        ),
        rows,
    };
    print!("{}", report.table());
    if let Some(out) = sec.opt(args.out, "out")? {
        report.write_jsonl(&out)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn run_views(
    index: &Disk,
    queries: &Vectors,
    stream: &StreamParams,
    data: Option<&Vectors>,
    lambda: f64,
) -> Result<StreamReport<f32>> {
    let policy = match data {
        Some(set) => ExhaustionPolicy::Oracle(set),
        None => ExhaustionPolicy::Radius { lambda },
    };
    Ok(serve_stream(index, queries, stream, &policy)?)
}

fn finish_views(report: &StreamReport<f32>, log: Option<PathBuf>) -> Result<()> {
    println!(
        "queries {}  views {}  mean survival {:.2}",
        report.answers.len(),
        report.views_created(),
        report.mean_survival()
    );
    let recalls: Vec<f64> = report.answers.iter().filter_map(|a| a.recall).collect();
    if !recalls.is_empty() {
        println!("mean recall {:.4}", recalls.iter().sum::<f64>() / recalls.len() as f64);
    }
    if let Some(path) = log {
        write_survival_log(&path, &report.survival)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

pub fn query(args: QueryArgs, cfg: &Config) -> Result<()> {
    let sec = cfg.section("query");
    let index_path = required(sec.opt(args.index, "index")?, "index")?;
    let index = open_disk(&index_path, sec.pick(args.cache_bytes, "cache_bytes", u64::MAX)?)?;
    let q: Vec<f32> = match (args.vector, sec.opt(args.queries, "queries")?) {
        (Some(v), _) => v,
        (None, Some(path)) => {
            let set = load_vectors(&path)?;
            let row = sec.pick(args.row, "row", 0)?;
            if row >= set.len() {
                return Err(usage(format!("row {row} out of range for {} queries", set.len())));
            }
            set.row(row).to_vec()
        }
        (None, None) => return Err(usage("give --vector or --queries")),
    };
    let params = SearchParams {
        k: sec.pick(args.k, "k", DEFAULT_K)?,
        beta: sec.pick(args.beta, "beta", DEFAULT_BETA)?,
        d_edge: sec.pick(args.d_edge, "d_edge", default_d_edge(&index))?,
        dissimilar: sec.switch(args.dissimilar, "dissimilar")?,
    };
    let (hits, stats) = if params.dissimilar {
        search_dissimilar(&index, &q, &params, None)?
    } else {
        search(&index, &q, &params)?
    };
    println!("rank\tid\tdistance");
    for (rank, h) in hits.iter().enumerate() {
        println!("{}\t{}\t{}", rank + 1, h.id, h.distance);
    }
    println!(
        "nodes {}  hops {}  distance evals {}  disk reads {}  cache hits {}",
        stats.nodes_visited, stats.hops, stats.distance_evals, stats.disk_reads, stats.cache_hits
    );
    Ok(())
}

pub fn verify(args: VerifyArgs, cfg: &Config) -> Result<()> {
    let sec = cfg.section("verify");
    let path = required(sec.opt(args.index, "index")?, "index")?;
    let layout = read_layout(&path)?;
    if !layout.offsets_aligned() {
        return Err(Error::Integrity("node records are not page aligned".into()).into());
    }
    let tree = deserialize::<f32>(&path)?;
    tree.verify()
        .map_err(|v| Error::Integrity(format!("tree invariant violated: {v}")))?;
    let children = tree.nodes().iter().map(|n| (n.id, n.children().to_vec())).collect();
    println!(
        "ok: {} vectors, {} nodes, height {}, page {} B, sibling locality {:.3}, edges {}",
        tree.len(),
        tree.nodes().len(),
        tree.height(),
        layout.page_size,
        layout.sibling_locality(&children),
        if layout.has_edges { "yes" } else { "no" }
    );
    Ok(())
}

pub fn view_demo(args: ViewDemoArgs, cfg: &Config) -> Result<()> {
    let sec = cfg.section("view-demo");
    let index_path = required(sec.opt(args.index, "index")?, "index")?;
    let index = open_disk(&index_path, u64::MAX)?;
    let queries_path = required(sec.opt(args.queries, "queries")?, "queries")?;
    let mut queries = limit_queries(load_vectors(&queries_path)?, sec.opt(args.limit, "limit")?)?;
    if sec.switch(args.temporal_sort, "temporal_sort")? {
        queries = reorder(&queries, &temporal_sort(&queries, index.metric())?)?;
    }
    let data = sec.opt(args.data, "data")?.map(|p| load_vectors(&p)).transpose()?;
    let stream = StreamParams {
        k_view: sec.pick(args.k_view, "k_view", DEFAULT_K_VIEW)?,
        search: SearchParams {
            k: sec.pick(args.k, "k", DEFAULT_K)?,
            beta: sec.pick(args.beta, "beta", DEFAULT_BETA)?,
            d_edge: default_d_edge(&index),
            dissimilar: false,
        },
        edges: index.layout().edge_params().unwrap_or_default(),
    };
    let lambda = sec.pick(args.lambda, "lambda", 2.0)?;
    let report = run_views(&index, &queries, &stream, data.as_ref(), lambda)?;
    finish_views(&report, sec.opt(args.survival_log, "survival_log")?)
}
