//! `bpann`: build, query, verify and benchmark B+tree ANN indexes.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::Config;

const DEFAULT_THREADS: usize = 10;

#[derive(Debug, Parser)]
#[command(name = "bpann", version, about = "Disk-resident B+tree ANN index")]
struct Cli {
    /// TOML file with one table per subcommand; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for search and build.
    #[arg(long, global = true, env = "BPANN_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Cluster a dataset, build the tree and skip edges, write the index file.
    Build(BuildArgs),
    /// Exact k nearest neighbors of each query, written as ivecs.
    Groundtruth(GroundtruthArgs),
    /// Recall, QPS, hops and I/O over a sweep of beta and batch size.
    Bench(BenchArgs),
    /// Answer a single query and print its neighbors.
    Query(QueryArgs),
    /// Check tree invariants and file layout.
    Verify(VerifyArgs),
    /// Serve a query stream from views and report view survival.
    ViewDemo(ViewDemoArgs),
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Dataset (.fvecs or .bvecs).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Index file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub metric: Option<String>,
    #[arg(long)]
    pub kappa_leaf: Option<usize>,
    #[arg(long)]
    pub kappa_inner: Option<usize>,
    /// Largest partition the clustering leaves unsplit.
    #[arg(long)]
    pub tau: Option<usize>,
    /// Clusters per k-means split.
    #[arg(long)]
    pub clusters: Option<usize>,
    /// k-means rounds per split.
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub d_edge: Option<usize>,
    #[arg(long)]
    pub s_leaf: Option<usize>,
    /// Skip the skip-edge phase.
    #[arg(long)]
    pub no_edges: bool,
    #[arg(long)]
    pub page_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GroundtruthArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub metric: Option<String>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Ground truth ids (.ivecs).
    #[arg(long)]
    pub groundtruth: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Comma-separated beta values.
    #[arg(long, value_delimiter = ',')]
    pub beta: Option<Vec<usize>>,
    /// Comma-separated batch sizes.
    #[arg(long, value_delimiter = ',')]
    pub batch: Option<Vec<usize>>,
    #[arg(long)]
    pub d_edge: Option<usize>,
    /// Cache cap in bytes.
    #[arg(long, conflicts_with = "cache_fraction")]
    pub cache_bytes: Option<u64>,
    /// Cache cap as a fraction of the index file size.
    #[arg(long)]
    pub cache_fraction: Option<f64>,
    /// Use only the first N queries.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Order queries as a nearest-unused chain before running.
    #[arg(long)]
    pub temporal_sort: bool,
    /// Serve the stream through views instead of the sweep.
    #[arg(long)]
    pub views: bool,
    #[arg(long)]
    pub k_view: Option<usize>,
    /// Base dataset; enables exact exhaustion checks in views mode.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Line-delimited report output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub survival_log: Option<PathBuf>,
    /// Skip the untimed warm-up pass.
    #[arg(long)]
    pub no_warmup: bool,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Comma-separated components.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, conflicts_with = "queries")]
    pub vector: Option<Vec<f32>>,
    /// Query file; pick a row with --row.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long)]
    pub row: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub beta: Option<usize>,
    #[arg(long)]
    pub d_edge: Option<usize>,
    /// Return the farthest vectors.
    #[arg(long)]
    pub dissimilar: bool,
    #[arg(long)]
    pub cache_bytes: Option<u64>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub index: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ViewDemoArgs {
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Base dataset; enables exact exhaustion checks.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub k_view: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub beta: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub temporal_sort: bool,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub survival_log: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use bpann::Error;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Usage(_) => 2,
                Error::Format(_) => 3,
                Error::Integrity(_) => 4,
                Error::Storage { .. } | Error::Io(_) => 5,
                Error::Domain(_) => 6,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 5;
        }
    }
    1
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = Config::load(cli.config.as_deref())?;
    let threads = match cli.threads {
        Some(t) => t,
        None => cfg.top("threads")?.unwrap_or(DEFAULT_THREADS),
    };
    if threads == 0 {
        return Err(bpann::Error::Usage("threads must be positive".into()).into());
    }
    // Only fails if a pool already exists, which cannot happen here.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    match cli.command {
        Command::Build(a) => commands::build(a, &cfg),
        Command::Groundtruth(a) => commands::groundtruth(a, &cfg),
        Command::Bench(a) => commands::bench(a, &cfg, threads),
        Command::Query(a) => commands::query(a, &cfg),
        Command::Verify(a) => commands::verify(a, &cfg),
        Command::ViewDemo(a) => commands::view_demo(a, &cfg),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
