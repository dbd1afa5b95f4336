//! Disk-resident approximate nearest neighbor search over a B+tree whose
//! keys are cluster centroids and whose leaves hold vector blocks.
//!
//! The core types are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common `f32` case.

pub mod baseline;
pub mod bench;
pub mod cluster;
pub mod edges;
pub mod error;
pub mod metric;
pub mod oracle;
pub mod scalar;
pub mod search;
pub mod source;
pub mod storage;
pub mod texmex;
pub mod tree;
pub mod vectors;
pub mod views;

pub use baseline::{build_farthest_graph, rng_dissimilar_baseline, search_farthest_graph, FarthestGraph};
pub use cluster::{hcluster, kmeans_pp, ClusterNode, KMeansParams};
pub use edges::{avg_hops, build_skip_edges, greedy_search, refresh_skip_edges, EdgeParams, SkipEdgeGraph};
pub use error::{Error, Result};
pub use metric::{distance, distance_one_to_many, Metric};
pub use oracle::{brute_force_farthest, brute_force_knn, recall_at, Neighbor};
pub use scalar::Scalar;
pub use search::{search, search_batch, search_dissimilar, SearchParams, SearchStats};
pub use source::NodeSource;
pub use storage::{deserialize, open_index, read_layout, serialize, DiskIndex, FileLayout, OpenOptions};
pub use texmex::{ingest, VecFormat};
pub use tree::{build_tree, BPlusAnnTree, BuildParams, InsertReport, NodeId, TreeNode, TreeViolation};
pub use vectors::VectorSet;
pub use views::{create_view, serve_stream, view_search, ExhaustionPolicy, View};

pub type Tree = BPlusAnnTree<f32>;
pub type Tree64 = BPlusAnnTree<f64>;
pub type Vectors = VectorSet<f32>;
pub type Vectors64 = VectorSet<f64>;
pub type Disk = DiskIndex<f32>;
pub type Disk64 = DiskIndex<f64>;
pub type Hit = Neighbor<f32>;
