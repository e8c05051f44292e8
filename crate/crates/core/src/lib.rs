//! Multi-view approximate nearest-neighbor search.
//!
//! A compact in-memory *preview* index (k-means clusters, a layered
//! routing graph over the centroids, residual product quantization with
//! cached query-independent terms) proposes `r` candidates per query; a
//! *full view* of the original vectors on disk reranks them exactly.
//!
//! ```no_run
//! use mvann::{generate_synthetic, IndexConfig, IoMode, MultiViewIndex, SearchParams};
//!
//! let data = generate_synthetic(10_000, 32, 16, 7)?;
//! let config = IndexConfig { n_cluster: 100, m: 8, ..Default::default() };
//! let index = MultiViewIndex::build(&data, config, "full.bin", IoMode::Direct)?;
//! let params = SearchParams { k: 10, r: 50, nscan: 8, ef_search: 32 };
//! let hits = index.search(data.row(0), &params)?;
//! assert_eq!(hits.neighbors[0].id, 0);
//! # Ok::<(), mvann::Error>(())
//! ```

pub mod clustering;
pub mod config;
pub mod dataset;
pub mod distance;
pub mod error;
pub mod fullview;
pub mod index;
pub mod metrics;
pub mod oracle;
pub mod pq;
pub mod routing;
mod topk;

pub use clustering::{compute_residuals, kmeans_train, ClusterModel, Residuals};
pub use config::{IndexConfig, SearchParams};
pub use dataset::{generate_synthetic, load_dataset, parse_dataset, write_dataset, DataFormat, VectorDataset};
pub use distance::l2_sq;
pub use error::{Error, Result};
pub use fullview::{write_store, FullViewStore, IoMode, RerankPlan};
pub use index::{MultiViewIndex, QueryResult, StageTimings};
pub use metrics::{code_bits, memory_cost, recall, vq, vq_improvement, Metrics};
pub use oracle::{exact_topk, Neighbor};
pub use pq::{
    scan_pq_vectors, scan_pq_vectors_naive, train_codebooks, InvertedList, InvertedLists, PQCode, PQCodebook,
    TermDLut,
};
pub use routing::{build_routing, kosaraju, GraphStats, RoutingGraph};
