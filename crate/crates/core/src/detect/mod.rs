//! Local event detection inside leaf cells: cosine similarity graphs,
//! modularity and Louvain community detection.

pub mod graph;
pub mod local;
pub mod louvain;

pub use graph::{build_similarity_graph, SimilarityGraph, WeightedGraph};
pub use local::{apply_outcome, detect_local_events, DetectContext, DetectParams, LeafOutcome};
pub use louvain::{
    kl_refine, louvain, louvain_ordered, merge_refine, modularity, Partition, VisitOrder,
};
