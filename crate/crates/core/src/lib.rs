//! Invariant subgraph extraction with environment and invariant mixup for
//! out-of-distribution graph classification.
//!
//! The pipeline: an [`extractor::Extractor`] scores edges and samples an
//! invariant subgraph per graph; [`comixup`] joins invariant subgraphs with
//! environment subgraphs from other classes to build extra training
//! environments, and mixes invariant-subgraph embeddings; [`objectives`]
//! combines per-environment risks with IRM and V-REx penalties; [`train`]
//! runs it all end to end against a message-passing [`backbone`].

pub mod autodiff;
pub mod backbone;
pub mod comixup;
pub mod compare;
pub mod error;
pub mod evaluate;
pub mod extractor;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod params;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{IgmError, Result};
pub use graph::{make_graph, split_by_mask, union_disjoint, Dataset, Graph, SplitTag, Subgraph, SubgraphSplit};
pub use model::{Checkpoint, Model};
pub use train::{Method, RunConfig};
