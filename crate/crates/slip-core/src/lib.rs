//! Dual-encoder contrastive pretraining with structural supervision from a
//! co-purchase instance graph.
//!
//! The pipeline in dependency order:
//!
//! * [`graph`] builds the item-item instance graph from a purchase log
//!   (bipartite projection, k-core filtering, hop distances, contrastive masks).
//! * [`tensor`] is a small dense f64 tensor library with reverse-mode
//!   automatic differentiation on a tape, plus a finite-difference checker.
//! * [`encoders`] maps raw per-item features into a shared embedding space.
//! * [`gat`] runs per-modality graph attention stacks over batch subgraphs and
//!   fuses them into structural embeddings.
//! * [`losses`] implements the symmetric InfoNCE objective, the graph
//!   contrastive term, the auxiliary classification term, and their weighted
//!   combination.
//! * [`sampling`], [`optim`], and [`trainer`] cover subgraph batch sampling,
//!   Adam with layer-wise learning rates and warmup/decay scheduling, and the
//!   training loop with early stopping.
//! * [`eval`] computes cross-modal retrieval metrics and hop-similarity
//!   statistics.
//! * [`synth`] generates labeled synthetic datasets with a planted cluster and
//!   complement-pair structure; [`io`] reads and writes every on-disk format.
//! * [`ablate`] runs batch-size-by-variant ablation grids.

pub mod ablate;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gat;
pub mod graph;
pub mod io;
pub mod losses;
pub mod model;
pub mod optim;
pub mod sampling;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Result, SlipError};
