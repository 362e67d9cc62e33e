//! Spectral embeddings that survive batching.
//!
//! This crate learns graph Laplacian eigenspaces from batches: every batch
//! is embedded analytically, registered onto a shared anchor reference
//! frame by an affine map, and a small network is regressed onto the
//! aligned coordinates. New nodes are embedded with a single forward pass
//! instead of a fresh eigendecomposition.
//!
//! The pipeline end to end:
//!
//! ```
//! use specalign::dataset::{generate_toy, ToyKind};
//! use specalign::graph::GraphConfig;
//! use specalign::trainer::{train, TrainConfig};
//!
//! let data = generate_toy(ToyKind::GaussianBlobs, 300, 0.25, 7).unwrap();
//! let cfg = TrainConfig {
//!     k: 2,
//!     batch_size: 60,
//!     anchor_count: 9,
//!     iterations: 10,
//!     lr: 1e-3,
//!     lr_final: None,
//!     steps_per_batch: 1,
//!     hidden: vec![32, 32],
//!     graph: GraphConfig { k_neighbors: 6, ..Default::default() },
//!     ransac: None,
//!     seed: 7,
//!     eval_every: 0,
//!     stratified_anchors: true,
//!     skip_trivial: true,
//!     diffusion_time: 0.0,
//! };
//! let state = train(&data, &cfg, None).unwrap();
//! assert_eq!(state.history.len(), 10);
//! let coords = state.model.infer(&data.features).unwrap();
//! assert_eq!(coords.dim(), (300, 2));
//! ```

pub mod align;
pub mod config;
pub mod dataset;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod net;
pub mod spectral;
pub mod trainer;

pub use error::{Error, Result};
