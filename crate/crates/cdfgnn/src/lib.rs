//! Cache-accelerated distributed full-batch GNN training, desk scale.
//!
//! The crate trains a graph convolutional network over a vertex-cut
//! partition with one thread per simulated worker. Replicated vertex rows
//! are kept in sync by gather/scatter rounds; an adaptive cache suppresses
//! messages for rows that barely moved, and payloads can be linearly
//! quantized. A single-device oracle with identical conventions makes every
//! distributed run checkable.
//!
//! Module map:
//! - [`tensor`]: dense/CSR matrices and the kernels everything shares.
//! - [`graph`]: graph storage, file formats, synthetic fixtures.
//! - [`quant`]: linear quantization codec for sync payloads.
//! - [`cache`]: drift-threshold cache tables and the adaptive controller.
//! - [`partition`]: streaming vertex-cut partitioner and plan files.
//! - [`engine`]: model parameters, layer kernels, loss, optimizers.
//! - [`runtime`]: the bulk-synchronous multi-worker training loop.
//! - [`oracle`]: the single-device reference trainer.
//! - [`metrics`], [`config`], [`cli`], [`error`]: reporting and plumbing.

pub mod cache;
pub mod cli;
pub mod config;
pub mod engine;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod oracle;
pub mod partition;
pub mod quant;
pub mod runtime;
pub mod tensor;

pub use error::{Error, Result};
