//! Analytic simulator for a mesh-of-PE near-memory LLM decoding accelerator.
//!
//! The library is organized around five subsystems:
//!
//! - [`attention`] / [`norm`]: tiled-attention numerics (online softmax,
//!   partial-state combining, latent-attention matrix absorption) and
//!   pairwise normalization-statistic merging, each paired with a naive
//!   reference path for validation.
//! - [`collectives`]: planners for the inter-PE communication flows on an
//!   m×m mesh (axis all-reduce/all-gather, 2D reduce-scatter, query
//!   replication, tree-based key/value delivery) plus an analytic
//!   link-occupancy cost model and a symbolic-payload executor.
//! - [`blocks`]: blockwise KV cache tables, the spatially-aware block
//!   allocator, a coarse full-length-static baseline, and the
//!   fragmentation/load-balance metrics.
//! - [`device`] / [`prefill`]: per-iteration latency/energy model of one
//!   device (roofline PE compute, operator composition, parametric
//!   inter-device term) and the prefill KV-transfer overlap model.
//! - [`serving`]: Poisson workload generation and the discrete-event
//!   decoding-instance simulation with continuous batching.
//!
//! [`config`] holds the unified run configuration and named presets.

pub mod attention;
pub mod blocks;
pub mod collectives;
pub mod config;
pub mod device;
pub mod mesh;
pub mod norm;
pub mod prefill;
pub mod serving;
pub mod tensor;
