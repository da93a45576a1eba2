//! Simulation toolkit for sparse gated-FFN inference with flash offloading.
//!
//! The crate models the full execution stack of a predictor-gated sparse
//! FFN running on a heterogeneous mobile SoC:
//!
//! - [`model`]: synthetic gated-FFN weights, neuron bundles, and
//!   batch-size-dependent activation traces.
//! - [`ffn`]: exact dense/sparse/hybrid FFN math with a bit-exact
//!   accumulation discipline, plus two-phase per-neuron evaluation.
//! - [`quant`]: INT4 quantization schemes (per-channel, group-of-32,
//!   mixed outlier-preserving) and bundle byte accounting.
//! - [`storage`]: a calibrated UFS read-cost model and the on-flash
//!   neuron-bundle layout with per-dtype loading strategies.
//! - [`cache`]: the three-region in-memory neuron cache with
//!   dual-granularity LRU eviction.
//! - [`pipeline`]: a deterministic discrete-event scheduler for 5-stage
//!   neuron-cluster tasks over compute cores and a single I/O channel.
//! - [`planner`]: offline execution-plan generation from activation
//!   profiles and a hardware profile.
//! - [`engine`]: end-to-end decode/prefill simulation composing the
//!   modules above, including ablation harnesses.

pub mod cache;
pub mod engine;
pub mod error;
pub mod ffn;
pub mod model;
pub mod pipeline;
pub mod planner;
pub mod quant;
pub mod storage;

pub use error::{Error, Result};
