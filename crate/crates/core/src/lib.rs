//! Co-exploration of wafer-scale chip configurations and LLM training
//! strategies.
//!
//! The crate is organised bottom-up:
//!
//! * [`hw_model`] describes the wafer/die/core template and enumerates
//!   area- and IO-feasible wafer configurations.
//! * [`workload`] expands dense transformer models into per-layer operator
//!   graphs with FLOP and checkpoint accounting.
//! * [`cost_model`] prices operators with a roofline + tiled-EMA model and
//!   caches the results in a [`cost_model::PerfTable`].
//! * [`pipeline`] simulates the 1F1B schedule.
//! * [`gcmr`] plans recomputation across pipeline stages and pairs memory
//!   senders with helpers.
//! * [`placement`] and [`dram_alloc`] place stages on the 2D mesh and
//!   assign overflow checkpoints to helper DRAM.
//! * [`engines`] estimates stage timings, routes inter-stage traffic and
//!   evaluates whole training iterations.
//! * [`search`] drives the early-pruning parallelism scheduler and the
//!   genetic optimizer.

pub mod cost_model;
pub mod dram_alloc;
pub mod engines;
pub mod error;
pub mod gcmr;
pub mod hw_model;
pub mod pipeline;
pub mod placement;
pub mod presets;
pub mod search;
pub mod workload;

pub use error::{Error, Result};
pub use hw_model::{CoreSpec, DieSpec, DramChipletSpec, WaferConfig};
pub use workload::{ModelConfig, OpKind, OperatorNode, TrainingWorkload};

/// Bytes per FP16 element.
pub const FP16_BYTES: u64 = 2;
pub use dram_alloc::AllocationSet;
pub use engines::{EngineParams, EvaluationReport, TpSplit};
pub use gcmr::RecompConfig;
pub use placement::PlacementMap;
pub use search::{GaParams, SearchOptions};
