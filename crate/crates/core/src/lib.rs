//! Cross-layer, memory-aware dataflow scheduling for DNN accelerators whose
//! activation memory is split into banks.
//!
//! The pipeline enumerates spatial unrollings per layer, prunes them against
//! the network-wide ideal, searches bank/port/memory data layouts that keep
//! producer writes and consumer reads aligned, and picks the cheapest
//! network-wide combination. [`banksim`] replays layouts at transaction level
//! and serves as the oracle for the analytic port model in [`costmodel`].

pub mod banksim;
pub mod benchmarks;
pub mod costmodel;
pub mod crosslayer;
pub mod factors;
pub mod hardware;
pub mod layermapper;
pub mod layout;
pub mod report;
pub mod workload;

pub use factors::{LayoutDim, LayoutFactors};
pub use hardware::{AcceleratorConfig, EnergyModel, MemoryGeometry, PEArray};
pub use layermapper::{Metric, SpatialUnrolling};
pub use workload::{Layer, LayerDims, LayerKind, NetworkGraph};
