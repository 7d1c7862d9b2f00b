//! Laplace fast multipole method with a simulated message-driven
//! distributed runtime.
//!
//! The crate is organized bottom-up:
//!
//! * [`geometry`]: vectors, boxes, particle distributions, Morton keys
//! * [`kernels`]: Cartesian Taylor expansions and the six FMM operators
//! * [`tree`]: per-rank adaptive octrees and the up/down passes
//! * [`traversal`]: dual tree traversal with a multipole acceptance test
//! * [`partition`]: weighted recursive multisection across ranks
//! * [`let_exchange`]: locally essential tree export, wire format, grafting
//! * [`runtime`]: deterministic virtual-time simulation of bulk-synchronous
//!   and asynchronous execution of the whole pipeline

pub mod geometry;
pub mod kernels;
pub mod let_exchange;
pub mod partition;
pub mod runtime;
pub mod traversal;
pub mod tree;

pub use geometry::{Aabb, Body, Distribution, MortonKey, Vec3};
pub use kernels::{ExpansionOrder, ExpansionTables, KernelScratch};
pub use let_exchange::{select_export, LetError, LetFragment, LocalEssentialTree};
pub use partition::{
    adapt_alpha, body_weight, histogram_split, orb_multisection, AlphaSample, PartitionError,
    PartitionMap, WeightParams,
};
pub use runtime::{
    compute_cost, metrics_report, run_simulation, CostModel, EventPayload, Metrics, Mode,
    NetModel, PhaseTimes, RankMetrics, SimConfig, SimError, SimEvent, Simulation, StepMetrics,
    TraceRecord, Weighting, PHASE_NAMES,
};
pub use traversal::{
    coverage_check, mac, traverse_local, traverse_remote, InteractionStats, TaskCounts,
    TraversalConfig, TraversalError,
};
pub use tree::{Cell, SourceTree, SourceView, Tree};
