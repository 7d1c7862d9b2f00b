//! Virtual-time execution of the distributed pipeline on simulated ranks.
//!
//! One simulation step runs the complete pipeline on every rank: weighted
//! repartition, body migration, tree build, upward pass, essential-tree
//! exchange, traversal, downward pass. The numerical kernels run for real and
//! their results are exact; only time is modeled. Work is charged to a
//! per-rank virtual clock through [`CostModel`], messages through
//! [`NetModel`], and every delivery is a [`SimEvent`] processed in a total
//! order, so a single process reproduces the scheduling behaviour of a
//! distributed run deterministically.
//!
//! Two schedules are modeled. [`Mode::BulkSync`] fences each phase: ranks
//! wait until the partition exchange has completed everywhere, post all
//! essential-tree fragments at once, overlap only the local traversal with
//! the flight time, and drain every arrival before starting remote work.
//! [`Mode::Async`] is message-driven: partition reductions overlap the
//! previous step's downward pass, fragments are posted per receiver as soon
//! as the upward pass finishes, and each fragment is traversed as it arrives.
//!
//! Both modes execute identical numerics for a given partition, so a
//! one-step run produces bitwise-identical potentials in either mode. With
//! adaptive weighting the virtual makespan feeds back into the next
//! partition, so multi-step runs in different modes can assign bodies
//! differently from the second step on; every assignment still computes the
//! same physics to within the expansion tolerance.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;

use crate::geometry::{generate, global_bounds, Body, Distribution};
use crate::kernels::{ExpansionOrder, ExpansionTables};
use crate::let_exchange::{select_export, LetError, LetFragment, LocalEssentialTree};
use crate::partition::{
    adapt_alpha, body_weight, orb_multisection, AlphaSample, PartitionError, WeightParams,
    DEFAULT_BINS, DEFAULT_ROUNDS,
};
use crate::traversal::{
    traverse_local, traverse_remote, InteractionStats, TaskCounts, TraversalConfig, TraversalError,
};
use crate::tree::{Tree, TreeError};

/// Phase labels in pipeline order, as reported per rank and per step.
pub const PHASE_NAMES: [&str; 7] = [
    "Comm partition",
    "Build",
    "Upward",
    "Comm LET cells",
    "Comm LET bodies",
    "Traverse",
    "Downward",
];

/// Wire overhead of one body-migration message.
const MIGRATION_HEADER_BYTES: u64 = 32;
/// One migrated body on the wire: position, charge, weight, id, padding.
const MIGRATION_BODY_BYTES: u64 = 48;

/// Execution schedule for the simulated ranks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Phase-fenced: every rank waits for the slowest at each exchange.
    BulkSync,
    /// Message-driven: work starts the moment its inputs arrive.
    Async,
}

impl Mode {
    pub const ALL: [Mode; 2] = [Mode::BulkSync, Mode::Async];
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::BulkSync => write!(f, "bulk"),
            Mode::Async => write!(f, "async"),
        }
    }
}

impl FromStr for Mode {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self, SimError> {
        match s.to_ascii_lowercase().as_str() {
            "bulk" | "bulksync" | "bulk-sync" | "bulk_sync" => Ok(Mode::BulkSync),
            "async" => Ok(Mode::Async),
            _ => Err(SimError::Config { what: "unknown mode (expected bulk or async)" }),
        }
    }
}

/// How body weights for the next repartition are derived from the previous
/// step's interaction tallies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weighting {
    /// Every body weighs 1; partitions balance the body count.
    Uniform,
    /// Weight is the body's total interaction count, local plus remote.
    Interaction,
    /// Weight is the local count plus alpha times the remote count, with
    /// alpha adapted from measured step runtimes.
    Adaptive,
}

impl Weighting {
    pub const ALL: [Weighting; 3] = [Weighting::Uniform, Weighting::Interaction, Weighting::Adaptive];
}

impl fmt::Display for Weighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Weighting::Uniform => write!(f, "uniform"),
            Weighting::Interaction => write!(f, "interaction"),
            Weighting::Adaptive => write!(f, "eq1"),
        }
    }
}

impl FromStr for Weighting {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self, SimError> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(Weighting::Uniform),
            "interaction" => Ok(Weighting::Interaction),
            "eq1" | "adaptive" => Ok(Weighting::Adaptive),
            _ => Err(SimError::Config {
                what: "unknown weighting (expected uniform, interaction, or eq1)",
            }),
        }
    }
}

/// Network charges. A message occupies its sender's injection port for
/// `bytes / bandwidth` and lands `per_message_latency_ms` after injection
/// completes. Histogram reductions are charged per round at log-tree depth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetModel {
    pub per_message_latency_ms: f64,
    pub bandwidth_bytes_per_ms: f64,
    pub reduction_latency_ms: f64,
}

impl Default for NetModel {
    fn default() -> Self {
        NetModel {
            per_message_latency_ms: 1.0,
            bandwidth_bytes_per_ms: 100_000.0,
            reduction_latency_ms: 0.05,
        }
    }
}

impl NetModel {
    /// A free network: zero latency, infinite bandwidth, free reductions.
    pub fn zero() -> Self {
        NetModel {
            per_message_latency_ms: 0.0,
            bandwidth_bytes_per_ms: f64::INFINITY,
            reduction_latency_ms: 0.0,
        }
    }

    /// Reject non-finite or negative parameters. Infinite bandwidth is
    /// allowed; it makes transfer time zero.
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.per_message_latency_ms >= 0.0) || self.per_message_latency_ms.is_infinite() {
            return Err(SimError::Config { what: "per-message latency must be finite and >= 0" });
        }
        if !(self.bandwidth_bytes_per_ms > 0.0) {
            return Err(SimError::Config { what: "bandwidth must be positive" });
        }
        if !(self.reduction_latency_ms >= 0.0) || self.reduction_latency_ms.is_infinite() {
            return Err(SimError::Config { what: "reduction latency must be finite and >= 0" });
        }
        Ok(())
    }
}

/// Virtual cost of each unit of real work, in nanoseconds per unit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostModel {
    pub p2p_pair_ns: f64,
    pub m2l_call_ns: f64,
    pub build_body_ns: f64,
    pub upward_cell_ns: f64,
    pub downward_cell_ns: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            p2p_pair_ns: 2.0,
            m2l_call_ns: 2000.0,
            build_body_ns: 200.0,
            upward_cell_ns: 3000.0,
            downward_cell_ns: 3000.0,
        }
    }
}

impl CostModel {
    /// Reject non-finite or negative per-unit costs.
    pub fn validate(&self) -> Result<(), SimError> {
        let fields = [
            self.p2p_pair_ns,
            self.m2l_call_ns,
            self.build_body_ns,
            self.upward_cell_ns,
            self.downward_cell_ns,
        ];
        if fields.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SimError::Config { what: "cost model entries must be finite and >= 0" });
        }
        Ok(())
    }
}

/// Virtual milliseconds charged for one traversal task.
pub fn compute_cost(counts: &TaskCounts, cost: &CostModel) -> f64 {
    (counts.m2l as f64 * cost.m2l_call_ns + counts.p2p as f64 * cost.p2p_pair_ns) * 1e-6
}

/// Everything a simulated run needs besides the two models.
#[derive(Clone, Debug)]
pub struct SimConfig {
    pub bodies: usize,
    pub distribution: Distribution,
    pub seed: u64,
    pub ranks: usize,
    pub order: usize,
    pub theta: f64,
    pub ncrit: usize,
    pub nspawn: usize,
    pub mode: Mode,
    pub steps: usize,
    pub weighting: Weighting,
    pub alpha0: f64,
    /// When set, each step reports the relative L2 potential error against
    /// direct summation over this many sampled target bodies.
    pub oracle_samples: Option<usize>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            bodies: 10_000,
            distribution: Distribution::Cube,
            seed: 42,
            ranks: 1,
            order: 6,
            theta: 0.5,
            ncrit: 64,
            nspawn: 1000,
            mode: Mode::BulkSync,
            steps: 1,
            weighting: Weighting::Adaptive,
            alpha0: 1.0,
            oracle_samples: None,
        }
    }
}

impl SimConfig {
    /// Range-check every field without touching the (possibly huge) body
    /// population, so callers can validate before committing to a run.
    pub fn validate(&self) -> Result<(), SimError> {
        if self.bodies == 0 {
            return Err(SimError::Config { what: "at least one body is required" });
        }
        if self.ranks == 0 {
            return Err(SimError::Config { what: "at least one rank is required" });
        }
        if self.steps == 0 {
            return Err(SimError::Config { what: "at least one step is required" });
        }
        if self.ncrit == 0 {
            return Err(SimError::Config { what: "ncrit must be at least 1" });
        }
        if self.oracle_samples == Some(0) {
            return Err(SimError::Config { what: "oracle sample count must be at least 1" });
        }
        ExpansionOrder::new(self.order)
            .map_err(|_| SimError::Config { what: "expansion order outside the supported range" })?;
        TraversalConfig::new(self.theta, self.nspawn, false)
            .map_err(|_| SimError::Config { what: "theta must lie in the open interval (0, 1)" })?;
        WeightParams::new(self.alpha0)
            .map_err(|_| SimError::Config { what: "alpha0 must be finite and non-negative" })?;
        Ok(())
    }
}

/// Simulation failures: invalid configuration, a stalled event queue, or an
/// error surfaced by one of the underlying pipeline stages.
#[derive(Debug)]
pub enum SimError {
    Config { what: &'static str },
    Deadlock { report: String },
    Partition(PartitionError),
    Exchange(LetError),
    Tree(TreeError),
    Traversal(TraversalError),
}

impl fmt::Display for SimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimError::Config { what } => write!(f, "invalid simulation config: {what}"),
            SimError::Deadlock { report } => {
                write!(f, "simulation deadlocked with unfinished ranks:\n{report}")
            }
            SimError::Partition(e) => write!(f, "partition failed: {e}"),
            SimError::Exchange(e) => write!(f, "essential-tree exchange failed: {e}"),
            SimError::Tree(e) => write!(f, "tree build failed: {e}"),
            SimError::Traversal(e) => write!(f, "traversal failed: {e}"),
        }
    }
}

impl std::error::Error for SimError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            SimError::Partition(e) => Some(e),
            SimError::Exchange(e) => Some(e),
            SimError::Tree(e) => Some(e),
            SimError::Traversal(e) => Some(e),
            _ => None,
        }
    }
}

impl From<PartitionError> for SimError {
    fn from(e: PartitionError) -> Self {
        SimError::Partition(e)
    }
}

impl From<LetError> for SimError {
    fn from(e: LetError) -> Self {
        SimError::Exchange(e)
    }
}

impl From<TreeError> for SimError {
    fn from(e: TreeError) -> Self {
        SimError::Tree(e)
    }
}

impl From<TraversalError> for SimError {
    fn from(e: TraversalError) -> Self {
        SimError::Traversal(e)
    }
}

/// Per-phase virtual milliseconds for one rank in one step. The phases cover
/// the rank's whole step span, so their sum equals [`RankMetrics::span_ms`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PhaseTimes {
    pub comm_partition: f64,
    pub build: f64,
    pub upward: f64,
    pub comm_let_cells: f64,
    pub comm_let_bodies: f64,
    pub traverse: f64,
    pub downward: f64,
}

impl PhaseTimes {
    pub fn total(&self) -> f64 {
        self.comm_partition
            + self.build
            + self.upward
            + self.comm_let_cells
            + self.comm_let_bodies
            + self.traverse
            + self.downward
    }

    /// Phase values paired with their labels, in [`PHASE_NAMES`] order.
    pub fn named(&self) -> [(&'static str, f64); 7] {
        [
            (PHASE_NAMES[0], self.comm_partition),
            (PHASE_NAMES[1], self.build),
            (PHASE_NAMES[2], self.upward),
            (PHASE_NAMES[3], self.comm_let_cells),
            (PHASE_NAMES[4], self.comm_let_bodies),
            (PHASE_NAMES[5], self.traverse),
            (PHASE_NAMES[6], self.downward),
        ]
    }
}

/// One rank's accounting for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct RankMetrics {
    pub rank: usize,
    pub phases: PhaseTimes,
    /// Total traversal work executed by this rank.
    pub counts: TaskCounts,
    /// Sum of per-body local interaction counts over the rank's bodies.
    pub l_sum: u64,
    /// Sum of per-body remote interaction counts over the rank's bodies.
    pub r_sum: u64,
    /// Virtual time from this rank's step start to its downward completion.
    pub span_ms: f64,
}

/// Global accounting for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub mode: Mode,
    /// Alpha in effect while this step's partition was computed.
    pub alpha: f64,
    pub ranks: Vec<RankMetrics>,
    /// Global virtual time consumed by this step.
    pub makespan_ms: f64,
    /// Sampled relative L2 potential error against direct summation, when
    /// the oracle is enabled.
    pub error: Option<f64>,
}

impl StepMetrics {
    /// Max-over-mean of the per-rank Traverse times; 1.0 when no rank did
    /// any traversal work.
    pub fn traverse_ratio(&self) -> f64 {
        let max = self.ranks.iter().map(|r| r.phases.traverse).fold(0.0, f64::max);
        if max <= 0.0 {
            return 1.0;
        }
        let mean =
            self.ranks.iter().map(|r| r.phases.traverse).sum::<f64>() / self.ranks.len() as f64;
        max / mean
    }
}

/// Result of a whole simulated run.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub steps: Vec<StepMetrics>,
    /// Virtual end-to-end time across all steps.
    pub makespan_ms: f64,
    /// Final potential per body, indexed by body id.
    pub potentials: Vec<f64>,
    /// Final per-body (local, remote) interaction tallies, indexed by id.
    pub body_interactions: Vec<(u64, u64)>,
}

/// What a simulated message stands for. Numerical payloads travel out of
/// band (the kernels run on real data); events model timing and size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventPayload {
    /// One combined-histogram reduction round reaching every rank.
    Histogram { round: u32 },
    /// Bodies migrating to their new owner after a repartition.
    Migration { from: u32, bytes: u64 },
    /// The cells-and-multipoles half of an essential-tree fragment.
    LetCells { from: u32, bytes: u64 },
    /// The leaf-bodies half of an essential-tree fragment.
    LetBodies { from: u32, bytes: u64 },
    /// Release of a bulk-synchronous fence.
    Barrier,
}

/// A timestamped delivery. Events order by time, ties broken by sequence
/// number, so the queue drains in one total order and replays identically.
#[derive(Clone, Copy, Debug)]
pub struct SimEvent {
    pub time_ms: f64,
    pub seq: u64,
    pub dest: u32,
    pub payload: EventPayload,
}

impl PartialEq for SimEvent {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == std::cmp::Ordering::Equal
    }
}

impl Eq for SimEvent {}

impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SimEvent {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.time_ms.total_cmp(&other.time_ms).then(self.seq.cmp(&other.seq))
    }
}

/// One delivered event, recorded in processing order when tracing is on.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub time_ms: f64,
    pub seq: u64,
    pub dest: u32,
    pub kind: &'static str,
    pub from: Option<u32>,
    pub bytes: u64,
}

/// Per-rank carry-over between steps, in absolute virtual time.
#[derive(Clone, Copy, Debug, Default)]
struct RankClock {
    traverse_end: f64,
    finish: f64,
    nic_free: f64,
}

/// Real work done by one rank in one step, with its virtual durations.
struct RankNumeric {
    build_ms: f64,
    upward_ms: f64,
    downward_ms: f64,
    local_ms: f64,
    /// Per-sender traversal tasks, senders ascending.
    remote_ms: Vec<(u32, f64)>,
    counts: TaskCounts,
    l_sum: u64,
    r_sum: u64,
    /// (body id, potential, local count, remote count) per local body.
    body_results: Vec<(u32, f64, u64, u64)>,
}

impl RankNumeric {
    fn compute_ms(&self) -> f64 {
        self.build_ms
            + self.upward_ms
            + self.local_ms
            + self.remote_ms.iter().map(|(_, d)| d).sum::<f64>()
            + self.downward_ms
    }
}

/// Expected deliveries per rank for one drain of the event queue.
#[derive(Clone, Copy, Default)]
struct Expected {
    histogram: usize,
    migrations: usize,
    cells: usize,
    bodies: usize,
    barriers: usize,
}

/// What one rank actually received during a drain.
#[derive(Clone, Debug)]
struct Inbox {
    histogram: usize,
    migrations: usize,
    barriers: usize,
    /// Latest arrival among histogram rounds, migrations, and barriers.
    last_arrival: f64,
    cells: Vec<(u32, f64)>,
    bodies: Vec<(u32, f64)>,
}

impl Inbox {
    fn new() -> Self {
        Inbox {
            histogram: 0,
            migrations: 0,
            barriers: 0,
            last_arrival: f64::NEG_INFINITY,
            cells: Vec::new(),
            bodies: Vec::new(),
        }
    }

    fn matches(&self, want: &Expected) -> bool {
        self.histogram == want.histogram
            && self.migrations == want.migrations
            && self.cells.len() == want.cells
            && self.bodies.len() == want.bodies
            && self.barriers == want.barriers
    }
}

/// Output of one step's virtual-time schedule.
struct Schedule {
    clocks: Vec<RankClock>,
    phases: Vec<PhaseTimes>,
    spans: Vec<f64>,
    t0: f64,
}

/// A multi-step simulated run. Holds the body population, per-rank clocks,
/// and the weighting state carried between steps.
pub struct Simulation {
    cfg: SimConfig,
    net: NetModel,
    cost: CostModel,
    order: ExpansionOrder,
    tables: ExpansionTables,
    tcfg: TraversalConfig,
    per_rank: Vec<Vec<Body>>,
    counts_by_id: Vec<(u64, u64)>,
    clocks: Vec<RankClock>,
    alpha: f64,
    history: Vec<AlphaSample>,
    step_index: usize,
    potentials: Vec<f64>,
    compute_totals: Vec<f64>,
    seq: u64,
    trace: Option<Vec<TraceRecord>>,
}

impl Simulation {
    pub fn new(cfg: SimConfig, net: NetModel, cost: CostModel) -> Result<Self, SimError> {
        cfg.validate()?;
        net.validate()?;
        cost.validate()?;
        let order = ExpansionOrder::new(cfg.order)
            .map_err(|_| SimError::Config { what: "expansion order outside the supported range" })?;
        let tables = ExpansionTables::new(order);
        let tcfg = TraversalConfig::new(cfg.theta, cfg.nspawn, false)?;

        // The whole population starts on rank 0, as if one rank ingested the
        // input; the first partition scatters it.
        let mut per_rank = vec![Vec::new(); cfg.ranks];
        per_rank[0] = generate(cfg.distribution, cfg.bodies, cfg.seed);

        Ok(Simulation {
            counts_by_id: vec![(0, 0); cfg.bodies],
            clocks: vec![RankClock::default(); cfg.ranks],
            alpha: cfg.alpha0,
            history: Vec::new(),
            step_index: 0,
            potentials: vec![0.0; cfg.bodies],
            compute_totals: vec![0.0; cfg.ranks],
            seq: 0,
            trace: None,
            per_rank,
            order,
            tables,
            tcfg,
            cfg,
            net,
            cost,
        })
    }

    /// Start recording one [`TraceRecord`] per delivered event.
    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    /// Take the recorded trace, leaving tracing disabled.
    pub fn take_trace(&mut self) -> Vec<TraceRecord> {
        self.trace.take().unwrap_or_default()
    }

    /// Final potential per body id after the most recent step.
    pub fn potentials(&self) -> &[f64] {
        &self.potentials
    }

    /// The alpha that the next partition would use.
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Run every configured step and assemble the run metrics. The virtual
    /// makespan can never undercut the slowest rank's pure compute time;
    /// that lower bound is asserted here on every run.
    pub fn run(&mut self) -> Result<Metrics, SimError> {
        if self.step_index != 0 {
            return Err(SimError::Config { what: "simulation was already stepped" });
        }
        let mut steps = Vec::with_capacity(self.cfg.steps);
        for _ in 0..self.cfg.steps {
            steps.push(self.run_step()?);
        }
        let makespan_ms = self.clocks.iter().map(|c| c.finish).fold(0.0, f64::max);
        let compute_bound = self.compute_totals.iter().copied().fold(0.0, f64::max);
        assert!(
            makespan_ms + 1e-6 * makespan_ms.max(1.0) >= compute_bound,
            "virtual makespan {makespan_ms} ms fell below the compute critical path \
             {compute_bound} ms"
        );
        Ok(Metrics {
            steps,
            makespan_ms,
            potentials: self.potentials.clone(),
            body_interactions: self.counts_by_id.clone(),
        })
    }

    /// Execute one step: repartition with current weights, rebuild, exchange,
    /// traverse, and evaluate, then advance every rank's virtual clock.
    pub fn run_step(&mut self) -> Result<StepMetrics, SimError> {
        let ranks = self.cfg.ranks;
        let step = self.step_index;
        if step > 0 {
            self.update_weights();
        }

        // Gather the population in rank order; owners drive migration sizes.
        let mut all = Vec::with_capacity(self.potentials.len());
        let mut owners = Vec::with_capacity(self.potentials.len());
        for (r, list) in self.per_rank.iter().enumerate() {
            for body in list {
                all.push(*body);
                owners.push(r as u32);
            }
        }
        let bounds = global_bounds(&all)
            .map_err(|_| SimError::Config { what: "simulation lost its body population" })?;
        let (map, dest) = orb_multisection(&all, bounds, ranks, DEFAULT_BINS, DEFAULT_ROUNDS)?;

        // Migration volume per ordered pair of ranks.
        let mut moved = vec![vec![0u64; ranks]; ranks];
        for (k, &d) in dest.iter().enumerate() {
            let s = owners[k] as usize;
            if s != d as usize {
                moved[s][d as usize] += 1;
            }
        }

        // Regroup. Receive buffers are ordered by sending rank, so the new
        // layout does not depend on arrival timing.
        for list in &mut self.per_rank {
            list.clear();
        }
        for (k, &d) in dest.iter().enumerate() {
            let mut body = all[k];
            body.clear_accumulators();
            self.per_rank[d as usize].push(body);
        }

        // Build each rank's tree and run its upward pass for real.
        let ncoef = self.order.coeff_count();
        let groups = &self.per_rank;
        let tables = &self.tables;
        let tcfg = &self.tcfg;
        let cost = self.cost;
        let ncrit = self.cfg.ncrit;
        let theta = self.cfg.theta;
        let order = self.order;
        let domains = &map.domains;
        let trees = (0..ranks)
            .into_par_iter()
            .map(|r| -> Result<Tree, SimError> {
                let local = groups[r].clone();
                let tree_bounds = if local.is_empty() {
                    domains[r]
                } else {
                    global_bounds(&local).expect("non-empty group has bounds")
                };
                let mut tree = Tree::build(local, tree_bounds, ncrit, ncoef)?;
                let mut scratch = tables.scratch();
                tree.upward(tables, &mut scratch);
                Ok(tree)
            })
            .collect::<Result<Vec<_>, SimError>>()?;

        // Cut one essential-tree fragment per ordered pair and record wire
        // sizes for the network charge.
        let incoming: Vec<Vec<LetFragment>> = (0..ranks)
            .into_par_iter()
            .map(|t| {
                (0..ranks)
                    .filter(|s| *s != t)
                    .map(|s| {
                        select_export(&trees[s], order, domains[t], theta, s as u32, t as u32)
                    })
                    .collect()
            })
            .collect();
        let mut frag_sizes = vec![vec![(0u64, 0u64); ranks]; ranks];
        for (t, list) in incoming.iter().enumerate() {
            for frag in list {
                frag_sizes[frag.sender as usize][t] =
                    (frag.cells_wire_len() as u64, frag.bodies_wire_len() as u64);
            }
        }

        // Traverse: the local tree against itself, then each grafted source
        // in sender order. The numeric order is fixed; only virtual time
        // depends on the schedule mode.
        let numeric = trees
            .into_par_iter()
            .zip(incoming.into_par_iter())
            .map(|(tree, frags)| -> Result<RankNumeric, SimError> {
                let n_local = tree.bodies.len();
                let n_cells = tree.cells.len();
                let occupied = tree.cells[0].body_count > 0;
                let build_ms = n_local as f64 * cost.build_body_ns * 1e-6;
                let upward_ms =
                    if occupied { n_cells as f64 * cost.upward_cell_ns * 1e-6 } else { 0.0 };
                let downward_ms =
                    if occupied { n_cells as f64 * cost.downward_cell_ns * 1e-6 } else { 0.0 };

                let mut let_tree = LocalEssentialTree::new(tree);
                for frag in frags {
                    let_tree.graft(frag)?;
                }
                let mut stats = InteractionStats::new(n_cells, n_local);
                let local_counts = traverse_local(&mut let_tree.local, tables, tcfg, &mut stats)?;
                let local_ms = compute_cost(&local_counts, &cost);
                let mut counts = local_counts;
                let mut remote_ms = Vec::with_capacity(let_tree.source_count());
                let (local_tree, sources) = let_tree.parts_mut();
                for (sender, source) in sources {
                    let c = traverse_remote(local_tree, source.view(), tables, tcfg, &mut stats)?;
                    counts.m2l += c.m2l;
                    counts.p2p += c.p2p;
                    remote_ms.push((*sender, compute_cost(&c, &cost)));
                }
                let mut scratch = tables.scratch();
                let_tree.local.downward(tables, &mut scratch);

                let mut l_sum = 0u64;
                let mut r_sum = 0u64;
                let mut body_results = Vec::with_capacity(n_local);
                for (i, body) in let_tree.local.bodies.iter().enumerate() {
                    let l = stats.local_pairs[i];
                    let r = stats.remote_pairs[i];
                    l_sum += l;
                    r_sum += r;
                    body_results.push((body.id, body.potential, l, r));
                }
                Ok(RankNumeric {
                    build_ms,
                    upward_ms,
                    downward_ms,
                    local_ms,
                    remote_ms,
                    counts,
                    l_sum,
                    r_sum,
                    body_results,
                })
            })
            .collect::<Result<Vec<_>, SimError>>()?;

        for result in &numeric {
            for &(id, potential, l, r) in &result.body_results {
                self.potentials[id as usize] = potential;
                self.counts_by_id[id as usize] = (l, r);
            }
        }
        for (r, num) in numeric.iter().enumerate() {
            self.compute_totals[r] += num.compute_ms();
        }

        let sched = self.schedule_step(&numeric, &moved, &frag_sizes)?;
        for r in 0..ranks {
            let total = sched.phases[r].total();
            assert!(
                (total - sched.spans[r]).abs() <= 1e-9 * sched.spans[r].abs().max(1.0),
                "rank {r}: phase times {total} ms do not cover its step span {} ms",
                sched.spans[r]
            );
        }
        let finish = sched.clocks.iter().map(|c| c.finish).fold(0.0, f64::max);
        let makespan_ms = finish - sched.t0;

        let error = self.cfg.oracle_samples.map(|k| sampled_error(&all, &self.potentials, k));

        let rank_metrics = numeric
            .iter()
            .enumerate()
            .map(|(r, num)| RankMetrics {
                rank: r,
                phases: sched.phases[r],
                counts: num.counts,
                l_sum: num.l_sum,
                r_sum: num.r_sum,
                span_ms: sched.spans[r],
            })
            .collect();

        let alpha_used = self.alpha;
        self.history.push(AlphaSample { alpha: alpha_used, runtime: makespan_ms });
        if self.cfg.weighting == Weighting::Adaptive {
            self.alpha = adapt_alpha(&self.history);
        }
        self.clocks = sched.clocks;
        self.step_index += 1;

        Ok(StepMetrics {
            step,
            mode: self.cfg.mode,
            alpha: alpha_used,
            ranks: rank_metrics,
            makespan_ms,
            error,
        })
    }

    fn update_weights(&mut self) {
        let params = match self.cfg.weighting {
            Weighting::Adaptive => {
                Some(WeightParams::new(self.alpha).expect("adapted alpha stays valid"))
            }
            _ => None,
        };
        let counts = &self.counts_by_id;
        for list in &mut self.per_rank {
            for body in list {
                let (l, r) = counts[body.id as usize];
                body.weight = match self.cfg.weighting {
                    Weighting::Uniform => 1.0,
                    Weighting::Interaction => (l + r) as f64,
                    Weighting::Adaptive => {
                        body_weight(l, r, params.as_ref().expect("params set for adaptive"))
                    }
                };
            }
        }
    }

    /// Compute this step's virtual timeline for every rank under the
    /// configured mode, processing message deliveries in event order.
    fn schedule_step(
        &mut self,
        numeric: &[RankNumeric],
        moved: &[Vec<u64>],
        frag_sizes: &[Vec<(u64, u64)>],
    ) -> Result<Schedule, SimError> {
        let ranks = self.cfg.ranks;
        let mode = self.cfg.mode;
        let t0 = self.clocks.iter().map(|c| c.finish).fold(0.0, f64::max);
        let anchors: Vec<f64> = match mode {
            Mode::BulkSync => vec![t0; ranks],
            Mode::Async => self.clocks.iter().map(|c| c.finish).collect(),
        };

        // Histogram reductions: the recursive bisection runs one splitter
        // search per level, each refinement round charged at full log-tree
        // depth. In async mode the reduction traffic overlaps the previous
        // step's downward pass, so it starts as soon as every rank has its
        // interaction tallies.
        let depth = ceil_log2(ranks);
        let rounds_total = depth as usize * DEFAULT_ROUNDS;
        let round_ms = depth as f64 * self.net.reduction_latency_ms;
        let reduce_start = match mode {
            Mode::BulkSync => t0,
            Mode::Async => self.clocks.iter().map(|c| c.traverse_end).fold(0.0, f64::max),
        };
        let reduce_done = reduce_start + rounds_total as f64 * round_ms;

        let mut queue: BinaryHeap<Reverse<SimEvent>> = BinaryHeap::new();
        for round in 0..rounds_total {
            let time = reduce_start + (round + 1) as f64 * round_ms;
            for dest in 0..ranks {
                self.push_event(
                    &mut queue,
                    time,
                    dest as u32,
                    EventPayload::Histogram { round: round as u32 },
                );
            }
        }

        // Body migration: one message per ordered pair, the sender's
        // injection port serializing its outgoing stream. Senders cannot
        // ship bodies before their own previous step has evaluated them.
        let mut nic: Vec<f64> = self.clocks.iter().map(|c| c.nic_free).collect();
        for s in 0..ranks {
            let post = match mode {
                Mode::BulkSync => reduce_done,
                Mode::Async => reduce_done.max(self.clocks[s].finish),
            };
            for t in 0..ranks {
                if t == s {
                    continue;
                }
                let bytes = MIGRATION_HEADER_BYTES + MIGRATION_BODY_BYTES * moved[s][t];
                let start = nic[s].max(post);
                nic[s] = start + bytes as f64 / self.net.bandwidth_bytes_per_ms;
                let arrival = nic[s] + self.net.per_message_latency_ms;
                self.push_event(
                    &mut queue,
                    arrival,
                    t as u32,
                    EventPayload::Migration { from: s as u32, bytes },
                );
            }
        }

        let expect_partition = Expected {
            histogram: rounds_total,
            migrations: ranks - 1,
            ..Expected::default()
        };
        let inbox = drain_events(&mut queue, ranks, &expect_partition, &mut self.trace)?;

        // The partition phase ends when the reduction result and every
        // incoming migration have landed; bulk mode fences globally.
        let mut build_start: Vec<f64> =
            (0..ranks).map(|r| anchors[r].max(reduce_done).max(inbox[r].last_arrival)).collect();
        let mut comm_partition = vec![0.0f64; ranks];
        match mode {
            Mode::BulkSync => {
                let fence = build_start.iter().copied().fold(0.0, f64::max);
                for r in 0..ranks {
                    self.push_event(&mut queue, fence, r as u32, EventPayload::Barrier);
                    build_start[r] = fence;
                    comm_partition[r] = fence - t0;
                }
            }
            Mode::Async => {
                for r in 0..ranks {
                    comm_partition[r] = build_start[r] - anchors[r];
                }
            }
        }

        let up_end: Vec<f64> = (0..ranks)
            .map(|r| build_start[r] + numeric[r].build_ms + numeric[r].upward_ms)
            .collect();

        // Fragment posting: per receiver, cells then bodies, receivers
        // ascending, the moment the sender's upward pass completes.
        for s in 0..ranks {
            for t in 0..ranks {
                if t == s {
                    continue;
                }
                let (cell_bytes, body_bytes) = frag_sizes[s][t];
                let start = nic[s].max(up_end[s]);
                nic[s] = start + cell_bytes as f64 / self.net.bandwidth_bytes_per_ms;
                self.push_event(
                    &mut queue,
                    nic[s] + self.net.per_message_latency_ms,
                    t as u32,
                    EventPayload::LetCells { from: s as u32, bytes: cell_bytes },
                );
                nic[s] += body_bytes as f64 / self.net.bandwidth_bytes_per_ms;
                self.push_event(
                    &mut queue,
                    nic[s] + self.net.per_message_latency_ms,
                    t as u32,
                    EventPayload::LetBodies { from: s as u32, bytes: body_bytes },
                );
            }
        }

        let expect_exchange = Expected {
            cells: ranks - 1,
            bodies: ranks - 1,
            barriers: if mode == Mode::BulkSync { 1 } else { 0 },
            ..Expected::default()
        };
        let inbox = drain_events(&mut queue, ranks, &expect_exchange, &mut self.trace)?;

        let mut clocks = Vec::with_capacity(ranks);
        let mut phases = Vec::with_capacity(ranks);
        let mut spans = Vec::with_capacity(ranks);
        for r in 0..ranks {
            let num = &numeric[r];
            let mut cells_at = vec![f64::NEG_INFINITY; ranks];
            let mut bodies_at = vec![f64::NEG_INFINITY; ranks];
            for &(from, time) in &inbox[r].cells {
                cells_at[from as usize] = time;
            }
            for &(from, time) in &inbox[r].bodies {
                bodies_at[from as usize] = time;
            }

            let (traverse_end, wait_cells, wait_bodies) = match mode {
                Mode::BulkSync => {
                    // Local traversal overlaps the flight time; remote work
                    // starts only after the whole essential tree arrived.
                    let local_end = up_end[r] + num.local_ms;
                    let cells_ready =
                        inbox[r].cells.iter().map(|&(_, t)| t).fold(f64::NEG_INFINITY, f64::max);
                    let bodies_ready =
                        inbox[r].bodies.iter().map(|&(_, t)| t).fold(f64::NEG_INFINITY, f64::max);
                    let remote_start = local_end.max(cells_ready).max(bodies_ready);
                    let wait_total = remote_start - local_end;
                    let wait_cells = (cells_ready - local_end).clamp(0.0, wait_total.max(0.0));
                    let wait_bodies = (wait_total - wait_cells).max(0.0);
                    let remote_total: f64 = num.remote_ms.iter().map(|(_, d)| d).sum();
                    (remote_start + remote_total, wait_cells, wait_bodies)
                }
                Mode::Async => async_task_loop(up_end[r], num, &cells_at, &bodies_at),
            };
            let finish = traverse_end + num.downward_ms;
            let remote_total: f64 = num.remote_ms.iter().map(|(_, d)| d).sum();
            phases.push(PhaseTimes {
                comm_partition: comm_partition[r],
                build: num.build_ms,
                upward: num.upward_ms,
                comm_let_cells: wait_cells,
                comm_let_bodies: wait_bodies,
                traverse: num.local_ms + remote_total,
                downward: num.downward_ms,
            });
            spans.push(finish - anchors[r]);
            clocks.push(RankClock { traverse_end, finish, nic_free: nic[r] });
        }
        Ok(Schedule { clocks, phases, spans, t0 })
    }

    fn push_event(
        &mut self,
        queue: &mut BinaryHeap<Reverse<SimEvent>>,
        time_ms: f64,
        dest: u32,
        payload: EventPayload,
    ) {
        let event = SimEvent { time_ms, seq: self.seq, dest, payload };
        self.seq += 1;
        queue.push(Reverse(event));
    }
}

/// Convenience wrapper: build a [`Simulation`] and run every step.
pub fn run_simulation(
    cfg: &SimConfig,
    net: &NetModel,
    cost: &CostModel,
) -> Result<Metrics, SimError> {
    Simulation::new(cfg.clone(), *net, *cost)?.run()
}

/// Message-driven traversal on one rank: local work is ready first, each
/// fragment becomes ready when both halves have arrived, and the rank always
/// picks the task that can start soonest (local first, then lowest sender,
/// on ties). Idle gaps are charged to whichever message half unblocked the
/// task that ends the gap.
fn async_task_loop(
    up_end: f64,
    num: &RankNumeric,
    cells_at: &[f64],
    bodies_at: &[f64],
) -> (f64, f64, f64) {
    struct Pending {
        ready: f64,
        duration: f64,
        sender: u32,
        local: bool,
        bodies_bound: bool,
    }

    let mut tasks = Vec::with_capacity(num.remote_ms.len() + 1);
    tasks.push(Pending {
        ready: up_end,
        duration: num.local_ms,
        sender: 0,
        local: true,
        bodies_bound: false,
    });
    for &(sender, duration) in &num.remote_ms {
        let cells = cells_at[sender as usize];
        let bodies = bodies_at[sender as usize];
        tasks.push(Pending {
            ready: cells.max(bodies).max(up_end),
            duration,
            sender,
            local: false,
            bodies_bound: bodies >= cells,
        });
    }

    let mut done = vec![false; tasks.len()];
    let mut clock = up_end;
    let mut wait_cells = 0.0;
    let mut wait_bodies = 0.0;
    for _ in 0..tasks.len() {
        let mut best: Option<(f64, bool, u32, usize)> = None;
        for (i, task) in tasks.iter().enumerate() {
            if done[i] {
                continue;
            }
            let start = task.ready.max(clock);
            let candidate = (start, !task.local, task.sender, i);
            let better = match best {
                None => true,
                Some((bs, br, bsender, _)) => match start.total_cmp(&bs) {
                    std::cmp::Ordering::Less => true,
                    std::cmp::Ordering::Greater => false,
                    std::cmp::Ordering::Equal => (!task.local, task.sender) < (br, bsender),
                },
            };
            if better {
                best = Some(candidate);
            }
        }
        let (_, _, _, index) = best.expect("a pending task remains");
        let task = &tasks[index];
        if task.ready > clock {
            let gap = task.ready - clock;
            if task.bodies_bound {
                wait_bodies += gap;
            } else {
                wait_cells += gap;
            }
            clock = task.ready;
        }
        clock += task.duration;
        done[index] = true;
    }
    (clock, wait_cells, wait_bodies)
}

/// Deliver every queued event in (time, seq) order, recording the trace and
/// sorting deliveries into per-rank inboxes. A rank whose inbox does not
/// match `expected` after the queue empties has stalled the step, which is
/// reported as a deadlock with the full per-rank state.
fn drain_events(
    queue: &mut BinaryHeap<Reverse<SimEvent>>,
    ranks: usize,
    expected: &Expected,
    trace: &mut Option<Vec<TraceRecord>>,
) -> Result<Vec<Inbox>, SimError> {
    let mut inboxes: Vec<Inbox> = (0..ranks).map(|_| Inbox::new()).collect();
    while let Some(Reverse(event)) = queue.pop() {
        let r = event.dest as usize;
        if r >= ranks {
            return Err(SimError::Deadlock {
                report: format!("event addressed to unknown rank {}", event.dest),
            });
        }
        let inbox = &mut inboxes[r];
        let (kind, from, bytes) = match event.payload {
            EventPayload::Histogram { .. } => {
                inbox.histogram += 1;
                inbox.last_arrival = inbox.last_arrival.max(event.time_ms);
                ("histogram", None, 0)
            }
            EventPayload::Migration { from, bytes } => {
                inbox.migrations += 1;
                inbox.last_arrival = inbox.last_arrival.max(event.time_ms);
                ("migration", Some(from), bytes)
            }
            EventPayload::LetCells { from, bytes } => {
                inbox.cells.push((from, event.time_ms));
                ("let-cells", Some(from), bytes)
            }
            EventPayload::LetBodies { from, bytes } => {
                inbox.bodies.push((from, event.time_ms));
                ("let-bodies", Some(from), bytes)
            }
            EventPayload::Barrier => {
                inbox.barriers += 1;
                inbox.last_arrival = inbox.last_arrival.max(event.time_ms);
                ("barrier", None, 0)
            }
        };
        if let Some(records) = trace {
            records.push(TraceRecord {
                time_ms: event.time_ms,
                seq: event.seq,
                dest: event.dest,
                kind,
                from,
                bytes,
            });
        }
    }
    if inboxes.iter().any(|inbox| !inbox.matches(expected)) {
        let mut report = String::new();
        for (r, inbox) in inboxes.iter().enumerate() {
            let _ = writeln!(
                report,
                "rank {r}: histogram {}/{}, migration {}/{}, cells {}/{}, bodies {}/{}, \
                 barrier {}/{}",
                inbox.histogram,
                expected.histogram,
                inbox.migrations,
                expected.migrations,
                inbox.cells.len(),
                expected.cells,
                inbox.bodies.len(),
                expected.bodies,
                inbox.barriers,
                expected.barriers,
            );
        }
        return Err(SimError::Deadlock { report });
    }
    Ok(inboxes)
}

/// Depth of a binary reduction tree over `n` participants.
fn ceil_log2(n: usize) -> u32 {
    (n.max(1) as u64).next_power_of_two().trailing_zeros()
}

/// Relative L2 error of the computed potentials against direct summation
/// over a deterministic stride sample of target bodies. The per-target sums
/// run in parallel but reduce in index order, so the result is reproducible.
fn sampled_error(all: &[Body], potentials: &[f64], samples: usize) -> f64 {
    let n = all.len();
    let k = samples.min(n).max(1);
    let terms: Vec<(f64, f64)> = (0..k)
        .into_par_iter()
        .map(|j| {
            let index = j * n / k;
            let target = &all[index];
            let mut direct = 0.0;
            for (i, body) in all.iter().enumerate() {
                if i == index {
                    continue;
                }
                let distance = (target.pos - body.pos).norm();
                if distance > 0.0 {
                    direct += body.charge / distance;
                }
            }
            let diff = potentials[target.id as usize] - direct;
            (diff * diff, direct * direct)
        })
        .collect();
    let (num, den) = terms.iter().fold((0.0, 0.0), |acc, t| (acc.0 + t.0, acc.1 + t.1));
    if den > 0.0 {
        (num / den).sqrt()
    } else {
        0.0
    }
}

/// Render per-rank, per-phase virtual times as a fixed-width table, one
/// block per step, with the traverse balance ratio that drives weighting.
pub fn metrics_report(metrics: &Metrics) -> String {
    let mut out = String::new();
    for step in &metrics.steps {
        let _ = write!(
            out,
            "step {} mode {} alpha {:.4} makespan {:.3} ms",
            step.step + 1,
            step.mode,
            step.alpha,
            step.makespan_ms
        );
        if let Some(e) = step.error {
            let _ = write!(out, " error {e:.3e}");
        }
        out.push('\n');
        let _ = write!(out, "{:>4}", "rank");
        for name in PHASE_NAMES {
            let _ = write!(out, " {name:>16}");
        }
        let _ = writeln!(out, " {:>16}", "total");
        for rank in &step.ranks {
            let _ = write!(out, "{:>4}", rank.rank);
            for (_, value) in rank.phases.named() {
                let _ = write!(out, " {value:>16.4}");
            }
            let _ = writeln!(out, " {:>16.4}", rank.phases.total());
        }
        let _ = writeln!(out, "traverse max/mean {:.4}", step.traverse_ratio());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_cfg(ranks: usize, bodies: usize, mode: Mode) -> SimConfig {
        SimConfig {
            bodies,
            ranks,
            mode,
            order: 4,
            theta: 0.5,
            ncrit: 32,
            nspawn: 512,
            steps: 1,
            seed: 7,
            ..SimConfig::default()
        }
    }

    #[test]
    fn mode_and_weighting_parse_and_display() {
        for mode in Mode::ALL {
            assert_eq!(mode.to_string().parse::<Mode>().unwrap(), mode);
        }
        for weighting in Weighting::ALL {
            assert_eq!(weighting.to_string().parse::<Weighting>().unwrap(), weighting);
        }
        assert_eq!("bulkSync".parse::<Mode>().unwrap(), Mode::BulkSync);
        assert_eq!("adaptive".parse::<Weighting>().unwrap(), Weighting::Adaptive);
        assert!(matches!("ring".parse::<Mode>(), Err(SimError::Config { .. })));
        assert!(matches!("mass".parse::<Weighting>(), Err(SimError::Config { .. })));
    }

    #[test]
    fn models_reject_bad_values() {
        let mut net = NetModel::default();
        net.per_message_latency_ms = -1.0;
        assert!(net.validate().is_err());
        let mut net = NetModel::default();
        net.bandwidth_bytes_per_ms = 0.0;
        assert!(net.validate().is_err());
        let mut net = NetModel::default();
        net.reduction_latency_ms = f64::NAN;
        assert!(net.validate().is_err());
        assert!(NetModel::default().validate().is_ok());
        assert!(NetModel::zero().validate().is_ok());

        let mut cost = CostModel::default();
        cost.m2l_call_ns = -0.5;
        assert!(cost.validate().is_err());
        assert!(CostModel::default().validate().is_ok());
    }

    #[test]
    fn config_rejects_bad_values() {
        let check = |f: fn(&mut SimConfig)| {
            let mut cfg = quick_cfg(2, 100, Mode::BulkSync);
            f(&mut cfg);
            Simulation::new(cfg, NetModel::default(), CostModel::default()).err().map(|e| {
                format!("{e}")
            })
        };
        assert!(check(|c| c.bodies = 0).is_some());
        assert!(check(|c| c.ranks = 0).is_some());
        assert!(check(|c| c.steps = 0).is_some());
        assert!(check(|c| c.ncrit = 0).is_some());
        assert!(check(|c| c.order = 0).is_some());
        assert!(check(|c| c.order = 99).is_some());
        assert!(check(|c| c.theta = 1.5).is_some());
        assert!(check(|c| c.alpha0 = -2.0).is_some());
        assert!(check(|c| c.oracle_samples = Some(0)).is_some());
        assert!(check(|_| {}).is_none());
    }

    #[test]
    fn compute_cost_charges_each_term() {
        let cost = CostModel::default();
        assert_eq!(compute_cost(&TaskCounts::default(), &cost), 0.0);
        let p2p_only = TaskCounts { m2l: 0, p2p: 1_000_000 };
        assert_eq!(compute_cost(&p2p_only, &cost), 2.0);
        let m2l_only = TaskCounts { m2l: 1000, p2p: 0 };
        assert_eq!(compute_cost(&m2l_only, &cost), 2.0);
        let both = TaskCounts { m2l: 1000, p2p: 1_000_000 };
        assert_eq!(compute_cost(&both, &cost), 4.0);
    }

    #[test]
    fn event_queue_orders_by_time_then_seq() {
        let mut queue: BinaryHeap<Reverse<SimEvent>> = BinaryHeap::new();
        let payload = EventPayload::Barrier;
        for (time, seq) in [(2.0, 0), (1.0, 3), (1.0, 1), (3.0, 2)] {
            queue.push(Reverse(SimEvent { time_ms: time, seq, dest: 0, payload }));
        }
        let mut popped = Vec::new();
        while let Some(Reverse(e)) = queue.pop() {
            popped.push((e.time_ms, e.seq));
        }
        assert_eq!(popped, vec![(1.0, 1), (1.0, 3), (2.0, 0), (3.0, 2)]);
    }

    #[test]
    fn drain_detects_missing_messages() {
        let mut queue: BinaryHeap<Reverse<SimEvent>> = BinaryHeap::new();
        queue.push(Reverse(SimEvent {
            time_ms: 0.5,
            seq: 0,
            dest: 0,
            payload: EventPayload::Histogram { round: 0 },
        }));
        let expected = Expected { histogram: 1, ..Expected::default() };
        let err = drain_events(&mut queue, 2, &expected, &mut None).unwrap_err();
        match err {
            SimError::Deadlock { report } => {
                assert!(report.contains("rank 1: histogram 0/1"), "report was: {report}");
            }
            other => panic!("expected deadlock, got {other:?}"),
        }
    }

    #[test]
    fn single_rank_has_zero_comm_and_identical_modes() {
        let mut runs = Vec::new();
        for mode in Mode::ALL {
            let mut cfg = quick_cfg(1, 2000, mode);
            cfg.steps = 2;
            let metrics =
                run_simulation(&cfg, &NetModel::default(), &CostModel::default()).unwrap();
            for step in &metrics.steps {
                for rank in &step.ranks {
                    assert_eq!(rank.phases.comm_partition, 0.0);
                    assert_eq!(rank.phases.comm_let_cells, 0.0);
                    assert_eq!(rank.phases.comm_let_bodies, 0.0);
                    assert!(rank.phases.traverse > 0.0);
                }
            }
            runs.push(metrics);
        }
        assert_eq!(runs[0].makespan_ms, runs[1].makespan_ms);
        assert_eq!(runs[0].potentials, runs[1].potentials);
    }

    #[test]
    fn modes_compute_identical_potentials() {
        let mut results = Vec::new();
        for mode in Mode::ALL {
            let mut cfg = quick_cfg(8, 4096, mode);
            cfg.distribution = Distribution::Plummer;
            let metrics =
                run_simulation(&cfg, &NetModel::default(), &CostModel::default()).unwrap();
            results.push(metrics.potentials);
        }
        assert_eq!(results[0], results[1]);
    }

    #[test]
    fn zero_cost_network_levels_the_modes() {
        let mut spans = Vec::new();
        for mode in Mode::ALL {
            let mut cfg = quick_cfg(8, 4096, mode);
            cfg.steps = 2;
            let metrics = run_simulation(&cfg, &NetModel::zero(), &CostModel::default()).unwrap();
            spans.push(metrics.makespan_ms);
        }
        let (bulk, asynchronous) = (spans[0], spans[1]);
        assert!(
            (bulk - asynchronous).abs() <= 0.01 * bulk,
            "zero-cost network should level the modes: bulk {bulk} vs async {asynchronous}"
        );
    }

    #[test]
    fn async_is_never_slower_than_bulk() {
        for ranks in [4, 8] {
            let mut spans = Vec::new();
            for mode in Mode::ALL {
                let mut cfg = quick_cfg(ranks, 4096, mode);
                cfg.steps = 2;
                cfg.weighting = Weighting::Interaction;
                let metrics =
                    run_simulation(&cfg, &NetModel::default(), &CostModel::default()).unwrap();
                spans.push(metrics.makespan_ms);
            }
            assert!(
                spans[1] <= spans[0] + 1e-9,
                "async {} ms exceeded bulk {} ms at {ranks} ranks",
                spans[1],
                spans[0]
            );
        }
    }

    #[test]
    fn async_hides_communication_at_high_latency() {
        let net = NetModel { per_message_latency_ms: 5.0, ..NetModel::default() };
        let mut spans = Vec::new();
        for mode in Mode::ALL {
            let mut cfg = quick_cfg(8, 8192, mode);
            cfg.steps = 2;
            cfg.weighting = Weighting::Interaction;
            let metrics = run_simulation(&cfg, &net, &CostModel::default()).unwrap();
            spans.push(metrics.makespan_ms);
        }
        assert!(
            spans[1] < spans[0],
            "async {} ms should beat bulk {} ms at 5 ms latency",
            spans[1],
            spans[0]
        );
    }

    #[test]
    fn runtime_is_bitwise_deterministic() {
        let run = || {
            let mut cfg = quick_cfg(4, 3000, Mode::Async);
            cfg.steps = 2;
            cfg.oracle_samples = Some(200);
            let mut sim =
                Simulation::new(cfg, NetModel::default(), CostModel::default()).unwrap();
            sim.enable_trace();
            let metrics = sim.run().unwrap();
            (metrics, sim.take_trace())
        };
        let (first_metrics, first_trace) = run();
        let (second_metrics, second_trace) = run();
        assert_eq!(first_metrics, second_metrics);
        assert_eq!(first_trace, second_trace);
    }

    #[test]
    fn phase_sums_cover_rank_spans() {
        for mode in Mode::ALL {
            let mut cfg = quick_cfg(4, 4000, mode);
            cfg.steps = 2;
            let metrics =
                run_simulation(&cfg, &NetModel::default(), &CostModel::default()).unwrap();
            for step in &metrics.steps {
                for rank in &step.ranks {
                    let total = rank.phases.total();
                    assert!(
                        (total - rank.span_ms).abs() <= 1e-9 * rank.span_ms.max(1.0),
                        "phases {total} vs span {}",
                        rank.span_ms
                    );
                }
            }
        }
    }

    #[test]
    fn makespan_respects_compute_lower_bound() {
        let mut cfg = quick_cfg(4, 4000, Mode::Async);
        cfg.steps = 2;
        let metrics = run_simulation(&cfg, &NetModel::default(), &CostModel::default()).unwrap();
        let mut per_rank_compute = vec![0.0f64; 4];
        for step in &metrics.steps {
            for rank in &step.ranks {
                per_rank_compute[rank.rank] += rank.phases.build
                    + rank.phases.upward
                    + rank.phases.traverse
                    + rank.phases.downward;
            }
        }
        let bound = per_rank_compute.iter().copied().fold(0.0, f64::max);
        assert!(metrics.makespan_ms + 1e-9 >= bound);
    }

    #[test]
    fn interaction_weighting_improves_balance() {
        // Per-body tallies count direct partners, so the weighting predicts
        // rank work in the leaf-heavy regime where direct pairs dominate.
        let mut cfg = quick_cfg(8, 20_000, Mode::BulkSync);
        cfg.distribution = Distribution::Plummer;
        cfg.seed = 11;
        cfg.ncrit = 256;
        cfg.theta = 0.6;
        cfg.steps = 3;
        cfg.weighting = Weighting::Interaction;
        let metrics = run_simulation(&cfg, &NetModel::default(), &CostModel::default()).unwrap();
        let first = metrics.steps[0].traverse_ratio();
        let third = metrics.steps[2].traverse_ratio();
        assert!(
            third < first,
            "interaction weighting should tighten balance: step 1 ratio {first}, step 3 \
             ratio {third}"
        );
    }

    #[test]
    fn oracle_error_is_small_and_mode_independent() {
        let mut errors = Vec::new();
        for mode in Mode::ALL {
            let mut cfg = quick_cfg(2, 3000, mode);
            cfg.order = 8;
            cfg.theta = 0.4;
            cfg.oracle_samples = Some(500);
            let metrics =
                run_simulation(&cfg, &NetModel::default(), &CostModel::default()).unwrap();
            let error = metrics.steps[0].error.expect("oracle enabled");
            assert!(error > 0.0 && error < 1e-3, "unexpected oracle error {error}");
            errors.push(error);
        }
        assert_eq!(errors[0], errors[1]);
    }

    #[test]
    fn trace_covers_every_exchange() {
        let ranks = 3;
        let steps = 2;
        let mut cfg = quick_cfg(ranks, 600, Mode::BulkSync);
        cfg.steps = steps;
        let mut sim = Simulation::new(cfg, NetModel::default(), CostModel::default()).unwrap();
        sim.enable_trace();
        sim.run().unwrap();
        let trace = sim.take_trace();

        let count = |kind: &str| trace.iter().filter(|t| t.kind == kind).count();
        let rounds_per_step = ceil_log2(ranks) as usize * DEFAULT_ROUNDS;
        assert_eq!(count("histogram"), rounds_per_step * ranks * steps);
        assert_eq!(count("migration"), ranks * (ranks - 1) * steps);
        assert_eq!(count("let-cells"), ranks * (ranks - 1) * steps);
        assert_eq!(count("let-bodies"), ranks * (ranks - 1) * steps);
        assert_eq!(count("barrier"), ranks * steps);
        for pair in trace.windows(2) {
            let ordered = pair[0].time_ms < pair[1].time_ms
                || (pair[0].time_ms == pair[1].time_ms && pair[0].seq < pair[1].seq);
            assert!(ordered, "trace out of order: {:?} then {:?}", pair[0], pair[1]);
        }
    }

    #[test]
    fn report_lists_every_phase() {
        let cfg = quick_cfg(2, 500, Mode::BulkSync);
        let metrics = run_simulation(&cfg, &NetModel::default(), &CostModel::default()).unwrap();
        let report = metrics_report(&metrics);
        for name in PHASE_NAMES {
            assert!(report.contains(name), "report misses {name}");
        }
        assert!(report.contains("traverse max/mean"));
    }
}
