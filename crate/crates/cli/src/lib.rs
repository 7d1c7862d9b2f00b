//! Command-line driver for the simulated distributed FMM: argument parsing,
//! the desk-scale feasibility guard, and the four commands (run, scaling,
//! verify, balance) behind the `fmmsim` binary.

pub mod config;
pub mod output;

use std::fmt;
use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use fmmsim_core::{
    metrics_report, run_simulation, CostModel, Distribution, Metrics, Mode, SimError, Simulation,
    Weighting,
};

pub use config::{ConfigError, RunConfig};
pub use output::{
    critical_phase_totals, metrics_to_csv, trace_to_json, BALANCE_CSV_HEADER, METRICS_CSV_HEADER,
    SCALING_CSV_HEADER,
};

/// Largest population runnable without `--force`.
pub const MAX_BODIES: usize = 2_000_000;
/// Largest bodies-times-ranks product runnable without `--force`.
pub const MAX_BODY_RANK_PRODUCT: u128 = 64_000_000;

/// Simulated distributed fast multipole solver.
#[derive(Debug, Parser)]
#[command(
    name = "fmmsim",
    version,
    about = "Runs a Laplace fast multipole solve across simulated ranks and reports \
             virtual-time phase metrics"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Execute time steps and emit one CSV row per step, rank, and phase.
    Run(RunArgs),
    /// Sweep rank counts on a fixed problem and emit one makespan row each.
    Scaling(ScalingArgs),
    /// Sweep expansion orders and print an error-decay table.
    Verify(VerifyArgs),
    /// Run every distribution and report per-rank traverse-time balance.
    Balance(BalanceArgs),
}

/// Flags shared by every command. Each maps onto the [`RunConfig`] field of
/// the same name; unset flags fall back to the config file, then defaults.
#[derive(Args, Clone, Debug, Default)]
pub struct CommonArgs {
    /// Plain-text key=value config file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of bodies to generate.
    #[arg(long)]
    pub num_bodies: Option<usize>,
    /// Expansion order P.
    #[arg(long, short = 'P')]
    pub order: Option<usize>,
    /// Multipole acceptance parameter, in the open interval (0, 1).
    #[arg(long)]
    pub theta: Option<f64>,
    /// Leaf capacity of the adaptive octree.
    #[arg(long)]
    pub ncrit: Option<usize>,
    /// Task grain: subtrees this small traverse sequentially.
    #[arg(long)]
    pub nspawn: Option<usize>,
    /// Body distribution: cube, sphere, or plummer.
    #[arg(long)]
    pub distribution: Option<Distribution>,
    /// Number of simulated ranks.
    #[arg(long)]
    pub ranks: Option<usize>,
    /// Execution mode: bulk or async.
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Repartition weighting: uniform, interaction, or eq1.
    #[arg(long)]
    pub weighting: Option<Weighting>,
    /// Initial remote-interaction weight multiplier.
    #[arg(long)]
    pub alpha0: Option<f64>,
    /// Number of time steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Seed for the body generator.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Per-message network latency in virtual milliseconds.
    #[arg(long)]
    pub latency_ms: Option<f64>,
    /// Network bandwidth in bytes per virtual millisecond.
    #[arg(long)]
    pub bandwidth: Option<f64>,
    /// Per-round histogram reduction latency in virtual milliseconds.
    #[arg(long)]
    pub reduction_latency_ms: Option<f64>,
    /// Sample this many bodies per step for the direct-sum error oracle.
    #[arg(long)]
    pub oracle_samples: Option<usize>,
    /// Write the primary output here instead of stdout.
    #[arg(long, short = 'o')]
    pub output: Option<PathBuf>,
    /// Bypass the desk-scale feasibility guard.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Default)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Write a JSON-lines record of every simulated message here.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ScalingArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated rank counts to sweep.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    pub ranks_list: Vec<usize>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated expansion orders to sweep.
    #[arg(long, value_delimiter = ',', default_value = "4,6,8,10")]
    pub orders: Vec<usize>,
    /// Number of sampled targets for the direct-sum oracle.
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
}

#[derive(Args, Debug)]
pub struct BalanceArgs {
    #[command(flatten)]
    pub common: CommonArgs,
}

/// Driver failures, each mapped to a process exit code: usage problems exit
/// 2, desk-scale refusals exit 3, and everything else exits 1.
#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Usage(String),
    Infeasible(String),
    Sim(SimError),
    Io { path: PathBuf, source: io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::Sim(_) | CliError::Io { .. } => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "{e}"),
            CliError::Usage(what) => write!(f, "{what}"),
            CliError::Infeasible(what) => write!(f, "{what}"),
            CliError::Sim(e) => write!(f, "{e}"),
            CliError::Io { path, source } => {
                write!(f, "cannot write {}: {source}", path.display())
            }
        }
    }
}

impl std::error::Error for CliError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            CliError::Config(e) => Some(e),
            CliError::Sim(e) => Some(e),
            CliError::Io { source, .. } => Some(source),
            CliError::Usage(_) | CliError::Infeasible(_) => None,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl RunConfig {
    /// Merge defaults, the optional config file, and explicit flags, then
    /// range-check the result. Validation never touches the body population,
    /// so out-of-scale configurations still parse (the desk guard rejects
    /// them later, at execution time).
    pub fn resolve(args: &CommonArgs) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &args.config {
            cfg.apply_config_file(path)?;
        }
        cfg.apply_flags(args);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_flags(&mut self, args: &CommonArgs) {
        if let Some(v) = args.num_bodies {
            self.num_bodies = v;
        }
        if let Some(v) = args.order {
            self.order = v;
        }
        if let Some(v) = args.theta {
            self.theta = v;
        }
        if let Some(v) = args.ncrit {
            self.ncrit = v;
        }
        if let Some(v) = args.nspawn {
            self.nspawn = v;
        }
        if let Some(v) = args.distribution {
            self.distribution = v;
        }
        if let Some(v) = args.ranks {
            self.ranks = v;
        }
        if let Some(v) = args.mode {
            self.mode = v;
        }
        if let Some(v) = args.weighting {
            self.weighting = v;
        }
        if let Some(v) = args.alpha0 {
            self.alpha0 = v;
        }
        if let Some(v) = args.steps {
            self.steps = v;
        }
        if let Some(v) = args.seed {
            self.seed = v;
        }
        if let Some(v) = args.latency_ms {
            self.latency_ms = v;
        }
        if let Some(v) = args.bandwidth {
            self.bandwidth = v;
        }
        if let Some(v) = args.reduction_latency_ms {
            self.reduction_latency_ms = v;
        }
        if let Some(v) = args.oracle_samples {
            self.oracle_samples = Some(v);
        }
        if let Some(v) = &args.output {
            self.output = Some(v.clone());
        }
    }

    /// Range-check every field. Errors are usage errors (exit 2).
    pub fn validate(&self) -> Result<(), CliError> {
        let (sim, net) = self.to_sim();
        sim.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        net.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(())
    }
}

/// Refuse configurations beyond desk scale unless forced: at most
/// [`MAX_BODIES`] bodies, and at most [`MAX_BODY_RANK_PRODUCT`] for the
/// bodies-times-ranks product (each rank materializes its own tree plus
/// imported fragments, so memory and time grow with the product).
pub fn desk_guard(cfg: &RunConfig, max_ranks: usize, force: bool) -> Result<(), CliError> {
    if force {
        return Ok(());
    }
    if cfg.num_bodies > MAX_BODIES {
        return Err(CliError::Infeasible(format!(
            "{} bodies exceed the desk-scale limit of {MAX_BODIES}; pass --force to attempt the \
             run anyway",
            cfg.num_bodies
        )));
    }
    let product = cfg.num_bodies as u128 * max_ranks as u128;
    if product > MAX_BODY_RANK_PRODUCT {
        return Err(CliError::Infeasible(format!(
            "{} bodies across {max_ranks} simulated ranks exceed the desk-scale limit of \
             {MAX_BODY_RANK_PRODUCT} for bodies x ranks; pass --force to attempt the run anyway",
            cfg.num_bodies
        )));
    }
    Ok(())
}

/// Everything the run command produces: the metrics and their CSV rendering.
pub struct RunOutcome {
    pub metrics: Metrics,
    pub csv: String,
}

/// Execute the configured steps and render the per-phase CSV. When `trace`
/// is set, also write one JSON line per simulated message delivery.
pub fn cmd_run(cfg: &RunConfig, force: bool, trace: Option<&Path>) -> Result<RunOutcome, CliError> {
    desk_guard(cfg, cfg.ranks, force)?;
    let (sim_cfg, net) = cfg.to_sim();
    let mut sim = Simulation::new(sim_cfg, net, CostModel::default()).map_err(CliError::Sim)?;
    if trace.is_some() {
        sim.enable_trace();
    }
    let metrics = sim.run().map_err(CliError::Sim)?;
    if let Some(path) = trace {
        let json = trace_to_json(&sim.take_trace());
        std::fs::write(path, json)
            .map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
    }
    let csv = metrics_to_csv(&metrics);
    Ok(RunOutcome { metrics, csv })
}

/// Run the same problem once per requested rank count.
pub fn scaling_sweep(
    cfg: &RunConfig,
    rank_list: &[usize],
    force: bool,
) -> Result<Vec<(usize, Metrics)>, CliError> {
    if rank_list.is_empty() {
        return Err(CliError::Usage("the rank list must name at least one rank count".into()));
    }
    if rank_list.contains(&0) {
        return Err(CliError::Usage("rank counts must be at least 1".into()));
    }
    let max_ranks = *rank_list.iter().max().expect("list is non-empty");
    desk_guard(cfg, max_ranks, force)?;
    rank_list
        .iter()
        .map(|&ranks| {
            let mut swept = cfg.clone();
            swept.ranks = ranks;
            let (sim, net) = swept.to_sim();
            run_simulation(&sim, &net, &CostModel::default())
                .map(|metrics| (ranks, metrics))
                .map_err(CliError::Sim)
        })
        .collect()
}

/// Render a scaling sweep as CSV: one row per rank count.
pub fn scaling_csv(sweep: &[(usize, Metrics)]) -> String {
    let mut out = String::from(SCALING_CSV_HEADER);
    out.push('\n');
    for (ranks, metrics) in sweep {
        out.push_str(&output::scaling_row(*ranks, metrics));
        out.push('\n');
    }
    out
}

/// Measure the sampled oracle error once per expansion order, on a single
/// step of the configured problem.
pub fn verify_sweep(
    cfg: &RunConfig,
    orders: &[usize],
    samples: usize,
    force: bool,
) -> Result<Vec<(usize, f64)>, CliError> {
    if orders.is_empty() {
        return Err(CliError::Usage("the order list must name at least one order".into()));
    }
    desk_guard(cfg, cfg.ranks, force)?;
    orders
        .iter()
        .map(|&order| {
            let mut swept = cfg.clone();
            swept.order = order;
            swept.steps = 1;
            swept.oracle_samples = Some(samples);
            swept.validate()?;
            let (sim, net) = swept.to_sim();
            let metrics =
                run_simulation(&sim, &net, &CostModel::default()).map_err(CliError::Sim)?;
            let error = metrics.steps[0].error.expect("oracle was enabled for this run");
            Ok((order, error))
        })
        .collect()
}

/// Render a verify sweep as an aligned error-decay table.
pub fn verify_table(rows: &[(usize, f64)]) -> String {
    let mut out = String::from("order  rel_l2_error\n");
    for (order, error) in rows {
        writeln!(out, "{order:>5}  {error:.6e}").expect("writing to a String cannot fail");
    }
    out
}

/// Run every distribution under the configured weighting and rank count.
pub fn balance_sweep(
    cfg: &RunConfig,
    force: bool,
) -> Result<Vec<(Distribution, Metrics)>, CliError> {
    desk_guard(cfg, cfg.ranks, force)?;
    Distribution::ALL
        .iter()
        .map(|&distribution| {
            let mut swept = cfg.clone();
            swept.distribution = distribution;
            let (sim, net) = swept.to_sim();
            run_simulation(&sim, &net, &CostModel::default())
                .map(|metrics| (distribution, metrics))
                .map_err(CliError::Sim)
        })
        .collect()
}

/// Render a balance sweep as CSV: per-rank traverse times plus the step's
/// max-over-mean ratio, for every distribution and step.
pub fn balance_csv(sweep: &[(Distribution, Metrics)]) -> String {
    let mut out = String::from(BALANCE_CSV_HEADER);
    out.push('\n');
    for (distribution, metrics) in sweep {
        for step in &metrics.steps {
            let ratio = step.traverse_ratio();
            for rank in &step.ranks {
                writeln!(
                    out,
                    "{distribution},{},{},{},{ratio}",
                    step.step + 1,
                    rank.rank,
                    rank.phases.traverse
                )
                .expect("writing to a String cannot fail");
            }
        }
    }
    out
}

/// Route a parsed command line to its command, sending the primary output
/// to the configured destination (a file via `--output`, stdout otherwise)
/// and the human-readable summary to stderr.
pub fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Run(args) => {
            let cfg = RunConfig::resolve(&args.common)?;
            let outcome = cmd_run(&cfg, args.common.force, args.trace.as_deref())?;
            emit(cfg.output.as_deref(), &outcome.csv)?;
            eprintln!("{}", metrics_report(&outcome.metrics).trim_end());
            Ok(())
        }
        Command::Scaling(args) => {
            let cfg = RunConfig::resolve(&args.common)?;
            let sweep = scaling_sweep(&cfg, &args.ranks_list, args.common.force)?;
            emit(cfg.output.as_deref(), &scaling_csv(&sweep))
        }
        Command::Verify(args) => {
            let cfg = RunConfig::resolve(&args.common)?;
            let rows = verify_sweep(&cfg, &args.orders, args.samples, args.common.force)?;
            emit(cfg.output.as_deref(), &verify_table(&rows))
        }
        Command::Balance(args) => {
            let cfg = RunConfig::resolve(&args.common)?;
            let sweep = balance_sweep(&cfg, args.common.force)?;
            emit(cfg.output.as_deref(), &balance_csv(&sweep))
        }
    }
}

fn emit(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, text)
            .map_err(|source| CliError::Io { path: p.to_path_buf(), source }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::error::ErrorKind;

    fn parse_run(argv: &[&str]) -> RunArgs {
        let mut full = vec!["fmmsim", "run"];
        full.extend_from_slice(argv);
        match Cli::try_parse_from(full).expect("argv parses").command {
            Command::Run(args) => args,
            other => panic!("expected the run command, got {other:?}"),
        }
    }

    #[test]
    fn strong_scaling_reference_flags_parse_exactly() {
        let args = parse_run(&[
            "--num-bodies",
            "100000000",
            "-P",
            "10",
            "--theta",
            "0.4",
            "--ncrit",
            "256",
            "--nspawn",
            "1000",
            "--distribution",
            "cube",
        ]);
        let cfg = RunConfig::resolve(&args.common).unwrap();
        assert_eq!(cfg.num_bodies, 100_000_000);
        assert_eq!(cfg.order, 10);
        assert_eq!(cfg.theta, 0.4);
        assert_eq!(cfg.ncrit, 256);
        assert_eq!(cfg.nspawn, 1000);
        assert_eq!(cfg.distribution, Distribution::Cube);
        // Parsing succeeds at any scale; execution is what the guard stops.
        let err = desk_guard(&cfg, cfg.ranks, false).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("--force"), "{err}");
        desk_guard(&cfg, cfg.ranks, true).unwrap();
    }

    #[test]
    fn clustered_reference_flags_parse() {
        let args = parse_run(&["--ncrit", "64", "--distribution", "plummer"]);
        let cfg = RunConfig::resolve(&args.common).unwrap();
        assert_eq!(cfg.ncrit, 64);
        assert_eq!(cfg.distribution, Distribution::Plummer);
    }

    #[test]
    fn out_of_range_theta_is_a_usage_error() {
        let args = parse_run(&["--theta", "1.5"]);
        let err = RunConfig::resolve(&args.common).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("theta"), "{err}");
    }

    #[test]
    fn unknown_flags_are_rejected_by_the_parser() {
        let err = Cli::try_parse_from(["fmmsim", "run", "--splines", "4"]).unwrap_err();
        assert_eq!(err.kind(), ErrorKind::UnknownArgument);
    }

    #[test]
    fn flags_override_config_file_entries() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "seed=1\ntheta=0.3\nranks=2\n").unwrap();
        let mut args = parse_run(&["--seed", "9"]).common;
        args.config = Some(path);
        let cfg = RunConfig::resolve(&args).unwrap();
        assert_eq!(cfg.seed, 9, "flag wins over file");
        assert_eq!(cfg.theta, 0.3, "file wins over default");
        assert_eq!(cfg.ranks, 2);
    }

    #[test]
    fn guard_allows_desk_scale_and_refuses_large_products() {
        let mut cfg = RunConfig { num_bodies: 100_000, ..RunConfig::default() };
        desk_guard(&cfg, 64, false).unwrap();
        let err = desk_guard(&cfg, 1000, false).unwrap_err();
        assert!(matches!(err, CliError::Infeasible(_)));
        cfg.num_bodies = MAX_BODIES + 1;
        assert!(desk_guard(&cfg, 1, false).is_err());
        desk_guard(&cfg, 1, true).unwrap();
    }

    #[test]
    fn error_variants_map_to_documented_exit_codes() {
        let usage = CliError::Usage("bad".into());
        let config = CliError::Config(ConfigError::Line { line: 1, what: "bad".into() });
        let infeasible = CliError::Infeasible("big".into());
        let sim = CliError::Sim(SimError::Config { what: "bad" });
        let io = CliError::Io {
            path: PathBuf::from("x"),
            source: io::Error::new(io::ErrorKind::Other, "disk"),
        };
        assert_eq!(usage.exit_code(), 2);
        assert_eq!(config.exit_code(), 2);
        assert_eq!(infeasible.exit_code(), 3);
        assert_eq!(sim.exit_code(), 1);
        assert_eq!(io.exit_code(), 1);
    }

    #[test]
    fn run_outcome_csv_matches_metrics() {
        let cfg = RunConfig {
            num_bodies: 512,
            ranks: 2,
            steps: 1,
            seed: 3,
            ..RunConfig::default()
        };
        let outcome = cmd_run(&cfg, false, None).unwrap();
        assert_eq!(outcome.csv, metrics_to_csv(&outcome.metrics));
        assert!(outcome.csv.starts_with(METRICS_CSV_HEADER));
    }

    #[test]
    fn trace_file_records_every_message() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        let cfg = RunConfig {
            num_bodies: 512,
            ranks: 3,
            steps: 1,
            seed: 3,
            ..RunConfig::default()
        };
        cmd_run(&cfg, false, Some(&path)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(!lines.is_empty());
        for line in &lines {
            assert!(line.starts_with("{\"time_ms\":"), "malformed trace line {line}");
            assert!(line.ends_with('}'), "malformed trace line {line}");
        }
        let histograms =
            lines.iter().filter(|l| l.contains("\"kind\":\"histogram\"")).count();
        assert!(histograms > 0, "partition reductions must appear in the trace");
    }

    #[test]
    fn scaling_single_rank_row_matches_a_plain_run() {
        let cfg = RunConfig { num_bodies: 4096, steps: 1, ..RunConfig::default() };
        let sweep = scaling_sweep(&cfg, &[1, 2], false).unwrap();
        let single = RunConfig { ranks: 1, ..cfg.clone() };
        let plain = cmd_run(&single, false, None).unwrap();
        assert_eq!(sweep[0].1.makespan_ms, plain.metrics.makespan_ms);
        assert_eq!(sweep[0].1.potentials, plain.metrics.potentials);

        let csv = scaling_csv(&sweep);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(SCALING_CSV_HEADER));
        assert_eq!(lines.count(), 2);
    }

    #[test]
    fn scaling_phase_columns_sum_to_the_bulk_makespan() {
        let cfg = RunConfig { num_bodies: 4096, steps: 2, ..RunConfig::default() };
        for (_, metrics) in scaling_sweep(&cfg, &[2, 4], false).unwrap() {
            let total = critical_phase_totals(&metrics).total();
            let rel = (total - metrics.makespan_ms).abs() / metrics.makespan_ms.max(1e-12);
            assert!(rel < 1e-9, "{total} vs {}", metrics.makespan_ms);
        }
    }

    #[test]
    fn scaling_rejects_empty_and_zero_rank_lists() {
        let cfg = RunConfig::default();
        assert_eq!(scaling_sweep(&cfg, &[], false).unwrap_err().exit_code(), 2);
        assert_eq!(scaling_sweep(&cfg, &[1, 0], false).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn verify_two_bodies_is_exact_and_tight_theta_hits_the_floor() {
        let two = RunConfig { num_bodies: 2, ..RunConfig::default() };
        let rows = verify_sweep(&two, &[4], 2, false).unwrap();
        assert_eq!(rows[0].1, 0.0, "two bodies interact through the direct path only");

        let tight = RunConfig { num_bodies: 2000, theta: 0.05, ..RunConfig::default() };
        let rows = verify_sweep(&tight, &[6], 200, false).unwrap();
        assert!(rows[0].1 < 1e-12, "near-all-direct traversal error {}", rows[0].1);
    }

    #[test]
    fn verify_table_lists_orders_in_sweep_order() {
        let table = verify_table(&[(4, 1.5e-3), (6, 2.5e-5)]);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[0], "order  rel_l2_error");
        assert!(lines[1].trim_start().starts_with('4'));
        assert!(lines[2].trim_start().starts_with('6'));
    }

    #[test]
    fn balance_single_rank_ratio_is_exactly_one() {
        let cfg = RunConfig { num_bodies: 1000, ranks: 1, ..RunConfig::default() };
        let sweep = balance_sweep(&cfg, false).unwrap();
        assert_eq!(sweep.len(), 3);
        for (_, metrics) in &sweep {
            assert_eq!(metrics.steps[0].traverse_ratio(), 1.0);
        }
        let csv = balance_csv(&sweep);
        assert!(csv.starts_with(BALANCE_CSV_HEADER));
        assert_eq!(csv.lines().count(), 1 + 3);
    }

    #[test]
    fn balance_cube_under_uniform_weights_stays_near_one() {
        let cfg = RunConfig {
            num_bodies: 20_000,
            ranks: 4,
            weighting: Weighting::Uniform,
            ..RunConfig::default()
        };
        let sweep = balance_sweep(&cfg, false).unwrap();
        let (_, cube) = sweep.iter().find(|(d, _)| *d == Distribution::Cube).unwrap();
        let ratio = cube.steps[0].traverse_ratio();
        assert!(ratio < 1.25, "cube bodies spread evenly, got ratio {ratio}");
    }

    #[test]
    fn adaptive_weighting_improves_the_clustered_balance() {
        // The leaf-heavy regime where direct pairs dominate traverse time;
        // interaction-count weights then predict rank work.
        let base = RunConfig {
            num_bodies: 20_000,
            ranks: 8,
            distribution: Distribution::Plummer,
            ncrit: 256,
            theta: 0.6,
            steps: 3,
            seed: 11,
            ..RunConfig::default()
        };
        let uniform = RunConfig { weighting: Weighting::Uniform, ..base.clone() };
        let adaptive = RunConfig { weighting: Weighting::Adaptive, ..base };
        let flat = cmd_run(&uniform, false, None).unwrap().metrics;
        let weighted = cmd_run(&adaptive, false, None).unwrap().metrics;
        let flat_final = flat.steps[2].traverse_ratio();
        let weighted_final = weighted.steps[2].traverse_ratio();
        assert!(
            weighted_final < flat_final,
            "adapted weights should beat uniform: {weighted_final} vs {flat_final}"
        );
        // Step one of any run predates interaction data, so it matches the
        // uniform baseline and later steps improve on it.
        let first = weighted.steps[0].traverse_ratio();
        let second = weighted.steps[1].traverse_ratio();
        assert!(second < first, "weights engage on step two: {second} vs {first}");
    }
}
