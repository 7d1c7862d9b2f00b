//! Run configuration: defaults, the key=value config file format, and the
//! merge order (defaults, then file entries, then command-line flags).

use std::fmt;
use std::io;
use std::path::PathBuf;

use fmmsim_core::{Distribution, Mode, NetModel, SimConfig, Weighting};

/// Every knob a run accepts. Field names double as the config file keys and,
/// in kebab case, as the long command-line flags.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub num_bodies: usize,
    /// Expansion order P.
    pub order: usize,
    /// Multipole acceptance parameter, in the open interval (0, 1).
    pub theta: f64,
    /// Leaf capacity of the adaptive octree.
    pub ncrit: usize,
    /// Task grain: subtrees at or below this size traverse sequentially.
    pub nspawn: usize,
    pub distribution: Distribution,
    /// Number of simulated ranks.
    pub ranks: usize,
    /// Execution mode: bulk-synchronous fences or message-driven overlap.
    pub mode: Mode,
    /// Body-weight rule for repartitioning: uniform, interaction, or eq1.
    pub weighting: Weighting,
    /// Initial remote-interaction weight multiplier.
    pub alpha0: f64,
    pub steps: usize,
    pub seed: u64,
    /// Per-message network latency in virtual milliseconds.
    pub latency_ms: f64,
    /// Network bandwidth in bytes per virtual millisecond.
    pub bandwidth: f64,
    /// Per-round latency of a histogram reduction, in virtual milliseconds.
    pub reduction_latency_ms: f64,
    /// When set, report the sampled relative L2 potential error per step.
    pub oracle_samples: Option<usize>,
    /// CSV destination; stdout when unset.
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sim = SimConfig::default();
        let net = NetModel::default();
        RunConfig {
            num_bodies: sim.bodies,
            order: sim.order,
            theta: sim.theta,
            ncrit: sim.ncrit,
            nspawn: sim.nspawn,
            distribution: sim.distribution,
            ranks: sim.ranks,
            mode: sim.mode,
            weighting: sim.weighting,
            alpha0: sim.alpha0,
            steps: sim.steps,
            seed: sim.seed,
            latency_ms: net.per_message_latency_ms,
            bandwidth: net.bandwidth_bytes_per_ms,
            reduction_latency_ms: net.reduction_latency_ms,
            oracle_samples: sim.oracle_samples,
            output: None,
        }
    }
}

impl RunConfig {
    /// The simulation-facing halves of this configuration.
    pub fn to_sim(&self) -> (SimConfig, NetModel) {
        (
            SimConfig {
                bodies: self.num_bodies,
                distribution: self.distribution,
                seed: self.seed,
                ranks: self.ranks,
                order: self.order,
                theta: self.theta,
                ncrit: self.ncrit,
                nspawn: self.nspawn,
                mode: self.mode,
                steps: self.steps,
                weighting: self.weighting,
                alpha0: self.alpha0,
                oracle_samples: self.oracle_samples,
            },
            NetModel {
                per_message_latency_ms: self.latency_ms,
                bandwidth_bytes_per_ms: self.bandwidth,
                reduction_latency_ms: self.reduction_latency_ms,
            },
        )
    }

    /// Serialize as config file lines. Optional fields are omitted when
    /// unset, so a rewritten file reproduces this exact configuration.
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        kv("num_bodies", self.num_bodies.to_string());
        kv("order", self.order.to_string());
        kv("theta", self.theta.to_string());
        kv("ncrit", self.ncrit.to_string());
        kv("nspawn", self.nspawn.to_string());
        kv("distribution", self.distribution.to_string());
        kv("ranks", self.ranks.to_string());
        kv("mode", self.mode.to_string());
        kv("weighting", self.weighting.to_string());
        kv("alpha0", self.alpha0.to_string());
        kv("steps", self.steps.to_string());
        kv("seed", self.seed.to_string());
        kv("latency_ms", self.latency_ms.to_string());
        kv("bandwidth", self.bandwidth.to_string());
        kv("reduction_latency_ms", self.reduction_latency_ms.to_string());
        if let Some(samples) = self.oracle_samples {
            kv("oracle_samples", samples.to_string());
        }
        if let Some(path) = &self.output {
            kv("output", path.display().to_string());
        }
        out
    }

    /// Parse config file text onto `self`. Lines are `key=value`; blank
    /// lines and lines starting with `#` are skipped; later entries win.
    pub fn apply_config_str(&mut self, text: &str) -> Result<(), ConfigError> {
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or_else(|| ConfigError::Line {
                line,
                what: "expected key=value".to_string(),
            })?;
            self.apply_kv(key.trim(), value.trim())
                .map_err(|what| ConfigError::Line { line, what })?;
        }
        Ok(())
    }

    /// Parse a complete config file from text, starting from defaults.
    pub fn from_config_str(text: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        cfg.apply_config_str(text)?;
        Ok(cfg)
    }

    /// Read and apply a config file from disk.
    pub fn apply_config_file(&mut self, path: &std::path::Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        self.apply_config_str(&text)
    }

    fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String>
        where
            T::Err: fmt::Display,
        {
            value.parse().map_err(|e| format!("bad value for {key}: {e}"))
        }
        match key {
            "num_bodies" => self.num_bodies = parse(key, value)?,
            "order" => self.order = parse(key, value)?,
            "theta" => self.theta = parse(key, value)?,
            "ncrit" => self.ncrit = parse(key, value)?,
            "nspawn" => self.nspawn = parse(key, value)?,
            "distribution" => self.distribution = parse(key, value)?,
            "ranks" => self.ranks = parse(key, value)?,
            "mode" => self.mode = parse(key, value)?,
            "weighting" => self.weighting = parse(key, value)?,
            "alpha0" => self.alpha0 = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "latency_ms" => self.latency_ms = parse(key, value)?,
            "bandwidth" => self.bandwidth = parse(key, value)?,
            "reduction_latency_ms" => self.reduction_latency_ms = parse(key, value)?,
            "oracle_samples" => self.oracle_samples = Some(parse(key, value)?),
            "output" => self.output = Some(PathBuf::from(value)),
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }
}

/// Config file problems: an unreadable file or a malformed line.
#[derive(Debug)]
pub enum ConfigError {
    Read { path: PathBuf, source: io::Error },
    Line { line: usize, what: String },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Read { path, source } => {
                write!(f, "cannot read config file {}: {source}", path.display())
            }
            ConfigError::Line { line, what } => write!(f, "config line {line}: {what}"),
        }
    }
}

impl std::error::Error for ConfigError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            ConfigError::Read { source, .. } => Some(source),
            ConfigError::Line { .. } => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_mirror_the_simulation_defaults() {
        let (sim, net) = RunConfig::default().to_sim();
        let dsim = SimConfig::default();
        let dnet = NetModel::default();
        assert_eq!(sim.bodies, dsim.bodies);
        assert_eq!(sim.order, dsim.order);
        assert_eq!(sim.theta, dsim.theta);
        assert_eq!(sim.ncrit, dsim.ncrit);
        assert_eq!(sim.nspawn, dsim.nspawn);
        assert_eq!(sim.distribution, dsim.distribution);
        assert_eq!(sim.ranks, dsim.ranks);
        assert_eq!(sim.mode, dsim.mode);
        assert_eq!(sim.weighting, dsim.weighting);
        assert_eq!(sim.steps, dsim.steps);
        assert_eq!(sim.seed, dsim.seed);
        assert_eq!(net, dnet);
    }

    #[test]
    fn comments_blanks_and_overrides_parse() {
        let text = "# sample configuration\n\n  seed = 9\nseed=10\ntheta=0.4\n";
        let cfg = RunConfig::from_config_str(text).unwrap();
        assert_eq!(cfg.seed, 10);
        assert_eq!(cfg.theta, 0.4);
        assert_eq!(cfg.num_bodies, RunConfig::default().num_bodies);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected_with_line_numbers() {
        let err = RunConfig::from_config_str("seed=1\nsplines=4\n").unwrap_err();
        assert!(matches!(err, ConfigError::Line { line: 2, .. }), "{err}");
        assert!(err.to_string().contains("splines"));

        let err = RunConfig::from_config_str("theta=warm\n").unwrap_err();
        assert!(err.to_string().contains("theta"), "{err}");

        let err = RunConfig::from_config_str("just a line\n").unwrap_err();
        assert!(err.to_string().contains("key=value"), "{err}");
    }

    fn arb_config() -> impl Strategy<Value = RunConfig> {
        let enums = (
            prop_oneof![
                Just(Distribution::Cube),
                Just(Distribution::Sphere),
                Just(Distribution::Plummer)
            ],
            prop_oneof![Just(Mode::BulkSync), Just(Mode::Async)],
            prop_oneof![
                Just(Weighting::Uniform),
                Just(Weighting::Interaction),
                Just(Weighting::Adaptive)
            ],
        );
        let sizes = (1usize..10_000_000, 1usize..=16, 1usize..=512, 1usize..=5000, 1usize..=16);
        let reals = (0.01f64..0.99, 0.0f64..8.0, 0.0f64..10.0, 1.0f64..1e9, 0.0f64..1.0);
        let rest = (
            1usize..=64,
            any::<u64>(),
            proptest::option::of(1usize..100_000),
            proptest::option::of("[a-z]{1,12}(\\.csv)?"),
        );
        (enums, sizes, reals, rest).prop_map(
            |(
                (distribution, mode, weighting),
                (num_bodies, ranks, ncrit, nspawn, order),
                (theta, alpha0, latency_ms, bandwidth, reduction_latency_ms),
                (steps, seed, oracle_samples, output),
            )| {
                RunConfig {
                    num_bodies,
                    order,
                    theta,
                    ncrit,
                    nspawn,
                    distribution,
                    ranks,
                    mode,
                    weighting,
                    alpha0,
                    steps,
                    seed,
                    latency_ms,
                    bandwidth,
                    reduction_latency_ms,
                    oracle_samples,
                    output: output.map(PathBuf::from),
                }
            },
        )
    }

    proptest! {
        #[test]
        fn config_file_round_trip_is_identity(cfg in arb_config()) {
            let text = cfg.to_config_string();
            let reparsed = RunConfig::from_config_str(&text).unwrap();
            prop_assert_eq!(reparsed, cfg);
        }
    }
}
