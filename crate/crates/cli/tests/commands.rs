//! Slower command-level checks: strong-scaling shape and in-run load-balance
//! adaptation. These complement the unit tests in the library, which pin the
//! cheap consistency properties.

use fmmsim_cli::{cmd_run, scaling_sweep, RunConfig};
use fmmsim_core::{Distribution, Weighting};

#[test]
fn scaling_makespan_does_not_increase_through_four_ranks() {
    let cfg = RunConfig {
        num_bodies: 100_000,
        distribution: Distribution::Cube,
        theta: 0.6,
        ncrit: 128,
        steps: 1,
        ..RunConfig::default()
    };
    let sweep = scaling_sweep(&cfg, &[1, 2, 4], false).unwrap();
    let spans: Vec<f64> = sweep.iter().map(|(_, m)| m.makespan_ms).collect();
    assert!(
        spans[1] <= spans[0] && spans[2] <= spans[1],
        "makespans should not increase with rank count: {spans:?}"
    );
}

#[test]
fn run_traverse_ratio_drops_once_weights_engage() {
    let cfg = RunConfig {
        num_bodies: 20_000,
        distribution: Distribution::Plummer,
        ranks: 8,
        theta: 0.6,
        ncrit: 256,
        seed: 11,
        steps: 3,
        weighting: Weighting::Adaptive,
        ..RunConfig::default()
    };
    let outcome = cmd_run(&cfg, false, None).unwrap();
    let ratios: Vec<f64> =
        outcome.metrics.steps.iter().map(|s| s.traverse_ratio()).collect();
    // Step 1 partitions on uniform weights; interaction counts recorded there
    // feed the step-2 partition, which should already be tighter.
    assert!(
        ratios[1] < ratios[0],
        "step-2 ratio {} should drop below step-1 ratio {}",
        ratios[1],
        ratios[0]
    );
    assert!(
        ratios[2] < ratios[0],
        "step-3 ratio {} should stay below step-1 ratio {}",
        ratios[2],
        ratios[0]
    );
}
