//! Weighted domain decomposition by orthogonal recursive multisection.
//!
//! A group of `k` ranks divides its box along the longest axis so that the
//! low side carries `ceil(k/2) / k` of the group's body weight, recursing
//! until every rank owns one box. The splitter plane is located without
//! gathering bodies anywhere: each round every rank accumulates a small
//! weight histogram over the current interval, the counts are merged, and the
//! bin holding the target cumulative weight becomes the next, narrower
//! interval. Body weights blend direct and approximated interaction tallies
//! through [`body_weight`], whose mixing coefficient is tuned across steps by
//! [`adapt_alpha`].

use std::error::Error;
use std::fmt;

use rayon::prelude::*;

use crate::geometry::{Aabb, Body, Vec3};

/// Default histogram resolution per refinement round.
pub const DEFAULT_BINS: usize = 64;
/// Default number of refinement rounds per splitter search.
pub const DEFAULT_ROUNDS: usize = 3;

/// Partitioning failures. All variants are caller errors; the search itself
/// is total once its inputs are validated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PartitionError {
    /// Weight coefficient was negative or not finite.
    InvalidAlpha { alpha: f64 },
    /// Target weight fraction fell outside the open interval (0, 1).
    InvalidFraction { fraction: f64 },
    /// Fewer than two histogram bins per round.
    InvalidBins { bins: usize },
    /// Zero refinement rounds requested.
    InvalidRounds { rounds: usize },
    /// Axis index was not 0, 1, or 2.
    InvalidAxis { axis: usize },
    /// Search interval was inverted or not comparable.
    InvalidInterval { lo: f64, hi: f64 },
    /// A partition over zero ranks was requested.
    InvalidRanks,
    /// The population to split carries no weight at all.
    ZeroTotalWeight,
}

impl fmt::Display for PartitionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartitionError::InvalidAlpha { alpha } => {
                write!(f, "weight coefficient alpha must be finite and >= 0, got {alpha}")
            }
            PartitionError::InvalidFraction { fraction } => {
                write!(f, "target fraction must lie strictly between 0 and 1, got {fraction}")
            }
            PartitionError::InvalidBins { bins } => {
                write!(f, "histogram needs at least 2 bins per round, got {bins}")
            }
            PartitionError::InvalidRounds { rounds } => {
                write!(f, "splitter search needs at least 1 round, got {rounds}")
            }
            PartitionError::InvalidAxis { axis } => {
                write!(f, "axis must be 0, 1, or 2, got {axis}")
            }
            PartitionError::InvalidInterval { lo, hi } => {
                write!(f, "search interval [{lo}, {hi}] is not ordered")
            }
            PartitionError::InvalidRanks => write!(f, "cannot partition across zero ranks"),
            PartitionError::ZeroTotalWeight => {
                write!(f, "cannot place a splitter in a population with zero total weight")
            }
        }
    }
}

impl Error for PartitionError {}

/// Mixing coefficient for the communication term of a body's load weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightParams {
    pub alpha: f64,
}

impl WeightParams {
    /// `alpha` must be finite and non-negative.
    pub fn new(alpha: f64) -> Result<Self, PartitionError> {
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(PartitionError::InvalidAlpha { alpha });
        }
        Ok(WeightParams { alpha })
    }
}

/// Load weight of one body: its direct pair count `l` (work against
/// co-resident bodies) plus `alpha` times its approximated pair count `r`
/// (work against bodies that had to be shipped in).
pub fn body_weight(l: u64, r: u64, params: &WeightParams) -> f64 {
    l as f64 + params.alpha * r as f64
}

/// Per-interval weight counts along one axis, as accumulated by a single rank
/// and then merged across ranks during a splitter search.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub dim: usize,
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<f64>,
}

impl Histogram {
    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    /// Element-wise reduction of another rank's counts into this one. Both
    /// sides must describe the same interval and binning.
    pub fn merge(&mut self, other: &Histogram) {
        debug_assert_eq!(self.dim, other.dim);
        debug_assert_eq!(self.lo.to_bits(), other.lo.to_bits());
        debug_assert_eq!(self.hi.to_bits(), other.hi.to_bits());
        debug_assert_eq!(self.counts.len(), other.counts.len());
        for (mine, theirs) in self.counts.iter_mut().zip(&other.counts) {
            *mine += *theirs;
        }
    }
}

/// Bucket one rank's bodies into `bins` weight counts over `[lo, hi]` along
/// `dim`. Bodies outside the interval land in the end buckets, so the total
/// stays constant while the interval narrows across rounds.
pub fn rank_histogram(bodies: &[Body], dim: usize, lo: f64, hi: f64, bins: usize) -> Histogram {
    let mut counts = vec![0.0; bins];
    for b in bodies {
        counts[bin_index(b.pos.axis(dim), lo, hi, bins)] += b.weight;
    }
    Histogram { dim, lo, hi, counts }
}

fn bin_index(x: f64, lo: f64, hi: f64, bins: usize) -> usize {
    let width = (hi - lo) / bins as f64;
    if width <= 0.0 {
        return 0;
    }
    // The float-to-int cast saturates, which clamps coordinates below `lo`
    // into the first bucket for free.
    (((x - lo) / width) as usize).min(bins - 1)
}

fn validate_refinement(bins: usize, rounds: usize) -> Result<(), PartitionError> {
    if bins < 2 {
        return Err(PartitionError::InvalidBins { bins });
    }
    if rounds < 1 {
        return Err(PartitionError::InvalidRounds { rounds });
    }
    Ok(())
}

/// Find a coordinate along `dim` so that the weight at or below it
/// approximates `target_fraction` of the whole population, which is spread
/// across per-rank body groups. Each round histograms every group over the
/// current interval, merges the counts in rank order, and narrows the
/// interval to the bin where the cumulative weight crosses the target.
/// Returns the midpoint of the final interval; the cumulative-weight error is
/// bounded by the heaviest single bin of the last round.
pub fn histogram_split(
    groups: &[&[Body]],
    dim: usize,
    lo: f64,
    hi: f64,
    target_fraction: f64,
    rounds: usize,
    bins: usize,
) -> Result<f64, PartitionError> {
    if dim >= 3 {
        return Err(PartitionError::InvalidAxis { axis: dim });
    }
    if !(lo <= hi) {
        return Err(PartitionError::InvalidInterval { lo, hi });
    }
    validate_refinement(bins, rounds)?;
    if !(target_fraction > 0.0 && target_fraction < 1.0) {
        return Err(PartitionError::InvalidFraction { fraction: target_fraction });
    }

    let mut cur_lo = lo;
    let mut cur_hi = hi;
    let mut target = 0.0;
    for round in 0..rounds {
        let merged = combined_histogram(groups, dim, cur_lo, cur_hi, bins);
        if round == 0 {
            let total = merged.total();
            if !(total > 0.0) {
                return Err(PartitionError::ZeroTotalWeight);
            }
            target = target_fraction * total;
        }
        let mut cum = 0.0;
        // Accumulated rounding can leave the running sum a hair short of the
        // target in the last bin, so default to it.
        let mut chosen = bins - 1;
        for (i, &count) in merged.counts.iter().enumerate() {
            cum += count;
            if cum >= target {
                chosen = i;
                break;
            }
        }
        let width = (cur_hi - cur_lo) / bins as f64;
        if width <= 0.0 {
            // Every candidate coordinate has collapsed onto one point.
            break;
        }
        cur_hi = cur_lo + (chosen + 1) as f64 * width;
        cur_lo += chosen as f64 * width;
    }
    Ok(0.5 * (cur_lo + cur_hi))
}

fn combined_histogram(groups: &[&[Body]], dim: usize, lo: f64, hi: f64, bins: usize) -> Histogram {
    let parts: Vec<Histogram> = groups
        .par_iter()
        .map(|g| rank_histogram(g, dim, lo, hi, bins))
        .collect();
    let mut merged = Histogram { dim, lo, hi, counts: vec![0.0; bins] };
    for part in &parts {
        merged.merge(part);
    }
    merged
}

/// One interior node of the rank tree: the first `left_ranks` ranks of this
/// group live at or below `coordinate` along `axis`.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitNode {
    pub axis: usize,
    pub coordinate: f64,
    pub left_ranks: usize,
    pub left: Option<Box<SplitNode>>,
    pub right: Option<Box<SplitNode>>,
}

/// The rank decomposition of the global box: one domain per rank plus the
/// splitter tree that produced them. Domains tile the global box exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionMap {
    pub ranks: usize,
    pub domains: Vec<Aabb>,
    pub root: Option<Box<SplitNode>>,
}

impl PartitionMap {
    /// Rank whose domain holds `p`. Points exactly on a splitter plane go to
    /// the lower side, matching body assignment.
    pub fn locate(&self, p: Vec3) -> usize {
        let mut first = 0;
        let mut node = self.root.as_deref();
        while let Some(n) = node {
            if p.axis(n.axis) <= n.coordinate {
                node = n.left.as_deref();
            } else {
                first += n.left_ranks;
                node = n.right.as_deref();
            }
        }
        first
    }
}

/// Split `global_box` among `ranks` weighted domains and assign every body a
/// destination. A group of `k` ranks cuts along the longest axis of its box,
/// aiming `ceil(k/2) / k` of the group weight at the low side; bodies exactly
/// on the cut go low. A group whose bodies carry no weight falls back to a
/// geometric midpoint cut so the recursion still tiles the box.
pub fn orb_multisection(
    bodies: &[Body],
    global_box: Aabb,
    ranks: usize,
    bins: usize,
    rounds: usize,
) -> Result<(PartitionMap, Vec<u32>), PartitionError> {
    if ranks == 0 {
        return Err(PartitionError::InvalidRanks);
    }
    validate_refinement(bins, rounds)?;
    let mut scratch = bodies.to_vec();
    let mut order: Vec<u32> = (0..bodies.len() as u32).collect();
    let mut domains = vec![global_box; ranks];
    let (root, leaves) = split_group(
        &mut scratch,
        &mut order,
        global_box,
        0,
        ranks,
        &mut domains,
        bins,
        rounds,
    )?;
    let mut dest = vec![0u32; bodies.len()];
    for (rank, members) in leaves {
        for idx in members {
            dest[idx as usize] = rank as u32;
        }
    }
    Ok((PartitionMap { ranks, domains, root }, dest))
}

type GroupOutcome = Result<(Option<Box<SplitNode>>, Vec<(usize, Vec<u32>)>), PartitionError>;

#[allow(clippy::too_many_arguments)]
fn split_group(
    bodies: &mut [Body],
    order: &mut [u32],
    bx: Aabb,
    first_rank: usize,
    ranks: usize,
    domains: &mut [Aabb],
    bins: usize,
    rounds: usize,
) -> GroupOutcome {
    if ranks == 1 {
        domains[0] = bx;
        return Ok((None, vec![(first_rank, order.to_vec())]));
    }
    let axis = bx.longest_axis();
    let lo = bx.min.axis(axis);
    let hi = bx.max.axis(axis);
    let left_ranks = ranks.div_ceil(2);
    let total: f64 = bodies.iter().map(|b| b.weight).sum();
    let coordinate = if total > 0.0 {
        let fraction = left_ranks as f64 / ranks as f64;
        histogram_split(&[&*bodies], axis, lo, hi, fraction, rounds, bins)?
    } else {
        0.5 * (lo + hi)
    };

    let split_at = partition_in_place(bodies, order, |b| b.pos.axis(axis) <= coordinate);
    let (left_bodies, right_bodies) = bodies.split_at_mut(split_at);
    let (left_order, right_order) = order.split_at_mut(split_at);
    let (left_domains, right_domains) = domains.split_at_mut(left_ranks);
    let left_box = Aabb::new(bx.min, with_axis(bx.max, axis, coordinate));
    let right_box = Aabb::new(with_axis(bx.min, axis, coordinate), bx.max);

    let (left, right) = rayon::join(
        || {
            split_group(
                left_bodies,
                left_order,
                left_box,
                first_rank,
                left_ranks,
                left_domains,
                bins,
                rounds,
            )
        },
        || {
            split_group(
                right_bodies,
                right_order,
                right_box,
                first_rank + left_ranks,
                ranks - left_ranks,
                right_domains,
                bins,
                rounds,
            )
        },
    );
    let (left_node, mut leaves) = left?;
    let (right_node, right_leaves) = right?;
    leaves.extend(right_leaves);
    let node = SplitNode { axis, coordinate, left_ranks, left: left_node, right: right_node };
    Ok((Some(Box::new(node)), leaves))
}

/// Group the low-side elements of both parallel slices at the front and
/// return the boundary. Order within each side is not preserved, but the
/// membership is deterministic.
fn partition_in_place(
    bodies: &mut [Body],
    order: &mut [u32],
    keep_low: impl Fn(&Body) -> bool,
) -> usize {
    let mut split = 0;
    for j in 0..bodies.len() {
        if keep_low(&bodies[j]) {
            bodies.swap(split, j);
            order.swap(split, j);
            split += 1;
        }
    }
    split
}

fn with_axis(mut v: Vec3, axis: usize, value: f64) -> Vec3 {
    match axis {
        0 => v.x = value,
        1 => v.y = value,
        _ => v.z = value,
    }
    v
}

/// One step's observation for the alpha search.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlphaSample {
    pub alpha: f64,
    pub runtime: f64,
}

/// Pick the next alpha to try from per-step runtimes. The best recorded
/// alpha is kept (ties go to the earliest step) and probed outward
/// multiplicatively: double it if that value is untried, otherwise halve it,
/// otherwise stay put. The returned value never abandons the best recorded
/// runtime, so the search cannot regress past the first step.
pub fn adapt_alpha(history: &[AlphaSample]) -> f64 {
    let mut best = match history.first() {
        Some(sample) => *sample,
        None => return 1.0,
    };
    for sample in &history[1..] {
        if sample.runtime < best.runtime {
            best = *sample;
        }
    }
    let tried = |alpha: f64| history.iter().any(|s| s.alpha == alpha);
    let up = best.alpha * 2.0;
    if !tried(up) {
        return up;
    }
    let down = best.alpha * 0.5;
    if !tried(down) {
        return down;
    }
    best.alpha
}
