//! Dual tree traversal: simultaneous recursion over a target and a source
//! tree, applying a multipole acceptance criterion per cell pair instead of
//! building explicit interaction lists.
//!
//! Parallelism follows the spawn-threshold rule: recursing into a target
//! child becomes an independent task only when that child holds more than
//! `nspawn` bodies. Tasks own disjoint target subtrees, so all writes
//! (locals, body accumulators, statistics) are single-writer, and results
//! are bitwise independent of the threshold. Mutual traversal writes both
//! sides of each pair, so it only forks on diagonal child pairs and runs
//! cross pairs after those tasks have joined.

use std::fmt;
use std::ops::Range;
use std::slice;

use crate::geometry::{Body, Vec3};
use crate::kernels::{accumulate_pair, p2p_mutual, p2p_within, ExpansionTables, KernelScratch};
use crate::tree::{Cell, SourceView, Tree};

#[derive(Clone, Copy, Debug)]
pub struct TraversalConfig {
    pub theta: f64,
    pub nspawn: usize,
    pub mutual: bool,
}

impl TraversalConfig {
    pub fn new(theta: f64, nspawn: usize, mutual: bool) -> Result<Self, TraversalError> {
        if !(theta > 0.0 && theta < 1.0) {
            return Err(TraversalError::InvalidTheta(theta));
        }
        if nspawn == 0 {
            return Err(TraversalError::InvalidNspawn);
        }
        Ok(TraversalConfig { theta, nspawn, mutual })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TraversalError {
    InvalidTheta(f64),
    InvalidNspawn,
    /// A particle-particle interaction reached a source cell whose bodies
    /// were never shipped; the exporting side violated its acceptance
    /// guarantee.
    MultipoleOnlyLeaf { cell: usize },
}

impl fmt::Display for TraversalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraversalError::InvalidTheta(t) => {
                write!(f, "theta {t} outside the open interval (0, 1)")
            }
            TraversalError::InvalidNspawn => write!(f, "nspawn must be at least 1"),
            TraversalError::MultipoleOnlyLeaf { cell } => {
                write!(f, "direct interaction demanded bodies of multipole-only cell {cell}")
            }
        }
    }
}

impl std::error::Error for TraversalError {}

/// Work executed by one traversal call: number of multipole-to-local
/// translations and number of directed particle-particle interactions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TaskCounts {
    pub m2l: u64,
    pub p2p: u64,
}

impl TaskCounts {
    fn add(&mut self, o: TaskCounts) {
        self.m2l += o.m2l;
        self.p2p += o.p2p;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairKind {
    M2l,
    P2p,
}

/// One (target cell, source cell) interaction, logged when recording is on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecordedPair {
    pub target: u32,
    pub source: u32,
    pub kind: PairKind,
}

/// Interaction tallies per target body and per target cell. The per-body
/// lists feed the load-balancing weights; `local` counts partners from this
/// rank's own tree and `remote` counts partners from grafted trees.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionStats {
    pub local_pairs: Vec<u64>,
    pub remote_pairs: Vec<u64>,
    pub cell_m2l: Vec<u32>,
    pub cell_p2p: Vec<u64>,
    pub recorded: Option<Vec<RecordedPair>>,
}

impl InteractionStats {
    pub fn new(n_cells: usize, n_bodies: usize) -> Self {
        InteractionStats {
            local_pairs: vec![0; n_bodies],
            remote_pairs: vec![0; n_bodies],
            cell_m2l: vec![0; n_cells],
            cell_p2p: vec![0; n_cells],
            recorded: None,
        }
    }

    /// Enable pair recording; recorded traversals run sequentially.
    pub fn with_recording(mut self) -> Self {
        self.recorded = Some(Vec::new());
        self
    }
}

/// Accept when both cells, measured by tight-box half-diagonals, subtend
/// less than `theta` at each other's expansion centers.
pub fn mac(target: &Cell, source: &Cell, theta: f64) -> bool {
    let s = target.radius + source.radius;
    let d2 = (target.exp_center() - source.exp_center()).norm_sq();
    s * s < theta * theta * d2
}

/// Raw-pointer wrapper so disjoint-index writes can cross task boundaries.
/// Every dereference site states why its index set is owned by that task.
struct SendPtrMut<T>(*mut T);

impl<T> Clone for SendPtrMut<T> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<T> Copy for SendPtrMut<T> {}
unsafe impl<T: Send> Send for SendPtrMut<T> {}
unsafe impl<T: Send> Sync for SendPtrMut<T> {}

struct OneSided<'a> {
    t_cells: &'a [Cell],
    s_cells: &'a [Cell],
    s_multipoles: &'a [f64],
    /// Positions and charges of all source bodies, copied before traversal.
    /// Self-traversal would otherwise read bodies another task is writing.
    s_snapshot: &'a [(Vec3, f64)],
    t_bodies: SendPtrMut<Body>,
    t_locals: SendPtrMut<f64>,
    ncoef: usize,
    tables: &'a ExpansionTables,
    theta: f64,
    nspawn: usize,
    parallel: bool,
    /// Same tree on both sides: skip self-pairs and count partners as n−1.
    selfsame: bool,
    pair_stats: SendPtrMut<u64>,
    cell_m2l: SendPtrMut<u32>,
    cell_p2p: SendPtrMut<u64>,
    record: Option<SendPtrMut<Vec<RecordedPair>>>,
}

impl OneSided<'_> {
    /// Safety: caller's task owns target cell `t` (its subtree is assigned
    /// to exactly one task at a time).
    unsafe fn local_of(&self, t: usize) -> &mut [f64] {
        slice::from_raw_parts_mut(self.t_locals.0.add(t * self.ncoef), self.ncoef)
    }

    unsafe fn record_pair(&self, target: usize, source: usize, kind: PairKind) {
        if let Some(rec) = self.record {
            // Recording implies sequential execution; single writer.
            (*rec.0).push(RecordedPair { target: target as u32, source: source as u32, kind });
        }
    }
}

fn one_sided(
    ctx: &OneSided<'_>,
    t: usize,
    s: usize,
    scratch: &mut KernelScratch,
) -> Result<TaskCounts, TraversalError> {
    let tc = &ctx.t_cells[t];
    let sc = &ctx.s_cells[s];

    if mac(tc, sc, ctx.theta) {
        let m = &ctx.s_multipoles[s * ctx.ncoef..(s + 1) * ctx.ncoef];
        // Safety: this task owns target subtree containing t; locals,
        // cell_m2l and the recording vector are written by it alone.
        unsafe {
            let l = ctx.local_of(t);
            ctx.tables
                .m2l(m, sc.exp_center() - tc.exp_center(), l, scratch)
                .expect("acceptance criterion implies separated centers");
            *ctx.cell_m2l.0.add(t) += 1;
            ctx.record_pair(t, s, PairKind::M2l);
        }
        return Ok(TaskCounts { m2l: 1, p2p: 0 });
    }

    let t_leaf = tc.is_leaf();
    let s_leaf = sc.is_leaf();
    if t_leaf && s_leaf {
        if sc.is_multipole_only() {
            return Err(TraversalError::MultipoleOnlyLeaf { cell: s });
        }
        let tr = tc.body_range();
        let sr = sc.body_range();
        let same_cell = ctx.selfsame && t == s;
        let partners = if same_cell { sr.len() - 1 } else { sr.len() } as u64;
        let pairs = tr.len() as u64 * partners;
        // Safety: target body range and per-body/per-cell stats slots are
        // owned by this task; source bodies are read from the snapshot.
        unsafe {
            let targets = slice::from_raw_parts_mut(ctx.t_bodies.0.add(tr.start), tr.len());
            for tb in targets {
                for &(pos, charge) in &ctx.s_snapshot[sr.clone()] {
                    accumulate_pair(tb, pos, charge);
                }
            }
            for i in tr {
                *ctx.pair_stats.0.add(i) += partners;
            }
            *ctx.cell_p2p.0.add(t) += pairs;
            ctx.record_pair(t, s, PairKind::P2p);
        }
        return Ok(TaskCounts { m2l: 0, p2p: pairs });
    }

    let split_target = !t_leaf && (s_leaf || tc.radius >= sc.radius);
    let mut counts = TaskCounts::default();
    if split_target {
        let children: Vec<usize> = tc.children().collect();
        let any_spawn = ctx.parallel
            && children
                .iter()
                .any(|&c| ctx.t_cells[c].body_count as usize > ctx.nspawn);
        if any_spawn && children.len() > 1 {
            let mut slots: Vec<Option<Result<TaskCounts, TraversalError>>> =
                vec![None; children.len()];
            rayon::scope(|scope| {
                let mut inline = Vec::new();
                for (slot, &ct) in slots.iter_mut().zip(&children) {
                    if ctx.t_cells[ct].body_count as usize > ctx.nspawn {
                        scope.spawn(move |_| {
                            let mut task_scratch = ctx.tables.scratch();
                            *slot = Some(one_sided(ctx, ct, s, &mut task_scratch));
                        });
                    } else {
                        inline.push((slot, ct));
                    }
                }
                for (slot, ct) in inline {
                    *slot = Some(one_sided(ctx, ct, s, scratch));
                }
            });
            for slot in slots {
                counts.add(slot.expect("every child pair ran")?);
            }
        } else {
            for ct in children {
                counts.add(one_sided(ctx, ct, s, scratch)?);
            }
        }
    } else {
        for cs in sc.children() {
            counts.add(one_sided(ctx, t, cs, scratch)?);
        }
    }
    Ok(counts)
}

struct Mutual<'a> {
    cells: &'a [Cell],
    multipoles: &'a [f64],
    bodies: SendPtrMut<Body>,
    locals: SendPtrMut<f64>,
    ncoef: usize,
    tables: &'a ExpansionTables,
    theta: f64,
    nspawn: usize,
    parallel: bool,
    pair_stats: SendPtrMut<u64>,
    cell_m2l: SendPtrMut<u32>,
    cell_p2p: SendPtrMut<u64>,
    record: Option<SendPtrMut<Vec<RecordedPair>>>,
}

impl Mutual<'_> {
    /// Safety: cell `c` belongs to a subtree owned by the calling task.
    unsafe fn local_of(&self, c: usize) -> &mut [f64] {
        slice::from_raw_parts_mut(self.locals.0.add(c * self.ncoef), self.ncoef)
    }

    unsafe fn bodies_of(&self, r: Range<usize>) -> &mut [Body] {
        slice::from_raw_parts_mut(self.bodies.0.add(r.start), r.len())
    }

    unsafe fn record_pair(&self, target: usize, source: usize, kind: PairKind) {
        if let Some(rec) = self.record {
            (*rec.0).push(RecordedPair { target: target as u32, source: source as u32, kind });
        }
    }

    unsafe fn bump(&self, cell: usize, body_range: Range<usize>, partners: u64, pairs: u64) {
        for i in body_range {
            *self.pair_stats.0.add(i) += partners;
        }
        *self.cell_p2p.0.add(cell) += pairs;
    }
}

fn mutual(
    ctx: &Mutual<'_>,
    x: usize,
    y: usize,
    scratch: &mut KernelScratch,
) -> Result<TaskCounts, TraversalError> {
    if x == y {
        let c = &ctx.cells[x];
        if c.is_leaf() {
            let r = c.body_range();
            let n = r.len() as u64;
            let pairs = n * n.saturating_sub(1);
            // Safety: this task owns the subtree containing x.
            unsafe {
                p2p_within(ctx.bodies_of(r.clone()));
                ctx.bump(x, r, n.saturating_sub(1), pairs);
                ctx.record_pair(x, x, PairKind::P2p);
            }
            return Ok(TaskCounts { m2l: 0, p2p: pairs });
        }
        let children: Vec<usize> = c.children().collect();
        let mut counts = TaskCounts::default();
        let any_spawn = ctx.parallel
            && children
                .iter()
                .any(|&k| ctx.cells[k].body_count as usize > ctx.nspawn);
        if any_spawn && children.len() > 1 {
            let mut slots: Vec<Option<Result<TaskCounts, TraversalError>>> =
                vec![None; children.len()];
            rayon::scope(|scope| {
                let mut inline = Vec::new();
                for (slot, &k) in slots.iter_mut().zip(&children) {
                    if ctx.cells[k].body_count as usize > ctx.nspawn {
                        scope.spawn(move |_| {
                            let mut task_scratch = ctx.tables.scratch();
                            *slot = Some(mutual(ctx, k, k, &mut task_scratch));
                        });
                    } else {
                        inline.push((slot, k));
                    }
                }
                for (slot, k) in inline {
                    *slot = Some(mutual(ctx, k, k, scratch));
                }
            });
            for slot in slots {
                counts.add(slot.expect("every diagonal pair ran")?);
            }
        } else {
            for &k in &children {
                counts.add(mutual(ctx, k, k, scratch)?);
            }
        }
        // Cross pairs write both subtrees, so they run after the diagonal
        // tasks have joined, sequentially in this task.
        for i in 0..children.len() {
            for j in i + 1..children.len() {
                counts.add(mutual(ctx, children[i], children[j], scratch)?);
            }
        }
        return Ok(counts);
    }

    let cx = &ctx.cells[x];
    let cy = &ctx.cells[y];
    if mac(cx, cy, ctx.theta) {
        let mx = &ctx.multipoles[x * ctx.ncoef..(x + 1) * ctx.ncoef];
        let my = &ctx.multipoles[y * ctx.ncoef..(y + 1) * ctx.ncoef];
        let w = cy.exp_center() - cx.exp_center();
        // Safety: x and y are distinct cells inside this task's ownership;
        // their local slices are disjoint.
        unsafe {
            ctx.tables
                .m2l(my, w, ctx.local_of(x), scratch)
                .expect("acceptance criterion implies separated centers");
            ctx.tables
                .m2l(mx, Vec3::ZERO - w, ctx.local_of(y), scratch)
                .expect("acceptance criterion implies separated centers");
            *ctx.cell_m2l.0.add(x) += 1;
            *ctx.cell_m2l.0.add(y) += 1;
            ctx.record_pair(x, y, PairKind::M2l);
            ctx.record_pair(y, x, PairKind::M2l);
        }
        return Ok(TaskCounts { m2l: 2, p2p: 0 });
    }

    let x_leaf = cx.is_leaf();
    let y_leaf = cy.is_leaf();
    if x_leaf && y_leaf {
        let rx = cx.body_range();
        let ry = cy.body_range();
        let pairs = (rx.len() * ry.len()) as u64;
        // Safety: two leaves are never ancestor and descendant, so their
        // body ranges are disjoint; both lie in this task's subtree(s).
        unsafe {
            p2p_mutual(ctx.bodies_of(rx.clone()), ctx.bodies_of(ry.clone()));
            ctx.bump(x, rx.clone(), ry.len() as u64, pairs);
            ctx.bump(y, ry, rx.len() as u64, pairs);
            ctx.record_pair(x, y, PairKind::P2p);
            ctx.record_pair(y, x, PairKind::P2p);
        }
        return Ok(TaskCounts { m2l: 0, p2p: 2 * pairs });
    }

    let mut counts = TaskCounts::default();
    let split_x = !x_leaf && (y_leaf || cx.radius >= cy.radius);
    if split_x {
        for k in cx.children() {
            counts.add(mutual(ctx, k, y, scratch)?);
        }
    } else {
        for k in cy.children() {
            counts.add(mutual(ctx, x, k, scratch)?);
        }
    }
    Ok(counts)
}

fn snapshot(bodies: &[Body]) -> Vec<(Vec3, f64)> {
    bodies.iter().map(|b| (b.pos, b.charge)).collect()
}

/// Traverse the tree against itself, accumulating locals, near-field body
/// interactions, and per-body `local` partner counts.
pub fn traverse_local(
    tree: &mut Tree,
    tables: &ExpansionTables,
    cfg: &TraversalConfig,
    stats: &mut InteractionStats,
) -> Result<TaskCounts, TraversalError> {
    debug_assert_eq!(stats.local_pairs.len(), tree.bodies.len());
    debug_assert_eq!(stats.cell_m2l.len(), tree.cells.len());
    if tree.cells[0].body_count == 0 {
        return Ok(TaskCounts::default());
    }
    let ncoef = tree.coeff_count();
    let recording = stats.recorded.is_some();
    let mut record_vec = stats.recorded.take().unwrap_or_default();
    let record =
        if recording { Some(SendPtrMut(&mut record_vec as *mut Vec<RecordedPair>)) } else { None };

    let result = if cfg.mutual {
        let ctx = Mutual {
            cells: &tree.cells,
            multipoles: &tree.multipoles,
            bodies: SendPtrMut(tree.bodies.as_mut_ptr()),
            locals: SendPtrMut(tree.locals.as_mut_ptr()),
            ncoef,
            tables,
            theta: cfg.theta,
            nspawn: cfg.nspawn,
            parallel: !recording,
            pair_stats: SendPtrMut(stats.local_pairs.as_mut_ptr()),
            cell_m2l: SendPtrMut(stats.cell_m2l.as_mut_ptr()),
            cell_p2p: SendPtrMut(stats.cell_p2p.as_mut_ptr()),
            record,
        };
        let mut scratch = tables.scratch();
        mutual(&ctx, 0, 0, &mut scratch)
    } else {
        let snap = snapshot(&tree.bodies);
        let ctx = OneSided {
            t_cells: &tree.cells,
            s_cells: &tree.cells,
            s_multipoles: &tree.multipoles,
            s_snapshot: &snap,
            t_bodies: SendPtrMut(tree.bodies.as_mut_ptr()),
            t_locals: SendPtrMut(tree.locals.as_mut_ptr()),
            ncoef,
            tables,
            theta: cfg.theta,
            nspawn: cfg.nspawn,
            parallel: !recording,
            selfsame: true,
            pair_stats: SendPtrMut(stats.local_pairs.as_mut_ptr()),
            cell_m2l: SendPtrMut(stats.cell_m2l.as_mut_ptr()),
            cell_p2p: SendPtrMut(stats.cell_p2p.as_mut_ptr()),
            record,
        };
        let mut scratch = tables.scratch();
        one_sided(&ctx, 0, 0, &mut scratch)
    };
    if recording {
        stats.recorded = Some(record_vec);
    }
    result
}

/// Traverse the tree against a grafted remote source. Sources are read-only
/// (the mutual flag does not apply) and partner counts go to `remote`.
pub fn traverse_remote(
    tree: &mut Tree,
    source: SourceView<'_>,
    tables: &ExpansionTables,
    cfg: &TraversalConfig,
    stats: &mut InteractionStats,
) -> Result<TaskCounts, TraversalError> {
    debug_assert_eq!(stats.remote_pairs.len(), tree.bodies.len());
    debug_assert_eq!(source.ncoef, tree.coeff_count());
    if tree.cells[0].body_count == 0
        || source.cells.is_empty()
        || source.cells[0].body_count == 0
    {
        return Ok(TaskCounts::default());
    }
    let ncoef = tree.coeff_count();
    let recording = stats.recorded.is_some();
    let mut record_vec = stats.recorded.take().unwrap_or_default();
    let record =
        if recording { Some(SendPtrMut(&mut record_vec as *mut Vec<RecordedPair>)) } else { None };
    let snap = snapshot(source.bodies);
    let ctx = OneSided {
        t_cells: &tree.cells,
        s_cells: source.cells,
        s_multipoles: source.multipoles,
        s_snapshot: &snap,
        t_bodies: SendPtrMut(tree.bodies.as_mut_ptr()),
        t_locals: SendPtrMut(tree.locals.as_mut_ptr()),
        ncoef,
        tables,
        theta: cfg.theta,
        nspawn: cfg.nspawn,
        parallel: !recording,
        selfsame: false,
        pair_stats: SendPtrMut(stats.remote_pairs.as_mut_ptr()),
        cell_m2l: SendPtrMut(stats.cell_m2l.as_mut_ptr()),
        cell_p2p: SendPtrMut(stats.cell_p2p.as_mut_ptr()),
        record,
    };
    let mut scratch = tables.scratch();
    let result = one_sided(&ctx, 0, 0, &mut scratch);
    if recording {
        stats.recorded = Some(record_vec);
    }
    result
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoverageError {
    pub gaps: usize,
    pub duplicates: usize,
}

impl fmt::Display for CoverageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "influence matrix broken: {} uncovered pairs, {} double-covered pairs",
            self.gaps, self.duplicates
        )
    }
}

impl std::error::Error for CoverageError {}

/// Replay recorded pairs into an (target body × source body) tally and
/// verify each influence is covered exactly once. An M2L pair covers the
/// full body range under both cells; a P2P pair covers the leaves' bodies.
/// Only meaningful for fully-local trees whose cells all carry bodies.
pub fn coverage_check(
    target: &Tree,
    source: SourceView<'_>,
    recorded: &[RecordedPair],
    selfsame: bool,
) -> Result<(), CoverageError> {
    let nt = target.bodies.len();
    let ns = source.bodies.len();
    let mut cover = vec![0u16; nt * ns];
    if selfsame {
        for i in 0..nt {
            cover[i * ns + i] = 1;
        }
    }
    for pair in recorded {
        let tr = target.cells[pair.target as usize].body_range();
        let sr = source.cells[pair.source as usize].body_range();
        for i in tr {
            for j in sr.clone() {
                if selfsame && i == j {
                    continue;
                }
                cover[i * ns + j] += 1;
            }
        }
    }
    let gaps = cover.iter().filter(|&&c| c == 0).count();
    let duplicates = cover.iter().filter(|&&c| c > 1).count();
    if gaps == 0 && duplicates == 0 {
        Ok(())
    } else {
        Err(CoverageError { gaps, duplicates })
    }
}
