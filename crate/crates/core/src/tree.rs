//! Per-rank adaptive octrees: construction by recursive octant subdivision,
//! tight bounding boxes, and the upward / downward expansion passes.
//!
//! Cells live in a flat array in breadth-first order, so the root is index 0,
//! every parent precedes its children, and each cell's children are
//! contiguous. The body array is permuted into Morton-key order during
//! construction so every cell's bodies form one contiguous range.

use std::collections::VecDeque;
use std::fmt;
use std::ops::Range;

use crate::geometry::{local_key, Aabb, Body, GeometryError, Vec3, MAX_DEPTH};
use crate::geometry::MortonKey;
use crate::kernels::{ExpansionTables, KernelScratch};

/// Cell flag: only the multipole expansion is valid; children and bodies
/// were not shipped. Set exclusively on cells grafted from remote trees.
pub const MULTIPOLE_ONLY: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub key: MortonKey,
    pub child_index: u32,
    pub child_count: u32,
    pub body_index: u32,
    pub body_count: u32,
    /// Center of the octant-grid box this cell subdivides.
    pub geom_center: Vec3,
    /// Bounding box squeezed to the bodies actually inside.
    pub tight: Aabb,
    /// Half-diagonal of the tight box.
    pub radius: f64,
    pub flags: u8,
}

impl Cell {
    pub fn is_leaf(&self) -> bool {
        self.child_count == 0
    }

    pub fn level(&self) -> u32 {
        self.key.level
    }

    /// Expansion center: the tight box's center, which shrinks radii and
    /// interaction counts compared with the octant center.
    pub fn exp_center(&self) -> Vec3 {
        self.tight.center()
    }

    pub fn children(&self) -> Range<usize> {
        self.child_index as usize..(self.child_index + self.child_count) as usize
    }

    pub fn body_range(&self) -> Range<usize> {
        self.body_index as usize..(self.body_index + self.body_count) as usize
    }

    pub fn is_multipole_only(&self) -> bool {
        self.flags & MULTIPOLE_ONLY != 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TreeError {
    InvalidNcrit,
    OutsideBounds { pos: Vec3 },
}

impl fmt::Display for TreeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TreeError::InvalidNcrit => write!(f, "ncrit must be at least 1"),
            TreeError::OutsideBounds { pos } => {
                write!(f, "body at ({}, {}, {}) outside tree bounds", pos.x, pos.y, pos.z)
            }
        }
    }
}

impl std::error::Error for TreeError {}

/// A fully local octree plus its expansion storage. Coefficients are kept in
/// flat arrays with one `coeff_count` stride per cell.
#[derive(Clone, Debug)]
pub struct Tree {
    pub cells: Vec<Cell>,
    pub bodies: Vec<Body>,
    pub multipoles: Vec<f64>,
    pub locals: Vec<f64>,
    pub bounds: Aabb,
    ncoef: usize,
}

/// Read-only source-side view shared by local trees and grafted remote
/// trees, so the traversal does not care where cells came from.
#[derive(Clone, Copy)]
pub struct SourceView<'a> {
    pub cells: &'a [Cell],
    pub bodies: &'a [Body],
    pub multipoles: &'a [f64],
    pub ncoef: usize,
}

impl<'a> SourceView<'a> {
    pub fn multipole(&self, cell: usize) -> &'a [f64] {
        &self.multipoles[cell * self.ncoef..(cell + 1) * self.ncoef]
    }
}

/// Multipole-bearing tree grafted from one remote rank's exported fragment.
#[derive(Clone, Debug)]
pub struct SourceTree {
    pub cells: Vec<Cell>,
    pub bodies: Vec<Body>,
    pub multipoles: Vec<f64>,
    pub ncoef: usize,
}

impl SourceTree {
    pub fn view(&self) -> SourceView<'_> {
        SourceView {
            cells: &self.cells,
            bodies: &self.bodies,
            multipoles: &self.multipoles,
            ncoef: self.ncoef,
        }
    }
}

fn octant_box(parent: &Aabb, octant: u8) -> Aabb {
    let mid = parent.center();
    let pick = |bit: bool, lo: f64, mi: f64, hi: f64| if bit { (mi, hi) } else { (lo, mi) };
    let (x0, x1) = pick(octant & 1 != 0, parent.min.x, mid.x, parent.max.x);
    let (y0, y1) = pick(octant & 2 != 0, parent.min.y, mid.y, parent.max.y);
    let (z0, z1) = pick(octant & 4 != 0, parent.min.z, mid.z, parent.max.z);
    Aabb::new(Vec3::new(x0, y0, z0), Vec3::new(x1, y1, z1))
}

impl Tree {
    /// Build the octree over `bodies`, which must lie inside the
    /// (epsilon-expanded) `bounds`. Subdivision stops at `ncrit` bodies or
    /// depth 21; clusters that cannot be separated at depth 21 stay as
    /// oversized leaves.
    pub fn build(
        bodies: Vec<Body>,
        bounds: Aabb,
        ncrit: usize,
        ncoef: usize,
    ) -> Result<Tree, TreeError> {
        if ncrit == 0 {
            return Err(TreeError::InvalidNcrit);
        }

        let mut keyed: Vec<(u64, Body)> = Vec::with_capacity(bodies.len());
        for body in bodies {
            let key = local_key(body.pos, &bounds, MAX_DEPTH).map_err(|e| match e {
                GeometryError::OutOfBounds { pos } => TreeError::OutsideBounds { pos },
                _ => unreachable!("local_key only fails on out-of-bounds positions"),
            })?;
            keyed.push((key.bits, body));
        }
        keyed.sort_unstable_by(|a, b| (a.0, a.1.id).cmp(&(b.0, b.1.id)));
        let keys: Vec<u64> = keyed.iter().map(|k| k.0).collect();
        let bodies: Vec<Body> = keyed.into_iter().map(|k| k.1).collect();

        let mut cells: Vec<Cell> = Vec::new();
        let mut queue: VecDeque<(usize, Aabb, Range<usize>)> = VecDeque::new();
        cells.push(Cell {
            key: MortonKey::root(),
            child_index: 0,
            child_count: 0,
            body_index: 0,
            body_count: bodies.len() as u32,
            geom_center: bounds.center(),
            tight: Aabb::point(bounds.center()),
            radius: 0.0,
            flags: 0,
        });
        queue.push_back((0, bounds, 0..bodies.len()));

        while let Some((slot, cell_box, range)) = queue.pop_front() {
            let level = cells[slot].key.level;
            if range.len() <= ncrit || level == MAX_DEPTH {
                continue;
            }
            let digit_of =
                |i: usize| ((keys[i] >> (3 * (MAX_DEPTH - level - 1))) & 0b111) as u8;
            let first_child = cells.len();
            let mut start = range.start;
            while start < range.end {
                let digit = digit_of(start);
                let mut end = start + 1;
                while end < range.end && digit_of(end) == digit {
                    end += 1;
                }
                let child_box = octant_box(&cell_box, digit);
                let child_slot = cells.len();
                cells.push(Cell {
                    key: cells[slot].key.child(digit),
                    child_index: 0,
                    child_count: 0,
                    body_index: start as u32,
                    body_count: (end - start) as u32,
                    geom_center: child_box.center(),
                    tight: Aabb::point(child_box.center()),
                    radius: 0.0,
                    flags: 0,
                });
                queue.push_back((child_slot, child_box, start..end));
                start = end;
            }
            cells[slot].child_index = first_child as u32;
            cells[slot].child_count = (cells.len() - first_child) as u32;
        }

        for i in (0..cells.len()).rev() {
            let cell = cells[i];
            let tight = if cell.is_leaf() {
                let range = cell.body_range();
                if range.is_empty() {
                    Aabb::point(cell.geom_center)
                } else {
                    let mut b = Aabb::point(bodies[range.start].pos);
                    for body in &bodies[range.start + 1..range.end] {
                        b = b.union_point(body.pos);
                    }
                    b
                }
            } else {
                let mut b = cells[cell.child_index as usize].tight;
                for c in cell.children().skip(1) {
                    b = b.union(&cells[c].tight);
                }
                b
            };
            cells[i].tight = tight;
            cells[i].radius = tight.half_diagonal();
        }

        let ncells = cells.len();
        Ok(Tree {
            cells,
            bodies,
            multipoles: vec![0.0; ncells * ncoef],
            locals: vec![0.0; ncells * ncoef],
            bounds,
            ncoef,
        })
    }

    pub fn coeff_count(&self) -> usize {
        self.ncoef
    }

    pub fn multipole(&self, cell: usize) -> &[f64] {
        &self.multipoles[cell * self.ncoef..(cell + 1) * self.ncoef]
    }

    pub fn local(&self, cell: usize) -> &[f64] {
        &self.locals[cell * self.ncoef..(cell + 1) * self.ncoef]
    }

    pub fn local_mut(&mut self, cell: usize) -> &mut [f64] {
        &mut self.locals[cell * self.ncoef..(cell + 1) * self.ncoef]
    }

    pub fn as_source_view(&self) -> SourceView<'_> {
        SourceView {
            cells: &self.cells,
            bodies: &self.bodies,
            multipoles: &self.multipoles,
            ncoef: self.ncoef,
        }
    }

    /// Fill every cell's multipole expansion bottom-up: P2M at leaves, M2M
    /// from children to parents. Children finish before their parent because
    /// child indices always exceed the parent's.
    pub fn upward(&mut self, tables: &ExpansionTables, scratch: &mut KernelScratch) {
        debug_assert_eq!(tables.coeff_count(), self.ncoef);
        let ncoef = self.ncoef;
        for i in (0..self.cells.len()).rev() {
            let cell = self.cells[i];
            if cell.is_leaf() {
                let center = cell.exp_center();
                let range = cell.body_range();
                let m = &mut self.multipoles[i * ncoef..(i + 1) * ncoef];
                tables.p2m(&self.bodies[range], center, m, scratch);
            } else {
                let (head, tail) = self.multipoles.split_at_mut((i + 1) * ncoef);
                let parent = &mut head[i * ncoef..];
                let parent_center = cell.exp_center();
                for c in cell.children() {
                    let child = &tail[(c - i - 1) * ncoef..][..ncoef];
                    let shift = self.cells[c].exp_center() - parent_center;
                    tables.m2m(child, shift, parent, scratch);
                }
            }
        }
    }

    /// Cascade local expansions top-down (L2L) and evaluate them at leaf
    /// bodies (L2P). Traversal must already have accumulated into `locals`.
    pub fn downward(&mut self, tables: &ExpansionTables, scratch: &mut KernelScratch) {
        debug_assert_eq!(tables.coeff_count(), self.ncoef);
        let ncoef = self.ncoef;
        for i in 0..self.cells.len() {
            let cell = self.cells[i];
            if cell.is_leaf() {
                let center = cell.exp_center();
                let range = cell.body_range();
                let l = &self.locals[i * ncoef..(i + 1) * ncoef];
                tables.l2p(l, center, &mut self.bodies[range], scratch);
            } else {
                let (head, tail) = self.locals.split_at_mut((i + 1) * ncoef);
                let parent: &[f64] = &head[i * ncoef..];
                let parent_center = cell.exp_center();
                for c in cell.children() {
                    let child = &mut tail[(c - i - 1) * ncoef..][..ncoef];
                    let shift = self.cells[c].exp_center() - parent_center;
                    tables.l2l(parent, shift, child, scratch);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate, global_bounds, Distribution};
    use crate::kernels::ExpansionOrder;

    fn unit_bounds() -> Aabb {
        Aabb::new(Vec3::ZERO, Vec3::splat(1.0))
    }

    fn tables(p: usize) -> ExpansionTables {
        ExpansionTables::new(ExpansionOrder::new(p).unwrap())
    }

    #[test]
    fn single_body_tree_is_one_leaf() {
        let bodies = vec![Body::at(Vec3::splat(0.3), 1.0, 0)];
        let tree = Tree::build(bodies, unit_bounds(), 16, 4).unwrap();
        assert_eq!(tree.cells.len(), 1);
        assert!(tree.cells[0].is_leaf());
        assert_eq!(tree.cells[0].body_count, 1);
        assert_eq!(tree.cells[0].radius, 0.0);
        assert_eq!(tree.cells[0].exp_center(), Vec3::splat(0.3));
    }

    #[test]
    fn octant_centers_make_root_plus_eight_leaves() {
        let mut bodies = Vec::new();
        for oct in 0..8u8 {
            let p = Vec3::new(
                if oct & 1 != 0 { 0.75 } else { 0.25 },
                if oct & 2 != 0 { 0.75 } else { 0.25 },
                if oct & 4 != 0 { 0.75 } else { 0.25 },
            );
            bodies.push(Body::at(p, 1.0, oct as u32));
        }
        let tree = Tree::build(bodies, unit_bounds(), 1, 4).unwrap();
        assert_eq!(tree.cells.len(), 9);
        assert_eq!(tree.cells[0].child_count, 8);
        for (i, cell) in tree.cells[1..].iter().enumerate() {
            assert!(cell.is_leaf());
            assert_eq!(cell.body_count, 1);
            assert_eq!(cell.key.bits, i as u64);
            assert_eq!(cell.key.level, 1);
        }
    }

    #[test]
    fn leaf_and_internal_counts_respect_ncrit() {
        let bodies = generate(Distribution::Cube, 10_000, 41);
        let tree = Tree::build(bodies, unit_bounds(), 64, 4).unwrap();
        for cell in &tree.cells {
            if cell.is_leaf() {
                assert!(cell.body_count <= 64, "leaf with {} bodies", cell.body_count);
            } else {
                assert!(cell.body_count > 64, "split cell with {} bodies", cell.body_count);
            }
        }
    }

    #[test]
    fn build_permutes_bodies_bijectively() {
        let bodies = generate(Distribution::Plummer, 2000, 42);
        let bounds = global_bounds(&bodies).unwrap();
        let tree = Tree::build(bodies, bounds, 32, 4).unwrap();
        let mut ids: Vec<u32> = tree.bodies.iter().map(|b| b.id).collect();
        ids.sort_unstable();
        assert!(ids.iter().enumerate().all(|(i, &id)| id == i as u32));
    }

    #[test]
    fn child_ranges_partition_parents_and_structure_is_reachable() {
        let bodies = generate(Distribution::Sphere, 3000, 43);
        let bounds = global_bounds(&bodies).unwrap();
        let tree = Tree::build(bodies, bounds, 24, 4).unwrap();
        let mut seen = vec![false; tree.cells.len()];
        seen[0] = true;
        for (i, cell) in tree.cells.iter().enumerate() {
            if cell.is_leaf() {
                continue;
            }
            let mut cursor = cell.body_index;
            for c in cell.children() {
                assert!(c > i, "child index precedes parent");
                assert!(!seen[c], "cell reached twice");
                seen[c] = true;
                assert_eq!(tree.cells[c].body_index, cursor);
                cursor += tree.cells[c].body_count;
            }
            assert_eq!(cursor, cell.body_index + cell.body_count);
        }
        assert!(seen.iter().all(|&s| s), "unreachable cell");
    }

    #[test]
    fn tight_boxes_nest_and_contain_bodies() {
        let bodies = generate(Distribution::Plummer, 4000, 44);
        let bounds = global_bounds(&bodies).unwrap();
        let tree = Tree::build(bodies, bounds, 48, 4).unwrap();
        for (i, cell) in tree.cells.iter().enumerate() {
            for body in &tree.bodies[cell.body_range()] {
                assert!(cell.tight.contains(body.pos), "cell {i} misses body");
            }
            // Tight box stays inside the octant box this cell subdivides.
            let mut octant = bounds;
            for lvl in 1..=cell.key.level {
                octant = octant_box(&octant, cell.key.digit_at(lvl));
            }
            let slack = octant.expanded(1e-12);
            assert!(slack.contains(cell.tight.min) && slack.contains(cell.tight.max));
            for c in cell.children() {
                assert!(
                    cell.tight.contains(tree.cells[c].tight.min)
                        && cell.tight.contains(tree.cells[c].tight.max)
                );
            }
        }
    }

    #[test]
    fn build_is_deterministic() {
        let bodies = generate(Distribution::Cube, 5000, 45);
        let a = Tree::build(bodies.clone(), unit_bounds(), 32, 4).unwrap();
        let b = Tree::build(bodies, unit_bounds(), 32, 4).unwrap();
        assert_eq!(a.cells, b.cells);
        assert_eq!(a.bodies, b.bodies);
    }

    #[test]
    fn empty_body_list_yields_single_empty_root() {
        let tree = Tree::build(Vec::new(), unit_bounds(), 8, 10).unwrap();
        assert_eq!(tree.cells.len(), 1);
        assert_eq!(tree.cells[0].body_count, 0);
        assert!(tree.cells[0].is_leaf());
        assert!(tree.multipoles.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn coincident_bodies_fall_back_to_deep_oversized_leaf() {
        let bodies: Vec<Body> =
            (0..100).map(|i| Body::at(Vec3::splat(0.4), 1.0, i)).collect();
        let tree = Tree::build(bodies, unit_bounds(), 8, 4).unwrap();
        // One single-child chain from the root to a depth-21 leaf.
        assert_eq!(tree.cells.len(), 1 + MAX_DEPTH as usize);
        let last = tree.cells.last().unwrap();
        assert!(last.is_leaf());
        assert_eq!(last.body_count, 100);
        assert_eq!(last.level(), MAX_DEPTH);
        assert_eq!(last.radius, 0.0);
    }

    #[test]
    fn ncrit_zero_is_rejected() {
        let err = Tree::build(Vec::new(), unit_bounds(), 0, 4).unwrap_err();
        assert_eq!(err, TreeError::InvalidNcrit);
    }

    #[test]
    fn body_outside_bounds_is_rejected() {
        let bodies = vec![Body::at(Vec3::splat(2.0), 1.0, 0)];
        let err = Tree::build(bodies, unit_bounds(), 8, 4).unwrap_err();
        assert!(matches!(err, TreeError::OutsideBounds { .. }));
    }

    #[test]
    fn upward_single_body_is_pure_monopole() {
        let t = tables(6);
        let mut s = t.scratch();
        let bodies = vec![Body::at(Vec3::splat(0.3), 1.0, 0)];
        let mut tree = Tree::build(bodies, unit_bounds(), 16, t.coeff_count()).unwrap();
        tree.upward(&t, &mut s);
        assert_eq!(tree.multipole(0)[0], 1.0);
        assert!(tree.multipole(0)[1..].iter().all(|&m| m == 0.0));
    }

    #[test]
    fn upward_root_matches_direct_moments() {
        let t = tables(8);
        let mut s = t.scratch();
        let bodies = generate(Distribution::Cube, 600, 46);
        let mut tree =
            Tree::build(bodies.clone(), unit_bounds(), 16, t.coeff_count()).unwrap();
        tree.upward(&t, &mut s);
        let mut direct = vec![0.0; t.coeff_count()];
        t.p2m(&bodies, tree.cells[0].exp_center(), &mut direct, &mut s);
        for i in 0..direct.len() {
            let scale = 1.0f64.max(direct[i].abs());
            assert!(
                (tree.multipole(0)[i] - direct[i]).abs() <= 1e-13 * scale,
                "root moment {i}: {} vs {}",
                tree.multipole(0)[i],
                direct[i]
            );
        }
    }

    #[test]
    fn downward_zero_locals_is_noop() {
        let t = tables(5);
        let mut s = t.scratch();
        let bodies = generate(Distribution::Cube, 300, 47);
        let mut tree = Tree::build(bodies, unit_bounds(), 16, t.coeff_count()).unwrap();
        let before = tree.bodies.clone();
        tree.downward(&t, &mut s);
        assert_eq!(tree.bodies, before);
    }

    #[test]
    fn downward_from_root_matches_direct_l2p() {
        let t = tables(7);
        let mut s = t.scratch();
        let bodies = generate(Distribution::Cube, 200, 48);
        let mut tree = Tree::build(bodies, unit_bounds(), 64, t.coeff_count()).unwrap();
        assert!(tree.cells.len() > 1, "want a multi-level tree");
        for (i, v) in tree.local_mut(0).iter_mut().enumerate() {
            *v = 0.1 / (i + 1) as f64;
        }
        let root_l = tree.local(0).to_vec();
        let root_center = tree.cells[0].exp_center();
        let mut direct = tree.bodies.clone();
        tree.downward(&t, &mut s);
        t.l2p(&root_l, root_center, &mut direct, &mut s);
        for (a, b) in tree.bodies.iter().zip(&direct) {
            let scale = 1.0f64.max(b.potential.abs());
            assert!((a.potential - b.potential).abs() <= 1e-12 * scale);
            assert!((a.force - b.force).norm() <= 1e-12 * (1.0 + b.force.norm()));
        }
    }

    #[test]
    fn downward_single_cell_is_plain_l2p() {
        let t = tables(5);
        let mut s = t.scratch();
        let bodies = generate(Distribution::Cube, 10, 49);
        let mut tree = Tree::build(bodies, unit_bounds(), 16, t.coeff_count()).unwrap();
        assert_eq!(tree.cells.len(), 1);
        for (i, v) in tree.local_mut(0).iter_mut().enumerate() {
            *v = (i as f64).sin();
        }
        let l = tree.local(0).to_vec();
        let center = tree.cells[0].exp_center();
        let mut expect = tree.bodies.clone();
        t.l2p(&l, center, &mut expect, &mut s);
        tree.downward(&t, &mut s);
        assert_eq!(tree.bodies, expect);
    }
}
