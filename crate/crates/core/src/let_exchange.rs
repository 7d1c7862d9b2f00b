//! Sender-initiated exchange of essential tree data between ranks.
//!
//! Each rank walks its own tree once per receiver and keeps only what that
//! receiver could ever touch: cells that provably satisfy the acceptance
//! criterion against every point of the receiver's domain stop the walk and
//! travel as multipole-only records, while boundary leaves ship their bodies
//! for direct evaluation. The receiver grafts each fragment beside its local
//! tree as an extra source root, so one traversal over the grafted set makes
//! exactly the accept/split decisions it would have made against the full
//! remote tree.
//!
//! Fragments cross the simulated wire as two little-endian messages per
//! (sender, receiver) pair, one for cells and one for bodies:
//!
//! ```text
//! header (32 bytes, both phases)
//!   0  magic  b"FLET"          4  version u16 = 1     6  phase u8 (0 cells, 1 bodies)
//!   7  pad u8                  8  sender u32         12  receiver u32
//!   16 expansion order u32    20  cell count u32     24  body count u32
//!   28 reserved u32
//! cell record (88 bytes each, phase 0, followed by cellCount * coeffCount f64)
//!   0  key bits u64            8  key level u32      12  flags u32
//!   16 child index u32        20  child count u32    24  body index u32
//!   28 body count u32         32  tight min 3xf64    56  tight max 3xf64
//!   80 radius f64
//! body record (40 bytes each, phase 1)
//!   0  position 3xf64         24  charge f64         32  id u32    36 pad u32
//! ```
//!
//! The octant-grid center of a cell is not shipped; receivers only consult
//! expansion geometry, which derives from the tight box. Body ranges on
//! multipole-only cells keep their population count for bookkeeping, but ship
//! no bodies and reset their offset to zero.

use std::collections::VecDeque;
use std::error::Error;
use std::fmt;

use crate::geometry::{Aabb, Body, MortonKey, Vec3};
use crate::kernels::ExpansionOrder;
use crate::tree::{Cell, SourceTree, Tree, MULTIPOLE_ONLY};

pub const WIRE_MAGIC: [u8; 4] = *b"FLET";
pub const WIRE_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 32;
pub const CELL_RECORD_LEN: usize = 88;
pub const BODY_RECORD_LEN: usize = 40;

/// Which half of a fragment a wire message carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Cells,
    Bodies,
}

/// Exchange failures: malformed wire payloads or protocol violations.
#[derive(Clone, Debug, PartialEq)]
pub enum LetError {
    /// Payload ended before a fixed-size field.
    Truncated { needed: usize, got: usize },
    /// Leading magic bytes were wrong.
    BadMagic { got: [u8; 4] },
    /// Unsupported layout version.
    BadVersion { got: u16 },
    /// Phase tag was neither cells nor bodies.
    BadPhase { got: u8 },
    /// Expansion order outside the supported range.
    BadOrder { got: u32 },
    /// Cell graph or body ranges are inconsistent.
    BadStructure { reason: &'static str },
    /// Cells and bodies halves disagree about their pairing.
    PairMismatch { field: &'static str, cells: u32, bodies: u32 },
    /// A second fragment arrived from a sender that was already grafted.
    DuplicateSender { sender: u32 },
}

impl fmt::Display for LetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LetError::Truncated { needed, got } => {
                write!(f, "payload needs {needed} bytes but only {got} arrived")
            }
            LetError::BadMagic { got } => write!(f, "bad magic bytes {got:?}"),
            LetError::BadVersion { got } => write!(f, "unsupported wire version {got}"),
            LetError::BadPhase { got } => write!(f, "unknown phase tag {got}"),
            LetError::BadOrder { got } => write!(f, "unsupported expansion order {got}"),
            LetError::BadStructure { reason } => write!(f, "malformed fragment: {reason}"),
            LetError::PairMismatch { field, cells, bodies } => {
                write!(f, "fragment halves disagree on {field}: cells say {cells}, bodies say {bodies}")
            }
            LetError::DuplicateSender { sender } => {
                write!(f, "sender {sender} delivered a second fragment")
            }
        }
    }
}

impl Error for LetError {}

/// One sender's exportable slice of its tree, bound for one receiver. Cells
/// are re-indexed fragment-locally in breadth-first order with the root at
/// index 0; multipoles are stored with one `coeff_count` stride per cell in
/// the same order.
#[derive(Clone, Debug, PartialEq)]
pub struct LetFragment {
    pub sender: u32,
    pub receiver: u32,
    pub order: ExpansionOrder,
    pub cells: Vec<Cell>,
    pub multipoles: Vec<f64>,
    pub bodies: Vec<Body>,
}

/// Walk the local tree and keep what `receiver`'s traversal could touch.
/// A cell whose radius plus the remote domain's half-diagonal stays under
/// `theta` times its distance to the domain is accepted from everywhere in
/// that domain, so it exports as a multipole-only stub and the walk stops.
/// Leaves reached without that guarantee ship their bodies. The result is a
/// pure function of the tree, the domain box, and `theta`.
pub fn select_export(
    tree: &Tree,
    order: ExpansionOrder,
    remote_domain: Aabb,
    theta: f64,
    sender: u32,
    receiver: u32,
) -> LetFragment {
    debug_assert_eq!(order.coeff_count(), tree.coeff_count());
    let mut fragment = LetFragment {
        sender,
        receiver,
        order,
        cells: Vec::new(),
        multipoles: Vec::new(),
        bodies: Vec::new(),
    };
    if tree.cells.is_empty() || tree.cells[0].body_count == 0 {
        return fragment;
    }
    let remote_reach = remote_domain.half_diagonal();

    fragment.cells.push(tree.cells[0]);
    fragment.multipoles.extend_from_slice(tree.multipole(0));
    let mut queue = VecDeque::from([(0usize, 0usize)]);
    while let Some((slot, local)) = queue.pop_front() {
        let cell = tree.cells[local];
        let closest = remote_domain.distance_to_point(cell.exp_center());
        if (remote_reach + cell.radius) < theta * closest {
            // Guaranteed acceptance from anywhere in the remote domain: the
            // receiver never needs this cell's children or bodies.
            let stub = &mut fragment.cells[slot];
            stub.flags |= MULTIPOLE_ONLY;
            stub.child_index = 0;
            stub.child_count = 0;
            stub.body_index = 0;
            continue;
        }
        if cell.is_leaf() {
            fragment.cells[slot].body_index = fragment.bodies.len() as u32;
            fragment.bodies.extend_from_slice(&tree.bodies[cell.body_range()]);
            continue;
        }
        let first = fragment.cells.len();
        fragment.cells[slot].child_index = first as u32;
        for (offset, child) in cell.children().enumerate() {
            fragment.cells.push(tree.cells[child]);
            fragment.multipoles.extend_from_slice(tree.multipole(child));
            queue.push_back((first + offset, child));
        }
    }
    fragment
}

impl LetFragment {
    /// Wire size in bytes of the cells message, without encoding it.
    pub fn cells_wire_len(&self) -> usize {
        HEADER_LEN + self.cells.len() * (CELL_RECORD_LEN + self.order.coeff_count() * 8)
    }

    /// Wire size in bytes of the bodies message, without encoding it.
    pub fn bodies_wire_len(&self) -> usize {
        HEADER_LEN + self.bodies.len() * BODY_RECORD_LEN
    }

    /// Serialize the cell skeleton and multipoles (phase 0).
    pub fn encode_cells(&self) -> Vec<u8> {
        let ncoef = self.order.coeff_count();
        let mut out =
            Vec::with_capacity(HEADER_LEN + self.cells.len() * (CELL_RECORD_LEN + ncoef * 8));
        self.write_header(&mut out, Phase::Cells);
        for cell in &self.cells {
            push_u64(&mut out, cell.key.bits);
            push_u32(&mut out, cell.key.level);
            push_u32(&mut out, cell.flags as u32);
            push_u32(&mut out, cell.child_index);
            push_u32(&mut out, cell.child_count);
            push_u32(&mut out, cell.body_index);
            push_u32(&mut out, cell.body_count);
            push_vec3(&mut out, cell.tight.min);
            push_vec3(&mut out, cell.tight.max);
            push_f64(&mut out, cell.radius);
        }
        for &m in &self.multipoles {
            push_f64(&mut out, m);
        }
        out
    }

    /// Serialize the boundary bodies (phase 1).
    pub fn encode_bodies(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.bodies.len() * BODY_RECORD_LEN);
        self.write_header(&mut out, Phase::Bodies);
        for body in &self.bodies {
            push_vec3(&mut out, body.pos);
            push_f64(&mut out, body.charge);
            push_u32(&mut out, body.id);
            push_u32(&mut out, 0);
        }
        out
    }

    fn write_header(&self, out: &mut Vec<u8>, phase: Phase) {
        out.extend_from_slice(&WIRE_MAGIC);
        push_u16(out, WIRE_VERSION);
        out.push(match phase {
            Phase::Cells => 0,
            Phase::Bodies => 1,
        });
        out.push(0);
        push_u32(out, self.sender);
        push_u32(out, self.receiver);
        push_u32(out, self.order.get() as u32);
        push_u32(out, self.cells.len() as u32);
        push_u32(out, self.bodies.len() as u32);
        push_u32(out, 0);
    }
}

/// The cells half of a fragment, as decoded from the wire.
#[derive(Clone, Debug, PartialEq)]
pub struct CellsPart {
    pub sender: u32,
    pub receiver: u32,
    pub order: ExpansionOrder,
    pub expected_bodies: u32,
    pub cells: Vec<Cell>,
    pub multipoles: Vec<f64>,
}

/// The bodies half of a fragment, as decoded from the wire.
#[derive(Clone, Debug, PartialEq)]
pub struct BodiesPart {
    pub sender: u32,
    pub receiver: u32,
    pub expected_cells: u32,
    pub bodies: Vec<Body>,
}

/// A decoded wire message: one half of one fragment.
#[derive(Clone, Debug, PartialEq)]
pub enum LetPayload {
    Cells(CellsPart),
    Bodies(BodiesPart),
}

/// Decode one wire message. Structural validation happens here, so a payload
/// that decodes cleanly can be grafted and traversed without bounds checks
/// failing later.
pub fn decode(bytes: &[u8]) -> Result<LetPayload, LetError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != WIRE_MAGIC {
        return Err(LetError::BadMagic { got: [magic[0], magic[1], magic[2], magic[3]] });
    }
    let version = r.u16()?;
    if version != WIRE_VERSION {
        return Err(LetError::BadVersion { got: version });
    }
    let phase = r.u8()?;
    let _pad = r.u8()?;
    let sender = r.u32()?;
    let receiver = r.u32()?;
    let order_raw = r.u32()?;
    let cell_count = r.u32()?;
    let body_count = r.u32()?;
    let _reserved = r.u32()?;
    let order = ExpansionOrder::new(order_raw as usize)
        .map_err(|_| LetError::BadOrder { got: order_raw })?;

    match phase {
        0 => {
            let mut cells = Vec::new();
            for _ in 0..cell_count {
                let bits = r.u64()?;
                let level = r.u32()?;
                let flags = r.u32()?;
                if flags & !(MULTIPOLE_ONLY as u32) != 0 {
                    return Err(LetError::BadStructure { reason: "unknown cell flags" });
                }
                let child_index = r.u32()?;
                let child_count = r.u32()?;
                let body_index = r.u32()?;
                let body_count = r.u32()?;
                let tight = Aabb::new(r.vec3()?, r.vec3()?);
                let radius = r.f64()?;
                cells.push(Cell {
                    key: MortonKey { bits, level },
                    child_index,
                    child_count,
                    body_index,
                    body_count,
                    geom_center: tight.center(),
                    tight,
                    radius,
                    flags: flags as u8,
                });
            }
            let ncoef = order.coeff_count();
            let mut multipoles = Vec::new();
            for _ in 0..cell_count {
                for _ in 0..ncoef {
                    multipoles.push(r.f64()?);
                }
            }
            r.finish()?;
            validate_cells(&cells, body_count)?;
            Ok(LetPayload::Cells(CellsPart {
                sender,
                receiver,
                order,
                expected_bodies: body_count,
                cells,
                multipoles,
            }))
        }
        1 => {
            let mut bodies = Vec::with_capacity(body_count.min(u16::MAX as u32) as usize);
            for _ in 0..body_count {
                let pos = r.vec3()?;
                let charge = r.f64()?;
                let id = r.u32()?;
                let _pad = r.u32()?;
                bodies.push(Body::at(pos, charge, id));
            }
            r.finish()?;
            Ok(LetPayload::Bodies(BodiesPart { sender, receiver, expected_cells: cell_count, bodies }))
        }
        got => Err(LetError::BadPhase { got }),
    }
}

/// Check that the decoded cells form one breadth-first tree whose leaves
/// either carry bodies or are multipole-only stubs.
fn validate_cells(cells: &[Cell], total_bodies: u32) -> Result<(), LetError> {
    if cells.is_empty() {
        return Ok(());
    }
    let n = cells.len();
    let mut referenced = vec![0u8; n];
    for (i, cell) in cells.iter().enumerate() {
        if cell.is_multipole_only() && cell.child_count != 0 {
            return Err(LetError::BadStructure { reason: "multipole-only cell keeps children" });
        }
        let first = cell.child_index as usize;
        let count = cell.child_count as usize;
        if count > 0 {
            if first <= i || first + count > n {
                return Err(LetError::BadStructure { reason: "child range escapes the fragment" });
            }
            for child in &mut referenced[first..first + count] {
                *child += 1;
            }
        } else if !cell.is_multipole_only() {
            if cell.body_count == 0 {
                return Err(LetError::BadStructure {
                    reason: "leaf ships neither bodies nor a multipole-only mark",
                });
            }
            let end = cell.body_index as u64 + cell.body_count as u64;
            if end > total_bodies as u64 {
                return Err(LetError::BadStructure { reason: "body range escapes the fragment" });
            }
        }
    }
    if referenced[0] != 0 {
        return Err(LetError::BadStructure { reason: "root is referenced as a child" });
    }
    if referenced[1..].iter().any(|&r| r != 1) {
        return Err(LetError::BadStructure { reason: "cells do not form one tree" });
    }
    Ok(())
}

/// Join the two decoded halves of one fragment back together.
pub fn assemble(cells: CellsPart, bodies: BodiesPart) -> Result<LetFragment, LetError> {
    if cells.sender != bodies.sender {
        return Err(LetError::PairMismatch {
            field: "sender",
            cells: cells.sender,
            bodies: bodies.sender,
        });
    }
    if cells.receiver != bodies.receiver {
        return Err(LetError::PairMismatch {
            field: "receiver",
            cells: cells.receiver,
            bodies: bodies.receiver,
        });
    }
    if cells.expected_bodies as usize != bodies.bodies.len() {
        return Err(LetError::PairMismatch {
            field: "body count",
            cells: cells.expected_bodies,
            bodies: bodies.bodies.len() as u32,
        });
    }
    if bodies.expected_cells as usize != cells.cells.len() {
        return Err(LetError::PairMismatch {
            field: "cell count",
            cells: cells.cells.len() as u32,
            bodies: bodies.expected_cells,
        });
    }
    Ok(LetFragment {
        sender: cells.sender,
        receiver: cells.receiver,
        order: cells.order,
        cells: cells.cells,
        multipoles: cells.multipoles,
        bodies: bodies.bodies,
    })
}

/// A rank's essential source set: its own tree plus one grafted source tree
/// per sender, in arrival order. Partially grafted sets are fully usable;
/// each grafted source is meant to be traversed exactly once.
#[derive(Clone, Debug)]
pub struct LocalEssentialTree {
    pub local: Tree,
    grafted: Vec<(u32, SourceTree)>,
}

impl LocalEssentialTree {
    pub fn new(local: Tree) -> Self {
        LocalEssentialTree { local, grafted: Vec::new() }
    }

    /// Attach one sender's fragment as an additional source root. A second
    /// fragment from the same sender is a protocol violation.
    pub fn graft(&mut self, fragment: LetFragment) -> Result<(), LetError> {
        if self.grafted.iter().any(|(sender, _)| *sender == fragment.sender) {
            return Err(LetError::DuplicateSender { sender: fragment.sender });
        }
        let ncoef = fragment.order.coeff_count();
        self.grafted.push((
            fragment.sender,
            SourceTree {
                cells: fragment.cells,
                bodies: fragment.bodies,
                multipoles: fragment.multipoles,
                ncoef,
            },
        ));
        Ok(())
    }

    /// Top-level source roots: the local root plus one per grafted sender.
    pub fn root_count(&self) -> usize {
        1 + self.grafted.len()
    }

    pub fn source_count(&self) -> usize {
        self.grafted.len()
    }

    pub fn sources(&self) -> impl Iterator<Item = (u32, &SourceTree)> {
        self.grafted.iter().map(|(sender, tree)| (*sender, tree))
    }

    /// Split borrow: the mutable local tree alongside the grafted sources,
    /// so remote traversals can accumulate into local expansions.
    pub fn parts_mut(&mut self) -> (&mut Tree, &[(u32, SourceTree)]) {
        (&mut self.local, &self.grafted)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], LetError> {
        let end = self
            .pos
            .checked_add(n)
            .ok_or(LetError::Truncated { needed: usize::MAX, got: self.buf.len() })?;
        if end > self.buf.len() {
            return Err(LetError::Truncated { needed: end, got: self.buf.len() });
        }
        let slice = &self.buf[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, LetError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, LetError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, LetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, LetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, LetError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn vec3(&mut self) -> Result<Vec3, LetError> {
        Ok(Vec3::new(self.f64()?, self.f64()?, self.f64()?))
    }

    fn finish(&self) -> Result<(), LetError> {
        if self.pos != self.buf.len() {
            return Err(LetError::BadStructure { reason: "trailing bytes" });
        }
        Ok(())
    }
}

fn push_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_vec3(out: &mut Vec<u8>, v: Vec3) {
    push_f64(out, v.x);
    push_f64(out, v.y);
    push_f64(out, v.z);
}
