//! Points, bounding boxes, particle generation and local Morton keys.
//!
//! Keys are *local*: they are computed against the bounds of whatever
//! partition owns the bodies, not against a global box, so every rank keeps
//! full 64-bit key resolution inside its own domain.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Plummer scale radius `a`; positions are drawn in model units.
pub const PLUMMER_SCALE: f64 = 0.1;
/// Plummer samples beyond this radius are rejected and redrawn.
pub const PLUMMER_CUTOFF: f64 = 10.0 * PLUMMER_SCALE;
/// Relative slack applied to partition bounds before key computation, so
/// bodies sitting exactly on a domain face stay inside.
pub const BOUNDS_EPS_REL: f64 = 1e-6;
/// 3 bits per level in a 64-bit key.
pub const MAX_DEPTH: u32 = 21;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn splat(v: f64) -> Self {
        Vec3 { x: v, y: v, z: v }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn min(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    pub fn max(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    pub fn axis(self, dim: usize) -> f64 {
        match dim {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }
}

impl std::ops::Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl std::ops::Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl std::ops::Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl std::ops::AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        self.x += o.x;
        self.y += o.y;
        self.z += o.z;
    }
}

impl std::ops::SubAssign for Vec3 {
    fn sub_assign(&mut self, o: Vec3) {
        self.x -= o.x;
        self.y -= o.y;
        self.z -= o.z;
    }
}

/// Axis-aligned box. `min == max` along an axis is a legal degenerate case
/// (single body, or an empty cell collapsed to a point).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Aabb { min, max }
    }

    pub fn point(p: Vec3) -> Self {
        Aabb { min: p, max: p }
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    /// Half the diagonal; the cell radius used by the acceptance criterion.
    pub fn half_diagonal(&self) -> f64 {
        self.extent().norm() * 0.5
    }

    pub fn longest_axis(&self) -> usize {
        let e = self.extent();
        if e.x >= e.y && e.x >= e.z {
            0
        } else if e.y >= e.z {
            1
        } else {
            2
        }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }

    pub fn union(&self, o: &Aabb) -> Aabb {
        Aabb::new(self.min.min(o.min), self.max.max(o.max))
    }

    pub fn union_point(&self, p: Vec3) -> Aabb {
        Aabb::new(self.min.min(p), self.max.max(p))
    }

    /// Grow each axis by `rel` times its extent (absolute fallback for
    /// degenerate axes).
    pub fn expanded(&self, rel: f64) -> Aabb {
        let e = self.extent();
        let pad = |ext: f64| if ext > 0.0 { ext * rel } else { rel };
        let d = Vec3::new(pad(e.x), pad(e.y), pad(e.z));
        Aabb::new(self.min - d, self.max + d)
    }

    pub fn clamp_point(&self, p: Vec3) -> Vec3 {
        Vec3::new(
            p.x.clamp(self.min.x, self.max.x),
            p.y.clamp(self.min.y, self.max.y),
            p.z.clamp(self.min.z, self.max.z),
        )
    }

    /// Distance from `p` to the closest point of the box (0 inside).
    pub fn distance_to_point(&self, p: Vec3) -> f64 {
        (p - self.clamp_point(p)).norm()
    }

    /// Minimum distance between two boxes (0 if they touch or overlap).
    pub fn distance_to_box(&self, o: &Aabb) -> f64 {
        let gap = |amin: f64, amax: f64, bmin: f64, bmax: f64| {
            (bmin - amax).max(amin - bmax).max(0.0)
        };
        let d = Vec3::new(
            gap(self.min.x, self.max.x, o.min.x, o.max.x),
            gap(self.min.y, self.max.y, o.min.y, o.max.y),
            gap(self.min.z, self.max.z, o.min.z, o.max.z),
        );
        d.norm()
    }
}

/// A point charge with its accumulators and the load weight carried between
/// time steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Body {
    pub pos: Vec3,
    pub charge: f64,
    pub potential: f64,
    pub force: Vec3,
    pub weight: f64,
    pub id: u32,
}

impl Body {
    pub fn at(pos: Vec3, charge: f64, id: u32) -> Self {
        Body { pos, charge, potential: 0.0, force: Vec3::ZERO, weight: 1.0, id }
    }

    pub fn clear_accumulators(&mut self) {
        self.potential = 0.0;
        self.force = Vec3::ZERO;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distribution {
    Cube,
    Sphere,
    Plummer,
}

impl Distribution {
    pub const ALL: [Distribution; 3] =
        [Distribution::Cube, Distribution::Sphere, Distribution::Plummer];
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Distribution::Cube => "cube",
            Distribution::Sphere => "sphere",
            Distribution::Plummer => "plummer",
        };
        f.write_str(s)
    }
}

impl FromStr for Distribution {
    type Err = GeometryError;
    fn from_str(s: &str) -> Result<Self, GeometryError> {
        match s {
            "cube" => Ok(Distribution::Cube),
            "sphere" => Ok(Distribution::Sphere),
            "plummer" => Ok(Distribution::Plummer),
            _ => Err(GeometryError::UnknownDistribution(s.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum GeometryError {
    UnknownDistribution(String),
    EmptyBodies,
    OutOfBounds { pos: Vec3 },
}

impl fmt::Display for GeometryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeometryError::UnknownDistribution(s) => {
                write!(f, "unknown distribution '{s}' (expected cube, sphere or plummer)")
            }
            GeometryError::EmptyBodies => write!(f, "operation requires at least one body"),
            GeometryError::OutOfBounds { pos } => {
                write!(f, "position ({}, {}, {}) outside local bounds", pos.x, pos.y, pos.z)
            }
        }
    }
}

impl std::error::Error for GeometryError {}

/// Draw `n` bodies from `kind`, each with charge `1/n` and unit weight.
/// The generator (ChaCha8) is fixed so a `(kind, n, seed)` triple is
/// reproducible across platforms.
pub fn generate(kind: Distribution, n: usize, seed: u64) -> Vec<Body> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let charge = if n > 0 { 1.0 / n as f64 } else { 0.0 };
    let mut bodies = Vec::with_capacity(n);
    for id in 0..n {
        let pos = match kind {
            Distribution::Cube => Vec3::new(
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
            ),
            Distribution::Sphere => unit_direction(&mut rng),
            Distribution::Plummer => plummer_position(&mut rng),
        };
        bodies.push(Body::at(pos, charge, id as u32));
    }
    bodies
}

fn unit_direction(rng: &mut ChaCha8Rng) -> Vec3 {
    let z: f64 = 1.0 - 2.0 * rng.gen_range(0.0..1.0);
    let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let rxy = (1.0 - z * z).max(0.0).sqrt();
    Vec3::new(rxy * phi.cos(), rxy * phi.sin(), z)
}

/// Inverse-transform Plummer radius, redrawing samples past the cutoff so
/// the model's unbounded tail cannot produce arbitrarily large domains.
fn plummer_position(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let u: f64 = rng.gen_range(0.0..1.0);
        let r = PLUMMER_SCALE / (u.powf(-2.0 / 3.0) - 1.0).sqrt();
        let dir = unit_direction(rng);
        if r <= PLUMMER_CUTOFF {
            return dir * r;
        }
    }
}

/// Tight bounds over a body list.
pub fn global_bounds(bodies: &[Body]) -> Result<Aabb, GeometryError> {
    let first = bodies.first().ok_or(GeometryError::EmptyBodies)?;
    let mut b = Aabb::point(first.pos);
    for body in &bodies[1..] {
        b = b.union_point(body.pos);
    }
    Ok(b)
}

/// 64-bit Morton key: 3 bits per level, most significant octant first.
/// `bits` only uses the low `3 * level` bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MortonKey {
    pub bits: u64,
    pub level: u32,
}

impl MortonKey {
    pub fn root() -> Self {
        MortonKey { bits: 0, level: 0 }
    }

    pub fn child(self, octant: u8) -> Self {
        debug_assert!(octant < 8 && self.level < MAX_DEPTH);
        MortonKey { bits: (self.bits << 3) | octant as u64, level: self.level + 1 }
    }

    pub fn parent(self) -> Self {
        debug_assert!(self.level > 0);
        MortonKey { bits: self.bits >> 3, level: self.level - 1 }
    }

    /// Octant digit at depth `level` (1-based, counted from the root).
    pub fn digit_at(self, level: u32) -> u8 {
        debug_assert!(level >= 1 && level <= self.level);
        ((self.bits >> (3 * (self.level - level))) & 0b111) as u8
    }

    /// Truncate to a shallower ancestor key.
    pub fn ancestor_at(self, level: u32) -> Self {
        debug_assert!(level <= self.level);
        MortonKey { bits: self.bits >> (3 * (self.level - level)), level }
    }
}

/// Spread the low 21 bits of `v` so three interleave without collision.
fn spread_bits(v: u64) -> u64 {
    let mut x = v & 0x1f_ffff;
    x = (x | (x << 32)) & 0x001f_0000_0000_ffff;
    x = (x | (x << 16)) & 0x001f_0000_ff00_00ff;
    x = (x | (x << 8)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x << 4)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x << 2)) & 0x1249_2492_4924_9249;
    x
}

fn compact_bits(v: u64) -> u64 {
    let mut x = v & 0x1249_2492_4924_9249;
    x = (x | (x >> 2)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x >> 4)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x >> 8)) & 0x001f_0000_ff00_00ff;
    x = (x | (x >> 16)) & 0x001f_0000_0000_ffff;
    x = (x | (x >> 32)) & 0x1f_ffff;
    x
}

/// Interleave per-axis cell coordinates into a key at `level`.
pub fn morton_encode(ix: u64, iy: u64, iz: u64, level: u32) -> MortonKey {
    debug_assert!(level <= MAX_DEPTH);
    let bits = spread_bits(ix) | (spread_bits(iy) << 1) | (spread_bits(iz) << 2);
    MortonKey { bits, level }
}

pub fn morton_decode(key: MortonKey) -> (u64, u64, u64) {
    (compact_bits(key.bits), compact_bits(key.bits >> 1), compact_bits(key.bits >> 2))
}

/// Key of the cell containing `pos` at `level`, relative to `local_bounds`.
///
/// Bounds are first expanded by [`BOUNDS_EPS_REL`] for the containment
/// check, so a body sitting exactly on a partition face is accepted; the
/// grid itself uses the unexpanded bounds with the top cell index clamped.
pub fn local_key(pos: Vec3, local_bounds: &Aabb, level: u32) -> Result<MortonKey, GeometryError> {
    debug_assert!(level <= MAX_DEPTH);
    if !local_bounds.expanded(BOUNDS_EPS_REL).contains(pos) {
        return Err(GeometryError::OutOfBounds { pos });
    }
    let cells = 1u64 << level;
    let idx = |p: f64, lo: f64, hi: f64| -> u64 {
        if hi <= lo {
            return 0;
        }
        let t = (p - lo) / (hi - lo);
        ((t * cells as f64) as i64).clamp(0, cells as i64 - 1) as u64
    };
    let ix = idx(pos.x, local_bounds.min.x, local_bounds.max.x);
    let iy = idx(pos.y, local_bounds.min.y, local_bounds.max.y);
    let iz = idx(pos.z, local_bounds.min.z, local_bounds.max.z);
    Ok(morton_encode(ix, iy, iz, level))
}
