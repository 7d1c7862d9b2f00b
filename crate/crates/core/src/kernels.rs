//! Cartesian Taylor expansions for the Laplace kernel G(r) = 1/|r| and the
//! six FMM operators built on them.
//!
//! Conventions, fixed once here and relied on everywhere else:
//!
//! * Multi-indices α = (αx, αy, αz) with |α| < P are stored in
//!   graded-lexicographic order: grade ascending, and within a grade αx
//!   descending, then αy descending.
//! * Multipole coefficients are scaled moments, `M[β] = Σ_j q_j (r_j − z)^β / β!`
//!   about the expansion center z.
//! * Local coefficients are plain Taylor coefficients, so evaluation is
//!   `φ(r) = Σ_α L[α] (r − t)^α` about the target center t, and the force on
//!   a unit charge is `f = +∇φ` (matching direct particle interaction, which
//!   pulls a target toward a positive source).
//! * Every operator accumulates its output in index-ascending order so runs
//!   are bitwise reproducible.

use std::fmt;

use crate::geometry::{Body, Vec3};

/// Factorial tables are exact in f64 up to 15!, which bounds the order.
pub const MAX_ORDER: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExpansionOrder(usize);

impl ExpansionOrder {
    pub fn new(p: usize) -> Result<Self, KernelError> {
        if p == 0 || p > MAX_ORDER {
            return Err(KernelError::InvalidOrder(p));
        }
        Ok(ExpansionOrder(p))
    }

    pub fn get(self) -> usize {
        self.0
    }

    /// Number of multi-indices with |α| < P.
    pub fn coeff_count(self) -> usize {
        self.0 * (self.0 + 1) * (self.0 + 2) / 6
    }
}

impl fmt::Display for ExpansionOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum KernelError {
    InvalidOrder(usize),
    ZeroDisplacement,
}

impl fmt::Display for KernelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelError::InvalidOrder(p) => {
                write!(f, "expansion order {p} outside 1..={MAX_ORDER}")
            }
            KernelError::ZeroDisplacement => {
                write!(f, "multipole-to-local translation over zero displacement")
            }
        }
    }
}

impl std::error::Error for KernelError {}

/// One translation term: `out[group] += factor · src[src] · mono[mono]`.
#[derive(Clone, Copy, Debug)]
struct TransTerm {
    src: u32,
    mono: u32,
    factor: f64,
}

/// One derivative-tensor recurrence step. For each axis m the predecessor
/// indices γ−e_m and γ−2e_m are stored (0 with a zero coefficient when the
/// index would go negative, so evaluation needs no branches).
#[derive(Clone, Copy, Debug)]
struct TensorStep {
    sub1: [u32; 3],
    sub2: [u32; 3],
    c1: [f64; 3],
    c2: [f64; 3],
}

/// Reusable per-task buffers for the hot kernel paths.
pub struct KernelScratch {
    mono: Vec<f64>,
    tensor: Vec<f64>,
}

/// Precomputed index tables and operator term lists for one expansion order.
/// Construction is O(coeffCount²); everything per-call is table-driven.
pub struct ExpansionTables {
    order: ExpansionOrder,
    ncoef: usize,
    /// Indices with |α| ≤ P−2; gradient and m2l-source loops stop here.
    ncoef_lower: usize,
    indices: Vec<[u8; 3]>,
    inv_fact: Vec<f64>,
    /// For index i ≥ 1: (j, axis) with α_i = α_j + e_axis.
    mono_plan: Vec<(u32, u8)>,
    /// For |α| ≤ P−2: index of α + e_axis per axis.
    grad_up: Vec<[u32; 3]>,
    m2l_factor: Vec<f64>,
    m2l_spans: Vec<(u32, u32)>,
    m2l_terms: Vec<(u32, u32)>,
    m2m_spans: Vec<(u32, u32)>,
    m2m_terms: Vec<TransTerm>,
    l2l_spans: Vec<(u32, u32)>,
    l2l_terms: Vec<TransTerm>,
    tensor_plan: Vec<TensorStep>,
}

fn factorial(n: u8) -> f64 {
    (1..=n as u64).product::<u64>() as f64
}

fn multi_factorial(a: [u8; 3]) -> f64 {
    factorial(a[0]) * factorial(a[1]) * factorial(a[2])
}

fn binomial(n: u8, k: u8) -> f64 {
    factorial(n) / (factorial(k) * factorial(n - k))
}

fn grade(a: [u8; 3]) -> usize {
    a[0] as usize + a[1] as usize + a[2] as usize
}

fn build_indices(p: usize) -> Vec<[u8; 3]> {
    let mut v = Vec::new();
    for g in 0..p {
        for ax in (0..=g).rev() {
            for ay in (0..=(g - ax)).rev() {
                v.push([ax as u8, ay as u8, (g - ax - ay) as u8]);
            }
        }
    }
    v
}

impl ExpansionTables {
    pub fn new(order: ExpansionOrder) -> Self {
        let p = order.get();
        let indices = build_indices(p);
        let ncoef = indices.len();
        debug_assert_eq!(ncoef, order.coeff_count());
        let ncoef_lower = if p > 1 { p * (p - 1) * (p + 1) / 6 } else { 0 };

        // Dense (αx, αy, αz) → flat index lookup; unused slots stay MAX.
        let mut lookup = vec![u32::MAX; p * p * p];
        let at = |a: [u8; 3]| (a[0] as usize * p + a[1] as usize) * p + a[2] as usize;
        for (i, &a) in indices.iter().enumerate() {
            lookup[at(a)] = i as u32;
        }
        let index_of = |a: [u8; 3]| -> u32 {
            let i = lookup[at(a)];
            debug_assert_ne!(i, u32::MAX);
            i
        };

        let inv_fact: Vec<f64> = indices.iter().map(|&a| 1.0 / multi_factorial(a)).collect();

        let mono_plan: Vec<(u32, u8)> = indices[1..]
            .iter()
            .map(|&a| {
                let axis = (0..3).find(|&m| a[m] > 0).unwrap();
                let mut down = a;
                down[axis] -= 1;
                (index_of(down), axis as u8)
            })
            .collect();

        let grad_up: Vec<[u32; 3]> = indices[..ncoef_lower]
            .iter()
            .map(|&a| {
                let mut up = [0u32; 3];
                for m in 0..3 {
                    let mut u = a;
                    u[m] += 1;
                    up[m] = index_of(u);
                }
                up
            })
            .collect();

        let mut m2l_factor = Vec::with_capacity(ncoef);
        let mut m2l_spans = Vec::with_capacity(ncoef);
        let mut m2l_terms = Vec::new();
        for &a in &indices {
            let ga = grade(a);
            let sign = if ga % 2 == 0 { 1.0 } else { -1.0 };
            m2l_factor.push(sign / multi_factorial(a));
            let start = m2l_terms.len() as u32;
            for (bi, &b) in indices.iter().enumerate() {
                if ga + grade(b) >= p {
                    continue;
                }
                let sum = [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
                m2l_terms.push((bi as u32, index_of(sum)));
            }
            m2l_spans.push((start, m2l_terms.len() as u32));
        }

        let mut m2m_spans = Vec::with_capacity(ncoef);
        let mut m2m_terms = Vec::new();
        for &a in &indices {
            let start = m2m_terms.len() as u32;
            for (bi, &b) in indices.iter().enumerate() {
                if b[0] > a[0] || b[1] > a[1] || b[2] > a[2] {
                    continue;
                }
                let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
                m2m_terms.push(TransTerm {
                    src: bi as u32,
                    mono: index_of(d),
                    factor: 1.0 / multi_factorial(d),
                });
            }
            m2m_spans.push((start, m2m_terms.len() as u32));
        }

        let mut l2l_spans = Vec::with_capacity(ncoef);
        let mut l2l_terms = Vec::new();
        for &a in &indices {
            let start = l2l_terms.len() as u32;
            for (bi, &b) in indices.iter().enumerate() {
                if b[0] < a[0] || b[1] < a[1] || b[2] < a[2] {
                    continue;
                }
                let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
                let factor =
                    binomial(b[0], a[0]) * binomial(b[1], a[1]) * binomial(b[2], a[2]);
                l2l_terms.push(TransTerm { src: bi as u32, mono: index_of(d), factor });
            }
            l2l_spans.push((start, l2l_terms.len() as u32));
        }

        // Recurrence for R_γ = D^γ(1/r), obtained by applying D^{γ−e_k} to
        // the identity r²·D_k(1/r) + x_k·(1/r) = 0 and collecting terms:
        //   r² R_γ = −[(2γ_k−1) x_k R_{γ−e_k} + (γ_k−1)² R_{γ−2e_k}
        //             + Σ_{m≠k} (2γ_m x_m R_{γ−e_m} + γ_m(γ_m−1) R_{γ−2e_m})]
        // with k any axis where γ_k > 0 (the largest component for stability).
        let tensor_plan: Vec<TensorStep> = indices[1..]
            .iter()
            .map(|&g| {
                let k = (0..3).max_by_key(|&m| (g[m], std::cmp::Reverse(m))).unwrap();
                let mut step = TensorStep {
                    sub1: [0; 3],
                    sub2: [0; 3],
                    c1: [0.0; 3],
                    c2: [0.0; 3],
                };
                for m in 0..3 {
                    let gm = g[m] as f64;
                    let (c1, c2) = if m == k {
                        (2.0 * gm - 1.0, (gm - 1.0) * (gm - 1.0))
                    } else {
                        (2.0 * gm, gm * (gm - 1.0))
                    };
                    if c1 != 0.0 {
                        let mut d = g;
                        d[m] -= 1;
                        step.sub1[m] = index_of(d);
                        step.c1[m] = c1;
                    }
                    if c2 != 0.0 {
                        let mut d = g;
                        d[m] -= 2;
                        step.sub2[m] = index_of(d);
                        step.c2[m] = c2;
                    }
                }
                step
            })
            .collect();

        ExpansionTables {
            order,
            ncoef,
            ncoef_lower,
            indices,
            inv_fact,
            mono_plan,
            grad_up,
            m2l_factor,
            m2l_spans,
            m2l_terms,
            m2m_spans,
            m2m_terms,
            l2l_spans,
            l2l_terms,
            tensor_plan,
        }
    }

    pub fn order(&self) -> ExpansionOrder {
        self.order
    }

    pub fn coeff_count(&self) -> usize {
        self.ncoef
    }

    pub fn scratch(&self) -> KernelScratch {
        KernelScratch { mono: vec![0.0; self.ncoef], tensor: vec![0.0; self.ncoef] }
    }

    /// Fill `out[i] = d^α_i` for every stored index.
    fn mono_eval(&self, d: Vec3, out: &mut [f64]) {
        let c = [d.x, d.y, d.z];
        out[0] = 1.0;
        for (i, &(prev, axis)) in self.mono_plan.iter().enumerate() {
            out[i + 1] = out[prev as usize] * c[axis as usize];
        }
    }

    /// Fill `out[i] = D^γ_i (1/|r|)` evaluated at `w`.
    fn tensor_eval(&self, w: Vec3, out: &mut [f64]) {
        let c = [w.x, w.y, w.z];
        let r2 = w.norm_sq();
        let neg_inv_r2 = -1.0 / r2;
        out[0] = 1.0 / r2.sqrt();
        for (i, s) in self.tensor_plan.iter().enumerate() {
            let mut acc = 0.0;
            for m in 0..3 {
                acc += s.c1[m] * c[m] * out[s.sub1[m] as usize]
                    + s.c2[m] * out[s.sub2[m] as usize];
            }
            out[i + 1] = neg_inv_r2 * acc;
        }
    }

    /// Accumulate the moments of `bodies` about `center` into `m`.
    pub fn p2m(&self, bodies: &[Body], center: Vec3, m: &mut [f64], scratch: &mut KernelScratch) {
        debug_assert_eq!(m.len(), self.ncoef);
        for body in bodies {
            self.mono_eval(body.pos - center, &mut scratch.mono);
            for i in 0..self.ncoef {
                m[i] += body.charge * scratch.mono[i] * self.inv_fact[i];
            }
        }
    }

    /// Shift child moments to the parent center; `shift` is
    /// childCenter − parentCenter. Exact (no truncation).
    pub fn m2m(&self, child: &[f64], shift: Vec3, parent: &mut [f64], scratch: &mut KernelScratch) {
        debug_assert_eq!(child.len(), self.ncoef);
        debug_assert_eq!(parent.len(), self.ncoef);
        self.mono_eval(shift, &mut scratch.mono);
        for (i, &(start, end)) in self.m2m_spans.iter().enumerate() {
            let mut acc = 0.0;
            for t in &self.m2m_terms[start as usize..end as usize] {
                acc += child[t.src as usize] * scratch.mono[t.mono as usize] * t.factor;
            }
            parent[i] += acc;
        }
    }

    /// Translate source moments into target-local Taylor coefficients;
    /// `displacement` is sourceCenter − targetCenter. Truncates to
    /// |α| + |β| < P.
    pub fn m2l(
        &self,
        source_m: &[f64],
        displacement: Vec3,
        target_l: &mut [f64],
        scratch: &mut KernelScratch,
    ) -> Result<(), KernelError> {
        debug_assert_eq!(source_m.len(), self.ncoef);
        debug_assert_eq!(target_l.len(), self.ncoef);
        if displacement.norm_sq() == 0.0 {
            return Err(KernelError::ZeroDisplacement);
        }
        self.tensor_eval(displacement, &mut scratch.tensor);
        for (i, &(start, end)) in self.m2l_spans.iter().enumerate() {
            let mut acc = 0.0;
            for &(src, tens) in &self.m2l_terms[start as usize..end as usize] {
                acc += source_m[src as usize] * scratch.tensor[tens as usize];
            }
            target_l[i] += self.m2l_factor[i] * acc;
        }
        Ok(())
    }

    /// Re-center parent local coefficients on a child center; `shift` is
    /// childCenter − parentCenter. Exact (no truncation).
    pub fn l2l(&self, parent: &[f64], shift: Vec3, child: &mut [f64], scratch: &mut KernelScratch) {
        debug_assert_eq!(parent.len(), self.ncoef);
        debug_assert_eq!(child.len(), self.ncoef);
        self.mono_eval(shift, &mut scratch.mono);
        for (i, &(start, end)) in self.l2l_spans.iter().enumerate() {
            let mut acc = 0.0;
            for t in &self.l2l_terms[start as usize..end as usize] {
                acc += parent[t.src as usize] * scratch.mono[t.mono as usize] * t.factor;
            }
            child[i] += acc;
        }
    }

    /// Evaluate local coefficients about `center` at every body, adding the
    /// potential and its gradient (the force on a unit charge).
    pub fn l2p(&self, l: &[f64], center: Vec3, bodies: &mut [Body], scratch: &mut KernelScratch) {
        debug_assert_eq!(l.len(), self.ncoef);
        for body in bodies.iter_mut() {
            self.mono_eval(body.pos - center, &mut scratch.mono);
            let mut pot = 0.0;
            for i in 0..self.ncoef {
                pot += l[i] * scratch.mono[i];
            }
            let mut f = Vec3::ZERO;
            for i in 0..self.ncoef_lower {
                let a = self.indices[i];
                let up = self.grad_up[i];
                let mono = scratch.mono[i];
                f.x += l[up[0] as usize] * (a[0] + 1) as f64 * mono;
                f.y += l[up[1] as usize] * (a[1] + 1) as f64 * mono;
                f.z += l[up[2] as usize] * (a[2] + 1) as f64 * mono;
            }
            body.potential += pot;
            body.force += f;
        }
    }

    /// Potential at `point` evaluated straight from a multipole expansion
    /// about `center` (diagnostic / oracle path, not used in the pipeline).
    pub fn eval_multipole(
        &self,
        m: &[f64],
        center: Vec3,
        point: Vec3,
        scratch: &mut KernelScratch,
    ) -> f64 {
        debug_assert_eq!(m.len(), self.ncoef);
        self.tensor_eval(center - point, &mut scratch.tensor);
        let mut acc = 0.0;
        for i in 0..self.ncoef {
            acc += m[i] * scratch.tensor[i];
        }
        acc
    }
}

#[inline]
pub(crate) fn accumulate_pair(target: &mut Body, src_pos: Vec3, src_charge: f64) {
    let d = src_pos - target.pos;
    let r2 = d.norm_sq();
    if r2 == 0.0 {
        return;
    }
    let inv_r = 1.0 / r2.sqrt();
    let inv_r3 = inv_r / r2;
    target.potential += src_charge * inv_r;
    target.force += d * (src_charge * inv_r3);
}

/// One-sided direct interaction: every target accumulates every source.
/// Coincident pairs (including aliased self-pairs) contribute nothing.
pub fn p2p(targets: &mut [Body], sources: &[Body]) {
    for t in targets.iter_mut() {
        for s in sources {
            accumulate_pair(t, s.pos, s.charge);
        }
    }
}

/// Mutual direct interaction between two disjoint slices. Bitwise equal to
/// `p2p(a, b)` followed by `p2p(b, a)`: each side still receives its
/// contributions in ascending partner order, and the reversed displacement
/// is the exact negation of the forward one.
pub fn p2p_mutual(a: &mut [Body], b: &mut [Body]) {
    for ta in a.iter_mut() {
        for tb in b.iter_mut() {
            let d = tb.pos - ta.pos;
            let r2 = d.norm_sq();
            if r2 == 0.0 {
                continue;
            }
            let inv_r = 1.0 / r2.sqrt();
            let inv_r3 = inv_r / r2;
            ta.potential += tb.charge * inv_r;
            ta.force += d * (tb.charge * inv_r3);
            tb.potential += ta.charge * inv_r;
            tb.force += d * (-ta.charge * inv_r3);
        }
    }
}

/// Mutual direct interaction of a slice with itself, skipping self-pairs.
/// Bitwise equal to the one-sided form with the slice as its own source.
pub fn p2p_within(bodies: &mut [Body]) {
    for i in 0..bodies.len() {
        let (head, tail) = bodies.split_at_mut(i + 1);
        let ta = &mut head[i];
        for tb in tail.iter_mut() {
            let d = tb.pos - ta.pos;
            let r2 = d.norm_sq();
            if r2 == 0.0 {
                continue;
            }
            let inv_r = 1.0 / r2.sqrt();
            let inv_r3 = inv_r / r2;
            ta.potential += tb.charge * inv_r;
            ta.force += d * (tb.charge * inv_r3);
            tb.potential += ta.charge * inv_r;
            tb.force += d * (-ta.charge * inv_r3);
        }
    }
}

/// Exact all-pairs reference. Overwrites the accumulators; parallel over
/// targets but deterministic, since each target sums its sources in slice
/// order.
pub fn direct_sum(bodies: &mut [Body]) {
    use rayon::prelude::*;
    let sources: Vec<(Vec3, f64)> = bodies.iter().map(|b| (b.pos, b.charge)).collect();
    bodies.par_iter_mut().for_each(|t| {
        t.clear_accumulators();
        for &(pos, charge) in &sources {
            accumulate_pair(t, pos, charge);
        }
    });
}
