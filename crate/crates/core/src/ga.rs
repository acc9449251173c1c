//! Projective geometric algebra G(3,0,1).
//!
//! Multivectors are dense 16-component arrays over the basis
//!
//! ```text
//! index:  0  1   2   3   4   5    6    7    8    9    10   11    12    13    14    15
//! blade:  1  e0  e1  e2  e3  e01  e02  e03  e12  e13  e23  e012  e013  e023  e123  e0123
//! ```
//!
//! with metric `e0² = 0`, `e1² = e2² = e3² = 1`.
//!
//! Canonical embeddings:
//!
//! * scalar `s`             → `s`
//! * plane `{x : n·x = d}`  → `n1 e1 + n2 e2 + n3 e3 - d e0`
//! * direction `v`          → `v1 e01 + v2 e02 + v3 e03`
//! * point `p`              → `e123 - p1 e023 + p2 e013 - p3 e012`
//!
//! Group action: a versor `V` acts by `V x V⁻¹` when even and by
//! `V x̂ V⁻¹` (grade involution on `x`) when odd. Under this convention a
//! reflected point keeps its position but its homogeneous `e123` coordinate
//! flips sign, so [`extract_point`] divides by it. Translators are
//! `1 - ½ (t1 e01 + t2 e02 + t3 e03)` and rotors `cos(θ/2) - sin(θ/2) B` with
//! `B = a1 e23 - a2 e13 + a3 e12` for a unit axis `a`.

use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub};
use std::sync::LazyLock;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Number of components of a multivector.
pub const DIM: usize = 16;

/// Human-readable blade names in storage order.
pub const BLADE_NAMES: [&str; DIM] = [
    "1", "e0", "e1", "e2", "e3", "e01", "e02", "e03", "e12", "e13", "e23", "e012", "e013", "e023",
    "e123", "e0123",
];

/// Generator bitmask of each blade (bit 0 = e0, bit 1 = e1, ...).
pub const BLADE_MASKS: [u8; DIM] = [
    0b0000, 0b0001, 0b0010, 0b0100, 0b1000, 0b0011, 0b0101, 0b1001, 0b0110, 0b1010, 0b1100,
    0b0111, 0b1011, 0b1101, 0b1110, 0b1111,
];

/// Grade of each blade.
pub const GRADES: [usize; DIM] = [0, 1, 1, 1, 1, 2, 2, 2, 2, 2, 2, 3, 3, 3, 3, 4];

/// Blades whose square is nonzero; these carry the invariant inner product.
pub const NON_DEGENERATE: [usize; 8] = [0, 2, 3, 4, 8, 9, 10, 14];

pub const E0: usize = 1;
pub const E01: usize = 5;
pub const E02: usize = 6;
pub const E03: usize = 7;
pub const E012: usize = 11;
pub const E013: usize = 12;
pub const E023: usize = 13;
pub const E123: usize = 14;
pub const E0123: usize = 15;

fn blade_index(mask: u8) -> usize {
    BLADE_MASKS.iter().position(|&m| m == mask).expect("every 4-bit mask is a blade")
}

/// Sign of reordering `e_a e_b` into canonical (ascending) generator order.
fn reorder_sign(a: u8, b: u8) -> f64 {
    let mut swaps = 0;
    for i in 0..4 {
        if a & (1 << i) != 0 {
            // each generator of `b` with lower index has to move past this one
            swaps += (b & ((1 << i) - 1)).count_ones();
        }
    }
    if swaps % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Nonzero entries `(i, j, k, sign)` of a bilinear product: `e_i ∘ e_j = sign e_k`.
pub type ProductTable = Vec<(usize, usize, usize, f64)>;

pub struct Tables {
    pub geometric: ProductTable,
    pub outer: ProductTable,
    pub join: ProductTable,
    /// `dual(e_i) = dual_sign[i] * e_{15-i}`
    pub dual_sign: [f64; DIM],
}

fn build_tables() -> Tables {
    let mut geometric = Vec::new();
    let mut outer = Vec::new();
    for (i, &a) in BLADE_MASKS.iter().enumerate() {
        for (j, &b) in BLADE_MASKS.iter().enumerate() {
            let common = a & b;
            if common & 1 != 0 {
                continue; // e0 e0 = 0
            }
            let k = blade_index(a ^ b);
            let s = reorder_sign(a, b);
            geometric.push((i, j, k, s));
            if common == 0 {
                outer.push((i, j, k, s));
            }
        }
    }
    // right complement: e_A ∧ dual(e_A) = e0123
    let mut dual_sign = [0.0; DIM];
    for (i, &a) in BLADE_MASKS.iter().enumerate() {
        dual_sign[i] = reorder_sign(a, 0b1111 ^ a);
    }
    // join(e_i, e_j) = undual(dual(e_i) ∧ dual(e_j))
    let mut join = Vec::new();
    for i in 0..DIM {
        for j in 0..DIM {
            let (di, dj) = (DIM - 1 - i, DIM - 1 - j);
            let (ma, mb) = (BLADE_MASKS[di], BLADE_MASKS[dj]);
            if ma & mb != 0 {
                continue;
            }
            let wedge = blade_index(ma ^ mb);
            let k = DIM - 1 - wedge;
            // undual(e_w) = e_k / dual_sign[k] where dual(e_k) = dual_sign[k] e_w
            let s = dual_sign[i] * dual_sign[j] * reorder_sign(ma, mb) / dual_sign[k];
            join.push((i, j, k, s));
        }
    }
    Tables { geometric, outer, join, dual_sign }
}

/// Lazily built product tables, shared by the dense multivector type and the
/// batched network kernels.
pub static TABLES: LazyLock<Tables> = LazyLock::new(build_tables);

/// A general element of G(3,0,1).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Multivector(pub [f64; DIM]);

impl Multivector {
    pub const ZERO: Multivector = Multivector([0.0; DIM]);

    pub fn new(components: [f64; DIM]) -> Self {
        Self(components)
    }

    pub fn scalar(s: f64) -> Self {
        let mut m = Self::ZERO;
        m.0[0] = s;
        m
    }

    /// Unit basis blade `e_i` in storage order.
    pub fn basis(i: usize) -> Self {
        let mut m = Self::ZERO;
        m.0[i] = 1.0;
        m
    }

    pub fn components(&self) -> &[f64; DIM] {
        &self.0
    }

    pub fn scalar_part(&self) -> f64 {
        self.0[0]
    }

    pub fn scale(&self, s: f64) -> Self {
        Self(self.0.map(|c| c * s))
    }

    fn bilinear(&self, other: &Self, table: &ProductTable) -> Self {
        let mut out = [0.0; DIM];
        for &(i, j, k, s) in table {
            out[k] += s * self.0[i] * other.0[j];
        }
        Self(out)
    }

    pub fn geometric_product(&self, other: &Self) -> Self {
        self.bilinear(other, &TABLES.geometric)
    }

    pub fn outer_product(&self, other: &Self) -> Self {
        self.bilinear(other, &TABLES.outer)
    }

    /// Invariant scalar pairing `⟨x̃ y⟩₀`; blades containing `e0` drop out.
    pub fn inner_product(&self, other: &Self) -> f64 {
        NON_DEGENERATE.iter().map(|&i| self.0[i] * other.0[i]).sum()
    }

    pub fn grade_projection(&self, k: usize) -> Result<Self> {
        if k > 4 {
            return Err(Error::Argument(format!("grade {k} outside 0..=4")));
        }
        let mut out = Self::ZERO;
        for i in 0..DIM {
            if GRADES[i] == k {
                out.0[i] = self.0[i];
            }
        }
        Ok(out)
    }

    pub fn reverse(&self) -> Self {
        let mut out = self.0;
        for (i, c) in out.iter_mut().enumerate() {
            if matches!(GRADES[i], 2 | 3) {
                *c = -*c;
            }
        }
        Self(out)
    }

    pub fn grade_involution(&self) -> Self {
        let mut out = self.0;
        for (i, c) in out.iter_mut().enumerate() {
            if GRADES[i] % 2 == 1 {
                *c = -*c;
            }
        }
        Self(out)
    }

    /// Right complement: grade k to grade 4-k, with `e_A ∧ dual(e_A) = e0123`.
    pub fn dual(&self) -> Self {
        let mut out = [0.0; DIM];
        for i in 0..DIM {
            out[DIM - 1 - i] = TABLES.dual_sign[i] * self.0[i];
        }
        Self(out)
    }

    pub fn undual(&self) -> Self {
        let mut out = [0.0; DIM];
        for i in 0..DIM {
            out[i] = self.0[DIM - 1 - i] / TABLES.dual_sign[i];
        }
        Self(out)
    }

    /// Regressive product `undual(dual(a) ∧ dual(b))`.
    pub fn join(&self, other: &Self) -> Self {
        self.bilinear(other, &TABLES.join)
    }

    pub fn norm_squared(&self) -> f64 {
        self.inner_product(self)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.0.iter().zip(other.0.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

impl Index<usize> for Multivector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for Multivector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl Add for Multivector {
    type Output = Self;
    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl AddAssign for Multivector {
    fn add_assign(&mut self, rhs: Self) {
        for (a, b) in self.0.iter_mut().zip(rhs.0) {
            *a += b;
        }
    }
}

impl Sub for Multivector {
    type Output = Self;
    fn sub(mut self, rhs: Self) -> Self {
        for (a, b) in self.0.iter_mut().zip(rhs.0) {
            *a -= b;
        }
        self
    }
}

impl Neg for Multivector {
    type Output = Self;
    fn neg(self) -> Self {
        self.scale(-1.0)
    }
}

impl Mul for Multivector {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        self.geometric_product(&rhs)
    }
}

impl Mul<f64> for Multivector {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        self.scale(rhs)
    }
}

pub fn embed_scalar(s: f64) -> Multivector {
    Multivector::scalar(s)
}

pub fn embed_point(p: [f64; 3]) -> Multivector {
    let mut m = Multivector::ZERO;
    m.0[E123] = 1.0;
    m.0[E023] = -p[0];
    m.0[E013] = p[1];
    m.0[E012] = -p[2];
    m
}

/// Coordinates of an embedded point; invariant to homogeneous scaling.
pub fn extract_point(m: &Multivector) -> Result<[f64; 3]> {
    let w = m.0[E123];
    if w.abs() < 1e-12 {
        return Err(Error::Degenerate("point has zero homogeneous coordinate".into()));
    }
    Ok([-m.0[E023] / w, m.0[E013] / w, -m.0[E012] / w])
}

/// Point coordinates read directly off the trivector components, assuming a
/// unit homogeneous coordinate. Used for network outputs.
pub fn point_coordinates(m: &Multivector) -> [f64; 3] {
    [-m.0[E023], m.0[E013], -m.0[E012]]
}

/// Oriented plane `{x : n·x = d}`; `n` and `d` are rescaled to a unit normal.
pub fn embed_plane(n: [f64; 3], d: f64) -> Result<Multivector> {
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    if len < 1e-12 {
        return Err(Error::Argument("plane normal is zero".into()));
    }
    let mut m = Multivector::ZERO;
    m.0[2] = n[0] / len;
    m.0[3] = n[1] / len;
    m.0[4] = n[2] / len;
    m.0[E0] = -d / len;
    Ok(m)
}

pub fn embed_direction(v: [f64; 3]) -> Multivector {
    let mut m = Multivector::ZERO;
    m.0[E01] = v[0];
    m.0[E02] = v[1];
    m.0[E03] = v[2];
    m
}

pub fn extract_direction(m: &Multivector) -> [f64; 3] {
    [m.0[E01], m.0[E02], m.0[E03]]
}

/// An element of the Pin group of G(3,0,1), normalized so `V Ṽ = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Versor {
    mv: Multivector,
    odd: bool,
}

impl Versor {
    pub fn identity() -> Self {
        Self { mv: Multivector::scalar(1.0), odd: false }
    }

    /// Normalizes `mv` so that `mv * reverse(mv) = 1`.
    pub fn new(mv: Multivector, odd: bool) -> Result<Self> {
        let n = (mv * mv.reverse()).scalar_part();
        if !(n > 1e-12) || !n.is_finite() {
            return Err(Error::Numeric(format!("versor is not normalizable (norm² = {n})")));
        }
        Ok(Self { mv: mv.scale(1.0 / n.sqrt()), odd })
    }

    pub fn multivector(&self) -> &Multivector {
        &self.mv
    }

    pub fn is_odd(&self) -> bool {
        self.odd
    }

    /// Rotation by `angle` radians about the unit `axis` through the origin.
    pub fn rotor(axis: [f64; 3], angle: f64) -> Result<Self> {
        let len = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if len < 1e-12 {
            return Err(Error::Argument("rotation axis is zero".into()));
        }
        let a = axis.map(|c| c / len);
        let (s, c) = (0.5 * angle).sin_cos();
        let mut mv = Multivector::scalar(c);
        mv.0[10] = -s * a[0];
        mv.0[9] = s * a[1];
        mv.0[8] = -s * a[2];
        Self::new(mv, false)
    }

    /// Rotor from a unit quaternion `(w, x, y, z)`.
    pub fn from_quaternion(q: [f64; 4]) -> Result<Self> {
        let mut mv = Multivector::scalar(q[0]);
        mv.0[10] = -q[1];
        mv.0[9] = q[2];
        mv.0[8] = -q[3];
        Self::new(mv, false)
    }

    pub fn translator(t: [f64; 3]) -> Self {
        let mut mv = Multivector::scalar(1.0);
        mv.0[E01] = -0.5 * t[0];
        mv.0[E02] = -0.5 * t[1];
        mv.0[E03] = -0.5 * t[2];
        Self { mv, odd: false }
    }

    /// Reflection in the plane `{x : n·x = d}`.
    pub fn reflection(n: [f64; 3], d: f64) -> Result<Self> {
        Self::new(embed_plane(n, d)?, true)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Versor) -> Versor {
        Versor { mv: self.mv * other.mv, odd: self.odd ^ other.odd }
    }

    pub fn inverse(&self) -> Versor {
        Versor { mv: self.mv.reverse(), odd: self.odd }
    }

    pub fn sandwich(&self, x: &Multivector) -> Multivector {
        let x = if self.odd { x.grade_involution() } else { *x };
        self.mv * x * self.mv.reverse()
    }

    pub fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        extract_point(&self.sandwich(&embed_point(p))).expect("versors preserve finite points")
    }

    pub fn transform_direction(&self, v: [f64; 3]) -> [f64; 3] {
        extract_direction(&self.sandwich(&embed_direction(v)))
    }

    /// Uniform random rotation, translation uniform in `[-range, range]³`, and
    /// with probability 1/2 a reflection in a random plane through the origin.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, translation_range: f64) -> Versor {
        let mut v = Self::random_rigid(rng, translation_range);
        if rng.gen_bool(0.5) {
            v = v.compose(&Self::random_reflection(rng));
        }
        v
    }

    /// Random proper rigid motion (no reflection).
    pub fn random_rigid<R: Rng + ?Sized>(rng: &mut R, translation_range: f64) -> Versor {
        let rot = Self::random_rotation(rng);
        let t = [0; 3].map(|_| rng.gen_range(-translation_range..=translation_range));
        Self::translator(t).compose(&rot)
    }

    pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Versor {
        loop {
            let q: [f64; 4] = [0; 4].map(|_| StandardNormal.sample(rng));
            let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
            if n > 1e-6 {
                return Self::from_quaternion(q.map(|c| c / n)).expect("unit quaternion");
            }
        }
    }

    pub fn random_reflection<R: Rng + ?Sized>(rng: &mut R) -> Versor {
        loop {
            let n: [f64; 3] = [0; 3].map(|_| StandardNormal.sample(rng));
            if n.iter().map(|c| c * c).sum::<f64>() > 1e-6 {
                return Self::reflection(n, 0.0).expect("nonzero normal");
            }
        }
    }
}

impl Mul for Versor {
    type Output = Versor;
    fn mul(self, rhs: Versor) -> Versor {
        self.compose(&rhs)
    }
}
