//! Lattice algebra, coordinate transforms and reciprocal-basis construction.
//!
//! Convention: a lattice is a 3×3 matrix whose *rows* are the lattice vectors
//! ℓ₁, ℓ₂, ℓ₃ (Å). A fractional coordinate `f` maps to Cartesian
//! `p = f₁ℓ₁ + f₂ℓ₂ + f₃ℓ₃`, i.e. the row vector `f · L`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Lattices with `|det L|` at or below this volume (Å³) are rejected.
pub const DEFAULT_MIN_VOLUME: f64 = 1e-6;

#[inline]
pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

/// Signed volume ℓ₁·(ℓ₂×ℓ₃).
pub fn det(m: &Mat3) -> f64 {
    dot(&m[0], &cross(&m[1], &m[2]))
}

/// Row vector times matrix: `v · M`.
#[inline]
pub fn vec_mat(v: &Vec3, m: &Mat3) -> Vec3 {
    let mut out = [0.0; 3];
    for (k, vk) in v.iter().enumerate() {
        for c in 0..3 {
            out[c] += vk * m[k][c];
        }
    }
    out
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        out[i] = vec_mat(&a[i], b);
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

fn check_lattice(lattice: &Mat3) -> Result<f64> {
    let d = det(lattice);
    if !d.is_finite() || d.abs() <= DEFAULT_MIN_VOLUME {
        return Err(Error::LatticeDegenerate { det: d });
    }
    Ok(d)
}

/// Inverse of a non-singular 3×3 matrix via the adjugate.
pub fn inverse(m: &Mat3) -> Result<Mat3> {
    let d = check_lattice(m)?;
    // Columns of the inverse are the cross products of the rows.
    let c0 = cross(&m[1], &m[2]);
    let c1 = cross(&m[2], &m[0]);
    let c2 = cross(&m[0], &m[1]);
    let mut inv = [[0.0; 3]; 3];
    for r in 0..3 {
        inv[r] = [c0[r] / d, c1[r] / d, c2[r] / d];
    }
    Ok(inv)
}

/// Cartesian position of a fractional coordinate: `f₁ℓ₁ + f₂ℓ₂ + f₃ℓ₃`.
pub fn frac_to_cart(lattice: &Mat3, f: &Vec3) -> Result<Vec3> {
    check_lattice(lattice)?;
    Ok(vec_mat(f, lattice))
}

/// Inverse of [`frac_to_cart`].
pub fn cart_to_frac(lattice: &Mat3, p: &Vec3) -> Result<Vec3> {
    let inv = inverse(lattice)?;
    Ok(vec_mat(p, &inv))
}

/// Maps each component into `[0, 1)`.
pub fn wrap_fractional(f: &Vec3) -> Result<Vec3> {
    if f.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteCoordinate(*f));
    }
    let mut out = [0.0; 3];
    for (o, x) in out.iter_mut().zip(f) {
        let mut w = x - x.floor();
        // x - floor(x) rounds up to exactly 1.0 for tiny negative x.
        if w >= 1.0 {
            w = 0.0;
        }
        *o = w;
    }
    Ok(out)
}

/// Integer reciprocal-lattice coefficients (n₁, n₂, n₃).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FrequencyIndex {
    pub n: [i32; 3],
}

impl FrequencyIndex {
    pub fn new(n1: i32, n2: i32, n3: i32) -> Self {
        Self { n: [n1, n2, n3] }
    }

    pub fn is_zero(&self) -> bool {
        self.n == [0, 0, 0]
    }

    pub fn negated(&self) -> Self {
        Self::new(-self.n[0], -self.n[1], -self.n[2])
    }

    /// `2π (n · f)`: the phase of this frequency at fractional position `f`.
    #[inline]
    pub fn phase(&self, f: &Vec3) -> f64 {
        2.0 * PI * (self.n[0] as f64 * f[0] + self.n[1] as f64 * f[1] + self.n[2] as f64 * f[2])
    }
}

/// All integer triples with `max |nᵢ| ≤ kmax`, in lexicographic order.
pub fn enumerate_frequencies(kmax: u32, include_zero: bool) -> Vec<FrequencyIndex> {
    let k = kmax as i32;
    let mut out = Vec::with_capacity(((2 * k + 1) as usize).pow(3));
    for n1 in -k..=k {
        for n2 in -k..=k {
            for n3 in -k..=k {
                let f = FrequencyIndex::new(n1, n2, n3);
                if include_zero || !f.is_zero() {
                    out.push(f);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Orientation {
    RightHanded,
    LeftHanded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReciprocalBasis {
    /// Rows are b₁, b₂, b₃ (Å⁻¹).
    pub b: Mat3,
    /// Cell volume `|ℓ₁·(ℓ₂×ℓ₃)|` (Å³).
    pub volume: f64,
    pub orientation: Orientation,
    pub frequencies: Vec<FrequencyIndex>,
}

impl ReciprocalBasis {
    /// Cartesian wave vector `n₁b₁ + n₂b₂ + n₃b₃`.
    pub fn k_vector(&self, n: &FrequencyIndex) -> Vec3 {
        let nf = [n.n[0] as f64, n.n[1] as f64, n.n[2] as f64];
        vec_mat(&nf, &self.b)
    }

    pub fn k_norms(&self) -> Vec<f64> {
        self.frequencies
            .iter()
            .map(|n| norm(&self.k_vector(n)))
            .collect()
    }
}

/// Reciprocal basis with the default frequency set (zero frequency excluded).
pub fn reciprocal_basis(lattice: &Mat3, kmax: u32) -> Result<ReciprocalBasis> {
    reciprocal_basis_with(lattice, kmax, false)
}

pub fn reciprocal_basis_with(
    lattice: &Mat3,
    kmax: u32,
    include_zero: bool,
) -> Result<ReciprocalBasis> {
    let v = check_lattice(lattice)?;
    let scale = 2.0 * PI / v;
    let [l1, l2, l3] = lattice;
    let b1 = cross(l2, l3).map(|x| x * scale);
    let b2 = cross(l3, l1).map(|x| x * scale);
    let b3 = cross(l1, l2).map(|x| x * scale);
    Ok(ReciprocalBasis {
        b: [b1, b2, b3],
        volume: v.abs(),
        orientation: if v > 0.0 {
            Orientation::RightHanded
        } else {
            Orientation::LeftHanded
        },
        frequencies: enumerate_frequencies(kmax, include_zero),
    })
}

/// Spacing between adjacent lattice planes parallel to each pair of lattice
/// vectors: `dₖ = |V| / |ℓₐ × ℓ_b|`. Any vector `u · L` with `|u_k| ≥ t` has
/// length at least `t · dₖ`.
pub fn plane_spacings(lattice: &Mat3) -> Result<Vec3> {
    let v = check_lattice(lattice)?.abs();
    let [l1, l2, l3] = lattice;
    Ok([
        v / norm(&cross(l2, l3)),
        v / norm(&cross(l3, l1)),
        v / norm(&cross(l1, l2)),
    ])
}

/// A crystal: atomic numbers, fractional coordinates and the lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrystalStructure {
    pub id: String,
    pub atomic_numbers: Vec<u32>,
    pub frac_coords: Vec<Vec3>,
    pub lattice: Mat3,
    #[serde(default)]
    pub labels: BTreeMap<String, Option<f64>>,
}

impl CrystalStructure {
    pub fn new(
        id: impl Into<String>,
        atomic_numbers: Vec<u32>,
        frac_coords: Vec<Vec3>,
        lattice: Mat3,
    ) -> Self {
        Self {
            id: id.into(),
            atomic_numbers,
            frac_coords,
            lattice,
            labels: BTreeMap::new(),
        }
    }

    pub fn num_atoms(&self) -> usize {
        self.atomic_numbers.len()
    }

    /// Copy with every fractional coordinate wrapped into `[0, 1)`.
    pub fn wrapped(&self) -> Result<Self> {
        let frac_coords = self
            .frac_coords
            .iter()
            .map(wrap_fractional)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            frac_coords,
            ..self.clone()
        })
    }

    pub fn cartesian(&self) -> Result<Vec<Vec3>> {
        check_lattice(&self.lattice)?;
        Ok(self
            .frac_coords
            .iter()
            .map(|f| vec_mat(f, &self.lattice))
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViolationKind {
    Empty,
    LengthMismatch,
    LatticeDegenerate,
    InvalidAtomicNumber,
    NonFiniteCoordinate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub field: &'static str,
    pub reason: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} ({}): {}", self.kind, self.field, self.reason)
    }
}

/// Checks every structural invariant. An empty list means the structure is usable.
pub fn validate_structure(s: &CrystalStructure) -> Vec<Violation> {
    let mut out = Vec::new();
    if s.atomic_numbers.is_empty() {
        out.push(Violation {
            kind: ViolationKind::Empty,
            field: "atomic_numbers",
            reason: "structure has no atoms".into(),
        });
    }
    if s.atomic_numbers.len() != s.frac_coords.len() {
        out.push(Violation {
            kind: ViolationKind::LengthMismatch,
            field: "frac_coords",
            reason: format!(
                "{} atomic numbers but {} coordinates",
                s.atomic_numbers.len(),
                s.frac_coords.len()
            ),
        });
    }
    let d = det(&s.lattice);
    if !d.is_finite() || d.abs() <= DEFAULT_MIN_VOLUME {
        out.push(Violation {
            kind: ViolationKind::LatticeDegenerate,
            field: "lattice",
            reason: format!("|det| = {:e} Å³", d.abs()),
        });
    }
    for (i, &z) in s.atomic_numbers.iter().enumerate() {
        if z == 0 {
            out.push(Violation {
                kind: ViolationKind::InvalidAtomicNumber,
                field: "atomic_numbers",
                reason: format!("atom {i} has Z = 0"),
            });
        }
    }
    for (i, f) in s.frac_coords.iter().enumerate() {
        if f.iter().any(|x| !x.is_finite()) {
            out.push(Violation {
                kind: ViolationKind::NonFiniteCoordinate,
                field: "frac_coords",
                reason: format!("atom {i} has coordinate {f:?}"),
            });
        }
    }
    out
}
