//! Radius graphs over periodic images.
//!
//! Each atom gets its own cutoff: the distance to its k-th nearest periodic
//! neighbour. Image shells are expanded until the plane-spacing lower bound
//! proves that no farther shell can contribute, so skewed cells need no fixed
//! supercell size.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{norm, plane_spacings, vec_mat, CrystalStructure, Mat3, Vec3};

/// Minimum separation (Å) between any two periodic images.
pub const MIN_DISTANCE: f64 = 1e-6;

/// Relative slack applied to cutoffs so that symmetry-equivalent neighbours
/// whose distances differ only by rounding are kept together.
const CUTOFF_RTOL: f64 = 1e-9;

const MAX_SHELL: i32 = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodicEdge {
    pub src: usize,
    pub dst: usize,
    /// Translation of the destination atom, in lattice vectors.
    pub image: [i32; 3],
    /// `p_dst + n·L − p_src` (Å).
    pub vector: Vec3,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodicGraph {
    pub num_nodes: usize,
    pub edges: Vec<PeriodicEdge>,
    pub per_node_radius: Vec<f64>,
}

impl PeriodicGraph {
    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn degree(&self, node: usize) -> usize {
        self.edges.iter().filter(|e| e.src == node).count()
    }
}

/// Visits every integer triple with `max |nᵢ| == shell`.
fn for_each_in_shell(shell: i32, mut f: impl FnMut([i32; 3])) {
    for a in -shell..=shell {
        for b in -shell..=shell {
            for c in -shell..=shell {
                if a.abs().max(b.abs()).max(c.abs()) == shell {
                    f([a, b, c]);
                }
            }
        }
    }
}

struct Geometry {
    lattice: Mat3,
    frac: Vec<Vec3>,
    min_spacing: f64,
}

impl Geometry {
    fn new(s: &CrystalStructure) -> Result<Self> {
        let spacings = plane_spacings(&s.lattice)?;
        let wrapped = s.wrapped()?;
        if wrapped.num_atoms() == 0 || wrapped.frac_coords.len() != wrapped.num_atoms() {
            return Err(Error::Config(format!(
                "structure `{}` has {} atoms and {} coordinates",
                s.id,
                s.num_atoms(),
                s.frac_coords.len()
            )));
        }
        Ok(Self {
            lattice: s.lattice,
            frac: wrapped.frac_coords,
            min_spacing: spacings.into_iter().fold(f64::INFINITY, f64::min),
        })
    }

    fn displacement(&self, i: usize, j: usize, n: [i32; 3]) -> Vec3 {
        let (fi, fj) = (&self.frac[i], &self.frac[j]);
        let u = [
            fj[0] - fi[0] + n[0] as f64,
            fj[1] - fi[1] + n[1] as f64,
            fj[2] - fi[2] + n[2] as f64,
        ];
        vec_mat(&u, &self.lattice)
    }

    /// Lower bound on the length of any displacement whose image lies in a
    /// shell strictly beyond `shell`. Fractional differences are in (−1, 1),
    /// so some component of `u` exceeds `shell` in magnitude.
    fn beyond_shell_bound(&self, shell: i32) -> f64 {
        shell as f64 * self.min_spacing
    }
}

/// Distance from each atom to its k-th nearest periodic neighbour (own
/// zero-translation image excluded, other images of itself included).
pub fn knn_radius(s: &CrystalStructure, k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let geo = Geometry::new(s)?;
    let n = geo.frac.len();
    let mut radii = Vec::with_capacity(n);
    for i in 0..n {
        let mut cand: Vec<f64> = Vec::new();
        let mut shell = 0;
        loop {
            let mut overlap = None;
            for_each_in_shell(shell, |img| {
                for j in 0..n {
                    if shell == 0 && j == i {
                        continue;
                    }
                    let d = norm(&geo.displacement(i, j, img));
                    if d < MIN_DISTANCE {
                        overlap.get_or_insert((j, d));
                    }
                    cand.push(d);
                }
            });
            if let Some((j, d)) = overlap {
                return Err(Error::AtomOverlap {
                    a: i,
                    b: j,
                    distance: d,
                });
            }
            if cand.len() >= k {
                let (_, kth, _) = cand.select_nth_unstable_by(k - 1, f64::total_cmp);
                let kth = *kth;
                // Keep only the k smallest; farther candidates can never matter.
                cand.truncate(k);
                if kth <= geo.beyond_shell_bound(shell) {
                    radii.push(kth);
                    break;
                }
            }
            shell += 1;
            if shell > MAX_SHELL {
                return Err(Error::Config(format!(
                    "neighbour search did not converge for `{}`",
                    s.id
                )));
            }
        }
    }
    Ok(radii)
}

fn edge_order(a: &PeriodicEdge, b: &PeriodicEdge) -> Ordering {
    a.src
        .cmp(&b.src)
        .then(a.distance.total_cmp(&b.distance))
        .then(a.dst.cmp(&b.dst))
        .then(a.image.cmp(&b.image))
}

/// Builds the directed radius graph. A pair `(i, j, n)` is connected when its
/// distance is within the (scaled) radius of either endpoint, and both
/// directions are emitted, so every edge has a reverse edge with the negated
/// image and identical distance.
pub fn build_graph(s: &CrystalStructure, k: usize, radius_scale: f64) -> Result<PeriodicGraph> {
    if !(radius_scale >= 1.0) || !radius_scale.is_finite() {
        return Err(Error::Config(format!(
            "radius_scale must be a finite real ≥ 1, got {radius_scale}"
        )));
    }
    let radii = knn_radius(s, k)?;
    let geo = Geometry::new(s)?;
    let n = geo.frac.len();
    let cutoff: Vec<f64> = radii
        .iter()
        .map(|r| r * radius_scale * (1.0 + CUTOFF_RTOL))
        .collect();
    let max_cut = cutoff.iter().copied().fold(0.0, f64::max);

    let mut edges = Vec::new();
    let mut shell = 0;
    loop {
        for_each_in_shell(shell, |img| {
            for i in 0..n {
                for j in 0..n {
                    if shell == 0 && i == j {
                        continue;
                    }
                    let vector = geo.displacement(i, j, img);
                    let distance = norm(&vector);
                    if distance <= cutoff[i] || distance <= cutoff[j] {
                        edges.push(PeriodicEdge {
                            src: i,
                            dst: j,
                            image: img,
                            vector,
                            distance,
                        });
                    }
                }
            }
        });
        if geo.beyond_shell_bound(shell) > max_cut {
            break;
        }
        shell += 1;
    }
    if let Some(e) = edges.iter().find(|e| e.distance < MIN_DISTANCE) {
        return Err(Error::AtomOverlap {
            a: e.src,
            b: e.dst,
            distance: e.distance,
        });
    }
    edges.sort_by(edge_order);
    Ok(PeriodicGraph {
        num_nodes: n,
        edges,
        per_node_radius: radii,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{mat_mul, transpose};
    use crate::testing::{random_rotation, random_structure};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn cubic(a: f64, frac: Vec<Vec3>) -> CrystalStructure {
        let z = vec![1; frac.len()];
        CrystalStructure::new(
            "cubic",
            z,
            frac,
            [[a, 0.0, 0.0], [0.0, a, 0.0], [0.0, 0.0, a]],
        )
    }

    /// All image distances within a fixed ±shells box, sorted.
    fn brute_force_distances(s: &CrystalStructure, i: usize, shells: i32) -> Vec<f64> {
        let w = s.wrapped().unwrap();
        let mut d = Vec::new();
        for a in -shells..=shells {
            for b in -shells..=shells {
                for c in -shells..=shells {
                    for j in 0..w.num_atoms() {
                        if (a, b, c) == (0, 0, 0) && j == i {
                            continue;
                        }
                        let fi = w.frac_coords[i];
                        let fj = w.frac_coords[j];
                        let u = [
                            fj[0] - fi[0] + a as f64,
                            fj[1] - fi[1] + b as f64,
                            fj[2] - fi[2] + c as f64,
                        ];
                        d.push(norm(&vec_mat(&u, &w.lattice)));
                    }
                }
            }
        }
        d.sort_by(f64::total_cmp);
        d
    }

    #[test]
    fn simple_cubic_k16() {
        let s = cubic(1.0, vec![[0.0; 3]]);
        let r = knn_radius(&s, 16).unwrap();
        assert!((r[0] - 2f64.sqrt()).abs() < 1e-12);
        assert!((brute_force_distances(&s, 0, 3)[15] - r[0]).abs() < 1e-12);
    }

    #[test]
    fn symmetric_pair_k1() {
        let s = cubic(2.0, vec![[0.0; 3], [0.5, 0.0, 0.0]]);
        let r = knn_radius(&s, 1).unwrap();
        assert_eq!(r.len(), 2);
        for x in r {
            assert!((x - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn knn_matches_brute_force_on_skewed_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..30 {
            let s = random_structure(&mut rng, 1..=5);
            for k in [1, 5, 16] {
                let r = knn_radius(&s, k).unwrap();
                for (i, ri) in r.iter().enumerate() {
                    let bf = brute_force_distances(&s, i, 6);
                    assert!(
                        (bf[k - 1] - ri).abs() < 1e-10,
                        "k={k} {} vs {ri}",
                        bf[k - 1]
                    );
                }
            }
        }
    }

    #[test]
    fn knn_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let s = random_structure(&mut rng, 1..=4);
            let rot = random_rotation(&mut rng);
            let mut t = s.clone();
            t.lattice = mat_mul(&s.lattice, &transpose(&rot));
            let a = knn_radius(&s, 16).unwrap();
            let b = knn_radius(&t, 16).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn one_atom_cubic_six_edges() {
        let s = cubic(1.0, vec![[0.0; 3]]);
        let g = build_graph(&s, 6, 1.0).unwrap();
        assert_eq!(g.num_nodes, 1);
        assert_eq!(g.edges.len(), 6);
        let mut images: Vec<_> = g.edges.iter().map(|e| e.image).collect();
        images.sort();
        assert_eq!(
            images,
            vec![
                [-1, 0, 0],
                [0, -1, 0],
                [0, 0, -1],
                [0, 0, 1],
                [0, 1, 0],
                [1, 0, 0]
            ]
        );
        assert!(g.edges.iter().all(|e| (e.distance - 1.0).abs() < 1e-15));
    }

    #[test]
    fn edge_distances_recomputed_from_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let s = random_structure(&mut rng, 1..=6);
            let w = s.wrapped().unwrap();
            let cart = w.cartesian().unwrap();
            let g = build_graph(&s, 16, 1.0).unwrap();
            assert_eq!(g.num_nodes, s.num_atoms());
            for e in &g.edges {
                let shift = vec_mat(
                    &[e.image[0] as f64, e.image[1] as f64, e.image[2] as f64],
                    &w.lattice,
                );
                let v = [
                    cart[e.dst][0] + shift[0] - cart[e.src][0],
                    cart[e.dst][1] + shift[1] - cart[e.src][1],
                    cart[e.dst][2] + shift[2] - cart[e.src][2],
                ];
                assert!((norm(&v) - e.distance).abs() < 1e-10);
            }
            for i in 0..g.num_nodes {
                assert!(g.degree(i) >= 16);
                // Every neighbour within the node's own radius is present.
                let within = brute_force_distances(&s, i, 6)
                    .into_iter()
                    .filter(|d| *d <= g.per_node_radius[i] * (1.0 - 1e-12))
                    .count();
                let own = g
                    .edges
                    .iter()
                    .filter(|e| e.src == i && e.distance <= g.per_node_radius[i] * (1.0 - 1e-12))
                    .count();
                assert_eq!(within, own);
            }
            assert!(g
                .edges
                .windows(2)
                .all(|p| edge_order(&p[0], &p[1]) != Ordering::Greater));
        }
    }

    #[test]
    fn reverse_edges_exist() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let s = random_structure(&mut rng, 1..=5);
            let g = build_graph(&s, 8, 1.2).unwrap();
            let mut map = HashMap::new();
            for e in &g.edges {
                map.insert((e.src, e.dst, e.image), e.distance);
            }
            for e in &g.edges {
                let rev = (e.dst, e.src, [-e.image[0], -e.image[1], -e.image[2]]);
                assert_eq!(map.get(&rev).copied(), Some(e.distance));
            }
        }
    }

    #[test]
    fn permutation_maps_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let s = random_structure(&mut rng, 4..=4);
        let perm = [2usize, 0, 3, 1];
        let mut t = s.clone();
        for (new, &old) in perm.iter().enumerate() {
            t.atomic_numbers[new] = s.atomic_numbers[old];
            t.frac_coords[new] = s.frac_coords[old];
        }
        let g = build_graph(&s, 16, 1.0).unwrap();
        let h = build_graph(&t, 16, 1.0).unwrap();
        let inv: Vec<usize> = (0..4)
            .map(|o| perm.iter().position(|&p| p == o).unwrap())
            .collect();
        let mut a: Vec<_> = g
            .edges
            .iter()
            .map(|e| (inv[e.src], inv[e.dst], e.image, e.distance.to_bits()))
            .collect();
        let mut b: Vec<_> = h
            .edges
            .iter()
            .map(|e| (e.src, e.dst, e.image, e.distance.to_bits()))
            .collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn wrapping_preserves_distance_multiset() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let s = random_structure(&mut rng, 3..=3);
        let mut t = s.clone();
        t.frac_coords[0][0] += 2.0;
        t.frac_coords[1][2] -= 1.0;
        let key = |g: &PeriodicGraph| {
            let mut v: Vec<_> = g
                .edges
                .iter()
                .map(|e| (e.src, e.dst, (e.distance * 1e8).round() as i64))
                .collect();
            v.sort();
            v
        };
        assert_eq!(
            key(&build_graph(&s, 16, 1.0).unwrap()),
            key(&build_graph(&t, 16, 1.0).unwrap())
        );
    }

    #[test]
    fn overlapping_atoms_rejected() {
        let s = cubic(2.0, vec![[0.1, 0.1, 0.1], [0.1, 0.1, 0.1]]);
        assert!(matches!(
            build_graph(&s, 4, 1.0),
            Err(Error::AtomOverlap { .. })
        ));
        let s = cubic(2.0, vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert!(matches!(knn_radius(&s, 4), Err(Error::AtomOverlap { .. })));
    }

    #[test]
    fn rejects_bad_arguments() {
        let s = cubic(1.0, vec![[0.0; 3]]);
        assert!(knn_radius(&s, 0).is_err());
        assert!(build_graph(&s, 4, 0.5).is_err());
    }
}
