//! Random geometry used by the test suites and the synthetic data generator.

use std::ops::RangeInclusive;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::lattice::{det, norm, vec_mat, CrystalStructure, Mat3, Vec3};

/// Elements drawn for random structures.
pub const ELEMENTS: [u32; 8] = [3, 8, 11, 12, 14, 17, 26, 29];

/// Uniformly distributed proper rotation (via a random unit quaternion).
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Mat3 {
    let mut q: [f64; 4] = [0.0; 4];
    loop {
        for x in q.iter_mut() {
            *x = StandardNormal.sample(rng);
        }
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            q.iter_mut().for_each(|x| *x /= n);
            break;
        }
    }
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - z * w),
            2.0 * (x * z + y * w),
        ],
        [
            2.0 * (x * y + z * w),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - x * w),
        ],
        [
            2.0 * (x * z - y * w),
            2.0 * (y * z + x * w),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// A moderately skewed, well-conditioned cell with edges of 2.5–5.5 Å.
pub fn random_lattice<R: Rng + ?Sized>(rng: &mut R) -> Mat3 {
    loop {
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            let a = rng.random_range(2.5..5.5);
            for (j, x) in row.iter_mut().enumerate() {
                *x = if i == j {
                    a
                } else {
                    rng.random_range(-0.3..0.3) * a
                };
            }
        }
        if det(&m) > 5.0 {
            return m;
        }
    }
}

fn min_image_distance(lattice: &Mat3, a: &Vec3, b: &Vec3) -> f64 {
    let mut best = f64::INFINITY;
    for i in -1..=1 {
        for j in -1..=1 {
            for k in -1..=1 {
                let mut u = [0.0; 3];
                for c in 0..3 {
                    let d = b[c] - a[c];
                    u[c] = d - d.round() + [i, j, k][c] as f64;
                }
                best = best.min(norm(&vec_mat(&u, lattice)));
            }
        }
    }
    best
}

/// Random structure with atoms at least 1.0 Å apart (including images).
pub fn random_structure<R: Rng + ?Sized>(
    rng: &mut R,
    atoms: RangeInclusive<usize>,
) -> CrystalStructure {
    'outer: loop {
        let lattice = random_lattice(rng);
        let n = rng.random_range(atoms.clone());
        let mut frac: Vec<Vec3> = Vec::with_capacity(n);
        for _ in 0..n {
            let mut placed = false;
            for _ in 0..200 {
                let f = [rng.random(), rng.random(), rng.random()];
                if frac
                    .iter()
                    .all(|g| min_image_distance(&lattice, g, &f) > 1.0)
                {
                    frac.push(f);
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'outer;
            }
        }
        let z = (0..n)
            .map(|_| ELEMENTS[rng.random_range(0..ELEMENTS.len())])
            .collect();
        let id = format!("rand-{:08x}", rng.random::<u32>());
        return CrystalStructure::new(id, z, frac, lattice);
    }
}
