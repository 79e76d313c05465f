//! Synthetic crystals with closed-form targets, for smoke tests and
//! ablations when no real dataset is at hand.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{norm, reciprocal_basis, CrystalStructure};
use crate::testing::random_structure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticTarget {
    /// Mean of a fixed per-element value.
    Composition,
    /// Screened reciprocal-space sum over point charges assigned per element.
    LongRange,
}

impl SyntheticTarget {
    pub fn name(self) -> &'static str {
        match self {
            SyntheticTarget::Composition => "composition",
            SyntheticTarget::LongRange => "long_range",
        }
    }

    pub fn evaluate(self, s: &CrystalStructure) -> Result<f64> {
        match self {
            SyntheticTarget::Composition => Ok(s
                .atomic_numbers
                .iter()
                .map(|&z| element_value(z))
                .sum::<f64>()
                / s.num_atoms() as f64),
            SyntheticTarget::LongRange => long_range_energy(s),
        }
    }
}

fn element_value(z: u32) -> f64 {
    (0.7 * z as f64).sin() + 0.02 * z as f64
}

/// Point charge per element; a mix of signs so structure factors do not
/// cancel trivially.
pub fn element_charge(z: u32) -> f64 {
    [1.0, -1.0, 0.5][(z % 3) as usize]
}

/// `(1/n) Σ_k exp(−|k|²/4α²)/|k|² · |Σⱼ qⱼ exp(−2πi n·fⱼ)|²` over the
/// frequencies with `max |nᵢ| ≤ 2`, with `α = 1 Å⁻¹`.
pub fn long_range_energy(s: &CrystalStructure) -> Result<f64> {
    let basis = reciprocal_basis(&s.lattice, 2)?;
    let mut e = 0.0;
    for n in &basis.frequencies {
        let k2 = norm(&basis.k_vector(n)).powi(2);
        let (mut re, mut im) = (0.0, 0.0);
        for (f, &z) in s.frac_coords.iter().zip(&s.atomic_numbers) {
            let phase = n.phase(f);
            re += element_charge(z) * phase.cos();
            im -= element_charge(z) * phase.sin();
        }
        e += (-k2 / 4.0).exp() / k2 * (re * re + im * im);
    }
    Ok(4.0 * PI * e / (basis.volume * s.num_atoms() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_structures: usize,
    pub min_atoms: usize,
    pub max_atoms: usize,
    pub targets: Vec<SyntheticTarget>,
    /// Probability that a label other than the first is dropped.
    pub missing_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_structures: 64,
            min_atoms: 1,
            max_atoms: 6,
            targets: vec![SyntheticTarget::LongRange],
            missing_fraction: 0.0,
            seed: 0,
        }
    }
}

pub fn generate(cfg: &SyntheticConfig) -> Result<Vec<CrystalStructure>> {
    if cfg.min_atoms == 0 || cfg.min_atoms > cfg.max_atoms {
        return Err(Error::Config(format!(
            "atom range {}..={} is empty",
            cfg.min_atoms, cfg.max_atoms
        )));
    }
    if cfg.targets.is_empty() {
        return Err(Error::Config(
            "at least one synthetic target is required".into(),
        ));
    }
    if !(0.0..1.0).contains(&cfg.missing_fraction) {
        return Err(Error::Config(format!(
            "missing_fraction {} not in [0, 1)",
            cfg.missing_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.num_structures)
        .map(|i| {
            let mut s = random_structure(&mut rng, cfg.min_atoms..=cfg.max_atoms);
            s.id = format!("syn-{i:05}");
            for (t, target) in cfg.targets.iter().enumerate() {
                let drop = t > 0 && rng.random::<f64>() < cfg.missing_fraction;
                let y = if drop {
                    None
                } else {
                    Some(target.evaluate(&s)?)
                };
                s.labels.insert(target.name().into(), y);
            }
            Ok(s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::validate_structure;
    use crate::testing::random_rotation;

    #[test]
    fn generated_structures_are_valid_and_labelled() {
        let cfg = SyntheticConfig {
            num_structures: 20,
            targets: vec![SyntheticTarget::LongRange, SyntheticTarget::Composition],
            missing_fraction: 0.5,
            ..Default::default()
        };
        let data = generate(&cfg).unwrap();
        assert_eq!(data.len(), 20);
        assert_eq!(data, generate(&cfg).unwrap());
        for s in &data {
            assert!(validate_structure(s).is_empty());
            assert!(s.labels["long_range"].is_some_and(f64::is_finite));
        }
        assert!(data.iter().any(|s| s.labels["composition"].is_none()));
    }

    #[test]
    fn long_range_target_is_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let s = random_structure(&mut rng, 2..=5);
            let e = long_range_energy(&s).unwrap();
            let r = random_rotation(&mut rng);
            let mut rotated = s.clone();
            for row in rotated.lattice.iter_mut() {
                *row = crate::lattice::vec_mat(row, &crate::lattice::transpose(&r));
            }
            let mut shifted = s.clone();
            for f in shifted.frac_coords.iter_mut() {
                f[0] += 0.37;
                f[2] -= 1.0;
            }
            let mut permuted = s.clone();
            permuted.frac_coords.reverse();
            permuted.atomic_numbers.reverse();
            for other in [rotated, shifted, permuted] {
                assert!((long_range_energy(&other).unwrap() - e).abs() < 1e-9 * e.abs().max(1.0));
            }
        }
    }
}
