use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regnet::autodiff::ParamStore;
use regnet::autodiff::Tensor;
use regnet::embed::AtomFeatureTable;
use regnet::lattice::{reciprocal_basis, transpose, vec_mat, CrystalStructure};
use regnet::model::{init_params, BatchedInput, Model, ModelConfig, PreparedStructure};
use regnet::moe::MoeConfig;
use regnet::testing::{random_rotation, random_structure};

fn predict(model: &Model, store: &ParamStore, s: &CrystalStructure) -> Tensor {
    let p = PreparedStructure::new(s, &model.cfg, &AtomFeatureTable::one_hot()).unwrap();
    let b = BatchedInput::new(&[&p], &model.cfg.edge).unwrap();
    model.predict(store, &b).unwrap()
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b).iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn model(seed: u64, moe: bool) -> (Model, ParamStore) {
    let cfg = ModelConfig {
        num_blocks: 2,
        hidden: 8,
        k_neighbors: 5,
        moe: moe.then(|| MoeConfig {
            num_experts: 4,
            top_k: 2,
            ..Default::default()
        }),
        tasks: if moe {
            vec!["a".into(), "b".into()]
        } else {
            vec!["a".into()]
        },
        seed,
        ..Default::default()
    };
    let (m, mut store) = init_params(&cfg).unwrap();
    m.scale_filters(&mut store, 1e4);
    (m, store)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn prediction_is_invariant(seed in 0u64..1000, moe: bool, shift in prop::array::uniform3(-3.0f64..3.0)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, store) = model(seed, moe);
        let s = random_structure(&mut rng, 1..=6);
        let base = predict(&m, &store, &s);

        let r = random_rotation(&mut rng);
        let mut moved = s.clone();
        for row in moved.lattice.iter_mut() {
            *row = vec_mat(row, &transpose(&r));
        }
        for f in moved.frac_coords.iter_mut() {
            for c in 0..3 {
                f[c] += shift[c];
            }
        }
        moved.frac_coords.rotate_left(1);
        moved.atomic_numbers.rotate_left(1);
        prop_assert!(max_diff(&predict(&m, &store, &moved), &base) < 1e-8);
    }

    #[test]
    fn reciprocal_basis_scales_inversely(seed in 0u64..1000, a in 0.5f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_structure(&mut rng, 1..=2);
        let b = reciprocal_basis(&s.lattice, 1).unwrap();
        let scaled = s.lattice.map(|row| row.map(|x| a * x));
        let bs = reciprocal_basis(&scaled, 1).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                prop_assert!((bs.b[i][j] * a - b.b[i][j]).abs() < 1e-9 * b.b[i][j].abs().max(1.0));
            }
        }
        prop_assert!((bs.volume - a.powi(3) * b.volume).abs() < 1e-9 * bs.volume);
    }
}
