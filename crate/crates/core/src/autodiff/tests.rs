use std::sync::Arc;

use ndarray::array;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{grad_check, GradCheckOptions};
use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

/// Contracts `y` with a fixed random weight so every output entry matters.
fn probe(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, c) = tape.shape(y);
    let w = tape.constant(rand_tensor(&mut rng, r, c));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn check<F>(store: &mut ParamStore, f: F, max_entries: Option<usize>) -> f64
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    let opts = GradCheckOptions {
        max_entries_per_param: max_entries,
        ..Default::default()
    };
    let report = grad_check(store, None, f, &opts).unwrap();
    report.max_rel_error
}

#[test]
fn softplus_at_zero() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros((1, 1)));
    let y = t.softplus(x);
    assert!((t.scalar(y) - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn segment_sum_definition() {
    let mut t = Tape::new();
    let x = t.constant(array![[1.0], [2.0], [3.0]]);
    let y = t.segment_sum(x, Arc::from(vec![0, 0, 1]), 2).unwrap();
    assert_eq!(t.value(y), &array![[3.0], [3.0]]);
    let m = t.segment_mean(x, Arc::from(vec![0, 0, 1]), 3).unwrap();
    assert_eq!(t.value(m), &array![[1.5], [3.0], [0.0]]);
    assert!(matches!(
        t.segment_sum(x, Arc::from(vec![0, 0, 5]), 2),
        Err(Error::Index { .. })
    ));
}

#[test]
fn softmax_reference_values() {
    let mut t = Tape::new();
    let x = t.constant(array![[2.0, 1.0, 0.0]]);
    let y = t.softmax(x).unwrap();
    // exp(2)/(e²+e+1), exp(1)/(…), 1/(…)
    let z = 2f64.exp() + 1f64.exp() + 1.0;
    let expect = [2f64.exp() / z, 1f64.exp() / z, 1.0 / z];
    for (got, want) in t.value(y).iter().zip(expect) {
        assert!((got - want).abs() < 1e-15);
    }
    for (got, want) in t.value(y).iter().zip([0.66524, 0.24473, 0.09003]) {
        assert!((got - want).abs() < 1e-5);
    }
}

#[test]
fn masked_softmax_zeroes_inactive() {
    let mut t = Tape::new();
    let x = t.constant(array![[2.0, 1.0, 0.0]]);
    let y = t.softmax_masked(x, Some(&array![[1.0, 0.0, 1.0]])).unwrap();
    let v = t.value(y);
    assert_eq!(v[[0, 1]], 0.0);
    assert!((v[[0, 0]] + v[[0, 2]] - 1.0).abs() < 1e-15);
    assert!(t.softmax_masked(x, Some(&array![[0.0, 0.0, 0.0]])).is_err());
}

#[test]
fn linear_gradient_is_input() {
    let mut store = ParamStore::new();
    let w = store.add("w", array![[0.5, -1.0, 2.0]], true).unwrap();
    let mut t = Tape::new();
    let x = t.constant(array![[3.0, 4.0, -5.0]]);
    let wv = t.param(&store, w);
    let p = t.mul(wv, x).unwrap();
    let loss = t.sum(p);
    t.backward(loss).unwrap();
    assert_eq!(t.param_grad(w).unwrap(), &array![[3.0, 4.0, -5.0]]);
}

#[test]
fn relu_piecewise_gradient() {
    let mut t = Tape::new();
    let x = t.input(array![[-1.0, 2.0]]);
    let y = t.relu(x);
    let loss = t.sum(y);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap(), &array![[0.0, 1.0]]);
}

#[test]
fn backward_twice_doubles() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut t = Tape::new();
    let x = t.input(rand_tensor(&mut rng, 4, 3));
    let w = t.input(rand_tensor(&mut rng, 3, 2));
    let h = t.matmul(x, w).unwrap();
    let h = t.silu(h);
    let loss = t.sum(h);
    t.backward(loss).unwrap();
    let once = t.grad(w).unwrap().clone();
    t.backward(loss).unwrap();
    assert_eq!(t.grad(w).unwrap(), &(&once * 2.0));
    t.zero_grad();
    assert!(t.grad(w).is_none());
}

#[test]
fn non_scalar_backward_rejected() {
    let mut t = Tape::new();
    let x = t.input(Tensor::zeros((2, 2)));
    assert!(matches!(t.backward(x), Err(Error::Shape { .. })));
}

#[test]
fn shape_errors() {
    let mut t = Tape::new();
    let a = t.input(Tensor::zeros((2, 3)));
    let b = t.input(Tensor::zeros((2, 3)));
    assert!(t.matmul(a, b).is_err());
    let c = t.input(Tensor::zeros((3, 2)));
    assert!(t.add(a, c).is_err());
    let bias = t.input(Tensor::zeros((1, 2)));
    assert!(t.add_row(a, bias).is_err());
    assert!(t.concat(&[a, c]).is_err());
    assert!(t.gather_rows(a, Arc::from(vec![2])).is_err());
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let w1 = store.add("w1", rand_tensor(&mut rng, 5, 7), true).unwrap();
    let b1 = store.add("b1", rand_tensor(&mut rng, 1, 7), true).unwrap();
    let w2 = store.add("w2", rand_tensor(&mut rng, 7, 3), true).unwrap();
    let b2 = store.add("b2", rand_tensor(&mut rng, 1, 3), true).unwrap();
    let x = rand_tensor(&mut rng, 6, 5);
    let err = check(
        &mut store,
        |s, t| {
            let x = t.constant(x.clone());
            let (w1, b1, w2, b2) = (
                t.param(s, w1),
                t.param(s, b1),
                t.param(s, w2),
                t.param(s, b2),
            );
            let h = t.linear(x, w1, Some(b1))?;
            let h = t.softplus(h);
            let y = t.linear(h, w2, Some(b2))?;
            probe(t, y, 1)
        },
        None,
    );
    assert!(err < 1e-6, "{err}");
}

#[test]
fn identity_has_zero_error() {
    let mut store = ParamStore::new();
    store.add("x", array![[0.0]], true).unwrap();
    let id = store.id("x").unwrap();
    let err = check(&mut store, |s, t| Ok(t.param(s, id)), None);
    assert_eq!(err, 0.0);
}

#[test]
fn stochastic_function_detected() {
    let mut store = ParamStore::new();
    let id = store.add("x", array![[0.3]], true).unwrap();
    let mut calls = 0.0;
    let res = grad_check(
        &mut store,
        None,
        |s, t| {
            calls += 1.0;
            let x = t.param(s, id);
            Ok(t.add_scalar(x, calls))
        },
        &GradCheckOptions::default(),
    );
    assert!(matches!(res, Err(Error::NondeterministicFunction { .. })));
}

/// Every differentiable op, each checked on several random shapes.
#[test]
fn every_op_passes_grad_check() {
    for (i, &(r, c)) in [(1, 1), (3, 4), (7, 2), (16, 9), (64, 256)]
        .iter()
        .enumerate()
    {
        let cap = (r * c > 1000).then_some(150);
        for m in crate::gradsuite::op_checks(r, c, 11 + i as u64, cap).unwrap() {
            assert!(m.passed(), "{} on {r}x{c}: {:e}", m.module, m.max_rel_error);
        }
    }
}

#[test]
fn block_matmul_matches_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let bd = BlockDiag::new(
        7,
        6,
        vec![
            Block {
                row: 0,
                col: 0,
                matrix: rand_tensor(&mut rng, 4, 2),
            },
            Block {
                row: 4,
                col: 2,
                matrix: rand_tensor(&mut rng, 3, 4),
            },
        ],
    )
    .unwrap();
    let x = rand_tensor(&mut rng, 6, 3);
    let dense = bd.to_dense();
    let diff = &bd.apply(&x) - &dense.dot(&x);
    assert!(diff.iter().all(|d| d.abs() < 1e-14));
    let g = rand_tensor(&mut rng, 7, 3);
    let diff = &bd.apply_transpose(&g) - &dense.t().dot(&g);
    assert!(diff.iter().all(|d| d.abs() < 1e-14));
}

#[test]
fn batch_norm_train_statistics() {
    let mut t = Tape::new();
    let x = t.input(array![[1.0, 10.0], [3.0, 10.0]]);
    let g = t.constant(array![[1.0, 1.0]]);
    let b = t.constant(array![[0.0, 0.0]]);
    let (y, stats) = t.batch_norm(x, g, b, BatchNormMode::Train).unwrap();
    let stats = stats.unwrap();
    assert_eq!(stats.mean, array![[2.0, 10.0]]);
    assert_eq!(stats.var, array![[2.0, 0.0]]);
    let y = t.value(y);
    assert!((y[[0, 0]] + 1.0).abs() < 1e-5 && (y[[1, 0]] - 1.0).abs() < 1e-5);
    assert_eq!(y[[0, 1]], 0.0);
}
