use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::params::{ParamGroup, ParameterStore};
use crate::Error;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (p, k, q) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; p * q];
    for i in 0..p {
        for j in 0..q {
            let mut s = 0.0;
            for l in 0..k {
                s += a.at(i, l) * b.at(l, j);
            }
            out[i * q + j] = s;
        }
    }
    out
}

/// Neumaier-compensated sum, standing in for extended-precision summation.
fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

#[test]
fn tensor_rejects_bad_construction() {
    assert!(matches!(
        Tensor::new(vec![2, 2], vec![1.0; 3]),
        Err(Error::Shape { .. })
    ));
    assert!(matches!(
        Tensor::new(vec![1, 2], vec![1.0, f64::NAN]),
        Err(Error::NonFinite(_))
    ));
    assert!(matches!(
        Tensor::new(vec![1], vec![f64::INFINITY]),
        Err(Error::NonFinite(_))
    ));
}

#[test]
fn matmul_identity_and_small_case() {
    let mut g = Graph::new();
    let i2 = g.constant(Tensor::identity(2));
    let b = g.constant(Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap());
    let c = g.matmul(i2, b).unwrap();
    assert_eq!(g.value(c).data(), &[5.0, 6.0, 7.0, 8.0]);

    let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&mut rng, 7, 5);
    let b = random(&mut rng, 5, 3);
    let expected = triple_loop(&a, &b);
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a), g.constant(b));
    let c = g.matmul(va, vb).unwrap();
    for (x, y) in g.value(c).data().iter().zip(&expected) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn softmax_uniform_and_shift_invariant() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::filled(&[2, 5], 0.3));
    let y = g.softmax_rows(x).unwrap();
    for &v in g.value(y).data() {
        assert!((v - 0.2).abs() < 1e-15);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let base = random(&mut rng, 3, 6);
    let shifted = Tensor::matrix(3, 6, base.data().iter().map(|v| v + 17.25).collect()).unwrap();
    let (a, b) = (g.constant(base), g.constant(shifted));
    let (sa, sb) = (g.softmax_rows(a).unwrap(), g.softmax_rows(b).unwrap());
    assert!(g.value(sa).max_abs_diff(g.value(sb)) < 1e-12);
}

#[test]
fn softmax_matches_compensated_oracle() {
    let xs = [1.0, 2.0, 3.0];
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(1, 3, xs.to_vec()).unwrap());
    let y = g.softmax_rows(x).unwrap();
    for (i, &xi) in xs.iter().enumerate() {
        let oracle = 1.0 / compensated_sum(xs.iter().map(|&xj| (xj - xi).exp()));
        assert!((g.value(y).data()[i] - oracle).abs() < 1e-12);
    }
}

#[test]
fn causal_softmax_masks_future_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let x = g.constant(random(&mut rng, 4, 4));
    let y = g.causal_softmax_rows(x).unwrap();
    let t = g.value(y);
    for i in 0..4 {
        for j in 0..4 {
            if j > i {
                assert_eq!(t.at(i, j), 0.0);
            }
        }
        assert!((t.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_limits() {
    // certainty
    let (l, v) = (3, 6);
    let targets = vec![1, 4, 2];
    let mut logits = vec![0.0; l * v];
    for (i, &t) in targets.iter().enumerate() {
        logits[i * v + t] = 50.0;
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(l, v, logits).unwrap());
    let loss = g.cross_entropy(x, &targets, &[true; 3]).unwrap();
    assert!(g.scalar(loss) < 1e-8);

    // uniform over 60
    let x = g.constant(Tensor::zeros(&[2, 60]));
    let loss = g.cross_entropy(x, &[3, 59], &[true, true]).unwrap();
    assert!((g.scalar(loss) - 60f64.ln()).abs() < 1e-12);
    assert!((g.scalar(loss) - 4.0943).abs() < 1e-4);
}

#[test]
fn cross_entropy_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let logits = random(&mut rng, 4, 7);
    let targets = [0usize, 6, 3, 2];
    let mask = [true, false, true, true];

    let mut total = 0.0;
    let mut n = 0.0;
    for i in 0..4 {
        if !mask[i] {
            continue;
        }
        let z: f64 = (0..7).map(|j| logits.at(i, j).exp()).sum();
        total += -(logits.at(i, targets[i]).exp() / z).ln();
        n += 1.0;
    }
    let oracle = total / n;

    let mut g = Graph::new();
    let x = g.constant(logits);
    let loss = g.cross_entropy(x, &targets, &mask).unwrap();
    assert!((g.scalar(loss) - oracle).abs() < 1e-12);
}

#[test]
fn cross_entropy_gradient_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let logits = random(&mut rng, 3, 5);
    let targets = [4usize, 0, 2];
    let mask = [true, false, true];
    let mut g = Graph::new();
    let x = g.input(logits.clone());
    let loss = g.cross_entropy(x, &targets, &mask).unwrap();
    let grad = g.input_grad(loss, x).unwrap();
    for i in 0..3 {
        let z: f64 = (0..5).map(|j| logits.at(i, j).exp()).sum();
        for j in 0..5 {
            let expected = if mask[i] {
                (logits.at(i, j).exp() / z - if j == targets[i] { 1.0 } else { 0.0 }) / 2.0
            } else {
                0.0
            };
            assert!((grad[i * 5 + j] - expected).abs() < 1e-14);
        }
    }
}

#[test]
fn cross_entropy_all_masked_is_degenerate() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 4]));
    assert!(matches!(
        g.cross_entropy(x, &[0, 1], &[false, false]),
        Err(Error::DegenerateBatch(_))
    ));
}

#[test]
fn backward_twice_is_an_error() {
    let mut store = ParameterStore::new();
    let id = store
        .insert("w", Tensor::filled(&[2, 2], 0.5), ParamGroup::Connector)
        .unwrap();
    store.set_trainable(id, true);
    let mut g = Graph::with_store(&store);
    let w = g.param(id);
    let s = g.sum(w).unwrap();
    g.backward(s, 1.0).unwrap();
    assert!(matches!(g.backward(s, 1.0), Err(Error::Graph(_))));
}

#[test]
fn frozen_parameters_get_no_gradient() {
    let mut store = ParameterStore::new();
    let a = store
        .insert("a", Tensor::filled(&[2], 1.0), ParamGroup::Connector)
        .unwrap();
    let b = store
        .insert("b", Tensor::filled(&[2], 2.0), ParamGroup::DecoderBase)
        .unwrap();
    store.set_trainable(a, true);
    let mut g = Graph::with_store(&store);
    let (va, vb) = (g.param(a), g.param(b));
    let m = g.mul(va, vb).unwrap();
    let s = g.sum(m).unwrap();
    let grads = g.backward(s, 1.0).unwrap();
    assert_eq!(grads.get(a).unwrap(), &[2.0, 2.0]);
    assert!(grads.get(b).is_none());
}

fn single_param_store(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
) -> (ParameterStore, crate::params::ParamId) {
    let mut store = ParameterStore::new();
    let id = store
        .insert("x", random(rng, rows, cols), ParamGroup::Connector)
        .unwrap();
    store.set_trainable(id, true);
    (store, id)
}

#[test]
fn grad_check_linear_function() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut store, id) = single_param_store(&mut rng, 3, 4);
    let report = grad_check(
        &mut store,
        |g| {
            let x = g.param(id);
            let y = g.scale(x, 3.0)?;
            g.sum(y)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error() < 1e-10, "{}", report.max_rel_error());
}

#[test]
fn grad_check_softmax_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut store, id) = single_param_store(&mut rng, 3, 4);
    let report = grad_check(
        &mut store,
        |g| {
            let x = g.param(id);
            g.cross_entropy(x, &[0, 3, 1], &[true, true, true])
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error() < 1e-6, "{}", report.max_rel_error());
}

#[test]
fn grad_check_rejects_eps_out_of_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut store, id) = single_param_store(&mut rng, 2, 2);
    let opts = GradCheckOptions {
        eps: 1e-2,
        ..Default::default()
    };
    assert!(grad_check(
        &mut store,
        |g| {
            let x = g.param(id);
            g.sum(x)
        },
        &opts
    )
    .is_err());
}

/// Central-difference check of a unary op on a random 3×4 input, weighted by
/// a fixed random projection so every output entry matters.
fn check_unary(seed: u64, op: impl Fn(&mut Graph<'_>, Var) -> crate::Result<Var>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut store, id) = single_param_store(&mut rng, 3, 4);
    let probe = random(&mut rng, 3, 4);
    grad_check(
        &mut store,
        |g| {
            let x = g.param(id);
            let y = op(g, x)?;
            let w = g.constant(probe.clone());
            let z = g.mul(y, w)?;
            g.sum(z)
        },
        &GradCheckOptions::default(),
    )
    .unwrap()
    .max_rel_error()
}

#[test]
fn closed_form_gradients_pass_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let other = random(&mut rng, 4, 4);
    let gamma = random(&mut rng, 1, 4);
    let beta = random(&mut rng, 1, 4);
    let table = random(&mut rng, 6, 4);

    let errs = [
        (
            "matmul",
            check_unary(10, |g, x| {
                let b = g.constant(other.clone());
                g.matmul(x, b)
            }),
        ),
        (
            "matmul_bt",
            check_unary(11, |g, x| {
                let b = g.constant(other.clone());
                g.matmul_bt(x, b)
            }),
        ),
        ("softmax", check_unary(12, |g, x| g.softmax_rows(x))),
        (
            "layernorm",
            check_unary(13, |g, x| {
                let (ga, be) = (g.constant(gamma.clone()), g.constant(beta.clone()));
                g.layer_norm(x, ga, be)
            }),
        ),
        ("sigmoid", check_unary(14, |g, x| g.sigmoid(x))),
        ("gelu", check_unary(15, |g, x| g.gelu(x))),
        (
            "slices",
            check_unary(16, |g, x| {
                let a = g.slice_cols(x, 0, 2)?;
                let b = g.slice_cols(x, 2, 2)?;
                let c = g.concat_cols(&[b, a])?;
                let top = g.slice_rows(c, 0, 1)?;
                let rest = g.slice_rows(c, 1, 2)?;
                g.concat_rows(&[rest, top])
            }),
        ),
    ];
    for (name, err) in errs {
        assert!(err < 1e-6, "{name}: {err}");
    }

    // gather: gradient flows into the table rows
    let mut store = ParameterStore::new();
    let id = store
        .insert("table", table, ParamGroup::DecoderBase)
        .unwrap();
    store.set_trainable(id, true);
    let probe = random(&mut rng, 3, 4);
    let err = grad_check(
        &mut store,
        |g| {
            let t = g.param(id);
            let rows = g.gather(t, &[5, 1, 5])?;
            let w = g.constant(probe.clone());
            let z = g.mul(rows, w)?;
            g.sum(z)
        },
        &GradCheckOptions::default(),
    )
    .unwrap()
    .max_rel_error();
    assert!(err < 1e-6, "gather: {err}");

    // layer norm affine parameters
    let mut store = ParameterStore::new();
    let x = random(&mut rng, 3, 4);
    let gid = store
        .insert(
            "gamma",
            gamma.reshape(vec![4]).unwrap(),
            ParamGroup::EncoderBase,
        )
        .unwrap();
    let bid = store
        .insert(
            "beta",
            beta.reshape(vec![4]).unwrap(),
            ParamGroup::EncoderBase,
        )
        .unwrap();
    store.set_trainable(gid, true);
    store.set_trainable(bid, true);
    let probe = random(&mut rng, 3, 4);
    let err = grad_check(
        &mut store,
        |g| {
            let xv = g.constant(x.clone());
            let (ga, be) = (g.param(gid), g.param(bid));
            let y = g.layer_norm(xv, ga, be)?;
            let w = g.constant(probe.clone());
            let z = g.mul(y, w)?;
            g.sum(z)
        },
        &GradCheckOptions::default(),
    )
    .unwrap()
    .max_rel_error();
    assert!(err < 1e-6, "layernorm affine: {err}");
}

#[test]
fn gradient_accumulation_is_additive() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (mut store, id) = single_param_store(&mut rng, 2, 3);
    let w1 = random(&mut rng, 2, 3);
    let w2 = random(&mut rng, 2, 3);

    let run = |store: &ParameterStore, w: &Tensor| {
        let mut g = Graph::with_store(store);
        let x = g.param(id);
        let s = g.sigmoid(x).unwrap();
        let c = g.constant(w.clone());
        let m = g.mul(s, c).unwrap();
        let l = g.sum(m).unwrap();
        g.backward(l, 1.0).unwrap()
    };
    let g1 = run(&store, &w1);
    let g2 = run(&store, &w2);
    store.accumulate(&g1);
    store.accumulate(&g2);
    let acc = store.get(id).grad.clone().unwrap();
    let expected: Vec<f64> = g1
        .get(id)
        .unwrap()
        .iter()
        .zip(g2.get(id).unwrap())
        .map(|(a, b)| a + b)
        .collect();
    assert_eq!(acc, expected);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(3, 4, vals).unwrap());
        let y = g.softmax_rows(x).unwrap();
        for i in 0..3 {
            let s: f64 = g.value(y).row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
