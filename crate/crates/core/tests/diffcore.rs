use hit_core::diffcore::{Tape, Tensor};
use hit_core::gradcheck::{check, check_with};
use hit_core::HitError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

const TOL: f64 = 1e-4;

#[test]
fn matmul_identity_and_orthogonal() {
    let tape = Tape::new();
    let i2 = tape.constant(Tensor::eye(2));
    let m = tape.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
    assert_eq!(i2.matmul(m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = tape.constant(Tensor::from_rows(&[[1.0, 0.0]]).unwrap());
    let b = tape.constant(Tensor::from_rows(&[[0.0], [5.0]]).unwrap());
    let c = a.matmul(b).unwrap();
    assert_eq!(c.shape(), vec![1, 1]);
    assert_eq!(c.item(), 0.0);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match a.matmul(b) {
        Err(HitError::Dimension(msg)) => {
            assert!(msg.contains("[2, 3]"), "{msg}");
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let r = check(&[random(&[3, 4], 1), random(&[4, 2], 2)], |_, v| {
        v[0].matmul(v[1])
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn batch_matmul_gradient() {
    let r = check(&[random(&[2, 3, 4], 3), random(&[2, 4, 5], 4)], |_, v| {
        Ok(v[0].batch_matmul(v[1])?.square())
    })
    .unwrap();
    assert!(r.passes(TOL), "{r:?}");
}

#[test]
fn softmax_uniform_and_overflow_safe() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[[0.0, 0.0, 0.0], [1000.0, 0.0, 0.0]]).unwrap());
    let y = x.softmax_rows().unwrap();
    let y = y.value();
    for v in &y.data()[..3] {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    assert!((y.data()[3] - 1.0).abs() < 1e-12);
    assert!(y.data()[4].abs() < 1e-12);
    assert!(y.data()[5].abs() < 1e-12);
}

#[test]
fn softmax_rejects_nan() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.0, f64::NAN]));
    assert!(matches!(x.softmax_rows(), Err(HitError::Numeric(_))));
}

#[test]
fn softmax_rows_sum_to_one_and_jacobian() {
    let x = random(&[2, 5], 5);
    let tape = Tape::new();
    let y = tape.constant(x.clone()).softmax_rows().unwrap();
    for row in y.value().data().chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    // weighting by a fixed vector exercises the full Jacobian, not just the
    // (always zero) gradient of the row sums
    let w = random(&[2, 5], 6);
    let r = check(&[x], move |t, v| {
        v[0].softmax_rows()?.mul(t.constant(w.clone()))
    })
    .unwrap();
    assert!(r.passes(TOL), "{r:?}");
}

#[test]
fn logsumexp_closed_forms() {
    let tape = Tape::new();
    let single = tape.constant(Tensor::vector(vec![2.5])).logsumexp().unwrap();
    assert_eq!(single.item(), 2.5);
    let eq = tape.constant(Tensor::vector(vec![-0.7; 6])).logsumexp().unwrap();
    assert!((eq.item() - (-0.7 + 6f64.ln())).abs() < 1e-14);
    let empty = tape.constant(Tensor::zeros(&[3, 0]));
    assert!(matches!(empty.logsumexp(), Err(HitError::Dimension(_))));
}

#[test]
fn logsumexp_gradient_is_softmax() {
    let x = random(&[3, 4], 7);
    let tape = Tape::new();
    let v = tape.param(x.clone());
    let out = v.logsumexp().unwrap().sum_all();
    let g = tape.backward(out).get(v).unwrap().clone();
    let sm = tape.constant(x.clone()).softmax_rows().unwrap();
    for (a, b) in g.data().iter().zip(sm.value().data()) {
        assert!((a - b).abs() < 1e-14);
    }
    let r = check(&[x], |_, v| v[0].logsumexp()).unwrap();
    assert!(r.passes(TOL), "{r:?}");
}

#[test]
fn sigmoid_values_and_gradient() {
    let tape = Tape::new();
    let y = tape.constant(Tensor::vector(vec![0.0, 100.0, -100.0])).sigmoid();
    let y = y.value();
    assert_eq!(y.data()[0], 0.5);
    assert!((y.data()[1] - 1.0).abs() < 1e-15);
    assert!(y.data()[2] < 1e-40 && y.data()[2] > 0.0);
    let r = check(&[random(&[6], 8)], |_, v| Ok(v[0].sigmoid())).unwrap();
    assert!(r.passes(TOL), "{r:?}");
}

#[test]
fn stop_gradient_semantics() {
    let tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    let frozen = x.stop_gradient();
    assert_eq!(frozen.value().data(), &[1.0, 2.0]);
    let loss = frozen.mul(x).unwrap().sum_all();
    let g = tape.backward(loss);
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 2.0]);

    let tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    let loss = x.stop_gradient().sum_all();
    let g = tape.backward(loss);
    assert!(g.get(x).is_none());
    assert_eq!(g.get_or_zeros(x).data(), &[0.0, 0.0]);
}

#[test]
fn relu_definition() {
    let tape = Tape::new();
    let y = tape.constant(Tensor::vector(vec![-3.0, 3.0])).relu();
    assert_eq!(y.value().data(), &[0.0, 3.0]);
}

#[test]
fn reduce_max_routes_tie_to_lowest_index() {
    let tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![2.0, 7.0, 7.0]));
    let m = x.reduce_max(0).unwrap();
    assert_eq!(m.item(), 7.0);
    let g = tape.backward(m);
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    // directional differences away from the tie: raising index 1 moves the
    // max one-for-one, lowering index 2 leaves it unchanged
    let eval = |v: Vec<f64>| {
        let t = Tape::new();
        t.constant(Tensor::vector(v)).reduce_max(0).unwrap().item()
    };
    let h = 1e-5;
    assert!(((eval(vec![2.0, 7.0 + h, 7.0]) - 7.0) / h - 1.0).abs() < 1e-6);
    assert_eq!(eval(vec![2.0, 7.0, 7.0 - h]), 7.0);
}

#[test]
fn broadcast_add_reduces_gradient_over_broadcast_axes() {
    let tape = Tape::new();
    let a = tape.param(Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap());
    let b = tape.param(Tensor::new(&[1, 3], vec![10.0, 20.0, 30.0]).unwrap());
    let c = a.add(b).unwrap();
    assert_eq!(c.shape(), vec![2, 3]);
    let g = tape.backward(c.sum_all());
    assert_eq!(g.get(a).unwrap().data(), &[3.0, 3.0]);
    assert_eq!(g.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    let r = check(&[random(&[2, 1], 9), random(&[1, 3], 10)], |_, v| {
        Ok(v[0].add(v[1])?.square())
    })
    .unwrap();
    assert!(r.passes(TOL), "{r:?}");
    let bad = tape.constant(Tensor::zeros(&[2, 3]));
    let bad2 = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(bad.add(bad2), Err(HitError::Dimension(_))));
}

#[test]
fn elementwise_suite_gradients() {
    let pos = random(&[3, 4], 11).map(|v| v.abs() + 0.5);
    let x = random(&[3, 4], 12);
    let y = random(&[3, 4], 13);
    let checks = [
        ("sub", check(&[x.clone(), y.clone()], |_, v| Ok(v[0].sub(v[1])?.square()))),
        ("mul", check(&[x.clone(), y.clone()], |_, v| v[0].mul(v[1]))),
        ("div", check(&[x.clone(), pos.clone()], |_, v| v[0].div(v[1]))),
        ("square", check(&[x.clone()], |_, v| Ok(v[0].square()))),
        ("exp", check(&[x.clone()], |_, v| Ok(v[0].exp()))),
        ("log", check(&[pos.clone()], |_, v| Ok(v[0].log()))),
        ("softplus", check(&[x.clone()], |_, v| Ok(v[0].softplus()))),
        ("sin", check(&[x.clone()], |_, v| Ok(v[0].sin()))),
        ("cos", check(&[x.clone()], |_, v| Ok(v[0].cos()))),
        ("sqrt", check(&[pos.clone()], |_, v| Ok(v[0].sqrt()))),
        ("scale_shift_neg", check(&[x.clone()], |_, v| Ok(v[0].scale(3.0).shift(1.0).neg().square()))),
        ("reduce_sum", check(&[x.clone()], |_, v| Ok(v[0].reduce_sum(0)?.square()))),
        ("reduce_mean", check(&[x.clone()], |_, v| Ok(v[0].reduce_mean(1)?.square()))),
        ("transpose", check(&[x.clone(), y.clone()], |_, v| v[0].transpose()?.matmul(v[1]))),
        ("broadcast", check(&[random(&[4], 14)], |_, v| Ok(v[0].broadcast_to(&[3, 4])?.square()))),
        ("slice", check(&[x.clone()], |_, v| Ok(v[0].slice(1, 1..3)?.square()))),
        ("concat", check(&[x.clone(), y.clone()], |t, v| Ok(t.concat(&[v[0], v[1].square()], 1)?.exp()))),
        ("reshape", check(&[x.clone()], |_, v| Ok(v[0].reshape(&[2, 6])?.logsumexp()?.square()))),
        ("normalize", check(&[x.clone()], |t, v| {
            v[0].normalize_last()?.mul(t.constant(random(&[3, 4], 15)))
        })),
        ("rotation", check(&[random(&[2, 3], 16)], |t, v| {
            v[0].rotation_zyx()?.mul(t.constant(random(&[2, 3, 3], 17)))
        })),
        ("pool_mean", check(&[x.clone()], |_, v| {
            Ok(v[0].pool_mean(&[vec![2, 0], vec![], vec![1]])?.square())
        })),
    ];
    for (name, r) in checks {
        let r = r.unwrap();
        assert!(r.passes(TOL), "{name}: {r:?}");
    }
    // relu and max away from kinks/ties
    let r = check_with(&[x.clone()], |_, v| Ok(v[0].relu().square()), |_, i| x.data()[i].abs() < 1e-3).unwrap();
    assert!(r.passes(TOL), "relu: {r:?}");
    let r = check(&[x.clone()], |_, v| Ok(v[0].reduce_max(1)?.square())).unwrap();
    assert!(r.passes(TOL), "reduce_max: {r:?}");
    let r = check(&[x], |_, v| Ok(v[0].reduce_min(0)?.square())).unwrap();
    assert!(r.passes(TOL), "reduce_min: {r:?}");
}

#[test]
fn straight_through_matches_literal_composition() {
    let logits = random(&[3, 4], 18);
    let w = random(&[3, 4], 19);
    let fused = {
        let tape = Tape::new();
        let x = tape.param(logits.clone());
        let a = x.softmax_rows().unwrap();
        let st = a.straight_through_onehot().unwrap();
        for row in st.value().data().chunks(4) {
            assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(row.iter().filter(|&&v| v == 0.0).count(), 3);
        }
        let loss = st.mul(tape.constant(w.clone())).unwrap().sum_all();
        tape.backward(loss).get(x).unwrap().clone()
    };
    let literal = {
        let tape = Tape::new();
        let x = tape.param(logits.clone());
        let a = x.softmax_rows().unwrap();
        let onehot = a.straight_through_onehot().unwrap().value().clone();
        let hard = tape.constant(onehot);
        let st = a.add(hard.sub(a).unwrap().stop_gradient()).unwrap();
        let loss = st.mul(tape.constant(w.clone())).unwrap().sum_all();
        tape.backward(loss).get(x).unwrap().clone()
    };
    for (a, b) in fused.data().iter().zip(literal.data()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn diamond_graph_accumulates_both_branches() {
    // y = x*x + exp(x) with x feeding two consumers vs. a duplicated leaf
    let x0 = random(&[5], 20);
    let shared = {
        let tape = Tape::new();
        let x = tape.param(x0.clone());
        let y = x.mul(x).unwrap().add(x.exp()).unwrap().sum_all();
        tape.backward(y).get(x).unwrap().clone()
    };
    let duplicated = {
        let tape = Tape::new();
        let (a, b, c) = (tape.param(x0.clone()), tape.param(x0.clone()), tape.param(x0.clone()));
        let y = a.mul(b).unwrap().add(c.exp()).unwrap().sum_all();
        let g = tape.backward(y);
        let mut sum = g.get(a).unwrap().clone();
        for (s, (gb, gc)) in sum
            .data_mut()
            .iter_mut()
            .zip(g.get(b).unwrap().data().iter().zip(g.get(c).unwrap().data()))
        {
            *s += gb + gc;
        }
        sum
    };
    for (a, b) in shared.data().iter().zip(duplicated.data()) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn backward_populates_every_reachable_param_with_matching_shape() {
    let tape = Tape::new();
    let a = tape.param(random(&[3, 2], 21));
    let b = tape.param(random(&[2], 22));
    let unused = tape.param(random(&[4], 23));
    let loss = a.add(b).unwrap().sigmoid().sum_all();
    let g = tape.backward(loss);
    assert_eq!(g.get(a).unwrap().shape(), &[3, 2]);
    assert_eq!(g.get(b).unwrap().shape(), &[2]);
    assert!(g.get(unused).is_none());
}

proptest! {
    #[test]
    fn softmax_rows_stochastic(row in prop::collection::vec(-700.0f64..700.0, 1..12)) {
        let tape = Tape::new();
        let y = tape.constant(Tensor::vector(row)).softmax_rows().unwrap();
        let y = y.value();
        prop_assert!((y.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(y.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn logsumexp_bounds(row in prop::collection::vec(-50.0f64..50.0, 1..40)) {
        let h = row.len() as f64;
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let tape = Tape::new();
        let l = tape.constant(Tensor::vector(row)).logsumexp().unwrap().item();
        prop_assert!(l >= m);
        prop_assert!(l <= m + h.ln() + 1e-12);
    }
}
