use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn vec_tensor(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

#[test]
fn forward_examples() {
    let mut tape = Tape::new();
    let a = tape.leaf(&Tensor::vector(vec![1.0, 2.0]));
    let b = tape.leaf(&Tensor::vector(vec![3.0, 4.0]));
    let s = tape.add(a, b).unwrap();
    assert_eq!(tape.value(s), &[4.0, 6.0]);

    let eye = vec_tensor(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let m = vec_tensor(&[3, 3], &[1.5, -2.0, 3.0, 0.25, 5.0, -6.0, 7.0, 8.0, 9.5]);
    let (ei, mi) = (tape.leaf(&eye), tape.leaf(&m));
    let p = tape.matmul(ei, mi).unwrap();
    assert_eq!(tape.value(p), m.data());

    let r = tape.leaf(&Tensor::vector(vec![-1.0, 0.0, 2.0]));
    let r = tape.relu(r);
    assert_eq!(tape.value(r), &[0.0, 0.0, 2.0]);
}

#[test]
fn shape_mismatch_reports_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.zeros(&[2, 3]);
    let b = tape.zeros(&[2, 2]);
    let err = tape.add(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    let err = tape.matmul(a, b).unwrap_err();
    assert!(matches!(err, AutodiffError::ShapeMismatch { .. }));
}

#[test]
fn trailing_broadcast_only() {
    let mut tape = Tape::new();
    let a = tape.constant(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let b = tape.constant(&[3], vec![10.0, 20.0, 30.0]).unwrap();
    let c = tape.add(a, b).unwrap();
    assert_eq!(tape.value(c), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    let d = tape.sub(b, a).unwrap();
    assert_eq!(tape.value(d), &[9.0, 18.0, 27.0, 6.0, 15.0, 24.0]);
    let lead = tape.constant(&[2], vec![1.0, 1.0]).unwrap();
    assert!(tape.add(a, lead).is_err());
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.param(&Tensor::vector(vec![1.0, 2.0, 3.0]));
    let sq = tape.square(x);
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);

    let mut tape = Tape::new();
    let w = tape.param(&vec_tensor(&[1, 2], &[1.0, 2.0]));
    let x = tape.leaf(&vec_tensor(&[2, 1], &[3.0, 4.0]));
    let y = tape.matmul(w, x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &[3.0, 4.0]);
    assert!(tape.grad(x).is_none());
}

#[test]
fn silu_gradient_at_zero() {
    // d/dx x*sigmoid(x) = s + x s (1-s); at 0 that is sigmoid(0) = 0.5
    let oracle = {
        let s = 0.5_f64;
        s + 0.0 * s * (1.0 - s)
    };
    let mut tape = Tape::new();
    let x = tape.param(&Tensor::scalar(0.0));
    let y = tape.silu(x);
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[oracle]);
    assert_eq!(oracle, 0.5);
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::new();
    let x = tape.param(&Tensor::vector(vec![1.0, 2.0]));
    let y = tape.square(x);
    assert!(matches!(tape.backward(y), Err(AutodiffError::NonScalarLoss(_))));
}

#[test]
fn backward_without_tracked_inputs_leaves_zero() {
    let mut tape = Tape::new();
    let p = tape.param(&Tensor::vector(vec![1.0, 2.0]));
    let c = tape.constant(&[1], vec![3.0]).unwrap();
    let loss = tape.square(c);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad_or_zeros(p), vec![0.0, 0.0]);
}

#[test]
fn repeated_backward_accumulates_until_zeroed() {
    let mut tape = Tape::new();
    let x = tape.param(&Tensor::vector(vec![1.0, -2.0]));
    let sq = tape.square(x);
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[4.0, -8.0]);
    tape.zero_grad();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0]);
}

#[test]
fn each_op_is_visited_once_with_shared_inputs() {
    // y = x*x + x, dy/dx = 2x + 1
    let mut tape = Tape::new();
    let x = tape.param(&Tensor::scalar(3.0));
    let xx = tape.mul(x, x).unwrap();
    let y = tape.add(xx, x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[7.0]);
}

#[test]
fn non_finite_values_are_flagged() {
    let mut tape = Tape::new();
    tape.set_nan_check(true);
    let x = tape.leaf(&Tensor::vector(vec![-1.0, 4.0]));
    let y = tape.sqrt(x);
    assert!(tape.value(y)[0].is_nan());
    assert_eq!(tape.first_non_finite(), Some((y.index(), "sqrt")));
}

#[test]
fn grad_check_constant_function_is_exact() {
    let x = Tensor::vector(vec![0.3, -1.2, 2.0]);
    let err = grad_check(|tape, _x| tape.constant(&[1], vec![4.2]), &x, 1e-6).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn grad_check_sum_of_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[10], &mut rng);
    let err = grad_check(
        |tape, x| {
            let s = tape.square(x);
            Ok(tape.sum(s))
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-7, "{err}");
}

#[test]
fn grad_check_rejects_non_scalar() {
    let x = Tensor::vector(vec![1.0, 2.0]);
    assert!(grad_check(|tape, x| Ok(tape.square(x)), &x, 1e-6).is_err());
}

/// Sum of `out * weights` for fixed pseudo-random weights, so every output
/// component contributes a distinct sensitivity.
fn weighted_sum(tape: &mut Tape, out: Var) -> Result<Var, AutodiffError> {
    let n = tape.value(out).len();
    let shape = tape.shape(out).to_vec();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.17 * ((i * 7919) % 13) as f64).collect();
    let wv = tape.constant(&shape, w)?;
    let p = tape.mul(out, wv)?;
    Ok(tape.sum(p))
}

type OpCase = (&'static str, Vec<Vec<usize>>, fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>);

fn op_cases() -> Vec<OpCase> {
    vec![
        ("add", vec![vec![3, 4], vec![3, 4]], |t, v| t.add(v[0], v[1])),
        ("add_bcast", vec![vec![3, 4], vec![4]], |t, v| t.add(v[0], v[1])),
        ("sub_bcast_lhs", vec![vec![4], vec![2, 4]], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![vec![5], vec![5]], |t, v| t.mul(v[0], v[1])),
        ("mul_bcast", vec![vec![2, 3, 2], vec![3, 2]], |t, v| t.mul(v[0], v[1])),
        ("scale", vec![vec![6]], |t, v| Ok(t.scale(v[0], -1.7))),
        ("add_scalar", vec![vec![6]], |t, v| Ok(t.add_scalar(v[0], 0.4))),
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| t.matmul(v[0], v[1])),
        ("affine", vec![vec![3, 4], vec![4, 2], vec![2]], |t, v| t.affine(v[0], v[1], v[2])),
        ("transpose", vec![vec![3, 2]], |t, v| t.transpose(v[0])),
        ("sum", vec![vec![2, 3]], |t, v| Ok(t.sum(v[0]))),
        ("mean", vec![vec![2, 3]], |t, v| Ok(t.mean(v[0]))),
        ("square", vec![vec![5]], |t, v| Ok(t.square(v[0]))),
        ("sqrt", vec![vec![5]], |t, v| {
            let s = t.square(v[0]);
            let s = t.add_scalar(s, 0.5);
            Ok(t.sqrt(s))
        }),
        ("exp", vec![vec![5]], |t, v| Ok(t.exp(v[0]))),
        ("sin", vec![vec![5]], |t, v| Ok(t.sin(v[0]))),
        ("cos", vec![vec![5]], |t, v| Ok(t.cos(v[0]))),
        ("tanh", vec![vec![5]], |t, v| Ok(t.tanh(v[0]))),
        ("sigmoid", vec![vec![5]], |t, v| Ok(t.unary(Unary::Sigmoid, v[0]))),
        ("relu", vec![vec![5]], |t, v| Ok(t.relu(v[0]))),
        ("silu", vec![vec![5]], |t, v| Ok(t.silu(v[0]))),
        ("gelu", vec![vec![5]], |t, v| Ok(t.gelu(v[0]))),
        ("neg", vec![vec![5]], |t, v| Ok(t.neg(v[0]))),
        ("concat0", vec![vec![2, 3], vec![1, 3]], |t, v| t.concat(&[v[0], v[1]], 0)),
        ("concat1", vec![vec![2, 3], vec![2, 1], vec![2, 2]], |t, v| t.concat(&[v[0], v[1], v[2]], 1)),
        ("slice", vec![vec![3, 4, 2]], |t, v| t.slice(v[0], 1, 1, 3)),
        ("reshape", vec![vec![3, 4]], |t, v| t.reshape(v[0], &[2, 6])),
        ("gather", vec![vec![4, 3]], |t, v| t.gather_rows(v[0], &[2, 0, 2, 3])),
        ("scatter", vec![vec![5, 2]], |t, v| t.scatter_add_rows(v[0], &[1, 0, 1, 3, 1], 4)),
        ("conv", vec![vec![2, 7, 3], vec![4, 3, 3], vec![4]], |t, v| t.causal_conv1d(v[0], v[1], v[2], 2)),
    ]
}

#[test]
fn every_primitive_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for (name, shapes, op) in op_cases() {
        for _ in 0..5 {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| random(s, &mut rng)).collect();
            let err = grad_check_many(
                |tape, vars| {
                    let out = op(tape, vars)?;
                    weighted_sum(tape, out)
                },
                &inputs,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-6, "{name}: relative error {err}");
        }
    }
}

#[test]
fn replay_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[4, 3], &mut rng);
    let w = random(&[3, 5], &mut rng);
    let run = || {
        let mut tape = Tape::new();
        let (xv, wv) = (tape.param(&x), tape.param(&w));
        let h = tape.matmul(xv, wv).unwrap();
        let h = tape.silu(h);
        let h = tape.sin(h);
        let l = tape.mean(h);
        tape.backward(l).unwrap();
        (tape.grad_or_zeros(xv), tape.grad_or_zeros(wv))
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.1, b.1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backward_is_linear(xs in prop::collection::vec(-2.0f64..2.0, 6), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let x = Tensor::new(&[2, 3], xs).unwrap();
        let grad_of = |ca: f64, cb: f64| {
            let mut tape = Tape::new();
            let v = tape.param(&x);
            let f = tape.sin(v);
            let f = tape.sum(f);
            let g = tape.square(v);
            let g = tape.mean(g);
            let fa = tape.scale(f, ca);
            let gb = tape.scale(g, cb);
            let l = tape.add(fa, gb).unwrap();
            tape.backward(l).unwrap();
            tape.grad_or_zeros(v)
        };
        let combined = grad_of(a, b);
        let (gf, gg) = (grad_of(1.0, 0.0), grad_of(0.0, 1.0));
        for i in 0..6 {
            prop_assert!((combined[i] - (a * gf[i] + b * gg[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn elementwise_binary_forward_is_exact(xs in prop::collection::vec(-1e3f64..1e3, 8), ys in prop::collection::vec(-1e3f64..1e3, 8)) {
        let mut tape = Tape::new();
        let a = tape.constant(&[8], xs.clone()).unwrap();
        let b = tape.constant(&[8], ys.clone()).unwrap();
        let (s, d, p) = (tape.add(a, b).unwrap(), tape.sub(a, b).unwrap(), tape.mul(a, b).unwrap());
        for i in 0..8 {
            prop_assert_eq!(tape.value(s)[i], xs[i] + ys[i]);
            prop_assert_eq!(tape.value(d)[i], xs[i] - ys[i]);
            prop_assert_eq!(tape.value(p)[i], xs[i] * ys[i]);
        }
    }
}
