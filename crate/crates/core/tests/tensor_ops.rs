use cmr_core::gradcheck::{self, FD_TOLERANCE};
use cmr_core::tensor::{Tape, Tensor, TensorError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..6))
}

/// Runs `build` over 20 seeded random shapes and asserts the gradient check.
fn check_20<F>(name: &str, build: F)
where
    F: Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<dyn Fn(&mut Tape, &[cmr_core::tensor::Var]) -> cmr_core::tensor::Result<cmr_core::tensor::Var>>),
{
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (inputs, f) = build(&mut rng);
        let report = gradcheck::check(&inputs, 64, |t, v| f(t, v)).unwrap();
        assert!(
            report.passed(FD_TOLERANCE),
            "{name} seed {seed}: rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }
}

// A fixed random weighting turns any tensor output into a scalar loss with
// non-degenerate gradients.
fn weighted_sum(tape: &mut Tape, x: cmr_core::tensor::Var, seed: u64) -> cmr_core::tensor::Result<cmr_core::tensor::Var> {
    let shape = tape.value(x).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let n: usize = shape.iter().product();
    let w = tape.constant(Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap());
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

#[test]
fn matmul_gradients() {
    check_20("matmul", |rng| {
        let (m, k, n) = dims(rng);
        let inputs = vec![random(rng, m, k), random(rng, k, n)];
        (inputs, Box::new(|t, v| { let c = t.matmul(v[0], v[1])?; weighted_sum(t, c, 1) }))
    });
    check_20("matmul_bt", |rng| {
        let (m, k, n) = dims(rng);
        let inputs = vec![random(rng, m, k), random(rng, n, k)];
        (inputs, Box::new(|t, v| { let c = t.matmul_bt(v[0], v[1])?; weighted_sum(t, c, 2) }))
    });
    check_20("matmul_at", |rng| {
        let (m, k, n) = dims(rng);
        let inputs = vec![random(rng, k, m), random(rng, k, n)];
        (inputs, Box::new(|t, v| { let c = t.matmul_at(v[0], v[1])?; weighted_sum(t, c, 3) }))
    });
}

#[test]
fn elementwise_gradients() {
    check_20("elu_plus_one", |rng| {
        let (m, n, _) = dims(rng);
        (vec![random(rng, m, n)], Box::new(|t, v| { let y = t.elu_plus_one(v[0]); weighted_sum(t, y, 4) }))
    });
    check_20("gelu", |rng| {
        let (m, n, _) = dims(rng);
        (vec![random(rng, m, n)], Box::new(|t, v| { let y = t.gelu(v[0]); weighted_sum(t, y, 5) }))
    });
    check_20("sigmoid", |rng| {
        let (m, n, _) = dims(rng);
        (vec![random(rng, m, n)], Box::new(|t, v| { let y = t.sigmoid(v[0]); weighted_sum(t, y, 6) }))
    });
    check_20("add_sub_mul_scale", |rng| {
        let (m, n, _) = dims(rng);
        (vec![random(rng, m, n), random(rng, m, n)], Box::new(|t, v| {
            let a = t.add(v[0], v[1])?;
            let b = t.sub(a, v[1])?;
            let c = t.mul(b, v[1])?;
            let d = t.scale(c, -0.7);
            let e = t.add_scalar(d, 0.3);
            weighted_sum(t, e, 7)
        }))
    });
}

#[test]
fn structural_gradients() {
    check_20("row_softmax", |rng| {
        let (m, n, _) = dims(rng);
        (vec![random(rng, m, n)], Box::new(|t, v| { let y = t.row_softmax(v[0], false)?; weighted_sum(t, y, 8) }))
    });
    check_20("row_softmax_causal", |rng| {
        let (m, _, _) = dims(rng);
        (vec![random(rng, m, m)], Box::new(|t, v| { let y = t.row_softmax(v[0], true)?; weighted_sum(t, y, 9) }))
    });
    check_20("layer_norm", |rng| {
        let (m, _, _) = dims(rng);
        let n = rng.gen_range(2..7);
        (vec![random(rng, m, n), random(rng, 1, n), random(rng, 1, n)], Box::new(|t, v| {
            let y = t.layer_norm(v[0], v[1], v[2])?;
            weighted_sum(t, y, 10)
        }))
    });
    check_20("slice_concat_add_row", |rng| {
        let (m, _, _) = dims(rng);
        let n = rng.gen_range(2..7);
        (vec![random(rng, m, n), random(rng, 1, n)], Box::new(move |t, v| {
            let left = t.slice_cols(v[0], 0, 1)?;
            let right = t.slice_cols(v[0], 1, n - 1)?;
            let back = t.concat_cols(&[right, left])?;
            let y = t.add_row(back, v[1])?;
            weighted_sum(t, y, 11)
        }))
    });
    check_20("row_divide_col_sum", |rng| {
        let (m, n, _) = dims(rng);
        (vec![random(rng, m, n), random(rng, m, 1), random(rng, m, n)], Box::new(|t, v| {
            let pos = t.elu_plus_one(v[1]);
            let den = t.add_scalar(pos, 0.5);
            let y = t.row_divide(v[0], den)?;
            let s = t.col_sum(v[2])?;
            let ws = weighted_sum(t, s, 3)?;
            let wy = weighted_sum(t, y, 12)?;
            t.add(ws, wy)
        }))
    });
    check_20("gate", |rng| {
        let (m, n, _) = dims(rng);
        (vec![random(rng, m, n), random(rng, m, n), random(rng, 1, 1)], Box::new(|t, v| {
            let y = t.gate(v[0], v[1], v[2])?;
            weighted_sum(t, y, 13)
        }))
    });
    check_20("embedding_cross_entropy", |rng| {
        let vocab = rng.gen_range(2..7);
        let d = rng.gen_range(1..5);
        let len = rng.gen_range(1..6);
        let ids: Vec<usize> = (0..len).map(|_| rng.gen_range(0..vocab)).collect();
        let targets: Vec<usize> = (0..len).map(|_| rng.gen_range(0..vocab)).collect();
        let mut mask: Vec<bool> = (0..len).map(|_| rng.gen_bool(0.7)).collect();
        mask[0] = true;
        (vec![random(rng, vocab, d), random(rng, d, vocab)], Box::new(move |t, v| {
            let e = t.embedding(v[0], &ids)?;
            let logits = t.matmul(e, v[1])?;
            t.cross_entropy(logits, &targets, &mask)
        }))
    });
}

#[test]
fn backward_linear_map_and_elu_slope_at_zero() {
    let mut tape = Tape::new();
    let w = tape.param(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]));
    let x = tape.constant(Tensor::from_rows(&[vec![0.5], vec![-1.0], vec![2.0]]));
    let y = tape.matmul(w, x).unwrap();
    let loss = tape.sum(y);
    tape.backward(loss).unwrap();
    let g = tape.grad(w).unwrap();
    assert_eq!(g.data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);

    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[2, 3]));
    let y = tape.elu_plus_one(x);
    let loss = tape.sum(y);
    tape.backward(loss).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
}

#[test]
fn backward_error_paths() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[2, 2]));
    assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
    let c = tape.constant(Tensor::scalar(1.0));
    assert!(matches!(tape.backward(c), Err(TensorError::Untracked)));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(TensorError::BackwardTwice)));
    tape.reset_grads();
    tape.backward(s).unwrap();
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::new();
    let v = 7;
    let logits = tape.constant(Tensor::zeros(&[3, v]));
    let l = tape.cross_entropy(logits, &[0, 3, 6], &[true, true, true]).unwrap();
    assert!((tape.value(l).item() - (v as f64).ln()).abs() < 1e-14);

    let logits = tape.constant(Tensor::from_rows(&[vec![200.0, 0.0, 0.0]]));
    let l = tape.cross_entropy(logits, &[0], &[true]).unwrap();
    assert!(tape.value(l).item() < 1e-80);

    let logits = tape.constant(Tensor::from_rows(&[vec![0.0, 3f64.ln()]]));
    let l = tape.cross_entropy(logits, &[1], &[true]).unwrap();
    assert!((tape.value(l).item() + 0.75f64.ln()).abs() < 1e-15);

    assert!(matches!(tape.cross_entropy(logits, &[1], &[false]), Err(TensorError::EmptyTargets)));
    assert!(matches!(
        tape.cross_entropy(logits, &[2], &[true]),
        Err(TensorError::TargetOutOfRange { id: 2, vocab: 2 })
    ));
}

#[test]
fn identity_associativity_is_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let a = random(&mut rng, 4, 5);
    let b = random(&mut rng, 5, 3);
    let i = Tensor::identity(5);
    let left = a.matmul(&i).unwrap().matmul(&b).unwrap();
    let right = a.matmul(&i.matmul(&b).unwrap()).unwrap();
    assert_eq!(left.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
               right.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 1..8), 1..5),
        shift in -100.0f64..100.0,
    ) {
        let width = rows[0].len();
        let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| { r.resize(width, 0.0); r }).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&rows));
        let y = tape.row_softmax(x, false).unwrap();
        let shifted: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect();
        let xs = tape.constant(Tensor::from_rows(&shifted));
        let ys = tape.row_softmax(xs, false).unwrap();
        for r in 0..rows.len() {
            let s: f64 = tape.value(y).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(tape.value(y).row(r).iter().all(|&v| v >= 0.0));
        }
        prop_assert!(tape.value(y).max_abs_diff(tape.value(ys)) < 1e-12);
    }

    #[test]
    fn elu_plus_one_is_strictly_positive(x in -700.0f64..700.0) {
        prop_assert!(cmr_core::tensor::elu_plus_one(x) > 0.0);
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, 6, 4);
        let b = random(&mut rng, 4, 5);
        let run = || {
            let mut tape = Tape::new();
            let av = tape.constant(a.clone());
            let bv = tape.constant(b.clone());
            let c = tape.matmul(av, bv).unwrap();
            let s = tape.row_softmax(c, false).unwrap();
            tape.value(s).clone()
        };
        let (x, y) = (run(), run());
        prop_assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
