use cmr_core::cmr::{
    attend, gated_combine_values, memory_retrieve, memory_update, AttentionVars, CompressiveMemory, MemoryError,
    MemoryRead, MemoryShape, MemorySlot, RETRIEVAL_EPSILON,
};
use cmr_core::gradcheck::{self, FD_TOLERANCE};
use cmr_core::tensor::{Tape, Tensor};
use cmr_core::verify::oracles;
use proptest::prelude::*;
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn one_layer(heads: usize, d_model: usize) -> MemoryShape {
    MemoryShape { num_layers: 1, num_heads: heads, d_k: d_model / heads, d_v: d_model / heads }
}

#[test]
fn update_with_zero_demo_only_grows_n() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (wk, wv) = (random(&mut rng, 4, 4), random(&mut rng, 4, 4));
    let mut mem = CompressiveMemory::empty(one_layer(2, 4));
    memory_update(&mut mem, 0, &wk, &wv, &Tensor::zeros(&[5, 4])).unwrap();
    for h in 0..2 {
        assert!(mem.slot(0, h).m.iter().all(|&v| v == 0.0));
        assert!(mem.slot(0, h).n.iter().all(|&v| v == 5.0));
    }
}

#[test]
fn update_scalar_example() {
    let mut mem = CompressiveMemory::empty(one_layer(1, 1));
    let one = Tensor::scalar(1.0);
    memory_update(&mut mem, 0, &one, &one, &Tensor::scalar(1.0)).unwrap();
    mem.mark_stored();
    assert_eq!(mem.slot(0, 0).m, vec![2.0]);
    assert_eq!(mem.slot(0, 0).n, vec![2.0]);
    assert_eq!(mem.stored_count(), 1);
}

#[test]
fn update_errors() {
    let w = Tensor::zeros(&[4, 4]);
    let mut mem = CompressiveMemory::empty(one_layer(2, 4));
    assert!(matches!(
        memory_update(&mut mem, 0, &w, &w, &Tensor::zeros(&[0, 4])),
        Err(MemoryError::EmptyDemonstration)
    ));
    assert!(matches!(
        memory_update(&mut mem, 0, &w, &w, &Tensor::zeros(&[3, 5])),
        Err(MemoryError::WidthMismatch { expected: 4, actual: 5 })
    ));
    assert!(mem.is_empty());
}

#[test]
fn update_order_commutes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (wk, wv) = (random(&mut rng, 6, 6), random(&mut rng, 6, 6));
    let (d1, d2) = (random(&mut rng, 7, 6), random(&mut rng, 3, 6));
    let mut a = CompressiveMemory::empty(one_layer(3, 6));
    let mut b = a.clone();
    memory_update(&mut a, 0, &wk, &wv, &d1).unwrap();
    memory_update(&mut a, 0, &wk, &wv, &d2).unwrap();
    memory_update(&mut b, 0, &wk, &wv, &d2).unwrap();
    memory_update(&mut b, 0, &wk, &wv, &d1).unwrap();
    assert!(a.max_abs_diff(&b) <= 1e-12);
}

#[test]
fn retrieve_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let empty = CompressiveMemory::empty(one_layer(2, 4));
    let q = random(&mut rng, 5, 2);
    let out = memory_retrieve(empty.slot(0, 1), &q, RETRIEVAL_EPSILON).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));

    let slot = MemorySlot { m: vec![4.0], n: vec![2.0] };
    let out = memory_retrieve(&slot, &Tensor::scalar(1.0), RETRIEVAL_EPSILON).unwrap();
    assert!((out.item() - 8.0 / (4.0 + 1e-6)).abs() < 1e-15);
    assert!((out.item() - 2.0).abs() < 1e-6);

    assert!(memory_retrieve(&slot, &Tensor::zeros(&[1, 2]), RETRIEVAL_EPSILON).is_err());
}

#[test]
fn retrieve_after_reset_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (wk, wv, d) = (random(&mut rng, 4, 4), random(&mut rng, 4, 4), random(&mut rng, 3, 4));
    let mut mem = CompressiveMemory::empty(one_layer(2, 4));
    memory_update(&mut mem, 0, &wk, &wv, &d).unwrap();
    mem.mark_stored();
    mem.reset();
    let out = memory_retrieve(mem.slot(0, 0), &random(&mut rng, 2, 2), RETRIEVAL_EPSILON).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));

    let mut fresh = CompressiveMemory::empty(one_layer(2, 4));
    memory_update(&mut mem, 0, &wk, &wv, &d).unwrap();
    memory_update(&mut fresh, 0, &wk, &wv, &d).unwrap();
    assert_eq!(mem, fresh);
}

#[test]
fn single_demo_matches_token_level_linear_attention() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let heads = rng.gen_range(1..4);
        let d_model = heads * rng.gen_range(1..5);
        let d = d_model / heads;
        let (wk, wv) = (random(&mut rng, d_model, d_model), random(&mut rng, d_model, d_model));
        let n = rng.gen_range(1..12);
        let demo = random(&mut rng, n, d_model);
        let mut mem = CompressiveMemory::empty(one_layer(heads, d_model));
        memory_update(&mut mem, 0, &wk, &wv, &demo).unwrap();
        let nq = rng.gen_range(1..6);
        let q = random(&mut rng, nq, d);
        for h in 0..heads {
            let got = memory_retrieve(mem.slot(0, h), &q, RETRIEVAL_EPSILON).unwrap();
            let want = oracles::demo_linear_attention(&oracles::rows_of(&q), &demo, &wk, &wv, h, d, d, RETRIEVAL_EPSILON);
            assert!(oracles::max_abs_diff_rows(&want, &got) <= 1e-10, "seed {seed}");
        }
    }
}

#[test]
fn dot_attention_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d_model = 4;
    let (wq, wk, wv) = (random(&mut rng, 4, 4), random(&mut rng, 4, 4), random(&mut rng, 4, 4));
    let x_q = random(&mut rng, 3, 4);
    // single key token: every output row is that token's value row
    let x1 = random(&mut rng, 1, 4);
    let out = cmr_core::cmr::dot_attention(&x_q, &x1, &wq, &wk, &wv, 2, false).unwrap();
    let v = x1.matmul(&wv).unwrap();
    for (h, o) in out.iter().enumerate() {
        for r in 0..3 {
            for c in 0..2 {
                assert!((o.get(r, c) - v.get(0, h * 2 + c)).abs() < 1e-15);
            }
        }
    }
    // identical keys: uniform weights, output is the column mean of V
    let wk0 = Tensor::zeros(&[4, 4]);
    let x_kv = random(&mut rng, 5, 4);
    let out = cmr_core::cmr::dot_attention(&x_q, &x_kv, &wq, &wk0, &wv, 1, false).unwrap();
    let v = x_kv.matmul(&wv).unwrap();
    for c in 0..d_model {
        let mean: f64 = (0..5).map(|r| v.get(r, c)).sum::<f64>() / 5.0;
        assert!((out[0].get(1, c) - mean).abs() < 1e-14);
    }
    // two tokens against the brute-force expansion, causal and not
    for causal in [false, true] {
        let x2 = random(&mut rng, 2, 4);
        let out = cmr_core::cmr::dot_attention(&x2, &x2, &wq, &wk, &wv, 2, causal).unwrap();
        let (q, k, v) = (x2.matmul(&wq).unwrap(), x2.matmul(&wk).unwrap(), x2.matmul(&wv).unwrap());
        for h in 0..2 {
            let cols = |t: &Tensor| oracles::rows_of(t).iter().map(|r| r[h * 2..h * 2 + 2].to_vec()).collect::<Vec<_>>();
            let want = oracles::softmax_attention(&cols(&q), &cols(&k), &cols(&v), d_model, causal);
            assert!(oracles::max_abs_diff_rows(&want, &out[h]) <= 1e-12);
        }
    }
}

#[test]
fn gated_combine_examples() {
    let r = Tensor::from_rows(&[vec![4.0, 2.0]]);
    let d = Tensor::from_rows(&[vec![0.0, 6.0]]);
    assert_eq!(gated_combine_values(&r, &d, 0.0).unwrap().data(), &[2.0, 4.0]);
    assert_eq!(gated_combine_values(&r, &d, 800.0).unwrap(), r);
    assert_eq!(gated_combine_values(&r, &d, -800.0).unwrap(), d);
    let out = gated_combine_values(&Tensor::scalar(4.0), &Tensor::scalar(0.0), 3f64.ln()).unwrap();
    assert!((out.item() - 3.0).abs() < 1e-14);
    assert!(gated_combine_values(&r, &Tensor::scalar(1.0), 0.0).is_err());
}

#[test]
fn full_layer_gradients_match_finite_differences() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let heads = rng.gen_range(1..3);
        let d_model = heads * rng.gen_range(1..4);
        let (nq, nd) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let inputs = vec![
            random(&mut rng, d_model, d_model),
            random(&mut rng, d_model, d_model),
            random(&mut rng, d_model, d_model),
            Tensor::scalar(rng.gen_range(-1.0..1.0)),
            random(&mut rng, nq, d_model),
            random(&mut rng, nd, d_model),
        ];
        let weights = random(&mut rng, inputs[4].rows(), d_model);
        let report = gradcheck::check(&inputs, 40, |t, v| {
            let params = AttentionVars { w_q: v[0], w_k: v[1], w_v: v[2], gamma: v[3], num_heads: heads };
            let read = MemoryRead::tracked(t, v[5], &params, RETRIEVAL_EPSILON)?;
            let out = attend(t, v[4], v[4], &params, Some(&read), false)?;
            let w = t.constant(weights.clone());
            let p = t.mul(out, w)?;
            Ok(t.sum(p))
        })
        .unwrap();
        assert!(report.passed(FD_TOLERANCE), "seed {seed}: {report:?}");
    }
}

#[test]
fn empty_memory_halves_dot_attention_at_zero_gate() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut tape = Tape::new();
    let x = tape.constant(random(&mut rng, 4, 4));
    let p = AttentionVars {
        w_q: tape.constant(random(&mut rng, 4, 4)),
        w_k: tape.constant(random(&mut rng, 4, 4)),
        w_v: tape.constant(random(&mut rng, 4, 4)),
        gamma: tape.constant(Tensor::scalar(0.0)),
        num_heads: 2,
    };
    let mem = CompressiveMemory::empty(one_layer(2, 4));
    let read = MemoryRead::constant(&mut tape, &mem, 0, RETRIEVAL_EPSILON);
    let with = attend(&mut tape, x, x, &p, Some(&read), false).unwrap();
    let without = attend(&mut tape, x, x, &p, None, false).unwrap();
    for (a, b) in tape.value(with).data().iter().zip(tape.value(without).data()) {
        assert_eq!(*a, 0.5 * b);
    }
}

proptest! {
    #[test]
    fn memory_is_permutation_invariant(seed in 0u64..500, count in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (wk, wv) = (random(&mut rng, 4, 4), random(&mut rng, 4, 4));
        let demos: Vec<Tensor> = (0..count).map(|_| { let n = rng.gen_range(1..6); random(&mut rng, n, 4) }).collect();
        let mut order: Vec<usize> = (0..count).collect();
        order.shuffle(&mut rng);
        let mut a = CompressiveMemory::empty(one_layer(2, 4));
        let mut b = a.clone();
        for d in &demos { memory_update(&mut a, 0, &wk, &wv, d).unwrap(); }
        for &i in &order { memory_update(&mut b, 0, &wk, &wv, &demos[i]).unwrap(); }
        prop_assert!(a.max_abs_diff(&b) <= 1e-12);
        for h in 0..2 { prop_assert!(a.slot(0, h).n.iter().all(|&v| v >= 0.0)); }
    }

    #[test]
    fn retrieval_is_homogeneous_in_values(seed in 0u64..500, c in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (wk, wv) = (random(&mut rng, 4, 4), random(&mut rng, 4, 4));
        let demo = random(&mut rng, 5, 4);
        let scaled_wv = Tensor::new(vec![4, 4], wv.data().iter().map(|v| v * c).collect()).unwrap();
        let mut a = CompressiveMemory::empty(one_layer(1, 4));
        let mut b = a.clone();
        memory_update(&mut a, 0, &wk, &wv, &demo).unwrap();
        memory_update(&mut b, 0, &wk, &scaled_wv, &demo).unwrap();
        let q = random(&mut rng, 3, 4);
        let ra = memory_retrieve(a.slot(0, 0), &q, RETRIEVAL_EPSILON).unwrap();
        let rb = memory_retrieve(b.slot(0, 0), &q, RETRIEVAL_EPSILON).unwrap();
        for (x, y) in ra.data().iter().zip(rb.data()) {
            prop_assert!((x * c - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn retrieval_is_always_finite(seed in 0u64..500, scale in 0.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let demo = Tensor::new(vec![4, 3], (0..12).map(|_| rng.gen_range(-scale..=scale)).collect()).unwrap();
        let w = random(&mut rng, 3, 3);
        let mut mem = CompressiveMemory::empty(one_layer(1, 3));
        memory_update(&mut mem, 0, &w, &w, &demo).unwrap();
        let q = Tensor::new(vec![2, 3], (0..6).map(|_| rng.gen_range(-scale..=scale)).collect()).unwrap();
        prop_assert!(memory_retrieve(mem.slot(0, 0), &q, RETRIEVAL_EPSILON).unwrap().is_finite());
    }
}
