//! The property checks behind `cmr verify`. Each check reports its worst
//! error against a tolerance; `run` executes the selected ones in order.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cmr::{attend, memory_retrieve, memory_update, AttentionVars, Combine, CompressiveMemory, MemoryRead, MemoryShape};
use crate::data::{generate_corpus, GeneratorConfig};
use crate::gradcheck::{self, FD_TOLERANCE};
use crate::model::{Example, Model, ModelConfig, ModelError, Variant};
use crate::pipeline::{infer, preload_demos, train, DemoOrder, InferenceConfig, Prepared, RetrievalMode, TrainConfig};
use crate::retrieval::Embedder;
use crate::tensor::{Tensor, TensorError};

use super::schedules::{training_schedule, preload_schedule};
use super::oracles::{demo_linear_attention, max_abs_diff_rows, rows_of};

pub const CHECK_NAMES: [&str; 6] = [
    "gradcheck",
    "linear-attention",
    "empty-memory",
    "train-schedule",
    "preload-schedule",
    "permutation",
];

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub max_error: f64,
    pub tolerance: f64,
    pub detail: String,
    pub millis: u128,
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    /// Checks to run; empty runs all of them.
    pub only: Vec<String>,
    /// Retrieval denominator used by the memory checks.
    pub epsilon: f64,
    /// Random seeds per gradient check.
    pub seeds: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            only: Vec::new(),
            epsilon: crate::cmr::RETRIEVAL_EPSILON,
            seeds: 20,
        }
    }
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

fn outcome(name: &str, max_error: f64, tolerance: f64, detail: String, start: Instant) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        passed: max_error.is_finite() && max_error <= tolerance,
        max_error,
        tolerance,
        detail,
        millis: start.elapsed().as_millis(),
    }
}

fn failure(name: &str, tolerance: f64, detail: String, start: Instant) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        passed: false,
        max_error: f64::INFINITY,
        tolerance,
        detail,
        millis: start.elapsed().as_millis(),
    }
}

fn tensor_err(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(t) => t,
        other => TensorError::Invalid(other.to_string()),
    }
}

/// Analytic vs central-difference gradients of the full attention layer
/// with a differentiable memory, and of both host models with memory reads.
pub fn gradients(seeds: u64) -> CheckResult {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut at = String::new();
    let mut note = |err: f64, what: String| {
        if err >= worst {
            worst = err;
            at = what;
        }
    };
    for seed in 0..seeds {
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
        let weights = random(&mut rng, nq, d_model);
        let report = gradcheck::check(&inputs, 40, |t, v| {
            let params = AttentionVars {
                w_q: v[0],
                w_k: v[1],
                w_v: v[2],
                gamma: v[3],
                num_heads: heads,
            };
            let read = MemoryRead::tracked(t, v[5], &params, crate::cmr::RETRIEVAL_EPSILON)?;
            let out = attend(t, v[4], v[4], &params, Some(&read), false)?;
            let w = t.constant(weights.clone());
            let p = t.mul(out, w)?;
            Ok(t.sum(p))
        });
        match report {
            Ok(r) => note(r.max_rel_err, format!("layer seed {seed}")),
            Err(e) => note(f64::INFINITY, format!("layer seed {seed}: {e}")),
        }
        for variant in [Variant::EncDec, Variant::DecOnly] {
            let cfg = ModelConfig {
                d_model: 8,
                num_heads: 2,
                num_layers: 1,
                max_seq_len: 16,
                ff_dim: 12,
                ..ModelConfig::tiny(variant, 11, 300 + seed)
            };
            let mut model = Model::new(cfg).expect("model");
            for g in model.layout.cmr_sites().iter().filter_map(|s| s.gamma).collect::<Vec<_>>() {
                model.params[g].data_mut()[0] = rng.gen_range(-1.5..1.5);
            }
            let mut mem = model.empty_memory();
            for _ in 0..2 {
                let n = rng.gen_range(2..6);
                let demo: Vec<usize> = (0..n).map(|_| rng.gen_range(0..11)).collect();
                model.store_instance(&demo, &mut mem).expect("store");
            }
            let ex = Example {
                input: (0..5).map(|_| rng.gen_range(0..11)).collect(),
                target: (0..3).map(|_| rng.gen_range(0..11)).collect(),
            };
            let report = gradcheck::check(&model.params, 4, |tape, p| {
                let reads = model.memory_reads(tape, &mem).map_err(tensor_err)?;
                let (loss, _) = model.loss(tape, p, &ex, Some(&reads)).map_err(tensor_err)?;
                Ok(loss)
            });
            match report {
                Ok(r) => note(r.max_rel_err, format!("{variant:?} seed {seed}")),
                Err(e) => note(f64::INFINITY, format!("{variant:?} seed {seed}: {e}")),
            }
        }
    }
    outcome(
        "gradcheck",
        worst,
        FD_TOLERANCE,
        format!("{seeds} seeds, layer + both models; worst at {at}"),
        start,
    )
}

/// A memory holding one demonstration, read by projected queries, against
/// token-level kernelized attention over that demonstration.
pub fn linear_attention(epsilon: f64) -> CheckResult {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let heads = rng.gen_range(1..4);
        let d_model = heads * rng.gen_range(1..5);
        let d = d_model / heads;
        let (wk, wv) = (random(&mut rng, d_model, d_model), random(&mut rng, d_model, d_model));
        let n = rng.gen_range(1..12);
        let demo = random(&mut rng, n, d_model);
        let shape = MemoryShape {
            num_layers: 1,
            num_heads: heads,
            d_k: d,
            d_v: d,
        };
        let mut mem = CompressiveMemory::empty(shape);
        if let Err(e) = memory_update(&mut mem, 0, &wk, &wv, &demo) {
            return failure("linear-attention", 1e-10, e.to_string(), start);
        }
        let nq = rng.gen_range(1..6);
        let q = random(&mut rng, nq, d);
        for h in 0..heads {
            let got = match memory_retrieve(mem.slot(0, h), &q, epsilon) {
                Ok(g) => g,
                Err(e) => return failure("linear-attention", 1e-10, e.to_string(), start),
            };
            let want = demo_linear_attention(&rows_of(&q), &demo, &wk, &wv, h, d, d, crate::cmr::RETRIEVAL_EPSILON);
            let err = max_abs_diff_rows(&want, &got);
            worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
        }
    }
    outcome("linear-attention", worst, 1e-10, "50 random single-demonstration cases".into(), start)
}

/// Reading an empty memory must give exact zeros.
pub fn empty_memory(epsilon: f64) -> CheckResult {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let shape = MemoryShape {
        num_layers: 1,
        num_heads: 2,
        d_k: 3,
        d_v: 3,
    };
    let mut mem = CompressiveMemory::empty(shape);
    let (wk, wv) = (random(&mut rng, 6, 6), random(&mut rng, 6, 6));
    let demo = random(&mut rng, 4, 6);
    let _ = memory_update(&mut mem, 0, &wk, &wv, &demo);
    mem.reset();
    let q = random(&mut rng, 5, 3);
    let mut worst = 0.0f64;
    let mut non_finite = 0;
    for h in 0..2 {
        match memory_retrieve(mem.slot(0, h), &q, epsilon) {
            Ok(out) => {
                for &v in out.data() {
                    if v.is_finite() {
                        worst = worst.max(v.abs());
                    } else {
                        non_finite += 1;
                    }
                }
            }
            Err(e) => return failure("empty-memory", 0.0, e.to_string(), start),
        }
    }
    if non_finite > 0 {
        return failure(
            "empty-memory",
            0.0,
            format!("read divided 0 by {epsilon:e}: {non_finite} non-finite outputs (division by zero)"),
            start,
        );
    }
    outcome("empty-memory", worst, 0.0, format!("epsilon {epsilon:e}"), start)
}

fn fixture(seed: u64, epsilon: f64) -> (Prepared, Vec<Model>) {
    let cfg = GeneratorConfig {
        seed,
        n_train: 24,
        n_dev: 2,
        n_test: 4,
        ..Default::default()
    };
    let prep = Prepared::new(generate_corpus(&cfg, None).expect("corpus"), None, 128, Embedder::default()).expect("prepare");
    let models = [Variant::EncDec, Variant::DecOnly]
        .into_iter()
        .map(|v| {
            Model::new(ModelConfig {
                d_model: 16,
                num_heads: 2,
                num_layers: 2,
                ff_dim: 24,
                max_seq_len: 128,
                epsilon,
                ..ModelConfig::tiny(v, prep.vocab.len(), seed)
            })
            .expect("model")
        })
        .collect();
    (prep, models)
}

/// Training memory and counter trajectory against the transcribed schedule,
/// with parameters frozen.
pub fn train_schedule_check(epsilon: f64) -> CheckResult {
    let start = Instant::now();
    let (prep, models) = fixture(21, epsilon);
    let items = &prep.train[..16];
    let ex: Vec<Example> = items.iter().map(|i| i.example.clone()).collect();
    let ty: Vec<&str> = items.iter().map(|i| i.event_type.as_str()).collect();
    let mut worst = 0.0f64;
    let mut cases = 0;
    for mut model in models {
        for (b, mr) in [(1, 8), (4, 8), (4, 5), (3, 4), (1, 1)] {
            for combine in [Combine::Mean, Combine::Sum] {
                let cfg = TrainConfig {
                    epochs: 2,
                    batch_size: b,
                    grad_accum_steps: mr,
                    max_retrieval: mr,
                    learning_rate: 0.0,
                    combine,
                    record_memory: true,
                    ..Default::default()
                };
                let report = match train(&mut model, &ex, &ty, &cfg) {
                    Ok(r) => r,
                    Err(e) => return failure("train-schedule", 1e-12, e.to_string(), start),
                };
                let oracle = training_schedule(&model, &ex, &ty, 2, b, cfg.mix_fraction, mr, combine, |e| cfg.epoch_seed(e));
                if oracle.len() != report.trace.len() {
                    return failure("train-schedule", 1e-12, "batch count differs from the schedule".into(), start);
                }
                for (row, o) in report.trace.iter().zip(&oracle) {
                    let mem = row.combined.as_ref().expect("recorded");
                    if (row.t, row.reset, mem.stored_count()) != (o.t, o.reset, o.memory.stored_count()) {
                        return failure(
                            "train-schedule",
                            1e-12,
                            format!("counter mismatch at b={b} max_retrieval={mr}: t {} vs {}", row.t, o.t),
                            start,
                        );
                    }
                    if row.reset && row.stored_count != 0 {
                        return failure("train-schedule", 1e-12, "memory not empty after reset".into(), start);
                    }
                    worst = worst.max(mem.max_abs_diff(&o.memory));
                }
                cases += 1;
            }
        }
    }
    outcome("train-schedule", worst, 1e-12, format!("{cases} runs, 16 instances, 2 epochs"), start)
}

/// Batched preloading against the transcribed inference schedule.
pub fn preload_schedule_check(epsilon: f64) -> CheckResult {
    let start = Instant::now();
    let (prep, models) = fixture(22, epsilon);
    let mut worst = 0.0f64;
    for model in &models {
        for k in [0, 1, 4, 5, 10] {
            let toks: Vec<Vec<usize>> = (0..k).map(|i| model.demo_tokens(&prep.kb.demos[(i * 7) % prep.kb.len()])).collect();
            let refs: Vec<&[usize]> = toks.iter().map(Vec::as_slice).collect();
            for b in [1, 4] {
                for combine in [Combine::Mean, Combine::Sum] {
                    let got = match preload_demos(model, &refs, b, combine) {
                        Ok(m) => m,
                        Err(e) => return failure("preload-schedule", 1e-12, e.to_string(), start),
                    };
                    let want = preload_schedule(model, &refs, b, combine);
                    if got.stored_count() != want.stored_count() {
                        return failure("preload-schedule", 1e-12, format!("stored count differs at k={k}"), start);
                    }
                    worst = worst.max(got.max_abs_diff(&want));
                }
            }
        }
    }
    outcome(
        "preload-schedule",
        worst,
        1e-12,
        "k in {0,1,4,5,10}, batch sizes {1,4}, mean and sum".into(),
        start,
    )
}

/// Preloading eight demonstrations in batches of four under ten random
/// orders, and decoding under normal, reversed and shuffled order.
pub fn permutation(epsilon: f64) -> CheckResult {
    let start = Instant::now();
    let (prep, models) = fixture(23, epsilon);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut worst = 0.0f64;
    for model in &models {
        let toks: Vec<Vec<usize>> = (0..8).map(|i| model.demo_tokens(&prep.kb.demos[i])).collect();
        let refs: Vec<&[usize]> = toks.iter().map(Vec::as_slice).collect();
        let base = match preload_demos(model, &refs, 4, Combine::Mean) {
            Ok(m) => m,
            Err(e) => return failure("permutation", 1e-9, e.to_string(), start),
        };
        for _ in 0..10 {
            let mut perm = refs.clone();
            perm.shuffle(&mut rng);
            let m = preload_demos(model, &perm, 4, Combine::Mean).expect("preload");
            worst = worst.max(base.max_abs_diff(&m));
        }
        for (item, doc) in prep.test.iter().map(|i| (i, &prep.corpus.test[i.doc])).take(3) {
            let cfg = InferenceConfig {
                k: 8,
                mode: RetrievalMode::Topk,
                max_new: 16,
                ..Default::default()
            };
            let normal = infer(model, &prep, item, doc, &cfg).expect("infer");
            for order in [DemoOrder::Reverse, DemoOrder::Shuffle] {
                let other = infer(model, &prep, item, doc, &InferenceConfig { order, ..cfg.clone() }).expect("infer");
                worst = worst.max(normal.memory.max_abs_diff(&other.memory));
                if other.tokens != normal.tokens {
                    return failure("permutation", 1e-9, format!("{order:?} order changed the prediction"), start);
                }
            }
        }
    }
    outcome(
        "permutation",
        worst,
        1e-9,
        "k=8, batch 4: 10 random orders, and normal/reverse/shuffle predictions".into(),
        start,
    )
}

/// Runs the selected checks. Unknown names are reported as failures.
pub fn run(opts: &VerifyOptions) -> Vec<CheckResult> {
    let selected: Vec<&str> = if opts.only.is_empty() {
        CHECK_NAMES.to_vec()
    } else {
        opts.only.iter().map(String::as_str).collect()
    };
    selected
        .into_iter()
        .map(|name| match name {
            "gradcheck" => gradients(opts.seeds),
            "linear-attention" => linear_attention(opts.epsilon),
            "empty-memory" => empty_memory(opts.epsilon),
            "train-schedule" => train_schedule_check(opts.epsilon),
            "preload-schedule" => preload_schedule_check(opts.epsilon),
            "permutation" => permutation(opts.epsilon),
            other => failure(other, 0.0, format!("unknown check (known: {})", CHECK_NAMES.join(", ")), Instant::now()),
        })
        .collect()
}
