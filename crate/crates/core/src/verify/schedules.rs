//! Step-by-step reference versions of the training and inference memory
//! schedules, with every memory kept in a map indexed by the instance
//! counter `t`. The running memory before a batch lives at `t − |b| − 1`,
//! the batch's instance memories at `t − |b| … t − 1`, and the batch result
//! is written to `t − 1`, so preloading `k` demonstrations ends at `M_k`.

use std::collections::BTreeMap;

use crate::cmr::{Combine, CompressiveMemory};
use crate::model::{Example, Model};
use crate::pipeline::shuffle_rerank;

fn fold(base: &CompressiveMemory, parts: &[&CompressiveMemory], combine: Combine) -> CompressiveMemory {
    let shape = base.shape();
    let mut out = base.clone();
    let c = match combine {
        Combine::Mean => 1.0 / parts.len() as f64,
        Combine::Sum => 1.0,
    };
    for l in 0..shape.num_layers {
        for h in 0..shape.num_heads {
            let mut m = vec![0.0; shape.d_k * shape.d_v];
            let mut n = vec![0.0; shape.d_k];
            for p in parts {
                for (a, b) in m.iter_mut().zip(&p.slot(l, h).m) {
                    *a += b;
                }
                for (a, b) in n.iter_mut().zip(&p.slot(l, h).n) {
                    *a += b;
                }
            }
            let slot = out.slot_mut(l, h);
            for (a, b) in slot.m.iter_mut().zip(&m) {
                *a += c * b;
            }
            for (a, b) in slot.n.iter_mut().zip(&n) {
                *a += c * b;
            }
        }
    }
    for _ in parts {
        out.mark_stored();
    }
    out
}

/// Memory state after one training batch.
#[derive(Debug, Clone)]
pub struct OracleStep {
    pub t: usize,
    pub reset: bool,
    pub memory: CompressiveMemory,
}

/// The training memory schedule with parameters held fixed: one entry per
/// batch with the counter and the memory after the update line, before any
/// reset.
pub fn training_schedule(
    model: &Model,
    examples: &[Example],
    types: &[&str],
    epochs: usize,
    batch_size: usize,
    mix_fraction: f64,
    max_retrieval: usize,
    combine: Combine,
    epoch_seed: impl Fn(usize) -> u64,
) -> Vec<OracleStep> {
    let mut mem: BTreeMap<usize, CompressiveMemory> = BTreeMap::new();
    let mut steps = Vec::new();
    mem.insert(0, model.empty_memory());
    let mut t = 1;
    for e in 0..epochs {
        let d = shuffle_rerank(types, epoch_seed(e), mix_fraction, batch_size);
        for b in d.chunks(batch_size) {
            for &s in b {
                let stored = model
                    .memory_delta(&model.demo_tokens(&examples[s]))
                    .expect("oracle store");
                mem.insert(t, stored);
                t += 1;
            }
            let n = b.len();
            let parts: Vec<&CompressiveMemory> = (1..=n).map(|i| &mem[&(t - n - 1 + i)]).collect();
            let updated = fold(&mem[&(t - n - 1)], &parts, combine);
            mem.insert(t - 1, updated);
            let reset = t > max_retrieval;
            steps.push(OracleStep {
                t,
                reset,
                memory: mem[&(t - 1)].clone(),
            });
            if reset {
                mem.clear();
                mem.insert(0, model.empty_memory());
                t = 1;
            }
        }
    }
    steps
}

/// The inference preloading schedule: returns `M_k` for `demos` taken in
/// the given order, `batch_size` at a time.
pub fn preload_schedule(model: &Model, demos: &[&[usize]], batch_size: usize, combine: Combine) -> CompressiveMemory {
    let mut mem: BTreeMap<usize, CompressiveMemory> = BTreeMap::new();
    mem.insert(0, model.empty_memory());
    let mut t = 1;
    for batch in demos.chunks(batch_size) {
        for d in batch {
            let mut m = mem[&0].clone();
            model.store_instance(d, &mut m).expect("oracle store");
            mem.insert(t, m);
            t += 1;
        }
        let n = batch.len();
        let parts: Vec<&CompressiveMemory> = (1..=n).map(|i| &mem[&(t - n - 1 + i)]).collect();
        let updated = fold(&mem[&(t - n - 1)], &parts, combine);
        mem.insert(t - 1, updated);
    }
    mem[&demos.len()].clone()
}
