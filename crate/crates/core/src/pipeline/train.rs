use serde::{Deserialize, Serialize};

use crate::cmr::{Combine, CompressiveMemory};
use crate::model::{Example, LrSchedule, Model, Optimizer, OptimizerKind, Variant};
use crate::tensor::Tape;

use super::rerank::shuffle_rerank;
use super::{PipelineError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Instances whose gradients are averaged into one parameter update.
    pub grad_accum_steps: usize,
    /// Instances stored in memory before it is reset.
    pub max_retrieval: usize,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub seed: u64,
    /// Share of each batch drawn from other event types.
    pub mix_fraction: f64,
    pub combine: Combine,
    pub optimizer: OptimizerKind,
    pub clip_norm: f64,
    /// Off trains a plain model that never reads or writes memory.
    pub use_memory: bool,
    /// Keep a copy of the memory after every batch in the trace.
    #[serde(default)]
    pub record_memory: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 4,
            grad_accum_steps: 8,
            max_retrieval: 8,
            learning_rate: 1e-3,
            warmup_ratio: 0.1,
            seed: 0,
            mix_fraction: 0.2,
            combine: Combine::Mean,
            optimizer: OptimizerKind::Sgd,
            clip_norm: 1.0,
            use_memory: true,
            record_memory: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 || self.grad_accum_steps == 0 || self.max_retrieval == 0 {
            return bad("batch_size, grad_accum_steps and max_retrieval must be at least 1");
        }
        if !(0.0..1.0).contains(&self.mix_fraction) {
            return bad("mix_fraction must lie in [0, 1)");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must lie in [0, 1]");
        }
        Ok(())
    }

    /// Seed of the instance order in `epoch`.
    pub fn epoch_seed(&self, epoch: usize) -> u64 {
        self.seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }
}

/// One row of the metrics log, written after each batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Instances in memory once the batch was folded in, before any reset.
    pub stored_count: usize,
    pub cycle_id: usize,
}

/// Memory bookkeeping after one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    /// Counter after the batch, before a reset.
    pub t: usize,
    pub cycle_id: usize,
    pub reset: bool,
    /// Stored count once the batch is done, after any reset.
    pub stored_count: usize,
    pub update: bool,
    /// Memory after folding the batch in, before any reset.
    pub combined: Option<CompressiveMemory>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    pub trace: Vec<TraceRow>,
    pub updates: usize,
}

impl TrainReport {
    pub fn first_loss(&self) -> Option<f64> {
        self.log.first().map(|r| r.loss)
    }

    /// Mean loss of the last `n` batches.
    pub fn tail_loss(&self, n: usize) -> Option<f64> {
        let tail = &self.log[self.log.len().saturating_sub(n)..];
        (!tail.is_empty()).then(|| tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64)
    }
}

/// Parameter updates a run over `n` instances performs.
pub fn total_updates(n: usize, cfg: &TrainConfig) -> usize {
    let b = cfg.batch_size.max(1);
    let mut pending = 0;
    let mut updates = 0;
    for _ in 0..cfg.epochs {
        let mut left = n;
        while left > 0 {
            let size = left.min(b);
            left -= size;
            pending += size;
            if pending >= cfg.grad_accum_steps {
                updates += 1;
                pending = 0;
            }
        }
    }
    updates + usize::from(pending > 0)
}

struct Accumulator {
    grads: Vec<Vec<f64>>,
    count: usize,
}

impl Accumulator {
    fn new(model: &Model) -> Self {
        Self {
            grads: model.params.iter().map(|p| vec![0.0; p.len()]).collect(),
            count: 0,
        }
    }

    fn apply(&mut self, model: &mut Model, opt: &mut Optimizer, lr: f64) {
        let c = 1.0 / self.count as f64;
        self.grads.iter_mut().flatten().for_each(|g| *g *= c);
        opt.step(&mut model.params, &self.grads, lr);
        self.grads.iter_mut().flatten().for_each(|g| *g = 0.0);
        self.count = 0;
    }
}

/// Trains `model` on `examples` with in-batch memory accumulation.
///
/// Every instance of a batch reads the memory as it stood when the batch
/// started. Each instance's own contribution is computed from an empty
/// memory (no gradient flows through it), and after the batch the
/// contributions are folded in with `cfg.combine`. Once the counter passes
/// `max_retrieval` the memory and counter are reset. Parameters are updated
/// every `grad_accum_steps` instances (checked at batch boundaries) with
/// the averaged gradients, and once more at the end for any remainder.
pub fn train(model: &mut Model, examples: &[Example], types: &[&str], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(PipelineError::EmptyData);
    }
    if types.len() != examples.len() {
        return Err(PipelineError::Config(format!(
            "{} examples but {} event types",
            examples.len(),
            types.len()
        )));
    }
    let schedule = LrSchedule::new(cfg.learning_rate, cfg.warmup_ratio, total_updates(examples.len(), cfg));
    let mut opt = Optimizer::new(cfg.optimizer, cfg.clip_norm, &model.params);
    let mut acc = Accumulator::new(model);
    let mut report = TrainReport::default();
    let mut mem = model.empty_memory();
    let mut t = 1;
    let mut cycle_id = 0;
    let reuse_encoder = model.config.variant == Variant::EncDec && !model.config.store_target;

    for epoch in 0..cfg.epochs {
        let order = shuffle_rerank(types, cfg.epoch_seed(epoch), cfg.mix_fraction, cfg.batch_size);
        for batch in order.chunks(cfg.batch_size) {
            let step = report.log.len();
            let mut deltas = Vec::with_capacity(batch.len());
            let mut loss_sum = 0.0;
            for &i in batch {
                let ex = &examples[i];
                let mut tape = Tape::new();
                let p = model.bind(&mut tape, true);
                let reads = if cfg.use_memory {
                    Some(model.memory_reads(&mut tape, &mem)?)
                } else {
                    None
                };
                let (loss, enc) = model.loss(&mut tape, &p, ex, reads.as_deref())?;
                let value = tape.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(PipelineError::NonFinite { step, loss: value });
                }
                loss_sum += value;
                tape.backward(loss)?;
                for (g, &v) in acc.grads.iter_mut().zip(&p) {
                    if let Some(d) = tape.take_grad(v) {
                        g.iter_mut().zip(d).for_each(|(a, b)| *a += b);
                    }
                }
                if cfg.use_memory {
                    let mut delta = model.empty_memory();
                    match enc {
                        Some(e) if reuse_encoder => {
                            let sources = vec![tape.value(e).clone(); model.config.num_layers];
                            model.store_sources(&sources, &mut delta)?;
                        }
                        _ => model.store_instance(&model.demo_tokens(ex), &mut delta)?,
                    }
                    deltas.push(delta);
                }
                t += 1;
            }
            if cfg.use_memory {
                mem = CompressiveMemory::combine(&mem, &deltas, cfg.combine)?;
            }
            acc.count += batch.len();
            report.log.push(LogRow {
                step,
                loss: loss_sum / batch.len() as f64,
                lr: schedule.lr(report.updates),
                stored_count: mem.stored_count(),
                cycle_id,
            });
            let combined = cfg.record_memory.then(|| mem.clone());
            let t_after = t;
            let reset = t > cfg.max_retrieval;
            if reset {
                mem.reset();
                t = 1;
                cycle_id += 1;
            }
            let update = acc.count >= cfg.grad_accum_steps;
            if update {
                acc.apply(model, &mut opt, schedule.lr(report.updates));
                report.updates += 1;
            }
            report.trace.push(TraceRow {
                t: t_after,
                cycle_id: report.log[step].cycle_id,
                reset,
                stored_count: mem.stored_count(),
                update,
                combined,
            });
        }
    }
    if acc.count > 0 {
        acc.apply(model, &mut opt, schedule.lr(report.updates));
        report.updates += 1;
    }
    Ok(report)
}
