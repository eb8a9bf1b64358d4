use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cmr::{Combine, CompressiveMemory};
use crate::data::{evaluate, parse_prediction, EventInstance, MetricReport, Prediction};
use crate::model::Model;
use crate::retrieval::hash_bucket;

use super::prepare::{Item, Prepared};
use super::{PipelineError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalMode {
    #[default]
    Topk,
    Random,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DemoOrder {
    #[default]
    Normal,
    Reverse,
    Shuffle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub k: usize,
    pub demo_batch_size: usize,
    pub mode: RetrievalMode,
    pub order: DemoOrder,
    pub seed: u64,
    pub combine: Combine,
    /// Cap on generated tokens.
    pub max_new: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            k: 5,
            demo_batch_size: 4,
            mode: RetrievalMode::Topk,
            order: DemoOrder::Normal,
            seed: 0,
            combine: Combine::Mean,
            max_new: 64,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.demo_batch_size == 0 {
            return Err(PipelineError::Config("demo_batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-query seed for random retrieval and shuffled order.
pub fn query_seed(seed: u64, doc_id: &str, event_index: usize) -> u64 {
    let h = hash_bucket(doc_id, usize::MAX) as u64;
    seed ^ h ^ (event_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Knowledge-base positions of the demonstrations for one query, in the
/// order they will be preloaded. The query document itself is never
/// returned.
pub fn select_demos(prep: &Prepared, doc: &EventInstance, event_index: usize, cfg: &InferenceConfig) -> Result<Vec<usize>> {
    if cfg.k == 0 || cfg.mode == RetrievalMode::None {
        return Ok(Vec::new());
    }
    let seed = query_seed(cfg.seed, &doc.doc_id, event_index);
    let index = &prep.kb.index;
    let mut demos = match cfg.mode {
        RetrievalMode::Topk => {
            let q = index.embedder().embed_instance(doc)?;
            index.top_k(&q, cfg.k, Some(&doc.doc_id))?.into_iter().map(|h| h.index).collect()
        }
        RetrievalMode::Random => index.random(cfg.k, seed, Some(&doc.doc_id))?,
        RetrievalMode::None => Vec::new(),
    };
    match cfg.order {
        DemoOrder::Normal => {}
        DemoOrder::Reverse => demos.reverse(),
        DemoOrder::Shuffle => demos.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.rotate_left(17))),
    }
    Ok(demos)
}

/// Builds the memory for a list of demonstrations, `demo_batch_size` at a
/// time. Within a batch every demonstration's contribution starts from an
/// empty memory; the batch total is folded into the running memory with
/// `combine`.
pub fn preload_demos(model: &Model, demos: &[&[usize]], demo_batch_size: usize, combine: Combine) -> Result<CompressiveMemory> {
    if demo_batch_size == 0 {
        return Err(PipelineError::Config("demo_batch_size must be at least 1".into()));
    }
    let mut mem = model.empty_memory();
    for batch in demos.chunks(demo_batch_size) {
        let sources = model.memory_sources_many(batch)?;
        let mut total = model.empty_memory();
        for s in &sources {
            let mut delta = model.empty_memory();
            model.store_sources(s, &mut delta)?;
            total.add_assign(&delta)?;
        }
        mem = CompressiveMemory::fold_batch(&mem, &total, batch.len(), combine)?;
    }
    Ok(mem)
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub tokens: Vec<usize>,
    pub demos: Vec<usize>,
    pub memory: CompressiveMemory,
}

/// Retrieves, preloads and decodes one query with memory reads on.
pub fn infer(model: &Model, prep: &Prepared, item: &Item, doc: &EventInstance, cfg: &InferenceConfig) -> Result<Inference> {
    cfg.validate()?;
    let demos = select_demos(prep, doc, item.event_index, cfg)?;
    let tokens: Vec<Vec<usize>> = demos.iter().map(|&d| model.demo_tokens(&prep.kb.demos[d])).collect();
    let refs: Vec<&[usize]> = tokens.iter().map(Vec::as_slice).collect();
    let memory = preload_demos(model, &refs, cfg.demo_batch_size, cfg.combine)?;
    let out = model.greedy_decode(&item.example.input, Some(&memory), cfg.max_new)?;
    Ok(Inference {
        tokens: out,
        demos,
        memory,
    })
}

/// Decodes one query for the prefix baseline: the first selected
/// demonstration's filled template goes in front of the input and memory is
/// never read.
pub fn infer_prefix(model: &Model, prep: &Prepared, item: &Item, doc: &EventInstance, cfg: &InferenceConfig) -> Result<Vec<usize>> {
    let demos = select_demos(prep, doc, item.event_index, &InferenceConfig { k: cfg.k.min(1), ..cfg.clone() })?;
    let ex = prep.prefix_example(item, demos.first().copied());
    Ok(model.greedy_decode(&ex.input, None, cfg.max_new)?)
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub predictions: Vec<Prediction>,
    pub report: MetricReport,
    pub wall_ms: u128,
}

/// Runs every item of a split and scores the parsed predictions. With
/// `prefix` the model is treated as the prefix baseline.
pub fn evaluate_items(
    model: &Model,
    prep: &Prepared,
    items: &[Item],
    docs: &[EventInstance],
    cfg: &InferenceConfig,
    prefix: bool,
) -> Result<EvalOutput> {
    let start = Instant::now();
    let mut predictions = Vec::with_capacity(items.len());
    for item in items {
        let doc = &docs[item.doc];
        let tokens = if prefix {
            infer_prefix(model, prep, item, doc, cfg)?
        } else {
            infer(model, prep, item, doc, cfg)?.tokens
        };
        let words = prep.vocab.decode(&tokens);
        predictions.push(Prediction {
            doc_id: item.doc_id.clone(),
            event_index: item.event_index,
            event_type: item.event_type.clone(),
            arguments: parse_prediction(&words, &prep.corpus.ontology, &item.event_type),
        });
    }
    let report = evaluate(&predictions, docs)?;
    Ok(EvalOutput {
        predictions,
        report,
        wall_ms: start.elapsed().as_millis(),
    })
}
