//! Synthetic event argument extraction data: the instance model, the
//! ontology of event types and role templates, a seeded corpus generator,
//! prompt/target formatting and parsing, and the extraction metrics.

mod format;
mod generate;
mod instance;
mod metrics;
mod ontology;
mod vocab;

pub use format::{
    build_prefix_input, format_instance, mark_trigger, parse_prediction, prompt_tokens, target_tokens, Formatted,
    ABSENT, EOS, SEP_CLOSE, SEP_OPEN, SLOT_END, SLOT_SEP, TRIGGER_CLOSE, TRIGGER_OPEN,
};
pub use generate::{generate_corpus, Corpus, GeneratorConfig, SPLITS};
pub use instance::{
    read_jsonl, write_jsonl, Argument, DataError, Event, EventInstance, EventRef, Prediction, Span,
};
pub use metrics::{evaluate, Counts, MetricReport};
pub use ontology::{EventSchema, Ontology};
pub use vocab::{Vocab, PAD, SPECIALS, UNK};
