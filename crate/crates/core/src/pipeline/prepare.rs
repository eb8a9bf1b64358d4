use crate::data::{
    build_prefix_input, format_instance, Corpus, EventInstance, Ontology, Vocab, EOS,
};
use crate::model::Example;
use crate::retrieval::{Embedder, RetrievalIndex};

use super::Result;

/// One event of one document, formatted and encoded.
#[derive(Debug, Clone)]
pub struct Item {
    /// Position of the document in its split.
    pub doc: usize,
    pub doc_id: String,
    pub event_index: usize,
    pub event_type: String,
    pub prompt: Vec<String>,
    /// Context with the trigger marked.
    pub context: Vec<String>,
    pub target: Vec<String>,
    pub example: Example,
}

/// Vocabulary over the training documents, the ontology and the format
/// tokens.
pub fn build_vocab(train: &[EventInstance], ontology: &Ontology) -> Vocab {
    let mut words: Vec<String> = Vec::new();
    for d in train {
        words.extend(d.tokens.iter().cloned());
    }
    for schema in ontology.types.values() {
        words.extend(schema.roles.iter().cloned());
        words.extend(schema.template.split_whitespace().map(String::from));
    }
    Vocab::build(words.iter().map(String::as_str))
}

/// Ids of `tokens`, cut to `max_len` while keeping a final `[EOS]`.
pub fn encode_input(vocab: &Vocab, tokens: &[String], max_len: usize) -> Vec<usize> {
    let mut ids = vocab.encode(tokens);
    if ids.len() > max_len {
        ids.truncate(max_len);
        if tokens.last().map(String::as_str) == Some(EOS) {
            if let Some(last) = ids.last_mut() {
                *last = Vocab::EOS_ID;
            }
        }
    }
    ids
}

fn items_of(docs: &[EventInstance], ontology: &Ontology, vocab: &Vocab, max_len: usize) -> Result<Vec<Item>> {
    let mut out = Vec::new();
    for (di, d) in docs.iter().enumerate() {
        for (ei, ev) in d.events.iter().enumerate() {
            let f = format_instance(d, ei, ontology)?;
            let example = Example {
                input: encode_input(vocab, &f.input, max_len),
                target: vocab.encode(&f.target),
            };
            out.push(Item {
                doc: di,
                doc_id: d.doc_id.clone(),
                event_index: ei,
                event_type: ev.event_type.clone(),
                prompt: f.prompt,
                context: f.context,
                target: f.target,
                example,
            });
        }
    }
    Ok(out)
}

/// The retrieval knowledge base: the training documents, each represented
/// by its first event. `demos` holds what a demonstration stores in memory
/// and `predictions` the filled template the prefix baseline prepends.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    pub index: RetrievalIndex,
    pub demos: Vec<Example>,
    pub predictions: Vec<Vec<String>>,
}

impl KnowledgeBase {
    pub fn build(docs: &[EventInstance], ontology: &Ontology, vocab: &Vocab, max_len: usize, embedder: Embedder) -> Result<Self> {
        let index = RetrievalIndex::build(embedder, docs)?;
        let mut demos = Vec::with_capacity(docs.len());
        let mut predictions = Vec::with_capacity(docs.len());
        for d in docs {
            let f = format_instance(d, 0, ontology)?;
            demos.push(Example {
                input: encode_input(vocab, &f.input, max_len),
                target: vocab.encode(&f.target),
            });
            predictions.push(f.target);
        }
        Ok(Self {
            index,
            demos,
            predictions,
        })
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }
}

/// A corpus turned into model inputs.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub corpus: Corpus,
    pub vocab: Vocab,
    pub train: Vec<Item>,
    pub dev: Vec<Item>,
    pub test: Vec<Item>,
    pub kb: KnowledgeBase,
    pub max_len: usize,
}

impl Prepared {
    pub fn new(corpus: Corpus, vocab: Option<Vocab>, max_len: usize, embedder: Embedder) -> Result<Self> {
        let vocab = vocab.unwrap_or_else(|| build_vocab(&corpus.train, &corpus.ontology));
        let train = items_of(&corpus.train, &corpus.ontology, &vocab, max_len)?;
        let dev = items_of(&corpus.dev, &corpus.ontology, &vocab, max_len)?;
        let test = items_of(&corpus.test, &corpus.ontology, &vocab, max_len)?;
        let kb = KnowledgeBase::build(&corpus.train, &corpus.ontology, &vocab, max_len, embedder)?;
        Ok(Self {
            corpus,
            vocab,
            train,
            dev,
            test,
            kb,
            max_len,
        })
    }

    /// The prefix-baseline input of `item` with knowledge-base entry
    /// `candidate` (or no candidate) in front.
    pub fn prefix_example(&self, item: &Item, candidate: Option<usize>) -> Example {
        let cand: &[String] = candidate.map_or(&[], |c| self.kb.predictions[c].as_slice());
        let tokens = build_prefix_input(cand, &item.prompt, &item.context, self.max_len);
        Example {
            input: self.vocab.encode(&tokens),
            target: item.example.target.clone(),
        }
    }

    /// Prefix-baseline training inputs: each training event with the filled
    /// template of its nearest other training document in front.
    pub fn prefix_training_examples(&self) -> Result<Vec<Example>> {
        let index = &self.kb.index;
        self.train
            .iter()
            .map(|item| {
                let doc = &self.corpus.train[item.doc];
                let q = index.embedder().embed_instance(doc)?;
                let hit = index.top_k(&q, 1, Some(&doc.doc_id))?.first().map(|h| h.index);
                Ok(self.prefix_example(item, hit))
            })
            .collect()
    }

    /// Documents of the split an item list came from.
    pub fn docs_for(&self, split: &str) -> &[EventInstance] {
        match split {
            "train" => &self.corpus.train,
            "dev" => &self.corpus.dev,
            _ => &self.corpus.test,
        }
    }
}
