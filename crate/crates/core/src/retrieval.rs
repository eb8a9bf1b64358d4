//! Similarity retrieval over a knowledge base of training documents.
//!
//! Embeddings come either from a hashed bag of words (FNV-1a 64 of each
//! token's UTF-8 bytes, modulo the dimension, counts L2-normalized) or from an
//! external JSONL table keyed by document id.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{read_jsonl, DataError, EventInstance};

pub const DEFAULT_DIM: usize = 256;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot embed an empty text")]
    EmptyText,
    #[error("no embedding for id {0:?}")]
    MissingId(String),
    #[error("embedding has dimension {actual}, index uses {expected}")]
    Dimension { expected: usize, actual: usize },
    #[error("embedding for {0:?} has non-finite entries")]
    NonFinite(String),
    #[error("the retrieval index is empty")]
    EmptyIndex,
    #[error("duplicate id {0:?} in index")]
    DuplicateId(String),
    #[error("asked for {k} random candidates but only {available} are available")]
    TooMany { k: usize, available: usize },
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, RetrievalError>;

pub fn hash_bucket(token: &str, dim: usize) -> usize {
    let mut h = FnvHasher::default();
    h.write(token.as_bytes());
    (h.finish() % dim as u64) as usize
}

pub fn hashed_bow<S: AsRef<str>>(tokens: &[S], dim: usize) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(RetrievalError::EmptyText);
    }
    let mut v = vec![0.0; dim];
    for t in tokens {
        v[hash_bucket(t.as_ref(), dim)] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    Ok(v)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ExternalRecord {
    id: String,
    embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Embedder {
    HashedBow { dim: usize },
    External { dim: usize, table: HashMap<String, Vec<f64>> },
}

impl Default for Embedder {
    fn default() -> Self {
        Embedder::HashedBow { dim: DEFAULT_DIM }
    }
}

impl Embedder {
    /// Loads `{"id": .., "embedding": [..]}` lines; all rows must share one
    /// dimension.
    pub fn load_external(path: &Path) -> Result<Embedder> {
        let rows: Vec<ExternalRecord> = read_jsonl(path)?;
        let dim = rows.first().map_or(0, |r| r.embedding.len());
        let mut table = HashMap::with_capacity(rows.len());
        for r in rows {
            if r.embedding.len() != dim {
                return Err(RetrievalError::Dimension {
                    expected: dim,
                    actual: r.embedding.len(),
                });
            }
            if !r.embedding.iter().all(|x| x.is_finite()) {
                return Err(RetrievalError::NonFinite(r.id));
            }
            if table.insert(r.id.clone(), r.embedding).is_some() {
                return Err(RetrievalError::DuplicateId(r.id));
            }
        }
        Ok(Embedder::External { dim, table })
    }

    pub fn dim(&self) -> usize {
        match self {
            Embedder::HashedBow { dim } | Embedder::External { dim, .. } => *dim,
        }
    }

    pub fn embed<S: AsRef<str>>(&self, id: &str, tokens: &[S]) -> Result<Vec<f64>> {
        match self {
            Embedder::HashedBow { dim } => hashed_bow(tokens, *dim),
            Embedder::External { table, .. } => table
                .get(id)
                .cloned()
                .ok_or_else(|| RetrievalError::MissingId(id.to_string())),
        }
    }

    pub fn embed_instance(&self, inst: &EventInstance) -> Result<Vec<f64>> {
        self.embed(&inst.doc_id, &inst.tokens)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub id: String,
    pub event_type: String,
    pub embedding: Vec<f64>,
}

/// One retrieved candidate: its position in the index and its raw similarity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub index: usize,
    pub similarity: f64,
}

/// Immutable knowledge base, one entry per document.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    embedder: Embedder,
    entries: Vec<Entry>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl RetrievalIndex {
    pub fn build(embedder: Embedder, docs: &[EventInstance]) -> Result<Self> {
        let mut seen = std::collections::HashSet::with_capacity(docs.len());
        let mut entries = Vec::with_capacity(docs.len());
        for d in docs {
            if !seen.insert(d.doc_id.as_str()) {
                return Err(RetrievalError::DuplicateId(d.doc_id.clone()));
            }
            entries.push(Entry {
                id: d.doc_id.clone(),
                event_type: d.events.first().map(|e| e.event_type.clone()).unwrap_or_default(),
                embedding: embedder.embed_instance(d)?,
            });
        }
        Ok(Self { embedder, entries })
    }

    pub fn embedder(&self) -> &Embedder {
        &self.embedder
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn check_dim(&self, query: &[f64]) -> Result<()> {
        let expected = self.embedder.dim();
        if query.len() != expected {
            return Err(RetrievalError::Dimension {
                expected,
                actual: query.len(),
            });
        }
        Ok(())
    }

    pub fn similarities(&self, query: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(query)?;
        Ok(self.entries.iter().map(|e| dot(query, &e.embedding)).collect())
    }

    /// Softmax of the similarities over the whole index, in index order.
    pub fn score_all(&self, query: &[f64]) -> Result<Vec<f64>> {
        if self.entries.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        let f = self.similarities(query)?;
        let max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = f.iter().map(|x| (x - max).exp()).collect();
        let sum: f64 = exp.iter().sum();
        Ok(exp.into_iter().map(|e| e / sum).collect())
    }

    /// The `k` most similar entries, best first, ties by ascending id. An
    /// entry whose id equals `exclude` is never returned.
    pub fn top_k(&self, query: &[f64], k: usize, exclude: Option<&str>) -> Result<Vec<Hit>> {
        if k == 0 {
            return Ok(Vec::new());
        }
        let f = self.similarities(query)?;
        let mut hits: Vec<Hit> = f
            .into_iter()
            .enumerate()
            .filter(|(i, _)| Some(self.entries[*i].id.as_str()) != exclude)
            .map(|(index, similarity)| Hit { index, similarity })
            .collect();
        hits.sort_by(|a, b| {
            b.similarity
                .partial_cmp(&a.similarity)
                .unwrap_or(Ordering::Equal)
                .then_with(|| self.entries[a.index].id.cmp(&self.entries[b.index].id))
        });
        hits.truncate(k);
        Ok(hits)
    }

    /// Uniform sample of `k` entry positions without replacement.
    pub fn random(&self, k: usize, seed: u64, exclude: Option<&str>) -> Result<Vec<usize>> {
        let pool: Vec<usize> = (0..self.entries.len())
            .filter(|&i| Some(self.entries[i].id.as_str()) != exclude)
            .collect();
        if k > pool.len() {
            return Err(RetrievalError::TooMany {
                k,
                available: pool.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(index::sample(&mut rng, pool.len(), k)
            .into_iter()
            .map(|j| pool[j])
            .collect())
    }
}
