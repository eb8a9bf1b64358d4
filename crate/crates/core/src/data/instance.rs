use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ontology::Ontology;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{doc_id}: {reason}")]
    Invalid { doc_id: String, reason: String },
    #[error("event index {index} out of range for {doc_id} ({count} events)")]
    EventIndex {
        doc_id: String,
        index: usize,
        count: usize,
    },
    #[error("unknown event type {0:?}")]
    UnknownType(String),
    #[error("bad ontology: {0}")]
    Ontology(String),
    #[error("predictions and gold do not align: {0}")]
    IdMismatch(String),
    #[error("{path}:{line}: {source}")]
    Json {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Half-open token range `start..end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Argument {
    pub role: String,
    pub start: usize,
    pub end: usize,
}

impl Argument {
    pub fn span(&self) -> Span {
        Span::new(self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub event_type: String,
    pub trigger: Span,
    pub arguments: Vec<Argument>,
}

/// A tokenized document with its labeled events.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventInstance {
    pub doc_id: String,
    pub tokens: Vec<String>,
    pub events: Vec<Event>,
}

impl EventInstance {
    pub fn text(&self, span: Span) -> String {
        self.tokens[span.start..span.end].join(" ")
    }

    pub fn event(&self, index: usize) -> Result<&Event, DataError> {
        self.events.get(index).ok_or_else(|| DataError::EventIndex {
            doc_id: self.doc_id.clone(),
            index,
            count: self.events.len(),
        })
    }

    /// Gold role → argument text for one event.
    pub fn gold(&self, index: usize) -> Result<BTreeMap<String, String>, DataError> {
        let ev = self.event(index)?;
        Ok(ev
            .arguments
            .iter()
            .map(|a| (a.role.clone(), self.text(a.span())))
            .collect())
    }

    pub fn validate(&self, ontology: &Ontology) -> Result<(), DataError> {
        let bad = |reason: String| DataError::Invalid {
            doc_id: self.doc_id.clone(),
            reason,
        };
        let len = self.tokens.len();
        let in_bounds = |s: Span| s.start < s.end && s.end <= len;
        for ev in &self.events {
            let schema = ontology
                .schema(&ev.event_type)
                .ok_or_else(|| bad(format!("unknown event type {}", ev.event_type)))?;
            if !in_bounds(ev.trigger) {
                return Err(bad(format!("trigger {:?} out of bounds", ev.trigger)));
            }
            for a in &ev.arguments {
                if !in_bounds(a.span()) {
                    return Err(bad(format!("argument {} {:?} out of bounds", a.role, a.span())));
                }
                if !schema.roles.contains(&a.role) {
                    return Err(bad(format!("role {} not in {}", a.role, ev.event_type)));
                }
            }
        }
        Ok(())
    }
}

/// Identifies one event of one document.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EventRef {
    pub doc_id: String,
    pub event_index: usize,
}

/// Extracted arguments for one event; empty strings mean "not found".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub doc_id: String,
    pub event_index: usize,
    pub event_type: String,
    pub arguments: BTreeMap<String, String>,
}

impl Prediction {
    pub fn key(&self) -> EventRef {
        EventRef {
            doc_id: self.doc_id.clone(),
            event_index: self.event_index,
        }
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DataError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| DataError::Json {
            path: path.display().to_string(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
